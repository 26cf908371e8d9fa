"""Patch tokenizer and pre-norm transformer with intermediate-layer taps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import LayerNorm, Linear, Module, param


@dataclass
class EncoderConfig:
    num_layers: int = 12
    embed_dim: int = 64
    heads: int = 4
    tap_layers: tuple = (2, 5, 8, 11)
    out_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if not self.tap_layers:
            raise ValueError("at least one tap layer is required")
        if any(b <= a for a, b in zip(self.tap_layers, self.tap_layers[1:])):
            raise ValueError(f"tap layers must be strictly increasing: {self.tap_layers}")
        if self.tap_layers[0] < 1 or self.tap_layers[-1] > self.num_layers:
            raise ValueError(f"tap layers {self.tap_layers} outside [1, {self.num_layers}]")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")


@dataclass
class FeaturePyramid:
    taps: dict = field(default_factory=dict)   # layer -> Tensor (G, d)
    cls: Tensor | None = None                   # (d,)
    global_embedding: Tensor | None = None      # (D,), unit norm


class Block(Module):
    """Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)
        self.heads = heads
        # residual branches start small so a deep stack begins near identity
        self.proj.weight.data *= 0.5
        self.fc2.weight.data *= 0.5

    def attention(self, x: Tensor) -> Tensor:
        t, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = ag.transpose(ag.reshape(self.qkv(x), (t, 3, h, dh)), (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.mul(q @ ag.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(dh))
        out = ag.softmax(scores, axis=-1) @ v                      # (h, t, dh)
        return self.proj(ag.reshape(ag.transpose(out, (1, 0, 2)), (t, d)))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.ln1(x))
        return x + self.fc2(ag.gelu(self.fc1(self.ln2(x))))


class PointEncoder(Module):
    """Stand-in for a pretrained point-language encoder.

    Patches are embedded by a shared per-point MLP with max-pooling, a learned
    encoding of the patch center is added, and a CLS token is prepended.
    """

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.cfg = cfg
        self.point_fc1 = Linear(3, d, rng)
        self.point_fc2 = Linear(d, d, rng)
        self.pos_fc1 = Linear(3, d, rng)
        self.pos_fc2 = Linear(d, d, rng)
        self.cls_token = param(rng.normal(0.0, 0.02, size=(1, d)))
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.num_layers)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.out_dim, rng)

    def patch_embedding(self, rel: Tensor) -> Tensor:
        """(G, M, 3) center-relative coordinates -> (G, d) pooled features."""
        return ag.max(self.point_fc2(ag.gelu(self.point_fc1(rel))), axis=1)

    def position_embedding(self, centers: Tensor) -> Tensor:
        return self.pos_fc2(ag.gelu(self.pos_fc1(centers)))

    def tokenize(self, rel, centers) -> Tensor:
        """Token matrix of shape (G + 1, d) with the CLS token in row 0."""
        rel, centers = ag.as_tensor(rel), ag.as_tensor(centers)
        if rel.ndim != 3 or rel.shape[-1] != 3 or centers.shape != (rel.shape[0], 3):
            raise ValueError(f"bad patch tensors: rel {rel.shape}, centers {centers.shape}")
        tokens = self.patch_embedding(rel) + self.position_embedding(centers)
        return ag.concat([self.cls_token, tokens], axis=0)

    def encode(self, tokens: Tensor) -> FeaturePyramid:
        """Run the block stack and collect the configured taps.

        Patch tokens are processed in a canonical (lexicographic) order and
        mapped back afterwards. Attention is permutation equivariant anyway;
        fixing the order also fixes every floating-point reduction order, so
        permuted inputs give bitwise-permuted outputs.
        """
        g = tokens.shape[0] - 1
        if g < 1:
            raise ValueError("need at least one patch token besides CLS")
        if tokens.shape[1] != self.cfg.embed_dim:
            raise ValueError(f"token width {tokens.shape[1]} != {self.cfg.embed_dim}")
        body = tokens.data[1:]
        order = np.lexsort(body.T[::-1])
        inverse = np.empty_like(order)
        inverse[order] = np.arange(g)
        perm = np.concatenate([[0], order + 1])
        x = ag.take_rows(tokens, perm)
        pyramid = FeaturePyramid()
        wanted = set(self.cfg.tap_layers)
        for layer, block in enumerate(self.blocks, start=1):
            x = block(x)
            if layer in wanted:
                pyramid.taps[layer] = ag.take_rows(x, inverse + 1)
        final = self.norm(x)
        pyramid.cls = final[0]
        pyramid.global_embedding = ag.l2_normalize(self.head(final[0:1]))[0]
        return pyramid

    def __call__(self, rel, centers) -> FeaturePyramid:
        return self.encode(self.tokenize(rel, centers))

"""Hybrid learnable prompts, a tiny text encoder, and similarity scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cloud import knn_indices
from .encoder import Block
from .losses import fuse_object_score
from .nn import LayerNorm, Linear, Module, param

CTX = "<ctx>"
VOCAB = (
    "<pad>", CTX, "a", "an", "the", "of", "with", "point", "cloud", "model",
    "normal", "defective", "object", "flawless", "perfect", "good", "damaged",
    "broken", "anomalous", "defect", "surface", "shape",
)
DEFAULT_TEMPLATES = {"normal": "normal {ctx} object", "defective": "defective {ctx} object"}
CLASSES = ("normal", "defective")
TAU_RANGE = (1e-3, 1.0)
UPSAMPLE_K = 3


class PromptError(ValueError):
    pass


def tokenize_template(template: str, vocab=VOCAB):
    """Split ``"prefix {ctx} suffix"`` into (prefix ids, suffix ids)."""
    if template.count("{ctx}") != 1:
        raise PromptError(f"template must contain exactly one {{ctx}} slot: {template!r}")
    before, after = template.split("{ctx}")
    lookup = {w: i for i, w in enumerate(vocab)}
    ids = []
    for part in (before, after):
        row = []
        for word in part.split():
            if word not in lookup:
                raise PromptError(f"unknown word {word!r} in prompt template {template!r}")
            row.append(lookup[word])
        ids.append(row)
    return ids[0], ids[1]


@dataclass
class TextEmbeddings:
    g_pos: Tensor   # "normal" prompt, unit norm
    g_neg: Tensor   # "defective" prompt, unit norm
    tau: Tensor


class TextEncoder(Module):
    """Word-level transformer; the last token's state is the prompt embedding."""

    def __init__(self, out_dim: int, rng: np.random.Generator, width: int = 32,
                 layers: int = 1, heads: int = 2, max_len: int = 16, vocab=VOCAB):
        self.vocab = tuple(vocab)
        self.embed = param(rng.normal(0.0, 0.5, size=(len(self.vocab), width)))
        self.pos = param(rng.normal(0.0, 0.1, size=(max_len, width)))
        self.blocks = [Block(width, heads, 2, rng) for _ in range(layers)]
        self.norm = LayerNorm(width)
        self.head = Linear(width, out_dim, rng)
        self.width = width

    def __call__(self, embedded: Tensor) -> Tensor:
        t = embedded.shape[0]
        if t == 0:
            raise PromptError("cannot encode an empty sequence")
        if t > self.pos.shape[0]:
            raise PromptError(f"sequence of {t} tokens exceeds max length {self.pos.shape[0]}")
        x = embedded + self.pos[:t]
        for block in self.blocks:
            x = block(x)
        last = self.norm(x)[t - 1:t]
        return ag.l2_normalize(self.head(last))[0]


class PromptLearner(Module):
    """Learnable context vectors shared by both class templates."""

    def __init__(self, encoder: TextEncoder, rng: np.random.Generator, n_ctx: int = 4,
                 templates: dict | None = None):
        self.ctx = param(rng.normal(0.0, 0.5, size=(n_ctx, encoder.width)))
        self.templates = dict(templates or DEFAULT_TEMPLATES)
        if set(self.templates) != set(CLASSES):
            raise PromptError(f"templates must cover exactly {CLASSES}")
        self.ids = {c: tokenize_template(self.templates[c], encoder.vocab) for c in CLASSES}
        self.encoder = encoder

    @property
    def n_ctx(self) -> int:
        return self.ctx.shape[0]

    def build_prompts(self):
        """Token-id sequences per class; ``<ctx>`` marks the shared context slots."""
        ctx_id = self.encoder.vocab.index(CTX)
        return {c: pre + [ctx_id] * self.n_ctx + post for c, (pre, post) in self.ids.items()}

    def embed_sequence(self, sequence) -> Tensor:
        ctx_id = self.encoder.vocab.index(CTX)
        seq = np.asarray(sequence, dtype=np.int64)
        if seq.size == 0:
            raise PromptError("cannot embed an empty sequence")
        slots = np.flatnonzero(seq == ctx_id)
        if len(slots) not in (0, self.n_ctx):
            raise PromptError("context slots do not match the learnable context length")
        if len(slots) == 0:
            return ag.take_rows(self.encoder.embed, seq)
        start = slots[0]
        parts = []
        if start > 0:
            parts.append(ag.take_rows(self.encoder.embed, seq[:start]))
        parts.append(self.ctx)
        if start + self.n_ctx < len(seq):
            parts.append(ag.take_rows(self.encoder.embed, seq[start + self.n_ctx:]))
        return ag.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def encode_text(self, tau: Tensor) -> TextEmbeddings:
        seqs = self.build_prompts()
        g = {c: self.encoder(self.embed_sequence(seqs[c])) for c in CLASSES}
        return TextEmbeddings(g_pos=g["normal"], g_neg=g["defective"], tau=tau)


def _check_tau(tau: Tensor) -> None:
    if not np.all(tau.data > 0):
        raise PromptError("temperature must be positive")


def class_logits(features: Tensor, text: TextEmbeddings) -> Tensor:
    """cos(g_c, f) / tau for c in (normal, defective); rows of ``features`` are unit."""
    _check_tau(text.tau)
    g = ag.concat([ag.reshape(text.g_pos, (-1, 1)), ag.reshape(text.g_neg, (-1, 1))], axis=1)
    return ag.div(features @ g, text.tau)


def classify_global(f_p: Tensor, text: TextEmbeddings) -> Tensor:
    """P(class | cloud) for (normal, defective) from the global embedding."""
    f_p = ag.as_tensor(f_p)
    logits = class_logits(ag.reshape(ag.l2_normalize(f_p), (1, -1)), text)
    return ag.softmax(logits, axis=-1)[0]


def patch_anomaly_probs(z: Tensor, text: TextEmbeddings) -> Tensor:
    """Defective-class probability of every (unit-norm) patch embedding."""
    return ag.softmax(class_logits(z, text), axis=-1)[:, 1]


def upsample_weights(points: np.ndarray, centers: np.ndarray, k: int = UPSAMPLE_K):
    """Inverse-distance weights from each point to its k nearest patch centers."""
    if len(centers) == 0:
        raise PromptError("no patches to interpolate from")
    k = min(k, len(centers))
    idx = knn_indices(centers, points, k)
    dist = np.sqrt(((centers[idx] - points[:, None, :]) ** 2).sum(axis=2))
    w = 1.0 / (dist + 1e-8)
    return idx, w / w.sum(axis=1, keepdims=True)


def interpolate(patch_scores: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Per-point scores as convex combinations of patch scores."""
    return ag.sum(ag.mul(ag.take_rows(patch_scores, idx), weights), axis=1)


@dataclass
class AnomalyResult:
    point_scores: np.ndarray
    patch_scores: np.ndarray
    object_score: float


def score_points(z, text: TextEmbeddings, points: np.ndarray, centers: np.ndarray,
                 object_alpha: float = 0.5, top_fraction: float = 0.1) -> AnomalyResult:
    """Patch and point anomaly probabilities plus the fused object score."""
    with ag.no_grad():
        s = patch_anomaly_probs(ag.as_tensor(z), text)
        idx, w = upsample_weights(points, centers)
        pts = interpolate(s, idx, w)
        obj = fuse_object_score(pts, s, object_alpha, top_fraction)
    return AnomalyResult(pts.data.copy(), s.data.copy(), obj.item())

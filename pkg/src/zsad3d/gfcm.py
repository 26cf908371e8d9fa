"""Learnable per-patch geometric descriptor: f_i = phi(max_j MLP(p_ij))."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .fpfh import DIM as FPFH_DIM
from .nn import MLP, Linear, Module


class GeometricFeatures(Module):
    def __init__(self, out_dim: int, rng: np.random.Generator, widths=(32, 64)):
        self.out_dim = out_dim
        self.mlp = MLP((3, *widths, out_dim), rng)
        self.phi = Linear(out_dim, out_dim, rng)

    def __call__(self, rel) -> Tensor:
        """(G, M, 3) center-relative member coordinates -> (G, out_dim)."""
        rel = ag.as_tensor(rel)
        if rel.ndim != 3 or rel.shape[-1] != 3:
            raise ValueError(f"expected (G, M, 3) patch coordinates, got {rel.shape}")
        if rel.shape[1] < 1:
            raise ValueError("patches need at least one member")
        return self.phi(ag.max(self.mlp(rel), axis=1))


class GeometryHead(Module):
    """Projects geometric features into FPFH space for the contrastive target."""

    def __init__(self, in_dim: int, rng: np.random.Generator):
        self.proj = Linear(in_dim, FPFH_DIM, rng)

    def __call__(self, feats: Tensor) -> Tensor:
        return ag.l2_normalize(self.proj(feats))

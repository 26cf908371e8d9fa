"""Multi-granularity fusion of tapped layers, geometric features and CLS."""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, Module, param


class MultiGranularityFusion(Module):
    """Z = phi_f([sum_l alpha_l phi_s(H_l) || phi_g(F_geo) || phi_c(h_cls)]).

    Each output row only sees the same row of every input plus the CLS token,
    so there is no mixing between patches here.
    """

    def __init__(self, n_taps: int, sem_dim: int, geo_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.layer_logits = param(np.zeros(n_taps))
        self.proj_s = Linear(sem_dim, out_dim, rng)
        self.proj_g = Linear(geo_dim, out_dim, rng)
        self.proj_c = Linear(sem_dim, out_dim, rng)
        self.proj_f = Linear(3 * out_dim, out_dim, rng)

    def layer_weights(self) -> Tensor:
        return ag.softmax(self.layer_logits)

    def __call__(self, taps, geo: Tensor, cls: Tensor, normalize: bool = True) -> Tensor:
        taps = list(taps.values()) if isinstance(taps, dict) else list(taps)
        if len(taps) != self.layer_logits.shape[0]:
            raise ValueError(f"expected {self.layer_logits.shape[0]} tap layers, got {len(taps)}")
        g = taps[0].shape[0]
        if geo.shape[0] != g:
            raise ValueError(f"geometric features have {geo.shape[0]} rows, patches {g}")
        alpha = self.layer_weights()
        sem = None
        for l, h in enumerate(taps):
            term = ag.mul(self.proj_s(h), alpha[l])
            sem = term if sem is None else sem + term
        c = ag.broadcast_to(self.proj_c(ag.reshape(cls, (1, -1))), (g, sem.shape[1]))
        z = self.proj_f(ag.concat([sem, self.proj_g(geo), c], axis=-1))
        return ag.l2_normalize(z) if normalize else z

"""Training objectives: focal + dice (local), fused BCE (global), InfoNCE (geometry)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

CLAMP = 1e-7


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_eps: float = 1.0
    fusion_alpha: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 0.1
    infonce_tau: float = 0.07
    top_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.focal_alpha < 1:
            raise LossError("focal_alpha must lie in (0, 1)")
        if not 0 <= self.fusion_alpha <= 1:
            raise LossError("fusion_alpha must lie in [0, 1]")
        if self.focal_gamma < 0 or self.dice_eps <= 0 or self.infonce_tau <= 0:
            raise LossError("focal_gamma >= 0, dice_eps > 0 and infonce_tau > 0 required")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise LossError("loss weights must be non-negative")
        if not 0 < self.top_fraction <= 1:
            raise LossError("top_fraction must lie in (0, 1]")


def _labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise LossError(f"length mismatch: {n} predictions vs {y.shape[0]} labels")
    return y


def _probs(probs) -> Tensor:
    p = ag.as_tensor(probs)
    if not np.all(np.isfinite(p.data)):
        raise FloatingPointError("non-finite probabilities")
    if p.data.min() < 0 or p.data.max() > 1:
        raise LossError("probabilities must lie in [0, 1]")
    return ag.clamp(p, CLAMP, 1 - CLAMP)


def focal_loss(probs, labels, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """mean of -alpha_t (1 - p_t)^gamma log p_t."""
    p = _probs(probs)
    y = _labels(labels, p.shape[0])
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    terms = ag.log(p_t) * (-alpha_t)
    if gamma:
        terms = terms * ag.power(1.0 - p_t, gamma)
    return ag.mean(terms)


def dice_loss(probs, labels, eps: float = 1.0) -> Tensor:
    p = ag.as_tensor(probs)
    y = _labels(labels, p.shape[0])
    inter = ag.sum(p * y)
    return 1.0 - ag.div(inter * 2.0 + eps, ag.sum(p) + (float(y.sum()) + eps))


def local_loss(probs, labels, cfg: LossConfig) -> Tensor:
    return (focal_loss(probs, labels, cfg.focal_gamma, cfg.focal_alpha)
            + dice_loss(probs, labels, cfg.dice_eps))


def top_fraction_mean(scores: Tensor, fraction: float) -> Tensor:
    """Mean of the ceil(fraction * n) largest entries (ties: lower index first)."""
    k = max(1, math.ceil(fraction * scores.shape[0] - 1e-9))
    order = np.argsort(-scores.data, kind="stable")[:k]
    return ag.mean(ag.take_rows(scores, order))


def fuse_object_score(point_scores: Tensor, patch_scores: Tensor, alpha: float = 0.5,
                      top_fraction: float = 0.1) -> Tensor:
    """y_hat = alpha * max(point scores) + (1 - alpha) * mean(top patch scores)."""
    y_pt = ag.max(ag.as_tensor(point_scores), axis=0)
    y_patch = top_fraction_mean(ag.as_tensor(patch_scores), top_fraction)
    return y_pt * alpha + y_patch * (1.0 - alpha)


@dataclass
class GlobalScore:
    y_pt: float
    y_patch: float
    y_hat: float
    y: int

    @classmethod
    def fuse(cls, y_pt: float, y_patch: float, y: int, alpha: float = 0.5) -> "GlobalScore":
        for v in (y_pt, y_patch):
            if not 0 <= v <= 1:
                raise LossError(f"score {v} outside [0, 1]")
        return cls(y_pt, y_patch, alpha * y_pt + (1 - alpha) * y_patch, int(y))


def bce(y_hat, y: int) -> Tensor:
    y_hat = ag.as_tensor(y_hat)
    if y not in (0, 1):
        raise LossError("object label must be 0 or 1")
    if not 0 <= y_hat.item() <= 1:
        raise LossError(f"fused score {y_hat.item()} outside [0, 1]")
    p = ag.clamp(y_hat, CLAMP, 1 - CLAMP)
    return -ag.log(p) if y == 1 else -ag.log(1.0 - p)


def global_loss(y_pt, y_patch, y: int, cfg: LossConfig) -> Tensor:
    """BCE of the fused object score against the object label."""
    a = cfg.fusion_alpha
    y_hat = ag.as_tensor(y_pt) * a + ag.as_tensor(y_patch) * (1.0 - a)
    return bce(y_hat, y)


def geo_loss(projected, targets, tau: float = 0.07) -> Tensor:
    """In-cloud InfoNCE: each patch must pick its own FPFH target among all patches.

    ``projected`` rows are the (unit) projections of the learned geometric
    features; ``targets`` are patch FPFH vectors, normalized here.
    """
    q = ag.l2_normalize(ag.as_tensor(projected))
    t = ag.l2_normalize(ag.as_tensor(targets))
    if q.shape[0] < 2:
        raise LossError("InfoNCE needs at least two patches")
    if q.shape != t.shape:
        raise LossError(f"shape mismatch {q.shape} vs {t.shape}")
    logits = ag.mul(q @ ag.transpose(t, (1, 0)), 1.0 / tau)
    logp = ag.log_softmax(logits, axis=-1)
    n = q.shape[0]
    return -ag.mean(logp[np.arange(n), np.arange(n)])


def total_loss(local, global_, geo, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    out = ag.as_tensor(local) + ag.as_tensor(global_) * cfg.lambda1
    if cfg.lambda2:
        out = out + ag.as_tensor(geo) * cfg.lambda2
    return out

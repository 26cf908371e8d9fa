"""Optimization: warmup+cosine schedule, AdamW, gradient clipping, the train loop."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .metrics import build_report, evaluate_category
from .model import AnomalyDetector
from .nn import no_decay, save_checkpoint


class TrainError(RuntimeError):
    pass


class NumericalError(TrainError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    base_lr: float = 5e-3
    min_lr: float = 1e-6
    warmup_fraction: float = 0.10
    weight_decay: dict = field(default_factory=lambda: {"encoder": 0.05, "heads": 0.05,
                                                        "prompts": 0.0})
    lr_scale: dict = field(default_factory=lambda: {"encoder": 1.0, "heads": 1.0,
                                                    "prompts": 1.0})
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.min_lr > self.base_lr:
            raise ValueError("min_lr must not exceed base_lr")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0 (0 = only after the last epoch)")
        for table in (self.weight_decay, self.lr_scale):
            unknown = set(table) - {"encoder", "heads", "prompts"}
            if unknown:
                raise ValueError(f"unknown parameter groups {sorted(unknown)}")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``min_lr`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.base_lr * step / warm
    if step == total_steps:
        return cfg.min_lr
    progress = (step - warm) / (total_steps - warm)
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(groups: dict, grads: dict, state: AdamState, lr: float,
                   weight_decay: dict | None = None, lr_scale: dict | None = None) -> None:
    """One in-place AdamW update.

    ``groups`` maps group name -> list of (name, Tensor); ``grads`` maps
    parameter name -> gradient array (missing means zero).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    weight_decay = weight_decay or {}
    lr_scale = lr_scale or {}
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for group, params in groups.items():
        glr = lr * lr_scale.get(group, 1.0)
        decay = weight_decay.get(group, 0.0)
        for name, p in params:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
            v = state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if decay and not no_decay(name):
                p.data -= glr * decay * p.data
            p.data -= glr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if not math.isfinite(total):
        raise NumericalError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


# ----------------------------------------------------------------- loop

@dataclass
class TrainResult:
    history: list
    checkpoint: Optional[Path]
    report: Optional[dict]


def _batch_losses(model: AnomalyDetector, batch) -> dict:
    text = model.text()
    parts = {"local": [], "global": [], "geo": [], "total": []}
    for sample in batch:
        out = model.forward(sample, text)
        for k, v in model.losses(sample, out).items():
            parts[k].append(v)
    n = float(len(batch))
    return {k: ag.sum(ag.concat([ag.reshape(t, (1,)) for t in vs], axis=0)) * (1.0 / n)
            for k, vs in parts.items()}


def _report_meta(meta):
    return {k: v for k, v in (meta or {}).items() if k in ("seed", "config_hash")}


def check_training_set(samples) -> None:
    if not samples:
        raise TrainError("training split is empty")
    for s in samples:
        if s.labels is None or s.object_label is None:
            raise TrainError(f"training sample {s.name!r} has no point labels")
        if s.object_label == 1 and not np.any(s.labels):
            raise TrainError(f"anomalous training sample {s.name!r} has an empty mask")


def evaluate_scores(score_fn, test_sets: dict, meta: dict | None = None,
                    fpr_limit: float = 0.3, threads: int = 1):
    """Build an EvalReport from any ``score_fn(sample) -> AnomalyResult``.

    ``test_sets`` maps category -> list of annotated PreparedSample.
    """
    per_cat = []
    for category in sorted(test_sets):
        samples = test_sets[category]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(score_fn, samples))
        else:
            results = [score_fn(s) for s in samples]
        per_cat.append(evaluate_category(
            category, [r.object_score for r in results], [s.object_label for s in samples],
            [r.point_scores for r in results], [s.labels for s in samples],
            [s.regions if s.regions is not None else s.labels for s in samples], fpr_limit))
    return build_report(per_cat, meta)


def model_scorer(model: AnomalyDetector):
    """Score function over a parameter snapshot; text embeddings computed once."""
    with ag.no_grad():
        text = model.text()
    return lambda sample: model.score(sample, text)


def evaluate(model: AnomalyDetector, test_sets: dict, meta: dict | None = None,
             fpr_limit: float = 0.3, threads: int = 1):
    return evaluate_scores(model_scorer(model), test_sets, meta, fpr_limit, threads)


def train(model: AnomalyDetector, train_samples: list, cfg: TrainConfig,
          test_sets: dict | None = None, log_path=None, checkpoint_path=None,
          meta: dict | None = None, on_epoch: Callable | None = None,
          fpr_limit: float = 0.3, threads: int = 1) -> TrainResult:
    """Run the full schedule; evaluates on ``test_sets`` per ``cfg.eval_every``."""
    check_training_set(train_samples)
    groups = model.param_groups()
    steps_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    order_rng = np.random.default_rng([cfg.seed, 7919])
    state = AdamState()
    history = []
    report = None
    log = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "w")
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(train_samples))
            sums = {"local": 0.0, "global": 0.0, "geo": 0.0, "total": 0.0}
            grad_norms = []
            for b in range(steps_per_epoch):
                batch = [train_samples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
                model.zero_grad()
                try:
                    parts = _batch_losses(model, batch)
                except FloatingPointError as exc:
                    raise NumericalError(f"epoch {epoch}, step {step}: {exc}") from exc
                total = parts["total"]
                if not np.isfinite(total.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                total.backward()
                grads = {n: p.grad for n, p in model.named_parameters()}
                grad_norms.append(clip_grad_norm(grads, cfg.clip_norm))
                lr = lr_at(step, total_steps, cfg)
                optimizer_step(groups, grads, state, lr, cfg.weight_decay, cfg.lr_scale)
                step += 1
                for k in sums:
                    sums[k] += parts[k].item() * len(batch)
            entry = {"epoch": epoch + 1, "step": step,
                     "lr": lr_at(step, total_steps, cfg),
                     "grad_norm": float(np.mean(grad_norms))}
            entry.update({f"loss_{k}": v / len(train_samples) for k, v in sums.items()})
            last = epoch + 1 == cfg.epochs
            due = cfg.eval_every and (epoch + 1) % cfg.eval_every == 0
            if test_sets and (due or last):
                report = evaluate(model, test_sets, _report_meta(meta), fpr_limit,
                                  threads).to_dict()
                entry.update({k: report[k] for k in ("o_auroc", "p_auroc", "p_aupro")})
            history.append(entry)
            if log:
                log.write(json.dumps(entry, sort_keys=True) + "\n")
                log.flush()
            if on_epoch:
                on_epoch(entry)
    finally:
        if log:
            log.close()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model.state_dict(),
                        {"train": asdict(cfg), **(meta or {})})
    return TrainResult(history, Path(checkpoint_path) if checkpoint_path else None, report)

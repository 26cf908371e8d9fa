"""Detection and localization metrics: AUROC, AP, F1-max and AUPRO."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores vs {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    return s, y


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_counts(s, y):
    """Cumulative (TP, FP) at each distinct score, highest threshold first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    return tp.astype(np.float64), fp.astype(np.float64)


def average_precision(scores, labels) -> float:
    """Step-interpolated area under precision-recall, tied scores grouped."""
    s, y = _check(scores, labels)
    n_pos = y.sum()
    if n_pos == 0:
        raise MetricError("AP needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = y.sum()
    if n_pos == 0:
        raise MetricError("F1 needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return float(f1.max())


def aupro(scores, labels, regions, fpr_limit: float = 0.3) -> float:
    """Normalized area under mean per-region overlap vs. FPR, up to ``fpr_limit``.

    ``regions`` holds a positive id per anomalous point (0 elsewhere); each id
    is one connected defect. The curve starts at (0, 0) and has one vertex per
    distinct score threshold.
    """
    s, y = _check(scores, labels)
    reg = np.asarray(regions).reshape(-1).astype(np.int64)
    if reg.shape != s.shape:
        raise MetricError("regions must align with scores")
    ids = np.unique(reg[y & (reg > 0)])
    if len(ids) == 0:
        raise MetricError("AUPRO needs at least one anomalous region")
    if not 0 < fpr_limit <= 1:
        raise MetricError("fpr_limit must lie in (0, 1]")
    n_neg = (~y).sum()
    if n_neg == 0:
        raise MetricError("AUPRO needs normal points")

    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    fpr = np.cumsum(~y[order])[last_of_group] / n_neg
    pro = np.zeros(last_of_group.sum())
    for rid in ids:
        member = (reg[order] == rid) & y[order]
        pro += np.cumsum(member)[last_of_group] / member.sum()
    pro /= len(ids)
    return float(_clipped_area(np.r_[0.0, fpr], np.r_[0.0, pro], fpr_limit) / fpr_limit)


def _clipped_area(x, yv, limit):
    """Trapezoid area of a monotone-x polyline over [0, limit]."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], yv[i - 1], yv[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area


# ----------------------------------------------------------------- reporting

METRIC_KEYS = ("o_auroc", "o_ap", "o_f1", "p_auroc", "p_ap", "p_aupro")
TABLE_HEADERS = ("O-AUROC", "O-AP", "O-F1", "P-AUPRO", "P-AUROC", "P-AP")


@dataclass
class CategoryMetrics:
    category: str
    o_auroc: float
    o_ap: float
    o_f1: float
    p_auroc: float
    p_ap: float
    p_aupro: float
    n_clouds: int = 0


@dataclass
class EvalReport:
    o_auroc: float
    o_ap: float
    o_f1: float
    p_auroc: float
    p_ap: float
    p_aupro: float
    per_category: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [(c["category"] if isinstance(c, dict) else c.category,
                 c if isinstance(c, dict) else asdict(c)) for c in self.per_category]
        rows.append(("mean", self.to_dict()))
        order = ("o_auroc", "o_ap", "o_f1", "p_aupro", "p_auroc", "p_ap")
        width = max([8] + [len(name) for name, _ in rows])
        lines = [f"{'category':<{width}} " + " ".join(f"{h:>8}" for h in TABLE_HEADERS)]
        for name, vals in rows:
            lines.append(f"{name:<{width}} " + " ".join(f"{100 * vals[k]:8.1f}" for k in order))
        return "\n".join(lines)


def evaluate_category(category: str, object_scores, object_labels, point_scores,
                      point_labels, point_regions, fpr_limit: float = 0.3) -> CategoryMetrics:
    """Metrics for one category; point arrays are lists with one entry per cloud."""
    regions, offset = [], 0
    for reg in point_regions:
        reg = np.asarray(reg, dtype=np.int64)
        regions.append(np.where(reg > 0, reg + offset, 0))
        offset += int(reg.max(initial=0))
    ps = np.concatenate(point_scores)
    pl = np.concatenate(point_labels)
    pr = np.concatenate(regions)
    return CategoryMetrics(
        category=category,
        o_auroc=auroc(object_scores, object_labels),
        o_ap=average_precision(object_scores, object_labels),
        o_f1=f1_max(object_scores, object_labels),
        p_auroc=auroc(ps, pl),
        p_ap=average_precision(ps, pl),
        p_aupro=aupro(ps, pl, pr, fpr_limit),
        n_clouds=len(object_scores),
    )


def build_report(per_category, meta=None) -> EvalReport:
    if not per_category:
        raise MetricError("no categories evaluated")
    means = {k: float(np.mean([getattr(c, k) for c in per_category])) for k in METRIC_KEYS}
    return EvalReport(**means, per_category=[asdict(c) for c in per_category],
                      meta=dict(meta or {}))


def report_schema() -> dict:
    text = resources.files("zsad3d").joinpath("eval_report.schema.json").read_text()
    return json.loads(text)


def aggregate_seeds(reports) -> dict:
    """Mean and standard deviation of each headline metric over runs."""
    out = {}
    for k in METRIC_KEYS:
        vals = np.array([r[k] if isinstance(r, dict) else getattr(r, k) for r in reports])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out

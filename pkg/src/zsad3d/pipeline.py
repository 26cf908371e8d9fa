"""End-to-end runners shared by the CLI and the acceptance suite."""
from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import RunConfig
from .cloud import PointCloud
from .data import (DataError, load_ply, load_record, read_manifest, save_heatmap_ply,
                   synth_generate)
from .encoder import EncoderConfig
from .losses import LossConfig
from .metrics import aggregate_seeds, build_report, evaluate_category
from .model import AnomalyDetector, ModelConfig, prepare_sample
from .nn import load_checkpoint
from .prompts import AnomalyResult
from .train import evaluate_scores, model_scorer, train

CHECKPOINT = Path("checkpoint") / "model.ckpt"
TRAIN_LOG = Path("logs") / "train.jsonl"


def _prepare_all(root, records, mcfg, with_targets, threads=1):
    def one(r):
        return prepare_sample(load_record(root, r), mcfg, with_targets, r.object_label, r.cloud)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, records))
    return [one(r) for r in records]


def load_benchmark(cfg: RunConfig, threads: int = 1, with_train: bool = True):
    """Prepared training samples and per-category zero-shot test sets."""
    root = cfg.data_root()
    records = read_manifest(root)
    mcfg = cfg.model_config()
    train_recs = [r for r in records
                  if r.category == cfg.data.train_category and r.split == "train"]
    test_cats = cfg.test_categories()
    if cfg.data.train_category in test_cats:
        raise DataError("the training category cannot also be a zero-shot test category")
    train_samples = _prepare_all(root, train_recs, mcfg, True, threads) if with_train else []
    test_sets = {}
    for cat in test_cats:
        recs = [r for r in records if r.category == cat and r.split == "test"]
        if not recs:
            raise DataError(f"no test samples for category {cat!r} under {root}")
        test_sets[cat] = _prepare_all(root, recs, mcfg, False, threads)
    return train_samples, test_sets


def random_scorer(seed: int):
    """Chance-level reference: uniform scores seeded by sample name."""
    def score(sample):
        key = [seed] + list(sample.name.encode())
        rng = np.random.default_rng(key)
        pts = rng.uniform(size=len(sample.points))
        return AnomalyResult(pts, np.zeros(sample.patches.G), float(rng.uniform()))
    return score


def _meta(cfg: RunConfig) -> dict:
    return {"seed": int(cfg.train.seed), "config_hash": cfg.digest()}


def _model_meta(mcfg: ModelConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(mcfg), default=list))


def build_model(cfg: RunConfig) -> AnomalyDetector:
    return AnomalyDetector(cfg.model_config(), cfg.train.seed, cfg.loss)


def load_model(path) -> AnomalyDetector:
    """Rebuild a detector from a checkpoint alone (its header stores the config)."""
    state, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint lacks a model configuration")
    m = dict(meta["model"])
    m["encoder"] = EncoderConfig(**m["encoder"])
    m["gfcm_widths"] = tuple(m["gfcm_widths"])
    model = AnomalyDetector(ModelConfig(**m), 0, LossConfig(**meta.get("loss", {})))
    model.load_state_dict(state)
    return model


# ----------------------------------------------------------------- commands

def run_synth(cfg: RunConfig):
    return synth_generate(cfg.synth, cfg.data_root())


def run_train(cfg: RunConfig, threads: int = 1, on_epoch=None, prepared=None):
    out = Path(cfg.out)
    train_samples, test_sets = prepared or load_benchmark(cfg, threads)
    model = build_model(cfg)
    meta = {**_meta(cfg), "model": _model_meta(cfg.model_config()),
            "loss": dataclasses.asdict(cfg.loss)}
    result = train(model, train_samples, cfg.train, test_sets, out / TRAIN_LOG,
                   out / CHECKPOINT, meta, on_epoch, cfg.data.fpr_limit, threads)
    if result.report is not None:
        _write_report(out / "reports" / "train_eval", result.report)
    return model, result


def _write_report(stem: Path, report) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    doc = report if isinstance(report, dict) else report.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    if not isinstance(report, dict):
        stem.with_suffix(".txt").write_text(report.table() + "\n")


def run_eval(cfg: RunConfig, checkpoint=None, random_baseline: bool = False,
             threads: int = 1):
    out = Path(cfg.out)
    _, test_sets = load_benchmark(cfg, threads, with_train=False)
    if random_baseline:
        scorer, name = random_scorer(cfg.train.seed), "eval_random"
    else:
        scorer, name = model_scorer(load_model(checkpoint or out / CHECKPOINT)), "eval"
    report = evaluate_scores(scorer, test_sets, _meta(cfg), cfg.data.fpr_limit, threads)
    _write_report(out / "reports" / name, report)
    return report


def run_score(checkpoint, cloud_path, out_dir):
    model = load_model(checkpoint)
    cloud = load_ply(cloud_path)
    sample = prepare_sample(cloud, model.cfg, name=str(cloud_path))
    result = model.score(sample)
    heatmap = Path(out_dir) / "heatmaps" / (Path(cloud_path).stem + "_heatmap.ply")
    save_heatmap_ply(PointCloud(sample.points), result.point_scores, heatmap)
    return result, heatmap


def run_bench(cfg: RunConfig, seeds, threads: int = 1, on_seed=None) -> dict:
    """Per seed: regenerate data, train, evaluate, and score a random baseline."""
    start = time.perf_counter()
    reports, baselines = [], []
    for seed in seeds:
        run = dataclasses.replace(
            cfg, out=str(Path(cfg.out) / f"seed_{seed}"),
            train=dataclasses.replace(cfg.train, seed=seed),
            synth=dataclasses.replace(cfg.synth, seed=seed))
        run_synth(run)
        prepared = load_benchmark(run, threads)
        _, result = run_train(run, threads, prepared=prepared)
        baseline = evaluate_scores(random_scorer(seed), prepared[1], _meta(run),
                                   run.data.fpr_limit, threads)
        _write_report(Path(run.out) / "reports" / "eval_random", baseline)
        reports.append(result.report)
        baselines.append(baseline.to_dict())
        if on_seed:
            on_seed({"seed": seed, **{k: result.report[k] for k in
                                      ("o_auroc", "p_auroc", "p_aupro")},
                     "elapsed_s": round(time.perf_counter() - start, 1)})
    summary = {"seeds": list(seeds), "model": aggregate_seeds(reports),
               "random": aggregate_seeds(baselines), "per_seed": reports,
               "wall_time_s": time.perf_counter() - start}
    path = Path(cfg.out) / "reports" / "bench.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# ----------------------------------------------------------------- gradcheck

def toy_model_config() -> ModelConfig:
    """The small instance used for finite-difference checks (d = D = 8)."""
    enc = EncoderConfig(num_layers=4, embed_dim=8, heads=2, tap_layers=(1, 2, 3, 4),
                        out_dim=8, mlp_ratio=2)
    return ModelConfig(encoder=enc, geo_dim=8, gfcm_widths=(8, 8), text_width=8,
                       text_layers=1, text_heads=2, n_ctx=2, num_points=48,
                       num_patches=4, patch_size=8, normal_k=8, fpfh_k=8)


def toy_sample(mcfg: ModelConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(mcfg.num_points, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    labels = (pts[:, 2] > 0.6).astype(np.int64)
    pts[labels == 1] *= 1.1
    return prepare_sample(PointCloud(pts, labels=labels), mcfg, with_targets=True, name="toy")


GRADCHECK_MODULES = ("encoder", "gfcm", "geo_head", "fusion", "prompts.ctx",
                     "prompts.encoder", "tau")


def run_gradcheck(h: float = 1e-5, seed: int = 0) -> dict:
    """Max relative finite-difference error of the total loss, per module."""
    mcfg = toy_model_config()
    model = AnomalyDetector(mcfg, seed)
    sample = toy_sample(mcfg, seed)
    named = list(model.named_parameters())

    def loss():
        return model.losses(sample)["total"]

    report = {}
    for mod in GRADCHECK_MODULES:
        params = [p for n, p in named if n == mod or n.startswith(mod + ".")]
        report[mod] = float(ag.grad_check(loss, params, h))
    return report


# ----------------------------------------------------------------- ablation

def run_ablation(cfg: RunConfig, checkpoint=None, threads: int = 1):
    """Evaluate one checkpoint at several input sizes and time preprocessing + scoring."""
    out = Path(cfg.out)
    model = load_model(checkpoint or out / CHECKPOINT)
    ab = cfg.ablation
    root = out / "ablation" / "data"
    cats = cfg.test_categories()
    spec = dataclasses.replace(cfg.synth, categories=tuple(cats),
                               points_per_cloud=ab.source_points, train_normal=0,
                               train_anomalous=0, test_normal=ab.clouds_per_class,
                               test_anomalous=ab.clouds_per_class)
    records = synth_generate(spec, root)
    clouds = [(r, load_record(root, r)) for r in records]
    scorer = model_scorer(model)
    rows = []
    for n in ab.point_counts:
        if n > ab.source_points:
            raise ValueError(f"point count {n} exceeds source clouds ({ab.source_points})")
        mcfg = dataclasses.replace(model.cfg, num_points=int(n))
        best = np.inf
        for _ in range(ab.repeats):
            start = time.perf_counter()
            sets = {}
            for r, c in clouds:
                s = prepare_sample(c, mcfg, False, r.object_label, r.cloud)
                sets.setdefault(r.category, []).append((s, scorer(s)))
            best = min(best, time.perf_counter() - start)
        per_cat = [evaluate_category(
            cat, [res.object_score for _, res in pairs], [s.object_label for s, _ in pairs],
            [res.point_scores for _, res in pairs], [s.labels for s, _ in pairs],
            [s.regions for s, _ in pairs], cfg.data.fpr_limit)
            for cat, pairs in sorted(sets.items())]
        report = build_report(per_cat, {**_meta(cfg), "points": int(n)}).to_dict()
        rows.append({"points": int(n), **{k: report[k] for k in
                     ("o_auroc", "o_ap", "o_f1", "p_aupro", "p_auroc", "p_ap")},
                     "throughput": len(clouds) / best})
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "ablation_points.json").write_text(json.dumps(rows, indent=2))
    (out / "reports" / "ablation_points.txt").write_text(ablation_table(rows) + "\n")
    return rows


def ablation_table(rows) -> str:
    head = f"{'points':>6} {'O-AUROC':>8} {'O-AP':>8} {'O-F1':>8} {'P-AUPRO':>8} " \
           f"{'P-AUROC':>8} {'P-AP':>8} {'clouds/s':>9}"
    lines = [head]
    for r in rows:
        vals = " ".join(f"{100 * r[k]:8.1f}" for k in
                        ("o_auroc", "o_ap", "o_f1", "p_aupro", "p_auroc", "p_ap"))
        lines.append(f"{r['points']:>6} {vals} {r['throughput']:9.2f}")
    return "\n".join(lines)


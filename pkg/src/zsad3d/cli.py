"""Command-line entry point: ``zsad3d <command> [--config FILE] [key=value ...]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config
from .data import DataError, PlyError
from .train import NumericalError

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
GRADCHECK_TOL = 1e-4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsad3d", description=__doc__)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for preprocessing/evaluation (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="YAML run configuration")
        c.add_argument("--out", help="output directory (overrides the config)")
        c.add_argument("overrides", nargs="*", help="section.key=value overrides")
        return c

    add("synth", "write the synthetic benchmark")
    add("train", "train on one category, evaluate zero-shot on the others")
    e = add("eval", "evaluate a checkpoint and write an EvalReport")
    e.add_argument("--checkpoint")
    e.add_argument("--random-baseline", action="store_true",
                   help="score with uniform noise instead of a model")
    s = add("score", "score one PLY cloud and write a heatmap")
    s.add_argument("--checkpoint")
    s.add_argument("--cloud", required=True)
    add("gradcheck", "finite-difference check of every trainable module")
    a = add("ablate", "sweep the number of input points")
    a.add_argument("--checkpoint")
    b = add("bench", "synth + train + eval over several seeds, plus a random baseline")
    b.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return p


def _config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"out={args.out}")
    return load_config(args.config, overrides)


def _require_dataset(cfg: RunConfig) -> None:
    root = cfg.data_root()
    if not root.exists():
        raise ConfigError(f"dataset directory {root} does not exist (run `zsad3d synth` first)")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(cfg, args):
    from .pipeline import run_synth
    records = run_synth(cfg)
    _emit({"written": len(records), "root": str(cfg.data_root())})


def cmd_train(cfg, args):
    from .pipeline import run_train
    _require_dataset(cfg)
    _, result = run_train(cfg, args.threads, on_epoch=_emit)
    _emit({"checkpoint": str(result.checkpoint)})


def cmd_eval(cfg, args):
    from .pipeline import run_eval
    _require_dataset(cfg)
    report = run_eval(cfg, args.checkpoint, args.random_baseline, args.threads)
    print(report.table())


def cmd_score(cfg, args):
    from .pipeline import CHECKPOINT, run_score
    result, heatmap = run_score(args.checkpoint or Path(cfg.out) / CHECKPOINT, args.cloud,
                                cfg.out)
    _emit({"object_score": result.object_score, "heatmap": str(heatmap)})


def cmd_gradcheck(cfg, args):
    from .pipeline import run_gradcheck
    report = run_gradcheck()
    for module, err in report.items():
        status = "ok" if err < GRADCHECK_TOL else "FAIL"
        print(f"{module:<16} max_rel_err={err:.3e} {status}")
    if max(report.values()) >= GRADCHECK_TOL:
        raise NumericalError("gradient check exceeded tolerance")


def cmd_ablate(cfg, args):
    from .pipeline import ablation_table, run_ablation
    rows = run_ablation(cfg, args.checkpoint, args.threads)
    print(ablation_table(rows))


def cmd_bench(cfg, args):
    from .pipeline import run_bench
    summary = run_bench(cfg, args.seeds, args.threads, on_seed=_emit)
    for name in ("model", "random"):
        agg = summary[name]
        print(f"{name:<7} " + "  ".join(f"{k}={agg[k]['mean']:.3f}+-{agg[k]['std']:.3f}"
                                        for k in ("o_auroc", "p_auroc", "p_aupro")))
    print(f"wall time {summary['wall_time_s']:.1f}s")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "score": cmd_score,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "bench": cmd_bench}


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, ConfigError("--threads must be >= 1"))
    try:
        cfg = _config(args)
        with threadpool_limits(args.threads):
            COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (OSError, PlyError, DataError) as exc:
        return _fail(EXIT_IO, exc)
    except (NumericalError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``lossforge search | eval | landscape``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Progress goes to stderr; results go to files only.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import analysis, gp
from .config import ConfigError, RunConfig, load_config
from .expr import ParseError, parse_expr
from .fitness import ClassifierFitness, ClassifierTrainer, fitness_to_dict, run_errors
from .losses import CATALOG, LossFn, builtin, from_tree

SEED_ENV = "LOSSFORGE_SEED"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class UsageError(Exception):
    pass


def resolve_loss(spec: str) -> LossFn:
    """A catalog name or a path to a file holding a prefix formula."""
    if spec.lower() in CATALOG:
        return builtin(spec)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown loss {spec!r}: not a catalog name "
                         f"({', '.join(CATALOG)}) or a formula file")
    text = path.read_text().strip()
    try:
        return from_tree(parse_expr(text), name=path.stem)
    except ParseError as e:
        raise UsageError(f"{path}: {e}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg.with_seed(seed) if seed is not None else cfg


@contextmanager
def _mapper(workers: int):
    if workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield lambda fn, items: pool.map(fn, items, chunksize=1)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_search(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    (out / "config.json").write_text(cfg.text)
    datasets = cfg.load_datasets()
    oracle = ClassifierFitness(cfg.experiment, datasets, cfg.range_check)
    spec = oracle.spec
    history_path = out / "history.jsonl"
    history_path.write_text("")
    start = time.perf_counter()

    def on_record(rec):
        with history_path.open("a") as fh:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        _log(f"gen {rec.generation:4d}  best {fitness_to_dict(rec.best_fitness)}  "
             f"rejected {rec.rejections}  {time.perf_counter() - start:7.1f}s")

    with _mapper(args.workers) as map_fn:
        best, history = gp.run(cfg.gp, oracle, map_fn=map_fn, on_record=on_record)
    (out / "best.loss").write_text(best.formula + "\n")

    trainer = oracle.trainer
    test_trainer = ClassifierTrainer(spec, datasets, partition="test")
    best_loss = from_tree(best.expr)
    report = {
        "best_formula": best.formula,
        "best_fitness": fitness_to_dict(best.fitness),
        "best_id": best.id,
        "best_size": best.size,
        "generations": len(history) - 1,
        "population_size": cfg.gp.population_size,
        "seed": cfg.seed,
        "mode": spec.mode,
        "datasets": list(spec.datasets),
        "ce_val_error": dict(zip(spec.datasets, run_errors(builtin("ce"), spec, trainer))),
        "best_test_error": dict(zip(spec.datasets, run_errors(best_loss, spec, test_trainer))),
        "ce_test_error": dict(zip(spec.datasets,
                                  run_errors(builtin("ce"), spec, test_trainer))),
    }
    _write_json(out / "report.json", report)
    _log(f"best: {best.formula}")
    return 0


def _accuracy_delta_pct(err: float, ce_err: float) -> float:
    acc, ce_acc = 1.0 - err, 1.0 - ce_err
    return 0.0 if ce_acc == 0 else 100.0 * (acc - ce_acc) / ce_acc


def cmd_eval(args) -> int:
    loss = resolve_loss(args.loss)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    datasets = cfg.load_datasets()
    spec = cfg.experiment
    trainer = ClassifierTrainer(spec, datasets, partition="test")
    ce = builtin("ce")
    rows = []
    for d, name in enumerate(spec.datasets):
        errs = [trainer(loss, d, k) for k in range(spec.runs_per_dataset)]
        ce_errs = errs if loss is ce else [trainer(ce, d, k)
                                            for k in range(spec.runs_per_dataset)]
        mean, ce_mean = float(np.mean(errs)), float(np.mean(ce_errs))
        rows.append({
            "dataset": name,
            "runs": spec.runs_per_dataset,
            "mean_error": mean,
            "std_error": float(np.std(errs)),
            "ce_mean_error": ce_mean,
            "delta_vs_ce_pct": _accuracy_delta_pct(mean, ce_mean),
        })
        _log(f"{name}: {loss.name} error {mean:.4f} (CE {ce_mean:.4f})")
    _write_json(out / "eval.json", {"loss": loss.name, "rows": rows})
    header = f"{'dataset':<16}{'runs':>5}{'mean_err':>10}{'std_err':>10}{'ce_err':>10}{'d%_vs_ce':>10}"
    lines = [header] + [
        f"{r['dataset']:<16}{r['runs']:>5}{r['mean_error']:>10.4f}{r['std_error']:>10.4f}"
        f"{r['ce_mean_error']:>10.4f}{r['delta_vs_ce_pct']:>+10.2f}" for r in rows]
    (out / "eval.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_landscape(args) -> int:
    loss = resolve_loss(args.loss)
    out = _out_dir(args)
    curve = analysis.sample_landscape(loss, args.y_real, args.step)
    report = analysis.analyze(curve)
    (out / "landscape.csv").write_text(curve.to_csv())
    (out / "report.json").write_text(report.to_json() + "\n")
    _log(f"{loss.name} (y_real={args.y_real}): argmin {report.argmin:.4f}, {report.shape}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, default=None,
                       help=f"master seed (overrides {SEED_ENV} and the config)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="parallel fitness evaluations")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("search", help="evolve a loss function")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="train with a loss and compare with CE")
    p.add_argument("loss", help="catalog name or formula file")
    common(p)
    p.set_defaults(func=cmd_eval)

    for name in ("landscape", "analyze"):
        p = sub.add_parser(name, help="binary-reduction landscape of a loss")
        p.add_argument("loss", help="catalog name or formula file")
        p.add_argument("--y-real", type=int, choices=(0, 1), default=1)
        p.add_argument("--step", type=float, default=1e-3, help="grid step")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=cmd_landscape)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        _log(f"error: {e}")
        return 2
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        _log(f"error: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())

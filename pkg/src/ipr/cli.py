"""Command line entry point: ``ipr <subcommand> ...``.

Exit codes: 0 success, 2 input or config error, 3 I/O error, 4 numerical abort.
Logs go to stderr; summaries to stdout.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import (DatasetFormatError, DatasetValidationError, GenerationError, SynthConfig,
                   generate_synthetic, load_dataset, read_dataset, save_dataset, standardize)
from .model import load_checkpoint, save_checkpoint
from .numerics import ConfigError
from .pipeline import (METRIC_COLUMNS, MODES, MultiSeedResult, TrainConfig, TrainingAbort, evaluate,
                       train, write_pseudo_label_report)

log = logging.getLogger("ipr")

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _read_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    if not isinstance(obj, dict):
        raise CliError(f"{p}: config must be a JSON object")
    return obj


def _synth_config(d: dict) -> SynthConfig:
    try:
        return SynthConfig.from_dict(d)
    except TypeError as exc:
        raise CliError(f"invalid synth config: {exc}") from exc


def _train_config(d: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise CliError(f"invalid train config: {exc}") from exc


def _load(path) -> "object":
    p = Path(path)
    if not p.is_file():
        raise CliError(f"dataset not found: {p}")
    return load_dataset(p)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def _summary(ds) -> dict:
    return {"sizes": ds.sizes(),
            "class_counts": {s: ds.class_counts(s) for s in ("D1", "D2", "D3")},
            "mean_majority_fraction": {s: ds.mean_majority_fraction(s)
                                       for s in ("D1", "D2", "D3")}}


def cmd_gen_data(args) -> int:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = _synth_config(d)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite")
    ds = generate_synthetic(cfg)
    save_dataset(ds, out)
    print(json.dumps({"path": str(out), "sha256": _sha256(out), **_summary(ds)}, indent=2))
    return EXIT_OK


def cmd_validate(args) -> int:
    p = Path(args.dataset)
    if not p.is_file():
        raise CliError(f"dataset not found: {p}")
    ds, problems = read_dataset(p)
    if problems:
        print(f"INVALID: {len(problems)} violation(s)")
        for msg in problems:
            print(f"  - {msg}")
        return EXIT_INPUT
    print(json.dumps({"valid": True, **_summary(ds)}, indent=2))
    return EXIT_OK


def _resolved_train_config(args) -> TrainConfig:
    d = _read_json(args.config)
    for key in ("mode", "epochs", "warmup_epochs", "learning_rate", "gamma", "mu", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if args.seeds is not None:
        d["seeds"] = _parse_seeds(args.seeds)
    return _train_config(d)


def _run_dir(out_dir: Path, cfg: TrainConfig, resolved: dict, name: str | None, force: bool) -> Path:
    digest = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:10]
    name = name or f"{time.strftime('%Y%m%d-%H%M%S')}_{cfg.mode}_{digest}"
    run = out_dir / name
    if run.exists():
        if not force:
            raise CliError(f"run directory {run} exists; pass --force to overwrite")
        shutil.rmtree(run)
    run.mkdir(parents=True)
    return run


def _train_one(payload):
    ds, cfg, seed = payload
    try:
        return seed, train(ds, cfg, seed), None
    except TrainingAbort as exc:
        return seed, None, str(exc)


def _write_seed(run_dir: Path, result) -> None:
    d = run_dir / f"seed_{result.seed}"
    d.mkdir()
    result.metrics.write_csv(d / "metrics.csv")
    result.metrics.write_similarity_csv(d / "prototype_similarity.csv")
    save_checkpoint(result.params, d / "checkpoint.json",
                    {"seed": result.seed, "mode": result.mode})
    if result.bank is not None:
        (d / "prototypes.json").write_text(json.dumps(result.bank.to_dict(), indent=1) + "\n")
        result.metrics.write_prototype_snapshots(d / "prototype_snapshots.jsonl")
    if result.report is not None:
        write_pseudo_label_report(result.report, d / "pseudo_labels.jsonl")


def cmd_train(args) -> int:
    cfg = _resolved_train_config(args)
    data_path = Path(args.data)
    ds = _load(data_path)
    if args.standardize:
        ds, _ = standardize(ds)
    resolved = {"train": cfg.to_dict(), "standardize": bool(args.standardize),
                "dataset": {"path": str(data_path.resolve()), "sha256": _sha256(data_path)}}
    run_dir = _run_dir(Path(args.out_dir), cfg, resolved, args.run_name, args.force)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    log.info("run_dir=%s mode=%s seeds=%s", run_dir, cfg.mode, cfg.seeds)

    jobs = [(ds, cfg, s) for s in cfg.seeds]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(_train_one, jobs))
    else:
        outcomes = [_train_one(j) for j in jobs]
    runs, failures = {}, {}
    for seed, result, err in outcomes:
        if result is None:
            log.error("seed=%d aborted: %s", seed, err)
            failures[seed] = err
        else:
            runs[seed] = result
            _write_seed(run_dir, result)
    agg = MultiSeedResult(cfg.mode, runs, failures).aggregate()
    agg["run_dir"] = str(run_dir)
    (run_dir / "aggregate.json").write_text(json.dumps(agg, indent=2) + "\n")
    print(json.dumps(agg, indent=2))
    if failures:
        print(f"numerical abort in seed(s) {sorted(failures)}: "
              + "; ".join(f"seed {s}: {m}" for s, m in sorted(failures.items())), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _seed_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    if not run_dir.is_dir():
        raise CliError(f"run directory not found: {run_dir}")
    out = []
    for d in run_dir.glob("seed_*"):
        try:
            out.append((int(d.name.split("_", 1)[1]), d))
        except ValueError:
            continue
    if not out:
        raise CliError(f"{run_dir} holds no seed_<n> directories")
    return sorted(out)


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    seeds = _seed_dirs(run_dir)
    cfg_path = run_dir / "config.json"
    resolved = _read_json(cfg_path) if cfg_path.is_file() else {}
    data_path = args.data or resolved.get("dataset", {}).get("path")
    if data_path is None:
        raise CliError("no dataset given and none recorded in config.json")
    ds = _load(data_path)
    if args.data is None and resolved.get("dataset", {}).get("sha256") not in (None, _sha256(data_path)):
        log.warning("dataset %s changed since training", data_path)
    if resolved.get("standardize"):
        ds, _ = standardize(ds)
    X3, y3 = ds.test()
    acc = {}
    for seed, d in seeds:
        ckpt = d / "checkpoint.json"
        if not ckpt.is_file():
            raise CliError(f"missing checkpoint {ckpt}")
        acc[seed] = evaluate(load_checkpoint(ckpt), X3, y3)
    vals = list(acc.values())
    print(json.dumps({"final_accuracy": {str(s): a for s, a in acc.items()},
                      "mean_accuracy": float(np.mean(vals)),
                      "std_accuracy": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0},
                     indent=2))
    return EXIT_OK


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise CliError(f"missing {path}") from exc
    if not rows or not rows[0] or rows[0][0] != "epoch":
        raise CliError(f"{path}: malformed metrics file")
    return rows[0], rows[1:]


def collect_curves(run_dir: Path) -> tuple[list[tuple], int | None]:
    """Tidy (epoch, seed, metric, value) rows; value is None for empty cells.

    Prototype-similarity metrics are kept only when the run recorded any.
    """
    out = []
    n_classes = None
    for seed, d in _seed_dirs(run_dir):
        header, rows = _read_csv(d / "metrics.csv")
        if tuple(header[1:]) != METRIC_COLUMNS:
            raise CliError(f"{d / 'metrics.csv'}: unexpected columns {header}")
        tables = [(header, rows)]
        sim_path = d / "prototype_similarity.csv"
        if sim_path.is_file():
            sh, srows = _read_csv(sim_path)
            n_classes = int(round((len(sh) - 1) ** 0.5))
            if any(v for r in srows for v in r[1:]):
                tables.append((sh, srows))
        for head, body in tables:
            for r in body:
                if len(r) != len(head):
                    raise CliError(f"{d}: ragged row for epoch {r[0] if r else '?'}")
                epoch = int(r[0])
                for name, cell in zip(head[1:], r[1:]):
                    out.append((epoch, seed, name, float(cell) if cell else None))
    return out, n_classes


def cmd_export_curves(args) -> int:
    rows, n_classes = collect_curves(Path(args.run_dir))
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "seed", "metric", "value"))
        for epoch, seed, metric, value in rows:
            w.writerow((epoch, seed, metric, "" if value is None else repr(value)))
    figures = []
    if not args.no_figures:
        from .plotting import render_figures
        figures = [str(p) for p in render_figures(rows, n_classes or 0, out.with_suffix(""))]
    print(json.dumps({"path": str(out), "rows": len(rows), "figures": figures}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="SynthConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one mode over one or more seeds")
    t.add_argument("--config", help="TrainConfig JSON; flags below override it")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--seeds", help="comma-separated, e.g. 0,1,2")
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--mu", type=float)
    t.add_argument("--standardize", action="store_true",
                   help="z-score features with D1+D2 statistics before training")
    t.add_argument("--run-name", help="fixed run directory name instead of timestamp_mode_hash")
    t.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="D3 accuracy of the checkpoints in a run directory")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--data", help="dataset path (default: the one recorded in config.json)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-curves", help="tidy CSV of per-epoch curves, plus PNG figures")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--out", required=True, help="CSV path; figures are written next to it")
    x.add_argument("--no-figures", action="store_true")
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export_curves)

    v = sub.add_parser("validate", help="check a dataset file's schema and invariants")
    v.add_argument("dataset")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetFormatError, DatasetValidationError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tastemix {fit,search,stats,synth,export-curve}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

from . import checkpoint
from .config import ExperimentConfig, load_config, make_synthetic, prepare_splits
from .data import compute_stats, load_interactions
from .errors import ConfigError, TastemixError
from .evaluation import evaluate_factorization, evaluate_sequence
from .factorization import ModelDims, init_params
from .search import curve_to_csv, export_curve, read_records, run_search, select_best
from .sequence import init_lstm
from .training import train_factorization, train_sequence

log = logging.getLogger("tastemix")


class UsageError(ConfigError):
    pass


def _prepare_out(out: Path, force: bool, resume: bool = False) -> None:
    if out.exists() and any(out.iterdir()):
        if resume:
            return
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)


def cmd_fit(cfg: ExperimentConfig, out: Path, force: bool = False, record_timing: bool = False) -> dict:
    """Split, train with the fixed model config, evaluate, write artifacts."""
    if cfg.model is None:
        raise UsageError("fit needs a 'model' section")
    hp = cfg.model
    _prepare_out(out, force)
    train, val, test = prepare_splits(cfg)
    opts = cfg.eval
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as logfh:
        if cfg.protocol == "factorization":
            dims = ModelDims(hp.k, hp.m, train.n_users, train.n_items)
            params = init_params(dims, hp.variant, seed=hp.seed)
            params, _ = train_factorization(params, train, hp, log_stream=logfh, log_timing=record_timing)
            kw = dict(exclude_known=opts.exclude_known, averaging=opts.averaging, ties=opts.ties)
            val_res = evaluate_factorization(params, val, train, **kw)
            test_res = evaluate_factorization(params, test, train, **kw)
        else:
            dims = ModelDims(hp.k, hp.m, len(train), train.n_items)
            params = init_lstm(dims, hp.variant, seed=hp.seed)
            params, _ = train_sequence(params, train, hp, log_stream=logfh, log_timing=record_timing)
            kw = dict(exclude_known=opts.exclude_known, ties=opts.ties)
            val_res = evaluate_sequence(params, val, **kw)
            test_res = evaluate_sequence(params, test, **kw)
    checkpoint.save_checkpoint(params, out / "checkpoint.bin")
    (out / "eval.json").write_text(test_res.to_json() + "\n", encoding="utf-8")
    (out / "val_eval.json").write_text(val_res.to_json() + "\n", encoding="utf-8")
    _write_json(out / "config.json", cfg.to_dict())
    log.info("test MRR %.4f over %d", test_res.mrr, test_res.n_evaluated)
    return json.loads(test_res.to_json())


def cmd_search(
    cfg: ExperimentConfig,
    out: Path,
    force: bool = False,
    jobs: int = 1,
    resume: bool = False,
    record_timing: bool = False,
) -> dict:
    """Random search; writes records.jsonl and curve.csv, returns the best config."""
    if cfg.search_variant is None:
        raise UsageError("search needs a 'search' section")
    _prepare_out(out, force, resume=resume)
    splits = prepare_splits(cfg)
    records = run_search(
        splits,
        cfg.search_variant,
        cfg.search_space,
        cfg.search_budget,
        seed=cfg.seed,
        records_path=out / "records.jsonl",
        jobs=jobs,
        options=cfg.eval,
        record_timing=record_timing,
    )
    (out / "curve.csv").write_text(curve_to_csv(export_curve(records)), encoding="utf-8")
    _write_json(out / "config.json", cfg.to_dict())
    best = select_best(records)
    return {
        "iteration": best.iteration,
        "val_mrr": best.val_mrr,
        "test_mrr": best.test_mrr,
        "config": best.config.to_dict(),
    }


def cmd_stats(path: Path, min_user: int = 0, min_item: int = 0) -> str:
    return compute_stats(load_interactions(path, min_user, min_item)).to_json()


def cmd_synth(descriptor: str, seed: int, out: Path, force: bool = False) -> Path:
    _prepare_out(out, force)
    data, blocks = make_synthetic(descriptor, seed)
    data.to_csv(out / "interactions.csv")
    _write_json(out / "blocks.json", {"descriptor": descriptor, "seed": seed, "blocks": blocks.tolist()})
    return out / "interactions.csv"


def cmd_export_curve(records_path: Path, out: Path | None, ungated: bool = False) -> str:
    text = curve_to_csv(export_curve(read_records(records_path), gated=not ungated))
    if out is not None:
        target = out / "curve.csv" if out.is_dir() else out
        target.write_text(text, encoding="utf-8")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tastemix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", type=Path, required=needs_config, help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("fit", help="train one fixed configuration and evaluate it")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; fit is single-threaded")
    p.add_argument("--record-timing", action="store_true", help="add wall-clock seconds to logs")

    p = sub.add_parser("search", help="random hyperparameter search")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel trials (1 = deterministic order)")
    p.add_argument("--resume", action="store_true", help="continue a search in --out")
    p.add_argument("--record-timing", action="store_true", help="store trial wall-clock seconds")

    p = sub.add_parser("stats", help="dataset statistics as JSON")
    p.add_argument("path", type=Path)
    p.add_argument("--min-user", type=int, default=0)
    p.add_argument("--min-item", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic dataset to CSV")
    p.add_argument("descriptor", nargs="?", help="synthetic:... descriptor (default: from --config)")
    common(p, needs_config=False)

    p = sub.add_parser("export-curve", help="best-test-MRR curve from a records file")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--ungated", action="store_true", help="running max of test MRR over all trials")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "fit":
            cfg = _with_seed(load_config(args.config), args.seed)
            print(json.dumps(cmd_fit(cfg, args.out, args.force, args.record_timing)))
        elif args.command == "search":
            cfg = _with_seed(load_config(args.config), args.seed)
            best = cmd_search(cfg, args.out, args.force, args.jobs, args.resume, args.record_timing)
            print(json.dumps(best, sort_keys=True))
        elif args.command == "stats":
            print(cmd_stats(args.path, args.min_user, args.min_item))
        elif args.command == "synth":
            if args.descriptor:
                descriptor, seed = args.descriptor, args.seed or 0
            elif args.config:
                cfg = _with_seed(load_config(args.config), args.seed)
                descriptor, seed = cfg.dataset, cfg.seed
            else:
                raise UsageError("synth needs a descriptor or --config")
            if not descriptor.startswith("synthetic:"):
                raise UsageError(f"not a synthetic descriptor: {descriptor!r}")
            print(cmd_synth(descriptor, seed, args.out, args.force))
        elif args.command == "export-curve":
            sys.stdout.write(cmd_export_curve(args.records, args.out, args.ungated))
    except ConfigError as exc:
        print(f"tastemix: config error: {exc}", file=sys.stderr)
        return 2
    except (TastemixError, OSError, ValueError, FloatingPointError) as exc:
        print(f"tastemix: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Random hyperparameter search with append-only trial records.

Records are JSON lines, one trial per line, written in iteration order as
trials finish. An interrupted search resumes by replaying the file: configs
are regenerated from the seed, checked against the recorded ones, and only
the missing iterations run.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionSet, SequenceSet
from .errors import ConfigError, TastemixError
from .evaluation import evaluate_factorization, evaluate_sequence
from .factorization import ModelDims, init_params
from .sequence import init_lstm
from .training import (
    LOSSES,
    MIXTURE_VARIANTS,
    VARIANTS,
    HyperConfig,
    train_factorization,
    train_sequence,
)

CURVE_HEADER = ("iteration", "best_test_mrr")


@dataclass(frozen=True)
class SearchSpace:
    """Sampling law per hyperparameter; ``k`` is fixed for the experiment."""

    k: int = 32
    learning_rate: tuple[float, float] = (1e-4, 1e-1)
    l2: tuple[float, float] = (1e-9, 1e-3)
    batch_size: tuple[int, ...] = (128, 256, 512, 1024)
    n_epochs: tuple[int, ...] = tuple(range(5, 55, 5))
    loss: tuple[str, ...] = LOSSES
    m: tuple[int, ...] = (2, 4, 6, 8)
    max_neg_attempts: tuple[int, ...] = (5,)

    def __post_init__(self):
        for name in ("learning_rate", "l2"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} range must satisfy 0 < low <= high, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        for name in ("batch_size", "n_epochs", "loss", "m", "max_neg_attempts"):
            choices = tuple(getattr(self, name))
            if not choices:
                raise ConfigError(f"{name} needs at least one choice")
            object.__setattr__(self, name, choices)
        bad = set(self.loss) - set(LOSSES)
        if bad:
            raise ConfigError(f"unknown losses {sorted(bad)}")
        if self.k < 1 or min(self.m) < 1 or min(self.batch_size) < 1 or min(self.max_neg_attempts) < 1:
            raise ConfigError("k, m, batch_size and max_neg_attempts must be positive")
        if min(self.n_epochs) < 0:
            raise ConfigError("n_epochs must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown search-space fields {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _choice(rng: np.random.Generator, options: Sequence):
    return options[int(rng.integers(len(options)))]


def sample_config(space: SearchSpace, rng: np.random.Generator, variant: str) -> HyperConfig:
    """Draw one configuration; ``m`` is only sampled for mixture variants.

    Every field consumes the generator in a fixed order regardless of
    variant, so baseline and mixture searches see the same draws.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    lr = _log_uniform(rng, *space.learning_rate)
    l2 = _log_uniform(rng, *space.l2)
    batch_size = _choice(rng, space.batch_size)
    n_epochs = _choice(rng, space.n_epochs)
    loss = _choice(rng, space.loss)
    m = _choice(rng, space.m)
    attempts = _choice(rng, space.max_neg_attempts)
    seed = int(rng.integers(2**31 - 1))
    return HyperConfig(
        variant=variant,
        k=space.k,
        m=int(m) if variant in MIXTURE_VARIANTS else 1,
        loss=loss,
        learning_rate=lr,
        l2=l2,
        batch_size=int(batch_size),
        n_epochs=int(n_epochs),
        max_neg_attempts=int(attempts),
        seed=seed,
    )


@dataclass
class TrialRecord:
    iteration: int
    config: HyperConfig
    val_mrr: float | None
    test_mrr: float | None
    train_seconds: float | None = None
    status: str = "ok"
    error: str | None = None

    def to_json(self) -> str:
        d = {
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "val_mrr": self.val_mrr,
            "test_mrr": self.test_mrr,
            "train_seconds": self.train_seconds,
            "status": self.status,
        }
        if self.error is not None:
            d["error"] = self.error
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        d = json.loads(line)
        return cls(
            iteration=int(d["iteration"]),
            config=HyperConfig.from_dict(d["config"]),
            val_mrr=d["val_mrr"],
            test_mrr=d["test_mrr"],
            train_seconds=d.get("train_seconds"),
            status=d.get("status", "ok"),
            error=d.get("error"),
        )


def read_records(path: str | Path) -> list[TrialRecord]:
    """Parse a records file, ignoring a torn final line from a crash."""
    records = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(TrialRecord.from_json(line))
        except (json.JSONDecodeError, KeyError) as exc:
            if n == len(lines) - 1:
                break
            raise TastemixError(f"{path}: corrupt record on line {n + 1}: {exc}") from None
    return records


@dataclass
class EvalOptions:
    exclude_known: bool = True
    averaging: str = "edge"
    ties: str = "expected"


def run_trial(splits, cfg: HyperConfig, options: EvalOptions | None = None) -> tuple[float, float]:
    """Train on the train split; return (validation MRR, test MRR)."""
    options = options or EvalOptions()
    train, val, test = splits
    if cfg.protocol == "factorization":
        if not isinstance(train, InteractionSet):
            raise ConfigError("factorization variants need InteractionSet splits")
        dims = ModelDims(cfg.k, cfg.m, train.n_users, train.n_items)
        params = init_params(dims, cfg.variant, seed=cfg.seed)
        params, _ = train_factorization(params, train, cfg)
        kw = dict(exclude_known=options.exclude_known, averaging=options.averaging, ties=options.ties)
        v = evaluate_factorization(params, val, train, **kw)
        t = evaluate_factorization(params, test, train, **kw)
    else:
        if not isinstance(train, SequenceSet):
            raise ConfigError("sequence variants need SequenceSet splits")
        dims = ModelDims(cfg.k, cfg.m, len(train), train.n_items)
        params = init_lstm(dims, cfg.variant, seed=cfg.seed)
        params, _ = train_sequence(params, train, cfg)
        v = evaluate_sequence(params, val, exclude_known=options.exclude_known, ties=options.ties)
        t = evaluate_sequence(params, test, exclude_known=options.exclude_known, ties=options.ties)
    return v.mrr, t.mrr


def _trial_job(args) -> TrialRecord:
    iteration, splits, cfg, options, record_timing = args
    start = time.perf_counter()
    try:
        val, test = run_trial(splits, cfg, options)
        if not (math.isfinite(val) and math.isfinite(test)):
            raise FloatingPointError("non-finite MRR")
        status, error = "ok", None
    except Exception as exc:  # a failed trial is data, not a crash
        val = test = None
        status, error = "failed", f"{type(exc).__name__}: {exc}"
    seconds = time.perf_counter() - start if record_timing else None
    return TrialRecord(iteration, cfg, val, test, seconds, status, error)


def search_configs(space: SearchSpace, variant: str, budget: int, seed: int) -> list[HyperConfig]:
    rng = np.random.default_rng(seed)
    return [sample_config(space, rng, variant) for _ in range(budget)]


def run_search(
    splits,
    variant: str,
    space: SearchSpace,
    budget: int,
    seed: int,
    records_path: str | Path | None = None,
    jobs: int = 1,
    options: EvalOptions | None = None,
    record_timing: bool = False,
) -> list[TrialRecord]:
    """Run ``budget`` random-search trials, persisting each as it finishes.

    With ``jobs > 1`` trials run in worker processes; each trial's outcome
    still depends only on its own config seed, and records are written in
    iteration order.
    """
    if budget < 1:
        raise ConfigError("search budget must be at least 1")
    configs = search_configs(space, variant, budget, seed)
    done: list[TrialRecord] = []
    if records_path is not None:
        records_path = Path(records_path)
        if records_path.exists():
            done = read_records(records_path)
            for rec in done:
                if rec.iteration >= budget or rec.config != configs[rec.iteration]:
                    raise TastemixError(
                        f"{records_path} holds trial {rec.iteration} from a different search"
                    )
            if [r.iteration for r in done] != list(range(len(done))):
                raise TastemixError(f"{records_path} has non-contiguous iterations")
        # fail on an unwritable path before any training
        open(records_path, "a", encoding="utf-8").close()
        _truncate_torn_tail(records_path, done)
    pending = [(i, splits, configs[i], options, record_timing) for i in range(len(done), budget)]
    records = list(done)

    def persist(rec: TrialRecord) -> None:
        records.append(rec)
        if records_path is not None:
            with open(records_path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rec in pool.map(_trial_job, pending):
                persist(rec)
    else:
        for job in pending:
            persist(_trial_job(job))
    return records


def _truncate_torn_tail(path: Path, done: list[TrialRecord]) -> None:
    """Rewrite the file from parsed records if it ends mid-line."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text and not text.endswith("\n"):
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(r.to_json() + "\n" for r in done)


def select_best(records: Iterable[TrialRecord]) -> TrialRecord:
    """The trial with the highest validation MRR (earliest wins ties)."""
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise TastemixError("no successful trials")
    return max(ok, key=lambda r: (r.val_mrr, -r.iteration))


def export_curve(records: Iterable[TrialRecord], gated: bool = True) -> list[tuple[int, float]]:
    """Best test MRR so far as a function of elapsed search iterations.

    Gated (default): a row is emitted at each trial that sets a new running
    validation maximum, valued at the running maximum of those trials' test
    MRRs. Ungated: one row per successful trial with the running maximum
    test MRR. Iterations are 1-based counts of elapsed trials.
    """
    ok = sorted((r for r in records if r.status == "ok"), key=lambda r: r.iteration)
    if not ok:
        raise TastemixError("cannot export a curve: every trial failed")
    curve = []
    best_val = -math.inf
    best_test = -math.inf
    for rec in ok:
        if gated:
            if rec.val_mrr <= best_val:
                continue
            best_val = rec.val_mrr
        best_test = max(best_test, rec.test_mrr)
        curve.append((rec.iteration + 1, best_test))
    return curve


def curve_to_csv(curve: list[tuple[int, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for it, value in curve:
        writer.writerow((it, repr(float(value))))
    return buf.getvalue()

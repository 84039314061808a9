"""Experiment configuration files (YAML) and dataset preparation.

Schema, version 1::

    schema_version: 1
    seed: 0                          # global seed: data generation and splits
    dataset: path/to/interactions.csv  # or a synthetic descriptor, see below
    protocol: factorization          # or: sequence
    split: [0.8, 0.1, 0.1]
    max_len: 100                     # sequence protocol only
    min_user: 0                      # pruning thresholds for CSV input
    min_item: 0
    eval: {exclude_known: true, averaging: edge, ties: expected}
    model:                           # fixed hyperparameters, used by `fit`
      variant: emf
      k: 32
      m: 4
      loss: adaptive_hinge
      learning_rate: 0.01
      l2: 1.0e-6
      batch_size: 256
      n_epochs: 10
      max_neg_attempts: 5
      seed: 0
    search:                          # used by `search`
      variant: emf
      budget: 15
      space: {k: 32, n_epochs: [5, 10, 15]}   # any SearchSpace field

Synthetic descriptors::

    synthetic:mixture:n_users=2000,n_items=400,n_tastes=8,interactions_per_user=40
    synthetic:markov:n_users=2000,n_items=400,n_tastes=8,seq_len=30,modes_per_user=2

``seed=`` may be added to a descriptor; otherwise the global seed is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import (
    InteractionSet,
    build_sequences,
    generate_synthetic_markov,
    generate_synthetic_mixture,
    load_interactions,
    random_split,
    user_disjoint_split,
)
from .errors import ConfigError
from .factorization import FACTORIZATION_VARIANTS
from .search import EvalOptions, SearchSpace
from .sequence import SEQUENCE_VARIANTS
from .training import HyperConfig

SCHEMA_VERSION = 1
PROTOCOLS = ("factorization", "sequence")

_SYNTH_INT_FIELDS = {
    "mixture": ("n_users", "n_items", "n_tastes", "interactions_per_user", "seed"),
    "markov": ("n_users", "n_items", "n_tastes", "seq_len", "modes_per_user", "seed"),
}
_SYNTH_FLOAT_FIELDS = {"mixture": (), "markov": ("switch_prob", "noise")}


@dataclass
class ExperimentConfig:
    dataset: str
    protocol: str
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_len: int = 100
    min_user: int = 0
    min_item: int = 0
    seed: int = 0
    eval: EvalOptions = field(default_factory=EvalOptions)
    model: HyperConfig | None = None
    search_variant: str | None = None
    search_budget: int | None = None
    search_space: SearchSpace | None = None
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        for variant in filter(None, (self.model and self.model.variant, self.search_variant)):
            check_compatible(self.protocol, variant)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "dataset": self.dataset,
            "protocol": self.protocol,
            "split": list(self.split),
            "max_len": self.max_len,
            "min_user": self.min_user,
            "min_item": self.min_item,
            "eval": vars(self.eval).copy(),
        }
        if self.model is not None:
            out["model"] = self.model.to_dict()
        if self.search_variant is not None:
            out["search"] = {
                "variant": self.search_variant,
                "budget": self.search_budget,
                "space": self.search_space.to_dict(),
            }
        return out


def check_compatible(protocol: str, variant: str) -> None:
    allowed = SEQUENCE_VARIANTS if protocol == "sequence" else FACTORIZATION_VARIANTS
    if variant not in allowed:
        raise ConfigError(
            f"variant {variant!r} does not fit the {protocol} protocol (expected one of {allowed})"
        )


def parse_config(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    try:
        dataset = str(raw.pop("dataset"))
        protocol = raw.pop("protocol")
    except KeyError as exc:
        raise ConfigError(f"config is missing {exc.args[0]!r}") from None
    eval_raw = raw.pop("eval", {}) or {}
    model_raw = raw.pop("model", None)
    search_raw = raw.pop("search", None)
    kwargs = {}
    for key in ("split", "max_len", "min_user", "min_item", "seed"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"unknown config keys {sorted(raw)}")
    if "split" in kwargs:
        kwargs["split"] = tuple(float(x) for x in kwargs["split"])
    try:
        options = EvalOptions(**eval_raw)
    except TypeError as exc:
        raise ConfigError(f"bad eval section: {exc}") from None
    if options.averaging not in ("edge", "user") or options.ties not in ("expected", "midrank"):
        raise ConfigError("eval.averaging must be edge|user and eval.ties expected|midrank")
    model = HyperConfig.from_dict(model_raw) if model_raw is not None else None
    search_variant = search_budget = space = None
    if search_raw is not None:
        search_raw = dict(search_raw)
        try:
            search_variant = search_raw.pop("variant")
            search_budget = int(search_raw.pop("budget"))
        except KeyError as exc:
            raise ConfigError(f"search section is missing {exc.args[0]!r}") from None
        space = SearchSpace.from_dict(search_raw.pop("space", {}) or {})
        if search_raw:
            raise ConfigError(f"unknown search keys {sorted(search_raw)}")
        if search_budget < 1:
            raise ConfigError("search.budget must be at least 1")
    return ExperimentConfig(
        dataset=dataset,
        protocol=protocol,
        eval=options,
        model=model,
        search_variant=search_variant,
        search_budget=search_budget,
        search_space=space,
        base_dir=base_dir,
        **kwargs,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(raw, base_dir=path.parent)


def parse_synthetic(descriptor: str) -> tuple[str, dict]:
    """``synthetic:<kind>:a=1,b=2`` -> (kind, kwargs)."""
    parts = descriptor.split(":", 2)
    if len(parts) < 2 or parts[0] != "synthetic" or parts[1] not in _SYNTH_INT_FIELDS:
        raise ConfigError(f"bad synthetic descriptor {descriptor!r}")
    kind = parts[1]
    kwargs: dict[str, Any] = {}
    body = parts[2] if len(parts) == 3 else ""
    for item in filter(None, body.split(",")):
        key, _, value = item.partition("=")
        key = key.strip()
        try:
            if key in _SYNTH_INT_FIELDS[kind]:
                kwargs[key] = int(value)
            elif key in _SYNTH_FLOAT_FIELDS[kind]:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"unknown field {key!r} for synthetic:{kind}")
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return kind, kwargs


def make_synthetic(descriptor: str, seed: int) -> tuple[InteractionSet, np.ndarray]:
    kind, kwargs = parse_synthetic(descriptor)
    kwargs.setdefault("seed", seed)
    try:
        if kind == "mixture":
            return generate_synthetic_mixture(**kwargs)
        return generate_synthetic_markov(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"synthetic:{kind}: {exc}") from None


def load_dataset(cfg: ExperimentConfig) -> InteractionSet:
    dedupe = cfg.protocol == "factorization"
    if cfg.dataset.startswith("synthetic:"):
        data, _ = make_synthetic(cfg.dataset, cfg.seed)
        return data.deduplicate() if dedupe else data
    path = Path(cfg.dataset)
    if not path.is_absolute():
        path = cfg.base_dir / path
    return load_interactions(path, cfg.min_user, cfg.min_item, dedupe=dedupe)


def prepare_splits(cfg: ExperimentConfig, data: InteractionSet | None = None):
    """(train, val, test) in the form the configured protocol trains on."""
    data = load_dataset(cfg) if data is None else data
    if cfg.protocol == "factorization":
        return random_split(data, cfg.split, seed=cfg.seed)
    parts = user_disjoint_split(data, cfg.split, seed=cfg.seed)
    return tuple(build_sequences(p, cfg.max_len) for p in parts)

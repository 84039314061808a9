"""Pairwise ranking losses, negative sampling, ADAM and the training loops."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, TextIO

import numpy as np

from .data import InteractionSet, SequenceSet
from .errors import ConfigError, ContractError, EmptyDatasetError
from .factorization import (
    FACTORIZATION_VARIANTS,
    EmfParams,
    MfParams,
    PmfParams,
    project_batch_backward,
    represent,
    score_candidates,
    score_pairs_backward,
)
from .sequence import SEQUENCE_VARIANTS, LstmParams, backward_batch, forward_batch, represent_hidden

VARIANTS = FACTORIZATION_VARIANTS + SEQUENCE_VARIANTS
LOSSES = ("bpr", "adaptive_hinge")
MIXTURE_VARIANTS = ("emf", "pmf", "mlstm")


@dataclass(frozen=True)
class HyperConfig:
    variant: str
    k: int = 32
    m: int = 1
    loss: str = "adaptive_hinge"
    learning_rate: float = 1e-2
    l2: float = 0.0
    batch_size: int = 256
    n_epochs: int = 10
    max_neg_attempts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.variant not in MIXTURE_VARIANTS:
            object.__setattr__(self, "m", 1)
        for name in ("k", "m", "batch_size", "max_neg_attempts"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_epochs < 0:
            raise ConfigError("n_epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.l2 < 0:
            raise ConfigError("l2 must be non-negative")

    @property
    def protocol(self) -> str:
        return "sequence" if self.variant in SEQUENCE_VARIANTS else "factorization"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# Losses


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def bpr_loss(r_pos, r_neg):
    """``1 - sigmoid(r_pos - r_neg)``, computed as ``sigmoid(r_neg - r_pos)``."""
    out = sigmoid(np.asarray(r_neg, dtype=float) - np.asarray(r_pos, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def hinge_loss(r_pos, r_neg):
    out = np.maximum(0.0, 1.0 - np.asarray(r_pos, dtype=float) + np.asarray(r_neg, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def _loss_and_slope(diff: np.ndarray, loss: str):
    """Per-row loss and dL/d(r_pos - r_neg)."""
    if loss == "bpr":
        s = sigmoid(-diff)
        return s, -s * (1.0 - s)
    margin = 1.0 - diff
    violated = margin > 0
    return np.where(violated, margin, 0.0), -violated.astype(float)


# ---------------------------------------------------------------------------
# Negative sampling


def sample_adaptive_negative(
    rng: np.random.Generator,
    score_fn: Callable[[int], float],
    r_pos: float,
    max_attempts: int,
    n_items: int,
) -> tuple[int, float]:
    """Draw uniform negatives until one violates the margin.

    Returns the first violator and its hinge loss, or the last draw with loss
    0 when none of the ``max_attempts`` draws violates.
    """
    if max_attempts < 1:
        raise ConfigError("max_attempts must be at least 1")
    for _ in range(max_attempts):
        neg = int(rng.integers(1, n_items + 1))
        loss = hinge_loss(r_pos, score_fn(neg))
        if loss > 0:
            return neg, loss
    return neg, 0.0


def sample_negatives(
    rng: np.random.Generator,
    rep,
    items,
    r_pos: np.ndarray,
    loss: str,
    max_attempts: int,
) -> np.ndarray:
    """Vectorised negative sampling for a batch of contexts.

    BPR takes one uniform draw per row. The adaptive hinge draws
    ``max_attempts`` candidates per row up front and keeps the first margin
    violator (or the last candidate), which has the same distribution as
    drawing them one at a time.
    """
    n_items = items.e.shape[0] - 1
    n = len(r_pos)
    if loss == "bpr" or max_attempts == 1:
        return rng.integers(1, n_items + 1, size=n)
    cand = rng.integers(1, n_items + 1, size=(n, max_attempts))
    scores = score_candidates(rep, items.e[cand], items.b[cand])
    violated = 1.0 - r_pos[:, None] + scores > 0
    pick = np.where(violated.any(axis=1), violated.argmax(axis=1), max_attempts - 1)
    return cand[np.arange(n), pick]


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class RowGrad:
    """Gradient touching only some rows of a table; ``rows`` are unique."""

    rows: np.ndarray
    values: np.ndarray

    @classmethod
    def accumulate(cls, rows: np.ndarray, values: np.ndarray, skip_zero: bool = False) -> "RowGrad":
        rows = np.asarray(rows, dtype=np.int64)
        if skip_zero:
            keep = rows != 0
            rows, values = rows[keep], values[keep]
        uniq, inverse = np.unique(rows, return_inverse=True)
        out = np.zeros((len(uniq),) + values.shape[1:])
        np.add.at(out, inverse, values)
        return cls(uniq, out)

    def to_dense(self, shape) -> np.ndarray:
        dense = np.zeros(shape)
        dense[self.rows] = self.values
        return dense


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, arrays: dict[str, np.ndarray], **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
            **kwargs,
        )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | RowGrad],
    lr: float,
    l2: float = 0.0,
):
    """One bias-corrected ADAM update, in place.

    ``l2 * theta`` is added to the raw gradient of every parameter present
    in ``grads``. For :class:`RowGrad` entries only the listed rows, and
    their moment estimates, are touched.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, grad in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        if isinstance(grad, RowGrad):
            rows = grad.rows
            if grad.values.shape[1:] != p.shape[1:] or len(grad.values) != len(rows):
                raise ValueError(f"{name}: gradient rows do not match parameter shape {p.shape}")
            g = grad.values + l2 * p[rows]
            m = b1 * state.m[name][rows] + (1.0 - b1) * g
            v = b2 * state.v[name][rows] + (1.0 - b2) * g * g
            state.m[name][rows] = m
            state.v[name][rows] = v
            p[rows] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        else:
            grad = np.asarray(grad)
            if grad.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {grad.shape} != parameter shape {p.shape}")
            g = grad + l2 * p
            m = state.m[name]
            v = state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Gradients


def _pair_scores(rep, items, pos, neg):
    r_pos = score_candidates(rep, items.e[pos][:, None], items.b[pos][:, None])[:, 0]
    r_neg = score_candidates(rep, items.e[neg][:, None], items.b[neg][:, None])[:, 0]
    return r_pos, r_neg


def _pairwise_backward(rep, items, pos, neg, loss: str, n_norm: int):
    """Mean pairwise loss over rows and gradients w.r.t. rep and item rows."""
    r_pos, r_neg = _pair_scores(rep, items, pos, neg)
    losses, slope = _loss_and_slope(r_pos - r_neg, loss)
    g = slope / n_norm
    d_rep_pos, de_pos = score_pairs_backward(rep, items.e[pos], g)
    d_rep_neg, de_neg = score_pairs_backward(rep, items.e[neg], -g)
    if isinstance(rep, tuple):
        d_rep = (d_rep_pos[0] + d_rep_neg[0], d_rep_pos[1] + d_rep_neg[1])
    else:
        d_rep = d_rep_pos + d_rep_neg
    item_rows = np.concatenate([pos, neg])
    item_grads = {
        "item_e": (item_rows, np.concatenate([de_pos, de_neg])),
        "item_b": (item_rows, np.concatenate([g, -g])),
    }
    return losses, d_rep, item_grads


def factorization_loss_and_grads(params, users, pos, neg, loss: str, rep=None):
    """Mean pairwise loss of explicit triplets and its gradients.

    Table gradients come back as :class:`RowGrad`, shared-parameter
    gradients (projection heads) as dense arrays.
    """
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    if rep is None:
        rep = represent(params, users)
    losses, d_rep, item_parts = _pairwise_backward(rep, params.items, pos, neg, loss, len(users))
    grads: dict[str, np.ndarray | RowGrad] = {}
    if isinstance(params, MfParams):
        grads["z"] = RowGrad.accumulate(users, d_rep)
    elif isinstance(params, EmfParams):
        grads["U"] = RowGrad.accumulate(users, d_rep[0])
        grads["A"] = RowGrad.accumulate(users, d_rep[1])
    elif isinstance(params, PmfParams):
        dz, head_grads = project_batch_backward(params.z[users], params.heads, *d_rep)
        grads["z"] = RowGrad.accumulate(users, dz)
        grads.update(head_grads)
    else:
        raise TypeError(f"unsupported params {type(params).__name__}")
    for name, (rows, values) in item_parts.items():
        grads[name] = RowGrad.accumulate(rows, values, skip_zero=True)
    return float(losses.mean()), grads


def sequence_contexts(seqs: np.ndarray):
    """(row, step) of every real position that has a successor, plus targets."""
    seqs = np.asarray(seqs)
    rows, steps = np.nonzero(seqs[:, :-1] != 0)
    return rows, steps, seqs[rows, steps + 1]


def sequence_loss_and_grads(params: LstmParams, seqs, neg, loss: str, cache=None):
    """Mean next-item pairwise loss over every real step of a batch.

    ``neg`` holds one negative per context in :func:`sequence_contexts`
    order.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    if cache is None:
        cache = forward_batch(params, seqs)
    rows, steps, pos = sequence_contexts(seqs)
    neg = np.asarray(neg, dtype=np.int64)
    n = len(rows)
    if n == 0:
        raise ContractError("batch has no real step with a successor")
    h = cache.h[rows, steps]
    rep = represent_hidden(params, h)
    losses, d_rep, item_parts = _pairwise_backward(rep, params.items, pos, neg, loss, n)
    grads: dict[str, np.ndarray | RowGrad] = {}
    if params.heads is None:
        dh_ctx = d_rep
    else:
        dh_ctx, head_grads = project_batch_backward(h, params.heads, *d_rep)
        grads.update(head_grads)
    dh = np.zeros_like(cache.h)
    dh[rows, steps] = dh_ctx
    lstm_grads, dx = backward_batch(params, cache, dh)
    grads.update(lstm_grads)
    real = cache.mask
    e_rows = np.concatenate([seqs[real], item_parts["item_e"][0]])
    e_vals = np.concatenate([dx[real], item_parts["item_e"][1]])
    grads["item_e"] = RowGrad.accumulate(e_rows, e_vals, skip_zero=True)
    grads["item_b"] = RowGrad.accumulate(*item_parts["item_b"], skip_zero=True)
    return float(losses.mean()), grads


def densify(grads: dict, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {
        name: g.to_dense(arrays[name].shape) if isinstance(g, RowGrad) else np.asarray(g)
        for name, g in grads.items()
    }


# ---------------------------------------------------------------------------
# Loops


def _emit(stream: TextIO | None, epoch: int, loss: float, seconds: float | None) -> None:
    if stream is not None:
        record = {"epoch": epoch, "loss": loss}
        if seconds is not None:
            record["seconds"] = seconds
        stream.write(json.dumps(record) + "\n")
        stream.flush()


def _check_variant(params, cfg: HyperConfig) -> None:
    if params.variant != cfg.variant:
        raise ConfigError(f"params are {params.variant!r} but config asks for {cfg.variant!r}")
    if params.dims.k != cfg.k or params.dims.m != cfg.m:
        raise ConfigError("params dims do not match config k/m")


def train_factorization(
    params,
    train: InteractionSet,
    cfg: HyperConfig,
    log_stream: TextIO | None = None,
    log_timing: bool = True,
):
    """Train a copy of ``params``; returns (params, per-epoch mean loss)."""
    _check_variant(params, cfg)
    if len(train) == 0:
        raise EmptyDatasetError("training set is empty")
    params = params.copy()
    arrays = params.arrays()
    state = AdamState.for_params(arrays)
    rng = np.random.default_rng(cfg.seed)
    users_all, items_all = train.users, train.items
    history = []
    for epoch in range(cfg.n_epochs):
        start = time.perf_counter()
        perm = rng.permutation(len(train))
        total = 0.0
        for lo in range(0, len(perm), cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            users, pos = users_all[idx], items_all[idx]
            rep = represent(params, users)
            r_pos = score_candidates(rep, params.items.e[pos][:, None], params.items.b[pos][:, None])[:, 0]
            neg = sample_negatives(rng, rep, params.items, r_pos, cfg.loss, cfg.max_neg_attempts)
            loss, grads = factorization_loss_and_grads(params, users, pos, neg, cfg.loss, rep=rep)
            adam_step(state, arrays, grads, cfg.learning_rate, cfg.l2)
            total += loss * len(idx)
        history.append(total / len(perm))
        _emit(log_stream, epoch, history[-1], time.perf_counter() - start if log_timing else None)
    return params, history


def train_sequence(
    params: LstmParams,
    seqs: SequenceSet,
    cfg: HyperConfig,
    log_stream: TextIO | None = None,
    log_timing: bool = True,
):
    """Next-item training over every real step; returns (params, per-epoch mean loss).

    ``cfg.batch_size`` counts sequences per optimizer step.
    """
    _check_variant(params, cfg)
    data = seqs.sequences
    data = data[(data[:, :-1] != 0).any(axis=1)]
    if len(data) == 0:
        raise EmptyDatasetError("no sequence has a prediction target")
    params = params.copy()
    arrays = params.arrays()
    state = AdamState.for_params(arrays)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.n_epochs):
        start = time.perf_counter()
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = data[perm[lo:lo + cfg.batch_size]]
            cache = forward_batch(params, batch)
            rows, steps, pos = sequence_contexts(batch)
            rep = represent_hidden(params, cache.h[rows, steps])
            r_pos = score_candidates(rep, params.items.e[pos][:, None], params.items.b[pos][:, None])[:, 0]
            neg = sample_negatives(rng, rep, params.items, r_pos, cfg.loss, cfg.max_neg_attempts)
            loss, grads = sequence_loss_and_grads(params, batch, neg, cfg.loss, cache=cache)
            adam_step(state, arrays, grads, cfg.learning_rate, cfg.l2)
            total += loss * len(rows)
            count += len(rows)
        history.append(total / count)
        _emit(log_stream, epoch, history[-1], time.perf_counter() - start if log_timing else None)
    return params, history

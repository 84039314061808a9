"""Mean reciprocal rank for factorization and next-item protocols.

Ties are broken uniformly at random in expectation. The default
``ties="expected"`` returns E[1/rank] over all tie orders. ``ties="midrank"``
returns 1/E[rank] instead, which is slightly lower whenever ties exist.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import InteractionSet, SequenceSet
from .errors import ContractError, EmptyDatasetError
from .factorization import score_catalog, represent
from .sequence import LstmParams, forward_batch, represent_hidden

TIE_RULES = ("expected", "midrank")


@dataclass(frozen=True)
class EvalResult:
    mrr: float
    n_evaluated: int
    reciprocal_ranks: np.ndarray
    protocol: str

    def to_json(self) -> str:
        return json.dumps({"mrr": self.mrr, "n": self.n_evaluated, "protocol": self.protocol})


def _tie_rr(greater: np.ndarray, ties: np.ndarray, rule: str) -> np.ndarray:
    """Reciprocal rank given counts of strictly better and tied competitors."""
    greater = np.asarray(greater, dtype=float)
    ties = np.asarray(ties, dtype=float)
    if rule == "midrank":
        return 1.0 / (1.0 + greater + 0.5 * ties)
    if rule != "expected":
        raise ValueError(f"unknown tie rule {rule!r}; expected one of {TIE_RULES}")
    # mean of 1/(g+1), ..., 1/(g+q+1) via harmonic-number differences
    out = np.empty(np.broadcast(greater, ties).shape)
    g = np.broadcast_to(greater, out.shape).astype(np.int64)
    q = np.broadcast_to(ties, out.shape).astype(np.int64)
    top = int((g + q).max(initial=0)) + 1
    harmonic = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, top + 1))])
    spread = (harmonic[g + q + 1] - harmonic[g]) / np.maximum(q + 1, 1)
    out[...] = np.where(q == 0, 1.0 / (g + 1.0), spread)
    return out


def reciprocal_rank(scores, target: int, excluded=(), ties: str = "expected") -> float:
    """Reciprocal rank of ``target`` (1-based item id) in ``scores``.

    ``scores[j - 1]`` is the score of item ``j``. Items in ``excluded`` are
    removed from the ranking; the target itself may not be excluded.
    """
    scores = np.asarray(scores, dtype=float)
    excluded = set(int(x) for x in excluded)
    if target in excluded:
        raise ContractError(f"target item {target} is in the excluded set")
    if not 1 <= target <= len(scores):
        raise IndexError(f"target {target} outside [1, {len(scores)}]")
    live = np.ones(len(scores), dtype=bool)
    if excluded:
        live[np.fromiter(excluded, dtype=np.int64) - 1] = False
    s = scores[target - 1]
    greater = int((live & (scores > s)).sum())
    tied = int((live & (scores == s)).sum()) - 1
    return float(_tie_rr(greater, tied, ties))


def _batched_rr(scores: np.ndarray, targets: np.ndarray, excluded_mask: np.ndarray, ties: str):
    """Row-wise reciprocal ranks; ``scores`` and mask are (N, n_items)."""
    target_scores = scores[np.arange(len(targets)), targets - 1][:, None]
    live = ~excluded_mask
    greater = (live & (scores > target_scores)).sum(axis=1)
    tied = (live & (scores == target_scores)).sum(axis=1) - 1
    return _tie_rr(greater, tied, ties)


def evaluate_factorization(
    params,
    test: InteractionSet,
    train: InteractionSet,
    exclude_known: bool = True,
    averaging: str = "edge",
    ties: str = "expected",
    chunk: int = 256,
) -> EvalResult:
    """MRR of held-out (user, item) edges against the full catalog.

    Each test edge is ranked with the user's training items removed (when
    ``exclude_known``). ``averaging="edge"`` means over edges;
    ``"user"`` first averages within each user.
    """
    if len(test) == 0:
        raise EmptyDatasetError("test set is empty")
    if averaging not in ("edge", "user"):
        raise ValueError(f"unknown averaging {averaging!r}")
    order = np.argsort(test.users, kind="stable")
    t_users = test.users[order]
    t_items = test.items[order]
    eval_users = np.unique(t_users)
    n_items = params.dims.n_items
    known = train.user_items() if exclude_known else None
    rr = np.empty(len(test))
    for lo in range(0, len(eval_users), chunk):
        block = eval_users[lo:lo + chunk]
        scores = score_catalog(represent(params, block), params.items)
        first = np.searchsorted(t_users, block[0], side="left")
        last = np.searchsorted(t_users, block[-1], side="right")
        edge_users = t_users[first:last]
        row = np.searchsorted(block, edge_users)
        mask = np.zeros((len(block), n_items), dtype=bool)
        if known is not None:
            for r, u in enumerate(block):
                if u < len(known) and len(known[u]):
                    mask[r, known[u] - 1] = True
        targets = t_items[first:last]
        edge_mask = mask[row]
        edge_mask[np.arange(len(targets)), targets - 1] = False
        rr[first:last] = _batched_rr(scores[row], targets, edge_mask, ties)
    if averaging == "user":
        _, inverse = np.unique(t_users, return_inverse=True)
        per_user = np.bincount(inverse, weights=rr) / np.bincount(inverse)
        values = per_user
    else:
        values = np.empty_like(rr)
        values[order] = rr
    return EvalResult(float(values.mean()), len(values), values, "factorization")


def evaluate_sequence(
    params: LstmParams,
    test: SequenceSet,
    exclude_known: bool = True,
    ties: str = "expected",
    chunk: int = 512,
) -> EvalResult:
    """MRR of each row's final item predicted from the items before it.

    Earlier items of the row (other than the target itself) are excluded
    from the ranking when ``exclude_known``.
    """
    seqs = test.sequences
    if len(seqs) == 0:
        raise EmptyDatasetError("no sequences to evaluate")
    if (test.lengths() < 2).any():
        raise ContractError("every evaluated sequence needs at least 2 real items")
    targets = seqs[:, -1]
    inputs = np.zeros_like(seqs)
    inputs[:, 1:] = seqs[:, :-1]
    rr = np.empty(len(seqs))
    for lo in range(0, len(seqs), chunk):
        sl = slice(lo, lo + chunk)
        cache = forward_batch(params, inputs[sl])
        rep = represent_hidden(params, cache.h[:, -1])
        scores = score_catalog(rep, params.items)
        mask = np.zeros(scores.shape, dtype=bool)
        if exclude_known:
            history = inputs[sl]
            r, t = np.nonzero(history)
            mask[r, history[r, t] - 1] = True
        tg = targets[sl]
        mask[np.arange(len(tg)), tg - 1] = False
        rr[sl] = _batched_rr(scores, tg, mask, ties)
    return EvalResult(float(rr.mean()), len(rr), rr, "sequence")

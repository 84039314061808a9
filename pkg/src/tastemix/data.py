"""Interaction ingestion, pruning, splitting, sequence padding and synthetic data.

Item ids are 1-based; id 0 is reserved as the sequence padding value and never
appears in an :class:`InteractionSet`. User ids are 0-based.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, ParseError

CSV_HEADER = ("user_id", "item_id", "rating", "timestamp")


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: int = 0


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    arr.setflags(write=False)
    return arr


class InteractionSet:
    """Columnar store of (user, item, timestamp) triples.

    Row order is meaningful: it is the input order, used to break timestamp
    ties. ``user_ids`` / ``item_ids`` optionally hold the original raw ids so
    that ``user_ids[u]`` is the raw id of dense user ``u`` and
    ``item_ids[j - 1]`` the raw id of dense item ``j``.
    """

    def __init__(
        self,
        users,
        items,
        timestamps=None,
        n_users: int | None = None,
        n_items: int | None = None,
        user_ids: Sequence[str] | None = None,
        item_ids: Sequence[str] | None = None,
    ):
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        if timestamps is None:
            timestamps = np.zeros_like(users)
        timestamps = np.asarray(timestamps, dtype=np.int64).reshape(-1)
        if not (len(users) == len(items) == len(timestamps)):
            raise ValueError("users, items and timestamps must have equal length")
        if n_users is None:
            n_users = int(users.max()) + 1 if len(users) else 0
        if n_items is None:
            n_items = int(items.max()) if len(items) else 0
        if len(users):
            if users.min() < 0 or users.max() >= n_users:
                raise ValueError("user id out of range [0, n_users)")
            if items.min() < 1 or items.max() > n_items:
                raise ValueError("item id out of range [1, n_items]")
        self.users = _readonly(users)
        self.items = _readonly(items)
        self.timestamps = _readonly(timestamps)
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.user_ids = tuple(user_ids) if user_ids is not None else None
        self.item_ids = tuple(item_ids) if item_ids is not None else None

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[Interaction]:
        for u, i, t in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()):
            yield Interaction(u, i, t)

    def __repr__(self) -> str:
        return (
            f"InteractionSet(n_interactions={len(self)}, "
            f"n_users={self.n_users}, n_items={self.n_items})"
        )

    @property
    def interactions(self) -> list[Interaction]:
        return list(self)

    def subset(self, index) -> "InteractionSet":
        """Rows selected by ``index`` (mask or integer array), same id space."""
        return InteractionSet(
            self.users[index],
            self.items[index],
            self.timestamps[index],
            n_users=self.n_users,
            n_items=self.n_items,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def deduplicate(self) -> "InteractionSet":
        """Collapse repeated (user, item) pairs to their earliest occurrence.

        Earliest means smallest timestamp, ties going to the first row in
        input order. Surviving rows keep their relative input order.
        """
        if len(self) == 0:
            return self
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.items, self.users))
        u, i = self.users[order], self.items[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
        return self.subset(np.sort(order[first]))

    def user_items(self) -> list[np.ndarray]:
        """Per-user arrays of item ids (input order), indexed by dense user id."""
        order = np.argsort(self.users, kind="stable")
        bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
        items = self.items[order]
        return [items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def to_csv(self, path: str | Path) -> None:
        """Write with dense ids (raw ids are not preserved)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("user_id", "item_id", "timestamp"))
            for u, i, t in zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()):
                writer.writerow((u, i, t))


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    density: float
    pop_ratio_95_50: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_users": self.n_users,
                "n_items": self.n_items,
                "density": self.density,
                "pop_ratio_95_50": self.pop_ratio_95_50,
            }
        )


@dataclass(frozen=True)
class SequenceSet:
    """Left-padded item-id sequences, one row per user, oldest item first."""

    sequences: np.ndarray
    users: np.ndarray
    n_items: int

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.int64)
        if seqs.ndim != 2:
            raise ValueError("sequences must be a 2-d array")
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        if len(users) != len(seqs):
            raise ValueError("users must align with sequence rows")
        object.__setattr__(self, "sequences", _readonly(seqs))
        object.__setattr__(self, "users", _readonly(users))

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def max_len(self) -> int:
        return self.sequences.shape[1]

    def lengths(self) -> np.ndarray:
        return (self.sequences != 0).sum(axis=1)


# ---------------------------------------------------------------------------
# Ingestion


def _remap(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    """Dense ids in sorted order of raw id (numeric order when all are ints)."""
    uniq = set(raw)
    try:
        ordered = sorted(uniq, key=lambda v: (int(v), v))
    except ValueError:
        ordered = sorted(uniq)
    lookup = {v: n for n, v in enumerate(ordered)}
    return np.fromiter((lookup[v] for v in raw), dtype=np.int64, count=len(raw)), ordered


def prune(users: np.ndarray, items: np.ndarray, min_user: int, min_item: int) -> np.ndarray:
    """Boolean keep-mask after pruning to a fixpoint.

    Removing sparse items can push users under threshold and vice versa, so
    passes repeat until nothing changes.
    """
    keep = np.ones(len(users), dtype=bool)
    if min_user <= 0 and min_item <= 0:
        return keep
    while True:
        u, i = users[keep], items[keep]
        ucount = np.bincount(u, minlength=users.max() + 1 if len(users) else 0)
        icount = np.bincount(i, minlength=items.max() + 1 if len(items) else 0)
        new_keep = keep & (ucount[users] >= min_user) & (icount[items] >= min_item)
        if new_keep.sum() == keep.sum():
            return new_keep
        keep = new_keep


def load_interactions(
    path: str | Path, min_user: int = 0, min_item: int = 0, dedupe: bool = True
) -> InteractionSet:
    """Read an interaction CSV, prune sparse users/items and remap ids densely.

    The header must name ``user_id`` and ``item_id``; ``rating`` is ignored
    and ``timestamp`` defaults to 0 when absent. With ``dedupe`` (the
    factorization convention) repeated pairs collapse to the earliest one;
    sequence data should pass ``dedupe=False`` to keep repeat consumption.
    """
    raw_users: list[str] = []
    raw_items: list[str] = []
    stamps: list[int] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        for col in ("user_id", "item_id"):
            if col not in header:
                raise ParseError(f"header is missing column {col!r}", line=1)
        unknown = set(header) - set(CSV_HEADER)
        if unknown:
            raise ParseError(f"unexpected columns {sorted(unknown)}", line=1)
        ucol, icol = header.index("user_id"), header.index("item_id")
        tcol = header.index("timestamp") if "timestamp" in header else None
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
            user, item = row[ucol].strip(), row[icol].strip()
            if not user or not item:
                raise ParseError("empty id", line=lineno)
            ts = 0
            if tcol is not None and row[tcol].strip():
                try:
                    ts = int(float(row[tcol]))
                except ValueError:
                    raise ParseError(f"bad timestamp {row[tcol]!r}", line=lineno) from None
            raw_users.append(user)
            raw_items.append(item)
            stamps.append(ts)

    users, user_order = _remap(raw_users)
    items, item_order = _remap(raw_items)
    ts = np.asarray(stamps, dtype=np.int64)
    if dedupe and len(users):
        rows = InteractionSet(users, items + 1, ts).deduplicate()
        users, items, ts = rows.users, rows.items - 1, rows.timestamps
    keep = prune(users, items, min_user, min_item) if len(users) else np.zeros(0, bool)
    if not keep.any():
        raise EmptyDatasetError(f"no interactions left in {path} after pruning")

    # first remap was sorted by raw id, so compacting survivors keeps that order
    kept_u, dense_u = np.unique(users[keep], return_inverse=True)
    kept_i, dense_i = np.unique(items[keep], return_inverse=True)
    return InteractionSet(
        dense_u,
        dense_i + 1,
        ts[keep],
        n_users=len(kept_u),
        n_items=len(kept_i),
        user_ids=[user_order[n] for n in kept_u],
        item_ids=[item_order[n] for n in kept_i],
    )


# ---------------------------------------------------------------------------
# Statistics


def compute_stats(data: InteractionSet) -> DatasetStats:
    """Size, density and the 95th/50th percentile item-popularity ratio.

    Percentiles use linear interpolation over the per-item interaction
    counts of items that occur in ``data``.
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot compute statistics of an empty dataset")
    counts = np.bincount(data.items, minlength=data.n_items + 1)[1:]
    counts = counts[counts > 0]
    p95, p50 = np.percentile(counts, [95, 50])
    return DatasetStats(
        n_users=data.n_users,
        n_items=data.n_items,
        density=len(data) / (data.n_users * data.n_items),
        pop_ratio_95_50=float(p95 / p50),
    )


# ---------------------------------------------------------------------------
# Splits


def _check_fractions(fractions) -> tuple[float, float, float]:
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3:
        raise ConfigError("split needs exactly three fractions (train, val, test)")
    if any(f < 0 for f in fr) or fr[0] <= 0:
        raise ConfigError(f"split fractions must be non-negative with train > 0: {fr}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fr)!r}")
    return fr


def _cut_points(n: int, fractions: tuple[float, float, float]) -> tuple[int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_train + n_val


def random_split(data: InteractionSet, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Split interactions uniformly at random into train / validation / test.

    Val and test users or items need not appear in train.
    """
    fr = _check_fractions(fractions)
    perm = np.random.default_rng(seed).permutation(len(data))
    a, b = _cut_points(len(data), fr)
    return tuple(data.subset(np.sort(part)) for part in (perm[:a], perm[a:b], perm[b:]))


def user_disjoint_split(data: InteractionSet, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Assign whole users at random to train / validation / test."""
    fr = _check_fractions(fractions)
    present = np.unique(data.users)
    perm = np.random.default_rng(seed).permutation(present)
    a, b = _cut_points(len(present), fr)
    parts = []
    for group in (perm[:a], perm[a:b], perm[b:]):
        parts.append(data.subset(np.isin(data.users, group)))
    return tuple(parts)


# ---------------------------------------------------------------------------
# Sequences


def build_sequences(data: InteractionSet, max_len: int) -> SequenceSet:
    """Chronological per-user item sequences, left-padded with zeros.

    Timestamp ties keep input order. Only the ``max_len`` most recent items
    are kept, and users with fewer than two interactions are dropped.
    """
    if max_len < 2:
        raise ConfigError(f"max_len must be at least 2, got {max_len}")
    order = np.lexsort((np.arange(len(data)), data.timestamps, data.users))
    users = data.users[order]
    items = data.items[order]
    uniq, starts, counts = np.unique(users, return_index=True, return_counts=True)
    keep = counts >= 2
    rows = np.zeros((int(keep.sum()), max_len), dtype=np.int64)
    for r, (start, count) in enumerate(zip(starts[keep], counts[keep])):
        seq = items[start:start + count][-max_len:]
        rows[r, max_len - len(seq):] = seq
    return SequenceSet(rows, uniq[keep], data.n_items)


# ---------------------------------------------------------------------------
# Synthetic data


def _block_items(n_items: int, n_tastes: int) -> int:
    if n_tastes < 1 or n_items % n_tastes:
        raise ConfigError(f"n_items={n_items} must be divisible by n_tastes={n_tastes}")
    return n_items // n_tastes


def _assign_blocks(rng: np.random.Generator, n_users: int, n_tastes: int, per_user: int):
    per_user = min(per_user, n_tastes)
    return np.stack([rng.choice(n_tastes, size=per_user, replace=False) for _ in range(n_users)])


def generate_synthetic_mixture(
    n_users: int,
    n_items: int,
    n_tastes: int,
    interactions_per_user: int,
    seed: int = 0,
) -> tuple[InteractionSet, np.ndarray]:
    """Users whose interactions come from two of ``n_tastes`` item blocks.

    Items are split into contiguous equal blocks (block ``b`` holds items
    ``b*size + 1 .. (b+1)*size``). Each user gets two distinct blocks (one
    when ``n_tastes == 1``) and draws items uniformly, with replacement, from
    their union. Timestamps are the draw index. Returns the raw draws
    (repeats included) and the ``(n_users, 2)`` block assignment.
    """
    size = _block_items(n_items, n_tastes)
    rng = np.random.default_rng(seed)
    blocks = _assign_blocks(rng, n_users, n_tastes, 2)
    n_blocks = blocks.shape[1]
    which = rng.integers(n_blocks, size=(n_users, interactions_per_user))
    offset = rng.integers(size, size=(n_users, interactions_per_user))
    items = np.take_along_axis(blocks, which, axis=1) * size + offset + 1
    users = np.repeat(np.arange(n_users), interactions_per_user)
    stamps = np.tile(np.arange(interactions_per_user), n_users)
    data = InteractionSet(users, items.reshape(-1), stamps, n_users=n_users, n_items=n_items)
    return data, blocks


def generate_synthetic_markov(
    n_users: int,
    n_items: int,
    n_tastes: int,
    seq_len: int,
    modes_per_user: int = 2,
    switch_prob: float = 0.3,
    noise: float = 0.1,
    seed: int = 0,
) -> tuple[InteractionSet, np.ndarray]:
    """Interaction sequences from per-user multi-mode Markov processes.

    Every item block carries a fixed random cyclic successor order, shared by
    all users. A user owns ``modes_per_user`` blocks and keeps a current mode
    plus the last item visited in each mode. At every step the mode flips to
    one of the user's other blocks with probability ``switch_prob``; the next
    item is then the successor of that mode's last item, or a uniform item of
    the block with probability ``noise``. ``modes_per_user=1`` gives plain
    first-order Markov chains.
    """
    size = _block_items(n_items, n_tastes)
    if not 0.0 <= switch_prob <= 1.0 or not 0.0 <= noise <= 1.0:
        raise ConfigError("switch_prob and noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    successor = np.zeros(n_items + 1, dtype=np.int64)
    for b in range(n_tastes):
        cycle = rng.permutation(size) + b * size + 1
        successor[cycle] = np.roll(cycle, -1)
    blocks = _assign_blocks(rng, n_users, n_tastes, modes_per_user)
    n_modes = blocks.shape[1]

    users = np.repeat(np.arange(n_users), seq_len)
    items = np.empty((n_users, seq_len), dtype=np.int64)
    for u in range(n_users):
        last = blocks[u] * size + rng.integers(size, size=n_modes) + 1
        mode = int(rng.integers(n_modes))
        for t in range(seq_len):
            if n_modes > 1 and rng.random() < switch_prob:
                mode = (mode + 1 + int(rng.integers(n_modes - 1))) % n_modes
            if rng.random() < noise:
                nxt = blocks[u, mode] * size + int(rng.integers(size)) + 1
            else:
                nxt = successor[last[mode]]
            last[mode] = nxt
            items[u, t] = nxt
    stamps = np.tile(np.arange(seq_len), n_users)
    data = InteractionSet(users, items.reshape(-1), stamps, n_users=n_users, n_items=n_items)
    return data, blocks

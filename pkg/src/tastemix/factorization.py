"""Matrix factorization and mixture-of-tastes factorization models.

Three variants share one item table (embeddings ``e`` plus bias ``b``):

* ``mf``  -- one user vector ``z``; score ``z . e_j + b_j``.
* ``emf`` -- per-user taste matrix ``U`` and attention matrix ``A`` (m x k each).
* ``pmf`` -- one user vector projected into ``U`` and ``A`` by ``m`` shared
  affine heads.

Mixture score: ``softmax(A e_j) . (U e_j) + b_j``. Item row 0 is padding and
stays zero.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

FACTORIZATION_VARIANTS = ("mf", "emf", "pmf")


@dataclass(frozen=True)
class ModelDims:
    k: int
    m: int
    n_users: int
    n_items: int

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise ConfigError(f"need k >= 1 and m >= 1, got k={self.k}, m={self.m}")
        if self.n_users < 0 or self.n_items < 1:
            raise ConfigError("need n_users >= 0 and n_items >= 1")


@dataclass
class ItemParams:
    e: np.ndarray  # (n_items + 1, k), row 0 padding
    b: np.ndarray  # (n_items + 1,)


@dataclass
class ProjectionHeads:
    W_U: np.ndarray  # (m, k, k)
    B_U: np.ndarray  # (m, k)
    W_A: np.ndarray  # (m, k, k)
    B_A: np.ndarray  # (m, k)

    @classmethod
    def identity(cls, m: int, k: int) -> "ProjectionHeads":
        eye = np.broadcast_to(np.eye(k), (m, k, k)).copy()
        return cls(eye, np.zeros((m, k)), eye.copy(), np.zeros((m, k)))


class _Params:
    """Shared plumbing: named views of all arrays, copying, item access."""

    variant: str
    dims: ModelDims
    items: ItemParams

    def arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.arrays()
        if set(own) != set(arrays):
            raise ValueError(f"array names differ: {sorted(own)} vs {sorted(arrays)}")
        for name, arr in own.items():
            if arr.shape != arrays[name].shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {arr.shape}")
            arr[...] = arrays[name]


def _item_arrays(items: ItemParams) -> dict[str, np.ndarray]:
    return {"item_e": items.e, "item_b": items.b}


def _head_arrays(heads: ProjectionHeads) -> dict[str, np.ndarray]:
    return {"W_U": heads.W_U, "B_U": heads.B_U, "W_A": heads.W_A, "B_A": heads.B_A}


@dataclass
class MfParams(_Params):
    dims: ModelDims
    z: np.ndarray  # (n_users, k)
    items: ItemParams
    variant = "mf"

    def arrays(self):
        return {"z": self.z, **_item_arrays(self.items)}


@dataclass
class EmfParams(_Params):
    dims: ModelDims
    U: np.ndarray  # (n_users, m, k)
    A: np.ndarray  # (n_users, m, k)
    items: ItemParams
    variant = "emf"

    def arrays(self):
        return {"U": self.U, "A": self.A, **_item_arrays(self.items)}


@dataclass
class PmfParams(_Params):
    dims: ModelDims
    z: np.ndarray  # (n_users, k)
    heads: ProjectionHeads
    items: ItemParams
    variant = "pmf"

    def arrays(self):
        return {"z": self.z, **_head_arrays(self.heads), **_item_arrays(self.items)}


def init_items(rng: np.random.Generator, n_items: int, k: int) -> ItemParams:
    e = rng.normal(0.0, 1.0 / np.sqrt(k), size=(n_items + 1, k))
    e[0] = 0.0
    return ItemParams(e, np.zeros(n_items + 1))


def init_heads(rng: np.random.Generator, m: int, k: int) -> ProjectionHeads:
    scale = 1.0 / np.sqrt(k)
    return ProjectionHeads(
        W_U=rng.normal(0.0, scale, size=(m, k, k)),
        B_U=np.zeros((m, k)),
        W_A=rng.normal(0.0, scale, size=(m, k, k)),
        B_A=np.zeros((m, k)),
    )


def init_params(dims: ModelDims, variant: str, seed: int = 0):
    """Normal(0, 1/sqrt(k)) embeddings and projections, zero biases."""
    rng = np.random.default_rng(seed)
    k, m = dims.k, dims.m
    scale = 1.0 / np.sqrt(k)
    items = init_items(rng, dims.n_items, k)
    if variant == "mf":
        return MfParams(dims, rng.normal(0.0, scale, size=(dims.n_users, k)), items)
    if variant == "emf":
        U = rng.normal(0.0, scale, size=(dims.n_users, m, k))
        A = rng.normal(0.0, scale, size=(dims.n_users, m, k))
        return EmfParams(dims, U, A, items)
    if variant == "pmf":
        z = rng.normal(0.0, scale, size=(dims.n_users, k))
        return PmfParams(dims, z, init_heads(rng, m, k), items)
    raise ConfigError(f"unknown factorization variant {variant!r}")


# ---------------------------------------------------------------------------
# Pointwise scoring


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _check_item(params, item: int) -> None:
    if not 1 <= item <= params.dims.n_items:
        raise IndexError(f"item id {item} outside [1, {params.dims.n_items}]")


def _check_user(params, user: int) -> None:
    if not 0 <= user < params.dims.n_users:
        raise IndexError(f"user id {user} outside [0, {params.dims.n_users})")


def score_mf(params: MfParams, user: int, item: int) -> float:
    _check_user(params, user)
    _check_item(params, item)
    return float(params.z[user] @ params.items.e[item] + params.items.b[item])


def score_mixture(U_i: np.ndarray, A_i: np.ndarray, e_j: np.ndarray, b_j: float) -> float:
    """``softmax(A_i e_j) . (U_i e_j) + b_j`` for one user and one item."""
    U_i, A_i, e_j = np.asarray(U_i), np.asarray(A_i), np.asarray(e_j)
    if U_i.ndim != 2 or U_i.shape != A_i.shape or e_j.shape != (U_i.shape[1],):
        raise ValueError(
            f"shape mismatch: U {U_i.shape}, A {A_i.shape}, e {e_j.shape}"
        )
    weights = softmax(A_i @ e_j)
    return float(weights @ (U_i @ e_j) + b_j)


def project_tastes(z_i: np.ndarray, heads: ProjectionHeads) -> tuple[np.ndarray, np.ndarray]:
    """Row ``m`` of U is ``z W_U[m] + B_U[m]``; likewise for A."""
    z_i = np.asarray(z_i)
    k = heads.W_U.shape[1]
    if z_i.shape != (k,):
        raise ValueError(f"z has shape {z_i.shape}, heads expect ({k},)")
    U = np.einsum("k,mkl->ml", z_i, heads.W_U) + heads.B_U
    A = np.einsum("k,mkl->ml", z_i, heads.W_A) + heads.B_A
    return U, A


def user_tastes(params, user: int) -> tuple[np.ndarray, np.ndarray]:
    """(U_i, A_i) for a mixture-model user."""
    _check_user(params, user)
    if isinstance(params, EmfParams):
        return params.U[user], params.A[user]
    if isinstance(params, PmfParams):
        return project_tastes(params.z[user], params.heads)
    raise TypeError(f"{type(params).__name__} has no taste mixture")


def score(params, user: int, item: int) -> float:
    """Pointwise score for any factorization variant."""
    if isinstance(params, MfParams):
        return score_mf(params, user, item)
    _check_item(params, item)
    U, A = user_tastes(params, user)
    return score_mixture(U, A, params.items.e[item], params.items.b[item])


# ---------------------------------------------------------------------------
# Batched representations
#
# A representation is either a (N, k) user vector array (single-vector
# models) or a pair of (N, m, k) arrays (U, A).  The same helpers serve the
# sequence models, whose contexts are LSTM hidden states.


def represent(params, users: np.ndarray):
    users = np.asarray(users, dtype=np.int64)
    if isinstance(params, MfParams):
        return params.z[users]
    if isinstance(params, EmfParams):
        return params.U[users], params.A[users]
    if isinstance(params, PmfParams):
        return project_batch(params.z[users], params.heads)
    raise TypeError(f"unsupported params {type(params).__name__}")


def _stack_heads(W: np.ndarray) -> np.ndarray:
    """(m, k, k) heads as one (k, m*k) matrix so projection is a single matmul."""
    m, k, _ = W.shape
    return W.transpose(1, 0, 2).reshape(k, m * k)


def project_batch(z: np.ndarray, heads: ProjectionHeads):
    n = len(z)
    m, k, _ = heads.W_U.shape
    U = (z @ _stack_heads(heads.W_U)).reshape(n, m, k) + heads.B_U
    A = (z @ _stack_heads(heads.W_A)).reshape(n, m, k) + heads.B_A
    return U, A


def project_batch_backward(z: np.ndarray, heads: ProjectionHeads, dU: np.ndarray, dA: np.ndarray):
    """Gradients of the projection w.r.t. its input and the four head arrays."""
    n = len(z)
    m, k, _ = heads.W_U.shape
    dU_flat = dU.reshape(n, m * k)
    dA_flat = dA.reshape(n, m * k)
    dz = dU_flat @ _stack_heads(heads.W_U).T + dA_flat @ _stack_heads(heads.W_A).T
    grads = {
        "W_U": (z.T @ dU_flat).reshape(k, m, k).transpose(1, 0, 2),
        "B_U": dU.sum(axis=0),
        "W_A": (z.T @ dA_flat).reshape(k, m, k).transpose(1, 0, 2),
        "B_A": dA.sum(axis=0),
    }
    return dz, grads


def score_candidates(rep, e: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scores of C candidate items per context: ``e`` (N, C, k), ``b`` (N, C)."""
    if isinstance(rep, tuple):
        U, A = rep
        logits = np.matmul(e, A.transpose(0, 2, 1))  # (N, C, m)
        tastes = np.matmul(e, U.transpose(0, 2, 1))
        return (softmax(logits) * tastes).sum(axis=-1) + b
    return np.matmul(e, rep[:, :, None])[:, :, 0] + b


def score_catalog(rep, items: ItemParams) -> np.ndarray:
    """(N, n_items) scores over every real item (padding column dropped)."""
    e, b = items.e[1:], items.b[1:]
    if isinstance(rep, tuple):
        U, A = rep
        logits = A @ e.T  # (N, m, C)
        tastes = U @ e.T
        return (softmax(logits, axis=1) * tastes).sum(axis=1) + b
    return rep @ e.T + b


def score_pairs_backward(rep, e: np.ndarray, g: np.ndarray):
    """Backward pass of one score per context.

    ``e`` is (N, k) and ``g`` the (N,) upstream gradient dL/dscore. Returns
    (d_rep, d_e) with d_rep shaped like ``rep``. The bias gradient is ``g``.
    """
    if isinstance(rep, tuple):
        U, A = rep
        weights = softmax(np.matmul(A, e[:, :, None])[:, :, 0])
        tastes = np.matmul(U, e[:, :, None])[:, :, 0]
        mixed = (weights * tastes).sum(axis=1, keepdims=True)
        d_tastes = g[:, None] * weights
        d_logits = g[:, None] * weights * (tastes - mixed)
        dU = d_tastes[:, :, None] * e[:, None, :]
        dA = d_logits[:, :, None] * e[:, None, :]
        de = np.matmul(d_tastes[:, None, :], U)[:, 0] + np.matmul(d_logits[:, None, :], A)[:, 0]
        return (dU, dA), de
    return g[:, None] * e, g[:, None] * rep


def score_all_items(params, user: int) -> np.ndarray:
    """Scores for items 1..n_items; element ``j - 1`` belongs to item ``j``."""
    _check_user(params, user)
    return score_catalog(represent(params, np.array([user])), params.items)[0]


def score_users(params, users: np.ndarray) -> np.ndarray:
    return score_catalog(represent(params, users), params.items)

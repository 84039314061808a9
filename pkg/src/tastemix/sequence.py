"""LSTM next-item models: last-hidden-state baseline and the mixture LSTM.

Gate blocks are stacked along the last axis in the order input, forget,
cell candidate, output: ``W_x`` and ``W_h`` are (k, 4k), ``bias`` is (4k,).
Hidden size equals the item embedding size ``k`` and the item table is used
both for inputs and for output scoring.

Padding (item 0) is handled by masking: at a padding step the state is
carried forward unchanged, so left padding leaves the zero initial state.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .factorization import (
    ItemParams,
    ModelDims,
    ProjectionHeads,
    _head_arrays,
    _item_arrays,
    _Params,
    init_heads,
    init_items,
    project_batch,
    score_mixture,
    project_tastes,
)

SEQUENCE_VARIANTS = ("lstm", "mlstm")


@dataclass
class LstmParams(_Params):
    dims: ModelDims
    W_x: np.ndarray  # (k, 4k)
    W_h: np.ndarray  # (k, 4k)
    bias: np.ndarray  # (4k,)
    items: ItemParams
    heads: ProjectionHeads | None = None

    @property
    def variant(self) -> str:
        return "lstm" if self.heads is None else "mlstm"

    def arrays(self):
        out = {"W_x": self.W_x, "W_h": self.W_h, "bias": self.bias, **_item_arrays(self.items)}
        if self.heads is not None:
            out.update(_head_arrays(self.heads))
        return out

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class HiddenStates:
    h: np.ndarray  # (T, k)
    c: np.ndarray  # (T, k)


def init_lstm(dims: ModelDims, variant: str, seed: int = 0) -> LstmParams:
    """Normal(0, 1/sqrt(k)) weights, zero biases except forget gate = 1."""
    if variant not in SEQUENCE_VARIANTS:
        raise ConfigError(f"unknown sequence variant {variant!r}")
    rng = np.random.default_rng(seed)
    k = dims.k
    scale = 1.0 / np.sqrt(k)
    items = init_items(rng, dims.n_items, k)
    W_x = rng.normal(0.0, scale, size=(k, 4 * k))
    W_h = rng.normal(0.0, scale, size=(k, 4 * k))
    bias = np.zeros(4 * k)
    bias[k:2 * k] = 1.0
    heads = init_heads(rng, dims.m, k) if variant == "mlstm" else None
    return LstmParams(dims, W_x, W_h, bias, items, heads)


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class ForwardCache:
    seqs: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool
    x: np.ndarray  # (B, T, k)
    gates: np.ndarray  # (B, T, 4k) post-activation
    c: np.ndarray  # (B, T, k)
    tanh_c: np.ndarray  # (B, T, k)
    h: np.ndarray  # (B, T, k)


def forward_batch(params: LstmParams, seqs: np.ndarray) -> ForwardCache:
    """Run the LSTM over a (B, T) batch of left-padded sequences."""
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.ndim != 2:
        raise ValueError("expected a (batch, time) array of item ids")
    n_items = params.items.e.shape[0] - 1
    if seqs.size and (seqs.min() < 0 or seqs.max() > n_items):
        raise IndexError(f"item id outside [0, {n_items}]")
    B, T = seqs.shape
    k = params.dims.k
    mask = seqs != 0
    x = params.items.e[seqs]
    x_proj = x @ params.W_x + params.bias
    gates = np.zeros((B, T, 4 * k))
    c_all = np.zeros((B, T, k))
    tc_all = np.zeros((B, T, k))
    h_all = np.zeros((B, T, k))
    h = np.zeros((B, k))
    c = np.zeros((B, k))
    for t in range(T):
        pre = x_proj[:, t] + h @ params.W_h
        act = np.empty_like(pre)
        act[:, :2 * k] = _sigmoid(pre[:, :2 * k])
        act[:, 2 * k:3 * k] = np.tanh(pre[:, 2 * k:3 * k])
        act[:, 3 * k:] = _sigmoid(pre[:, 3 * k:])
        i, f, g, o = act[:, :k], act[:, k:2 * k], act[:, 2 * k:3 * k], act[:, 3 * k:]
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t:t + 1]
        c = np.where(m, c_new, c)
        h = np.where(m, h_new, h)
        gates[:, t] = act
        c_all[:, t] = c
        tc_all[:, t] = np.tanh(c)
        h_all[:, t] = h
    return ForwardCache(seqs, mask, x, gates, c_all, tc_all, h_all)


def lstm_forward(params: LstmParams, sequence) -> HiddenStates:
    """Hidden and cell states for every position of one sequence."""
    cache = forward_batch(params, np.asarray(sequence, dtype=np.int64)[None, :])
    return HiddenStates(cache.h[0].copy(), cache.c[0].copy())


def backward_batch(params: LstmParams, cache: ForwardCache | None, dh: np.ndarray):
    """Backpropagation through time.

    ``dh`` (B, T, k) holds the loss gradient with respect to every hidden
    state as used downstream. Returns dense gradients for ``W_x``, ``W_h``,
    ``bias`` and the (B, T, k) gradient on the input embeddings; the caller
    scatters the latter into the item table.
    """
    if cache is None:
        raise ContractError("lstm backward needs the cache of a forward pass")
    B, T, k = cache.h.shape
    if dh.shape != (B, T, k):
        raise ValueError(f"dh has shape {dh.shape}, expected {(B, T, k)}")
    dW_x = np.zeros_like(params.W_x)
    dW_h = np.zeros_like(params.W_h)
    dbias = np.zeros_like(params.bias)
    dx = np.zeros_like(cache.x)
    dh_next = np.zeros((B, k))
    dc_next = np.zeros((B, k))
    zeros = np.zeros((B, k))
    for t in range(T - 1, -1, -1):
        m = cache.mask[:, t:t + 1]
        dh_t = dh[:, t] + dh_next
        act = cache.gates[:, t]
        i, f, g, o = act[:, :k], act[:, k:2 * k], act[:, 2 * k:3 * k], act[:, 3 * k:]
        tc = cache.tanh_c[:, t]
        c_prev = cache.c[:, t - 1] if t > 0 else zeros
        h_prev = cache.h[:, t - 1] if t > 0 else zeros
        dc = dc_next + dh_t * o * (1.0 - tc * tc)
        d_pre = np.empty((B, 4 * k))
        d_pre[:, :k] = dc * g * i * (1.0 - i)
        d_pre[:, k:2 * k] = dc * c_prev * f * (1.0 - f)
        d_pre[:, 2 * k:3 * k] = dc * i * (1.0 - g * g)
        d_pre[:, 3 * k:] = dh_t * tc * o * (1.0 - o)
        d_pre *= m
        dW_x += cache.x[:, t].T @ d_pre
        dW_h += h_prev.T @ d_pre
        dbias += d_pre.sum(axis=0)
        dx[:, t] = d_pre @ params.W_x.T
        dh_next = np.where(m, d_pre @ params.W_h.T, dh_t)
        dc_next = np.where(m, dc * f, dc_next)
    return {"W_x": dW_x, "W_h": dW_h, "bias": dbias}, dx


def lstm_backward(params: LstmParams, cache: ForwardCache | None, dh: np.ndarray):
    """Parameter gradients from upstream hidden-state gradients.

    Returns a dict of dense arrays keyed like :meth:`LstmParams.arrays`
    (``item_e`` holds the input-side embedding gradient only; ``item_b`` is
    zero). Padding positions contribute nothing.
    """
    grads, dx = backward_batch(params, cache, dh)
    d_e = np.zeros_like(params.items.e)
    np.add.at(d_e, cache.seqs.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    d_e[0] = 0.0
    grads["item_e"] = d_e
    grads["item_b"] = np.zeros_like(params.items.b)
    return grads


# ---------------------------------------------------------------------------
# Scoring


def _hidden_at(params: LstmParams, sequence, step: int) -> np.ndarray:
    sequence = np.asarray(sequence, dtype=np.int64)
    if not 0 <= step < len(sequence) or sequence[step] == 0:
        raise ContractError(f"step {step} does not index a real item")
    return lstm_forward(params, sequence).h[step]


def _check_item(params: LstmParams, item: int) -> None:
    if not 1 <= item <= params.dims.n_items:
        raise IndexError(f"item id {item} outside [1, {params.dims.n_items}]")


def score_next_baseline(params: LstmParams, sequence, step: int, item: int) -> float:
    """Score of ``item`` as the successor of position ``step``."""
    _check_item(params, item)
    h = _hidden_at(params, sequence, step)
    return float(h @ params.items.e[item] + params.items.b[item])


def score_next_mixture(params: LstmParams, sequence, step: int, item: int) -> float:
    if params.heads is None:
        raise ContractError("mixture scoring needs projection heads")
    _check_item(params, item)
    h = _hidden_at(params, sequence, step)
    U, A = project_tastes(h, params.heads)
    return score_mixture(U, A, params.items.e[item], params.items.b[item])


def score_next(params: LstmParams, sequence, step: int, item: int) -> float:
    if params.heads is None:
        return score_next_baseline(params, sequence, step, item)
    return score_next_mixture(params, sequence, step, item)


def represent_hidden(params: LstmParams, h: np.ndarray):
    """Turn (N, k) hidden states into the model's user representation."""
    if params.heads is None:
        return h
    return project_batch(h, params.heads)

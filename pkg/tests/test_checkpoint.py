import numpy as np
import pytest

from tastemix.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from tastemix.factorization import ModelDims, init_params, score_users
from tastemix.sequence import forward_batch, init_lstm


def make(variant, seed=0):
    dims = ModelDims(3, 2, 5, 7)
    if variant in ("lstm", "mlstm"):
        return init_lstm(dims, variant, seed=seed)
    return init_params(dims, variant, seed=seed)


@pytest.mark.parametrize("variant", ["mf", "emf", "pmf", "lstm", "mlstm"])
def test_roundtrip_bit_exact(variant, tmp_path):
    p = make(variant, seed=4)
    save_checkpoint(p, tmp_path / "c.bin")
    q = load_checkpoint(tmp_path / "c.bin")
    assert q.variant == variant and q.dims == p.dims
    for name, arr in p.arrays().items():
        assert arr.tobytes() == q.arrays()[name].tobytes()


def test_loaded_model_scores_identically():
    p = make("pmf", seed=2)
    q = loads(dumps(p))
    assert np.array_equal(score_users(p, np.arange(5)), score_users(q, np.arange(5)))
    r = make("mlstm", seed=2)
    s = loads(dumps(r))
    seqs = np.array([[0, 1, 2], [3, 4, 5]])
    assert np.array_equal(forward_batch(r, seqs).h, forward_batch(s, seqs).h)


def test_bytes_deterministic():
    assert dumps(make("emf", 1)) == dumps(make("emf", 1))
    assert dumps(make("emf", 1)) != dumps(make("emf", 2))


def test_loaded_arrays_writable():
    q = loads(dumps(make("mf")))
    q.z[0, 0] = 1.0


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
def test_corruption(damage):
    blob = dumps(make("mf"))
    if damage == "magic":
        blob = b"X" + blob[1:]
    elif damage == "truncate":
        blob = blob[:-8]
    elif damage == "trailing":
        blob = blob + b"\0"
    else:
        blob = blob[:8] + (2).to_bytes(4, "little") + blob[12:]
    with pytest.raises(CheckpointError):
        loads(blob)

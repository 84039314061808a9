import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tastemix.errors import ConfigError
from tastemix.factorization import (
    EmfParams,
    ItemParams,
    MfParams,
    ModelDims,
    PmfParams,
    ProjectionHeads,
    init_params,
    project_tastes,
    score,
    score_all_items,
    score_mf,
    score_mixture,
    score_users,
    softmax,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def small_params(variant, k=3, m=2, n_users=4, n_items=6, seed=0):
    return init_params(ModelDims(k, m, n_users, n_items), variant, seed=seed)


class TestInit:
    @pytest.mark.parametrize("variant", ["mf", "emf", "pmf"])
    def test_same_seed_same_params(self, variant):
        a, b = small_params(variant, seed=3), small_params(variant, seed=3)
        for name, arr in a.arrays().items():
            assert np.array_equal(arr, b.arrays()[name])

    @pytest.mark.parametrize("variant", ["mf", "emf", "pmf"])
    def test_bias_zero_and_padding_row(self, variant):
        p = small_params(variant)
        assert not p.items.b.any()
        assert not p.items.e[0].any()

    def test_item_moments(self):
        k, n = 32, 1000
        e = init_params(ModelDims(k, 1, 1, n), "mf", seed=11).items.e[1:].ravel()
        sd = 1 / np.sqrt(k)
        count = e.size
        # sample mean has sd sd/sqrt(N); sample sd has sd about sd/sqrt(2N)
        assert abs(e.mean()) < 3 * sd / np.sqrt(count)
        assert abs(e.std() - sd) < 3 * sd / np.sqrt(2 * count)

    def test_bad_dims(self):
        with pytest.raises(ConfigError):
            ModelDims(0, 1, 1, 1)
        with pytest.raises(ConfigError):
            init_params(ModelDims(2, 1, 1, 1), "svd")


def mf_from(z, e, b):
    z = np.atleast_2d(np.asarray(z, float))
    e = np.vstack([np.zeros(z.shape[1]), np.atleast_2d(e)])
    b = np.concatenate([[0.0], np.atleast_1d(b)])
    return MfParams(ModelDims(z.shape[1], 1, len(z), len(e) - 1), z, ItemParams(e, b))


class TestScoreMf:
    def test_hand_value(self):
        assert score_mf(mf_from([1, 2], [3, 4], 0.5), 0, 1) == pytest.approx(11.5, abs=1e-12)

    def test_zero_user(self):
        assert score_mf(mf_from([0, 0], [3, 4], 0.7), 0, 1) == 0.7

    def test_rotation_invariance(self):
        rng = np.random.default_rng(0)
        z, e = rng.normal(size=(1, 5)), rng.normal(size=(1, 5))
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        a = score_mf(mf_from(z, e, 0.3), 0, 1)
        b = score_mf(mf_from(z @ q, e @ q, 0.3), 0, 1)
        assert a == pytest.approx(b, abs=1e-12)

    def test_item_zero_rejected(self):
        with pytest.raises(IndexError):
            score_mf(mf_from([1, 2], [3, 4], 0.5), 0, 0)


class TestScoreMixture:
    def test_hand_softmax_case(self):
        U = np.eye(2)
        A = np.array([[10.0, 0.0], [0.0, 10.0]])
        w = np.exp(10) / (np.exp(10) + 1)
        assert score_mixture(U, A, np.array([1.0, 0.0]), 0.0) == pytest.approx(w, abs=1e-12)
        assert w == pytest.approx(0.99995, abs=1e-5)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (1, 3), elements=finite), arrays(float, (1, 3), elements=finite),
           arrays(float, 3, elements=finite), finite)
    def test_single_component_collapse(self, U, A, e, b):
        assert score_mixture(U, A, e, b) == pytest.approx(U[0] @ e + b, abs=1e-9)

    def test_zero_item(self):
        rng = np.random.default_rng(1)
        assert score_mixture(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.zeros(4), 1.25) == 1.25

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (3, 4), elements=finite), arrays(float, (3, 4), elements=finite),
           arrays(float, 4, elements=finite), finite, finite)
    def test_linear_in_bias(self, U, A, e, b, c):
        assert score_mixture(U, A, e, b + c) == pytest.approx(score_mixture(U, A, e, b) + c, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (4, 6), elements=st.floats(-300, 300)))
    def test_softmax_simplex(self, x):
        w = softmax(x)
        assert (w >= 0).all()
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            score_mixture(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(3), 0.0)

    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(2)
        U, A, e = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=3)
        copies = U.copy(), A.copy(), e.copy()
        score_mixture(U, A, e, 0.0)
        for x, y in zip((U, A, e), copies):
            assert np.array_equal(x, y)


class TestProjection:
    def test_identity(self):
        z = np.array([0.3, -1.0, 2.0])
        U, A = project_tastes(z, ProjectionHeads.identity(4, 3))
        assert np.array_equal(U, np.tile(z, (4, 1))) and np.array_equal(A, U)

    def test_bias_passthrough(self):
        rng = np.random.default_rng(0)
        heads = ProjectionHeads(rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3)),
                                rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3)))
        U, A = project_tastes(np.zeros(3), heads)
        assert np.array_equal(U, heads.B_U) and np.array_equal(A, heads.B_A)

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(5)
        m, k = 3, 3
        heads = ProjectionHeads(rng.normal(size=(m, k, k)), rng.normal(size=(m, k)),
                                rng.normal(size=(m, k, k)), rng.normal(size=(m, k)))
        z = rng.normal(size=k)
        U, A = project_tastes(z, heads)
        for c in range(m):
            for col in range(k):
                u = heads.B_U[c, col]
                a = heads.B_A[c, col]
                for row in range(k):
                    u += z[row] * heads.W_U[c, row, col]
                    a += z[row] * heads.W_A[c, row, col]
                assert U[c, col] == pytest.approx(u, abs=1e-12)
                assert A[c, col] == pytest.approx(a, abs=1e-12)


class TestScoreAllItems:
    @pytest.mark.parametrize("variant", ["mf", "emf", "pmf"])
    def test_matches_pointwise(self, variant):
        p = small_params(variant, seed=4)
        p.items.b[1:] = np.random.default_rng(0).normal(size=p.dims.n_items)
        for user in range(p.dims.n_users):
            vec = score_all_items(p, user)
            assert vec.shape == (p.dims.n_items,)
            pointwise = [score(p, user, j) for j in range(1, p.dims.n_items + 1)]
            assert np.allclose(vec, pointwise, rtol=0, atol=1e-12)

    def test_batch_matches_single(self):
        p = small_params("pmf", seed=6)
        batch = score_users(p, np.arange(4))
        for u in range(4):
            assert np.allclose(batch[u], score_all_items(p, u), atol=1e-12)

    def test_emf_single_taste_equals_mf(self):
        rng = np.random.default_rng(7)
        emf = small_params("emf", m=1, seed=7)
        emf.A[...] = rng.normal(scale=10, size=emf.A.shape)
        emf.items.b[1:] = rng.normal(size=emf.dims.n_items)
        mf = MfParams(ModelDims(3, 1, 4, 6), emf.U[:, 0].copy(), emf.items)
        for u in range(4):
            assert np.allclose(score_all_items(emf, u), score_all_items(mf, u), atol=1e-12)

    def test_pmf_identity_heads_degenerate_to_mf(self):
        pmf = small_params("pmf", m=3, seed=8)
        pmf.heads = ProjectionHeads.identity(3, 3)
        mf = MfParams(pmf.dims, pmf.z, pmf.items)
        assert np.allclose(score_users(pmf, np.arange(4)), score_users(mf, np.arange(4)), atol=1e-12)

    def test_not_mutating_params(self):
        p = small_params("emf", seed=9)
        before = {n: a.copy() for n, a in p.arrays().items()}
        score_users(p, np.arange(4))
        for n, a in p.arrays().items():
            assert np.array_equal(a, before[n])

    def test_bad_user(self):
        with pytest.raises(IndexError):
            score_all_items(small_params("mf"), 4)

    def test_variant_classes(self):
        assert isinstance(small_params("emf"), EmfParams)
        assert isinstance(small_params("pmf"), PmfParams)

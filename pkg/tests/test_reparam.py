import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parspace import optim, reparam
from parspace import tensor as T
from parspace.reparam import Matricization, Mode, SvdReparam

from conftest import numgrad, rel_err


def rand_rp(d, k, seed=0, mode=Mode.COEFFICIENTS):
    return reparam.decompose(np.random.default_rng(seed).standard_normal((d, k)), mode)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestDecompose:
    def test_identity(self):
        rp = reparam.decompose(np.eye(2))
        np.testing.assert_allclose(rp.p.data, [1, 1], atol=1e-15)
        np.testing.assert_allclose(rp.weight().data, np.eye(2), atol=1e-15)

    def test_scaled_rank_one(self):
        u = np.array([0.6, 0.8, 0.0])
        v = np.array([0.0, 1.0, 0.0, 0.0])
        rp = reparam.decompose(5 * np.outer(u, v))
        np.testing.assert_allclose(rp.p.data, [5, 0, 0], atol=1e-14)

    def test_conv_weight(self):
        w = np.random.default_rng(1).standard_normal((8, 4, 3, 3))
        rp = reparam.decompose(w)
        assert (rp.d, rp.k) == (8, 36) and rp.p.shape == (8,)
        assert rel_fro(rp.weight().data, w) < 1e-10

    def test_tall_is_transposed(self):
        w = np.random.default_rng(2).standard_normal((12, 5))
        rp = reparam.decompose(w)
        assert rp.matricization.transposed and (rp.d, rp.k) == (5, 12)
        assert rel_fro(rp.weight().data, w) < 1e-10

    def test_nan_propagates(self):
        from parspace.linalg import NumericInputError
        with pytest.raises(NumericInputError):
            reparam.decompose(np.array([[np.nan, 1.0]]))


class TestMatricization:
    @pytest.mark.parametrize("shape", [(8, 4, 3, 3), (32, 32, 1, 1), (16, 32, 3, 3), (5, 3), (3, 5)])
    def test_round_trip(self, shape):
        w = np.random.default_rng(0).standard_normal(shape)
        m = Matricization.for_shape(shape)
        mat = m.to_matrix(w)
        assert mat.shape == m.matrix_shape and mat.shape[0] <= mat.shape[1]
        np.testing.assert_array_equal(m.from_matrix(mat), w)


class TestForward:
    def test_untouched(self):
        w = np.random.default_rng(3).standard_normal((6, 9))
        assert rel_fro(reparam.forward(reparam.decompose(w)).data, w) < 1e-10

    def test_zero_coefficients(self):
        rp = rand_rp(4, 7)
        rp.p.data = np.zeros(4)
        np.testing.assert_array_equal(reparam.forward(rp).data, np.zeros((4, 7)))

    def test_doubling_is_exact(self):
        rp = rand_rp(4, 7)
        w = reparam.forward(rp).data
        rp.p.data = 2 * rp.p.data
        np.testing.assert_array_equal(reparam.forward(rp).data, 2 * w)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(-5, 5, allow_nan=False), st.integers(0, 1000))
    def test_linearity(self, alpha, seed):
        rp = rand_rp(3, 5, seed)
        w = reparam.forward(rp).data
        rp.p.data = alpha * rp.p.data
        np.testing.assert_allclose(reparam.forward(rp).data, alpha * w, atol=1e-12)

    @pytest.mark.parametrize("shape", [(2, 3), (8, 8), (8, 36)])
    def test_rank1_sum_equivalence(self, shape):
        rng = np.random.default_rng(shape[1])
        for _ in range(20):
            rp = rand_rp(*shape, seed=int(rng.integers(1 << 30)))
            rp.p.data = rng.standard_normal(rp.d)  # arbitrary coefficients, not just sigma
            assert np.max(np.abs(rp.rank1_sum() - rp.matrix().data)) < 1e-12


class TestCoefficientGradient:
    def test_identity_bases(self):
        rp = SvdReparam(np.eye(3), np.ones(3), np.eye(3), Mode.COEFFICIENTS, Matricization((3, 3), False))
        np.testing.assert_array_equal(reparam.grad_coefficients(np.ones((3, 3)), rp), np.ones(3))

    def test_scalar(self):
        w = -1.7
        rp = reparam.decompose(np.array([[w]]))
        # L = w^2, dL/dW = 2w; dL/dp = u * 2w * v = 2|w| with p = |w|
        g = reparam.grad_coefficients(np.array([[2 * w]]), rp)
        assert abs(g[0] - 2 * rp.p.data[0]) < 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            reparam.grad_coefficients(np.ones((4, 3)), rand_rp(3, 4))

    def test_finite_differences(self):
        rp = rand_rp(3, 4, 5)
        target = np.random.default_rng(6).standard_normal((3, 4))
        G = 2 * (rp.matrix().data - target)
        analytic = reparam.grad_coefficients(G, rp)
        p = rp.p.data.copy()
        num = numgrad(lambda: np.sum(((rp.U.data * p) @ rp.V.data.T - target) ** 2), p)
        assert rel_err(analytic, num) < 1e-6


class TestBasesGradient:
    def test_zero_coefficients(self):
        rp = rand_rp(3, 4)
        rp.p.data = np.zeros(3)
        dU, dV = reparam.grad_bases(np.ones((3, 4)), rp)
        assert not dU.any() and not dV.any()

    def test_scalar(self):
        rp = SvdReparam(np.array([[1.0]]), np.array([2.5]), np.array([[-1.0]]), Mode.BASES,
                        Matricization((1, 1), False))
        dU, dV = reparam.grad_bases(np.array([[3.0]]), rp)
        assert dU[0, 0] == 3.0 * -1.0 * 2.5
        assert dV[0, 0] == 3.0 * 1.0 * 2.5

    def test_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            reparam.grad_bases(np.ones((3,)), rand_rp(3, 4))

    def test_finite_differences(self):
        rp = rand_rp(3, 4, 7)
        target = np.random.default_rng(8).standard_normal((3, 4))
        G = 2 * (rp.matrix().data - target)
        dU, dV = reparam.grad_bases(G, rp)
        U, V = rp.U.data.copy(), rp.V.data.copy()
        loss = lambda: np.sum(((U * rp.p.data) @ V.T - target) ** 2)  # noqa: E731
        assert rel_err(dU, numgrad(loss, U)) < 1e-6
        assert rel_err(dV, numgrad(loss, V)) < 1e-6


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("shape", [(3, 4), (8, 36), (4, 2, 3, 3)])
def test_tape_gradient_through_weight(mode, shape):
    """Scalar loss of the reconstructed weight, gradient for each trainable factor."""
    rng = np.random.default_rng(len(shape) * 10 + shape[0])
    w = rng.standard_normal(shape)
    rp = reparam.decompose(w, mode)
    probe = rng.standard_normal(w.shape)
    T.backward(T.tsum(T.tanh(rp.weight()) * probe))
    for name, t in rp.trainable_factors().items():
        x = t.data.copy()
        saved = t.data

        def f():
            t.data = x
            with T.no_grad():
                return float(np.sum(np.tanh(rp.weight().data) * probe))

        num = numgrad(f, x)
        t.data = saved
        assert rel_err(t.grad, num) < 1e-5, name


class TestTrainableCount:
    def test_dense_coefficients(self):
        assert reparam.trainable_count(rand_rp(8, 36)) == 8

    def test_dense_bases(self):
        assert reparam.trainable_count(rand_rp(8, 36, mode=Mode.BASES)) == 64 + 288

    def test_dense_both(self):
        assert reparam.trainable_count(rand_rp(8, 36, mode=Mode.BOTH)) == 64 + 8 + 288

    @pytest.mark.parametrize("mode", list(Mode))
    def test_matches_flag_walk(self, mode):
        rp = rand_rp(5, 7, mode=mode)
        assert reparam.trainable_count(rp) == sum(t.size for t in rp.factors().values() if t.requires_grad)


@pytest.mark.parametrize("T_steps", [1, 7, 40])
def test_coefficient_mode_keeps_bases_bitwise(T_steps):
    rp = rand_rp(6, 10, 9)
    U0, V0 = rp.U.data.tobytes(), rp.V.data.tobytes()
    p0 = rp.p.data.copy()
    target = np.random.default_rng(10).standard_normal((6, 10))
    state = optim.AdamState(lr=1e-2, weight_decay=5e-4)
    params = {"U": rp.U, "p": rp.p, "V": rp.V}
    for _ in range(T_steps):
        optim.zero_grad(params)
        T.backward(T.tsum((rp.matrix() - target) ** 2))
        optim.adam_step(state, params, {n: t.grad for n, t in params.items()})
    assert rp.U.data.tobytes() == U0 and rp.V.data.tobytes() == V0
    assert not np.array_equal(rp.p.data, p0)


def test_set_mode_flags():
    rp = rand_rp(3, 4)
    rp.set_mode("bases")
    assert not rp.p.requires_grad and rp.U.requires_grad and rp.V.requires_grad
    rp.set_mode(Mode.BOTH)
    assert rp.p.requires_grad and rp.U.requires_grad


def test_mode_parse():
    assert Mode.parse("CoefficientsOnly") is Mode.COEFFICIENTS
    assert Mode.parse("bases_only") is Mode.BASES
    with pytest.raises(ValueError):
        Mode.parse("sigma")


def test_coefficients_unconstrained():
    """Training may push p negative and out of order; nothing projects it back."""
    rp = rand_rp(3, 5, seed=8)
    params = {"p": rp.p}
    state = optim.AdamState(lr=0.5)
    for _ in range(40):
        optim.adam_step(state, params, {"p": np.array([1.0, 0.0, -1.0])})
    assert rp.p.data[0] < 0 and rp.p.data[2] > rp.p.data[1]
    assert np.all(np.isfinite(rp.weight().data))

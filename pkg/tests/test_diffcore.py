import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from outfitrec import diffcore as dc
from outfitrec.diffcore import Tensor
from outfitrec.errors import ConfigError, DimensionError, NumericDegeneracyError, TrainingDivergenceError

import fd

DIFFCORE_CASES = [n for n in fd.CASES if "." not in n and not n.endswith("_loss") and n not in ("sab", "encode_batch")]


@pytest.mark.parametrize("name", DIFFCORE_CASES)
def test_gradients_match_finite_differences(name):
    errs = [fd.run_case(name, seed) for seed in range(fd.INSTANCES)]
    assert max(errs) < fd.TOL


def test_matmul_identity_and_zero():
    a = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(dc.matmul(np.eye(3), a).data, a)
    assert not dc.matmul(a, np.zeros((4, 2))).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(dc.softmax_rows(np.zeros((1, 3))).data, [[1 / 3] * 3])
    out = dc.softmax_rows(np.array([[1e3, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(ConfigError):
        dc.softmax_rows(np.zeros((1, 2)), tau)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)),
       st.floats(0.05, 10))
def test_softmax_rows_are_distributions(x, tau):
    y = dc.softmax_rows(x, tau).data
    assert np.all(np.isfinite(y))
    assert np.all(y >= 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_is_monotone():
    x = np.array([[0.1, 0.5, -0.3]])
    y0 = dc.softmax_rows(x).data[0, 1]
    x[0, 1] += 0.2
    assert dc.softmax_rows(x).data[0, 1] > y0


def test_layer_norm_examples():
    b = np.array([0.3, -0.2, 0.5])
    out = dc.layer_norm(np.full((1, 3), 7.0), np.ones(3), b).data
    np.testing.assert_allclose(out, b[None], atol=1e-12)
    out = dc.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-4)


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert dc.cosine(v, v).data == pytest.approx(1.0)
    assert dc.cosine(v, -v).data == pytest.approx(-1.0)


def test_cosine_zero_norm_raises():
    with pytest.raises(NumericDegeneracyError):
        dc.cosine(np.zeros(3), np.ones(3))


def test_relu_and_concat():
    np.testing.assert_array_equal(dc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    dc.sum(dc.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    blocks = [np.ones((5, 2)) * h for h in range(4)]
    assert dc.concat_columns(blocks).shape == (5, 8)


def test_no_overflow_on_large_inputs():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1e3, 1e3, (4, 6))
    for out in (dc.softmax_rows(x), dc.log_softmax(x), dc.softplus(x), dc.normalize_rows(x),
                dc.layer_norm(x, np.ones(6), np.zeros(6))):
        assert np.all(np.isfinite(out.data))


def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y
    dc.sum(z).backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with dc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_deterministic_outputs():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert np.array_equal(dc.matmul(a, b).data, dc.matmul(a, b).data)


class TestSgd:
    def test_momentum_zero_is_plain_step(self):
        p, v = dc.sgd_momentum_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, None, 0.1, 0.0)
        np.testing.assert_allclose(p["w"], [0.95, 2.1])

    def test_zero_lr_keeps_params(self):
        w = np.array([1.0, 2.0])
        p, _ = dc.sgd_momentum_step({"w": w}, {"w": np.array([3.0, 4.0])}, None, 0.0, 0.9)
        assert np.array_equal(p["w"], w)

    def test_quadratic_bowl(self):
        # heavy-ball at momentum 0.9 contracts by sqrt(0.9) per step while
        # oscillating, so the start is small and monotonicity is checked on
        # the envelope of local peaks
        opt = dc.SGD(0.1, 0.9)
        params = {"w": np.array([0.06, -0.05, 0.03])}
        norms = []
        for _ in range(100):
            params = opt.step(params, {"w": 2 * params["w"]})
            norms.append(np.linalg.norm(params["w"]))
        assert norms[-1] < 1e-3
        n = np.array(norms)
        peaks = [n[i] for i in range(10, len(n) - 1) if n[i] >= n[i - 1] and n[i] >= n[i + 1]]
        assert len(peaks) > 5 and np.all(np.diff(peaks) < 0)

    def test_non_finite_gradient(self):
        with pytest.raises(TrainingDivergenceError):
            dc.sgd_momentum_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0])}, None, 0.1, 0.9)

    def test_overflowing_step(self):
        with pytest.raises(TrainingDivergenceError):
            dc.sgd_momentum_step({"w": np.ones(2, np.float32)}, {"w": np.ones(2, np.float32)}, None, 1e39, 0.0)

    @pytest.mark.parametrize("lr,mom", [(-0.1, 0.5), (0.1, 1.0), (0.1, -0.1)])
    def test_bad_hyperparameters(self, lr, mom):
        with pytest.raises(ConfigError):
            dc.sgd_momentum_step({"w": np.ones(2)}, {"w": np.ones(2)}, None, lr, mom)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dc.sgd_momentum_step({"w": np.ones(2)}, {"w": np.ones(3)}, None, 0.1, 0.9)

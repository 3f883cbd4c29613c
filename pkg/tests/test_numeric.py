import math

import numpy as np
import pytest

from crossdistill import numeric as nc
from crossdistill.errors import DomainError, ShapeError


def loop_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, k, m = rng.integers(1, 7, size=3)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        np.testing.assert_allclose(nc.matmul(a, b), loop_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nc.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_matmul_hand_value():
    out = nc.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0], [6.0]])
    assert out.tolist() == [[17.0], [39.0]]


def test_affine_shape_checks():
    with pytest.raises(ShapeError):
        nc.affine_forward(np.ones((2, 3)), np.ones((3, 2)), np.ones(3))
    with pytest.raises(ShapeError):
        nc.affine_backward(np.ones((2, 3)), np.ones((3, 2)), np.ones((2, 3)))


def test_affine_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, a, b = rng.integers(1, 5, size=3)
        x = rng.normal(size=(n, a))
        w = rng.normal(size=(a, b))
        bias = rng.normal(size=b)
        up = rng.normal(size=(n, b))
        gx, gw, gb = nc.affine_backward(x, w, up)
        assert rel_err(gx, central_diff(lambda v: np.sum(up * nc.affine_forward(v, w, bias)), x)) < 1e-4
        assert rel_err(gw, central_diff(lambda v: np.sum(up * nc.affine_forward(x, v, bias)), w)) < 1e-4
        assert rel_err(gb, central_diff(lambda v: np.sum(up * nc.affine_forward(x, w, v)), bias)) < 1e-4


def test_relu_backward_is_zero_at_kink():
    assert nc.relu_backward(np.array([-1.0, 0.0, 2.0]), np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_relu_backward_matches_finite_differences_away_from_kink():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.normal(size=6)
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        up = rng.normal(size=6)
        num = central_diff(lambda v: np.sum(up * nc.relu(v)), x)
        assert rel_err(nc.relu_backward(x, up), num) < 1e-4


def test_sigmoid_values_and_stability():
    assert nc.sigmoid(0.0) == 0.5
    assert isinstance(nc.sigmoid(0.0), float)
    assert nc.sigmoid(800.0) == 1.0
    assert nc.sigmoid(-800.0) == 0.0
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        nc.sigmoid(np.array([-1e4, 1e4]))
    assert math.isclose(nc.sigmoid(2.0), 1 / (1 + math.exp(-2.0)), rel_tol=1e-15)


def test_softplus_is_stable():
    assert nc.softplus(1000.0) == 1000.0
    assert nc.softplus(-1000.0) == 0.0
    assert math.isclose(nc.softplus(0.0), math.log(2.0), rel_tol=1e-15)


def test_bce_hand_values():
    loss, grad = nc.bce_with_logits(0.0, 1.0)
    assert math.isclose(loss, math.log(2.0), rel_tol=1e-15)
    assert grad == -0.5
    loss, grad = nc.bce_with_logits(0.0, 0.5)
    assert math.isclose(loss, math.log(2.0), rel_tol=1e-15)
    assert grad == 0.0


def test_bce_is_finite_for_large_logits():
    loss, grad = nc.bce_with_logits(np.array([1000.0, -1000.0]), np.array([0.0, 1.0]))
    assert loss.tolist() == [1000.0, 1000.0]
    assert grad.tolist() == [1.0, -1.0]


@pytest.mark.parametrize("target", [1.5, -0.1, float("nan")])
def test_bce_rejects_targets_outside_unit_interval(target):
    with pytest.raises(DomainError):
        nc.bce_with_logits(0.3, target)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = rng.normal(scale=3.0, size=5)
        t = rng.uniform(size=5)
        _, g = nc.bce_with_logits(z, t)
        assert rel_err(g, central_diff(lambda v: np.sum(nc.bce_with_logits(v, t)[0]), z)) < 1e-4
        y = rng.normal(size=5)
        _, g = nc.mse(z, y)
        assert rel_err(g, central_diff(lambda v: np.sum(nc.mse(v, y)[0]), z)) < 1e-4


def test_mse_hand_value():
    assert nc.mse(3.0, 1.0) == (4.0, 4.0)


def test_adam_first_step_moves_by_lr_times_sign():
    # Bias correction makes the first step exactly lr * g / (|g| + eps).
    params = np.array([1.0, 1.0, 1.0])
    grads = np.array([0.5, -2.0, 0.0])
    new, state = nc.adam_step(params, grads, nc.AdamState.zeros(3), lr=0.1)
    np.testing.assert_allclose(new, [0.9, 1.1, 1.0], rtol=1e-7)
    assert state.step == 1


def test_adam_is_pure():
    params = np.ones(2)
    state = nc.AdamState.zeros(2)
    nc.adam_step(params, np.ones(2), state)
    assert params.tolist() == [1.0, 1.0]
    assert state.step == 0 and not state.first_moment.any()


def test_adam_validates_hyperparameters_and_shapes():
    with pytest.raises(DomainError):
        nc.adam_step(np.ones(2), np.ones(2), nc.AdamState.zeros(2), lr=0.0)
    with pytest.raises(DomainError):
        nc.adam_step(np.ones(2), np.ones(2), nc.AdamState.zeros(2), beta1=1.0)
    with pytest.raises(ShapeError):
        nc.adam_step(np.ones(2), np.ones(3), nc.AdamState.zeros(2))


def test_adam_converges_on_quadratic():
    p = np.array([5.0, -3.0])
    state = nc.AdamState.zeros(2)
    for _ in range(3000):
        p, state = nc.adam_step(p, 2 * p, state, lr=0.05)
    assert np.all(np.abs(p) < 1e-3)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ghnn import numerics as nx
from ghnn.numerics import Parameter, Tensor, backward, precision
from helpers import finite_difference_check

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- core ops ---------------------------------------------------------------

def test_concat_and_sigmoid_basics():
    assert nx.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1, 2, 3]
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                ref[i, j] += a[i, k] * b[k, j]
    with precision(np.float64):
        out = nx.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_dot():
    w = Parameter([1.0, 2.0], "w", np.float64)
    backward(nx.dot(w, w))
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_and_rejects_nonscalar():
    w = Parameter([1.0, 2.0], "w", np.float64)
    backward(nx.dot(w, w))
    backward(nx.dot(w, w))
    assert w.grad.tolist() == [4.0, 8.0]
    with pytest.raises(ValueError):
        backward(w * 2.0)


def test_backward_detects_cycle():
    w = Parameter([1.0], "w", np.float64)
    y = w * 2.0
    z = y * 3.0
    y._parents = (z,)   # corrupt the tape on purpose
    with pytest.raises(RuntimeError):
        backward(nx.tsum(z))


def test_no_grad_records_nothing():
    w = Parameter([1.0], "w", np.float64)
    with nx.no_grad():
        y = w * 2.0
    assert not y.requires_grad


OPS = {
    "add": lambda a, b: nx.add(a, b),
    "sub": lambda a, b: nx.sub(a, b),
    "mul": lambda a, b: nx.mul(a, b),
    "div": lambda a, b: nx.div(a, nx.exp(b)),
    "matmul": lambda a, b: nx.matmul(a, b.T),
    "broadcast_row": lambda a, b: a * b[0],
    "broadcast_scalar": lambda a, b: a * 3.0 + b,
    "exp": lambda a, b: nx.exp(a),
    "log": lambda a, b: nx.log(nx.exp(a) + 1.0),
    "tanh": lambda a, b: nx.tanh(a) * b,
    "sigmoid": lambda a, b: nx.sigmoid(a) * b,
    "softplus": lambda a, b: nx.scaled_softplus(a, 0.7) * b,
    "log_softplus": lambda a, b: nx.log_scaled_softplus(a * 3.0, 0.5) * b,
    "log_softmax": lambda a, b: nx.log_softmax(a) * b,
    "concat": lambda a, b: nx.concat([a, b], axis=-1) * nx.concat([b, a], axis=-1),
    "getitem": lambda a, b: a[:, 1:] * b[:, :2] + a[np.array([0, 0, 2]), np.array([1, 1, 0])].sum(),
    "take_rows": lambda a, b: nx.take_rows(a, np.array([2, 0, 2])) * b,
    "segment_mean": lambda a, b: nx.segment_mean(a, np.array([0, 1, 2, 1]), np.array([0, 0, 1, 2]), 3) * b,
    "cumsum": lambda a, b: nx.cumsum(a, axis=-1) * b + nx.cumsum(b, axis=0),
    "mean_rows": lambda a, b: nx.mean_rows(a) * b,
    "tmean": lambda a, b: nx.tmean(a * b, axis=0),
    "reshape": lambda a, b: nx.reshape(a, (9,)) * nx.reshape(b, (9,)),
    "transpose": lambda a, b: nx.transpose(a) * b,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    with precision(np.float64):
        a = Parameter(rng.standard_normal((3, 3)), "a", np.float64)
        b = Parameter(rng.standard_normal((3, 3)), "b", np.float64)
        weights = rng.standard_normal(64)

        def loss():
            out = OPS[name](a, b)
            flat = nx.reshape(out, (-1,))
            return nx.tsum(flat * weights[: flat.shape[0]])

        report = finite_difference_check([a, b], loss, eps=1e-5, rtol=1e-6, atol=1e-8)
    assert max(report.values()) <= 1.0, report


# --- scaled softplus ---------------------------------------------------------

def test_softplus_examples():
    with precision(np.float64):
        assert nx.scaled_softplus(Tensor(0.0), 1.0).item() == pytest.approx(math.log(2), abs=1e-12)
        big = nx.scaled_softplus(Tensor(50.0), 1.0).item()
        assert np.isfinite(big) and big == pytest.approx(50.0, abs=1e-12)
        assert np.isfinite(nx.scaled_softplus(Tensor(1e6), 1.0).item())
    with pytest.raises(ValueError):
        nx.scaled_softplus(Tensor(1.0), 0.0)


def test_softplus_relu_bound():
    x = np.linspace(-5, 5, 2001)
    with precision(np.float64):
        f = nx.scaled_softplus(Tensor(x), 0.01).data
    assert np.all(np.abs(f - np.maximum(0, x)) <= 0.01 * math.log(2) + 1e-15)


def test_softplus_of_linear_gradient(rng):
    with precision(np.float64):
        w = Parameter(rng.standard_normal(4), "w", np.float64)
        x = rng.standard_normal((6, 4)) * 3

        def loss():
            return nx.tsum(nx.scaled_softplus(nx.matmul(Tensor(x), w), 1.3))

        report = finite_difference_check([w], loss, rtol=1e-6, atol=1e-8)
    assert max(report.values()) <= 1.0


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(0.01, 5))
def test_softplus_positive_and_monotone(x, s):
    x = np.sort(x)
    with precision(np.float64):
        f = nx.scaled_softplus(Tensor(x), s).data
        lf = nx.log_scaled_softplus(Tensor(x), s).data
    assert np.all(f > 0)
    assert np.all(np.diff(f) >= 0)
    # the plain form is floored at the smallest normal; the log form is not
    ok = f > 1e-300
    np.testing.assert_allclose(lf[ok], np.log(f[ok]), rtol=1e-10, atol=1e-12)
    assert np.all(lf[~ok] <= np.log(1e-300))


def test_softplus_positive_in_single_precision():
    f = nx.scaled_softplus(Tensor(np.array([-1e4, -200.0, 0.0], dtype=np.float32)), 1.0).data
    assert np.all(f > 0)


# --- quadrature ---------------------------------------------------------------

def test_trapezoid_examples():
    assert nx.trapezoid(np.ones(11), np.linspace(0, 1, 11)) == 1.0
    assert nx.trapezoid([0.0, 1.0, 2.0], [0.0, 1.0, 2.0]) == 2.0
    g = np.linspace(0, 10, 1001)
    assert abs(nx.trapezoid(np.exp(-g), g) - (1 - math.exp(-10))) < 1e-4


def test_trapezoid_errors():
    with pytest.raises(ValueError):
        nx.trapezoid([1.0], [0.0])
    with pytest.raises(ValueError):
        nx.trapezoid([1.0, 2.0, 3.0], [0.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        nx.cumulative_trapezoid([1.0, 2.0], [0.0, 1.0, 2.0])


def test_cumulative_trapezoid_running_integral(rng):
    g = np.sort(rng.uniform(0, 5, 40))
    v = rng.standard_normal(40)
    c = nx.cumulative_trapezoid(v, g)
    assert c[0] == 0.0
    for k in range(2, 40):
        assert c[k - 1] == pytest.approx(nx.trapezoid(v[:k], g[:k]), abs=1e-12)
    np.testing.assert_allclose(v @ nx.cumulative_trapezoid_matrix(g), c, atol=1e-12)
    assert nx.trapezoid_weights(g) @ v == pytest.approx(nx.trapezoid(v, g), abs=1e-12)


grids = hnp.arrays(np.float64, st.integers(2, 20), elements=st.floats(0.01, 2)).map(np.cumsum)


@given(grids, st.floats(-3, 3), st.floats(-3, 3), st.data())
def test_trapezoid_linear_and_exact_on_affine(grid, a, b, data):
    n = len(grid)
    u = data.draw(hnp.arrays(np.float64, n, elements=st.floats(-5, 5)))
    v = data.draw(hnp.arrays(np.float64, n, elements=st.floats(-5, 5)))
    lhs = nx.trapezoid(a * u + b * v, grid)
    assert lhs == pytest.approx(a * nx.trapezoid(u, grid) + b * nx.trapezoid(v, grid), abs=1e-9)
    exact = a * (grid[-1] ** 2 - grid[0] ** 2) / 2 + b * (grid[-1] - grid[0])
    assert nx.trapezoid(a * grid + b, grid) == pytest.approx(exact, rel=1e-9, abs=1e-9)


# --- serialization -------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_roundtrip_bitwise(tmp_path, rng, dtype):
    arr = rng.standard_normal((3, 5)).astype(dtype)
    nx.save_tensor(tmp_path / "t.bin", arr, "emb")
    name, back = nx.load_tensor(tmp_path / "t.bin")
    assert name == "emb" and back.dtype == dtype
    assert back.tobytes() == arr.tobytes()


@settings(max_examples=30)
@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4), elements=finite))
def test_tensor_roundtrip_property(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ser") / "x.bin"
    nx.save_tensor(path, arr, "x")
    _, back = nx.load_tensor(path)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()

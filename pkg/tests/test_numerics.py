import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from geosdg import numerics as nx
from geosdg.errors import InvalidValue, ShapeError
from geosdg.numerics import Tape, Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite)


def _prob_rows(draw_arr):
    p = np.abs(draw_arr) + 1e-3
    return p / p.sum(axis=-1, keepdims=True)


# --- softmax -------------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(Tensor(np.zeros(4))).data, 0.25)
    assert np.allclose(nx.softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])
    out = nx.softmax(Tensor(np.array([0.0, math.log(3.0)]))).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-15)


def test_softmax_rejects_bad_input():
    with pytest.raises(InvalidValue):
        nx.softmax(Tensor(np.array([0.0, np.inf])))
    with pytest.raises(ShapeError):
        nx.softmax(Tensor(np.zeros(3)), axis=2)


@given(rows)
def test_softmax_is_distribution(x):
    p = nx.softmax(Tensor(x)).data
    assert np.all((p >= 0) & (p <= 1))
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)


@given(hnp.arrays(np.float64, 5, elements=st.integers(-20, 20).map(float)), st.integers(-30, 30))
def test_softmax_shift_invariance(x, c):
    # integer-valued inputs keep the shift exact in floating point
    a = nx.softmax(Tensor(x)).data
    b = nx.softmax(Tensor(x + float(c))).data
    assert np.array_equal(a, b)


# --- cross entropy ---------------------------------------------------------------

def test_cross_entropy_examples():
    q = np.array([[0.0, 1.0, 0.0, 0.0]])
    assert nx.cross_entropy(Tensor(q), Tensor(np.log(np.full((1, 4), 0.25)))).data == pytest.approx(math.log(4))
    half = np.array([[0.5, 0.5]])
    assert nx.cross_entropy(Tensor(half), Tensor(np.log(half))).data == pytest.approx(math.log(2))
    ce = nx.cross_entropy(Tensor(np.array([[0.75, 0.25]])), Tensor(np.log(np.array([[0.25, 0.75]])))).data
    assert ce == pytest.approx(-0.75 * math.log(0.25) - 0.25 * math.log(0.75), abs=1e-12)
    assert ce[0] == pytest.approx(1.1116, abs=1e-4)


def test_cross_entropy_rejects_non_distribution():
    with pytest.raises(InvalidValue):
        nx.cross_entropy(Tensor(np.array([[0.5, 0.6]])), Tensor(np.zeros((1, 2))))


@given(hnp.arrays(np.float64, (3, 5), elements=finite), hnp.arrays(np.float64, (3, 5), elements=finite))
def test_gibbs_inequality(a, b):
    q = _prob_rows(a)
    log_p = nx.log_softmax(Tensor(b)).data
    gap = nx.cross_entropy(Tensor(q), Tensor(log_p)).data - nx.entropy(q)
    assert np.all(gap >= -1e-9)
    same = nx.cross_entropy(Tensor(q), Tensor(np.log(q))).data - nx.entropy(q)
    assert np.allclose(same, 0.0, atol=1e-9)


# --- layer norm -------------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(nx.layer_norm(Tensor(np.full((1, 4), 7.0)), one, zero).data, np.zeros((1, 4)))
    out = nx.layer_norm(Tensor(np.array([[1.0, 3.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-9)
    b = np.array([0.5, -1.0, 2.0, 3.0])
    out = nx.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), zero, Tensor(b)).data
    assert np.array_equal(out, np.broadcast_to(b, (3, 4)))


# --- tape semantics -----------------------------------------------------------------

def test_unreachable_gradient_is_zero():
    with Tape() as tape:
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0]), requires_grad=True)
        loss = (x * x).sum()
    gx, gy = tape.gradient(loss, [x, y])
    assert np.array_equal(gx, [2.0, 4.0])
    assert np.array_equal(gy, [0.0])


def test_tape_is_single_use():
    with Tape() as tape:
        x = Tensor(np.ones(2), requires_grad=True)
        loss = x.sum()
    tape.gradient(loss, [x])
    with pytest.raises(RuntimeError):
        tape.gradient(loss, [x])


def test_non_finite_result_raises():
    with pytest.raises(InvalidValue):
        nx.exp(Tensor(np.array([1e5])))
    with pytest.raises(InvalidValue):
        nx.log(Tensor(np.array([0.0])))


def test_matmul_backward_transpose_rule(rng):
    a, b, g = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    with Tape() as tape:
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        loss = (nx.matmul(ta, tb) * Tensor(g)).sum()
    ga, gb = tape.gradient(loss, [ta, tb])
    assert np.array_equal(ga, g @ b.T)
    assert np.array_equal(gb, a.T @ g)


# --- gradient checks -------------------------------------------------------------------

def test_grad_check_quadratic():
    err = nx.grad_check(lambda x: (x * x).sum(), np.array([1.0, 2.0]))
    assert err < 1e-8


def test_grad_check_eps_domain():
    with pytest.raises(InvalidValue):
        nx.grad_check(lambda x: x.sum(), np.ones(2), eps=0.1)


def test_grad_check_cross_entropy_log_softmax(rng):
    q = _prob_rows(rng.normal(size=(2, 5)))
    f = lambda x: nx.mean(nx.cross_entropy(Tensor(q), nx.log_softmax(x)))  # noqa: E731
    assert nx.grad_check(f, rng.normal(size=(2, 5))) < 1e-6


OPS = {
    "exp": lambda x: nx.exp(x * 0.3).sum(),
    "log": lambda x: nx.log(x * x + 1.0).sum(),
    "div": lambda x: (x / (x * x + 2.0)).sum(),
    "gelu": lambda x: nx.gelu(x).sum(),
    "softmax": lambda x: (nx.softmax(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "log_softmax": lambda x: (nx.log_softmax(x, axis=0) * Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).sum(),
    "layer_norm": lambda x: (nx.layer_norm(x, Tensor(np.linspace(0.5, 2, 4)), Tensor(np.ones(4)))
                             * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "l2_normalize": lambda x: (nx.l2_normalize(x) * Tensor(np.arange(12.0).reshape(3, 4))).sum(),
    "transpose_getitem": lambda x: (nx.transpose(x)[1:3] * 2.0).sum() + x[0, 1] * x[2, 3],
    "concat_mean": lambda x: nx.mean(nx.concat([x, x * x], axis=1), axis=0).sum(),
    "matmul_self": lambda x: nx.matmul(x, nx.swap_last(x)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_at_random_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(nx.grad_check(OPS[name], rng.normal(size=(3, 4))) for _ in range(20))
    assert worst <= 1e-5


def test_bilinear_weights_rows_sum_to_one():
    w = nx.bilinear_weights(4, 7)
    assert np.allclose(w.sum(axis=1), 1.0)
    assert np.array_equal(nx.bilinear_weights(5, 5), np.eye(5))

"""Autodiff engine: primitive values, adjoints, tape semantics."""

import numpy as np
import pytest

from gnca.tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    add,
    clip,
    concat,
    div,
    gradient_check,
    linear,
    log,
    mul,
    row_norm,
    scalar_mul,
    segment_mean,
    segment_sum,
    sigmoid,
    softplus,
    sqrt,
    square,
    sub,
    take_rows,
    tanh,
    tmean,
    tsum,
)


def test_forward_values():
    assert tanh(Tensor([[0.0]])).item() == 0.0
    assert sigmoid(Tensor([[0.0]])).item() == 0.5
    out = segment_sum(Tensor([[1.0], [2.0], [3.0]]), np.array([0, 0, 1]), 2)
    assert np.array_equal(out.values, [[3.0], [3.0]])


def test_tanh_derivative_closed_form():
    x = Tensor([[0.5]], requires_grad=True)
    with Tape() as tape:
        tape.backward(tanh(x))
    expected = 1.0 - np.tanh(0.5) ** 2
    assert abs(x.grad[0, 0] - expected) < 1e-15
    assert abs(expected - 0.786448) < 1e-6


def test_backward_quadratic():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        tape.backward(tsum(square(x)))
    assert np.array_equal(x.grad, [[2.0, 4.0]])


def test_backward_tanh_at_zero_weight():
    w = Tensor([[0.0]], requires_grad=True)
    x = Tensor([[1.0]])
    with Tape() as tape:
        tape.backward(tsum(tanh(mul(x, w))))
    assert abs(w.grad[0, 0] - 1.0) < 1e-15


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = Tensor(rng.normal(size=(4, 8)) * 0.5, requires_grad=True)
    b1 = Tensor(rng.normal(size=(1, 8)) * 0.1, requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 1)) * 0.5, requires_grad=True)
    b2 = Tensor(rng.normal(size=(1, 1)) * 0.1, requires_grad=True)
    x_in = rng.normal(size=(6, 4))

    for param in (w1, b1, w2, b2):
        def f(p, _param=param):
            h = tanh(linear(Tensor(x_in), w1, b1))
            return tmean(square(linear(h, w2, b2)))

        assert gradient_check(f, param, eps=1e-5) < 1e-6


def test_gradient_check_identity_sum_is_exact():
    # Integer values with a power-of-two step keep every probe exact, so the
    # central difference of the identity sum is exactly the analytic gradient.
    x = Tensor(np.arange(9, dtype=np.float64).reshape(3, 3))
    assert gradient_check(tsum, x, eps=2.0**-13) == 0.0


def test_gradient_check_sigmoid_linear():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 1)), requires_grad=True)
    x_in = rng.normal(size=(7, 5))

    def f(p):
        return tmean(sigmoid(linear(Tensor(x_in), w, b)))

    assert gradient_check(f, w) < 1e-6
    assert gradient_check(f, b) < 1e-6


_UNARY = {
    "tanh": (tanh, (-2.0, 2.0)),
    "sigmoid": (sigmoid, (-4.0, 4.0)),
    "softplus": (softplus, (-4.0, 4.0)),
    "square": (square, (-2.0, 2.0)),
    "sqrt": (sqrt, (0.1, 4.0)),
    "log": (log, (0.1, 4.0)),
    "row_norm": (row_norm, (0.2, 2.0)),
}


@pytest.mark.parametrize("name", sorted(_UNARY))
def test_unary_primitives_match_finite_differences(name):
    op, (lo, hi) = _UNARY[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for trial in range(100):
        x = Tensor(rng.uniform(lo, hi, size=(3, 4)))

        def f(t):
            return tsum(square(op(t)))

        worst = max(worst, gradient_check(f, x, eps=1e-6))
    assert worst < 1e-5


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "scalar_mul", "clip", "mean_rows"])
def test_binary_and_reduction_primitives_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for trial in range(100):
        a = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        b_full = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        b_row = Tensor(rng.uniform(0.5, 2.0, size=(1, 4)))
        b_col = Tensor(rng.uniform(0.5, 2.0, size=(3, 1)))
        other = (b_full, b_row, b_col)[trial % 3]

        def f(t):
            if name == "add":
                out = add(t, other)
            elif name == "sub":
                out = sub(other, t)
            elif name == "mul":
                out = mul(t, other)
            elif name == "div":
                out = div(other, t)
            elif name == "scalar_mul":
                out = scalar_mul(t, 1.7)
            elif name == "clip":
                out = clip(t, 0.75, 1.75)
            else:
                out = tmean(t, axis=trial % 2, keepdims=True)
            return tsum(square(out))

        worst = max(worst, gradient_check(f, a, eps=1e-6))
    assert worst < 1e-5


def test_gather_segment_concat_primitives_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(100):
        x = Tensor(rng.normal(size=(5, 3)))
        idx = rng.integers(0, 5, size=8)
        seg = np.sort(rng.integers(0, 4, size=8))

        def f(t):
            rows = take_rows(t, idx)
            summed = segment_sum(rows, seg, 4)
            meaned = segment_mean(rows, seg, 4)
            both = concat([summed, meaned], axis=1)
            stacked = concat([both, both], axis=0)
            return tsum(square(stacked))

        worst = max(worst, gradient_check(f, x, eps=1e-6))
    assert worst < 1e-5


def test_linear_primitive_matches_finite_differences():
    rng = np.random.default_rng(13)
    worst = 0.0
    for trial in range(100):
        x = Tensor(rng.normal(size=(4, 3)))
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 2)), requires_grad=True)
        for tgt in (x, w, b):
            def f(t, _w=w, _b=b, _x=x):
                return tsum(square(linear(_x, _w, _b)))
            worst = max(worst, gradient_check(f, tgt, eps=1e-6))
    assert worst < 1e-5


def test_segment_sum_empty_segment_is_zero_row():
    out = segment_mean(Tensor([[1.0, 1.0]]), np.array([0]), 3)
    assert np.array_equal(out.values[1], [0.0, 0.0])
    assert np.array_equal(out.values[2], [0.0, 0.0])


def test_segment_sum_permutation_invariance():
    # Exact for dyadic-rational values (every partial sum representable);
    # general doubles agree to accumulation roundoff.
    rng = np.random.default_rng(5)
    vals = rng.integers(-1024, 1024, size=(40, 3)) / 1024.0
    seg = rng.integers(0, 4, size=40)
    base = segment_sum(Tensor(vals), seg, 4).values
    for _ in range(10):
        perm = rng.permutation(40)
        shuffled = segment_sum(Tensor(vals[perm]), seg[perm], 4).values
        assert np.array_equal(shuffled, base)
    vals = rng.normal(size=(40, 3))
    base = segment_sum(Tensor(vals), seg, 4).values
    perm = rng.permutation(40)
    shuffled = segment_sum(Tensor(vals[perm]), seg[perm], 4).values
    assert np.allclose(shuffled, base, rtol=0, atol=1e-12)


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(17)
    x_in = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 2)), requires_grad=True)

    def grad_of(a_coef, b_coef):
        w.grad = b.grad = None
        with Tape() as tape:
            h = tanh(linear(Tensor(x_in), w, b))
            f = tsum(square(h))
            g = tsum(h)
            tape.backward(add(scalar_mul(f, a_coef), scalar_mul(g, b_coef)))
        return w.grad.copy()

    gf = grad_of(1.0, 0.0)
    gg = grad_of(0.0, 1.0)
    combined = grad_of(2.5, -1.25)
    assert np.allclose(combined, 2.5 * gf - 1.25 * gg, rtol=0, atol=1e-12)


def test_tape_rejects_double_backward_and_foreign_loss():
    x = Tensor([[1.0]], requires_grad=True)
    with Tape() as tape:
        y = square(x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)
    with Tape() as tape:
        z = square(x)
    with Tape() as other:
        _ = square(x)
        with pytest.raises(TapeError):
            other.backward(z)  # produced on a different tape


def test_tape_rejects_non_scalar_loss():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with Tape() as tape:
        y = square(x)
        with pytest.raises(TapeError):
            tape.backward(y)


def test_non_finite_results_raise():
    with pytest.raises(NonFiniteError):
        div(Tensor([[1.0]]), Tensor([[0.0]]))
    with pytest.raises(ValueError):
        log(Tensor([[0.0]]))
    with pytest.raises(ValueError):
        sqrt(Tensor([[-1.0]]))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones((1, 2))))
    with pytest.raises(IndexError):
        segment_sum(Tensor(np.ones((2, 1))), np.array([0, 5]), 2)
    with pytest.raises(IndexError):
        take_rows(Tensor(np.ones((2, 1))), np.array([3]))

import math

import numpy as np
import pytest

from modnet.autodiff import (
    LOG_2PI,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    apply_primitive,
    categorical_log_prob,
    concat_last,
    constant,
    embedding_lookup,
    gaussian_log_density,
    grad_check,
    matmul,
    mean_all,
    mul,
    relu,
    row_softmax,
    sigmoid,
    softplus,
    sum_over_axis,
    tanh,
)


def backward_wrt(loss_fn, *params):
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss)
    return [tape.grad(grads, p) for p in params]


# ---------------------------------------------------------------------------
# hand-worked values


def test_matmul_forward_hand():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    out = matmul(a, b)
    # worked by hand: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_backward_hand():
    a = Parameter([[1.0, 2.0], [3.0, 4.0]], "a")
    b = Parameter([[5.0, 6.0], [7.0, 8.0]], "b")
    ga, gb = backward_wrt(lambda: sum_over_axis(matmul(a, b)), a, b)
    # d sum(AB)/dA = ones @ B^T = [[11,15],[11,15]]; /dB = A^T @ ones
    assert np.array_equal(ga, [[11.0, 15.0], [11.0, 15.0]])
    assert np.array_equal(gb, [[4.0, 4.0], [6.0, 6.0]])


def test_square_sum_gradient_is_2x():
    x = Parameter([1.0, 2.0, 3.0], "x")
    (g,) = backward_wrt(lambda: sum_over_axis(mul(x, x)), x)
    assert np.array_equal(g, [2.0, 4.0, 6.0])


def test_pointwise_values_at_zero():
    z = np.zeros((1, 1))
    assert sigmoid(z).data[0, 0] == 0.5
    assert tanh(z).data[0, 0] == 0.0
    assert softplus(z).data[0, 0] == pytest.approx(math.log(2.0), abs=1e-15)
    assert relu(z).data[0, 0] == 0.0


def test_pointwise_gradients_at_zero():
    p = Parameter(np.zeros(1), "p")
    for fn, want in [(sigmoid, 0.25), (tanh, 1.0), (softplus, 0.5)]:
        (g,) = backward_wrt(lambda fn=fn: sum_over_axis(fn(p)), p)
        assert g[0] == pytest.approx(want, abs=1e-15)


def test_relu_subgradient_at_kink_is_zero():
    p = Parameter([-1.0, 0.0, 2.0], "p")
    (g,) = backward_wrt(lambda: sum_over_axis(relu(p)), p)
    assert np.array_equal(g, [0.0, 0.0, 1.0])


def test_softmax_uniform_and_shift_invariance():
    out = row_softmax(np.zeros((1, 4)))
    assert np.allclose(out.data, 0.25, atol=1e-15)
    z = np.array([[1.0, -2.0, 0.5]])
    a = row_softmax(z).data
    b = row_softmax(z + 1000.0).data
    assert np.allclose(a, b, atol=1e-12)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_extreme_logits_stable():
    z = np.array([[1e30, 0.0, -1e30]])
    p = row_softmax(z).data
    assert np.array_equal(p, [[1.0, 0.0, 0.0]])


def test_categorical_log_prob_uniform():
    logits = np.zeros((2, 5))
    lp = categorical_log_prob(logits, np.array([0, 4]))
    assert np.allclose(lp.data, -math.log(5.0), atol=1e-15)


def test_categorical_backward_is_onehot_minus_probs():
    p = Parameter([[0.3, -1.1, 0.4]], "logits")
    y = np.array([2])
    (g,) = backward_wrt(lambda: sum_over_axis(categorical_log_prob(p, y)), p)
    z = p.data - p.data.max()
    probs = np.exp(z) / np.exp(z).sum()
    onehot = np.array([[0.0, 0.0, 1.0]])
    assert np.allclose(g, onehot - probs, atol=1e-12)


def test_gaussian_log_density_hand():
    # d=2, diff=0: -log(2*pi); diff=(1,0): extra -1/2
    y = np.zeros((1, 2))
    assert gaussian_log_density(y, y).data[0] == pytest.approx(-LOG_2PI, abs=1e-15)
    m = np.array([[1.0, 0.0]])
    assert gaussian_log_density(y, m).data[0] == pytest.approx(
        -0.5 - LOG_2PI, abs=1e-15
    )


def test_embedding_lookup_accumulates_repeats():
    table = Parameter(np.arange(6.0).reshape(3, 2), "emb")
    ids = np.array([1, 1, 2])
    (g,) = backward_wrt(lambda: sum_over_axis(embedding_lookup(table, ids)), table)
    # row 1 hit twice, row 2 once, row 0 never
    assert np.array_equal(g, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


def test_sum_over_axis_variants():
    x = np.arange(6.0).reshape(2, 3)
    assert sum_over_axis(x).data == 15.0
    assert np.array_equal(sum_over_axis(x, axis=0).data, [3.0, 5.0, 7.0])
    assert np.array_equal(sum_over_axis(x, axis=-1).data, [3.0, 12.0])
    kept = sum_over_axis(x, axis=1, keepdims=True)
    assert kept.data.shape == (2, 1)


def test_concat_last_forward_and_split_gradient():
    a = Parameter([[1.0, 2.0]], "a")
    b = Parameter([[3.0]], "b")
    out = concat_last(a, b)
    assert np.array_equal(out.data, [[1.0, 2.0, 3.0]])
    ga, gb = backward_wrt(
        lambda: sum_over_axis(mul(concat_last(a, b), np.array([[1.0, 10.0, 100.0]]))),
        a,
        b,
    )
    assert np.array_equal(ga, [[1.0, 10.0]])
    assert np.array_equal(gb, [[100.0]])


def test_mean_all():
    assert mean_all(np.arange(4.0)).data == 1.5


# ---------------------------------------------------------------------------
# broadcasting


def test_add_broadcast_unbroadcast():
    w = Parameter(np.ones((2, 3)), "w")
    bias = Parameter(np.zeros(3), "b")
    gw, gb = backward_wrt(lambda: sum_over_axis(add(w, bias)), w, bias)
    assert np.array_equal(gw, np.ones((2, 3)))
    assert np.array_equal(gb, [2.0, 2.0, 2.0])  # summed over broadcast rows


def test_mul_broadcast_scalar():
    p = Parameter([1.0, 2.0], "p")
    (g,) = backward_wrt(lambda: sum_over_axis(mul(p, 3.0)), p)
    assert np.array_equal(g, [3.0, 3.0])


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_requires_scalar():
    p = Parameter([1.0, 2.0], "p")
    with Tape() as tape:
        out = mul(p, p)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_unused_watched_leaf_gets_exact_zero():
    used = Parameter([2.0], "used")
    unused = Parameter([[5.0, 5.0]], "unused")
    with Tape() as tape:
        tape.watch(unused)
        loss = sum_over_axis(mul(used, used))
    grads = tape.backward(loss)
    g = tape.grad(grads, unused)
    assert g.shape == (1, 2)
    assert np.array_equal(g, np.zeros((1, 2)))


def test_repeated_watch_shares_node():
    p = Parameter([1.0], "p")
    with Tape() as tape:
        t1 = tape.watch(p)
        t2 = tape.watch(p)
    assert t1.node == t2.node


def test_parameter_used_twice_accumulates():
    p = Parameter([3.0], "p")
    (g,) = backward_wrt(lambda: sum_over_axis(add(mul(p, p), p)), p)
    assert np.array_equal(g, [7.0])  # 2x + 1 at x=3


def test_constant_blocks_gradient():
    p = Parameter([1.5], "p")
    (g,) = backward_wrt(lambda: sum_over_axis(mul(constant(p), p)), p)
    # only the live branch contributes: d(c*x)/dx = c
    assert np.array_equal(g, [1.5])


def test_stale_tape_tensor_is_plain_value():
    p = Parameter([2.0], "p")
    with Tape() as t1:
        old = mul(p, p)
    with Tape() as t2:
        loss = sum_over_axis(mul(old, p))
    grads = t2.backward(loss)
    # `old` came from t1, so only the direct factor differentiates
    assert np.array_equal(t2.grad(grads, p), [4.0])


def test_no_tape_is_value_only():
    out = mul(Tensor([1.0, 2.0]), 2.0)
    assert out.node is None
    assert np.array_equal(out.data, [2.0, 4.0])


def test_backward_linearity():
    p = Parameter([0.7, -1.2], "p")

    def lossA():
        return sum_over_axis(mul(p, p))

    def lossB():
        return sum_over_axis(sigmoid(p))

    (ga,) = backward_wrt(lossA, p)
    (gb,) = backward_wrt(lossB, p)
    (gab,) = backward_wrt(lambda: add(lossA(), lossB()), p)
    assert np.allclose(gab, ga + gb, atol=1e-15)


def test_operator_sugar_matches_primitives():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    assert np.array_equal((a + b).data, [4.0, 6.0])
    assert np.array_equal((a - b).data, [-2.0, -2.0])
    assert np.array_equal((a * b).data, [3.0, 8.0])
    assert np.array_equal((-a).data, [-1.0, -2.0])


# ---------------------------------------------------------------------------
# rejection


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 2)))


def test_add_rejects_non_broadcastable():
    with pytest.raises(ShapeError):
        add(np.ones((2, 3)), np.ones((2, 4)))


def test_embedding_rejects_out_of_range():
    table = np.ones((3, 2))
    with pytest.raises(ShapeError, match="out of range"):
        embedding_lookup(table, np.array([0, 3]))
    with pytest.raises(ShapeError, match="out of range"):
        embedding_lookup(table, np.array([-1]))
    with pytest.raises(ShapeError, match="integers"):
        embedding_lookup(table, np.array([0.5]))


def test_categorical_rejects_bad_targets():
    logits = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        categorical_log_prob(logits, np.array([0, 3]))
    with pytest.raises(ShapeError):
        categorical_log_prob(logits, np.array([0]))


def test_gaussian_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        gaussian_log_density(np.ones((2, 3)), np.ones((2, 2)))


def test_unknown_primitive_name():
    with pytest.raises(ShapeError, match="unknown primitive"):
        apply_primitive("does-not-exist", np.ones(2))


# ---------------------------------------------------------------------------
# finite differences over every primitive


FD_RNG = np.random.default_rng(20240817)


def _param(*shape, name="p", scale=1.0):
    return Parameter(FD_RNG.standard_normal(shape) * scale, name)


@pytest.mark.parametrize(
    "name",
    [
        "matmul",
        "add",
        "elementwise-mul",
        "relu",
        "sigmoid",
        "tanh",
        "softplus",
        "row-softmax",
        "concat-last-axis",
        "sum-over-axis",
        "embedding-lookup",
        "gaussian-log-density",
        "categorical-log-prob",
    ],
)
def test_fd_every_primitive(name):
    probe = _param(4, 3, name="probe")

    if name == "matmul":
        other = _param(3, 2, name="other")
        fn = lambda: mean_all(matmul(probe, other))
        params = [probe, other]
    elif name == "add":
        bias = _param(3, name="bias")
        fn = lambda: mean_all(sigmoid(add(probe, bias)))
        params = [probe, bias]
    elif name == "elementwise-mul":
        other = _param(4, 3, name="other")
        fn = lambda: mean_all(mul(probe, other))
        params = [probe, other]
    elif name == "relu":
        # keep every coordinate at least 10 fd-steps from the kink
        probe = Parameter(
            np.where(np.abs(probe.data) < 1e-3, 0.5, probe.data), "probe"
        )
        fn = lambda: mean_all(relu(probe))
        params = [probe]
    elif name in ("sigmoid", "tanh", "softplus"):
        prim = {"sigmoid": sigmoid, "tanh": tanh, "softplus": softplus}[name]
        fn = lambda: mean_all(prim(probe))
        params = [probe]
    elif name == "row-softmax":
        sel = FD_RNG.standard_normal((4, 3))
        fn = lambda: mean_all(mul(row_softmax(probe), sel))
        params = [probe]
    elif name == "concat-last-axis":
        other = _param(4, 2, name="other")
        sel = FD_RNG.standard_normal((4, 5))
        fn = lambda: mean_all(mul(concat_last(probe, other), sel))
        params = [probe, other]
    elif name == "sum-over-axis":
        fn = lambda: mean_all(mul(sum_over_axis(probe, axis=0), np.array([1.0, -2.0, 0.5])))
        params = [probe]
    elif name == "embedding-lookup":
        ids = np.array([0, 2, 2, 1])
        sel = FD_RNG.standard_normal((4, 3))
        fn = lambda: mean_all(mul(embedding_lookup(probe, ids), sel))
        params = [probe]
    elif name == "gaussian-log-density":
        y = FD_RNG.standard_normal((4, 3))
        fn = lambda: mean_all(gaussian_log_density(y, probe))
        params = [probe]
    else:  # categorical-log-prob
        targets = np.array([0, 1, 2, 1])
        fn = lambda: mean_all(categorical_log_prob(probe, targets))
        params = [probe]

    assert grad_check(fn, params, step=1e-5) < 1e-4


def test_fd_composed_expression():
    w1 = _param(3, 4, name="w1", scale=0.7)
    w2 = _param(4, 2, name="w2", scale=0.7)
    x = FD_RNG.standard_normal((5, 3))
    y = FD_RNG.standard_normal((5, 2))

    def fn():
        h = tanh(matmul(x, w1))
        return mean_all(gaussian_log_density(y, matmul(h, w2)))

    assert grad_check(fn, [w1, w2], step=1e-5) < 1e-4


def test_grad_check_skip_mask():
    p = Parameter(np.array([0.0, 1.0]), "p")
    err = grad_check(
        lambda: sum_over_axis(relu(p)),
        [p],
        skip={p: np.array([True, False])},
    )
    assert err < 1e-10


def test_grad_check_rejects_bad_step():
    p = Parameter([1.0], "p")
    with pytest.raises(ValueError):
        grad_check(lambda: sum_over_axis(p * p), [p], step=0.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyadimp import diffcore as dc
from dyadimp.diffcore import ContractError, DimensionError, DomainError, Tape, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def central_diff(f, x, eps=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        gflat[i] = (fp - fm) / (2 * eps)
    return g


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    b = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(dc.matmul(np.eye(3), b).data, b)
    np.testing.assert_array_equal(dc.matmul([[1, 2], [3, 4]], np.eye(2)).data, [[1, 2], [3, 4]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(-10, 10, (4, 5)), rng.uniform(-10, 10, (5, 3))
    np.testing.assert_allclose(dc.matmul(a, b).data, naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_matmul_batched_shared_weight_gradient():
    rng = np.random.default_rng(2)
    a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    err = dc.grad_check(lambda t: dc.sum_all(dc.mul(dc.matmul(t[0], t[1]), dc.matmul(t[0], t[1]))), [a, w])
    assert err < 1e-7


# ---------------------------------------------------------------- unary

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(dc.relu([-1.0, 0.0, 2.0]).data, [0, 0, 2])
    assert dc.sigmoid(0.0).item() == 0.5


def test_tanh_gradient_vs_central_difference():
    tape = Tape()
    x = tape.variable(0.3)
    dc.backward(tape, dc.tanh(x))
    numeric = (np.tanh(0.3 + 1e-5) - np.tanh(0.3 - 1e-5)) / 2e-5
    assert abs(tape.grad(x) - numeric) / abs(numeric) < 1e-7


def test_log_domain_error():
    with pytest.raises(DomainError):
        dc.log([1.0, 0.0])


def test_unknown_unary():
    with pytest.raises(ValueError):
        dc.unary("cosh", [1.0])


# ---------------------------------------------------------------- binary

def test_binary_identities():
    x = np.random.default_rng(3).normal(size=(4, 3))
    np.testing.assert_array_equal(dc.add(x, 0.0).data, x)
    np.testing.assert_array_equal(dc.mul(x, 1.0).data, x)


def test_sub_gradient_wrt_b_is_minus_one():
    tape = Tape()
    a, b = tape.variable(np.ones((2, 3))), tape.variable(np.zeros((2, 3)))
    dc.backward(tape, dc.sum_all(dc.sub(a, b)))
    np.testing.assert_array_equal(tape.grad(b), -np.ones((2, 3)))


def test_bias_broadcast_sums_leading_axes():
    tape = Tape()
    x, b = tape.variable(np.zeros((2, 4, 3))), tape.variable(np.zeros(3))
    dc.backward(tape, dc.sum_all(dc.add(x, b)))
    np.testing.assert_array_equal(tape.grad(b), np.full(3, 8.0))


def test_non_broadcastable():
    with pytest.raises(DimensionError):
        dc.add(np.zeros((2, 3)), np.zeros(2))


# ---------------------------------------------------------------- softmax

def test_softmax_uniform_and_shift_invariance():
    np.testing.assert_allclose(dc.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    a = dc.softmax([2.0, 2.7]).data
    b = dc.softmax([2.0 + 123.4, 2.7 + 123.4]).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_softmax_jacobian_vs_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.normal(size=5)
    for j in range(5):
        tape = Tape()
        xv = tape.variable(x)
        dc.backward(tape, dc.slice_axis(dc.softmax(xv), 0, j))
        numeric = central_diff(lambda v: np.exp(v[j] - v.max()) / np.exp(v - v.max()).sum(), x)
        analytic = tape.grad(xv)
        rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        assert rel.max() < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=12))
def test_softmax_sums_to_one(values):
    p = dc.softmax(np.array(values)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_axis_error():
    with pytest.raises(DimensionError):
        dc.softmax(np.zeros((2, 2)), axis=2)


# ---------------------------------------------------------------- concat / shape ops

def test_concat_single_part_and_heads():
    x = np.random.default_rng(5).normal(size=(3, 4))
    np.testing.assert_array_equal(dc.concat([x], axis=1).data, x)
    heads = [np.full((2, 4), i, dtype=float) for i in range(16)]
    out = dc.concat(heads, axis=-1)
    assert out.shape == (2, 64)
    for i, h in enumerate(heads):
        np.testing.assert_array_equal(dc.slice_axis(out, -1, 4 * i, 4 * i + 4).data, h)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        dc.concat([np.zeros((2, 3)), np.zeros((3, 3))], axis=1)


def test_stack_reshape_transpose_gradients():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f = lambda t: dc.sum_all(dc.mul(dc.transpose(dc.reshape(dc.stack([t[0], t[1]], 1), (2, 6)), (1, 0)),
                                    np.arange(12.0).reshape(6, 2)))
    assert dc.grad_check(f, [a, b]) < 1e-8


# ---------------------------------------------------------------- mean_pool

def test_mean_pool_values():
    np.testing.assert_array_equal(dc.mean_pool(np.tile([1.5, -2.0], (7, 1)), 0).data, [1.5, -2.0])
    np.testing.assert_array_equal(dc.mean_pool([[1.0, 3.0], [3.0, 5.0]], 0).data, [2.0, 4.0])


def test_mean_pool_gradient():
    x = np.random.default_rng(7).normal(size=(6, 3))
    w = np.random.default_rng(8).normal(size=3)
    assert dc.grad_check(lambda t: dc.sum_all(dc.mul(dc.mean_pool(t[0], 0), w)), [x]) < 1e-7


# ---------------------------------------------------------------- backward

def test_backward_sum_and_square():
    x = np.random.default_rng(9).normal(size=(3, 2))
    tape = Tape()
    xv = tape.variable(x)
    dc.backward(tape, dc.sum_all(xv))
    np.testing.assert_array_equal(tape.grad(xv), np.ones_like(x))
    tape = Tape()
    xv = tape.variable(x)
    dc.backward(tape, dc.sum_all(dc.mul(xv, xv)))
    np.testing.assert_array_equal(tape.grad(xv), 2 * x)


def test_backward_requires_scalar():
    tape = Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ContractError):
        dc.backward(tape, dc.tanh(x))


def test_backward_deterministic():
    rng = np.random.default_rng(10)
    tape = Tape()
    x = tape.variable(rng.normal(size=(4, 4)))
    y = dc.tanh(dc.matmul(x, x))
    loss = dc.sum_all(dc.mul(dc.softmax(y), y))
    g1 = {k: v.copy() for k, v in dc.backward(tape, loss).items()}
    g2 = dc.backward(tape, loss)
    assert g1.keys() == g2.keys()
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_tape_is_topologically_ordered():
    tape = Tape()
    x = tape.variable(np.ones(2))
    dc.sum_all(dc.mul(dc.exp(x), x))
    for i, node in enumerate(tape.nodes):
        assert all(p is None or p < i for p in node.parents)


def test_untracked_tensors_do_not_record():
    t = dc.tanh(np.ones(3))
    assert t.tape is None and t.node_id is None


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    x = np.random.default_rng(11).normal(size=6)
    assert dc.grad_check(lambda t: dc.sum_all(dc.mul(t[0], t[0])), [x]) < 1e-9


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ContractError):
        dc.grad_check(lambda t: dc.sum_all(t[0]), [np.ones(2)], eps=0.0)


OPS = {
    "matmul": (lambda t: dc.matmul(t[0], t[1]), lambda rng, a, b: [rng.normal(size=(a, b)), rng.normal(size=(b, a))]),
    "tanh": (lambda t: dc.tanh(t[0]), lambda rng, a, b: [rng.normal(size=(a, b))]),
    "sigmoid": (lambda t: dc.sigmoid(t[0]), lambda rng, a, b: [rng.normal(size=(a, b))]),
    "relu": (lambda t: dc.relu(t[0]), lambda rng, a, b: [rng.normal(size=(a, b)) + np.sign(rng.normal(size=(a, b))) * 0.01]),
    "exp": (lambda t: dc.exp(t[0]), lambda rng, a, b: [rng.normal(size=(a, b))]),
    "log": (lambda t: dc.log(t[0]), lambda rng, a, b: [rng.uniform(0.5, 2.0, size=(a, b))]),
    "add": (lambda t: dc.add(t[0], t[1]), lambda rng, a, b: [rng.normal(size=(a, b)), rng.normal(size=b)]),
    "sub": (lambda t: dc.sub(t[0], t[1]), lambda rng, a, b: [rng.normal(size=(a, b)), rng.normal(size=(a, b))]),
    "mul": (lambda t: dc.mul(t[0], t[1]), lambda rng, a, b: [rng.normal(size=(a, b)), rng.normal(size=b)]),
    "softmax": (lambda t: dc.softmax(t[0], axis=-1), lambda rng, a, b: [rng.normal(size=(a, b))]),
    "concat": (lambda t: dc.concat([t[0], t[1]], axis=0), lambda rng, a, b: [rng.normal(size=(a, b)), rng.normal(size=(b, b))]),
    "mean_pool": (lambda t: dc.mean_pool(t[0], axis=0), lambda rng, a, b: [rng.normal(size=(a, b))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_grad_check_over_100_seeds(name):
    op, make = OPS[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(1, 9, size=2)
        inputs = make(rng, int(a), int(b))
        proj = rng.normal(size=op([Tensor(x) for x in inputs]).shape)
        worst = max(worst, dc.grad_check(lambda t: dc.sum_all(dc.mul(op(t), proj)), inputs))
    assert worst < 1e-5

"""Core tensor ops: forward values against independent oracles, gradients
against central finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stemsep import tensor as T
from stemsep.errors import ShapeError


@pytest.fixture(autouse=True)
def _float64_default():
    with T.using_dtype(np.float64):
        yield


def rng_for(name):
    return np.random.default_rng(abs(hash(name)) % (2**32))


# ---------------------------------------------------------------------------
# Oracles


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def mean_oracle(a):
    total = 0.0
    for v in a.reshape(-1):
        total += v
    return total / a.size


# ---------------------------------------------------------------------------
# Elementwise forward values


def test_log1p_of_zero_is_zero():
    assert T.log1p(T.Tensor([0.0])).data[0] == 0.0


def test_leaky_relu_negative_slope():
    out = T.leaky_relu(T.Tensor([-1.0]), slope=0.01)
    assert out.data[0] == pytest.approx(-0.01)


def test_expm1_inverts_log1p():
    x = np.linspace(0.0, 1e3, 512)
    back = T.expm1(T.log1p(T.Tensor(x))).data
    assert np.allclose(back, x, rtol=1e-12, atol=1e-12)


def test_add_broadcasts_trailing_suffix():
    a = T.Tensor(np.ones((2, 3, 4)))
    b = T.Tensor(np.arange(4.0))
    out = T.add(a, b)
    assert out.data.shape == (2, 3, 4)
    assert np.array_equal(out.data[1, 2], 1.0 + np.arange(4.0))


def test_add_rejects_non_suffix_shapes():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((2, 1)))
    with pytest.raises(ShapeError) as err:
        T.add(a, b)
    assert "(2, 3)" in str(err.value) and "(2, 1)" in str(err.value)


def test_scalar_promotion():
    x = T.Tensor(np.ones(3))
    assert np.array_equal((1.0 - x).data, np.zeros(3))
    assert np.array_equal((x * 2.0).data, 2.0 * np.ones(3))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    x = rng_for("matmul-id").normal(size=(3, 5))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(x))
    assert np.allclose(out.data, x, atol=1e-15)


def test_matmul_ones():
    out = T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_matches_triple_loop():
    rng = rng_for("matmul-loop")
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 6))
    out = T.matmul(T.Tensor(a), T.Tensor(b))
    assert np.allclose(out.data, matmul_oracle(a, b), atol=1e-12)


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones(3)), T.Tensor(np.ones((3, 2))))


# ---------------------------------------------------------------------------
# Reductions


def test_mean_of_constant():
    out = T.reduce_mean(T.Tensor(np.full((3, 4), 2.5)))
    assert out.data == pytest.approx(2.5)


def test_sum_of_zeros():
    assert T.reduce_sum(T.Tensor(np.zeros((2, 5)))).data == 0.0


def test_mean_matches_accumulation_oracle():
    a = rng_for("mean").normal(size=(3, 7, 2))
    out = T.reduce_mean(T.Tensor(a))
    assert abs(float(out.data) - mean_oracle(a)) < 1e-12


def test_reduce_over_axis_subset():
    a = rng_for("sum-axes").normal(size=(2, 3, 4))
    out = T.reduce_sum(T.Tensor(a), axes=(0, 2))
    assert np.allclose(out.data, a.sum(axis=(0, 2)), atol=1e-14)


def test_reduce_invalid_axis():
    with pytest.raises(ShapeError):
        T.reduce_sum(T.Tensor(np.ones((2, 2))), axes=(3,))


# ---------------------------------------------------------------------------
# backward


def test_backward_of_sum_gives_ones():
    x = T.Tensor(rng_for("bsum").normal(size=(3, 4)), requires_grad=True)
    T.backward(T.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_mean_of_squares():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.reduce_mean(T.mul(x, x)))
    assert np.allclose(x.grad, [1.0, 2.0], atol=1e-15)


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, x)
    with pytest.raises(ShapeError):
        T.backward(y)


def test_backward_on_empty_tape():
    x = T.Tensor([1.0], requires_grad=True)
    T.current_tape().clear()
    with pytest.raises(RuntimeError):
        T.backward(x)


def test_backward_accumulates_across_branches():
    # Gradient of a sum of two graph branches equals the per-branch sum.
    rng = rng_for("branches")
    xv = rng.normal(size=(4,))
    x = T.Tensor(xv, requires_grad=True)
    branch_a = T.reduce_sum(T.mul(x, x))
    branch_b = T.reduce_sum(T.mul(x, 3.0))
    T.backward(T.add(branch_a, branch_b))
    combined = x.grad.copy()

    x.zero_grad()
    T.backward(T.reduce_sum(T.mul(x, x)))
    ga = x.grad.copy()
    x.zero_grad()
    T.backward(T.reduce_sum(T.mul(x, 3.0)))
    gb = x.grad.copy()
    assert np.allclose(combined, ga + gb, atol=1e-14)


def test_forward_replay_is_bit_identical():
    rng = rng_for("determinism")
    a = rng.normal(size=(6, 6))
    b = rng.normal(size=(6, 6))

    def run():
        return T.matmul(T.tanh(T.Tensor(a)), T.sigmoid(T.Tensor(b))).data

    assert np.array_equal(run(), run())


def test_no_grad_blocks_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    T.current_tape().clear()
    with T.no_grad():
        y = T.mul(x, x)
    assert len(T.current_tape()) == 0
    assert not y.requires_grad


def test_tape_records_in_topological_order():
    # Every op's inputs are either leaves or outputs of earlier ops.
    T.current_tape().clear()
    x = T.Tensor(rng_for("topo").normal(size=(3, 3)), requires_grad=True)
    y = T.matmul(T.tanh(x), T.sigmoid(x))
    T.reduce_sum(T.mul(y, y))
    seen = {id(x)}
    for op in T.current_tape().ops:
        for inp in op.inputs:
            assert not inp.requires_grad or id(inp) in seen
        seen.add(id(op.out))
    T.current_tape().clear()


# ---------------------------------------------------------------------------
# Shape ops


def test_reshape_transpose_roundtrip_grads():
    x = T.Tensor(rng_for("shape").normal(size=(2, 3, 4)), requires_grad=True)
    y = T.transpose(T.reshape(x, (6, 4)), (1, 0))
    T.backward(T.reduce_sum(T.mul(y, y)))
    assert x.grad.shape == (2, 3, 4)
    assert np.allclose(x.grad, 2.0 * x.data, atol=1e-14)


def test_concat_and_slice_grads():
    a = T.Tensor(np.ones((2, 3)), requires_grad=True)
    b = T.Tensor(np.ones((2, 2)), requires_grad=True)
    joined = T.concat([a, b], axis=1)
    assert joined.data.shape == (2, 5)
    piece = T.slice_axis(joined, 1, 1, 4)
    T.backward(T.reduce_sum(piece))
    assert np.array_equal(a.grad, np.array([[0.0, 1.0, 1.0], [0.0, 1.0, 1.0]]))
    assert np.array_equal(b.grad, np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_stack_grads():
    xs = [T.Tensor(np.full(3, float(i)), requires_grad=True) for i in range(4)]
    out = T.stack(xs, axis=0)
    assert out.data.shape == (4, 3)
    T.backward(T.reduce_sum(T.mul(out, 2.0)))
    for x in xs:
        assert np.array_equal(x.grad, np.full(3, 2.0))


def test_slice_out_of_range():
    with pytest.raises(ShapeError):
        T.slice_axis(T.Tensor(np.ones((2, 3))), 1, 0, 4)


# ---------------------------------------------------------------------------
# gradient_check: the op is the oracle


def test_gradient_check_linear_is_exact():
    # Zeros make the finite-difference sums exact, so the error is literally 0.
    x = T.Tensor(np.zeros(5), requires_grad=True)
    err = T.gradient_check(lambda t: T.reduce_sum(t), x)
    assert err == 0.0
    y = T.Tensor(rng_for("gc-lin").normal(size=(5,)), requires_grad=True)
    assert T.gradient_check(lambda t: T.reduce_sum(t), y) < 1e-10


def test_gradient_check_mean_tanh():
    x = T.Tensor(rng_for("gc-tanh").normal(size=(4, 3)), requires_grad=True)
    err = T.gradient_check(lambda t: T.reduce_mean(T.tanh(t)), x, eps=1e-5)
    assert err < 1e-6


@pytest.mark.parametrize("name,fn", [
    ("log1p", lambda t: T.reduce_mean(T.log1p(t))),
    ("expm1", lambda t: T.reduce_mean(T.expm1(t))),
    ("sigmoid", lambda t: T.reduce_mean(T.sigmoid(t))),
    ("tanh", lambda t: T.reduce_sum(T.mul(T.tanh(t), T.tanh(t)))),
    ("leaky", lambda t: T.reduce_mean(T.leaky_relu(t, 0.01))),
    ("mul", lambda t: T.reduce_mean(T.mul(t, T.expm1(t)))),
])
def test_gradient_check_elementwise(name, fn):
    rng = rng_for("gc-" + name)
    x = rng.normal(size=(3, 5))
    if name in ("log1p",):
        x = np.abs(x)  # stay inside the log1p domain
    if name == "leaky":
        x = np.where(np.abs(x) < 0.1, x + 0.2, x)  # keep clear of the kink
    t = T.Tensor(x, requires_grad=True)
    assert T.gradient_check(fn, t, eps=1e-5) < 1e-4


def test_gradient_check_matmul():
    rng = rng_for("gc-mm")
    a = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b_const = rng.normal(size=(4, 2))

    def f(t):
        prod = T.matmul(t, T.Tensor(b_const))
        return T.reduce_mean(T.mul(prod, prod))

    assert T.gradient_check(f, a, eps=1e-5) < 1e-4


def test_gradient_check_requires_float64():
    with T.using_dtype(np.float32):
        x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.gradient_check(lambda t: T.reduce_sum(t), x)


def test_gradient_check_sampled_coordinates():
    x = T.Tensor(rng_for("gc-sample").normal(size=(40,)), requires_grad=True)
    err = T.gradient_check(lambda t: T.reduce_mean(T.tanh(t)), x, max_coords=8)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# Properties


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_mul_grad_matches_product_rule(rows, cols, data):
    seed = data.draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    av, bv = rng.normal(size=(rows, cols)), rng.normal(size=(rows, cols))
    a = T.Tensor(av, requires_grad=True)
    b = T.Tensor(bv, requires_grad=True)
    T.backward(T.reduce_sum(T.mul(a, b)))
    assert np.allclose(a.grad, bv, atol=1e-12)
    assert np.allclose(b.grad, av, atol=1e-12)


def test_dual_precision_switch():
    with T.using_dtype(np.float32):
        x = T.Tensor([1.0])
        assert x.data.dtype == np.float32
    y = T.Tensor([1.0])
    assert y.data.dtype == np.float64

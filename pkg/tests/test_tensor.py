"""Autodiff engine checks against central finite differences."""

import numpy as np
import pytest

from mimsieve.errors import ContractError, DimensionError, StateError
from mimsieve.tensor import (
    Tensor,
    add,
    backward,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    sub,
    take_rows,
    tmean,
    transpose,
    tsum,
)


def numeric_grad(f, arrays, which, h=1e-5):
    """Central finite differences of scalar f w.r.t. arrays[which], elementwise."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which])
    flat = base[which].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*base)
        flat[i] = orig - h
        fm = f(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, arrays, rtol=1e-6):
    """Compare analytic grads of scalar build(*tensors) with finite differences."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    backward(loss)

    def f(*arrs):
        ts = [Tensor(a) for a in arrs]
        return float(build(*ts).data)

    for k, t in enumerate(tensors):
        num = numeric_grad(f, arrays, k)
        denom = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-12)
        rel = np.abs(t.grad - num).max() / denom
        assert rel < rtol, f"operand {k}: rel err {rel:.3e}"


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(matmul(a, b).data, b.data)

    def test_zero_row_annihilates(self):
        a = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        b = Tensor(np.array([[0.0], [5.0]]))
        np.testing.assert_array_equal(matmul(a, b).data, np.zeros((2, 1)))

    def test_shape_mismatch_reports_both_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(a, b)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        check_grads(lambda x, y: tsum(matmul(x, y)), [a, b], rtol=1e-7)

    def test_batched_gradient(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((4, 5))
        check_grads(lambda x, y: tsum(matmul(x, y)), [a, b])

    def test_associativity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal((4, 5))
            b = rng.standard_normal((5, 6))
            c = rng.standard_normal((6, 3))
            left = (a @ b) @ c
            right = a @ (b @ c)
            rel = np.abs(left - right).max() / np.abs(left).max()
            assert rel < 1e-9


class TestElementwise:
    def test_add_identity(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        np.testing.assert_array_equal(add(x, np.zeros((2, 3))).data, x.data)

    def test_mul_identity(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        np.testing.assert_array_equal(mul(x, np.ones((2, 3))).data, x.data)

    def test_sub_self_cancels(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        np.testing.assert_array_equal(sub(x, x).data, np.zeros((2, 3)))

    def test_broadcast_backward_sums_leading_axes(self):
        a = np.ones((2, 3, 4))
        b = np.ones((3, 4))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        backward(tsum(add(ta, tb)))
        np.testing.assert_array_equal(tb.grad, np.full((3, 4), 2.0))

    def test_non_broadcastable_raises(self):
        with pytest.raises(DimensionError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_fanout_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = add(x, x)
        backward(tsum(y))
        np.testing.assert_array_equal(x.grad, np.array([2.0]))


class TestSoftmax:
    def test_uniform_on_equal_row(self):
        y = softmax(Tensor(np.zeros(3)))
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3), atol=1e-12)

    def test_saturation_with_max_subtraction(self):
        y = softmax(Tensor(np.array([1000.0, 0.0])))
        np.testing.assert_allclose(y.data, np.array([1.0, 0.0]), atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        y = softmax(Tensor(rng.standard_normal((5, 7))))
        np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(5), atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(4)
        w = rng.standard_normal(4)
        check_grads(lambda t: tsum(mul(softmax(t), Tensor(w))), [x])


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((1, 5), 7.0))
        g, b = Tensor(np.ones(5)), Tensor(np.zeros(5))
        np.testing.assert_allclose(layer_norm(x, g, b).data, np.zeros((1, 5)), atol=1e-12)

    def test_already_normalized_row(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        g, b = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = layer_norm(x, g, b, eps=1e-12)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 8))
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        w = rng.standard_normal((1, 8))

        def build(tx, tg, tb):
            return tsum(mul(layer_norm(tx, tg, tb), Tensor(w)))

        check_grads(build, [x, gamma, beta])


class TestGelu:
    def test_zero_fixed_point(self):
        assert gelu(Tensor(np.array(0.0))).item() == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor(np.array(10.0))).item() - 10.0) < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(8)
        w = rng.standard_normal(8)
        check_grads(lambda t: tsum(mul(gelu(t), Tensor(w))), [x])


class TestShapeOps:
    def test_reshape_transpose_roundtrip_gradient(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((4, 3, 2))

        def build(t):
            return tsum(mul(transpose(t, (2, 1, 0)), Tensor(w)))

        check_grads(build, [x])

    def test_take_rows_shared_table(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3), requires_grad=True)
        idx = np.array([[0, 2], [2, 2]])
        out = take_rows(x, idx)
        assert out.shape == (2, 2, 3)
        backward(tsum(out))
        # row 2 gathered three times, row 0 once, rows 1 and 3 never
        np.testing.assert_array_equal(x.grad.sum(axis=1), np.array([3.0, 0.0, 9.0, 0.0]))

    def test_take_rows_per_batch(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 5, 3))
        idx = np.array([[1, 1, 4], [0, 2, 3]])
        w = rng.standard_normal((2, 3, 3))

        def build(t):
            return tsum(mul(take_rows(t, idx), Tensor(w)))

        check_grads(build, [x])


class TestBackwardContract:
    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(add(x, x))

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = tsum(x)
        backward(loss)
        with pytest.raises(StateError):
            backward(loss)

    def test_all_leaves_populated(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        backward(tmean(matmul(a, b)))
        assert a.grad is not None and b.grad is not None


@pytest.mark.parametrize(
    "name",
    ["matmul", "add", "sub", "mul", "softmax", "layer_norm", "gelu", "take_rows", "reshape", "mean"],
)
def test_every_op_gradient_100_seeds(name):
    """Analytic vs central finite differences (h=1e-5, fp64), 100 seeds per op."""
    for seed in range(100):
        rng = np.random.default_rng(seed)
        if name == "matmul":
            a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
            check_grads(lambda x, y: tsum(matmul(x, y)), [a, b], rtol=1e-4)
        elif name in ("add", "sub", "mul"):
            op = {"add": add, "sub": sub, "mul": mul}[name]
            a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
            w = rng.standard_normal((3, 4))
            check_grads(lambda x, y: tsum(mul(op(x, y), Tensor(w))), [a, b], rtol=1e-4)
        elif name == "softmax":
            x = rng.standard_normal(5)
            w = rng.standard_normal(5)
            check_grads(lambda t: tsum(mul(softmax(t), Tensor(w))), [x], rtol=1e-4)
        elif name == "layer_norm":
            x, g, b = rng.standard_normal((2, 6)), rng.standard_normal(6), rng.standard_normal(6)
            w = rng.standard_normal((2, 6))
            check_grads(lambda tx, tg, tb: tsum(mul(layer_norm(tx, tg, tb), Tensor(w))), [x, g, b], rtol=1e-4)
        elif name == "gelu":
            x = rng.standard_normal(6)
            w = rng.standard_normal(6)
            check_grads(lambda t: tsum(mul(gelu(t), Tensor(w))), [x], rtol=1e-4)
        elif name == "take_rows":
            x = rng.standard_normal((5, 3))
            idx = rng.integers(0, 5, size=4)
            w = rng.standard_normal((4, 3))
            check_grads(lambda t: tsum(mul(take_rows(t, idx), Tensor(w))), [x], rtol=1e-4)
        elif name == "reshape":
            x = rng.standard_normal((2, 6))
            w = rng.standard_normal((3, 4))
            check_grads(lambda t: tsum(mul(reshape(t, (3, 4)), Tensor(w))), [x], rtol=1e-4)
        elif name == "mean":
            x = rng.standard_normal((3, 3))
            check_grads(lambda t: tmean(mul(t, t)), [x], rtol=1e-4)

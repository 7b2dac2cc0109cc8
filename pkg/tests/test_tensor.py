import math

import numpy as np
import pytest

from sinematch import tensor as T
from sinematch.errors import ShapeError
from sinematch.tensor import Tensor, backward, no_grad, trace, zero_grads

from conftest import check_gradients


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(T.matmul(a, b).data, b.data)

    def test_zero_operand(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]]))
        assert np.array_equal(out.data, [[0.0]])

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def conv_reference(x, w):
    """Direct sliding-window cross-correlation, padding 1."""
    n, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, f, h, wd))
    for ni in range(n):
        for fi in range(f):
            for i in range(h):
                for j in range(wd):
                    out[ni, fi, i, j] = np.sum(
                        xp[ni, :, i : i + 3, j : j + 3] * w[fi]
                    )
    return out


class TestConv2d:
    def test_zero_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        w = Tensor(np.zeros((4, 3, 3, 3)))
        assert np.all(T.conv2d(x, w).data == 0.0)

    def test_delta_kernel_identity(self, rng):
        x = Tensor(rng.standard_normal((2, 1, 5, 7)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(w))
        assert np.allclose(out.data, x.data, atol=1e-12)

    def test_delta_plus_right_neighbor(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        w[0, 0, 1, 2] = 1.0  # right neighbor tap
        out = T.conv2d(x, Tensor(w))
        expected = conv_reference(x.data, w)
        assert np.allclose(out.data, expected)
        assert out.data[0, 0, 1, 1] == 2.0
        assert out.data[0, 0, 1, 2] == 1.0

    def test_matches_reference_random(self, rng):
        x = rng.standard_normal((3, 4, 6, 5))
        w = rng.standard_normal((2, 4, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w))
        assert np.allclose(out.data, conv_reference(x, w), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_must_be_3x3(self):
        with pytest.raises(ShapeError, match="3x3"):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 3)))
        loss = T.softmax_cross_entropy(logits, [0, 2])
        assert loss.item() == pytest.approx(math.log(3.0), rel=1e-12)

    def test_near_one_hot(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 50.0
        loss = T.softmax_cross_entropy(Tensor(logits), [1])
        assert loss.item() < 1e-6

    def test_two_class_hand_value(self):
        loss = T.softmax_cross_entropy(Tensor([[0.0, math.log(3.0)]]), [0])
        assert loss.item() == pytest.approx(math.log(4.0), rel=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError, match="out of range"):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_weights_and_divisor(self):
        logits = Tensor(np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 0.0]]))
        per_row = T.per_row_cross_entropy(logits.data, [0, 1])
        loss = T.softmax_cross_entropy(
            logits, [0, 1], weights=np.array([0.0, 1.0]), divisor=4.0
        )
        assert loss.item() == pytest.approx(per_row[1] / 4.0, rel=1e-12)

    def test_rows_sum_to_one_and_nonnegative(self, rng):
        for _ in range(50):
            logits = rng.standard_normal((5, 4)) * rng.uniform(0.1, 30)
            p = T.softmax(logits)
            assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
            ce = T.per_row_cross_entropy(logits, rng.integers(0, 4, 5))
            assert np.all(ce >= 0.0)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        backward(T.tsum(x))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.tsum(T.mul(x, x)))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_random_chain_matches_finite_differences(self, rng):
        w = rng.standard_normal((3, 3))

        def make_loss(ts):
            h = T.matmul(ts["x"], Tensor(w))
            h = T.relu(h)
            h = T.mul(h, h)
            return T.tsum(h)

        check_gradients(make_loss, {"x": rng.standard_normal((2, 3))})

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(T.add(x, 1.0))

    def test_fanout_accumulates_both_branches(self):
        x = Tensor([1.0, 1.0], requires_grad=True)
        y = T.add(T.mul(x, 2.0), T.mul(x, 3.0))
        backward(T.tsum(y))
        assert np.allclose(x.grad, [5.0, 5.0])

    def test_grads_accumulate_across_calls_until_cleared(self):
        x = Tensor([1.0], requires_grad=True)
        backward(T.tsum(x))
        backward(T.tsum(x))
        assert np.allclose(x.grad, [2.0])
        zero_grads([x])
        assert x.grad is None

    def test_intermediate_requires_grad_tensor_gets_grad(self):
        x = Tensor([2.0], requires_grad=True)
        mid = T.mul(x, 3.0)
        backward(T.tsum(mid))
        assert np.allclose(mid.grad, [1.0])
        assert np.allclose(x.grad, [3.0])


class TestGradientSweeps:
    """Finite-difference property checks on random small tensors."""

    N_TRIALS = 5

    def test_unary_ops(self, rng):
        ops = {
            "relu": T.relu,
            "standardize": T.standardize,
            "flatten": lambda x: T.reshape(x, (x.size,)),
        }
        for name, op in ops.items():
            for _ in range(self.N_TRIALS):
                x = rng.standard_normal((2, 3, 4)) + 0.1  # keep relu off the kink
                r = Tensor(rng.standard_normal(op(Tensor(x)).shape))
                check_gradients(
                    lambda t, op=op, r=r: T.tsum(T.mul(op(t["x"]), r)), {"x": x}
                )

    def test_binary_ops(self, rng):
        for _ in range(self.N_TRIALS):
            check_gradients(
                lambda t: T.tsum(T.mul(T.add(t["a"], t["b"]), t["a"])),
                {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 2))},
            )
            check_gradients(
                lambda t: T.tsum(T.matmul(t["a"], t["b"])),
                {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((3, 4))},
            )

    def test_conv_grad(self, rng):
        for _ in range(self.N_TRIALS):
            r = rng.standard_normal((2, 2, 4, 4))
            check_gradients(
                lambda t: T.tsum(T.mul(T.conv2d(t["x"], t["w"]), Tensor(r))),
                {
                    "x": rng.standard_normal((2, 3, 4, 4)),
                    "w": rng.standard_normal((2, 3, 3, 3)),
                },
            )

    def test_pool_and_resample_grads(self, rng):
        for _ in range(self.N_TRIALS):
            r1 = rng.standard_normal((2, 2, 2, 2))
            check_gradients(
                lambda t: T.tsum(T.mul(T.mean_pool2x2(t["x"]), Tensor(r1))),
                {"x": rng.standard_normal((2, 2, 4, 4))},
            )
            r2 = rng.standard_normal((2, 2, 8, 8))
            check_gradients(
                lambda t: T.tsum(T.mul(T.upsample2x(t["x"]), Tensor(r2))),
                {"x": rng.standard_normal((2, 2, 4, 4))},
            )
            r3 = rng.standard_normal((3, 2))
            check_gradients(
                lambda t: T.tsum(T.mul(T.global_avg_pool(t["x"]), Tensor(r3))),
                {"x": rng.standard_normal((3, 2, 4, 4))},
            )

    def test_loss_grads(self, rng):
        for _ in range(self.N_TRIALS):
            targets = rng.integers(0, 3, 4)
            check_gradients(
                lambda t: T.softmax_cross_entropy(t["x"], targets),
                {"x": rng.standard_normal((4, 3))},
            )
            tgt = rng.standard_normal((2, 3))
            check_gradients(
                lambda t: T.mse(t["x"], Tensor(tgt)),
                {"x": rng.standard_normal((2, 3))},
            )

    def test_concat_grad(self, rng):
        r = rng.standard_normal((5, 3))
        check_gradients(
            lambda t: T.tsum(T.mul(T.concat([t["a"], t["b"]], axis=0), Tensor(r))),
            {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((3, 3))},
        )


class TestStructure:
    def test_scalar_broadcast_only(self):
        a = Tensor(np.ones((2, 2)))
        assert np.all(T.add(a, 1.5).data == 2.5)
        assert np.all(T.mul(a, 2.0).data == 2.0)
        with pytest.raises(ShapeError):
            T.add(a, Tensor(np.ones((2, 1))))
        with pytest.raises(ShapeError):
            T.mul(a, Tensor(np.ones(2)))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.ones((2, 3))), (4, 2))

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_mean_pool_requires_even_dims(self):
        with pytest.raises(ShapeError):
            T.mean_pool2x2(Tensor(np.ones((1, 1, 3, 4))))

    def test_no_grad_detaches(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad
        assert y._bwd is None

    def test_ops_deterministic(self, rng):
        x = rng.standard_normal((3, 4, 8, 8))
        w = rng.standard_normal((2, 4, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w)).data
        b = T.conv2d(Tensor(x), Tensor(w)).data
        assert np.array_equal(a, b)

    def test_finite_outputs_on_finite_inputs(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)) * 100)
        w = Tensor(rng.standard_normal((2, 3, 3, 3)) * 100)
        for out in [
            T.conv2d(x, w),
            T.standardize(x),
            T.relu(x),
            T.mean_pool2x2(x),
            T.softmax_cross_entropy(
                Tensor(rng.standard_normal((4, 3)) * 500), [0, 1, 2, 0]
            ),
        ]:
            assert np.all(np.isfinite(out.data))

    def test_trace_topological_order(self, rng):
        x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        y = T.mul(T.add(x, 1.0), x)
        graph = trace(T.tsum(y))
        seen = set()
        for idx in graph.order:
            op, parent_ids, _t = graph.nodes[idx]
            for pid in parent_ids:
                assert pid in seen, "input must precede its consumer"
            seen.add(idx)
        assert graph.nodes[-1][0] == "sum"

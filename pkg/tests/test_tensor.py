import numpy as np
import pytest

from poisonsieve import rng
from poisonsieve import tensor as T
from poisonsieve.errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    NumericOverflowError,
)
from poisonsieve.tensor import ComputeGraph, Tensor, backward, finite_difference_grad


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(np.abs(want).max(initial=0.0), 1e-8)
    return float(np.abs(got - want).max(initial=0.0) / scale)


def check_grad(f, x: Tensor, tol=1e-5, h=1e-5):
    x.grad = None
    loss = f(x)
    backward(loss)
    fd = finite_difference_grad(f, x, h=h)
    assert x.grad is not None
    assert rel_err(x.grad, fd.data) <= tol, f"grad mismatch: {rel_err(x.grad, fd.data)}"


class TestForwardExamples:
    def test_matmul_identity(self):
        a = Tensor([[1.5, -2.0], [0.25, 3.0]])
        eye = Tensor(np.eye(2))
        out = T.op_forward("matmul", eye, a)
        assert np.array_equal(out.data, a.data)

    def test_conv2d_identity_kernel(self):
        gen = rng.stream(0, "conv-id")
        x = Tensor(gen.normal(size=(2, 3, 5, 5)))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(k), stride=1, padding=0)
        assert np.allclose(out.data, x.data)

    def test_softmax_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((1, 4)))
        loss = T.softmax_cross_entropy(logits, np.array([2]))
        assert abs(loss.item() - np.log(4.0)) < 1e-12

    def test_forward_deterministic(self):
        gen = rng.stream(1, "det")
        x = gen.normal(size=(4, 3, 8, 8))
        w = gen.normal(size=(5, 3, 3, 3))
        a = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        b = T.conv2d(Tensor(x), Tensor(w), padding=1).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("h", [5, 8, 11])
    @pytest.mark.parametrize("k", [1, 3, 5])
    @pytest.mark.parametrize("s", [1, 2])
    @pytest.mark.parametrize("p", [0, 1, 2])
    def test_conv2d_output_shape_formula(self, h, k, s, p):
        if h + 2 * p < k:
            pytest.skip("kernel larger than padded input")
        x = Tensor(np.zeros((1, 2, h, h)))
        w = Tensor(np.zeros((4, 2, k, k)))
        out = T.conv2d(x, w, stride=s, padding=p)
        expect = (h + 2 * p - k) // s + 1
        assert out.shape == (1, 4, expect, expect)

    def test_avgpool_mean_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = T.avgpool2d(x, 2)
        assert np.allclose(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_per_channel_broadcast(self):
        x = Tensor(np.ones((2, 3, 2, 2)))
        b = Tensor(np.array([1.0, 2.0, 3.0]))
        out = T.add(x, b)
        assert np.allclose(out.data[:, 1], 3.0)
        feats = Tensor(np.zeros((4, 3)))
        out2 = T.add(feats, b)
        assert np.allclose(out2.data, [[1, 2, 3]] * 4)

    def test_rejects_general_broadcast(self):
        with pytest.raises(DimensionError, match="add"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_shape_error_names_operation(self):
        with pytest.raises(DimensionError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_overflow_is_an_error(self):
        big = Tensor(np.full((2, 2), 1e308))
        with pytest.raises(NumericOverflowError, match="mul"):
            T.mul(big, big)

    def test_unknown_kind(self):
        with pytest.raises(DimensionError, match="unknown operation"):
            T.op_forward("transmogrify", Tensor(np.ones(2)))


class TestBackward:
    def test_square_sum(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = T.sum_all(T.mul(x, x))
        grads = backward(loss)
        assert np.allclose(x.grad, [6.0])
        assert np.allclose(grads[x.id].data, [6.0])

    def test_constant_loss_zero_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = Tensor(np.asarray(5.0))
        grads = backward(loss, leaves=[x])
        assert np.allclose(grads[x.id].data, 0.0)
        assert np.allclose(x.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            backward(T.mul(x, x))

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = T.add(T.mul(x, x), T.mul(x, x))
        backward(T.sum_all(y))
        assert np.allclose(x.grad, [8.0])

    def test_no_grad_blocks_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y._parents == ()

    def test_compute_graph_records_in_order(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with ComputeGraph() as g:
            y = T.mul(x, x)
            loss = T.sum_all(y)
        assert [n.op for n in g.nodes] == ["mul", "sum"]
        g.validate()
        backward(loss, graph=g)
        assert np.allclose(x.grad, 2.0)


class TestFiniteDifference:
    def test_linear_function_all_ones(self):
        gen = rng.stream(2, "fd-lin")
        x = Tensor(gen.normal(size=(3, 2)))
        fd = finite_difference_grad(lambda t: T.sum_all(t), x, h=1e-5)
        assert rel_err(fd.data, np.ones((3, 2))) <= 1e-9

    def test_scalar_square(self):
        x = Tensor(np.asarray(3.0))
        fd = finite_difference_grad(lambda t: T.mul(t, t), x, h=1e-5)
        assert abs(fd.item() - 6.0) <= 1e-8

    def test_non_finite_evaluation_raises(self):
        x = Tensor(np.asarray(1.0))

        def explode(t):
            return Tensor(np.asarray(np.inf))

        with pytest.raises(NumericOverflowError):
            finite_difference_grad(explode, x)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ContractError, match="h > 0"):
            finite_difference_grad(lambda t: T.sum_all(t), Tensor(np.ones(2)), h=0.0)

    def test_softmax_ce_self_consistency(self):
        gen = rng.stream(3, "fd-ce")
        logits = Tensor(gen.normal(size=(4, 5)), requires_grad=True)
        labels = gen.integers(0, 5, size=4)

        def f(t):
            return T.softmax_cross_entropy(t, labels)

        check_grad(f, logits, tol=1e-6)


class TestPrimitiveGradients:
    """Backward vs central differences for each differentiable primitive."""

    def setup_method(self):
        self.gen = rng.stream(11, "prim-grad")

    def rand(self, shape, shift=0.0):
        return Tensor(self.gen.normal(size=shape) + shift, requires_grad=True)

    def test_add_mul_sub_neg(self):
        r = self.gen.normal(size=(3, 4))
        other = Tensor(self.gen.normal(size=(3, 4)))
        for op in (T.add, T.sub, T.mul):
            check_grad(lambda t, op=op: T.sum_all(T.mul(op(t, other), Tensor(r))), self.rand((3, 4)))
        check_grad(lambda t: T.sum_all(T.mul(T.neg(t), Tensor(r))), self.rand((3, 4)))

    def test_per_channel_sides(self):
        r4 = self.gen.normal(size=(2, 3, 2, 2))
        big = Tensor(self.gen.normal(size=(2, 3, 2, 2)))
        check_grad(lambda t: T.sum_all(T.mul(T.mul(big, t), Tensor(r4))), self.rand((3,)))
        chan = Tensor(self.gen.normal(size=(3,)))
        check_grad(lambda t: T.sum_all(T.mul(T.add(t, chan), Tensor(r4))),
                   self.rand((2, 3, 2, 2)))

    def test_matmul(self):
        b = Tensor(self.gen.normal(size=(4, 2)))
        r = self.gen.normal(size=(3, 2))
        check_grad(lambda t: T.sum_all(T.mul(T.matmul(t, b), Tensor(r))), self.rand((3, 4)))

    def test_conv2d_both_args(self):
        w = Tensor(self.gen.normal(size=(2, 3, 3, 3)))
        r = self.gen.normal(size=(1, 2, 4, 4))
        check_grad(lambda t: T.sum_all(T.mul(T.conv2d(t, w, padding=1), Tensor(r))),
                   self.rand((1, 3, 4, 4)))
        x = Tensor(self.gen.normal(size=(1, 3, 4, 4)))
        check_grad(lambda t: T.sum_all(T.mul(T.conv2d(x, t, padding=1), Tensor(r))),
                   self.rand((2, 3, 3, 3)))

    def test_conv2d_strided(self):
        w = Tensor(self.gen.normal(size=(2, 2, 3, 3)))
        check_grad(lambda t: T.sum_all(T.conv2d(t, w, stride=2, padding=1)), self.rand((1, 2, 6, 6)))

    def test_relu(self):
        check_grad(lambda t: T.sum_all(T.relu(t)), self.rand((3, 3), shift=0.3))

    def test_avgpool_flatten_mean0(self):
        check_grad(lambda t: T.sum_all(T.avgpool2d(t, 2)), self.rand((2, 2, 4, 4)))
        r = self.gen.normal(size=(2, 8))
        check_grad(lambda t: T.sum_all(T.mul(T.flatten(t), Tensor(r))), self.rand((2, 2, 2, 2)))
        r0 = self.gen.normal(size=(3,))
        check_grad(lambda t: T.sum_all(T.mul(T.mean_axis0(t), Tensor(r0))), self.rand((4, 3)))

    def test_affine_scale_shift_all_args(self):
        scale = Tensor(self.gen.normal(size=(3,)) + 2.0)
        shift = Tensor(self.gen.normal(size=(3,)))
        r = self.gen.normal(size=(2, 3, 2, 2))
        check_grad(lambda t: T.sum_all(T.mul(T.affine_scale_shift(t, scale, shift), Tensor(r))),
                   self.rand((2, 3, 2, 2)))
        x = Tensor(self.gen.normal(size=(2, 3, 2, 2)))
        check_grad(lambda t: T.sum_all(T.mul(T.affine_scale_shift(x, t, shift), Tensor(r))),
                   self.rand((3,)))
        check_grad(lambda t: T.sum_all(T.mul(T.affine_scale_shift(x, scale, t), Tensor(r))),
                   self.rand((3,)))

    def test_batch_norm_train_all_args(self):
        r = self.gen.normal(size=(3, 2, 2, 2))
        scale = Tensor(self.gen.normal(size=(2,)) + 1.5)
        shift = Tensor(self.gen.normal(size=(2,)))

        def f_x(t):
            out, _, _ = T.batch_norm_train(t, scale, shift)
            return T.sum_all(T.mul(out, Tensor(r)))

        check_grad(f_x, self.rand((3, 2, 2, 2)), tol=1e-4, h=1e-6)
        x = Tensor(self.gen.normal(size=(3, 2, 2, 2)))

        def f_scale(t):
            out, _, _ = T.batch_norm_train(x, t, shift)
            return T.sum_all(T.mul(out, Tensor(r)))

        check_grad(f_scale, self.rand((2,)))

    def test_cosine_similarity_both_args(self):
        b = Tensor(self.gen.normal(size=(6,)))
        check_grad(lambda t: T.cosine_similarity(t, b), self.rand((6,)))
        a = Tensor(self.gen.normal(size=(6,)))
        check_grad(lambda t: T.cosine_similarity(a, t), self.rand((6,)))

    def test_l2_norm(self):
        check_grad(lambda t: T.l2_norm(t), self.rand((5,), shift=1.0))

    def test_cosine_zero_norm_rejected(self):
        with pytest.raises(DegenerateVectorError):
            T.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))


class TestComposedNetwork:
    def test_conv_relu_linear_chain_matches_fd(self):
        gen = rng.stream(5, "chain")
        w1 = Tensor(gen.normal(size=(2, 1, 3, 3)) * 0.5)
        w2 = Tensor(gen.normal(size=(8, 3)) * 0.5)
        labels = np.array([1])

        def f(t):
            h = T.relu(T.conv2d(t, w1, padding=1))
            h = T.avgpool2d(h, 2)
            h = T.flatten(h)
            logits = T.matmul(h, w2)
            return T.softmax_cross_entropy(logits, labels)

        x = Tensor(gen.normal(size=(1, 1, 4, 4)), requires_grad=True)
        loss = f(x)
        backward(loss)
        fd = finite_difference_grad(f, x, h=1e-5)
        assert rel_err(x.grad, fd.data) <= 1e-6


class TestRng:
    def test_streams_are_deterministic(self):
        a = rng.stream(42, "alpha", 3).normal(size=5)
        b = rng.stream(42, "alpha", 3).normal(size=5)
        assert np.array_equal(a, b)

    def test_streams_differ_by_path(self):
        a = rng.stream(42, "alpha", 3).normal(size=5)
        b = rng.stream(42, "alpha", 4).normal(size=5)
        c = rng.stream(43, "alpha", 3).normal(size=5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

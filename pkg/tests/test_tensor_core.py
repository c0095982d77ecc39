"""Tests for the tensor engine and its differentiable operations."""

import math

import numpy as np
import pytest

from ske2grid.errors import ConfigError, DataError, DimensionError, NonFiniteError
from ske2grid.functional import (
    BN_EPS,
    batchnorm,
    conv2d_same,
    global_avg_pool,
    graph_conv,
    graph_conv_forward,
    linear,
    matmul,
    mix_nodes,
    relu,
    softmax_cross_entropy,
    temporal_conv,
)
from ske2grid.tensor import Tensor, no_grad, tensor


def conv2d_oracle(x, k, bias):
    b, cin, h, w = x.shape
    cout, _, size, _ = k.shape
    pad = (size - 1) // 2
    xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    out = np.zeros((b, cout, h, w))
    for n in range(b):
        for o in range(cout):
            for i in range(h):
                for j in range(w):
                    total = bias[o]
                    for c in range(cin):
                        for m in range(size):
                            for q in range(size):
                                total += k[o, c, m, q] * xp[n, c, i + m, j + q]
                    out[n, o, i, j] = total
    return out


def temporal_oracle(x, k, stride):
    b, c, t, h, w = x.shape
    cout, _, size = k.shape
    pad = (size - 1) // 2
    t_out = math.ceil(t / stride)
    out = np.zeros((b, cout, t_out, h, w))
    for n in range(b):
        for o in range(cout):
            for s in range(t_out):
                for m in range(size):
                    src = s * stride + m - pad
                    if 0 <= src < t:
                        for ci in range(c):
                            out[n, o, s] += k[o, ci, m] * x[n, ci, src]
    return out


def graph_conv_oracle(x, w, adjacency):
    b, cin, t, n = x.shape
    cout = w.shape[1]
    edges = list(zip(*np.nonzero(adjacency)))
    out = np.zeros((b, cout, t, n))
    for e, (i, j) in enumerate(edges):
        for o in range(cout):
            for c in range(cin):
                out[:, o, :, i] += w[e, o, c] * x[:, c, :, j]
    return out


class TestTensor:
    """Tensor construction, dtypes and the backward tape."""

    def test_default_dtype_is_f64_for_python_values(self):
        """Integer and list inputs become f64 tensors."""
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_unsupported_dtype_rejected(self):
        """Only f32 and f64 are supported."""
        with pytest.raises(ConfigError):
            Tensor([1.0], dtype="int32")

    def test_sum_of_squares_gradient(self):
        """d/dx sum(x*x) = 2x."""
        x = tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_shared_input_accumulates(self):
        """A tensor used twice receives both gradient contributions."""
        x = tensor([3.0], requires_grad=True)
        (x + x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [3.0])

    def test_backward_requires_scalar_without_seed(self):
        """Non-scalar outputs need an explicit seed gradient."""
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_no_grad_skips_recording(self):
        """Outputs computed under no_grad carry no tape."""
        x = tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad and y.is_leaf

    def test_forward_identical_with_and_without_grad(self, rng):
        """Recording the tape does not change forward values."""
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3, 2))
        with_grad = matmul(tensor(a, requires_grad=True), tensor(b, requires_grad=True))
        without = matmul(tensor(a), tensor(b))
        assert np.array_equal(with_grad.data, without.data)

    def test_linearity_of_backward(self, rng):
        """Backward of L1 + L2 equals backward of L1 plus backward of L2."""
        a = rng.normal(size=(3, 3))
        r1, r2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))

        def grad_of(*weights):
            x = tensor(a, requires_grad=True)
            y = matmul(x, x)
            total = None
            for r in weights:
                term = (y * tensor(r)).sum()
                total = term if total is None else total + term
            total.backward()
            return x.grad

        np.testing.assert_allclose(grad_of(r1, r2), grad_of(r1) + grad_of(r2), atol=1e-10)

    def test_mixed_dtypes_rejected(self):
        """Operands of one op must share a dtype."""
        with pytest.raises(DimensionError):
            Tensor([1.0], "f32") + Tensor([1.0], "f64")

    def test_non_finite_forward_raises(self):
        """An op producing Inf is an error state."""
        big = tensor([1e308])
        with pytest.raises(NonFiniteError):
            big * 10.0

    def test_reshape_and_permute_gradients(self, rng):
        """Shape ops route gradients back to the original layout."""
        x = tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        weights = rng.normal(size=(4, 2, 3))
        (x.permute(2, 0, 1) * tensor(weights)).sum().backward()
        np.testing.assert_allclose(x.grad, weights.transpose(1, 2, 0))


class TestMatmul:
    """Matrix product."""

    def test_identity(self):
        """I₂ · M = M."""
        out = matmul(tensor(np.eye(2)), tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_row_selection_and_average(self):
        """Rows of the left operand select or average rows of the right one."""
        out = matmul(tensor([[1, 0], [0, 1], [0.5, 0.5]]), tensor([[1.0], [2.0]]))
        np.testing.assert_allclose(out.data, [[1], [2], [1.5]])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        """Random shapes agree with the triple loop to 1e-12."""
        rng = np.random.default_rng(seed)
        m, k, n = rng.integers(1, 8, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        oracle = np.array(
            [[sum(a[i, p] * b[p, j] for p in range(k)) for j in range(n)] for i in range(m)]
        )
        np.testing.assert_allclose(matmul(tensor(a), tensor(b)).data, oracle, atol=1e-12)

    def test_gradients(self, rng):
        """grad_a = G·bᵀ and grad_b = aᵀ·G."""
        a = tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        matmul(a, b).backward(g)
        np.testing.assert_allclose(a.grad, g @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ g)

    def test_shape_mismatch(self):
        """Inner extents must agree."""
        with pytest.raises(DimensionError):
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))

    def test_mix_nodes_applies_per_batch_and_frame(self, rng):
        """M·x on the node axis equals a matmul for every leading index."""
        m = rng.normal(size=(5, 3))
        x = rng.normal(size=(2, 4, 3, 6))
        out = mix_nodes(tensor(m), tensor(x)).data
        np.testing.assert_allclose(out[1, 2], m @ x[1, 2], atol=1e-12)


class TestConv2dSame:
    """Zero-padded square convolution."""

    def test_all_ones_kernel(self):
        """Every cell of a 2×2 input sits inside every 3×3 window."""
        x = tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        out = conv2d_same(x, tensor(np.ones((1, 1, 3, 3))), tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data[0, 0], [[10, 10], [10, 10]])

    def test_identity_kernel(self, rng):
        """A centre-one kernel reproduces the input."""
        x = rng.normal(size=(2, 1, 4, 5))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = conv2d_same(tensor(x), tensor(k), tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        """Shape-fuzzed instances agree with the naive loops to 1e-12."""
        rng = np.random.default_rng(seed)
        b, cin, cout = rng.integers(1, 3, size=3)
        h, w = rng.integers(1, 6, size=2)
        size = int(rng.choice([1, 3, 5]))
        x = rng.normal(size=(b, cin, h, w))
        k = rng.normal(size=(cout, cin, size, size))
        bias = rng.normal(size=cout)
        out = conv2d_same(tensor(x), tensor(k), tensor(bias)).data
        np.testing.assert_allclose(out, conv2d_oracle(x, k, bias), atol=1e-12)

    def test_even_kernel_is_config_error(self):
        """Even kernels cannot keep the grid size."""
        with pytest.raises(ConfigError):
            conv2d_same(tensor(np.ones((1, 1, 3, 3))), tensor(np.ones((1, 1, 2, 2))), tensor(np.zeros(1)))


class TestTemporalConv:
    """1-D convolution along time at every grid cell."""

    def test_unit_kernel_is_identity(self, rng):
        """Kt=1 with weight 1 leaves the input unchanged."""
        x = rng.normal(size=(1, 1, 5, 2, 2))
        out = temporal_conv(tensor(x), tensor(np.ones((1, 1, 1))))
        np.testing.assert_allclose(out.data, x)

    def test_constant_input_boundaries(self):
        """Interior frames see 3c, the zero-padded boundary frames 2c."""
        x = np.full((1, 1, 5, 1, 1), 2.0)
        out = temporal_conv(tensor(x), tensor(np.ones((1, 1, 3)))).data[0, 0, :, 0, 0]
        np.testing.assert_allclose(out, [4, 6, 6, 6, 4])

    def test_stride_two_halves_with_ceiling(self, rng):
        """T' = ceil(T / stride)."""
        x = rng.normal(size=(1, 2, 7, 1, 1))
        out = temporal_conv(tensor(x), tensor(rng.normal(size=(3, 2, 3))), stride=2)
        assert out.shape == (1, 3, 4, 1, 1)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_loop_oracle(self, seed):
        """Shape-fuzzed instances agree with the naive loops to 1e-12."""
        rng = np.random.default_rng(seed)
        b, c, cout = rng.integers(1, 3, size=3)
        t = int(rng.integers(1, 9))
        h, w = rng.integers(1, 3, size=2)
        size = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(b, c, t, h, w))
        k = rng.normal(size=(cout, c, size))
        out = temporal_conv(tensor(x), tensor(k), stride).data
        np.testing.assert_allclose(out, temporal_oracle(x, k, stride), atol=1e-12)

    def test_zero_stride_is_config_error(self):
        """Stride below one is rejected."""
        with pytest.raises(ConfigError):
            temporal_conv(tensor(np.ones((1, 1, 4, 1, 1))), tensor(np.ones((1, 1, 1))), stride=0)


class TestBatchNorm:
    """Per-channel normalization."""

    def test_standardized_input_passes_through(self, rng):
        """gamma=1, beta=0 on zero-mean unit-variance channels is ≈ identity."""
        x = rng.normal(size=(64, 2, 3))
        x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
        out = batchnorm(
            tensor(x), tensor(np.ones(2)), tensor(np.zeros(2)), np.zeros(2), np.ones(2), True
        )
        np.testing.assert_allclose(out.data, x, atol=1e-4)

    def test_constant_input_gives_beta(self):
        """Zero variance: epsilon dominates and the output is beta."""
        beta = np.array([0.5, -1.0])
        out = batchnorm(
            tensor(np.full((4, 2, 3), 7.0)), tensor(np.ones(2)), tensor(beta), np.zeros(2), np.ones(2), True
        )
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None], (4, 2, 3)), atol=1e-6)

    def test_running_stats_momentum(self):
        """Running mean moves 10% of the way to the batch mean."""
        running_mean, running_var = np.zeros(1), np.ones(1)
        batchnorm(
            tensor(np.full((2, 1, 2), 3.0)), tensor(np.ones(1)), tensor(np.zeros(1)),
            running_mean, running_var, True,
        )
        np.testing.assert_allclose(running_mean, [0.3])
        np.testing.assert_allclose(running_var, [0.9])

    def test_eval_uses_running_stats(self):
        """Eval mode normalizes by the stored statistics and leaves them alone."""
        running_mean, running_var = np.array([1.0]), np.array([4.0])
        out = batchnorm(
            tensor(np.full((1, 1, 1), 5.0)), tensor(np.ones(1)), tensor(np.zeros(1)),
            running_mean, running_var, False,
        )
        np.testing.assert_allclose(out.data, [[[4.0 / math.sqrt(4.0 + BN_EPS)]]])
        np.testing.assert_allclose(running_mean, [1.0])


class TestHeadOps:
    """relu, pooling, linear and the loss."""

    def test_relu(self):
        """relu(−1)=0, relu(2)=2."""
        np.testing.assert_array_equal(relu(tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_global_avg_pool(self):
        """Averages over every axis after channels."""
        x = np.arange(24, dtype=float).reshape(1, 2, 3, 4)
        np.testing.assert_allclose(global_avg_pool(tensor(x)).data, [[5.5, 17.5]])

    def test_linear(self, rng):
        """x·Wᵀ + b."""
        x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        np.testing.assert_allclose(linear(tensor(x), tensor(w), tensor(b)).data, x @ w.T + b)

    def test_uniform_logits_loss_is_log_k(self):
        """Uniform logits over 5 classes give ln 5."""
        loss = softmax_cross_entropy(tensor(np.zeros((3, 5))), np.array([0, 2, 4]))
        assert loss.item() == pytest.approx(math.log(5))

    def test_label_out_of_range(self):
        """Labels must index a class."""
        with pytest.raises(DataError):
            softmax_cross_entropy(tensor(np.zeros((1, 3))), np.array([3]))


class TestGraphConv:
    """Node-specific graph convolution."""

    def test_path_graph_hand_computation(self):
        """Path 1–2–3 with self-loops, unit weights: f(v₂)=6, f(v₁)=3."""
        adjacency = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]])
        x = tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
        w = tensor(np.ones((7, 1, 1)))
        out = graph_conv_forward(x, adjacency, w).data[0, 0, 0]
        np.testing.assert_allclose(out, [3.0, 6.0, 5.0])

    def test_self_loops_only_is_per_node_linear(self, rng):
        """A = I applies each node's own weight matrix."""
        x = rng.normal(size=(2, 3, 4, 5))
        w = rng.normal(size=(5, 2, 3))
        out = graph_conv(tensor(x), tensor(w), np.eye(5)).data
        for node in range(5):
            np.testing.assert_allclose(
                out[:, :, :, node], np.einsum("oc,bct->bot", w[node], x[:, :, :, node]), atol=1e-12
            )

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_neighbour_sum_oracle(self, seed):
        """Random graphs agree with the explicit neighbour loop to 1e-12."""
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        adjacency = (rng.uniform(size=(n, n)) < 0.4).astype(int)
        adjacency = np.maximum(adjacency, adjacency.T)
        np.fill_diagonal(adjacency, 1)
        edges = int(adjacency.sum())
        cin, cout = rng.integers(1, 4, size=2)
        x = rng.normal(size=(2, cin, 3, n))
        w = rng.normal(size=(edges, cout, cin))
        out = graph_conv(tensor(x), tensor(w), adjacency).data
        np.testing.assert_allclose(out, graph_conv_oracle(x, w, adjacency), atol=1e-12)

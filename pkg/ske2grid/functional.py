"""Differentiable operations used by the Ske2Grid pipeline.

Convolutions are computed with strided window views (``im2col`` without the
copy) and ``np.tensordot``; the naive loop versions live in the test suite as
oracles.
"""

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError
from .tensor import Function, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


# --- products ---------------------------------------------------------------


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} · {b.shape}")
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return grad @ b.T, a.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[M×K] · b[K×N]``."""
    return MatMul.apply(a, b)


class MixNodes(Function):
    """Apply one matrix to the node axis of a batched feature: ``M[P×N] · x[..., N, C]``."""

    @staticmethod
    def forward(ctx, m, x):
        if m.ndim != 2 or x.ndim < 2 or x.shape[-2] != m.shape[1]:
            raise DimensionError(
                f"node mixing needs M[P×N] and x[..., N, C]; got {m.shape} and {x.shape}"
            )
        ctx.save_for_backward(m, x)
        return np.matmul(m, x)

    @staticmethod
    def backward(ctx, grad):
        m, x = ctx.saved
        grad_m = node_mixing_weight_grad(grad, x)
        grad_x = np.matmul(m.T, grad)
        return grad_m, grad_x


def node_mixing_weight_grad(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Σ over leading axes of ``grad[..., P, C] · x[..., N, C]ᵀ``."""
    p, c = grad.shape[-2:]
    n = x.shape[-2]
    return np.tensordot(grad.reshape(-1, p, c), x.reshape(-1, n, c), axes=([0, 2], [0, 2]))


def mix_nodes(m: Tensor, x: Tensor) -> Tensor:
    return MixNodes.apply(m, x)


# --- convolutions -----------------------------------------------------------


def _check_odd(kernel: int, what: str) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"{what} must be a positive odd number, got {kernel}", what)


class Conv2dSame(Function):
    @staticmethod
    def forward(ctx, x, k, bias):
        if x.ndim != 4 or k.ndim != 4 or bias.ndim != 1:
            raise DimensionError(
                f"conv2d_same expects x[B,Cin,H,W], k[Cout,Cin,K,K], bias[Cout]; "
                f"got {x.shape}, {k.shape}, {bias.shape}"
            )
        cout, cin, kh, kw = k.shape
        if kh != kw:
            raise DimensionError(f"conv2d_same needs a square kernel, got {kh}×{kw}")
        _check_odd(kh, "spatial_kernel")
        if x.shape[1] != cin or bias.shape[0] != cout:
            raise DimensionError(
                f"conv2d_same channel mismatch: x {x.shape}, k {k.shape}, bias {bias.shape}"
            )
        pad = (kh - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,Cin,H,W,K,K
        out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,Cout
        out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
        ctx.save_for_backward(windows, k, x.shape, pad)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, grad):
        windows, k, x_shape, pad = ctx.saved
        _, _, h, w = x_shape
        kh = k.shape[2]
        grad_k = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))  # Cout,Cin,K,K
        grad_bias = grad.sum(axis=(0, 2, 3))
        grad_xp = np.zeros((x_shape[0], x_shape[1], h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
        for m in range(kh):
            for n in range(kh):
                contribution = np.tensordot(grad, k[:, :, m, n], axes=([1], [0]))  # B,H,W,Cin
                grad_xp[:, :, m : m + h, n : n + w] += contribution.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w]
        return np.ascontiguousarray(grad_x), grad_k, grad_bias


def conv2d_same(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded K×K convolution keeping the spatial size of ``x``."""
    return Conv2dSame.apply(x, k, bias)


def temporal_output_length(frames: int, stride: int) -> int:
    return math.ceil(frames / stride)


class TemporalConv(Function):
    @staticmethod
    def forward(ctx, x, k, stride):
        if x.ndim != 5 or k.ndim != 3:
            raise DimensionError(
                f"temporal_conv expects x[B,C,T,H,W] and k[Cout,C,Kt]; got {x.shape}, {k.shape}"
            )
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}", "temporal_stride")
        cout, cin, kt = k.shape
        _check_odd(kt, "temporal_kernel")
        if x.shape[1] != cin:
            raise DimensionError(f"temporal_conv channel mismatch: x {x.shape}, k {k.shape}")
        pad = (kt - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (0, 0), (0, 0)))
        windows = sliding_window_view(xp, kt, axis=2)[:, :, ::stride]  # B,C,T',H,W,Kt
        out = np.tensordot(windows, k, axes=([1, 5], [1, 2]))  # B,T',H,W,Cout
        ctx.save_for_backward(windows, k, x.shape, pad, stride)
        return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))

    @staticmethod
    def backward(ctx, grad):
        windows, k, x_shape, pad, stride = ctx.saved
        b, c, frames, h, w = x_shape
        kt = k.shape[2]
        t_out = grad.shape[2]
        grad_k = np.tensordot(grad, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # Cout,C,Kt
        grad_xp = np.zeros((b, c, frames + 2 * pad, h, w), dtype=grad.dtype)
        last = stride * (t_out - 1) + 1
        for m in range(kt):
            contribution = np.tensordot(grad, k[:, :, m], axes=([1], [0]))  # B,T',H,W,C
            grad_xp[:, :, m : m + last : stride] += contribution.transpose(0, 4, 1, 2, 3)
        grad_x = grad_xp[:, :, pad : pad + frames]
        return np.ascontiguousarray(grad_x), grad_k


class ChannelBias(Function):
    """Add a per-channel bias along axis 1."""

    @staticmethod
    def forward(ctx, x, bias):
        if bias.ndim != 1 or x.shape[1] != bias.shape[0]:
            raise DimensionError(f"bias {bias.shape} does not match channels of {x.shape}")
        ctx.save_for_backward(x.ndim)
        return x + bias.reshape((1, -1) + (1,) * (x.ndim - 2))

    @staticmethod
    def backward(ctx, grad):
        (ndim,) = ctx.saved
        axes = (0,) + tuple(range(2, ndim))
        return grad, grad.sum(axis=axes)


def temporal_conv(x: Tensor, k: Tensor, stride: int = 1, bias: Optional[Tensor] = None) -> Tensor:
    """1-D convolution along T at every grid cell, zero padded, ``T' = ceil(T/stride)``."""
    out = TemporalConv.apply(x, k, stride=stride)
    return ChannelBias.apply(out, bias) if bias is not None else out


# --- normalization and activations -------------------------------------------


class BatchNorm(Function):
    @staticmethod
    def forward(ctx, x, gamma, beta, running_mean, running_var, training, momentum, eps):
        channels = x.shape[1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise DimensionError(f"batchnorm parameters {gamma.shape} do not match x {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        view = (1, -1) + (1,) * (x.ndim - 2)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var
        else:
            mean = running_mean.astype(x.dtype)
            var = running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(view)) * inv_std.reshape(view)
        ctx.save_for_backward(xhat, gamma, inv_std, axes, view, training)
        return xhat * gamma.reshape(view) + beta.reshape(view)

    @staticmethod
    def backward(ctx, grad):
        xhat, gamma, inv_std, axes, view, training = ctx.saved
        grad_gamma = (grad * xhat).sum(axis=axes)
        grad_beta = grad.sum(axis=axes)
        dxhat = grad * gamma.reshape(view)
        if training:
            count = xhat.size // xhat.shape[1]
            grad_x = (
                inv_std.reshape(view)
                / count
                * (
                    count * dxhat
                    - dxhat.sum(axis=axes).reshape(view)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(view)
                )
            )
        else:
            grad_x = dxhat * inv_std.reshape(view)
        return grad_x, grad_gamma, grad_beta


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel (axis 1) normalization; updates the running buffers in place when training."""
    return BatchNorm.apply(
        x,
        gamma,
        beta,
        running_mean=running_mean,
        running_var=running_var,
        training=training,
        momentum=momentum,
        eps=eps,
    )


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx.save_for_backward(mask)
        return np.where(mask, x, x.dtype.type(0))

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved
        return (np.where(mask, grad, grad.dtype.type(0)),)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class GlobalAvgPool(Function):
    @staticmethod
    def forward(ctx, x):
        if x.ndim < 3:
            raise DimensionError(f"global_avg_pool expects x[B,C,...], got {x.shape}")
        axes = tuple(range(2, x.ndim))
        ctx.save_for_backward(x.shape, axes)
        return x.mean(axis=axes)

    @staticmethod
    def backward(ctx, grad):
        shape, axes = ctx.saved
        count = int(np.prod([shape[a] for a in axes]))
        expanded = grad.reshape(grad.shape + (1,) * len(axes)) / grad.dtype.type(count)
        return (np.ascontiguousarray(np.broadcast_to(expanded, shape)),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over every axis after the channel axis (T, H, W for grid features)."""
    return GlobalAvgPool.apply(x)


class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
            raise DimensionError(
                f"linear expects x[B,Din], w[Dout,Din], b[Dout]; got {x.shape}, {w.shape}, {b.shape}"
            )
        ctx.save_for_backward(x, w)
        return x @ w.T + b[None, :]

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx.saved
        return grad @ w, grad.T @ x, grad.sum(axis=0)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


class SoftmaxCrossEntropy(Function):
    @staticmethod
    def forward(ctx, logits, labels):
        if logits.ndim != 2:
            raise DimensionError(f"logits must be [B,K], got {logits.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        batch, classes = logits.shape
        if labels.shape != (batch,):
            raise DimensionError(f"labels shape {labels.shape} != ({batch},)")
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise DataError(f"label index out of range [0, {classes}): {labels.tolist()}")
        logp = log_softmax(logits)
        ctx.save_for_backward(logp, labels)
        return np.asarray(-logp[np.arange(batch), labels].mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        logp, labels = ctx.saved
        batch = logp.shape[0]
        d = np.exp(logp)
        d[np.arange(batch), labels] -= 1.0
        return (d * (grad / batch),)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


# --- graph convolution --------------------------------------------------------


class GraphConv(Function):
    """Node-specific weights over each node's neighbour set.

    ``targets[e]``/``sources[e]`` list the nonzero entries of the adjacency
    (self-loops included); ``w[e]`` is the ``Cout×Cin`` weight applied to the
    source feature when accumulating into the target node.
    """

    @staticmethod
    def forward(ctx, x, w, targets, sources, n_nodes):
        if x.ndim != 4 or x.shape[3] != n_nodes:
            raise DimensionError(f"graph_conv expects x[B,Cin,T,{n_nodes}], got {x.shape}")
        if w.ndim != 3 or w.shape[0] != len(targets) or w.shape[2] != x.shape[1]:
            raise DimensionError(
                f"graph_conv weight must be [{len(targets)},Cout,{x.shape[1]}], got {w.shape}"
            )
        gathered = x[:, :, :, sources]  # B,Cin,T,E
        per_edge = np.einsum("bcte,eoc->bote", gathered, w)  # B,Cout,T,E
        scatter = np.zeros((len(targets), n_nodes), dtype=x.dtype)
        scatter[np.arange(len(targets)), targets] = 1.0
        ctx.save_for_backward(gathered, w, scatter, sources, x.shape)
        return np.tensordot(per_edge, scatter, axes=([3], [0]))  # B,Cout,T,N

    @staticmethod
    def backward(ctx, grad):
        gathered, w, scatter, sources, x_shape = ctx.saved
        grad_edge = np.tensordot(grad, scatter, axes=([3], [1]))  # B,Cout,T,E
        grad_w = np.einsum("bote,bcte->eoc", grad_edge, gathered)
        grad_gathered = np.einsum("bote,eoc->bcte", grad_edge, w)
        grad_x = np.zeros(x_shape, dtype=grad.dtype)
        np.add.at(grad_x, (slice(None), slice(None), slice(None), sources), grad_gathered)
        return grad_x, grad_w


def graph_conv(
    x: Tensor,
    w: Tensor,
    adjacency: np.ndarray,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Graph convolution: ``f_out(v_i) = Σ_{j: A[i,j]=1} w_{i,j} · x_j``.

    Edge order follows ``np.nonzero(adjacency)`` (row-major), so ``w[e]``
    belongs to the e-th nonzero entry.
    """
    targets, sources = np.nonzero(np.asarray(adjacency))
    out = GraphConv.apply(x, w, targets=targets, sources=sources, n_nodes=adjacency.shape[0])
    return ChannelBias.apply(out, bias) if bias is not None else out


def graph_conv_forward(x: Tensor, A: np.ndarray, W_node: Tensor) -> Tensor:
    return graph_conv(x, W_node, A)

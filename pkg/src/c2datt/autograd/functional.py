"""Differentiable kernels used by the network.

Convolution, normalization and pooling have hand-written backward passes;
everything else is composed from :class:`Tensor` primitives.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_array, make_op, unbroadcast

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STD_EPS = 1e-8


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# convolution / affine
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with square kernels.

    Columns are gathered as a (Cin*k*k, N*H'*W') matrix so that the whole
    layer is one matrix product; the backward pass scatters the column
    gradient back with ``k*k`` strided adds.
    """
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d needs padding >= 0 and stride >= 1")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output size {ho}x{wo} is not positive for input {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((cin, k, k, n, ho, wo), dtype=xd.dtype)
    h_end, w_end = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xd[:, :, i:i + h_end:stride, j:j + w_end:stride].transpose(1, 0, 2, 3)
    cols2d = cols.reshape(cin * k * k, n * ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = (wmat @ cols2d).reshape(cout, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(cout, 1, 1, 1)
    out = out.transpose(1, 0, 2, 3)

    padded_shape = xd.shape

    def grad_fn(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2d @ cols2d.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2d.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2d).reshape(cin, k, k, n, ho, wo)
            gxp = np.zeros((cin, n) + padded_shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h_end:stride, j:j + w_end:stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_op(out, parents, grad_fn, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for 2-D ``x``."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: x {x.shape}, weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias
    return out


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), grad_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------------
# normalization and statistics
# ---------------------------------------------------------------------------

def _normalize_grad(g: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    """Gradient of ``(x - mean) * inv_std`` w.r.t. x, given dL/dxhat."""
    return inv_std * (g - g.mean(axis=axes, keepdims=True)
                      - xhat * (g * xhat).mean(axis=axes, keepdims=True))


def batch_norm_2d(x: Tensor, gamma: Tensor, beta: Tensor,
                  running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
                  training: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization of an NCHW tensor.

    In training mode the batch statistics normalize the input and the
    running buffers (when given) are updated in place with the unbiased
    batch variance.  In eval mode the running buffers are used.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 4:
        raise ValueError(f"batch_norm_2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm_2d affine shape mismatch for {c} channels")
    axes = (0, 2, 3)
    xd = x.data
    if training:
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if count < 2:
            raise ValueError("batch_norm_2d in train mode needs at least two values per channel")
        mean = xd.mean(axis=axes, keepdims=True)
        centered = xd - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * count / (count - 1)
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm_2d eval mode requires running statistics")
        mean = running_mean.reshape(1, c, 1, 1).astype(xd.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(xd.dtype)
        centered = xd - mean
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def grad_fn(gout):
        gg = (gout * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = gout.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = gout * g4
            gx = _normalize_grad(gxhat, xhat, inv_std, axes) if training else gxhat * inv_std
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), grad_fn, "batch_norm_2d")


def instance_norm_freq(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize every (sample, frequency bin) row of an (N, F, T) input over time."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 3:
        raise ValueError(f"instance_norm_freq expects (N, F, T), got {x.shape}")
    n, f, t = x.shape
    if t < 2:
        raise ValueError("instance_norm_freq needs at least two frames")
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ValueError(f"instance_norm_freq affine shape mismatch for {f} bins")
    xd = x.data
    mean = xd.mean(axis=2, keepdims=True)
    centered = xd - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    g3 = gamma.data.reshape(1, f, 1)
    out = xhat * g3 + beta.data.reshape(1, f, 1)

    def grad_fn(gout):
        gg = (gout * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gb = gout.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = _normalize_grad(gout * g3, xhat, inv_std, 2) if x.requires_grad else None
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), grad_fn, "instance_norm_freq")


def reduce_moments(x: Tensor, axes: int | Sequence[int], keepdims: bool = False,
                   eps: float = STD_EPS) -> tuple[Tensor, Tensor]:
    """Mean and population standard deviation over ``axes``.

    The deviation is ``sqrt(var + eps)`` so its gradient stays bounded when
    the input is constant along the reduced axes.
    """
    x = _wrap(x)
    if isinstance(axes, int):
        axes = (axes,)
    if len(axes) == 0:
        raise ValueError("reduce_moments needs at least one axis")
    axes = tuple(sorted(a % x.ndim for a in axes))
    count = int(np.prod([x.shape[a] for a in axes]))
    xd = x.data
    mean = xd.mean(axis=axes, keepdims=True)
    centered = xd - mean
    std = np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    out_mean = mean if keepdims else mean.squeeze(axes)
    out_std = std if keepdims else std.squeeze(axes)

    def mean_grad(g):
        g = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, xd.shape).copy(),)

    def std_grad(g):
        g = g if keepdims else np.expand_dims(g, axes)
        return (g * centered / (count * std),)

    return (make_op(out_mean, (x,), mean_grad, "moments_mean"),
            make_op(out_std, (x,), std_grad, "moments_std"))


def broadcast_mul(x: Tensor, w: Tensor) -> Tensor:
    """Element-wise product where ``w`` matches ``x`` except for size-1 axes."""
    x, w = _wrap(x), _wrap(w)
    if w.ndim != x.ndim:
        raise ValueError(f"broadcast_mul needs equal rank, got {x.shape} and {w.shape}")
    for a, b in zip(x.shape, w.shape):
        if b not in (1, a):
            raise ValueError(f"shape {w.shape} does not broadcast to {x.shape}")
    return x * w


# ---------------------------------------------------------------------------
# misc
# ---------------------------------------------------------------------------

def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def grad_fn(g):
        return (unbroadcast(np.where(cond, g, 0), a.shape) if a.requires_grad else None,
                unbroadcast(np.where(cond, 0, g), b.shape) if b.requires_grad else None)

    return make_op(out, (a, b), grad_fn, "where")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _wrap(x)
    # floor the norm at eps; exact for any vector longer than eps
    norm = (x * x).sum(axis=axis, keepdims=True).clamp_min(eps * eps).sqrt()
    return x / norm


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError("labels must be a length-N vector of class indices in [0, K)")
    onehot = np.zeros((n, k), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)


def one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


__all__ = [
    "BN_EPS", "BN_MOMENTUM", "STD_EPS", "as_array", "batch_norm_2d", "broadcast_mul", "concat",
    "conv2d", "conv_output_size", "cross_entropy", "instance_norm_freq", "l2_normalize", "linear",
    "log_softmax", "one_hot", "reduce_moments", "relu", "sigmoid", "softmax", "stack", "tanh", "where",
]

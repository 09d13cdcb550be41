"""Differentiable operations on :class:`Tensor`.

Image tensors are laid out ``(N, C, H, W)``; a 3-D ``(C, H, W)`` input is
treated as a batch of one and returned without the batch axis. Every op
computes its forward value eagerly and, when a tape is active and an input
requires gradients, records a closure producing the input gradients.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, needs_record


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _result(data: np.ndarray, inputs, backward) -> Tensor:
    tape = needs_record(*inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    return _result(x * y, (a, b), lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _result(np.sum(a.data, dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of squared differences, the squared Frobenius norm for matrices."""
    if pred.shape != target.shape:
        raise ShapeError(f"sse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    two = pred.dtype.type(2)
    return _result(np.sum(diff * diff, dtype=pred.dtype), (pred, target),
                   lambda g: (two * g * diff, -two * g * diff))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Frobenius norm of ``pred - target`` (unsquared)."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    norm = np.sqrt(np.sum(diff * diff, dtype=np.float64))

    def backward(g):
        if norm == 0:
            z = np.zeros_like(diff)
            return z, z
        d = (g * diff / norm).astype(diff.dtype)
        return d, -d

    return _result(np.asarray(norm, dtype=pred.dtype), (pred, target), backward)


def channel_weighted_sse(pred: Tensor, target: Tensor, weights) -> Tensor:
    """``sum_c weights[c] * ||pred[:, c] - target[:, c]||^2``, summed over the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"channel_weighted_sse: pred {pred.shape} vs target {target.shape}")
    w = np.asarray(weights, dtype=pred.dtype)
    if pred.data.ndim < 2 or w.shape != (pred.shape[1],):
        raise ShapeError(f"channel_weighted_sse: {w.shape[0]} weights for channel axis of {pred.shape}")
    wb = w.reshape((1, -1) + (1,) * (pred.data.ndim - 2))
    diff = pred.data - target.data
    two = pred.dtype.type(2)
    return _result(np.sum(wb * diff * diff, dtype=pred.dtype), (pred, target),
                   lambda g: (two * g * wb * diff, -two * g * wb * diff))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _batched(x: Tensor, ndim: int, opname: str):
    if x.data.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != ndim:
        raise ShapeError(f"{opname}: expected a {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


def _unbatch(out: Tensor, squeezed: bool) -> Tensor:
    return reshape(out, out.shape[1:]) if squeezed else out


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution (cross-correlation) with zero padding of one pixel.

    ``kernels`` is ``(C_out, C_in, 3, 3)``, ``bias`` is ``(C_out,)``.
    """
    x, squeezed = _batched(x, 4, "conv2d")
    n, c_in, h, w = x.shape
    if kernels.data.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel spatial size must be 3x3, got kernel shape {kernels.shape}")
    c_out = kernels.shape[0]
    if kernels.shape[1] != c_in:
        raise ShapeError(f"conv2d: input has C_in={c_in} channels but kernels expect C_in={kernels.shape[1]}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c_in, 9, h, w), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di * 3 + dj] = xp[:, :, di:di + h, dj:dj + w]
    cols = cols.reshape(n, c_in * 9, h * w)
    wmat = kernels.data.reshape(c_out, c_in * 9)
    out = np.matmul(wmat, cols) + bias.data.reshape(1, c_out, 1)

    def backward(g):
        g = g.reshape(n, c_out, h * w)
        gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
        gb = g.sum(axis=(0, 2))
        gcols = np.matmul(wmat.T, g).reshape(n, c_in, 3, 3, h, w)
        gxp = np.zeros((n, c_in, h + 2, w + 2), dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                gxp[:, :, di:di + h, dj:dj + w] += gcols[:, :, di, dj]
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    res = _result(out.reshape(n, c_out, h, w), (x, kernels, bias), backward)
    return _unbatch(res, squeezed)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the block in row-major order."""
    x, squeezed = _batched(x, 4, "maxpool2d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial size {h}x{w} must be even")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _unbatch(_result(out, (x,), backward), squeezed)


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    x, squeezed = _batched(x, 4, "upsample2d")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _unbatch(_result(out, (x,), backward), squeezed)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weights.T + bias`` with ``weights`` of shape ``(M, N)``."""
    x, squeezed = _batched(x, 2, "dense")
    if weights.data.ndim != 2 or weights.shape[1] != x.shape[1]:
        raise ShapeError(f"dense: input width N={x.shape[1]} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match M={weights.shape[0]}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T + bias.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _unbatch(_result(out, (x, weights, bias), backward), squeezed)


@dataclass
class BatchNormState:
    """Running statistics of one batch-normalisation layer.

    ``mean``/``var`` stay ``None`` until initialised, either explicitly or by
    a first training-mode call.
    """

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalisation over every axis but axis 1.

    Train mode normalises with the batch statistics (biased variance) and
    updates ``state`` in place; infer mode uses ``state`` and leaves it alone.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    if x.data.ndim < 2:
        raise ShapeError(f"batchnorm: need at least (N, C), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: scale/shift shapes {gamma.shape}/{beta.shape} for {c} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, c) + (1,) * (x.data.ndim - 2)
    xd = x.data
    dt = xd.dtype.type

    if mode == "train":
        mean = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        m = dt(state.momentum)
        if state.mean is None:
            state.mean = np.zeros(c, dtype=xd.dtype)
            state.var = np.ones(c, dtype=xd.dtype)
        state.mean = (m * state.mean + (1 - m) * mean.astype(xd.dtype)).astype(xd.dtype)
        state.var = (m * state.var + (1 - m) * var.astype(xd.dtype)).astype(xd.dtype)
    else:
        if state.mean is None or state.var is None:
            raise RuntimeError("batchnorm: infer mode requires initialised running statistics")
        mean, var = state.mean, state.var

    inv_std = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + state.eps)).astype(xd.dtype).reshape(bshape)
    xhat = (xd - np.asarray(mean, dtype=xd.dtype).reshape(bshape)) * inv_std
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    out = xhat * g_ + b_
    count = xd.size // c

    def backward(g):
        dgamma = np.sum(g * xhat, axis=axes)
        dbeta = np.sum(g, axis=axes)
        dxhat = g * g_
        if mode == "train":
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = inv_std * (dxhat - s1 / count - xhat * s2 / count)
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in infer mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout: unknown mode {mode!r}")
    if mode == "infer" or rate == 0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _result(x.data * mask, (x,), lambda g: (g * mask,))

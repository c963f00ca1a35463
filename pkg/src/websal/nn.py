"""Convolution, pooling and batch-normalization ops on (n, c, h, w) tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _make

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_dim(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    return (size + 2 * pad - dil * (k - 1) - 1) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int, dil: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    hspan, wspan = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, oh: int, ow: int, stride: int, dil: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    hspan, wspan = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i * dil:i * dil + hspan:stride, j * dil:j * dil + wspan:stride] += cols[:, :, i, j]
    return out


def _check_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n,c,h,w), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input channels {c} != weight inC {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({oc},)")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride}, dilation={dilation}, padding={padding}")
    oh, ow = _out_dim(h, kh, stride, padding, dilation), _out_dim(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: degenerate output {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, oh, ow, stride, dilation)
    w2 = weight.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, oc, oh, ow)

    def back(g):
        g2 = g.reshape(n, oc, oh * ow)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2)
        gxp = _col2im(gcols, xp.shape, kh, kw, oh, ow, stride, dilation)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, back)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is laid out (inC, outC, kH, kW)."""
    _check_4d(x, "conv_transpose2d input")
    _check_4d(weight, "conv_transpose2d weight")
    n, c, h, w = x.shape
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv_transpose2d: input channels {c} != weight inC {ic}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({oc},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose2d: bad stride={stride}, padding={padding}")
    fh, fw = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = fh - 2 * padding, fw - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: degenerate output {oh}x{ow}")

    x2 = x.data.reshape(n, ic, h * w)
    w2 = weight.data.reshape(ic, -1)
    cols = np.matmul(w2.T, x2)
    full = _col2im(cols, (n, oc, fh, fw), kh, kw, h, w, stride, 1)
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gfull, kh, kw, h, w, stride, 1)
        gx = np.matmul(w2, gcols).reshape(x.shape)
        gw = np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, parents, back)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Window maximum; ties resolve to the first window element in row-major order."""
    _check_4d(x, "maxpool2d input")
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool2d: bad kernel={kernel}, stride={stride}")
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"maxpool2d: window {kernel}x{kernel} larger than input {h}x{w}")
    oh, ow = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    hspan, wspan = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    offsets = [(i, j) for i in range(kernel) for j in range(kernel)]
    cand = np.stack([x.data[:, :, i:i + hspan:stride, j:j + wspan:stride] for i, j in offsets])
    arg = cand.argmax(axis=0)
    out = np.take_along_axis(cand, arg[None], axis=0)[0]

    def back(g):
        gx = np.zeros_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[:, :, i:i + hspan:stride, j:j + wspan:stride] += np.where(arg == k, g, 0.0)
        return (gx,)

    return _make(out, (x,), back)


@dataclass
class BatchNormState:
    """Running moments for one batch-norm layer."""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str = "train") -> Tensor:
    _check_4d(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    m = n * h * w
    eps = state.eps
    if mode == "train":
        if m < 2:
            raise ShapeError(f"batchnorm2d: train mode needs >= 2 values per channel, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mu
        state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None].astype(x.dtype)) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "train":
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), back)

import numpy as np
import pytest

from websal.tensor import Tensor


def ref_conv2d(x, w, b, stride=1, pad=0, dil=1):
    """Direct six-fold loop convolution (plus batch); the oracle for conv2d."""
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o] if b is not None else 0.0
                    for ci in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += w[o, ci, p, q] * xp[bi, ci, i * stride + p * dil, j * stride + q * dil]
                    out[bi, o, i, j] = acc
    return out


def ref_conv_transpose2d(x, w, b, stride=1, pad=0):
    """Scatter every input pixel through the kernel; the oracle for conv_transpose2d."""
    n, ic, h, wd = x.shape
    _, oc, kh, kw = w.shape
    full = np.zeros((n, oc, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for bi in range(n):
        for ci in range(ic):
            for i in range(h):
                for j in range(wd):
                    for o in range(oc):
                        for p in range(kh):
                            for q in range(kw):
                                full[bi, o, i * stride + p, j * stride + q] += x[bi, ci, i, j] * w[ci, o, p, q]
    out = full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def ref_maxpool(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, oh, ow))
    for bi in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    out[bi, ci, i, j] = max(x[bi, ci, i * s + p, j * s + q] for p in range(k) for q in range(k))
    return out


def finite_diff(f, arr, indices, eps=1e-4):
    """Central differences of scalar f() w.r.t. arr at the given flat indices."""
    flat = arr.reshape(-1)
    out = []
    for idx in indices:
        old = flat[idx]
        flat[idx] = old + eps
        a = f()
        flat[idx] = old - eps
        b = f()
        flat[idx] = old
        out.append((a - b) / (2 * eps))
    return np.array(out)


def grad_check(loss_fn, tensors, rng, points=10, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` returns a (1,1,1,1) Tensor built from ``tensors``.
    """
    for t in tensors:
        t.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for t in tensors:
        k = min(points, t.size)
        idx = rng.choice(t.size, size=k, replace=False)
        num = finite_diff(lambda: loss_fn().item(), t.data, idx, eps)
        ana = t.grad.reshape(-1)[idx]
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8)
        worst = max(worst, float(np.max(np.abs(num - ana)) / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)

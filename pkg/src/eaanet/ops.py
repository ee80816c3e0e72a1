"""Neural-network operations: conv, norms, activations, softmax, losses.

All ops follow the same pattern: compute the forward result with numpy,
then register a closure computing input gradients from the output gradient.
conv2d re-materializes its im2col workspace during backward instead of
saving it, so the tracked live bytes reflect activations, not workspace.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import (ConfigurationError, FullyMaskedRowError,
                     ShapeMismatchError)
from .tensor import Tensor, record

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def bw(g):
        return (g * mask,)

    return record((x,), out, bw)


def gelu(x):
    """Exact (erf-based) GELU."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return ((phi + xd * pdf).astype(xd.dtype) * g,)

    return record((x,), out, bw)


def linear(x, w, b=None):
    """x @ w + b over the last axis; x is (..., d_in), w is (d_in, d_out)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatchError(
            "linear: input %s does not match weight %s" % (x.data.shape, w.data.shape))
    out = x.data @ w.data
    if b is not None:
        out += b.data
    xd, wd = x.data, w.data

    def bw(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = None if b is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return record((x, w, b), out, bw)


def softmax(x):
    """Softmax over the last axis, max-subtracted for stability.

    Rows whose every entry is -inf (fully masked attention rows) are an
    error rather than NaN.
    """
    m = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise FullyMaskedRowError("softmax: fully masked row (all -inf)")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return record((x,), y, bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine."""
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeMismatchError(
            "layer_norm: gamma/beta %s/%s do not match last axis %d"
            % (gamma.data.shape, beta.data.shape, d))
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data

    def bw(g):
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gb = g.reshape(-1, d).sum(axis=0)
        gy = g * gd
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record((x, gamma, beta), out, bw)


def batchnorm2d(x, gamma, beta, running_mean, running_var,
                training, momentum=0.1, eps=1e-5):
    """Per-channel batch norm over N, H, W for NCHW input.

    ``running_mean``/``running_var`` are plain float64 numpy arrays mutated
    in place in training mode (unbiased variance, torch-style momentum).
    """
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatchError(
            "batchnorm2d: gamma/beta %s/%s do not match %d channels"
            % (gamma.data.shape, beta.data.shape, c))
    axes = (0, 2, 3)
    gb = gamma.data.reshape(1, c, 1, 1)
    bb = beta.data.reshape(1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        n = x.data.size // c
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(c) * (n / max(n - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gb + bb

        def bw(g):
            ggamma = (g * xhat).sum(axis=axes)
            gbeta = g.sum(axis=axes)
            gy = g * gb
            gx = inv * (gy - gy.mean(axis=axes, keepdims=True)
                        - xhat * (gy * xhat).mean(axis=axes, keepdims=True))
            return gx, ggamma, gbeta

        return record((x, gamma, beta), out, bw)

    inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
    mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
    xhat = (x.data - mu) * inv
    out = xhat * gb + bb

    def bw_eval(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        return g * gb * inv, ggamma, gbeta

    return record((x, gamma, beta), out, bw_eval)


def _conv_out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xd, kh, kw, stride, padding):
    """(N,C,H,W) -> (N, C*kh*kw, oh*ow) patch matrix (copies)."""
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(dcols, xshape, kh, kw, stride, padding, oh, ow):
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d(x, w, stride=1, padding=0):
    """2-D cross-correlation; x is (N,C,H,W), w is (O,C,kh,kw), no bias."""
    n, c, h, wid = x.data.shape
    o, cw, kh, kw = w.data.shape
    if cw != c:
        raise ShapeMismatchError(
            "conv2d: input channels %d do not match weight channels %d" % (c, cw))
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be >= 1")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(wid, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ConfigurationError(
            "conv2d: non-positive output extent for input %s, kernel %s, "
            "stride %d, padding %d" % (x.data.shape, w.data.shape, stride, padding))
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wflat = w.data.reshape(o, -1)
    out = np.matmul(wflat, cols).reshape(n, o, oh, ow)
    del cols  # workspace; rebuilt in backward
    xd, wd = x.data, w.data

    def bw(g):
        gflat = g.reshape(n, o, oh * ow)
        cols_b, _, _ = _im2col(xd, kh, kw, stride, padding)
        gw = np.einsum("nol,ncl->oc", gflat, cols_b,
                       optimize=True).reshape(wd.shape)
        del cols_b
        dcols = np.matmul(wflat.T, gflat)
        gx = _col2im(dcols, xd.shape, kh, kw, stride, padding, oh, ow)
        return gx, gw

    return record((x, w), out, bw)


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label], fused log-sum-exp; labels are ints."""
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeMismatchError("cross_entropy: logits must be 2-D, got %s"
                                 % (ld.shape,))
    labels = np.asarray(labels)
    b, c = ld.shape
    if labels.shape != (b,):
        raise ShapeMismatchError("cross_entropy: %d logit rows but labels %s"
                                 % (b, labels.shape))
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        idx = int(np.argmax(bad))
        raise ValueError("cross_entropy: label %d out of range at index %d"
                         % (int(labels[idx]), idx))
    m = ld.max(axis=1, keepdims=True)
    e = np.exp(ld - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    rows = np.arange(b)
    nll = (np.log(z[:, 0]) + m[:, 0]) - ld[rows, labels]
    out = np.asarray(nll.mean(), dtype=ld.dtype)

    def bw(g):
        gl = p.copy()
        gl[rows, labels] -= 1.0
        gl *= g / b
        return (gl,)

    return record((logits,), out, bw)

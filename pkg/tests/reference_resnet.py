"""Independent pure-numpy forward pass for the plain CIFAR ResNet18.

Used as the bit-identity oracle: it reads parameters and buffers out of a
built eaanet model by name but performs every operation with plain numpy
calls, mirroring the framework's arithmetic exactly (im2col + matmul conv,
eval-mode batch norm, where-based relu).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_ref(x, w, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(
        win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow))
    o = w.shape[0]
    return np.matmul(w.reshape(o, -1), cols).reshape(n, o, oh, ow)


def bn_eval_ref(x, gamma, beta, rm, rv, eps=1e-5):
    c = x.shape[1]
    gb = gamma.reshape(1, c, 1, 1)
    bb = beta.reshape(1, c, 1, 1)
    inv = (1.0 / np.sqrt(rv + eps)).reshape(1, c, 1, 1).astype(x.dtype)
    mu = rm.reshape(1, c, 1, 1).astype(x.dtype)
    return ((x - mu) * inv) * gb + bb


def relu_ref(x):
    return np.where(x > 0, x, 0)


class _Lookup:
    def __init__(self, model):
        self.params = {k: v.data for k, v in model.parameters()}
        self.bufs = dict(model.buffers())

    def conv(self, x, prefix, stride, padding):
        return conv2d_ref(x, self.params[prefix + ".w"], stride, padding)

    def bn(self, x, prefix):
        return bn_eval_ref(x, self.params[prefix + ".gamma"],
                           self.params[prefix + ".beta"],
                           self.bufs[prefix + ".running_mean"],
                           self.bufs[prefix + ".running_var"])


def _residual_block_ref(lk, x, prefix, stride):
    h = relu_ref(lk.bn(lk.conv(x, prefix + ".conv1", stride, 1), prefix + ".bn1"))
    h = lk.bn(lk.conv(h, prefix + ".conv2", 1, 1), prefix + ".bn2")
    if prefix + ".sc.w" in lk.params:
        s = lk.bn(lk.conv(x, prefix + ".sc", stride, 0), prefix + ".sc_bn")
    else:
        s = x
    return relu_ref(h + s)


def resnet18_forward_ref(model, x):
    """Eval-mode forward of a plain (unaugmented) eaanet model, pure numpy."""
    from eaanet.backbone import LAYER_STRIDES
    lk = _Lookup(model)
    h = relu_ref(lk.bn(lk.conv(x, "stem", 1, 1), "stem_bn"))
    for li in range(4):
        h = _residual_block_ref(lk, h, "layer%d.0" % (li + 1), LAYER_STRIDES[li])
        h = _residual_block_ref(lk, h, "layer%d.1" % (li + 1), 1)
    pooled = h.mean(axis=(2, 3))
    out = pooled @ lk.params["fc.w"]
    out += lk.params["fc.b"]
    return out

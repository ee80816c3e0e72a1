"""Dense float tensors with reverse-mode autodiff and byte-exact allocation tracking.

A Tensor wraps a numpy array (float32 by default, float64 for gradient
checking). Operations record themselves on a thread-local tape in creation
order, which is automatically a topological order; ``backward`` walks the
tape in reverse, accumulating gradients into ``.grad`` slots and releasing
intermediate buffers as it goes.

Every owned data/grad buffer is charged to a global allocation tracker so
peak live bytes can be measured per forward+backward pass.
"""

import itertools
import threading
import weakref

import numpy as np

from .errors import ContractError, ShapeMismatchError


class AllocTracker:
    """High-water-mark tracker of live tensor bytes. Thread-safe."""

    def __init__(self):
        self._lock = threading.Lock()
        self.current_live_bytes = 0
        self.peak_live_bytes = 0

    def alloc(self, n):
        with self._lock:
            self.current_live_bytes += n
            if self.current_live_bytes > self.peak_live_bytes:
                self.peak_live_bytes = self.current_live_bytes

    def free(self, n):
        with self._lock:
            self.current_live_bytes -= n

    def reset(self):
        with self._lock:
            self.peak_live_bytes = self.current_live_bytes


tracker = AllocTracker()


def tracker_reset():
    tracker.reset()


def tracker_peak():
    return tracker.peak_live_bytes


def tracker_current():
    return tracker.current_live_bytes


def _release(cell):
    tracker.free(cell[0])
    cell[0] = 0


class TapeRecord:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of recorded operations; creation order == topological order."""

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_state = threading.local()


def tape():
    t = getattr(_state, "tape", None)
    if t is None:
        t = _state.tape = Tape()
    return t


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: skip tape recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


_node_ids = itertools.count()


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_is_leaf",
                 "_cell", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not arr.dtype.kind == "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self._is_leaf = True
        # only owned buffers are charged; views of tracked bases cost nothing
        nbytes = arr.nbytes if arr.base is None else 0
        cell = [nbytes]
        self._cell = cell
        if nbytes:
            tracker.alloc(nbytes)
        weakref.finalize(self, _release, cell)

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def _ensure_grad(self):
        if self.grad is None:
            g = np.zeros_like(self.data, subok=False)
            g = np.ascontiguousarray(g)
            self.grad = g
            self._cell[0] += g.nbytes
            tracker.alloc(g.nbytes)
        return self.grad

    def _free_grad(self):
        if self.grad is not None:
            n = self.grad.nbytes
            self._cell[0] -= n
            tracker.free(n)
            self.grad = None

    def zero_grad(self, free=False):
        if free:
            self._free_grad()
        elif self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return "Tensor(shape=%s, dtype=%s, requires_grad=%s)" % (
            self.data.shape, self.data.dtype, self.requires_grad)

    # -- arithmetic (implementations attached below) ------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def record(inputs, out_data, backward_fn):
    """Wrap ``out_data`` in a Tensor; log the op when grads are live."""
    out = Tensor(out_data)
    if grad_enabled() and any(t is not None and t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape().records.append(TapeRecord(tuple(inputs), out, backward_fn))
    return out


def backward(loss):
    """Reverse-replay the tape from a scalar loss, accumulating into .grad.

    Consumes the tape: records are dropped (and their intermediate grad
    buffers released) as soon as they have been processed, so live bytes
    fall back toward the pre-forward level during the sweep.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ContractError("backward expects a scalar Tensor loss")
    records = tape().records
    loss._ensure_grad()
    loss.grad[...] += 1.0
    while records:
        rec = records.pop()
        out = rec.out
        if out.grad is not None:
            grads = rec.backward_fn(out.grad)
            for t, g in zip(rec.inputs, grads):
                if t is not None and t.requires_grad and g is not None:
                    t._ensure_grad()
                    t.grad += g
        if not out._is_leaf:
            out._free_grad()
        rec.inputs = rec.out = rec.backward_fn = None


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape))
                 if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise / shape primitives ----------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record((a, b), out, bw)


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return record((a, b), out, bw)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):  # scalar fast path, no constant tensor
        c = float(b)
        out = a.data * np.asarray(c, dtype=a.dtype)

        def bw_scalar(g):
            return (g * c,)

        return record((a,), out, bw_scalar)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record((a, b), out, bw)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record((a,), out, bw)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    denom = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / denom,)

    return record((a,), out, bw)


def reshape(a, shape):
    out = a.data.reshape(shape)
    old = a.data.shape

    def bw(g):
        return (g.reshape(old),)

    return record((a,), out, bw)


def transpose(a, axes):
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record((a,), out, bw)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(tuple(tensors), out, bw)


def matmul(a, b):
    """Batched matrix product with numpy batch broadcasting."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatchError(
            "matmul: incompatible shapes %s and %s" % (a.data.shape, b.data.shape))
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2))
        gb = np.matmul(ad.swapaxes(-1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record((a, b), out, bw)

"""Sized, versioned flat binary for model weights.

Layout: magic ``EAAW``, u32 format version, u32 spec length + serialized
model-spec text, then named parameter buffers (float32) followed by named
batch-norm running-stat buffers (float64), each with a shape header. Load
rebuilds the model from the embedded spec and refuses name/shape drift.
"""

import struct

import numpy as np

from .backbone import build_model
from .config import model_spec_from_text, serialize_model_spec
from .errors import DataFormatError

MAGIC = b"EAAW"
VERSION = 1


def _write_array(fh, name, arr):
    enc = name.encode("utf-8")
    fh.write(struct.pack("<H", len(enc)))
    fh.write(enc)
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    data = np.ascontiguousarray(arr)
    fh.write(struct.pack("<Q", data.nbytes))
    fh.write(data.tobytes())


def _read_array(fh, dtype):
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    (nbytes,) = struct.unpack("<Q", fh.read(8))
    buf = fh.read(nbytes)
    if len(buf) != nbytes:
        raise DataFormatError("weights file truncated while reading %r" % name)
    arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
    return name, arr


def save_weights(model, path):
    params = model.parameters()
    buffers = model.buffers()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        spec_text = serialize_model_spec(model.spec).encode("utf-8")
        fh.write(struct.pack("<I", len(spec_text)))
        fh.write(spec_text)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            _write_array(fh, name, p.data.astype(np.float32, copy=False))
        fh.write(struct.pack("<I", len(buffers)))
        for name, b in buffers:
            _write_array(fh, name, b.astype(np.float64, copy=False))


def load_weights(path, seed=0):
    """Rebuild the model described in the file and load its buffers."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataFormatError("%s: not an EAAW weights file" % path)
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DataFormatError("%s: unsupported weights version %d" % (path, version))
        (slen,) = struct.unpack("<I", fh.read(4))
        spec = model_spec_from_text(fh.read(slen).decode("utf-8"), source=path)
        model = build_model(spec, seed)
        (nparams,) = struct.unpack("<I", fh.read(4))
        params = dict(model.parameters())
        if nparams != len(params):
            raise DataFormatError(
                "%s: %d parameters in file, model has %d" % (path, nparams, len(params)))
        for _ in range(nparams):
            name, arr = _read_array(fh, np.float32)
            p = params.get(name)
            if p is None:
                raise DataFormatError("%s: unknown parameter %r" % (path, name))
            if p.data.shape != arr.shape:
                raise DataFormatError(
                    "%s: shape %s for %r, model expects %s"
                    % (path, arr.shape, name, p.data.shape))
            p.data[...] = arr
        (nbufs,) = struct.unpack("<I", fh.read(4))
        bufs = dict(model.buffers())
        if nbufs != len(bufs):
            raise DataFormatError(
                "%s: %d buffers in file, model has %d" % (path, nbufs, len(bufs)))
        for _ in range(nbufs):
            name, arr = _read_array(fh, np.float64)
            b = bufs.get(name)
            if b is None or b.shape != arr.shape:
                raise DataFormatError("%s: unexpected buffer %r" % (path, name))
            b[...] = arr
    return model

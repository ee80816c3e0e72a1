"""Weights file: round trip, embedded spec, and corruption handling."""

import struct

import numpy as np
import pytest

from eaanet.backbone import ModelSpec, build_model
from eaanet.data import synthetic_dataset
from eaanet.errors import DataFormatError
from eaanet.tensor import no_grad, tape
from eaanet.weights import MAGIC, load_weights, save_weights


@pytest.fixture(autouse=True)
def _clean_tape():
    tape().clear()
    yield
    tape().clear()


def _model(**kw):
    return build_model(ModelSpec(**kw), seed=0)


def test_round_trip_is_bit_exact(tmp_path):
    model = _model()
    # perturb away from init so the test is not vacuous
    for _, p in model.parameters():
        p.data += 0.01
    for name, b in model.buffers():
        b += 0.5
    path = str(tmp_path / "w.eaaw")
    save_weights(model, path)
    loaded = load_weights(path)
    for (name, a), (_, b) in zip(model.parameters(), loaded.parameters()):
        assert np.array_equal(a.data, b.data), name
    for (name, a), (_, b) in zip(model.buffers(), loaded.buffers()):
        assert np.array_equal(a, b), name


def test_loaded_model_predicts_identically(tmp_path):
    model = _model(augment=("none", "none", "replace", "concat"))
    path = str(tmp_path / "w.eaaw")
    save_weights(model, path)
    loaded = load_weights(path)
    ds = synthetic_dataset(4, 10, seed=0)
    with no_grad():
        from eaanet.tensor import Tensor
        x = Tensor(ds.images)
        assert np.array_equal(model(x, False).data, loaded(x, False).data)


def test_spec_is_embedded(tmp_path):
    model = _model(downsample="strideconv",
                   augment=("none", "concat", "none", "none"))
    path = str(tmp_path / "w.eaaw")
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.spec.downsample == "strideconv"
    assert loaded.spec.augment == ("none", "concat", "none", "none")


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "bogus.bin")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\0" * 64)
    with pytest.raises(DataFormatError, match="EAAW"):
        load_weights(path)


def test_bad_version_rejected(tmp_path):
    path = str(tmp_path / "v9.bin")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", 9))
    with pytest.raises(DataFormatError, match="version 9"):
        load_weights(path)


def test_truncation_rejected(tmp_path):
    model = _model()
    path = str(tmp_path / "w.eaaw")
    save_weights(model, path)
    blob = open(path, "rb").read()
    cut = str(tmp_path / "cut.eaaw")
    with open(cut, "wb") as fh:
        fh.write(blob[: len(blob) // 2])
    with pytest.raises(DataFormatError):
        load_weights(cut)

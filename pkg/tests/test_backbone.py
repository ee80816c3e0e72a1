"""Model assembly: specs, shapes, determinism, and the plain-ResNet18 oracle."""

import numpy as np
import pytest
from reference_resnet import resnet18_forward_ref

from eaanet.attention import LINFORMER, AttentionConfig
from eaanet.backbone import (AUGMENT_CONCAT, AUGMENT_NONE, AUGMENT_REPLACE,
                             DOWNSAMPLE_PATCH2, DOWNSAMPLE_STRIDECONV,
                             ModelSpec, build_model, evit_spec_for_layer,
                             plain_resnet18)
from eaanet.errors import ConfigurationError
from eaanet.tensor import Tensor, backward, no_grad, tape

RNG = np.random.default_rng(3)


@pytest.fixture(autouse=True)
def _clean_tape():
    tape().clear()
    yield
    tape().clear()


def _x(batch=2, side=32):
    return Tensor(RNG.standard_normal((batch, 3, side, side)).astype(np.float32))


class TestModelSpec:
    def test_defaults_are_flagship(self):
        spec = ModelSpec()
        assert spec.augment == ("none", "none", "concat", "concat")
        assert spec.downsample == DOWNSAMPLE_PATCH2
        assert spec.attn.mechanism == "longformer2d"

    def test_validate_collects_all_problems(self):
        spec = ModelSpec(classes=1, augment=("bogus",) * 4, downsample="nope")
        with pytest.raises(ConfigurationError) as exc:
            spec.validate()
        msg = str(exc.value)
        assert "classes" in msg and "bogus" in msg and "nope" in msg

    def test_input_size_must_be_multiple_of_16(self):
        with pytest.raises(ConfigurationError, match="16"):
            ModelSpec(input_size=40).validate()


class TestEvitSpecForLayer:
    def test_layer3_grid_at_32(self):
        es = evit_spec_for_layer(ModelSpec(), 2)
        assert (es.grid_h, es.grid_w) == (8, 8)
        assert es.dim == 256
        assert es.patch == 2  # stride-2 layer with patch2x2 downsampling

    def test_layer4_grid_at_32(self):
        es = evit_spec_for_layer(ModelSpec(), 3)
        assert (es.grid_h, es.grid_w) == (4, 4)

    def test_strideconv_uses_unit_patches(self):
        es = evit_spec_for_layer(ModelSpec(downsample=DOWNSAMPLE_STRIDECONV), 2)
        assert es.patch == 1

    def test_linformer_k_clamped_to_grid(self):
        spec = ModelSpec(attn=AttentionConfig(LINFORMER, heads=4, k_rank=32))
        es = evit_spec_for_layer(spec, 3)  # layer4: n=16 < default k=32
        assert es.attn.k_rank == 16
        assert spec.attn.k_rank == 32  # original untouched


def test_plain_resnet18_matches_reference_bitwise():
    model = build_model(plain_resnet18(), seed=0)
    with no_grad():
        for trial in range(5):
            x = _x()
            got = model(x, training=False).data
            want = resnet18_forward_ref(model, x.data)
            assert np.array_equal(got, want), "trial %d" % trial


def test_plain_resnet18_param_count():
    # CIFAR ResNet18: well-known ~11.17M parameters
    model = build_model(plain_resnet18(), seed=0)
    assert model.param_count() == 11173962


def test_build_is_deterministic_per_seed():
    a = build_model(ModelSpec(), 5)
    b = build_model(ModelSpec(), 5)
    c = build_model(ModelSpec(), 6)
    for (na, pa), (_, pb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data), na
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.parameters(), c.parameters()))


@pytest.mark.parametrize("mode", [AUGMENT_CONCAT, AUGMENT_REPLACE])
@pytest.mark.parametrize("downsample", [DOWNSAMPLE_PATCH2, DOWNSAMPLE_STRIDECONV])
def test_augmented_models_forward_and_backward(mode, downsample):
    spec = ModelSpec(augment=(AUGMENT_NONE, AUGMENT_NONE, mode, mode),
                     downsample=downsample,
                     attn=AttentionConfig("longformer2d", heads=4, window=3,
                                          global_tokens=1))
    model = build_model(spec, 0)
    x = _x()
    out = model(x, training=True)
    assert out.shape == (2, 10)
    from eaanet.ops import cross_entropy
    backward(cross_entropy(out, np.array([1, 2])))
    missing = [n for n, p in model.parameters() if p.grad is None]
    assert not missing, missing


def test_downsample_variants_have_identical_stage_shapes():
    """Table-4 property: patch2x2 and strideconv agree at every stage."""
    shapes = {}
    for downsample in (DOWNSAMPLE_PATCH2, DOWNSAMPLE_STRIDECONV):
        spec = ModelSpec(downsample=downsample)
        model = build_model(spec, 0)
        x = _x(1)
        with no_grad():
            h = model.stem_bn(model.stem(x), training=False)
            stage = [h.shape]
            from eaanet.ops import relu
            h = relu(h)
            for first, second in model.layers:
                h = second(first(h, False), False)
                stage.append(h.shape)
        shapes[downsample] = stage
    assert shapes[DOWNSAMPLE_PATCH2] == shapes[DOWNSAMPLE_STRIDECONV]


def test_full_attention_augmented_forward():
    spec = ModelSpec(attn=AttentionConfig("full", heads=4))
    model = build_model(spec, 0)
    with no_grad():
        assert model(_x(1), training=False).shape == (1, 10)


def test_replace_has_fewer_params_than_concat():
    concat_spec = ModelSpec(augment=("none", "none", "concat", "concat"))
    replace_spec = ModelSpec(augment=("none", "none", "replace", "replace"))
    assert (build_model(replace_spec, 0).param_count()
            < build_model(concat_spec, 0).param_count())

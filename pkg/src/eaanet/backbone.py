"""ResNet18-style backbone with efficient-attention augmentation.

Two augmentation wirings per layer: concatenation, where the attention
branch output is joined channel-wise with the intact first residual block
and projected back down, and replacement, where the first residual block
is substituted by the attention branch entirely. The second block of each
layer is always a plain residual block.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (LINFORMER, LONGFORMER2D, AttentionConfig, EvitBlock,
                        EvitBlockSpec, PatchEmbed, tokens_to_map)
from .errors import ConfigurationError
from .ops import batchnorm2d, conv2d, linear, relu
from .tensor import Tensor, concat

AUGMENT_NONE = "none"
AUGMENT_CONCAT = "concat"
AUGMENT_REPLACE = "replace"
AUGMENT_MODES = (AUGMENT_NONE, AUGMENT_CONCAT, AUGMENT_REPLACE)

DOWNSAMPLE_PATCH2 = "patch2x2"
DOWNSAMPLE_STRIDECONV = "strideconv"
DOWNSAMPLE_METHODS = (DOWNSAMPLE_PATCH2, DOWNSAMPLE_STRIDECONV)

LAYER_CHANNELS = (64, 128, 256, 512)
LAYER_STRIDES = (1, 2, 2, 2)


@dataclass
class ModelSpec:
    classes: int = 10
    input_channels: int = 3
    input_size: int = 32
    augment: tuple = (AUGMENT_NONE, AUGMENT_NONE, AUGMENT_CONCAT, AUGMENT_CONCAT)
    downsample: str = DOWNSAMPLE_PATCH2
    attn: AttentionConfig = field(default_factory=lambda: AttentionConfig(
        mechanism=LONGFORMER2D))
    mlp_ratio: float = 2.0

    def validate(self):
        problems = []
        if self.classes < 2:
            problems.append("classes must be >= 2")
        if len(self.augment) != 4:
            problems.append("augment must list exactly 4 layers")
        for i, mode in enumerate(self.augment):
            if mode not in AUGMENT_MODES:
                problems.append("augment[layer%d]=%r is not one of %s"
                                % (i + 1, mode, AUGMENT_MODES))
        if self.downsample not in DOWNSAMPLE_METHODS:
            problems.append("downsample=%r is not one of %s"
                            % (self.downsample, DOWNSAMPLE_METHODS))
        if self.input_size % 16:
            problems.append("input_size must be divisible by 16")
        if problems:
            raise ConfigurationError("invalid model spec: " + "; ".join(problems))


class Conv2d:
    def __init__(self, in_ch, out_ch, k, stride, padding, rng, dtype=np.float32):
        fan_in = in_ch * k * k
        std = np.sqrt(2.0 / fan_in)
        self.w = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype),
                        requires_grad=True)
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return [("w", self.w)]

    def __call__(self, x, training=True):
        return conv2d(x, self.w, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, channels, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x, training=True):
        return batchnorm2d(x, self.gamma, self.beta,
                           self.running_mean, self.running_var, training)


class Linear:
    def __init__(self, in_f, out_f, rng, dtype=np.float32):
        std = np.sqrt(1.0 / in_f)
        self.w = Tensor(rng.normal(0.0, std, size=(in_f, out_f)).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]

    def __call__(self, x, training=True):
        return linear(x, self.w, self.b)


class ResidualBlock:
    """conv3x3(s) -> BN -> ReLU -> conv3x3(1) -> BN, plus shortcut, then ReLU."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype=np.float32):
        if stride not in (1, 2):
            raise ConfigurationError("residual block stride must be 1 or 2")
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride, 0, rng, dtype)
            self.shortcut_bn = BatchNorm2d(out_ch, dtype)

    def parameters(self):
        named = _prefix("conv1", self.conv1) + _prefix("bn1", self.bn1) \
            + _prefix("conv2", self.conv2) + _prefix("bn2", self.bn2)
        if self.shortcut is not None:
            named += _prefix("sc", self.shortcut) + _prefix("sc_bn", self.shortcut_bn)
        return named

    def buffers(self):
        named = _prefix_buf("bn1", self.bn1) + _prefix_buf("bn2", self.bn2)
        if self.shortcut is not None:
            named += _prefix_buf("sc_bn", self.shortcut_bn)
        return named

    def __call__(self, x, training=True):
        h = relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        s = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x), training)
        return relu(h + s)


class EvitBranch:
    """Attention branch: optional stride-2 conv, patch embed, one E-ViT
    block, tokens folded back to a feature map."""

    def __init__(self, in_ch, spec, downsample, stride, rng, dtype=np.float32):
        self.pre = None
        if stride == 2 and downsample == DOWNSAMPLE_STRIDECONV:
            self.pre = Conv2d(in_ch, in_ch, 3, 2, 1, rng, dtype)
            self.pre_bn = BatchNorm2d(in_ch, dtype)
        self.embed = PatchEmbed(in_ch, spec, rng, dtype)
        self.block = EvitBlock(spec, rng, dtype)
        self.spec = spec

    def parameters(self):
        named = []
        if self.pre is not None:
            named += _prefix("pre", self.pre) + _prefix("pre_bn", self.pre_bn)
        named += [("embed." + k, v) for k, v in self.embed.parameters()]
        named += [("block." + k, v) for k, v in self.block.parameters()]
        return named

    def buffers(self):
        return _prefix_buf("pre_bn", self.pre_bn) if self.pre is not None else []

    def __call__(self, x, training=True):
        if self.pre is not None:
            x = relu(self.pre_bn(self.pre(x), training))
        tokens = self.block(self.embed(x), global_rows=self.embed.global_rows())
        return tokens_to_map(tokens, (self.spec.grid_h, self.spec.grid_w))


class EaaConcatBlock:
    """Y = F(Concat(residual_block(x), attention_branch(x)))."""

    def __init__(self, in_ch, out_ch, stride, evit_spec, downsample, rng,
                 dtype=np.float32):
        self.residual = ResidualBlock(in_ch, out_ch, stride, rng, dtype)
        self.branch = EvitBranch(in_ch, evit_spec, downsample, stride, rng, dtype)
        self.fuse = Conv2d(out_ch + evit_spec.dim, out_ch, 1, 1, 0, rng, dtype)

    def parameters(self):
        return (_prefix("res", self.residual)
                + _prefix("evit", self.branch)
                + _prefix("fuse", self.fuse))

    def buffers(self):
        return _prefix_buf("res", self.residual) + _prefix_buf("evit", self.branch)

    def __call__(self, x, training=True):
        r = self.residual(x, training)
        a = self.branch(x, training)
        assert r.shape[2:] == a.shape[2:], \
            "branch spatial extents diverged: %s vs %s" % (r.shape, a.shape)
        return self.fuse(concat([r, a], axis=1))


class EaaReplaceBlock:
    """Y = F(attention_branch(x)); the residual block is gone entirely."""

    def __init__(self, in_ch, out_ch, stride, evit_spec, downsample, rng,
                 dtype=np.float32):
        self.branch = EvitBranch(in_ch, evit_spec, downsample, stride, rng, dtype)
        self.fuse = Conv2d(evit_spec.dim, out_ch, 1, 1, 0, rng, dtype)

    def parameters(self):
        return _prefix("evit", self.branch) + _prefix("fuse", self.fuse)

    def buffers(self):
        return _prefix_buf("evit", self.branch)

    def __call__(self, x, training=True):
        return self.fuse(self.branch(x, training))


def _prefix(name, module):
    return [(name + "." + k, v) for k, v in module.parameters()]


def _prefix_buf(name, module):
    return [(name + "." + k, v) for k, v in module.buffers()]


def evit_spec_for_layer(spec, layer_idx):
    """Derive the E-ViT block spec for augmented layer ``layer_idx`` (0-based)."""
    stride = LAYER_STRIDES[layer_idx]
    dim = LAYER_CHANNELS[layer_idx]
    in_spatial = spec.input_size // (2 ** max(layer_idx - 1, 0))
    out_spatial = in_spatial // stride
    patch = 1
    if stride == 2 and spec.downsample == DOWNSAMPLE_PATCH2:
        patch = 2
    n = out_spatial * out_spatial
    attn = replace(spec.attn)
    if attn.mechanism == LINFORMER:
        attn.k_rank = min(attn.k_rank, n)  # grid may be smaller than the default k
    return EvitBlockSpec(patch=patch, grid_h=out_spatial, grid_w=out_spatial,
                         dim=dim, attn=attn, mlp_ratio=spec.mlp_ratio)


class Model:
    """CIFAR-style ResNet18, optionally EAA-augmented per layer."""

    def __init__(self, spec, rng, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.stem = Conv2d(spec.input_channels, 64, 3, 1, 1, rng, dtype)
        self.stem_bn = BatchNorm2d(64, dtype)
        self.layers = []
        in_ch = 64
        for li in range(4):
            out_ch = LAYER_CHANNELS[li]
            stride = LAYER_STRIDES[li]
            mode = spec.augment[li]
            if mode == AUGMENT_NONE:
                first = ResidualBlock(in_ch, out_ch, stride, rng, dtype)
            else:
                espec = evit_spec_for_layer(spec, li)
                cls = EaaConcatBlock if mode == AUGMENT_CONCAT else EaaReplaceBlock
                first = cls(in_ch, out_ch, stride, espec, spec.downsample, rng, dtype)
            second = ResidualBlock(out_ch, out_ch, 1, rng, dtype)
            self.layers.append((first, second))
            in_ch = out_ch
        self.classifier = Linear(512, spec.classes, rng, dtype)

    def parameters(self):
        named = _prefix("stem", self.stem) + _prefix("stem_bn", self.stem_bn)
        for li, (first, second) in enumerate(self.layers):
            named += _prefix("layer%d.0" % (li + 1), first)
            named += _prefix("layer%d.1" % (li + 1), second)
        named += _prefix("fc", self.classifier)
        return named

    def buffers(self):
        named = _prefix_buf("stem_bn", self.stem_bn)
        for li, (first, second) in enumerate(self.layers):
            named += _prefix_buf("layer%d.0" % (li + 1), first)
            named += _prefix_buf("layer%d.1" % (li + 1), second)
        return named

    def param_count(self):
        return sum(int(p.size) for _, p in self.parameters())

    def zero_grad(self, free=False):
        for _, p in self.parameters():
            p.zero_grad(free=free)

    def __call__(self, x, training=True):
        h = relu(self.stem_bn(self.stem(x), training))
        for first, second in self.layers:
            h = second(first(h, training), training)
        pooled = h.mean(axis=(2, 3))  # global average pool
        return self.classifier(pooled)


def build_model(spec, seed, dtype=np.float32):
    """Deterministic model construction: same seed, bit-identical parameters."""
    spec.validate()
    rng = np.random.default_rng(seed)
    return Model(spec, rng, dtype=dtype)


def plain_resnet18(classes=10, input_channels=3, input_size=32):
    return ModelSpec(classes=classes, input_channels=input_channels,
                     input_size=input_size, augment=(AUGMENT_NONE,) * 4)

"""Flat key=value run configuration.

Every key has a default; an empty file runs the flagship variant
(longformer, concat on layers 3+4, 2x2-patch downsampling). Unknown keys
and malformed values are errors with the offending line/key named.
"""

import os
from dataclasses import dataclass, field

from .attention import MECHANISMS, AttentionConfig
from .backbone import AUGMENT_MODES, DOWNSAMPLE_METHODS, ModelSpec
from .errors import ConfigurationError
from .train import TrainConfig

DATA_DIR_ENV = "EAANET_DATA_DIR"
DATA_SOURCES = ("auto", "cifar10", "synthetic")


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % text)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("expected a positive integer, got %d" % v)
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("expected a non-negative integer, got %d" % v)
    return v


def _choice(options):
    def parse(text):
        if text not in options:
            raise ValueError("expected one of %s, got %r" % ("/".join(options), text))
        return text
    return parse


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = "data"
    out_dir: str = "out"
    data_source: str = "auto"
    subset: int = 0          # 0 = whole training set
    holdout: int = 500       # held-out test rows when subsetting / synthetic
    synthetic_size: int = 2000


# key -> (parser, getter, setter); defaults come from the dataclasses
_SCHEMA = {}


def _key(name, parse, get, put):
    _SCHEMA[name] = (parse, get, put)


_key("model.classes", _positive_int,
     lambda c: c.model.classes, lambda c, v: setattr(c.model, "classes", v))
_key("model.input_size", _positive_int,
     lambda c: c.model.input_size, lambda c, v: setattr(c.model, "input_size", v))
_key("model.downsample", _choice(DOWNSAMPLE_METHODS),
     lambda c: c.model.downsample, lambda c, v: setattr(c.model, "downsample", v))
_key("model.mlp_ratio", float,
     lambda c: c.model.mlp_ratio, lambda c, v: setattr(c.model, "mlp_ratio", v))
for _i in range(4):
    def _get(c, i=_i):
        return c.model.augment[i]

    def _put(c, v, i=_i):
        aug = list(c.model.augment)
        aug[i] = v
        c.model.augment = tuple(aug)

    _key("model.augment.layer%d" % (_i + 1), _choice(AUGMENT_MODES), _get, _put)
_key("attn.mechanism", _choice(MECHANISMS),
     lambda c: c.model.attn.mechanism,
     lambda c, v: setattr(c.model.attn, "mechanism", v))
_key("attn.heads", _positive_int,
     lambda c: c.model.attn.heads, lambda c, v: setattr(c.model.attn, "heads", v))
_key("attn.head_dim", _nonneg_int,
     lambda c: c.model.attn.head_dim,
     lambda c, v: setattr(c.model.attn, "head_dim", v))
_key("attn.k_rank", _positive_int,
     lambda c: c.model.attn.k_rank, lambda c, v: setattr(c.model.attn, "k_rank", v))
_key("attn.window", _positive_int,
     lambda c: c.model.attn.window, lambda c, v: setattr(c.model.attn, "window", v))
_key("attn.global_tokens", _nonneg_int,
     lambda c: c.model.attn.global_tokens,
     lambda c, v: setattr(c.model.attn, "global_tokens", v))
_key("train.epochs", _nonneg_int,
     lambda c: c.train.epochs, lambda c, v: setattr(c.train, "epochs", v))
_key("train.batch_size", _positive_int,
     lambda c: c.train.batch_size, lambda c, v: setattr(c.train, "batch_size", v))
_key("train.lr", float,
     lambda c: c.train.lr, lambda c, v: setattr(c.train, "lr", v))
_key("train.momentum", float,
     lambda c: c.train.momentum, lambda c, v: setattr(c.train, "momentum", v))
_key("train.weight_decay", float,
     lambda c: c.train.weight_decay,
     lambda c, v: setattr(c.train, "weight_decay", v))
_key("train.lr_schedule", _choice(("cosine", "step")),
     lambda c: c.train.lr_schedule,
     lambda c, v: setattr(c.train, "lr_schedule", v))
_key("train.seed", int,
     lambda c: c.train.seed, lambda c, v: setattr(c.train, "seed", v))
_key("train.convergence_window", _positive_int,
     lambda c: c.train.convergence_window,
     lambda c, v: setattr(c.train, "convergence_window", v))
_key("train.convergence_delta", float,
     lambda c: c.train.convergence_delta,
     lambda c, v: setattr(c.train, "convergence_delta", v))
_key("train.augment", _bool,
     lambda c: c.train.augment, lambda c, v: setattr(c.train, "augment", v))
_key("train.timing", _bool,
     lambda c: c.train.timing, lambda c, v: setattr(c.train, "timing", v))
_key("data.dir", str,
     lambda c: c.data_dir, lambda c, v: setattr(c, "data_dir", v))
_key("data.source", _choice(DATA_SOURCES),
     lambda c: c.data_source, lambda c, v: setattr(c, "data_source", v))
_key("data.subset", _nonneg_int,
     lambda c: c.subset, lambda c, v: setattr(c, "subset", v))
_key("data.holdout", _positive_int,
     lambda c: c.holdout, lambda c, v: setattr(c, "holdout", v))
_key("data.synthetic_size", _positive_int,
     lambda c: c.synthetic_size, lambda c, v: setattr(c, "synthetic_size", v))
_key("out.dir", str,
     lambda c: c.out_dir, lambda c, v: setattr(c, "out_dir", v))


def parse_config_text(text, source="<config>"):
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(
                "%s:%d: expected key=value, got %r" % (source, lineno, raw.strip()))
        key, value = (part.strip() for part in line.split("=", 1))
        entry = _SCHEMA.get(key)
        if entry is None:
            raise ConfigurationError("%s:%d: unknown key %r" % (source, lineno, key))
        parse, _, put = entry
        try:
            put(cfg, parse(value))
        except (ValueError, ConfigurationError) as exc:
            raise ConfigurationError(
                "%s:%d: invalid value for %s: %s" % (source, lineno, key, exc)) from None
    if os.environ.get(DATA_DIR_ENV):
        cfg.data_dir = os.environ[DATA_DIR_ENV]
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    cfg.model.validate()
    cfg.train.validate()
    attn = cfg.model.attn
    if attn.mechanism == "linformer" and attn.k_rank < 1:
        raise ConfigurationError("attn.k_rank must be positive")
    if attn.mechanism == "longformer2d" and attn.window % 2 == 0:
        raise ConfigurationError("attn.window must be odd")


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=path)


def serialize_config(cfg, keys=None):
    """Deterministic key=value dump (all keys, or a subset)."""
    lines = []
    for name in sorted(_SCHEMA):
        if keys is not None and name not in keys:
            continue
        _, get, _ = _SCHEMA[name]
        value = get(cfg)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append("%s=%s" % (name, value))
    return "\n".join(lines) + "\n"


MODEL_KEYS = tuple(k for k in _SCHEMA if k.startswith(("model.", "attn.")))


def serialize_model_spec(spec):
    cfg = RunConfig(model=spec)
    return serialize_config(cfg, keys=set(MODEL_KEYS))


def model_spec_from_text(text, source="<weights>"):
    return parse_config_text(text, source=source).model

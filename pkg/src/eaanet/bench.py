"""Scaling benchmarks: peak live bytes vs input size, and per-image latency.

Peak memory is the instrumented allocator's high-water mark over one
forward+backward pass (batch 4 by default). Attention-attributable bytes
are obtained by subtracting the plain-ResNet18 peak at the same side.
"""

import gc
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import FULL, LINFORMER, LONGFORMER2D, AttentionConfig
from .backbone import (AUGMENT_CONCAT, AUGMENT_NONE, AUGMENT_REPLACE,
                       LAYER_CHANNELS, ModelSpec, build_model,
                       evit_spec_for_layer)
from .errors import ConfigurationError
from .tensor import (Tensor, backward, tape, tracker_current, tracker_peak,
                     tracker_reset)

log = logging.getLogger("eaanet")

VARIANT_NAMES = ("resnet18", "full-concat", "linformer-concat",
                 "longformer-concat", "linformer-replace", "longformer-replace")

# Benchmark attention settings. One augmentation point (layer 3) and more
# heads than the training default, so the score buffer dominates the sweep's
# linear terms already at side 32; asymptotic exponents do not depend on
# either choice, desk-scale measurability does.
BENCH_HEADS = 32
BENCH_K_RANK = 32
BENCH_WINDOW = 5


def variant_spec(name, side, heads=BENCH_HEADS, k_rank=BENCH_K_RANK,
                 window=BENCH_WINDOW):
    """ModelSpec for one of the named benchmark populations (layer 3)."""
    if name == "resnet18":
        return ModelSpec(input_size=side, augment=(AUGMENT_NONE,) * 4)
    try:
        mech, mode = name.rsplit("-", 1)
    except ValueError:
        mech, mode = name, ""
    mechanism = {"full": FULL, "linformer": LINFORMER,
                 "longformer": LONGFORMER2D}.get(mech)
    augment_mode = {"concat": AUGMENT_CONCAT, "replace": AUGMENT_REPLACE}.get(mode)
    if mechanism is None or augment_mode is None:
        raise ConfigurationError(
            "unknown variant %r (expected one of %s)" % (name, ", ".join(VARIANT_NAMES)))
    attn = AttentionConfig(mechanism=mechanism, heads=heads,
                           k_rank=k_rank, window=window)
    return ModelSpec(input_size=side, attn=attn,
                     augment=(AUGMENT_NONE, AUGMENT_NONE,
                              augment_mode, AUGMENT_NONE))


def attention_tokens(side):
    """Token count of the deeper-of-two augmented grids (layer 3) at ``side``."""
    return (side // 4) ** 2


@dataclass
class MemoryReport:
    batch: int
    rows: list = field(default_factory=list)  # (variant, side, batch, peak, status)
    header = "variant,side,batch,peak_bytes,status"

    def add(self, variant, side, peak, status):
        self.rows.append((variant, side, self.batch, peak, status))

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r[0], r[1]))

    def peak(self, variant, side):
        for v, s, _, p, status in self.rows:
            if v == variant and s == side and status == "ok":
                return p
        return None


@dataclass
class LatencyReport:
    rows: list = field(default_factory=list)  # (variant, side, mean, std, iters)
    header = "variant,side,mean_ms_per_image,std_ms,iterations"

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r[0], r[1]))

    def mean_ms(self, variant):
        for v, _, mean, _, _ in self.rows:
            if v == variant:
                return mean
        return None


def _activation_lower_bound(spec, side, batch):
    """Coarse forward-activation byte estimate (a deliberate underestimate)."""
    total = batch * 3 * side * side
    spatial = side
    total += batch * 64 * spatial * spatial * 2  # stem conv + bn
    for li in range(4):
        ch = LAYER_CHANNELS[li]
        if li > 0:
            spatial //= 2
        total += batch * ch * spatial * spatial * 10  # two blocks, ~5 maps each
        if spec.augment[li] != AUGMENT_NONE:
            es = evit_spec_for_layer(spec, li)
            n = es.n_tokens
            attn = es.attn
            if attn.mechanism == FULL:
                scores = batch * attn.heads * n * n
            elif attn.mechanism == LINFORMER:
                scores = batch * attn.heads * n * attn.k_rank
            else:
                scores = batch * attn.heads * n * (attn.window ** 2 + attn.global_tokens)
            total += 2 * scores + 8 * batch * n * es.dim
    return total * 4  # float32


def bench_peak_memory(variants, sides, batch=4, budget_bytes=2 << 30, seed=0):
    """One forward+backward per (variant, side); rows whose analytic lower
    bound exceeds the budget are marked skipped-budget without attempting."""
    if sorted(sides) != list(sides):
        raise ConfigurationError("sides must be ascending")
    report = MemoryReport(batch=batch)
    for name in variants:
        for side in sides:
            if side < 32 or side % 16:
                raise ConfigurationError(
                    "side %d must be >= 32 and divisible by 16" % side)
            spec = variant_spec(name, side)
            lb = _activation_lower_bound(spec, side, batch)
            if lb > budget_bytes:
                log.info("bench-mem %s @%d: skipped (lower bound %.1f MiB > budget)",
                         name, side, lb / 2**20)
                report.add(name, side, lb, "skipped-budget")
                continue
            rng = np.random.default_rng(seed)
            model = build_model(spec, seed)
            x = Tensor(rng.standard_normal((batch, 3, side, side)).astype(np.float32))
            gc.collect()
            tracker_reset()
            floor = tracker_current()
            loss = model(x, training=True).sum()
            backward(loss)
            # increment above the post-build floor: parameter bytes cancel,
            # so subtracting the resnet18 row isolates attention activations
            peak = tracker_peak() - floor
            report.add(name, side, peak, "ok")
            log.info("bench-mem %s @%d: peak %.1f MiB", name, side, peak / 2**20)
            model.zero_grad(free=True)
            tape().clear()
            del model, x, loss
            gc.collect()
    return report


def bench_latency(variants, side, warmup=10, iters=50, batch=4, seed=0):
    """Forward-only wall-clock per image on a monotonic clock."""
    if iters < 10:
        raise ConfigurationError("bench-latency: iters must be >= 10")
    from .tensor import no_grad
    report = LatencyReport()
    for name in variants:
        spec = variant_spec(name, side)
        model = build_model(spec, seed)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((batch, 3, side, side)).astype(np.float32))
        times = []
        with no_grad():
            for i in range(warmup + iters):
                t0 = time.monotonic()
                model(x, training=False)
                dt = time.monotonic() - t0
                if i >= warmup:
                    times.append(dt * 1000.0 / batch)
        mean = float(np.mean(times))
        std = float(np.std(times))
        report.rows.append((name, side, mean, std, iters))
        log.info("bench-latency %s @%d: %.3f +- %.3f ms/image", name, side, mean, std)
        del model, x
        gc.collect()
    return report


def growth_exponent(ns, values):
    """Log-log regression slope of ``values`` against ``ns``."""
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(ns) < 2 or (values <= 0).any():
        raise ValueError("growth_exponent needs >= 2 positive points")
    slope, _ = np.polyfit(np.log(ns), np.log(values), 1)
    return float(slope)


def emit_csv(report, path):
    """Deterministic CSV: header row, rows sorted by (variant, side),
    floats with 6 significant digits."""
    lines = [report.header]
    for row in report.sorted_rows():
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append("%.6g" % v)
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")

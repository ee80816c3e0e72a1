"""Built-in verification: finite-difference checks on every parameterized
operation, end-to-end checks on micro hybrid models, the mechanism
equivalence ladder, and longformer mask exactness."""

import numpy as np

from . import ops
from .attention import (AttentionConfig, EvitBlockSpec, MhsaParams,
                        full_mhsa, linformer_mhsa, longformer2d_mhsa,
                        window_neighbor_sets, window_offsets)
from .backbone import EaaConcatBlock, EaaReplaceBlock, Linear
from .gradcheck import check_gradients
from .tensor import Tensor

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
EQUIVALENCE_TOLERANCE = 1e-5


def _t(rng, shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


def op_gradient_checks(seed=0):
    """(name, max relative error) for every differentiable op with parameters."""
    rng = np.random.default_rng(seed)
    results = []

    x = _t(rng, (2, 3, 4))
    w = _t(rng, (4, 5))
    b = _t(rng, (5,))
    results.append(("linear", check_gradients(
        lambda t: ops.linear(t, w, b), x, wrt=[x, w, b])))

    a = _t(rng, (2, 3, 4))
    m = _t(rng, (2, 4, 3))
    results.append(("matmul", check_gradients(
        lambda t: _mm(t, m), a, wrt=[a, m])))

    results.append(("softmax", check_gradients(ops.softmax, _t(rng, (3, 5)))))
    results.append(("relu", check_gradients(ops.relu, _t(rng, (3, 5)))))
    results.append(("gelu", check_gradients(ops.gelu, _t(rng, (3, 5)))))

    xl = _t(rng, (2, 3, 6))
    g = _t(rng, (6,))
    be = _t(rng, (6,))
    results.append(("layer_norm", check_gradients(
        lambda t: ops.layer_norm(t, g, be), xl, wrt=[xl, g, be])))

    xc = _t(rng, (2, 3, 6, 6))
    wc = _t(rng, (4, 3, 3, 3))
    results.append(("conv2d_s1", check_gradients(
        lambda t: ops.conv2d(t, wc, 1, 1), xc, wrt=[xc, wc])))
    results.append(("conv2d_s2", check_gradients(
        lambda t: ops.conv2d(t, wc, 2, 1), xc, wrt=[xc, wc])))

    gam = Tensor(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True,
                 dtype=np.float64)
    bet = _t(rng, (3,))
    rm, rv = np.zeros(3), np.ones(3)
    results.append(("batchnorm2d_train", check_gradients(
        lambda t: ops.batchnorm2d(t, gam, bet, rm, rv, True), xc,
        wrt=[xc, gam, bet])))
    results.append(("batchnorm2d_eval", check_gradients(
        lambda t: ops.batchnorm2d(t, gam, bet, rm, rv, False), xc,
        wrt=[xc, gam, bet])))

    logits = _t(rng, (4, 7))
    labels = rng.integers(0, 7, 4)
    results.append(("cross_entropy", check_gradients(
        lambda t: ops.cross_entropy(t, labels), logits)))

    tok = _t(rng, (1, 16, 6))
    for mech, make in (
            ("full_mhsa", lambda p: lambda t: full_mhsa(t, p, 2)),
            ("linformer_mhsa", lambda p: lambda t: linformer_mhsa(t, p, 4, 2)),
            ("longformer2d_mhsa",
             lambda p: lambda t: longformer2d_mhsa(t, (4, 4), p, 3, 2))):
        cfg = AttentionConfig(mechanism=_mech_name(mech), heads=2, k_rank=4, window=3)
        p = MhsaParams(6, cfg, 16, rng, dtype=np.float64)
        results.append((mech, check_gradients(
            make(p), tok, wrt=[tok] + [v for _, v in p.parameters()])))
    glob = _t(rng, (2, 6))
    cfg = AttentionConfig(mechanism="longformer2d", heads=2, window=3, global_tokens=2)
    p = MhsaParams(6, cfg, 16, rng, dtype=np.float64)
    results.append(("longformer2d_mhsa_global", check_gradients(
        lambda t: longformer2d_mhsa(t, (4, 4), p, 3, 2, global_rows=glob), tok,
        wrt=[tok, glob] + [v for _, v in p.parameters()])))
    return results


def _mech_name(op_name):
    return {"full_mhsa": "full", "linformer_mhsa": "linformer",
            "longformer2d_mhsa": "longformer2d"}[op_name]


def _mm(a, b):
    from .tensor import matmul
    return matmul(a, b)


def _micro_block(mode, rng):
    attn = (AttentionConfig(mechanism="longformer2d", heads=2, window=3,
                            global_tokens=1)
            if mode == "concat" else
            AttentionConfig(mechanism="linformer", heads=2, k_rank=4))
    espec = EvitBlockSpec(patch=2, grid_h=4, grid_w=4, dim=4, attn=attn,
                          mlp_ratio=2.0)
    cls = EaaConcatBlock if mode == "concat" else EaaReplaceBlock
    return cls(2, 4, 2, espec, "patch2x2", rng, dtype=np.float64)


def micro_model_checks(seed=0):
    """End-to-end gradient checks on tiny hybrid models (8x8 input, 2 channels)."""
    results = []
    for mode in ("concat", "replace"):
        rng = np.random.default_rng(seed)
        block = _micro_block(mode, rng)
        head = Linear(4, 3, rng, dtype=np.float64)
        labels = rng.integers(0, 3, 2)
        x = _t(rng, (2, 2, 8, 8))

        def f(t, block=block, head=head, labels=labels):
            pooled = block(t, training=True).mean(axis=(2, 3))
            return ops.cross_entropy(head(pooled), labels)

        wrt = [x] + [p for _, p in block.parameters()] + \
            [p for _, p in head.parameters()]
        results.append(("eaa_%s_micro" % mode, check_gradients(f, x, wrt=wrt)))
    return results


def equivalence_ladder(seeds=20):
    """Max |full - linformer(k=n, E=I)| and |full - longformer(covering w)|
    over random inputs, grids up to 6x6, heads in {1,2,4}."""
    worst_lin = worst_long = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        heads = int(rng.choice([1, 2, 4]))
        dh = int(rng.choice([2, 3, 4]))
        d = heads * dh
        gh = int(rng.integers(2, 7))
        gw = int(rng.integers(2, 7))
        n = gh * gw
        full_p = MhsaParams(d, AttentionConfig("full", heads=heads), n, rng)
        tokens = Tensor(rng.standard_normal((2, n, d)).astype(np.float32))
        ref = full_mhsa(tokens, full_p, heads).data

        lin_p = MhsaParams(d, AttentionConfig("linformer", heads=heads, k_rank=n),
                           n, rng)
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            getattr(lin_p, name).data[...] = getattr(full_p, name).data
        lin_p.ek.data[...] = np.eye(n, dtype=np.float32)
        lin_p.ev.data[...] = np.eye(n, dtype=np.float32)
        lin = linformer_mhsa(tokens, lin_p, n, heads).data
        worst_lin = max(worst_lin, float(np.abs(ref - lin).max()))

        w = 2 * max(gh, gw) - 1
        lon = longformer2d_mhsa(tokens, (gh, gw), full_p, w, heads).data
        worst_long = max(worst_long, float(np.abs(ref - lon).max()))
    return [("linformer_k_eq_n", worst_lin), ("longformer_covering_w", worst_long)]


def mask_exactness(max_grid=6, max_window=7, globals_range=(0, 1, 2), seed=0):
    """Compare nonzero attention-weight sets against brute-force clipped
    Chebyshev neighborhoods plus globals. Returns a list of failures."""
    rng = np.random.default_rng(seed)
    failures = []
    for gh in range(2, max_grid + 1):
        for gw in range(2, max_grid + 1):
            n = gh * gw
            for w in range(1, max_window + 1, 2):
                for g in globals_range:
                    d, heads = 4, 2
                    cfg = AttentionConfig("longformer2d", heads=heads, window=w,
                                          global_tokens=g)
                    p = MhsaParams(d, cfg, n, rng)
                    tokens = Tensor(rng.standard_normal((1, n, d)).astype(np.float32))
                    glob = (Tensor(rng.standard_normal((g, d)).astype(np.float32))
                            if g else None)
                    _, (weights, weights_g) = longformer2d_mhsa(
                        tokens, (gh, gw), p, w, heads, global_rows=glob,
                        return_weights=True)
                    expected = window_neighbor_sets(gh, gw, w, g)
                    offsets = window_offsets(w)
                    for i in range(n):
                        r, c = divmod(i, gw)
                        got = set()
                        for j, (dr, dc) in enumerate(offsets):
                            if weights[0, :, r, c, j].max() > 0:
                                got.add((r + dr) * gw + (c + dc))
                        for jg in range(g):
                            if weights[0, :, r, c, len(offsets) + jg].max() > 0:
                                got.add(n + jg)
                        if got != expected[i]:
                            failures.append((gh, gw, w, g, i, sorted(got),
                                             sorted(expected[i])))
                    if g and not (weights_g > 0).all():
                        failures.append((gh, gw, w, g, "global-row-zero", None, None))
    return failures

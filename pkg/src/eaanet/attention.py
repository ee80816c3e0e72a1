"""Patch/position embedding and the three multi-head attention mechanisms.

Mechanisms:
  * full: softmax(Q K^T / sqrt(d_h)) V over all token pairs.
  * linformer: keys/values projected from n tokens down to k before the
    score product, shrinking the score buffer from n*n to n*k.
  * longformer2d: each token attends a (w x w) Chebyshev window around its
    grid cell (clipped at borders) plus optional global tokens; global
    tokens attend everything. Scores are materialized per-token over at
    most w*w + g columns, never as an n*n matrix.

An EvitBlock wraps one mechanism into a pre-norm transformer block
(attention + GELU MLP, both with residual connections).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeMismatchError
from .ops import gelu, layer_norm, linear, softmax
from .tensor import Tensor, concat, matmul, record, reshape, transpose

FULL = "full"
LINFORMER = "linformer"
LONGFORMER2D = "longformer2d"
MECHANISMS = (FULL, LINFORMER, LONGFORMER2D)


@dataclass
class AttentionConfig:
    mechanism: str = FULL
    heads: int = 4
    head_dim: int = 0          # 0 means dim // heads
    k_rank: int = 32           # linformer only
    window: int = 5            # longformer2d only, odd
    global_tokens: int = 0     # longformer2d only

    def resolve_head_dim(self, dim):
        hd = self.head_dim if self.head_dim else dim // self.heads
        if self.heads * hd != dim:
            raise ConfigurationError(
                "attention: heads * head_dim = %d * %d != embedding dim %d"
                % (self.heads, hd, dim))
        return hd

    def validate(self, dim, n_tokens):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError("unknown attention mechanism %r" % self.mechanism)
        if self.heads < 1:
            raise ConfigurationError("attention: heads must be positive")
        self.resolve_head_dim(dim)
        if self.mechanism == LINFORMER:
            if not 1 <= self.k_rank <= n_tokens:
                raise ConfigurationError(
                    "linformer: k_rank %d must be in [1, n=%d]" % (self.k_rank, n_tokens))
        if self.mechanism == LONGFORMER2D:
            if self.window < 1 or self.window % 2 == 0:
                raise ConfigurationError(
                    "longformer2d: window must be odd and positive, got %d" % self.window)
            if self.global_tokens < 0:
                raise ConfigurationError("longformer2d: global_tokens must be >= 0")


@dataclass
class EvitBlockSpec:
    patch: int = 1
    grid_h: int = 0
    grid_w: int = 0
    dim: int = 0
    attn: AttentionConfig = field(default_factory=AttentionConfig)
    mlp_ratio: float = 2.0

    @property
    def n_tokens(self):
        return self.grid_h * self.grid_w

    def validate(self):
        if self.patch not in (1, 2):
            raise ConfigurationError("patch side must be 1 or 2, got %d" % self.patch)
        if self.grid_h < 1 or self.grid_w < 1 or self.dim < 1:
            raise ConfigurationError("grid extents and dim must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")
        self.attn.validate(self.dim, self.n_tokens)


def _param(rng, shape, std=0.02, dtype=np.float32):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def rows(t, start, stop):
    """Differentiable row slice t[start:stop] along axis 0."""
    out = t.data[start:stop]
    shape = t.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record((t,), out, bw)


def broadcast_batch(t, batch):
    """(g, d) -> (batch, g, d) without copying."""
    out = np.broadcast_to(t.data[None], (batch,) + t.data.shape)

    def bw(g):
        return (g.sum(axis=0),)

    return record((t,), out, bw)


def split_heads(tokens, heads):
    """(B, n, d) -> (B, H, n, d_h) as a view."""
    b, n, d = tokens.shape
    return transpose(reshape(tokens, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(ctx):
    """(B, H, n, d_h) -> (B, n, d)."""
    b, h, n, dh = ctx.shape
    return reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, h * dh))


def map_to_tokens(x):
    """(B, C, gh, gw) -> (B, gh*gw, C), row-major over the grid."""
    b, c, gh, gw = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, gh * gw, c))


def tokens_to_map(tokens, grid):
    """Exact inverse of map_to_tokens for the given (gh, gw) grid."""
    gh, gw = grid
    b, n, d = tokens.shape
    if n != gh * gw:
        raise ShapeMismatchError(
            "tokens_to_map: %d tokens do not fill a %dx%d grid" % (n, gh, gw))
    return transpose(reshape(tokens, (b, gh, gw, d)), (0, 3, 1, 2))


class PatchEmbed:
    """Non-overlapping patch flattening + linear projection + learned
    absolute position embedding.

    The position table carries ``n + g`` rows; the trailing ``g`` rows seed
    the longformer's global tokens.
    """

    def __init__(self, in_channels, spec, rng, dtype=np.float32):
        self.spec = spec
        self.in_channels = in_channels
        p, d = spec.patch, spec.dim
        g = spec.attn.global_tokens if spec.attn.mechanism == LONGFORMER2D else 0
        self.w = _param(rng, (in_channels * p * p, d), dtype=dtype)
        self.b = _zeros((d,), dtype=dtype)
        self.pos = _param(rng, (spec.n_tokens + g, d), dtype=dtype)

    def parameters(self):
        return [("patch.w", self.w), ("patch.b", self.b), ("patch.pos", self.pos)]

    def __call__(self, x):
        b, c, h, w = x.shape
        p = self.spec.patch
        if c != self.in_channels:
            raise ShapeMismatchError(
                "patch_embed: expected %d channels, got %d" % (self.in_channels, c))
        if h % p or w % p:
            raise ConfigurationError(
                "patch_embed: input %dx%d not divisible by patch %d" % (h, w, p))
        gh, gw = h // p, w // p
        if (gh, gw) != (self.spec.grid_h, self.spec.grid_w):
            raise ConfigurationError(
                "patch_embed: input yields grid %dx%d, spec says %dx%d"
                % (gh, gw, self.spec.grid_h, self.spec.grid_w))
        # (B,C,gh,p,gw,p) -> (B,gh,gw,C,p,p) -> (B,n,C*p*p)
        patches = reshape(
            transpose(reshape(x, (b, c, gh, p, gw, p)), (0, 2, 4, 1, 3, 5)),
            (b, gh * gw, c * p * p))
        tokens = linear(patches, self.w, self.b)
        return tokens + rows(self.pos, 0, self.spec.n_tokens)

    def global_rows(self):
        n = self.spec.n_tokens
        g = self.pos.shape[0] - n
        return rows(self.pos, n, n + g) if g else None


class MhsaParams:
    """Q/K/V/output projections, plus linformer projections when needed."""

    def __init__(self, dim, attn, n_tokens, rng, dtype=np.float32):
        self.dim = dim
        self.attn = attn
        self.wq = _param(rng, (dim, dim), dtype=dtype)
        self.bq = _zeros((dim,), dtype=dtype)
        self.wk = _param(rng, (dim, dim), dtype=dtype)
        self.bk = _zeros((dim,), dtype=dtype)
        self.wv = _param(rng, (dim, dim), dtype=dtype)
        self.bv = _zeros((dim,), dtype=dtype)
        self.wo = _param(rng, (dim, dim), dtype=dtype)
        self.bo = _zeros((dim,), dtype=dtype)
        self.ek = self.ev = None
        if attn.mechanism == LINFORMER:
            std = 1.0 / np.sqrt(attn.k_rank)
            self.ek = _param(rng, (attn.k_rank, n_tokens), std=std, dtype=dtype)
            self.ev = _param(rng, (attn.k_rank, n_tokens), std=std, dtype=dtype)

    def parameters(self):
        named = [("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
                 ("wv", self.wv), ("bv", self.bv), ("wo", self.wo), ("bo", self.bo)]
        if self.ek is not None:
            named += [("ek", self.ek), ("ev", self.ev)]
        return named


def full_mhsa(tokens, params, heads):
    """Standard multi-head attention over all token pairs."""
    d = tokens.shape[-1]
    dh = d // heads
    q = split_heads(linear(tokens, params.wq, params.bq), heads)
    k = split_heads(linear(tokens, params.wk, params.bk), heads)
    v = split_heads(linear(tokens, params.wv, params.bv), heads)
    scores = matmul(q * (1.0 / np.sqrt(dh)), transpose(k, (0, 1, 3, 2)))
    ctx = matmul(softmax(scores), v)
    return linear(merge_heads(ctx), params.wo, params.bo)


def linformer_mhsa(tokens, params, k_rank, heads):
    """Low-rank attention: K and V are projected to ``k_rank`` tokens."""
    b, n, d = tokens.shape
    if k_rank > n:
        raise ConfigurationError("linformer: k_rank %d > n_tokens %d" % (k_rank, n))
    dh = d // heads
    q = split_heads(linear(tokens, params.wq, params.bq), heads)
    kfull = linear(tokens, params.wk, params.bk)
    vfull = linear(tokens, params.wv, params.bv)
    klow = split_heads(matmul(params.ek, kfull), heads)
    vlow = split_heads(matmul(params.ev, vfull), heads)
    scores = matmul(q * (1.0 / np.sqrt(dh)), transpose(klow, (0, 1, 3, 2)))
    ctx = matmul(softmax(scores), vlow)
    return linear(merge_heads(ctx), params.wo, params.bo)


def window_offsets(w):
    half = (w - 1) // 2
    return [(dr, dc) for dr in range(-half, half + 1) for dc in range(-half, half + 1)]


def window_neighbor_sets(gh, gw, w, g=0):
    """Brute-force attended-index sets per content token (test oracle)."""
    half = (w - 1) // 2
    n = gh * gw
    sets = []
    for r in range(gh):
        for c in range(gw):
            s = {rr * gw + cc
                 for rr in range(max(0, r - half), min(gh, r + half + 1))
                 for cc in range(max(0, c - half), min(gw, c + half + 1))}
            s |= set(range(n, n + g))
            sets.append(s)
    return sets


def _offset_region(gh, gw, dr, dc):
    r0 = max(0, -dr)
    r1 = max(r0, min(gh, gh - dr))  # clamp so oversized offsets give empty slices
    c0 = max(0, -dc)
    c1 = max(c0, min(gw, gw - dc))
    return r0, r1, c0, c1


def _window_attention(q, k, v, grid, w, g):
    """Fused sliding-window attention over per-head Q/K/V of shape
    (B, H, n+g, d_h); returns (output tensor, saved weights for tests).

    Content token scores are materialized per token over at most w*w + g
    columns. The window loop runs one offset at a time, so no n*n buffer
    ever exists.
    """
    gh, gw = grid
    n = gh * gw
    b, h, t, dh = q.shape
    if t != n + g:
        raise ShapeMismatchError(
            "window attention: %d tokens != grid %dx%d plus %d globals" % (t, gh, gw, g))
    offsets = window_offsets(w)
    m = len(offsets) + g
    inv = 1.0 / np.sqrt(dh)

    qd, kd, vd = q.data * inv, k.data, v.data
    qg = qd[:, :, :n].reshape(b, h, gh, gw, dh)
    kg = kd[:, :, :n].reshape(b, h, gh, gw, dh)
    vg = vd[:, :, :n].reshape(b, h, gh, gw, dh)

    scores = np.full((b, h, gh, gw, m), -np.inf, dtype=qd.dtype)
    for j, (dr, dc) in enumerate(offsets):
        r0, r1, c0, c1 = _offset_region(gh, gw, dr, dc)
        scores[:, :, r0:r1, c0:c1, j] = np.einsum(
            "bhrcd,bhrcd->bhrc",
            qg[:, :, r0:r1, c0:c1], kg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc])
    for jg in range(g):
        scores[..., len(offsets) + jg] = np.einsum(
            "bhrcd,bhd->bhrc", qg, kd[:, :, n + jg])

    smax = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - smax)
    e[np.isneginf(scores)] = 0.0
    weights = e / e.sum(axis=-1, keepdims=True)
    del scores, e, smax

    og = np.zeros((b, h, gh, gw, dh), dtype=qd.dtype)
    for j, (dr, dc) in enumerate(offsets):
        r0, r1, c0, c1 = _offset_region(gh, gw, dr, dc)
        og[:, :, r0:r1, c0:c1] += (weights[:, :, r0:r1, c0:c1, j, None]
                                   * vg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc])
    for jg in range(g):
        og += weights[..., len(offsets) + jg, None] * vd[:, :, None, None, n + jg]
    out = np.zeros((b, h, t, dh), dtype=qd.dtype)
    out[:, :, :n] = og.reshape(b, h, n, dh)
    del og

    weights_g = None
    if g:
        # global rows attend every token, scores are (B,H,g,t): tiny
        sg = np.einsum("bhgd,bhtd->bhgt", qd[:, :, n:], kd)
        sg -= sg.max(axis=-1, keepdims=True)
        eg = np.exp(sg)
        weights_g = eg / eg.sum(axis=-1, keepdims=True)
        out[:, :, n:] = np.matmul(weights_g, vd)

    wt = Tensor(weights)  # tracked: the score footprint the tracker should see

    def bw(gout):
        gq = np.zeros_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        gog = np.ascontiguousarray(gout[:, :, :n]).reshape(b, h, gh, gw, dh)
        gqg = np.zeros((b, h, gh, gw, dh), dtype=qd.dtype)
        gkg = np.zeros_like(gqg)
        gvg = np.zeros_like(gqg)
        wdata = wt.data

        dweights = np.zeros_like(wdata)
        for j, (dr, dc) in enumerate(offsets):
            r0, r1, c0, c1 = _offset_region(gh, gw, dr, dc)
            dweights[:, :, r0:r1, c0:c1, j] = np.einsum(
                "bhrcd,bhrcd->bhrc",
                gog[:, :, r0:r1, c0:c1], vg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc])
            gvg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc] += \
                wdata[:, :, r0:r1, c0:c1, j, None] * gog[:, :, r0:r1, c0:c1]
        for jg in range(g):
            dweights[..., len(offsets) + jg] = np.einsum(
                "bhrcd,bhd->bhrc", gog, vd[:, :, n + jg])
            gv[:, :, n + jg] += np.einsum(
                "bhrc,bhrcd->bhd", wdata[..., len(offsets) + jg], gog)

        dscores = wdata * (dweights - (dweights * wdata).sum(axis=-1, keepdims=True))
        del dweights
        for j, (dr, dc) in enumerate(offsets):
            r0, r1, c0, c1 = _offset_region(gh, gw, dr, dc)
            ds = dscores[:, :, r0:r1, c0:c1, j, None]
            gqg[:, :, r0:r1, c0:c1] += ds * kg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc]
            gkg[:, :, r0 + dr:r1 + dr, c0 + dc:c1 + dc] += ds * qg[:, :, r0:r1, c0:c1]
        for jg in range(g):
            ds = dscores[..., len(offsets) + jg]
            gqg += ds[..., None] * kd[:, :, None, None, n + jg]
            gk[:, :, n + jg] += np.einsum("bhrc,bhrcd->bhd", ds, qg)
        del dscores
        gq[:, :, :n] += gqg.reshape(b, h, n, dh)
        gk[:, :, :n] += gkg.reshape(b, h, n, dh)
        gv[:, :, :n] += gvg.reshape(b, h, n, dh)
        del gqg, gkg, gvg

        if g:
            gout_g = gout[:, :, n:]
            dwg = np.einsum("bhgd,bhtd->bhgt", gout_g, vd)
            gv += np.einsum("bhgt,bhgd->bhtd", weights_g, gout_g)
            dsg = weights_g * (dwg - (dwg * weights_g).sum(axis=-1, keepdims=True))
            gq[:, :, n:] += np.matmul(dsg, kd)
            gk += np.einsum("bhgt,bhgd->bhtd", dsg, qd[:, :, n:])

        gq *= inv
        return gq, gk, gv, None

    out_t = record((q, k, v, wt), out, bw)
    return out_t, (wt.data, weights_g)


def longformer2d_mhsa(tokens, grid, params, window, heads,
                      global_rows=None, return_weights=False):
    """2-D sliding-window attention with optional global tokens.

    ``global_rows`` is a (g, d) Tensor of learned global token embeddings;
    global tokens attend everything, content tokens attend their clipped
    Chebyshev window plus all globals. Output keeps the n content tokens.
    """
    gh, gw = grid
    b, n, d = tokens.shape
    if n != gh * gw:
        raise ConfigurationError(
            "longformer2d: %d tokens != grid %dx%d" % (n, gh, gw))
    if window % 2 == 0 or window < 1:
        raise ConfigurationError("longformer2d: window must be odd, got %d" % window)
    g = 0 if global_rows is None else global_rows.shape[0]
    seq = tokens
    if g:
        seq = concat([tokens, broadcast_batch(global_rows, b)], axis=1)
    q = split_heads(linear(seq, params.wq, params.bq), heads)
    k = split_heads(linear(seq, params.wk, params.bk), heads)
    v = split_heads(linear(seq, params.wv, params.bv), heads)
    ctx, saved = _window_attention(q, k, v, grid, window, g)
    if g:
        ctx = _first_rows_axis2(ctx, n)
    out = linear(merge_heads(ctx), params.wo, params.bo)
    if return_weights:
        return out, saved
    return out


def _first_rows_axis2(t, n):
    out = t.data[:, :, :n]
    shape = t.data.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, :n] = g
        return (full,)

    return record((t,), out, bw)


class EvitBlock:
    """Pre-norm transformer block: t += MHSA(LN(t)); t += MLP(LN(t))."""

    def __init__(self, spec, rng, dtype=np.float32):
        spec.validate()
        self.spec = spec
        d = spec.dim
        self.ln1_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln1_b = _zeros((d,), dtype=dtype)
        self.ln2_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln2_b = _zeros((d,), dtype=dtype)
        self.mhsa = MhsaParams(d, spec.attn, spec.n_tokens, rng, dtype=dtype)
        hidden = int(round(spec.mlp_ratio * d))
        self.mlp_w1 = _param(rng, (d, hidden), dtype=dtype)
        self.mlp_b1 = _zeros((hidden,), dtype=dtype)
        self.mlp_w2 = _param(rng, (hidden, d), dtype=dtype)
        self.mlp_b2 = _zeros((d,), dtype=dtype)

    def parameters(self):
        named = [("ln1.g", self.ln1_g), ("ln1.b", self.ln1_b),
                 ("ln2.g", self.ln2_g), ("ln2.b", self.ln2_b),
                 ("mlp.w1", self.mlp_w1), ("mlp.b1", self.mlp_b1),
                 ("mlp.w2", self.mlp_w2), ("mlp.b2", self.mlp_b2)]
        named += [("attn." + k, v) for k, v in self.mhsa.parameters()]
        return named

    def attend(self, normed, global_rows=None):
        attn = self.spec.attn
        if attn.mechanism == FULL:
            return full_mhsa(normed, self.mhsa, attn.heads)
        if attn.mechanism == LINFORMER:
            return linformer_mhsa(normed, self.mhsa, attn.k_rank, attn.heads)
        return longformer2d_mhsa(
            normed, (self.spec.grid_h, self.spec.grid_w), self.mhsa,
            attn.window, attn.heads, global_rows=global_rows)

    def __call__(self, tokens, global_rows=None):
        t = tokens + self.attend(layer_norm(tokens, self.ln1_g, self.ln1_b),
                                 global_rows=global_rows)
        h = linear(layer_norm(t, self.ln2_g, self.ln2_b), self.mlp_w1, self.mlp_b1)
        return t + linear(gelu(h), self.mlp_w2, self.mlp_b2)

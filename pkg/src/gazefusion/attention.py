"""Self-contained attention kernels with hand-derived backward passes.

Every learned transformation in the model is assembled from the primitives
here: linear maps, layer normalization, GELU, scaled dot-product multi-head
attention, pre-normalization residual blocks, and mean pooling.  Forward
functions return ``(output, cache)``; the matching ``*_backward`` consumes the
upstream gradient plus the cache and returns input gradients and a parameter
gradient tree with the same structure as the parameter tree.

Shapes: batched internals take ``(B, L, d)`` arrays.  The thin public wrappers
(:func:`multi_head_attention`, :func:`cross_attention_block`,
:func:`encoder_block`, :func:`mean_pool`) also accept single instances,
either ``(L, d)`` arrays or :class:`TokenSet`.

All computations follow the dtype of their inputs, so the same code runs in
float32 for training and float64 for gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ValidationError

ROLE_TAGS = ("class", "patch", "gaze", "selected")

LN_EPS = 1e-5
FFN_EXPANSION = 4


# ---------------------------------------------------------------------------
# Parameter trees


def tree_flatten(tree: dict, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a nested dict of arrays into {'a.b.c': array} form."""
    flat: dict[str, np.ndarray] = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(tree_flatten(value, prefix=path + "."))
        else:
            flat[path] = value
    return flat


def tree_unflatten(flat: dict[str, np.ndarray]) -> dict:
    tree: dict = {}
    for path, value in flat.items():
        node = tree
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def tree_map(fn, tree: dict) -> dict:
    return {
        key: tree_map(fn, value) if isinstance(value, dict) else fn(value)
        for key, value in tree.items()
    }


def tree_zeros_like(tree: dict) -> dict:
    return tree_map(np.zeros_like, tree)


def tree_add_(dst: dict, src: dict) -> dict:
    """In-place elementwise add of one tree into another (same structure)."""
    for key, value in src.items():
        if isinstance(value, dict):
            tree_add_(dst[key], value)
        else:
            dst[key] += value
    return dst


# ---------------------------------------------------------------------------
# Tokens


@dataclass
class TokenSet:
    """Ordered embedding vectors with per-token role tags."""

    tokens: np.ndarray
    roles: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise ValidationError(f"tokens must be (L, d), got {self.tokens.shape}")
        if not np.isfinite(self.tokens).all():
            raise NumericError("token embeddings contain non-finite values")
        if not self.roles:
            self.roles = ("patch",) * self.tokens.shape[0]
        if len(self.roles) != self.tokens.shape[0]:
            raise ValidationError(
                f"{len(self.roles)} roles for {self.tokens.shape[0]} tokens"
            )
        unknown = set(self.roles) - set(ROLE_TAGS)
        if unknown:
            raise ValidationError(f"unknown role tags {sorted(unknown)}")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


# ---------------------------------------------------------------------------
# Elementwise primitives


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; rejects non-finite input."""
    scores = np.asarray(scores)
    if not np.isfinite(scores).all():
        raise NumericError("softmax input contains non-finite values")
    return _softmax(scores)


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward(x: np.ndarray):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(dy: np.ndarray, cache) -> np.ndarray:
    x, cdf = cache
    return dy * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x))


def layernorm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    xf = x.reshape(-1, x.shape[-1])
    y = xf @ w + b
    return y.reshape(x.shape[:-1] + (w.shape[1],)), (xf, w, x.shape)


def linear_backward(dy: np.ndarray, cache):
    xf, w, x_shape = cache
    dyf = dy.reshape(-1, dy.shape[-1])
    dw = xf.T @ dyf
    db = dyf.sum(axis=0)
    dx = (dyf @ w.T).reshape(x_shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Multi-head attention


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


def mha_forward(q: np.ndarray, kv: np.ndarray, p: dict, heads: int):
    """Scaled dot-product multi-head attention; q (B,Lq,d), kv (B,Lk,d)."""
    if kv.shape[1] == 0:
        raise ValidationError("attention requires at least one key/value token")
    d = q.shape[-1]
    if d % heads != 0:
        raise ValidationError(f"head count {heads} does not divide dim {d}")
    qp, q_cache = linear_forward(q, p["wq"], p["bq"])
    kp, k_cache = linear_forward(kv, p["wk"], p["bk"])
    vp, v_cache = linear_forward(kv, p["wv"], p["bv"])
    qh = _split_heads(qp, heads)
    kh = _split_heads(kp, heads)
    vh = _split_heads(vp, heads)
    scale = 1.0 / np.sqrt(d // heads)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    attn = _softmax(scores)
    ctx = _merge_heads(attn @ vh)
    out, o_cache = linear_forward(ctx, p["wo"], p["bo"])
    cache = (q_cache, k_cache, v_cache, o_cache, qh, kh, vh, attn, scale, heads)
    return out, cache


def mha_backward(dout: np.ndarray, cache):
    q_cache, k_cache, v_cache, o_cache, qh, kh, vh, attn, scale, heads = cache
    dctx, dwo, dbo = linear_backward(dout, o_cache)
    dctx_h = _split_heads(dctx, heads)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = _softmax_backward(dattn, attn) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq, dwq, dbq = linear_backward(_merge_heads(dqh), q_cache)
    dk, dwk, dbk = linear_backward(_merge_heads(dkh), k_cache)
    dv, dwv, dbv = linear_backward(_merge_heads(dvh), v_cache)
    dkv = dk + dv
    dp = {
        "wq": dwq, "bq": dbq,
        "wk": dwk, "bk": dbk,
        "wv": dwv, "bv": dbv,
        "wo": dwo, "bo": dbo,
    }
    return dq, dkv, dp


def ffn_forward(x: np.ndarray, p: dict):
    h, c1 = linear_forward(x, p["w1"], p["b1"])
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, p["w2"], p["b2"])
    return y, (c1, cg, c2)


def ffn_backward(dy: np.ndarray, cache):
    c1, cg, c2 = cache
    da, dw2, db2 = linear_backward(dy, c2)
    dh = gelu_backward(da, cg)
    dx, dw1, db1 = linear_backward(dh, c1)
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


# ---------------------------------------------------------------------------
# Residual blocks (pre-normalization, x4 GELU feed-forward)


def cross_block_forward(q: np.ndarray, kv: np.ndarray, p: dict, heads: int):
    nq, cq = layernorm_forward(q, p["ln_q"]["g"], p["ln_q"]["b"])
    nkv, ckv = layernorm_forward(kv, p["ln_kv"]["g"], p["ln_kv"]["b"])
    a, ca = mha_forward(nq, nkv, p["attn"], heads)
    x = q + a
    nx, cf = layernorm_forward(x, p["ln_f"]["g"], p["ln_f"]["b"])
    f, cffn = ffn_forward(nx, p["ffn"])
    return x + f, (cq, ckv, ca, cf, cffn)


def cross_block_backward(dout: np.ndarray, cache):
    cq, ckv, ca, cf, cffn = cache
    dnx, dffn = ffn_backward(dout, cffn)
    dx_ln, dgf, dbf = layernorm_backward(dnx, cf)
    dx = dout + dx_ln
    dnq, dnkv, dattn = mha_backward(dx, ca)
    dkv_ln, dgkv, dbkv = layernorm_backward(dnkv, ckv)
    dq_ln, dgq, dbq = layernorm_backward(dnq, cq)
    dq = dx + dq_ln
    dp = {
        "ln_q": {"g": dgq, "b": dbq},
        "ln_kv": {"g": dgkv, "b": dbkv},
        "attn": dattn,
        "ln_f": {"g": dgf, "b": dbf},
        "ffn": dffn,
    }
    return dq, dkv_ln, dp


def encoder_block_forward(x: np.ndarray, p: dict, heads: int):
    n, c1 = layernorm_forward(x, p["ln1"]["g"], p["ln1"]["b"])
    a, ca = mha_forward(n, n, p["attn"], heads)
    h = x + a
    n2, c2 = layernorm_forward(h, p["ln2"]["g"], p["ln2"]["b"])
    f, cffn = ffn_forward(n2, p["ffn"])
    return h + f, (c1, ca, c2, cffn)


def encoder_block_backward(dout: np.ndarray, cache):
    c1, ca, c2, cffn = cache
    dn2, dffn = ffn_backward(dout, cffn)
    dh_ln, dg2, db2 = layernorm_backward(dn2, c2)
    dh = dout + dh_ln
    dnq, dnkv, dattn = mha_backward(dh, ca)
    dn = dnq + dnkv
    dx_ln, dg1, db1 = layernorm_backward(dn, c1)
    dx = dh + dx_ln
    dp = {
        "ln1": {"g": dg1, "b": db1},
        "attn": dattn,
        "ln2": {"g": dg2, "b": db2},
        "ffn": dffn,
    }
    return dx, dp


def mean_pool_forward(tokens: np.ndarray):
    if tokens.shape[-2] == 0:
        raise ValidationError("mean_pool requires at least one token")
    return tokens.mean(axis=-2), tokens.shape


def mean_pool_backward(dy: np.ndarray, shape):
    l = shape[-2]
    return np.broadcast_to(np.expand_dims(dy, -2) / l, shape).copy()


# ---------------------------------------------------------------------------
# Initializers


def init_linear(rng: np.random.Generator, d_in: int, d_out: int,
                std: float = 0.02, zero: bool = False) -> dict:
    w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, std, (d_in, d_out))
    return {"w": w.astype(np.float32), "b": np.zeros(d_out, dtype=np.float32)}


def init_layernorm(d: int) -> dict:
    return {"g": np.ones(d, dtype=np.float32), "b": np.zeros(d, dtype=np.float32)}


def init_mha(rng: np.random.Generator, d: int, std: float = 0.02,
             zero_out: bool = True) -> dict:
    def w(zero=False):
        a = np.zeros((d, d)) if zero else rng.normal(0.0, std, (d, d))
        return a.astype(np.float32)

    return {
        "wq": w(), "bq": np.zeros(d, dtype=np.float32),
        "wk": w(), "bk": np.zeros(d, dtype=np.float32),
        "wv": w(), "bv": np.zeros(d, dtype=np.float32),
        # Zero output projection makes every residual block the identity at init.
        "wo": w(zero=zero_out), "bo": np.zeros(d, dtype=np.float32),
    }


def init_ffn(rng: np.random.Generator, d: int, std: float = 0.02,
             zero_out: bool = True) -> dict:
    hidden = FFN_EXPANSION * d
    return {
        "w1": rng.normal(0.0, std, (d, hidden)).astype(np.float32),
        "b1": np.zeros(hidden, dtype=np.float32),
        "w2": (np.zeros((hidden, d)) if zero_out
               else rng.normal(0.0, std, (hidden, d))).astype(np.float32),
        "b2": np.zeros(d, dtype=np.float32),
    }


def init_encoder_block(rng: np.random.Generator, d: int, std: float = 0.02) -> dict:
    return {
        "ln1": init_layernorm(d),
        "attn": init_mha(rng, d, std),
        "ln2": init_layernorm(d),
        "ffn": init_ffn(rng, d, std),
    }


def init_cross_block(rng: np.random.Generator, d: int, std: float = 0.02) -> dict:
    return {
        "ln_q": init_layernorm(d),
        "ln_kv": init_layernorm(d),
        "attn": init_mha(rng, d, std),
        "ln_f": init_layernorm(d),
        "ffn": init_ffn(rng, d, std),
    }


# ---------------------------------------------------------------------------
# Single-instance wrappers


def _as_batched(tokens) -> tuple[np.ndarray, bool, tuple[str, ...] | None]:
    if isinstance(tokens, TokenSet):
        return tokens.tokens[None], True, tokens.roles
    arr = np.asarray(tokens)
    if arr.ndim == 2:
        return arr[None], False, None
    return arr, False, None


def _like_input(out: np.ndarray, was_tokenset: bool, roles, was_2d: bool):
    if was_tokenset:
        return TokenSet(out[0], roles)
    return out[0] if was_2d else out


def multi_head_attention(queries, keys_values, params: dict, heads: int):
    """Attend queries over keys/values; output matches query length and type."""
    q, q_ts, q_roles = _as_batched(queries)
    kv, _, _ = _as_batched(keys_values)
    if q.shape[-1] != kv.shape[-1]:
        raise ValidationError(
            f"query dim {q.shape[-1]} != key/value dim {kv.shape[-1]}"
        )
    out, _ = mha_forward(q, kv, params, heads)
    return _like_input(out, q_ts, q_roles, np.asarray(getattr(queries, "tokens", queries)).ndim == 2)


def cross_attention_block(queries, keys_values, params: dict, heads: int):
    """Pre-norm residual cross-attention block followed by a residual FFN."""
    q, q_ts, q_roles = _as_batched(queries)
    kv, _, _ = _as_batched(keys_values)
    out, _ = cross_block_forward(q, kv, params, heads)
    return _like_input(out, q_ts, q_roles, np.asarray(getattr(queries, "tokens", queries)).ndim == 2)


def encoder_block(tokens, params: dict, heads: int):
    """Self-attention encoder block (queries = keys = values)."""
    x, x_ts, roles = _as_batched(tokens)
    out, _ = encoder_block_forward(x, params, heads)
    return _like_input(out, x_ts, roles, np.asarray(getattr(tokens, "tokens", tokens)).ndim == 2)


def mean_pool(tokens):
    """Arithmetic mean over the token axis."""
    if isinstance(tokens, TokenSet):
        out, _ = mean_pool_forward(tokens.tokens)
        return out
    arr = np.asarray(tokens)
    out, _ = mean_pool_forward(arr)
    return out

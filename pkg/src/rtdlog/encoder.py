"""Pre-LN transformer encoder in numpy with an explicit backward pass.

Layout per block::

    x = x + Attn(LN1(x))
    x = x + FFN(LN2(x))      FFN(u) = GELU(u W1 + b1) W2 + b2

followed by a final layer norm. Positions are fixed sinusoids. Padded
positions neither attend nor are attended to; their attention rows are
zero, so non-pad outputs do not depend on what the pad slots contain.

Parameters live in a flat ``dict[str, ndarray]`` so optimizers and the
checkpoint writer can treat every encoder the same way.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
import math

import numpy as np

LN_EPS = 1e-12
INIT_STD = 0.02
_GELU_C = float(np.sqrt(2.0 / np.pi))


class NumericError(FloatingPointError):
    """Non-finite activations or losses."""


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    width: int
    heads: int
    vocab_size: int
    ff_mult: int = 4
    max_len: int = 128
    emb_dim: int | None = None  # input embedding width; defaults to ``width``

    def __post_init__(self):
        for name in ("layers", "width", "heads", "vocab_size", "ff_mult", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.emb_dim is not None and self.emb_dim < 1:
            raise ValueError("emb_dim must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.emb_dim or self.width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "EncoderState":
        return EncoderState(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def init(config: EncoderConfig, seed: int = 0, dtype=np.float32, with_embedding: bool = True) -> EncoderState:
    """Weights ~ N(0, 0.02^2), biases and LN offsets 0, LN scales 1.

    ``with_embedding=False`` leaves out the token table for callers that
    share one embedding between several encoders.
    """
    rng = np.random.default_rng(seed)
    W, E, F = config.width, config.input_dim, config.width * config.ff_mult

    def normal(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(dtype)

    p: dict[str, np.ndarray] = {}
    if with_embedding:
        p["tok_emb"] = normal(config.vocab_size, E)
    if E != W:
        p["emb_proj.w"] = normal(E, W)
        p["emb_proj.b"] = np.zeros(W, dtype)
    for i in range(config.layers):
        p[f"L{i}.ln1.g"] = np.ones(W, dtype)
        p[f"L{i}.ln1.b"] = np.zeros(W, dtype)
        p[f"L{i}.attn.w_qkv"] = normal(W, 3 * W)
        p[f"L{i}.attn.b_qkv"] = np.zeros(3 * W, dtype)
        p[f"L{i}.attn.w_o"] = normal(W, W)
        p[f"L{i}.attn.b_o"] = np.zeros(W, dtype)
        p[f"L{i}.ln2.g"] = np.ones(W, dtype)
        p[f"L{i}.ln2.b"] = np.zeros(W, dtype)
        p[f"L{i}.ff.w1"] = normal(W, F)
        p[f"L{i}.ff.b1"] = np.zeros(F, dtype)
        p[f"L{i}.ff.w2"] = normal(F, W)
        p[f"L{i}.ff.b2"] = np.zeros(W, dtype)
    p["ln_f.g"] = np.ones(W, dtype)
    p["ln_f.b"] = np.zeros(W, dtype)
    return EncoderState(config, p)


@lru_cache(maxsize=16)
def _positions(max_len: int, width: int, dtype_str: str) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table = table.astype(dtype_str)
    table.setflags(write=False)
    return table


def positions(max_len: int, width: int, dtype=np.float64) -> np.ndarray:
    return _positions(max_len, width, np.dtype(dtype).str)


# ---------------------------------------------------------------- primitives


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_backward(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def masked_softmax(scores, key_valid, query_valid):
    """Softmax over valid keys; rows of pad queries are all zero."""
    s = np.where(key_valid[:, None, None, :], scores, -np.inf)
    m = s.max(-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    denom = e.sum(-1, keepdims=True)
    p = e / np.where(denom > 0, denom, 1.0)
    return p * query_valid[:, None, :, None]


def _dense(x, w, b=None):
    """``x @ w + b`` as one 2-D GEMM over all leading axes."""
    y = x.reshape(-1, x.shape[-1]) @ w
    if b is not None:
        y += b
    return y.reshape(x.shape[:-1] + (w.shape[1],))


def _check(x, where):
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite activations in {where}")


# ---------------------------------------------------------------- forward / backward


def forward(state: EncoderState, ids, pad_mask=None, emb=None, keep_cache: bool = False):
    """Hidden states of shape (batch, N, width).

    ``pad_mask`` is True at [PAD] positions. ``emb`` overrides the state's
    own token table (shared embeddings). With ``keep_cache`` the cache for
    :func:`backward` is returned as a second value.
    """
    cfg, p = state.config, state.params
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be a (batch, N) array")
    B, N = ids.shape
    if N > cfg.max_len:
        raise ValueError(f"sequence length {N} exceeds max_len {cfg.max_len}")
    table = p["tok_emb"] if emb is None else emb
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("token id outside vocabulary")
    valid = np.ones((B, N), bool) if pad_mask is None else ~np.asarray(pad_mask, bool)
    dtype = table.dtype
    W, H = cfg.width, cfg.heads
    dh = W // H
    scale = 1.0 / math.sqrt(dh)

    x0 = table[ids]
    if "emb_proj.w" in p:
        x = _dense(x0, p["emb_proj.w"], p["emb_proj.b"])
    else:
        x = x0
    x = x + positions(cfg.max_len, W, dtype)[:N]
    cache = {"ids": ids, "valid": valid, "x0": x0, "layers": []} if keep_cache else None

    for i in range(cfg.layers):
        pre = f"L{i}."
        a, ln1 = layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = _dense(a, p[pre + "attn.w_qkv"], p[pre + "attn.b_qkv"])
        qkv = qkv.reshape(B, N, 3, H, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, N, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        probs = masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, valid, valid)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, W)
        x = x + _dense(ctx, p[pre + "attn.w_o"], p[pre + "attn.b_o"])
        f_in, ln2 = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = _dense(f_in, p[pre + "ff.w1"], p[pre + "ff.b1"])
        g, t = gelu(u)
        x = x + _dense(g, p[pre + "ff.w2"], p[pre + "ff.b2"])
        _check(x, f"encoder layer {i}")
        if keep_cache:
            cache["layers"].append((a, ln1, q, k, v, probs, ctx, f_in, ln2, u, g, t))

    h, lnf = layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    _check(h, "final layer norm")
    if keep_cache:
        cache["lnf"] = lnf
        return h, cache
    return h


def backward(state: EncoderState, cache, d_hidden, emb_shape=None) -> dict[str, np.ndarray]:
    """Gradients for every parameter given dLoss/dHidden.

    The token-table gradient is always returned under ``"tok_emb"``; for a
    shared table pass its shape via ``emb_shape``.
    """
    cfg, p = state.config, state.params
    ids, valid = cache["ids"], cache["valid"]
    B, N = ids.shape
    W, H = cfg.width, cfg.heads
    dh = W // H
    scale = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}

    dx, grads["ln_f.g"], grads["ln_f.b"] = layer_norm_backward(d_hidden, p["ln_f.g"], cache["lnf"])

    for i in reversed(range(cfg.layers)):
        pre = f"L{i}."
        a, ln1, q, k, v, probs, ctx, f_in, ln2, u, g, t = cache["layers"][i]

        # feed-forward branch
        dg2 = dx.reshape(-1, W)
        grads[pre + "ff.w2"] = g.reshape(-1, g.shape[-1]).T @ dg2
        grads[pre + "ff.b2"] = dg2.sum(0)
        dgl = _dense(dx, p[pre + "ff.w2"].T)
        du = gelu_backward(dgl, u, t)
        grads[pre + "ff.w1"] = f_in.reshape(-1, W).T @ du.reshape(-1, du.shape[-1])
        grads[pre + "ff.b1"] = du.reshape(-1, du.shape[-1]).sum(0)
        df_in = _dense(du, p[pre + "ff.w1"].T)
        d, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = layer_norm_backward(df_in, p[pre + "ln2.g"], ln2)
        dx = dx + d

        # attention branch
        do = dx.reshape(-1, W)
        grads[pre + "attn.w_o"] = ctx.reshape(-1, W).T @ do
        grads[pre + "attn.b_o"] = do.sum(0)
        dctx = _dense(dx, p[pre + "attn.w_o"].T).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        dprobs = dctx @ v.transpose(0, 1, 3, 2)
        dv = probs.transpose(0, 1, 3, 2) @ dctx
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B * N, 3 * W)
        grads[pre + "attn.w_qkv"] = a.reshape(-1, W).T @ dqkv
        grads[pre + "attn.b_qkv"] = dqkv.sum(0)
        da = (dqkv @ p[pre + "attn.w_qkv"].T).reshape(B, N, W)
        d, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = layer_norm_backward(da, p[pre + "ln1.g"], ln1)
        dx = dx + d

    x0 = cache["x0"]
    if "emb_proj.w" in p:
        grads["emb_proj.w"] = x0.reshape(-1, x0.shape[-1]).T @ dx.reshape(-1, W)
        grads["emb_proj.b"] = dx.reshape(-1, W).sum(0)
        dx0 = _dense(dx, p["emb_proj.w"].T)
    else:
        dx0 = dx
    shape = emb_shape or p["tok_emb"].shape
    d_emb = np.zeros(shape, dx0.dtype)
    np.add.at(d_emb, ids.ravel(), dx0.reshape(-1, shape[1]))
    grads["tok_emb"] = d_emb
    for name, gr in grads.items():
        _check(gr, f"gradient {name}")
    return grads

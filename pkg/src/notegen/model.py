"""Miniature trainable transformers in plain numpy.

Two architectures over the same building blocks:

* ``encoder_decoder`` — bidirectional encoder over the serialized context,
  causal decoder over the note, cross-attention between them.
* ``decoder_only_compressed`` — a single causal stream with the context
  prepended to the note; self-attention keys/values are shortened by strided
  mean-pooling (factor ``compression_factor``), and position q may attend to
  a pooled slot only when every position inside that slot is at or before q.

Both use pre-layer-norm blocks, sinusoidal positions, a ReLU feed-forward,
and an embedding table shared with the output projection. Forward and
backward are written out by hand; gradients are exact (checked against
central finite differences in the test suite). Masked softmax multiplies by
the mask after exponentiation, so excluded positions contribute exactly
zero and causality holds bit-for-bit rather than approximately.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tokenizer import EOS_ID, PAD_ID, TokenSeq

ARCH_ENCODER_DECODER = "encoder_decoder"
ARCH_DECODER_ONLY = "decoder_only_compressed"
ARCHS = (ARCH_ENCODER_DECODER, ARCH_DECODER_ONLY)

LN_EPS = 1e-5

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    arch: str = ARCH_ENCODER_DECODER
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 4096
    max_len: int = 1024
    compression_factor: int = 3
    dropout: float = 0.0
    init_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.vocab_size <= EOS_ID:
            raise ValueError("vocab_size must cover the reserved ids")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.compression_factor < 1:
            raise ValueError("compression_factor must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- parameters ---------------------------------------------------------------

def _attn_shapes(prefix, d):
    return [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]


def _ln_shapes(prefix, d):
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ff_shapes(prefix, d, d_ff):
    return [
        (f"{prefix}.w1", (d, d_ff)),
        (f"{prefix}.b1", (d_ff,)),
        (f"{prefix}.w2", (d_ff, d)),
        (f"{prefix}.b2", (d,)),
    ]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered name → shape map; the order also fixes the checkpoint layout."""
    d, ff = cfg.d_model, cfg.d_ff
    shapes: list[tuple[str, tuple]] = [("embed", (cfg.vocab_size, d))]
    if cfg.arch == ARCH_ENCODER_DECODER:
        for i in range(cfg.n_layers):
            shapes += _ln_shapes(f"enc{i}.ln_attn", d)
            shapes += _attn_shapes(f"enc{i}.attn", d)
            shapes += _ln_shapes(f"enc{i}.ln_ff", d)
            shapes += _ff_shapes(f"enc{i}.ff", d, ff)
        shapes += _ln_shapes("enc_ln_f", d)
    for i in range(cfg.n_layers):
        shapes += _ln_shapes(f"dec{i}.ln_self", d)
        shapes += _attn_shapes(f"dec{i}.self", d)
        if cfg.arch == ARCH_ENCODER_DECODER:
            shapes += _ln_shapes(f"dec{i}.ln_cross", d)
            shapes += _attn_shapes(f"dec{i}.cross", d)
        shapes += _ln_shapes(f"dec{i}.ln_ff", d)
        shapes += _ff_shapes(f"dec{i}.ff", d, ff)
    shapes += _ln_shapes("ln_f", d)
    return dict(shapes)


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig) -> ModelParams:
    """Deterministic init: gains 1, biases 0, weights scaled normal.

    With init_scale=0 every weight is zero and the model emits a uniform
    softmax at every position (the output projection is the zero embedding).
    """
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.np_dtype
    params: ModelParams = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dt)
        elif leaf in ("b", "b1", "b2"):
            params[name] = np.zeros(shape, dtype=dt)
        else:
            fan_in = cfg.d_model if name == "embed" else shape[0]
            scale = cfg.init_scale / math.sqrt(fan_in)
            params[name] = (rng.standard_normal(shape) * scale).astype(dt)
    return params


_PE_CACHE: dict[tuple, np.ndarray] = {}


def positional_encoding(length: int, d_model: int, dtype) -> np.ndarray:
    key = (length, d_model, np.dtype(dtype).name)
    if key not in _PE_CACHE:
        pos = np.arange(length, dtype=np.float64)[:, None]
        dim = np.arange(d_model, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d_model)
        pe = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


# --- primitive layers -----------------------------------------------------------

def _ln_fwd(p, pre, x):
    g, b = p[f"{pre}.g"], p[f"{pre}.b"]
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return g * xh + b, (pre, xh, inv, g)


def _ln_bwd(cache, dy, grads):
    pre, xh, inv, g = cache
    axes = tuple(range(dy.ndim - 1))
    grads[f"{pre}.g"] += (dy * xh).sum(axis=axes)
    grads[f"{pre}.b"] += dy.sum(axis=axes)
    dxh = dy * g
    return inv * (
        dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True)
    )


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _masked_softmax(s, mask):
    """Masked positions weigh exactly zero; all-masked rows give zero rows."""
    zero = s.dtype.type(0)
    neg = np.where(mask, s, s.dtype.type(-np.inf))
    smax = neg.max(-1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, zero)
    e = np.exp(np.where(mask, s - smax, zero)) * mask
    denom = e.sum(-1, keepdims=True)
    return e / np.maximum(denom, np.finfo(s.dtype).tiny)


def _softmax_bwd(w, dw):
    return w * (dw - (dw * w).sum(-1, keepdims=True))


def _pool_counts(length, c, dtype):
    n = -(-length // c)
    counts = np.full((n, 1), float(c), dtype=dtype)
    rem = length % c
    if rem:
        counts[-1, 0] = float(rem)
    return counts


def _pool(x, c):
    """Strided mean over the length axis of (B, H, L, dh); L → ceil(L/c)."""
    b, h, length, dh = x.shape
    counts = _pool_counts(length, c, x.dtype)
    n = counts.shape[0]
    if n * c != length:
        pad = np.zeros((b, h, n * c - length, dh), dtype=x.dtype)
        x = np.concatenate([x, pad], axis=2)
    sums = x.reshape(b, h, n, c, dh).sum(axis=3)
    return sums / counts, counts


def _pool_bwd(dpooled, counts, c, length):
    b, h, n, dh = dpooled.shape
    per = dpooled / counts
    expanded = np.broadcast_to(per[:, :, :, None, :], (b, h, n, c, dh))
    return expanded.reshape(b, h, n * c, dh)[:, :, :length, :]


def causal_mask(n_queries: int, n_keys: int) -> np.ndarray:
    """(Tq, Tk) bool mask; queries align with the trailing n_queries positions."""
    qpos = np.arange(n_keys - n_queries, n_keys)
    return qpos[:, None] >= np.arange(n_keys)[None, :]


def compressed_causal_mask(n_queries: int, key_len: int, c: int) -> np.ndarray:
    """Query q sees pooled slot j only when the slot ends at or before q."""
    n_slots = -(-key_len // c)
    qpos = np.arange(key_len - n_queries, key_len)
    slot_last = (np.arange(n_slots) + 1) * c - 1
    return qpos[:, None] >= slot_last[None, :]


def _attn_core_fwd(q3, k3, v3, mask):
    scale = 1.0 / math.sqrt(q3.shape[-1])
    s = (q3 @ k3.transpose(0, 1, 3, 2)) * scale
    w = _masked_softmax(s, mask)
    out = w @ v3
    return out, (q3, k3, v3, w, scale)


def _attn_core_bwd(cache, dout):
    q3, k3, v3, w, scale = cache
    dw = dout @ v3.transpose(0, 1, 3, 2)
    dv3 = w.transpose(0, 1, 3, 2) @ dout
    ds = _softmax_bwd(w, dw) * scale
    dq3 = ds @ k3
    dk3 = ds.transpose(0, 1, 3, 2) @ q3
    return dq3, dk3, dv3


def _mha_fwd(p, pre, xq, xkv, mask, n_heads, compress=None):
    wq, wk, wv, wo = (p[f"{pre}.{n}"] for n in ("wq", "wk", "wv", "wo"))
    q3 = _split_heads(xq @ wq, n_heads)
    k3 = _split_heads(xkv @ wk, n_heads)
    v3 = _split_heads(xkv @ wv, n_heads)
    key_len = k3.shape[2]
    counts = None
    if compress is not None:
        k3, counts = _pool(k3, compress)
        v3, _ = _pool(v3, compress)
    core_out, core_cache = _attn_core_fwd(q3, k3, v3, mask)
    merged = _merge_heads(core_out)
    out = merged @ wo
    cache = (pre, xq, xkv, merged, core_cache, counts, compress, key_len,
             (wq, wk, wv, wo), n_heads)
    return out, cache


def _mha_bwd(cache, dout, grads):
    (pre, xq, xkv, merged, core_cache, counts, compress, key_len,
     (wq, wk, wv, wo), n_heads) = cache
    grads[f"{pre}.wo"] += np.einsum("btd,bte->de", merged, dout)
    da = _split_heads(dout @ wo.T, n_heads)
    dq3, dk3, dv3 = _attn_core_bwd(core_cache, da)
    if compress is not None:
        dk3 = _pool_bwd(dk3, counts, compress, key_len)
        dv3 = _pool_bwd(dv3, counts, compress, key_len)
    dqf = _merge_heads(dq3)
    dkf = _merge_heads(dk3)
    dvf = _merge_heads(dv3)
    grads[f"{pre}.wq"] += np.einsum("btd,bte->de", xq, dqf)
    grads[f"{pre}.wk"] += np.einsum("btd,bte->de", xkv, dkf)
    grads[f"{pre}.wv"] += np.einsum("btd,bte->de", xkv, dvf)
    dxq = dqf @ wq.T
    dxkv = dkf @ wk.T + dvf @ wv.T
    return dxq, dxkv


def _ff_fwd(p, pre, x):
    w1, b1 = p[f"{pre}.w1"], p[f"{pre}.b1"]
    w2, b2 = p[f"{pre}.w2"], p[f"{pre}.b2"]
    pre_act = x @ w1 + b1
    r = np.maximum(pre_act, 0)
    return r @ w2 + b2, (pre, x, pre_act, r, w1, w2)


def _ff_bwd(cache, dy, grads):
    pre, x, pre_act, r, w1, w2 = cache
    grads[f"{pre}.w2"] += np.einsum("btf,btd->fd", r, dy)
    grads[f"{pre}.b2"] += dy.sum(axis=(0, 1))
    dpre = (dy @ w2.T) * (pre_act > 0)
    grads[f"{pre}.w1"] += np.einsum("btd,btf->df", x, dpre)
    grads[f"{pre}.b1"] += dpre.sum(axis=(0, 1))
    return dpre @ w1.T


def _dropout_fwd(x, rate, rng):
    if rng is None or rate <= 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


def _dropout_bwd(dy, keep):
    return dy if keep is None else dy * keep


# --- batching -------------------------------------------------------------------

@dataclass
class Batch:
    """Padded token arrays plus the positions whose logits carry the loss.

    For the encoder-decoder the decoder input is the EOS-started shifted
    target; for the decoder-only arch dec_ids is context ++ target ++ EOS and
    label_pos points at the positions that predict each target token.
    Padding (label_mask False) contributes exactly zero loss.
    """

    dec_ids: np.ndarray          # (B, T) decoder-stream token ids
    labels: np.ndarray           # (B, L) target ids to predict
    label_pos: np.ndarray        # (B, L) dec positions predicting labels
    label_mask: np.ndarray       # (B, L) bool
    enc_ids: np.ndarray | None = None   # (B, S), encoder-decoder only
    enc_mask: np.ndarray | None = None  # (B, S) bool

    @property
    def n_target_tokens(self) -> int:
        return int(self.label_mask.sum())


def make_batch(
    cfg: ModelConfig,
    pairs: Sequence[tuple[TokenSeq, TokenSeq]],
    append_eos: bool = True,
) -> Batch:
    """Assemble (input_tokens, target_tokens) pairs into padded arrays.

    append_eos=True teaches the model to terminate: the label row is
    target ++ [EOS].
    """
    if not pairs:
        raise ValueError("empty batch")
    extra = 1 if append_eos else 0
    targets = [list(t) + [EOS_ID] * extra for _, t in pairs]
    n_lab = max(len(t) for t in targets)
    if n_lab == 0:
        raise ValueError("batch has no target tokens")
    b = len(pairs)

    labels = np.full((b, n_lab), PAD_ID, dtype=np.int64)
    label_mask = np.zeros((b, n_lab), dtype=bool)
    for i, t in enumerate(targets):
        labels[i, : len(t)] = t
        label_mask[i, : len(t)] = True

    if cfg.arch == ARCH_ENCODER_DECODER:
        s = max(1, max(len(inp) for inp, _ in pairs))
        t_dec = n_lab  # EOS start + target[:-1] has the same length as labels
        if s > cfg.max_len or t_dec > cfg.max_len:
            raise ValueError(
                f"sequence too long for max_len={cfg.max_len}: enc {s}, dec {t_dec}"
            )
        enc_ids = np.full((b, s), PAD_ID, dtype=np.int64)
        enc_mask = np.zeros((b, s), dtype=bool)
        dec_ids = np.full((b, t_dec), PAD_ID, dtype=np.int64)
        for i, (inp, _) in enumerate(pairs):
            enc_ids[i, : len(inp)] = inp
            enc_mask[i, : len(inp)] = True
            shifted = [EOS_ID] + targets[i][:-1]
            dec_ids[i, : len(shifted)] = shifted
        label_pos = np.broadcast_to(np.arange(n_lab), (b, n_lab)).copy()
        return Batch(dec_ids, labels, label_pos, label_mask, enc_ids, enc_mask)

    # decoder-only: z = input ++ target (++ EOS)
    for inp, _ in pairs:
        if not inp:
            raise ValueError("decoder-only arch needs a non-empty input")
    streams = [list(inp) + targets[i] for i, (inp, _) in enumerate(pairs)]
    t_dec = max(len(z) for z in streams)
    if t_dec > cfg.max_len:
        raise ValueError(f"sequence too long for max_len={cfg.max_len}: {t_dec}")
    dec_ids = np.full((b, t_dec), PAD_ID, dtype=np.int64)
    label_pos = np.zeros((b, n_lab), dtype=np.int64)
    for i, z in enumerate(streams):
        dec_ids[i, : len(z)] = z
        p = len(pairs[i][0])
        label_pos[i] = np.minimum(p - 1 + np.arange(n_lab), len(z) - 1)
    return Batch(dec_ids, labels, label_pos, label_mask)


# --- forward / backward -----------------------------------------------------------

def _embed_fwd(params, cfg, ids, rng):
    dt = cfg.np_dtype
    pe = positional_encoding(cfg.max_len, cfg.d_model, dt)
    sq = math.sqrt(cfg.d_model)
    h = params["embed"][ids] * dt(sq) + pe[: ids.shape[1]]
    h, keep = _dropout_fwd(h, cfg.dropout, rng)
    return h, keep


def forward(params: ModelParams, cfg: ModelConfig, batch: Batch, rng=None):
    """Logits at every label position: shape (B, L, vocab). Returns (logits, cache)."""
    if batch.dec_ids.shape[1] > cfg.max_len:
        raise ValueError("decoder stream exceeds max_len")
    if int(batch.dec_ids.max()) >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    enc_out = None
    enc_mask4 = None
    enc_caches = []
    enc_keep = None
    enc_lnf_cache = None
    if cfg.arch == ARCH_ENCODER_DECODER:
        h, enc_keep = _embed_fwd(params, cfg, batch.enc_ids, rng)
        enc_mask4 = batch.enc_mask[:, None, None, :]
        for i in range(cfg.n_layers):
            a_in, c_ln1 = _ln_fwd(params, f"enc{i}.ln_attn", h)
            a_out, c_attn = _mha_fwd(
                params, f"enc{i}.attn", a_in, a_in, enc_mask4, cfg.n_heads
            )
            a_out, k1 = _dropout_fwd(a_out, cfg.dropout, rng)
            h = h + a_out
            f_in, c_ln2 = _ln_fwd(params, f"enc{i}.ln_ff", h)
            f_out, c_ff = _ff_fwd(params, f"enc{i}.ff", f_in)
            f_out, k2 = _dropout_fwd(f_out, cfg.dropout, rng)
            h = h + f_out
            enc_caches.append((c_ln1, c_attn, k1, c_ln2, c_ff, k2))
        enc_out, enc_lnf_cache = _ln_fwd(params, "enc_ln_f", h)

    h, dec_keep = _embed_fwd(params, cfg, batch.dec_ids, rng)
    t_dec = batch.dec_ids.shape[1]
    if cfg.arch == ARCH_ENCODER_DECODER:
        self_mask = causal_mask(t_dec, t_dec)[None, None]
        compress = None
    else:
        self_mask = compressed_causal_mask(t_dec, t_dec, cfg.compression_factor)[
            None, None
        ]
        compress = cfg.compression_factor

    dec_caches = []
    for i in range(cfg.n_layers):
        a_in, c_ln1 = _ln_fwd(params, f"dec{i}.ln_self", h)
        a_out, c_self = _mha_fwd(
            params, f"dec{i}.self", a_in, a_in, self_mask, cfg.n_heads, compress
        )
        a_out, k1 = _dropout_fwd(a_out, cfg.dropout, rng)
        h = h + a_out
        c_ln2 = c_cross = k2 = None
        if cfg.arch == ARCH_ENCODER_DECODER:
            x_in, c_ln2 = _ln_fwd(params, f"dec{i}.ln_cross", h)
            x_out, c_cross = _mha_fwd(
                params, f"dec{i}.cross", x_in, enc_out, enc_mask4, cfg.n_heads
            )
            x_out, k2 = _dropout_fwd(x_out, cfg.dropout, rng)
            h = h + x_out
        f_in, c_ln3 = _ln_fwd(params, f"dec{i}.ln_ff", h)
        f_out, c_ff = _ff_fwd(params, f"dec{i}.ff", f_in)
        f_out, k3 = _dropout_fwd(f_out, cfg.dropout, rng)
        h = h + f_out
        dec_caches.append((c_ln1, c_self, k1, c_ln2, c_cross, k2, c_ln3, c_ff, k3))

    hf, lnf_cache = _ln_fwd(params, "ln_f", h)
    bidx = np.arange(hf.shape[0])[:, None]
    hg = hf[bidx, batch.label_pos]
    logits = hg @ params["embed"].T
    cache = {
        "enc_caches": enc_caches,
        "enc_keep": enc_keep,
        "enc_lnf": enc_lnf_cache,
        "enc_out": enc_out,
        "enc_mask4": enc_mask4,
        "dec_caches": dec_caches,
        "dec_keep": dec_keep,
        "lnf": lnf_cache,
        "hg": hg,
        "bidx": bidx,
        "dec_shape": h.shape,
    }
    return logits, cache


def _ce_loss(logits, labels, mask):
    """Mean NLL over masked positions (nats) and d(loss)/d(logits)."""
    dt = logits.dtype
    m = logits.max(-1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    sez = ez.sum(-1, keepdims=True)
    z_true = np.take_along_axis(z, labels[..., None], -1)[..., 0]
    nll = np.log(sez)[..., 0] - z_true
    count = int(mask.sum())
    denom = max(count, 1)
    loss = float(np.sum(nll * mask, dtype=np.float64) / denom)

    dlogits = ez / sez
    idx = labels[..., None]
    np.put_along_axis(dlogits, idx, np.take_along_axis(dlogits, idx, -1) - 1, -1)
    dlogits *= (mask.astype(dt) / dt.type(denom))[..., None]
    return loss, dlogits


def loss(params: ModelParams, cfg: ModelConfig, batch: Batch) -> float:
    logits, _ = forward(params, cfg, batch)
    value, _ = _ce_loss(logits, batch.labels, batch.label_mask)
    return value


def backward(params, cfg, batch, cache, dlogits) -> ModelParams:
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    emb = params["embed"]
    sq = cfg.np_dtype(math.sqrt(cfg.d_model))

    grads["embed"] += np.einsum("blv,bld->vd", dlogits, cache["hg"])
    dhg = dlogits @ emb
    dhf = np.zeros(cache["dec_shape"], dtype=dhg.dtype)
    np.add.at(dhf, (cache["bidx"], batch.label_pos), dhg)
    dh = _ln_bwd(cache["lnf"], dhf, grads)

    denc_out = None
    for i in reversed(range(cfg.n_layers)):
        c_ln1, c_self, k1, c_ln2, c_cross, k2, c_ln3, c_ff, k3 = cache["dec_caches"][i]
        df = _ff_bwd(c_ff, _dropout_bwd(dh, k3), grads)
        dh = dh + _ln_bwd(c_ln3, df, grads)
        if c_cross is not None:
            dxq, dxkv = _mha_bwd(c_cross, _dropout_bwd(dh, k2), grads)
            denc_out = dxkv if denc_out is None else denc_out + dxkv
            dh = dh + _ln_bwd(c_ln2, dxq, grads)
        dxq, dxkv = _mha_bwd(c_self, _dropout_bwd(dh, k1), grads)
        dh = dh + _ln_bwd(c_ln1, dxq + dxkv, grads)
    dh = _dropout_bwd(dh, cache["dec_keep"])
    np.add.at(grads["embed"], batch.dec_ids, dh * sq)

    if cfg.arch == ARCH_ENCODER_DECODER:
        dh = _ln_bwd(cache["enc_lnf"], denc_out, grads)
        for i in reversed(range(cfg.n_layers)):
            c_ln1, c_attn, k1, c_ln2, c_ff, k2 = cache["enc_caches"][i]
            df = _ff_bwd(c_ff, _dropout_bwd(dh, k2), grads)
            dh = dh + _ln_bwd(c_ln2, df, grads)
            dxq, dxkv = _mha_bwd(c_attn, _dropout_bwd(dh, k1), grads)
            dh = dh + _ln_bwd(c_ln1, dxq + dxkv, grads)
        dh = _dropout_bwd(dh, cache["enc_keep"])
        np.add.at(grads["embed"], batch.enc_ids, dh * sq)

    return grads


def loss_and_grads(params, cfg, batch, rng=None):
    logits, cache = forward(params, cfg, batch, rng)
    value, dlogits = _ce_loss(logits, batch.labels, batch.label_mask)
    grads = backward(params, cfg, batch, cache, dlogits)
    return value, grads


def target_logits(
    params: ModelParams,
    cfg: ModelConfig,
    context_tokens: TokenSeq,
    target_tokens: TokenSeq,
) -> np.ndarray:
    """Teacher-forced logits, shape (len(target)+1, vocab).

    Row i is the next-token distribution after target_tokens[:i]; the final
    row predicts the continuation after the full target.
    """
    n = len(target_tokens)
    if cfg.arch == ARCH_ENCODER_DECODER:
        dec = [EOS_ID] + list(target_tokens)
        enc_ids = np.asarray([context_tokens], dtype=np.int64)
        enc_mask = np.ones_like(enc_ids, dtype=bool)
        batch = Batch(
            dec_ids=np.asarray([dec], dtype=np.int64),
            labels=np.zeros((1, n + 1), dtype=np.int64),
            label_pos=np.arange(n + 1, dtype=np.int64)[None, :],
            label_mask=np.ones((1, n + 1), dtype=bool),
            enc_ids=enc_ids,
            enc_mask=enc_mask,
        )
    else:
        if not context_tokens:
            raise ValueError("decoder-only arch needs a non-empty context")
        z = list(context_tokens) + list(target_tokens)
        p = len(context_tokens)
        batch = Batch(
            dec_ids=np.asarray([z], dtype=np.int64),
            labels=np.zeros((1, n + 1), dtype=np.int64),
            label_pos=(p - 1 + np.arange(n + 1, dtype=np.int64))[None, :],
            label_mask=np.ones((1, n + 1), dtype=bool),
        )
    logits, _ = forward(params, cfg, batch)
    return logits[0]


# --- incremental decoding ----------------------------------------------------------

@dataclass
class DecodeState:
    """Per-layer raw K/V caches for one partially decoded sequence.

    Functional: decode_step returns a new state and never mutates the old
    one, so beam hypotheses may share a common prefix state.
    """

    pos: int
    self_k: list
    self_v: list
    cross_k: list | None = None
    cross_v: list | None = None
    enc_mask4: np.ndarray | None = None


def _encode_context(params, cfg, context_tokens):
    enc_ids = np.asarray([context_tokens], dtype=np.int64)
    h, _ = _embed_fwd(params, cfg, enc_ids, None)
    mask4 = np.ones((1, 1, 1, enc_ids.shape[1]), dtype=bool)
    for i in range(cfg.n_layers):
        a_in, _ = _ln_fwd(params, f"enc{i}.ln_attn", h)
        a_out, _ = _mha_fwd(params, f"enc{i}.attn", a_in, a_in, mask4, cfg.n_heads)
        h = h + a_out
        f_in, _ = _ln_fwd(params, f"enc{i}.ln_ff", h)
        f_out, _ = _ff_fwd(params, f"enc{i}.ff", f_in)
        h = h + f_out
    enc_out, _ = _ln_fwd(params, "enc_ln_f", h)
    return enc_out, mask4


def _project_kv(params, pre, x, n_heads):
    k = _split_heads(x @ params[f"{pre}.wk"], n_heads)
    v = _split_heads(x @ params[f"{pre}.wv"], n_heads)
    return k, v


def init_decode_state(params, cfg, context_tokens: TokenSeq):
    """Prefill on the context; returns (state, logits for the first note token)."""
    if not context_tokens:
        raise ValueError("context must be non-empty")
    if cfg.arch == ARCH_ENCODER_DECODER:
        enc_out, enc_mask4 = _encode_context(params, cfg, context_tokens)
        cross_k, cross_v = [], []
        for i in range(cfg.n_layers):
            k, v = _project_kv(params, f"dec{i}.cross", enc_out, cfg.n_heads)
            cross_k.append(k)
            cross_v.append(v)
        dh = cfg.d_head
        empty = np.zeros((1, cfg.n_heads, 0, dh), dtype=cfg.np_dtype)
        state = DecodeState(
            pos=0,
            self_k=[empty] * cfg.n_layers,
            self_v=[empty] * cfg.n_layers,
            cross_k=cross_k,
            cross_v=cross_v,
            enc_mask4=enc_mask4,
        )
        return decode_step(params, cfg, state, EOS_ID)

    # decoder-only: run the whole context through the stream at once
    p_len = len(context_tokens)
    if p_len >= cfg.max_len:
        raise ValueError("context exceeds max_len")
    ids = np.asarray([context_tokens], dtype=np.int64)
    h, _ = _embed_fwd(params, cfg, ids, None)
    c = cfg.compression_factor
    mask = compressed_causal_mask(p_len, p_len, c)[None, None]
    self_k, self_v = [], []
    for i in range(cfg.n_layers):
        a_in, _ = _ln_fwd(params, f"dec{i}.ln_self", h)
        k, v = _project_kv(params, f"dec{i}.self", a_in, cfg.n_heads)
        self_k.append(k)
        self_v.append(v)
        q3 = _split_heads(a_in @ params[f"dec{i}.self.wq"], cfg.n_heads)
        kc, _ = _pool(k, c)
        vc, _ = _pool(v, c)
        core, _ = _attn_core_fwd(q3, kc, vc, mask)
        h = h + _merge_heads(core) @ params[f"dec{i}.self.wo"]
        f_in, _ = _ln_fwd(params, f"dec{i}.ln_ff", h)
        f_out, _ = _ff_fwd(params, f"dec{i}.ff", f_in)
        h = h + f_out
    hf, _ = _ln_fwd(params, "ln_f", h)
    logits = hf[0, -1] @ params["embed"].T
    state = DecodeState(pos=p_len, self_k=self_k, self_v=self_v)
    return state, logits


def decode_step(params, cfg, state: DecodeState, token: int):
    """Advance one token; returns (new_state, next-token logits)."""
    if state.pos >= cfg.max_len:
        raise ValueError("decode exceeded max_len")
    dt = cfg.np_dtype
    pe = positional_encoding(cfg.max_len, cfg.d_model, dt)
    x = params["embed"][np.asarray([[token]])] * dt(math.sqrt(cfg.d_model))
    x = x + pe[state.pos : state.pos + 1]

    new_k, new_v = [], []
    for i in range(cfg.n_layers):
        a_in, _ = _ln_fwd(params, f"dec{i}.ln_self", x)
        k1, v1 = _project_kv(params, f"dec{i}.self", a_in, cfg.n_heads)
        ks = np.concatenate([state.self_k[i], k1], axis=2)
        vs = np.concatenate([state.self_v[i], v1], axis=2)
        new_k.append(ks)
        new_v.append(vs)
        q3 = _split_heads(a_in @ params[f"dec{i}.self.wq"], cfg.n_heads)
        if cfg.arch == ARCH_DECODER_ONLY:
            c = cfg.compression_factor
            kc, _ = _pool(ks, c)
            vc, _ = _pool(vs, c)
            mask = compressed_causal_mask(1, ks.shape[2], c)[None, None]
            core, _ = _attn_core_fwd(q3, kc, vc, mask)
        else:
            ones = np.ones((1, 1, 1, ks.shape[2]), dtype=bool)
            core, _ = _attn_core_fwd(q3, ks, vs, ones)
        x = x + _merge_heads(core) @ params[f"dec{i}.self.wo"]
        if cfg.arch == ARCH_ENCODER_DECODER:
            x_in, _ = _ln_fwd(params, f"dec{i}.ln_cross", x)
            q3 = _split_heads(x_in @ params[f"dec{i}.cross.wq"], cfg.n_heads)
            core, _ = _attn_core_fwd(
                q3, state.cross_k[i], state.cross_v[i], state.enc_mask4
            )
            x = x + _merge_heads(core) @ params[f"dec{i}.cross.wo"]
        f_in, _ = _ln_fwd(params, f"dec{i}.ln_ff", x)
        f_out, _ = _ff_fwd(params, f"dec{i}.ff", f_in)
        x = x + f_out
    hf, _ = _ln_fwd(params, "ln_f", x)
    logits = hf[0, 0] @ params["embed"].T
    new_state = DecodeState(
        pos=state.pos + 1,
        self_k=new_k,
        self_v=new_v,
        cross_k=state.cross_k,
        cross_v=state.cross_v,
        enc_mask4=state.enc_mask4,
    )
    return new_state, logits


# --- bare attention (exposed for direct inspection) -----------------------------

def dot_attention(k, v, q, causal: bool = True) -> np.ndarray:
    """Scaled dot-product attention on (L, d) arrays; queries align trailing."""
    q4, k4, v4 = (a[None, None] for a in (q, k, v))
    if causal:
        mask = causal_mask(q.shape[0], k.shape[0])[None, None]
    else:
        mask = np.ones((1, 1, q.shape[0], k.shape[0]), dtype=bool)
    out, _ = _attn_core_fwd(q4, k4, v4, mask)
    return out[0, 0]


def compressed_attention(k, v, q, c: int, causal: bool = True) -> np.ndarray:
    """Attention after strided mean-pooling of K and V by factor c.

    c=1 reproduces dot_attention bit-for-bit (the pooling path divides by
    1.0 and sums singleton windows, both exact).
    """
    if c < 1:
        raise ValueError("compression factor must be >= 1")
    length = k.shape[0]
    kp, _ = _pool(k[None, None], c)
    vp, _ = _pool(v[None, None], c)
    if causal:
        mask = compressed_causal_mask(q.shape[0], length, c)[None, None]
    else:
        mask = np.ones((1, 1, q.shape[0], kp.shape[2]), dtype=bool)
    out, _ = _attn_core_fwd(q[None, None], kp, vp, mask)
    return out[0, 0]

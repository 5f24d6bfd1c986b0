"""Hierarchical CTC encoder with an autoregressive attention decoder.

Layout (pre-norm transformer blocks throughout)::

    MT:  embed -> N1 layers -> repeat x r + sub-position emb -> N2 layers -> [SrcCTC]
                -> N3 layers -> [TgtCTC] -> decoder cross-attention
    ST:  embed frames -> strided conv (/r) -> N1 + N2 layers -> [SrcCTC]
                -> N3 layers -> [TgtCTC] -> decoder cross-attention

Token conventions: real tokens are 1..n.  CTC heads have n+1 outputs with
column 0 the blank; the decoder has n+1 outputs with column 0 the eos, and
id 0 doubles as the start symbol on the decoder input side.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .ctc import PosteriorGrid

BLANK_ID = 0
EOS_ID = 0
BOS_ID = 0
PAD_ID = 0

MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    task: str = "mt"  # "mt" or "st"
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_src_layers: int = 2
    n_adjust_layers: int = 2
    n_tgt_layers: int = 2
    n_dec_layers: int = 2
    upsample_rate: int = 3
    downsample_rate: int = 4
    src_vocab: int = 16  # real source tokens (MT text or ST frame symbols)
    transcript_vocab: int = 0  # SrcCTC labels for ST; MT uses src_vocab
    tgt_vocab: int = 16
    dropout: float = 0.1
    activation: str = "relu"
    src_ctc_layer_index: int | None = None

    def __post_init__(self):
        if self.task not in ("mt", "st"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.upsample_rate < 1 or self.downsample_rate < 1:
            raise ValueError("length-adjustment rates must be >= 1")
        boundary = self.n_src_layers + self.n_adjust_layers
        if self.src_ctc_layer_index is None:
            self.src_ctc_layer_index = boundary
        elif self.src_ctc_layer_index != boundary:
            raise ValueError("SrcCTC must sit between the source and target encoders "
                             f"(layer {boundary})")
        if self.activation not in ("relu", "gelu"):
            raise ValueError("activation must be relu or gelu")

    @property
    def src_ctc_vocab(self) -> int:
        return self.src_vocab if self.task == "mt" else self.transcript_vocab

    def adjusted_length(self, n: int) -> int:
        if self.task == "mt":
            return n * self.upsample_rate
        return -(-n // self.downsample_rate)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# Full-size layer counts and length-adjustment rates (widths are a free choice).
LARGE_MT = dict(task="mt", d_model=512, n_heads=8, d_ff=2048, n_src_layers=3, n_adjust_layers=3,
                n_tgt_layers=12, n_dec_layers=6, upsample_rate=3, dropout=0.3)
LARGE_ST = dict(task="st", d_model=512, n_heads=8, d_ff=2048, n_src_layers=6, n_adjust_layers=6,
                n_tgt_layers=6, n_dec_layers=6, downsample_rate=4, dropout=0.1)


Params = dict  # name -> numerics.Tensor


@dataclass
class EncodeResult:
    h_src: np.ndarray
    h_tgt: np.ndarray
    src_grid: PosteriorGrid
    tgt_grid: PosteriorGrid

    @property
    def T(self) -> int:
        return self.h_tgt.shape[0]


@dataclass
class EncodedBatch:
    """Tensors from a batched encoder pass (kept on the tape during training)."""

    h_src: nx.Tensor
    h_tgt: nx.Tensor
    src_logp: nx.Tensor
    tgt_logp: nx.Tensor
    lengths: np.ndarray
    key_pad: np.ndarray  # (B, T') True where padded


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _layer_shapes(prefix: str, d: int, ff: int, cross: bool = False) -> dict:
    shapes = {}
    blocks = ["self", "cross"] if cross else ["self"]
    for blk in blocks:
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{blk}.{w}"] = (d, d)
            shapes[f"{prefix}.{blk}.b{w[1]}"] = (d,)
        shapes[f"{prefix}.{blk}.ln_g"] = (d,)
        shapes[f"{prefix}.{blk}.ln_b"] = (d,)
    shapes[f"{prefix}.ff.w1"] = (d, ff)
    shapes[f"{prefix}.ff.b1"] = (ff,)
    shapes[f"{prefix}.ff.w2"] = (ff, d)
    shapes[f"{prefix}.ff.b2"] = (d,)
    shapes[f"{prefix}.ff.ln_g"] = (d,)
    shapes[f"{prefix}.ff.ln_b"] = (d,)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict:
    d, ff = cfg.d_model, cfg.d_ff
    shapes = {"src_embed": (cfg.src_vocab + 1, d)}
    if cfg.task == "mt":
        shapes["subpos_embed"] = (cfg.upsample_rate, d)
    else:
        shapes["conv.w"] = (cfg.downsample_rate * d, d)
        shapes["conv.b"] = (d,)
    for i in range(cfg.n_src_layers + cfg.n_adjust_layers):
        shapes.update(_layer_shapes(f"src_enc.{i}", d, ff))
    shapes["src_ln_g"] = (d,)
    shapes["src_ln_b"] = (d,)
    shapes["src_ctc.w"] = (d, cfg.src_ctc_vocab + 1)
    shapes["src_ctc.b"] = (cfg.src_ctc_vocab + 1,)
    for i in range(cfg.n_tgt_layers):
        shapes.update(_layer_shapes(f"tgt_enc.{i}", d, ff))
    shapes["tgt_ln_g"] = (d,)
    shapes["tgt_ln_b"] = (d,)
    shapes["tgt_ctc.w"] = (d, cfg.tgt_vocab + 1)
    shapes["tgt_ctc.b"] = (cfg.tgt_vocab + 1,)
    shapes["dec_embed"] = (cfg.tgt_vocab + 1, d)
    for i in range(cfg.n_dec_layers):
        shapes.update(_layer_shapes(f"dec.{i}", d, ff, cross=True))
    shapes["dec_ln_g"] = (d,)
    shapes["dec_ln_b"] = (d,)
    shapes["out.w"] = (d, cfg.tgt_vocab + 1)
    shapes["out.b"] = (cfg.tgt_vocab + 1,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, zero: bool = False) -> Params:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if zero:
            arr = np.zeros(shape)
        elif leaf == "ln_g" or name.endswith("_ln_g"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        elif "embed" in name:
            arr = rng.normal(0.0, cfg.d_model ** -0.5, size=shape)
        else:
            lim = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-lim, lim, size=shape)
        params[name] = nx.Tensor(arr, requires_grad=True, name=name)
    return params


def n_parameters(params: Params) -> int:
    return int(sum(p.data.size for p in params.values()))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Ctx:
    """Dropout context: rng plus train/eval flag."""

    def __init__(self, cfg: ModelConfig, train: bool, rng: np.random.Generator | None):
        self.p = cfg.dropout
        self.train = train and rng is not None
        self.rng = rng

    def drop(self, x):
        return nx.dropout(x, self.p, self.rng, self.train)


def _linear(x, w, b):
    return nx.add(nx.matmul(x, w), b)


def _split_heads(x, h):
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x):
    B, h, T, dk = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, h * dk))


def _attention(p, pre, xq, kv, mask, cfg, ctx, probs_out=None):
    """Multi-head attention; ``kv`` is either an input Tensor or precomputed (K, V) heads."""
    h = cfg.n_heads
    q = _split_heads(_linear(xq, p[pre + ".wq"], p[pre + ".bq"]), h)
    if isinstance(kv, tuple):
        k, v = kv
    else:
        k = _split_heads(_linear(kv, p[pre + ".wk"], p[pre + ".bk"]), h)
        v = _split_heads(_linear(kv, p[pre + ".wv"], p[pre + ".bv"]), h)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_model // h))
    if mask is not None:
        scores = nx.masked_fill(scores, mask, MASK_VALUE)
    probs = nx.softmax(scores)
    if probs_out is not None:
        probs_out.append(probs.data)
    out = nx.matmul(ctx.drop(probs), v)
    return _linear(_merge_heads(out), p[pre + ".wo"], p[pre + ".bo"])


def _ffn(p, pre, x, cfg, ctx):
    act = nx.relu if cfg.activation == "relu" else nx.gelu
    hdn = ctx.drop(act(_linear(x, p[pre + ".w1"], p[pre + ".b1"])))
    return _linear(hdn, p[pre + ".w2"], p[pre + ".b2"])


def _ln(p, pre, x):
    return nx.layer_norm(x, p[pre + ".ln_g"], p[pre + ".ln_b"])


def encoder_layer(p, pre, x, mask, cfg, ctx):
    y = _ln(p, pre + ".self", x)
    x = nx.add(x, ctx.drop(_attention(p, pre + ".self", y, y, mask, cfg, ctx)))
    return nx.add(x, ctx.drop(_ffn(p, pre + ".ff", _ln(p, pre + ".ff", x), cfg, ctx)))


def decoder_layer(p, pre, x, mem_kv, self_mask, mem_mask, cfg, ctx, past=None, probs_out=None):
    """One decoder block.  ``past`` holds cached self-attention (K, V) heads; the
    updated pair is returned so incremental decoding can extend it."""
    y = _ln(p, pre + ".self", x)
    k = _split_heads(_linear(y, p[pre + ".self.wk"], p[pre + ".self.bk"]), cfg.n_heads)
    v = _split_heads(_linear(y, p[pre + ".self.wv"], p[pre + ".self.bv"]), cfg.n_heads)
    if past is not None:
        k = nx.concat([past[0], k], axis=2)
        v = nx.concat([past[1], v], axis=2)
    x = nx.add(x, ctx.drop(_attention(p, pre + ".self", y, (k, v), self_mask, cfg, ctx)))
    y = _ln(p, pre + ".cross", x)
    x = nx.add(x, ctx.drop(_attention(p, pre + ".cross", y, mem_kv, mem_mask, cfg, ctx, probs_out)))
    x = nx.add(x, ctx.drop(_ffn(p, pre + ".ff", _ln(p, pre + ".ff", x), cfg, ctx)))
    return x, (k, v)


def _cross_kv(p, pre, mem, cfg):
    k = _split_heads(_linear(mem, p[pre + ".cross.wk"], p[pre + ".cross.bk"]), cfg.n_heads)
    v = _split_heads(_linear(mem, p[pre + ".cross.wv"], p[pre + ".cross.bv"]), cfg.n_heads)
    return k, v


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def _pad_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, lengths.max(initial=0))), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def encode_batch(params: Params, cfg: ModelConfig, inputs: Sequence[Sequence[int]],
                 train: bool = False, rng: np.random.Generator | None = None) -> EncodedBatch:
    if any(len(s) == 0 for s in inputs):
        raise ValueError("encode: empty input sequence")
    ids, in_lens = _pad_ids(inputs)
    if ids.max() > cfg.src_vocab or ids.min() < 0:
        raise ValueError("encode: source id outside the source vocabulary")
    ctx = _Ctx(cfg, train, rng)
    p = params
    B, T = ids.shape
    d = cfg.d_model
    x = nx.mul(nx.embed_lookup(p["src_embed"], ids), math.sqrt(d))
    in_pad = np.arange(T)[None, :] >= in_lens[:, None]

    if cfg.task == "mt":
        x = ctx.drop(nx.add(x, nx.Tensor(sinusoid(T, d))))
        mask = in_pad[:, None, None, :]
        for i in range(cfg.n_src_layers):
            x = encoder_layer(p, f"src_enc.{i}", x, mask, cfg, ctx)
        r = cfg.upsample_rate
        x = nx.repeat(x, r, axis=1)
        Tp = T * r
        sub = nx.embed_lookup(p["subpos_embed"], np.tile(np.arange(r), T))
        x = nx.add(nx.add(x, sub), nx.Tensor(sinusoid(Tp, d)))
        lengths = in_lens * r
        first_adjust = cfg.n_src_layers
    else:
        r = cfg.downsample_rate
        x = nx.masked_fill(x, in_pad[:, :, None], 0.0)
        Tp = -(-T // r)
        if Tp * r > T:
            x = nx.concat([x, nx.Tensor(np.zeros((B, Tp * r - T, d)))], axis=1)
        x = nx.relu(_linear(nx.reshape(x, (B, Tp, r * d)), p["conv.w"], p["conv.b"]))
        x = ctx.drop(nx.add(x, nx.Tensor(sinusoid(Tp, d))))
        lengths = -(-in_lens // r)
        first_adjust = 0
    key_pad = np.arange(Tp)[None, :] >= lengths[:, None]
    mask = key_pad[:, None, None, :]
    for i in range(first_adjust, cfg.n_src_layers + cfg.n_adjust_layers):
        x = encoder_layer(p, f"src_enc.{i}", x, mask, cfg, ctx)
    h_src = nx.layer_norm(x, p["src_ln_g"], p["src_ln_b"])
    src_logp = nx.log_softmax(_linear(h_src, p["src_ctc.w"], p["src_ctc.b"]))
    for i in range(cfg.n_tgt_layers):
        x = encoder_layer(p, f"tgt_enc.{i}", x, mask, cfg, ctx)
    h_tgt = nx.layer_norm(x, p["tgt_ln_g"], p["tgt_ln_b"])
    tgt_logp = nx.log_softmax(_linear(h_tgt, p["tgt_ctc.w"], p["tgt_ctc.b"]))
    return EncodedBatch(h_src, h_tgt, src_logp, tgt_logp, lengths, key_pad)


def encode(params: Params, cfg: ModelConfig, x: Sequence[int]) -> EncodeResult:
    """Evaluation-mode encoding of one input sequence."""
    with nx.no_grad():
        eb = encode_batch(params, cfg, [list(x)], train=False)
    return EncodeResult(
        eb.h_src.data[0], eb.h_tgt.data[0],
        PosteriorGrid(eb.src_logp.data[0], BLANK_ID),
        PosteriorGrid(eb.tgt_logp.data[0], BLANK_ID),
    )


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def decoder_forward(params: Params, cfg: ModelConfig, mem: nx.Tensor, mem_pad: np.ndarray,
                    y_in: np.ndarray, train: bool = False, rng=None, probs_out=None) -> nx.Tensor:
    """Teacher-forced decoder log-probs, (B, L, V+1), for padded input ids ``y_in``."""
    p = params
    ctx = _Ctx(cfg, train, rng)
    B, L = y_in.shape
    d = cfg.d_model
    x = nx.mul(nx.embed_lookup(p["dec_embed"], y_in), math.sqrt(d))
    x = ctx.drop(nx.add(x, nx.Tensor(sinusoid(L, d))))
    causal = np.triu(np.ones((L, L), dtype=bool), 1)[None, None]
    mem_mask = mem_pad[:, None, None, :]
    for i in range(cfg.n_dec_layers):
        kv = _cross_kv(p, f"dec.{i}", mem, cfg)
        layer_probs = [] if probs_out is not None else None
        x, _ = decoder_layer(p, f"dec.{i}", x, kv, causal, mem_mask, cfg, ctx,
                             probs_out=layer_probs)
        if probs_out is not None:
            probs_out.append(layer_probs[0])
    x = nx.layer_norm(x, p["dec_ln_g"], p["dec_ln_b"])
    return nx.log_softmax(_linear(x, p["out.w"], p["out.b"]))


def _check_prefix(y_prefix):
    if EOS_ID in tuple(y_prefix):
        raise ValueError("decoder prefix must not contain eos")


def _mem_tensor(h_tgt) -> nx.Tensor:
    arr = h_tgt.data if isinstance(h_tgt, nx.Tensor) else np.asarray(h_tgt)
    return nx.Tensor(arr[None] if arr.ndim == 2 else arr)


def decode_step(params: Params, cfg: ModelConfig, h_tgt, y_prefix: Sequence[int],
                cache: dict | None = None):
    """Next-token log-distribution (eos at index 0) after ``y_prefix``.

    Without a cache the whole prefix is recomputed.  With ``cache`` (as
    returned for ``y_prefix[:-1]``) only the newest position is computed.
    Returns ``(logp, new_cache)``.
    """
    y_prefix = tuple(int(c) for c in y_prefix)
    _check_prefix(y_prefix)
    p = params
    ctx = _Ctx(cfg, False, None)
    d = cfg.d_model
    with nx.no_grad():
        if cache is None or cache.get("len") != len(y_prefix):
            mem = _mem_tensor(h_tgt)
            cross = [_cross_kv(p, f"dec.{i}", mem, cfg) for i in range(cfg.n_dec_layers)]
            ids = np.array([(BOS_ID,) + y_prefix], dtype=np.int64)
            start = 0
            past = [None] * cfg.n_dec_layers
            if cache is not None and cache.get("len") is not None:
                raise ValueError("cache does not belong to the parent prefix")
        else:
            cross = cache["cross"]
            ids = np.array([[y_prefix[-1] if y_prefix else BOS_ID]], dtype=np.int64)
            start = len(y_prefix)
            past = cache["self"]
        L = ids.shape[1]
        x = nx.mul(nx.embed_lookup(p["dec_embed"], ids), math.sqrt(d))
        x = nx.add(x, nx.Tensor(sinusoid(start + L, d)[start:]))
        causal = np.triu(np.ones((L, start + L), dtype=bool), start + 1)[None, None]
        new_past = []
        for i in range(cfg.n_dec_layers):
            x, kv = decoder_layer(p, f"dec.{i}", x, cross[i], causal, None, cfg, ctx, past=past[i])
            new_past.append(kv)
        x = nx.layer_norm(x, p["dec_ln_g"], p["dec_ln_b"])
        logp = nx.log_softmax(_linear(x, p["out.w"], p["out.b"])).data[0, -1]
    return logp, {"cross": cross, "self": new_past, "len": len(y_prefix) + 1}


class DecoderScorer:
    """Attention scorer over one encoded input, caching by prefix.

    ``logprobs(prefix)`` returns the decoder's next-token distribution; each
    distinct prefix costs one incremental decoder step.
    """

    def __init__(self, params: Params, cfg: ModelConfig, h_tgt):
        self.params = params
        self.cfg = cfg
        self.h_tgt = np.asarray(h_tgt)
        self._cache: dict[tuple, tuple[np.ndarray, dict]] = {}
        self.calls = 0

    def _entry(self, prefix: tuple):
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        if prefix:
            parent_cache = self._entry(prefix[:-1])[1]
        else:
            parent_cache = None
        self.calls += 1
        logp, cache = decode_step(self.params, self.cfg, self.h_tgt, prefix,
                                  parent_cache)
        self._cache[prefix] = (logp, cache)
        return logp, cache

    def logprobs(self, prefix) -> np.ndarray:
        return self._entry(tuple(int(c) for c in prefix))[0]


def sequence_logprob(params: Params, cfg: ModelConfig, h_tgt, y: Sequence[int]) -> float:
    """Teacher-forced log P_attn(y, eos | x) from a single full pass."""
    y = tuple(int(c) for c in y)
    _check_prefix(y)
    with nx.no_grad():
        mem = _mem_tensor(h_tgt)
        logp = decoder_forward(params, cfg, mem, np.zeros((1, mem.shape[1]), dtype=bool),
                               np.array([(BOS_ID,) + y], dtype=np.int64)).data[0]
    tgt = list(y) + [EOS_ID]
    return float(logp[np.arange(len(tgt)), tgt].sum())


def cross_attention_maps(params: Params, cfg: ModelConfig, h_tgt, y: Sequence[int]) -> list[np.ndarray]:
    """Per decoder layer, the (heads, |y|, T') source-attention weights under teacher forcing."""
    y = tuple(int(c) for c in y)
    _check_prefix(y)
    if not y:
        return [np.zeros((cfg.n_heads, 0, np.asarray(h_tgt).shape[-2]))] * cfg.n_dec_layers
    probs: list[np.ndarray] = []
    with nx.no_grad():
        mem = _mem_tensor(h_tgt)
        decoder_forward(params, cfg, mem, np.zeros((1, mem.shape[1]), dtype=bool),
                        np.array([(BOS_ID,) + y[:-1]], dtype=np.int64), probs_out=probs)
    return [pr[0] for pr in probs]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"JCTCCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: ModelConfig, meta: dict | None = None) -> None:
    """Write ``magic | u32 version | u64 header_len | JSON header | float64 LE payload``."""
    names = list(params)
    header = {
        "config": cfg.to_dict(),
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        f.write(hbytes)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(t["shape"])
        off += 8 * n
        params[t["name"]] = nx.Tensor(arr, requires_grad=True, name=t["name"])
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after payload")
    return params, cfg, header.get("meta", {})

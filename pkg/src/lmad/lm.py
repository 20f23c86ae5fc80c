"""A small trainable transformer encoder over tokenized query words.

Blocks are post-layer-norm: ``h = LN1(x + SelfAttn(x))`` followed by
``out = LN2(h + FFN(h))`` with a two-layer GELU feed-forward.  PAD key
positions receive a large negative pre-softmax score, which underflows to an
exactly-zero attention weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import MASKED_SCORE, Tensor
from .errors import ShapeError
from .text import TokenizedText

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class LMConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    max_len: int
    vocab_size: int
    ln_eps: float = LAYER_NORM_EPS

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ShapeError("n_layers must be >= 1")
        if self.max_len < 3:
            raise ShapeError("max_len must be >= 3")

    def to_dict(self) -> dict:
        return {"d_model": self.d_model, "n_heads": self.n_heads, "d_ff": self.d_ff,
                "n_layers": self.n_layers, "max_len": self.max_len,
                "vocab_size": self.vocab_size, "ln_eps": self.ln_eps}

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(d_model=int(d["d_model"]), n_heads=int(d["n_heads"]),
                   d_ff=int(d["d_ff"]), n_layers=int(d["n_layers"]),
                   max_len=int(d["max_len"]), vocab_size=int(d["vocab_size"]),
                   ln_eps=float(d.get("ln_eps", LAYER_NORM_EPS)))


def desk_lm_config(vocab_size: int, max_len: int = 4) -> LMConfig:
    """Laptop-sized stack: 2 layers, width 64, 4 heads."""
    return LMConfig(d_model=64, n_heads=4, d_ff=256, n_layers=2,
                    max_len=max_len, vocab_size=vocab_size)


def paper_lm_config(vocab_size: int, max_len: int = 16) -> LMConfig:
    """Full-scale stack matching a BERT-base text tower: 12 layers, width 768."""
    return LMConfig(d_model=768, n_heads=12, d_ff=3072, n_layers=12,
                    max_len=max_len, vocab_size=vocab_size)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class AttentionParams:
    """Projections for one multi-head attention module."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int

    def tensors(self, prefix: str):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class BlockParams:
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def tensors(self, prefix: str):
        yield from self.attn.tensors(f"{prefix}.attn")
        for name in ("w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class EmbeddingParams:
    tok: Tensor
    pos: Tensor

    def tensors(self, prefix: str):
        yield f"{prefix}.tok", self.tok
        yield f"{prefix}.pos", self.pos


@dataclass
class LMParams:
    emb: EmbeddingParams
    blocks: list[BlockParams] = field(default_factory=list)

    def tensors(self, prefix: str):
        yield from self.emb.tensors(f"{prefix}.emb")
        for i, block in enumerate(self.blocks):
            yield from block.tensors(f"{prefix}.block{i}")


def _normal(rng: np.random.Generator, shape, dtype, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _xavier(rng: np.random.Generator, shape, dtype) -> Tensor:
    bound = float(np.sqrt(6.0 / (shape[0] + shape[1])))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_attention_params(rng: np.random.Generator, d_q: int, d_kv: int, d_attn: int,
                          n_heads: int, dtype=np.float32, zero_out_proj: bool = False,
                          xavier: bool = False) -> AttentionParams:
    """Query input width ``d_q``, key/value input width ``d_kv``, inner width ``d_attn``.

    The default small-normal weights suit projections inside a residual tower,
    where activations stay near the LayerNorm scale.  Cross-attention used as
    a readout (point features querying token states) needs fan-in-aware
    ``xavier`` weights instead: with 0.02-scale projections on both sides the
    attention scores come out around 1e-3, the softmax is uniform for every
    query, and the per-query signal is too small for training to pick up.
    """
    init = _xavier if xavier else _normal
    wo = _zeros((d_attn, d_attn), dtype) if zero_out_proj else init(rng, (d_attn, d_attn), dtype)
    return AttentionParams(
        wq=init(rng, (d_q, d_attn), dtype), bq=_zeros(d_attn, dtype),
        wk=init(rng, (d_kv, d_attn), dtype), bk=_zeros(d_attn, dtype),
        wv=init(rng, (d_kv, d_attn), dtype), bv=_zeros(d_attn, dtype),
        wo=wo, bo=_zeros(d_attn, dtype), n_heads=n_heads)


def init_block_params(rng: np.random.Generator, cfg: LMConfig, dtype=np.float32) -> BlockParams:
    d, f = cfg.d_model, cfg.d_ff
    return BlockParams(
        attn=init_attention_params(rng, d, d, d, cfg.n_heads, dtype),
        w1=_normal(rng, (d, f), dtype), b1=_zeros(f, dtype),
        w2=_normal(rng, (f, d), dtype), b2=_zeros(d, dtype),
        ln1_g=_ones(d, dtype), ln1_b=_zeros(d, dtype),
        ln2_g=_ones(d, dtype), ln2_b=_zeros(d, dtype))


def init_lm_params(rng: np.random.Generator, cfg: LMConfig, dtype=np.float32) -> LMParams:
    emb = EmbeddingParams(tok=_normal(rng, (cfg.vocab_size, cfg.d_model), dtype),
                          pos=_normal(rng, (cfg.max_len, cfg.d_model), dtype))
    blocks = [init_block_params(rng, cfg, dtype) for _ in range(cfg.n_layers)]
    return LMParams(emb=emb, blocks=blocks)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def embed(text: TokenizedText, params: EmbeddingParams) -> Tensor:
    """Token embedding plus position embedding, row per token."""
    vocab_size = params.tok.shape[0]
    max_len = params.pos.shape[0]
    length = len(text)
    if length > max_len:
        raise ShapeError(f"sequence length {length} exceeds position table {max_len}")
    if text.ids.max() >= vocab_size or text.ids.min() < 0:
        raise ShapeError(f"token id out of range for embedding table with {vocab_size} rows")
    tok = ag.gather_rows(params.tok, text.ids)
    pos = ag.gather_rows(params.pos, np.arange(length))
    return tok + pos


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: AttentionParams,
                         key_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention with ``p.n_heads`` heads.

    ``q_in`` is (A, d_q), ``kv_in`` is (B, d_kv); the result is (A, d_attn).
    ``key_mask`` marks which of the B key positions are visible; masked keys
    get exactly zero attention weight.
    """
    n_keys = kv_in.shape[0]
    if n_keys == 0:
        raise ShapeError("attention needs at least one key")
    q = ag.matmul(q_in, p.wq) + p.bq
    k = ag.matmul(kv_in, p.wk) + p.bk
    v = ag.matmul(kv_in, p.wv) + p.bv
    d_attn = q.shape[-1]
    h = p.n_heads
    dh = d_attn // h
    a = q.shape[0]
    qh = ag.transpose(ag.reshape(q, (a, h, dh)), (1, 0, 2))        # (h, A, dh)
    kh = ag.transpose(ag.reshape(k, (n_keys, h, dh)), (1, 2, 0))   # (h, dh, B)
    vh = ag.transpose(ag.reshape(v, (n_keys, h, dh)), (1, 0, 2))   # (h, B, dh)
    scores = ag.matmul(qh, kh) * (1.0 / np.sqrt(dh))               # (h, A, B)
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (n_keys,):
            raise ShapeError(f"key mask shape {key_mask.shape} != ({n_keys},)")
        if not key_mask.any():
            raise ShapeError("attention with every key masked")
        bias = np.where(key_mask, 0.0, MASKED_SCORE).astype(q_in.dtype)
        scores = scores + Tensor(bias.reshape(1, 1, n_keys))
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(weights, vh)                                   # (h, A, dh)
    merged = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (a, d_attn))
    out = ag.matmul(merged, p.wo) + p.bo
    if return_weights:
        return out, weights
    return out


def multi_head_self_attention(x: Tensor, mask: np.ndarray | None, p: AttentionParams) -> Tensor:
    return multi_head_attention(x, x, p, key_mask=mask)


def attn_sublayer(x: Tensor, mask: np.ndarray | None, p: BlockParams,
                  eps: float = LAYER_NORM_EPS) -> Tensor:
    """Post-norm self-attention residual: LN1(x + SelfAttn(x))."""
    return ag.layer_norm(x + multi_head_self_attention(x, mask, p.attn),
                         p.ln1_g, p.ln1_b, eps)


def ffn_sublayer(h: Tensor, p: BlockParams, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Post-norm feed-forward residual: LN2(h + W2 gelu(W1 h))."""
    inner = ag.gelu(ag.matmul(h, p.w1) + p.b1)
    return ag.layer_norm(h + ag.matmul(inner, p.w2) + p.b2, p.ln2_g, p.ln2_b, eps)


def lm_block(x: Tensor, mask: np.ndarray | None, p: BlockParams,
             eps: float = LAYER_NORM_EPS) -> Tensor:
    return ffn_sublayer(attn_sublayer(x, mask, p, eps), p, eps)


def lm_forward(text: TokenizedText, params: LMParams, cfg: LMConfig) -> Tensor:
    """Embed then run every block; returns the final (L, d_model) states."""
    x = embed(text, params.emb)
    for block in params.blocks:
        x = lm_block(x, text.mask, block, cfg.ln_eps)
    return x

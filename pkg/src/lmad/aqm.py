"""Affordance query module: LM blocks with point-conditioned cross-attention.

Each block runs the usual self-attention sublayer, then lets every token row
attend over the per-point features, then runs the feed-forward sublayer:

    h = LN1(x + SelfAttn(x))
    c = h  + CrossAttn(LNx(h), h_c)
    g = LN2(c + FFN(c))

The inserted sublayer normalizes its own input and its output projection is
zero-initialized, so a fresh stack reproduces the plain LM bit for bit; the
fusion pathway only opens up once training moves the projection off zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import lm as lm_mod
from .autograd import Tensor
from .errors import ShapeError
from .lm import (AttentionParams, BlockParams, LMConfig, LMParams,
                 attn_sublayer, ffn_sublayer, init_attention_params, init_lm_params,
                 multi_head_attention)
from .text import TokenizedText


@dataclass(frozen=True)
class AQMConfig:
    lm: LMConfig
    point_dim: int
    gate_zero_init: bool = True

    def __post_init__(self):
        if self.point_dim < 1:
            raise ShapeError("point_dim must be >= 1")


@dataclass
class CrossAttentionParams:
    """Inserted sublayer: pre-norm + cross-attention with its own projections."""

    attn: AttentionParams
    ln_g: Tensor
    ln_b: Tensor

    def tensors(self, prefix: str):
        yield from self.attn.tensors(f"{prefix}.attn")
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b


@dataclass
class AQMParams:
    lm: LMParams
    cross: list[CrossAttentionParams] = field(default_factory=list)

    def tensors(self, prefix: str):
        yield from self.lm.tensors(f"{prefix}.lm")
        for i, c in enumerate(self.cross):
            yield from c.tensors(f"{prefix}.cross{i}")


def init_cross_attention_params(rng: np.random.Generator, cfg: AQMConfig,
                                dtype=np.float32) -> CrossAttentionParams:
    d = cfg.lm.d_model
    attn = init_attention_params(rng, d_q=d, d_kv=cfg.point_dim, d_attn=d,
                                 n_heads=cfg.lm.n_heads, dtype=dtype,
                                 zero_out_proj=cfg.gate_zero_init, xavier=True)
    return CrossAttentionParams(
        attn=attn,
        ln_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        ln_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True))


def init_aqm_params(rng: np.random.Generator, cfg: AQMConfig, dtype=np.float32) -> AQMParams:
    lm_params = init_lm_params(rng, cfg.lm, dtype)
    cross = [init_cross_attention_params(rng, cfg, dtype) for _ in range(cfg.lm.n_layers)]
    return AQMParams(lm=lm_params, cross=cross)


def cross_attention(q_seq: Tensor, kv_seq: Tensor, p: AttentionParams,
                    key_mask: np.ndarray | None = None) -> Tensor:
    """Rows of ``q_seq`` attend over rows of ``kv_seq``."""
    if kv_seq.shape[0] == 0:
        raise ShapeError("cross-attention needs a non-empty key/value sequence")
    return multi_head_attention(q_seq, kv_seq, p, key_mask=key_mask)


def aqm_block(x: Tensor, h_c: Tensor, mask: np.ndarray | None,
              block: BlockParams, cross: CrossAttentionParams,
              eps: float = lm_mod.LAYER_NORM_EPS) -> tuple[Tensor, Tensor]:
    """One fused block; returns (post-self-attention h, block output g)."""
    h = attn_sublayer(x, mask, block, eps)
    queries = ag.layer_norm(h, cross.ln_g, cross.ln_b, eps)
    c = h + cross_attention(queries, h_c, cross.attn)
    g = ffn_sublayer(c, block, eps)
    return h, g


@dataclass
class AQMTrace:
    """Intermediate states of a stack pass, for inspection and tests."""

    block_inputs: list[Tensor]
    post_self: list[Tensor]
    block_outputs: list[Tensor]

    @property
    def final(self) -> Tensor:
        return self.block_outputs[-1]


def aqm_forward(text: TokenizedText, h_c: Tensor, params: AQMParams,
                cfg: AQMConfig) -> AQMTrace:
    """Run the fused stack; block i+1 consumes block i's output."""
    if h_c.shape[-1] != cfg.point_dim:
        raise ShapeError(f"h_c width {h_c.shape[-1]} != configured point_dim {cfg.point_dim}")
    x = lm_mod.embed(text, params.lm.emb)
    trace = AQMTrace(block_inputs=[], post_self=[], block_outputs=[])
    for block, cross in zip(params.lm.blocks, params.cross):
        trace.block_inputs.append(x)
        h, g = aqm_block(x, h_c, text.mask, block, cross, cfg.lm.ln_eps)
        trace.post_self.append(h)
        trace.block_outputs.append(g)
        x = g
    return trace

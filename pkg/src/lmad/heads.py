"""Per-point prediction heads and the training loss.

The main decoder lets each point feature query the fused token states through
multi-head cross-attention and maps the attended context to two-class logits.
Two weaker heads serve as controlled comparisons: a stack of bare residual
cross-attention layers feeding the same decoder, and a pooled-text cosine
scorer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import lm as lm_mod
from .autograd import Tensor
from .errors import ShapeError
from .lm import AttentionParams, EmbeddingParams, init_attention_params, multi_head_attention
from .text import TokenizedText

COSINE_EPS = 1e-8
INIT_TEMPERATURE = 0.07


@dataclass
class AffordancePrediction:
    """Logits plus derived positive probabilities and hard labels."""

    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "AffordancePrediction":
        data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ShapeError(f"prediction logits must be (N, 2), got {data.shape}")
        shifted = data - data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        probs = e[:, 1] / e.sum(axis=1)
        # Ties resolve to the negative class: positive only on a strict win.
        labels = (data[:, 1] > data[:, 0]).astype(np.uint8)
        return cls(logits=data, probs=probs, labels=labels)


@dataclass
class DecodeParams:
    attn: AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self, prefix: str):
        yield from self.attn.tensors(f"{prefix}.attn")
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def init_decode_params(rng: np.random.Generator, point_dim: int, d_model: int,
                       n_heads: int, dtype=np.float32) -> DecodeParams:
    # Readout attention and MLP use fan-in-aware weights so differences
    # between point queries show up in the logits from the start; only the
    # final layer stays small to keep the initial predictions near-uniform.
    d_attn = d_model
    bound = float(np.sqrt(6.0 / (2 * d_attn)))
    return DecodeParams(
        attn=init_attention_params(rng, d_q=point_dim, d_kv=d_model, d_attn=d_attn,
                                   n_heads=n_heads, dtype=dtype, xavier=True),
        w1=Tensor(rng.uniform(-bound, bound, size=(d_attn, d_attn)).astype(dtype),
                  requires_grad=True),
        b1=Tensor(np.zeros(d_attn, dtype=dtype), requires_grad=True),
        w2=Tensor(rng.normal(0.0, 0.02, size=(d_attn, 2)).astype(dtype), requires_grad=True),
        b2=Tensor(np.zeros(2, dtype=dtype), requires_grad=True))


def decode(h_c: Tensor, g: Tensor, p: DecodeParams,
           key_mask: np.ndarray | None = None) -> Tensor:
    """Point features query the token states; a GELU MLP emits (N, 2) logits."""
    ctx = multi_head_attention(h_c, g, p.attn, key_mask=key_mask)
    hidden = ag.gelu(ag.matmul(ctx, p.w1) + p.b1)
    return ag.matmul(hidden, p.w2) + p.b2


def cross_entropy_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean two-class cross-entropy against a binary per-point mask."""
    target = np.asarray(target)
    n = logits.shape[0]
    if logits.data.ndim != 2 or logits.shape[1] != 2:
        raise ShapeError(f"loss expects (N, 2) logits, got {logits.shape}")
    if target.shape != (n,):
        raise ShapeError(f"target shape {target.shape} != ({n},)")
    if not np.isin(target, (0, 1)).all():
        raise ShapeError("target mask must contain only 0/1 values")
    logp = ag.log_softmax(logits, axis=1)
    onehot = np.zeros((n, 2), dtype=logits.dtype)
    onehot[np.arange(n), target.astype(np.int64)] = 1.0
    picked = ag.reduce_sum(logp * Tensor(onehot), axis=1)
    return -ag.reduce_mean(picked)


# ---------------------------------------------------------------------------
# cosine similarity baseline
# ---------------------------------------------------------------------------

@dataclass
class CosineParams:
    proj_w: Tensor
    proj_b: Tensor
    # Temperature stored as log(1/tau) so it stays positive under training;
    # exp(-log_inv_temp) equals the temperature, initialized to 0.07.
    log_inv_temp: Tensor

    def tensors(self, prefix: str):
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b
        yield f"{prefix}.log_inv_temp", self.log_inv_temp


def init_cosine_params(rng: np.random.Generator, d_model: int, point_dim: int,
                       dtype=np.float32) -> CosineParams:
    return CosineParams(
        proj_w=Tensor(rng.normal(0.0, 0.02, size=(d_model, point_dim)).astype(dtype),
                      requires_grad=True),
        proj_b=Tensor(np.zeros(point_dim, dtype=dtype), requires_grad=True),
        log_inv_temp=Tensor(np.array([np.log(1.0 / INIT_TEMPERATURE)], dtype=dtype),
                            requires_grad=True))


def cosine_head(h_c: Tensor, text_states: Tensor, mask: np.ndarray,
                p: CosineParams) -> Tensor:
    """Temperature-scaled cosine between each point and the pooled text.

    The text embedding is the mean of the non-PAD final LM states projected
    into point-feature space.  Per-point logits are (0, cos/tau).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ShapeError("cosine head needs at least one unmasked token")
    weights = (mask / mask.sum()).astype(text_states.dtype)
    pooled = ag.matmul(Tensor(weights.reshape(1, -1)), text_states)     # (1, d_model)
    proj = ag.matmul(pooled, p.proj_w) + p.proj_b                       # (1, point_dim)
    dots = ag.reduce_sum(h_c * proj, axis=1, keepdims=True)             # (N, 1)
    point_norm = ag.sqrt(ag.reduce_sum(h_c * h_c, axis=1, keepdims=True))
    text_norm = ag.sqrt(ag.reduce_sum(proj * proj, axis=1, keepdims=True))
    cos = dots / (point_norm * text_norm + COSINE_EPS)
    scores = cos * ag.exp(p.log_inv_temp)
    zeros = Tensor(np.zeros((h_c.shape[0], 1), dtype=h_c.dtype))
    return ag.concat([zeros, scores], axis=1)


# ---------------------------------------------------------------------------
# bare cross-attention comparison stack
# ---------------------------------------------------------------------------

@dataclass
class XAttnStackParams:
    emb: EmbeddingParams
    layers: list[AttentionParams] = field(default_factory=list)

    def tensors(self, prefix: str):
        yield from self.emb.tensors(f"{prefix}.emb")
        for i, layer in enumerate(self.layers):
            yield from layer.tensors(f"{prefix}.layer{i}")


def init_xattn_stack_params(rng: np.random.Generator, cfg, point_dim: int,
                            gate_zero_init: bool = True, dtype=np.float32) -> XAttnStackParams:
    emb = EmbeddingParams(
        tok=Tensor(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.d_model)).astype(dtype),
                   requires_grad=True),
        pos=Tensor(rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d_model)).astype(dtype),
                   requires_grad=True))
    layers = [init_attention_params(rng, d_q=cfg.d_model, d_kv=point_dim,
                                    d_attn=cfg.d_model, n_heads=cfg.n_heads,
                                    dtype=dtype, zero_out_proj=gate_zero_init,
                                    xavier=True)
              for _ in range(cfg.n_layers)]
    return XAttnStackParams(emb=emb, layers=layers)


def xattn_stack_forward(text: TokenizedText, h_c: Tensor,
                        params: XAttnStackParams) -> Tensor:
    """Residual cross-attention layers only — no self-attention, no FFN."""
    x = lm_mod.embed(text, params.emb)
    for layer in params.layers:
        x = x + multi_head_attention(x, h_c, layer)
    return x

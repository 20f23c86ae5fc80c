"""Full affordance-detection model: point encoder + text stack + head.

Three interchangeable heads share the same point encoder and tokenizer:

* ``aqm``    — language-model blocks with inserted cross-attention to point
               features, decoded per point by attention over the fused token
               states (the full architecture);
* ``xattn``  — ablation: the block stack is replaced by bare residual
               cross-attention layers (same layer count, no self-attention /
               FFN), decoded identically;
* ``cosine`` — baseline: per-point cosine similarity between point features
               and a pooled, projected text embedding from the plain stack.

A ``Model`` bundles configuration, parameters and vocabulary, and offers
``forward`` (differentiable logits), ``predict`` (eval-mode masks),
``state_dict``/``load_state_dict`` (flat name→array views used by the
checkpoint format) and ``trainable`` (optionally freezing the text stack).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autograd as ag
from .aqm import AQMConfig, AQMParams, aqm_forward, init_aqm_params
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .heads import (AffordancePrediction, CosineParams, DecodeParams, XAttnStackParams,
                    cosine_head, decode, init_cosine_params, init_decode_params,
                    init_xattn_stack_params, xattn_stack_forward)
from .lm import LMConfig, LMParams, desk_lm_config, init_lm_params, lm_forward, paper_lm_config
from .pointnet import (EncoderConfig, EncoderParams, desk_encoder_config, encode,
                       encode_many, init_encoder_params, micro_encoder_config)
from .text import Vocabulary, TokenizedText, tokenize


class HeadVariant(str, Enum):
    AQM_HEAD = "aqm"
    PLAIN_XATTN = "xattn"
    COSINE_BASELINE = "cosine"

    @classmethod
    def parse(cls, value) -> "HeadVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ConfigError(f"unknown head variant {value!r}; valid heads: {valid}") from None


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    lm: LMConfig
    words: tuple[str, ...]
    head: HeadVariant = HeadVariant.AQM_HEAD
    gate_zero_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "head", HeadVariant.parse(self.head))
        object.__setattr__(self, "words", tuple(sorted(set(self.words))))
        expected = 4 + len(self.words)  # reserved control tokens + vocabulary
        if self.lm.vocab_size != expected:
            raise ConfigError(f"lm.vocab_size={self.lm.vocab_size} but vocabulary "
                              f"needs {expected} entries")

    @property
    def point_dim(self) -> int:
        return self.encoder.out_dim

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "lm": self.lm.to_dict(),
                "words": list(self.words), "head": self.head.value,
                "gate_zero_init": self.gate_zero_init}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig.from_dict(d["encoder"]),
                   lm=LMConfig.from_dict(d["lm"]),
                   words=tuple(d["words"]),
                   head=HeadVariant.parse(d["head"]),
                   gate_zero_init=bool(d.get("gate_zero_init", True)))


def desk_model_config(words, head=HeadVariant.AQM_HEAD) -> ModelConfig:
    """CPU-sized default: 128-wide point features, 2-layer width-64 text stack."""
    words = tuple(sorted(set(words)))  # match the ModelConfig normalization
    return ModelConfig(encoder=desk_encoder_config(out_dim=128),
                       lm=desk_lm_config(vocab_size=4 + len(words), max_len=4),
                       words=words, head=head)


def micro_model_config(words=("grasp",), head=HeadVariant.AQM_HEAD) -> ModelConfig:
    """Tiny configuration for finite-difference checks (coarse but complete)."""
    words = tuple(sorted(set(words)))
    lm = LMConfig(d_model=8, n_heads=2, d_ff=16, n_layers=1, max_len=3,
                  vocab_size=4 + len(words))
    return ModelConfig(encoder=micro_encoder_config(out_dim=8), lm=lm,
                       words=words, head=head)


def paper_model_config(words, head=HeadVariant.AQM_HEAD) -> ModelConfig:
    """Publication-scale configuration (BERT-base-sized text tower).

    Provided for completeness; far too large for the test suite to instantiate.
    """
    from .pointnet import FPLevelSpec, SALevelSpec

    words = tuple(sorted(set(words)))
    encoder = EncoderConfig(
        sa_levels=(SALevelSpec(512, 0.1, 32, (32, 32, 64)),
                   SALevelSpec(128, 0.2, 64, (64, 64, 128)),
                   SALevelSpec(32, 0.4, 64, (128, 128, 256))),
        fp_levels=(FPLevelSpec((256, 256)), FPLevelSpec((256, 128)),
                   FPLevelSpec((128, 512))),
        out_dim=512)
    return ModelConfig(encoder=encoder,
                       lm=paper_lm_config(vocab_size=4 + len(words), max_len=16),
                       words=words, head=head)


class Model:
    """Parameters plus forward passes for one head variant."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.vocab = Vocabulary.from_words(cfg.words)
        rng = np.random.default_rng(seed)
        self.encoder: EncoderParams = init_encoder_params(rng, cfg.encoder, dtype=dtype)
        head = cfg.head
        if head is HeadVariant.AQM_HEAD:
            self.aqm_cfg = AQMConfig(lm=cfg.lm, point_dim=cfg.point_dim,
                                     gate_zero_init=cfg.gate_zero_init)
            self.fusion: AQMParams | XAttnStackParams | LMParams = \
                init_aqm_params(rng, self.aqm_cfg, dtype=dtype)
            self.head_params: DecodeParams | CosineParams = init_decode_params(
                rng, cfg.point_dim, cfg.lm.d_model, cfg.lm.n_heads, dtype=dtype)
        elif head is HeadVariant.PLAIN_XATTN:
            self.fusion = init_xattn_stack_params(rng, cfg.lm, cfg.point_dim,
                                                  gate_zero_init=cfg.gate_zero_init,
                                                  dtype=dtype)
            self.head_params = init_decode_params(rng, cfg.point_dim, cfg.lm.d_model,
                                                  cfg.lm.n_heads, dtype=dtype)
        else:
            self.fusion = init_lm_params(rng, cfg.lm, dtype=dtype)
            self.head_params = init_cosine_params(rng, cfg.lm.d_model, cfg.point_dim,
                                                  dtype=dtype)

    # -- forward -----------------------------------------------------------

    def _tokenize(self, query) -> TokenizedText:
        if isinstance(query, TokenizedText):
            return query
        return tokenize(query, self.vocab, max_len=self.cfg.lm.max_len)

    def _query_logits(self, enc, text: TokenizedText) -> Tensor:
        head = self.cfg.head
        if head is HeadVariant.AQM_HEAD:
            trace = aqm_forward(text, enc.h_c, self.fusion, self.aqm_cfg)
            return decode(enc.h_c, trace.final, self.head_params, key_mask=text.mask)
        if head is HeadVariant.PLAIN_XATTN:
            g = xattn_stack_forward(text, enc.h_c, self.fusion)
            return decode(enc.h_c, g, self.head_params, key_mask=text.mask)
        states = lm_forward(text, self.fusion, self.cfg.lm)
        return cosine_head(enc.h_c, states, text.mask, self.head_params)

    def forward(self, coords: np.ndarray, query, training: bool = False,
                update_stats: bool | None = None) -> Tensor:
        """Per-point logits (N, 2) for one cloud and one affordance query."""
        enc = encode(coords, self.cfg.encoder, self.encoder,
                     training=training, update_stats=update_stats)
        return self._query_logits(enc, self._tokenize(query))

    def predict(self, coords: np.ndarray, query) -> AffordancePrediction:
        """Eval-mode prediction (no tape, no statistics updates)."""
        logits = self.forward(coords, query, training=False, update_stats=False)
        return AffordancePrediction.from_logits(logits.data)

    def predict_all(self, coords: np.ndarray, queries) -> dict[str, AffordancePrediction]:
        """Eval-mode predictions for many words, encoding the cloud once."""
        enc = encode(coords, self.cfg.encoder, self.encoder,
                     training=False, update_stats=False)
        out = {}
        for query in queries:
            logits = self._query_logits(enc, self._tokenize(query))
            out[query] = AffordancePrediction.from_logits(logits.data)
        return out

    # -- parameter bookkeeping ----------------------------------------------

    def named_tensors(self):
        yield from self.encoder.tensors("encoder")
        yield from self.fusion.tensors("fusion")
        yield from self.head_params.tensors("head")

    def named_buffers(self):
        yield from self.encoder.buffers("encoder")

    def _lm_tensor_names(self) -> set[str]:
        """State-dict names of the text-stack parameters (for freezing)."""
        head = self.cfg.head
        if head is HeadVariant.AQM_HEAD:
            return {name for name, _ in self.fusion.lm.tensors("fusion.lm")}
        if head is HeadVariant.PLAIN_XATTN:
            return {name for name, _ in self.fusion.emb.tensors("fusion.emb")}
        return {name for name, _ in self.fusion.tensors("fusion")}

    def trainable(self, freeze_lm: bool = False) -> list[Tensor]:
        frozen = self._lm_tensor_names() if freeze_lm else set()
        return [t for name, t in self.named_tensors() if name not in frozen]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_tensors()}
        state.update({name: arr for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own_tensors = dict(self.named_tensors())
        own_buffers = dict(self.named_buffers())
        own = set(own_tensors) | set(own_buffers)
        missing = sorted(own - set(state))
        extra = sorted(set(state) - own)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing={missing[:4]} extra={extra[:4]}")
        for name, t in own_tensors.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        for name, buf in own_buffers.items():
            arr = np.asarray(state[name])
            if arr.shape != buf.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {buf.shape}")
            buf[...] = arr


def pair_loss(model: Model, coords: np.ndarray, word: str, target: np.ndarray,
              training: bool = True, update_stats: bool | None = None) -> Tensor:
    """Cross-entropy of one (cloud, word) query against its binary mask."""
    from .heads import cross_entropy_loss

    logits = model.forward(coords, word, training=training, update_stats=update_stats)
    return cross_entropy_loss(logits, target)


def batch_loss(model: Model, items, training: bool = True,
               update_stats: bool | None = None) -> Tensor:
    """Mean pair loss over ``(coords, word, target)`` items, encoded jointly.

    The clouds pass through the encoder as a single batch, so in training
    mode the feature normalization sees statistics of the whole batch — the
    same kind of statistics its running buffers (and therefore eval mode)
    converge to.  With one item this is exactly ``pair_loss``.
    """
    from .heads import cross_entropy_loss

    items = list(items)
    if not items:
        raise ShapeError("batch_loss needs at least one (coords, word, target) item")
    encs = encode_many([coords for coords, _, _ in items], model.cfg.encoder,
                       model.encoder, training=training, update_stats=update_stats)
    total: Tensor | None = None
    for enc, (_, word, target) in zip(encs, items):
        loss = cross_entropy_loss(model._query_logits(enc, model._tokenize(word)), target)
        total = loss if total is None else total + loss
    return total * (1.0 / len(items))

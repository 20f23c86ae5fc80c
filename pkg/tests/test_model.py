"""Model assembly: head variants, parameter bookkeeping, single-pair training."""

import numpy as np
import pytest

from lmad import autograd as ag
from lmad.autograd import GradTape
from lmad.dataset import generate_sample
from lmad.errors import ConfigError
from lmad.model import (HeadVariant, Model, ModelConfig, desk_model_config,
                        micro_model_config, pair_loss, paper_model_config)
from lmad.optim import Adam

HEADS = [HeadVariant.AQM_HEAD, HeadVariant.PLAIN_XATTN, HeadVariant.COSINE_BASELINE]


def _cloud(n=24, seed=5):
    return np.random.default_rng(seed).normal(size=(n, 3)).astype(np.float32)


# --- configuration ----------------------------------------------------------------

def test_head_variant_parsing():
    assert HeadVariant.parse("aqm") is HeadVariant.AQM_HEAD
    assert HeadVariant.parse(HeadVariant.PLAIN_XATTN) is HeadVariant.PLAIN_XATTN
    with pytest.raises(ConfigError, match="valid heads: aqm, xattn, cosine"):
        HeadVariant.parse("bert")


def test_words_are_sorted_and_deduplicated():
    cfg = micro_model_config(words=("grasp", "cut", "grasp"))
    assert cfg.words == ("cut", "grasp")
    assert cfg.lm.vocab_size == 6  # 4 reserved + 2 words


def test_vocab_size_mismatch_rejected():
    good = micro_model_config(words=("grasp",))
    with pytest.raises(ConfigError, match="vocab_size"):
        ModelConfig(encoder=good.encoder, lm=good.lm, words=("grasp", "cut"))


@pytest.mark.parametrize("factory", [desk_model_config, micro_model_config,
                                     paper_model_config])
def test_config_round_trip(factory):
    cfg = factory(words=("grasp", "cut"))
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.point_dim == cfg.encoder.out_dim


# --- parameter bookkeeping ----------------------------------------------------------

@pytest.mark.parametrize("head", HEADS)
def test_same_seed_same_parameters(head):
    a = Model(micro_model_config(head=head), seed=9)
    b = Model(micro_model_config(head=head), seed=9)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()
    c = Model(micro_model_config(head=head), seed=10)
    assert any(ta.data.tobytes() != tc.data.tobytes()
               for (_, ta), (_, tc) in zip(a.named_tensors(), c.named_tensors()))


@pytest.mark.parametrize("head", HEADS)
def test_state_dict_round_trip_predicts_identically(head):
    src = Model(micro_model_config(head=head), seed=1)
    coords = _cloud()
    # make the running statistics non-trivial before copying
    src.forward(coords, "grasp", training=True)
    dst = Model(micro_model_config(head=head), seed=2)
    dst.load_state_dict(src.state_dict())
    pa, pb = src.predict(coords, "grasp"), dst.predict(coords, "grasp")
    assert pa.logits.tobytes() == pb.logits.tobytes()
    buffers_a, buffers_b = dict(src.named_buffers()), dict(dst.named_buffers())
    for name in buffers_a:
        assert buffers_a[name].tobytes() == buffers_b[name].tobytes()


@pytest.mark.parametrize("head,frozen_prefix", [
    (HeadVariant.AQM_HEAD, "fusion.lm."),
    (HeadVariant.PLAIN_XATTN, "fusion.emb."),
    (HeadVariant.COSINE_BASELINE, "fusion."),
])
def test_freeze_lm_excludes_exactly_the_text_stack(head, frozen_prefix):
    model = Model(micro_model_config(head=head), seed=0)
    all_ids = {id(t) for t in model.trainable()}
    kept_ids = {id(t) for t in model.trainable(freeze_lm=True)}
    assert kept_ids < all_ids
    for name, t in model.named_tensors():
        if name.startswith(frozen_prefix):
            assert id(t) not in kept_ids, name
        else:
            assert id(t) in kept_ids, name


def test_aqm_frozen_lm_keeps_inserted_cross_attention():
    model = Model(micro_model_config(head=HeadVariant.AQM_HEAD), seed=0)
    kept_names = {name for name, t in model.named_tensors()
                  if id(t) in {id(k) for k in model.trainable(freeze_lm=True)}}
    assert any(name.startswith("fusion.cross") for name in kept_names)
    assert any(name.startswith("head.") for name in kept_names)
    assert any(name.startswith("encoder.") for name in kept_names)


# --- prediction API ----------------------------------------------------------------

@pytest.mark.parametrize("head", HEADS)
def test_forward_shape_and_predict(head):
    model = Model(micro_model_config(head=head), seed=4)
    coords = _cloud()
    logits = model.forward(coords, "grasp")
    assert logits.shape == (coords.shape[0], 2)
    pred = model.predict(coords, "grasp")
    assert pred.labels.dtype == np.uint8
    assert pred.probs.shape == (coords.shape[0],)


def test_predict_all_matches_predict():
    model = Model(micro_model_config(words=("grasp", "cut")), seed=6)
    coords = _cloud()
    batch = model.predict_all(coords, ["grasp", "cut"])
    for word in ("grasp", "cut"):
        single = model.predict(coords, word)
        assert batch[word].logits.tobytes() == single.logits.tobytes()


def test_unknown_word_predicts_via_unk():
    model = Model(micro_model_config(words=("grasp",)), seed=0)
    coords = _cloud()
    pred = model.predict(coords, "zap")
    assert pred.labels.shape == (coords.shape[0],)


def test_predict_does_not_touch_running_stats():
    model = Model(micro_model_config(), seed=0)
    coords = _cloud()
    before = {name: arr.copy() for name, arr in model.named_buffers()}
    model.predict(coords, "grasp")
    for name, arr in model.named_buffers():
        assert arr.tobytes() == before[name].tobytes()


# --- single-pair overfit smoke property ---------------------------------------------

@pytest.mark.parametrize("head", HEADS)
def test_loss_decreases_monotonically_when_overfitting_one_pair(head):
    # Smoke property at a conservative step size: a sign or graph defect makes
    # the loss rise or thrash at any lr.  (At the training default 1e-3 the
    # cosine head's 1/0.07 temperature makes the first steps a cliff descent,
    # where Adam's second-moment lag produces one benign overshoot.)
    sample = generate_sample("bottle", seed=3, n_points=64)
    target = sample.mask_for("grasp")
    traces = []
    for seed in (0, 1, 2):
        model = Model(micro_model_config(words=("grasp",), head=head), seed=seed)
        opt = Adam(model.trainable(), lr=1e-4)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            with GradTape() as tape:
                loss = pair_loss(model, sample.coords, "grasp", target, training=True)
            ag.backward(tape, loss)
            losses.append(loss.data.item())
            opt.step()
        traces.append(losses)
    median = np.median(np.asarray(traces), axis=0)
    assert np.all(np.diff(median) <= 0), median

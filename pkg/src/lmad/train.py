"""Training loop: (cloud, affordance-word) pair sampling, Adam, JSONL logging.

Each step draws ``batch_size`` pairs from the train split.  For a drawn
sample the query word is, with probability ``negative_prob``, a uniformly
random *non-applicable* word (all-zero mask — teaches rejection) and
otherwise a uniformly random applicable one.  The batch is encoded jointly
(feature normalization sees all of its clouds at once) and a single Adam
update is taken on the mean pair loss.

Validation runs every ``val_every`` steps (default: once per nominal epoch)
and appends one JSON line ``{step, loss, val_miou, val_acc, val_macc}`` to
the log; the checkpoint with the best validation mIoU so far is kept.  A
non-finite loss aborts immediately.  With a fixed seed and LMAD_THREADS=1
the log stream and checkpoints are bit-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import GradTape
from .checkpoint import save_checkpoint
from .dataset import DatasetManifest, partial_view, view_seed_for
from .errors import ConfigError, NonFiniteError
from .metrics import evaluate_split
from .model import (HeadVariant, Model, ModelConfig, batch_loss, desk_model_config,
                    micro_model_config, paper_model_config)
from .optim import Adam

PRESETS = ("desk", "micro", "paper", "custom")
TASKS = ("full", "partial")


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    preset: str = "desk"
    head: str = "aqm"
    task: str = "full"
    freeze_lm: bool = False
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 30
    steps: int | None = None          # overrides epochs when set
    val_every: int | None = None      # default: one nominal epoch
    negative_prob: float = 0.25
    seed: int = 0
    custom_model: dict | None = None  # full model config when preset == "custom"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        HeadVariant.parse(self.head)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.negative_prob <= 1.0:
            raise ConfigError(f"negative_prob must be in [0, 1], got {self.negative_prob}")
        if self.preset == "custom" and not self.custom_model:
            raise ConfigError("preset 'custom' requires a custom_model section")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}; valid keys: {sorted(known)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot load run config {path}: {e}") from None

    def model_config(self, words) -> ModelConfig:
        if self.preset == "desk":
            return desk_model_config(words, head=self.head)
        if self.preset == "micro":
            return micro_model_config(words, head=self.head)
        if self.preset == "paper":
            return paper_model_config(words, head=self.head)
        cfg = ModelConfig.from_dict(self.custom_model)
        if tuple(cfg.words) != tuple(sorted(set(words))):
            raise ConfigError(f"custom model vocabulary {cfg.words} does not match "
                              f"dataset vocabulary {tuple(sorted(set(words)))}")
        if cfg.head != HeadVariant.parse(self.head):
            cfg = ModelConfig(encoder=cfg.encoder, lm=cfg.lm, words=cfg.words,
                              head=self.head, gate_zero_init=cfg.gate_zero_init)
        return cfg


@dataclass
class TrainResult:
    steps_run: int
    final_loss: float
    best_val_miou: float
    best_step: int
    checkpoint_path: Path | None
    log_lines: list[str]
    model: Model


def _pair_pools(samples) -> list[tuple[list[str], list[str]]]:
    """Applicable / non-applicable word lists per sample (stable order)."""
    pools = []
    for s in samples:
        applicable = [w for w, m in s.affordances if m.any()]
        negative = [w for w, m in s.affordances if not m.any()]
        if not applicable:
            applicable = negative  # degenerate sample: treat rejection as the task
        pools.append((applicable, negative))
    return pools


def run_training(cfg: RunConfig, out_ckpt=None, log_stream=None,
                 manifest_dir=None) -> TrainResult:
    """Train per ``cfg``; returns the final model plus the best-val summary."""
    manifest_path = Path(cfg.manifest)
    manifest = DatasetManifest.load(manifest_path)
    base = Path(manifest_dir) if manifest_dir is not None else manifest_path.parent
    from .afpc import read_sample

    train_samples = [read_sample(base / manifest.samples[i]) for i in manifest.splits["train"]]
    if not train_samples:
        raise ConfigError("train split is empty")
    if cfg.task == "partial":
        train_samples = [partial_view(s, view_seed_for(manifest.samples[i]))
                         for s, i in zip(train_samples, manifest.splits["train"])]

    model = Model(cfg.model_config(manifest.affordances), seed=cfg.seed)
    params = model.trainable(freeze_lm=cfg.freeze_lm)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    pools = _pair_pools(train_samples)

    steps_per_epoch = max(1, math.ceil(len(train_samples) / cfg.batch_size))
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * steps_per_epoch
    val_every = cfg.val_every if cfg.val_every is not None else steps_per_epoch

    log_lines: list[str] = []

    def log(record: dict) -> None:
        line = json.dumps(record)
        log_lines.append(line)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()

    best_miou = -math.inf
    best_step = -1
    ckpt_path = Path(out_ckpt) if out_ckpt is not None else None
    interval_losses: list[float] = []

    for step in range(1, total_steps + 1):
        opt.zero_grad()
        items = []
        for _ in range(cfg.batch_size):
            i = int(rng.integers(0, len(train_samples)))
            applicable, negative = pools[i]
            if negative and rng.uniform() < cfg.negative_prob:
                word = negative[int(rng.integers(0, len(negative)))]
            else:
                word = applicable[int(rng.integers(0, len(applicable)))]
            sample = train_samples[i]
            items.append((sample.coords, word, sample.mask_for(word)))
        with GradTape() as tape:
            loss = batch_loss(model, items, training=True)
        step_loss = loss.data.item()
        if not math.isfinite(step_loss):
            raise NonFiniteError(f"non-finite training loss at step {step}")
        ag.backward(tape, loss)
        opt.step()
        interval_losses.append(step_loss)

        if step % val_every == 0 or step == total_steps:
            report = evaluate_split(model, manifest, base, "val", cfg.task)
            val_miou = report["miou"] if report["miou"] is not None else 0.0
            log({"step": step,
                 "loss": float(np.mean(interval_losses)),
                 "val_miou": val_miou,
                 "val_acc": report["acc"],
                 "val_macc": report["macc"]})
            interval_losses = []
            if val_miou > best_miou:
                best_miou = val_miou
                best_step = step
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, model)

    final_loss = json.loads(log_lines[-1])["loss"] if log_lines else 0.0
    return TrainResult(steps_run=total_steps, final_loss=final_loss,
                       best_val_miou=best_miou, best_step=best_step,
                       checkpoint_path=ckpt_path, log_lines=log_lines, model=model)

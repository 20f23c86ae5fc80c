"""Per-affordance confusion bookkeeping and the evaluation report.

Predictions and targets are per-point {0,1} masks.  Counts accumulate per
affordance word across every (sample, word) evaluation; the summary derives

* ``iou``   — tp / (tp + fp + fn), defined only when that union is nonzero;
* ``acc``   — (tp + tn) / total per word;
* ``miou``  — mean IoU over words with nonzero union (others are *skipped*);
* ``acc``   (global) — micro accuracy over all evaluated points;
* ``macc``  — mean of the per-word accuracies over evaluated words.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def union(self) -> int:
        return self.tp + self.fp + self.fn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def iou(self) -> float | None:
        return self.tp / self.union if self.union > 0 else None

    @property
    def accuracy(self) -> float | None:
        return (self.tp + self.tn) / self.total if self.total > 0 else None


def _as_binary(arr, what: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be 1-d, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{what} must be binary, found values {vals[:5]}")
    return arr.astype(bool)


class ConfusionAccumulator:
    """Running per-word confusion counts over many mask evaluations."""

    def __init__(self, class_names):
        names = list(class_names)
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names")
        self.counts: dict[str, ClassCounts] = {n: ClassCounts() for n in names}

    def add(self, name: str, predicted, target) -> None:
        if name not in self.counts:
            raise KeyError(f"unknown class {name!r}")
        pred = _as_binary(predicted, "predicted mask")
        targ = _as_binary(target, "target mask")
        if pred.shape != targ.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {targ.shape}")
        c = self.counts[name]
        c.tp += int(np.count_nonzero(pred & targ))
        c.fp += int(np.count_nonzero(pred & ~targ))
        c.fn += int(np.count_nonzero(~pred & targ))
        c.tn += int(np.count_nonzero(~pred & ~targ))

    def merge(self, other: "ConfusionAccumulator") -> None:
        for name, c in other.counts.items():
            if name not in self.counts:
                raise KeyError(f"unknown class {name!r}")
            mine = self.counts[name]
            mine.tp += c.tp
            mine.fp += c.fp
            mine.fn += c.fn
            mine.tn += c.tn

    def report(self) -> dict:
        per_class = {}
        ious, accs = [], []
        correct = total = 0
        skipped = []
        for name, c in self.counts.items():
            if c.union == 0:
                skipped.append(name)
            if c.total == 0:
                continue
            per_class[name] = {"iou": c.iou, "acc": c.accuracy,
                               "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
            if c.union > 0:
                ious.append(c.iou)
            accs.append(c.accuracy)
            correct += c.tp + c.tn
            total += c.total
        if total == 0:
            raise ValueError("empty accumulator: nothing was evaluated")
        return {
            "miou": float(np.mean(ious)) if ious else None,
            "acc": correct / total,
            "macc": float(np.mean(accs)),
            "per_class": per_class,
            "skipped": sorted(skipped),
        }


def _predicted_mask(model, coords: np.ndarray, word: str) -> np.ndarray:
    """Run one query through a model or a plain ``(coords, word) -> mask`` callable."""
    if hasattr(model, "predict"):
        out = model.predict(coords, word)
    else:
        out = model(coords, word)
    return out.labels if hasattr(out, "labels") else np.asarray(out)


def evaluate_split(model, manifest, manifest_dir, split: str,
                   task: str = "full", oracle: bool = False) -> dict:
    """Query every vocabulary word against every sample of a split.

    ``task="partial"`` evaluates deterministic per-sample partial views
    instead of the stored full shapes.  Iteration order is fixed (sample
    index, then vocabulary order), so reports are reproducible.
    ``oracle=True`` scores the ground truth against itself (sanity mock:
    every metric must come out 1.0).
    """
    from pathlib import Path

    from .afpc import read_sample
    from .dataset import partial_view, view_seed_for

    if task not in ("full", "partial"):
        raise ValueError(f"unknown task {task!r}; expected 'full' or 'partial'")
    if split not in manifest.splits:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(manifest.splits)}")
    acc = ConfusionAccumulator(manifest.affordances)
    base = Path(manifest_dir)
    batch_predict = getattr(model, "predict_all", None)
    for idx in manifest.splits[split]:
        name = manifest.samples[idx]
        sample = read_sample(base / name)
        if task == "partial":
            sample = partial_view(sample, view_seed_for(name))
        words = [w for w in manifest.affordances if sample.mask_for(w) is not None]
        if oracle:
            preds = {w: sample.mask_for(w) for w in words}
        elif batch_predict is not None:
            preds = {w: p.labels for w, p in batch_predict(sample.coords, words).items()}
        else:
            preds = {w: _predicted_mask(model, sample.coords, w) for w in words}
        for word in words:
            acc.add(word, preds[word], sample.mask_for(word))
    return acc.report()

"""Zero-shot counting, MAE/RMSE evaluation and reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .counter import forward
from .domain import PROMPT_VARIANTS, count_of

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["splits", "records", "skipped", "config_hash", "seed"],
    "properties": {
        "splits": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["MAE", "RMSE", "n"],
                "properties": {
                    "MAE": {"type": "number", "minimum": 0},
                    "RMSE": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 0},
                },
            },
        },
        "records": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "variant", "predicted", "true"],
                "properties": {
                    "id": {"type": "string"},
                    "split": {"type": "string"},
                    "variant": {"enum": list(PROMPT_VARIANTS)},
                    "predicted": {"type": "number"},
                    "true": {"type": "number"},
                },
            },
        },
        "skipped": {
            "type": "array",
            "items": {"type": "object", "required": ["id", "reason"]},
        },
        "config_hash": {"type": "string"},
        "seed": {"type": "integer"},
    },
}


def count_image(image, prompt, state):
    """Predicted count and density map for one image and an arbitrary prompt."""
    dmap = forward(image, prompt, state)
    return count_of(dmap), dmap


class StatePredictor:
    def __init__(self, state):
        self.state = state

    def count(self, image, prompt):
        return count_image(image, prompt, self.state)[0]


@dataclass(frozen=True)
class MeanCountBaseline:
    """Predicts the training-set mean count for every image."""

    mean: float

    def count(self, image=None, prompt=None):
        return self.mean


def baseline_mean_count(train_samples):
    counts = [s.count if hasattr(s, "count") else float(s) for s in train_samples]
    if not counts:
        raise ValueError("train split is empty")
    return MeanCountBaseline(float(np.mean(counts)))


def config_hash(config):
    raw = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def error_metrics(predicted, true):
    err = np.asarray(predicted, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if err.size == 0:
        return 0.0, 0.0
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    # Cauchy-Schwarz; the slack only absorbs rounding
    assert mae <= rmse * (1 + 1e-12) + 1e-15, (mae, rmse)
    return mae, rmse


@dataclass
class EvalReport:
    splits: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self):
        return {"splits": self.splits, "records": self.records, "skipped": self.skipped,
                "config_hash": self.config_hash, "seed": self.seed}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self):
        rows = [("split", "n", "MAE", "RMSE")]
        for name in sorted(self.splits):
            m = self.splits[name]
            rows.append((name, str(m["n"]), f"{m['MAE']:.4f}", f"{m['RMSE']:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        if self.skipped:
            lines.append(f"skipped: {len(self.skipped)}")
        return "\n".join(lines) + "\n"

    def merge(self, other):
        self.splits.update(other.splits)
        self.records.extend(other.records)
        self.skipped.extend(other.skipped)
        return self


def evaluate(samples, model, prompts, variant="category", split=None, config=None, seed=0):
    """Evaluate a predictor on one split with a chosen prompt variant.

    ``model`` is a :class:`~richcount.domain.TrainState` or any object with a
    ``count(image, prompt)`` method. Images whose prompt variant is missing
    are recorded in ``skipped`` rather than silently dropped.
    """
    if variant not in PROMPT_VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    if not samples:
        raise ValueError("split is empty")
    predictor = model if hasattr(model, "count") else StatePredictor(model)
    split = split or samples[0].split
    records, skipped, pred, true = [], [], [], []
    for s in samples:
        prompt = prompts[s.id].variant(variant) if s.id in prompts else ""
        if not prompt:
            skipped.append({"id": s.id, "split": split, "reason": f"missing {variant} prompt"})
            continue
        c = float(predictor.count(s.pixels, prompt))
        records.append({"id": s.id, "split": split, "variant": variant, "predicted": c, "true": float(s.count)})
        pred.append(c)
        true.append(float(s.count))
    mae, rmse = error_metrics(pred, true)
    return EvalReport({split: {"MAE": mae, "RMSE": rmse, "n": len(records)}}, records, skipped,
                      config_hash(config or {}), int(seed))


def prompt_gap(samples, state, prompts, a="category", b="description"):
    """Mean absolute difference between counts predicted from two prompt variants."""
    gaps = []
    for s in samples:
        pa, pb = prompts[s.id].variant(a), prompts[s.id].variant(b)
        if pa and pb:
            gaps.append(abs(count_image(s.pixels, pa, state)[0] - count_image(s.pixels, pb, state)[0]))
    if not gaps:
        raise ValueError("no samples carry both prompt variants")
    return float(np.mean(gaps))


"""Gradient-based channel vulnerability and vulnerability-ranked channel selection.

For one input with top class ``t`` the score of a channel is

    sum_{i != t}  sum_{w in channel} (d(Z_i - Z_t)/dw)^2  /  (Z_i - Z_t)^2

where the channel's parameter set is its weight slab plus its bias.  Scores
are averaged over a calibration set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .engine import ModelGraph, backward, forward
from .modelio import Dataset

# logit margins below this (squared) are treated as ties and skipped
MARGIN_EPS = 1e-12
DEFAULT_CALIBRATION_SIZE = 1024


class ChannelId(NamedTuple):
    layer: int
    channel: int


@dataclass
class VulnerabilityReport:
    scores: dict[ChannelId, float]
    sample_count: int = 0
    seed: int | None = None
    source: str = "vulnerability"
    meta: dict = field(default_factory=dict)

    def layers(self) -> list[int]:
        return sorted({c.layer for c in self.scores})

    def layer_scores(self, layer: int) -> np.ndarray:
        chans = sorted(c.channel for c in self.scores if c.layer == layer)
        return np.array([self.scores[ChannelId(layer, c)] for c in chans])

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_index", "channel_index", "score"])
            for cid in sorted(self.scores):
                w.writerow([cid.layer, cid.channel, repr(float(self.scores[cid]))])

    @classmethod
    def load_csv(cls, path, source: str = "vulnerability") -> VulnerabilityReport:
        with open(path, newline="") as fh:
            scores = {
                ChannelId(int(r["layer_index"]), int(r["channel_index"])): float(r["score"]) for r in csv.DictReader(fh)
            }
        return cls(scores, source=source)


def _channel_sq_norms(grads, model: ModelGraph) -> dict[int, np.ndarray]:
    """Per-row squared gradient norm of each output channel, float64."""
    out = {}
    for i in model.parametric_layers():
        g = grads[i]
        w = g["weight"].astype(np.float64)
        sq = (w * w).reshape(w.shape[0], w.shape[1], -1).sum(axis=2)
        if "bias" in g:
            b = g["bias"].astype(np.float64)
            sq = sq + b * b
        out[i] = sq
    return out


def per_input_vulnerability(model: ModelGraph, images: np.ndarray) -> dict[int, np.ndarray]:
    """Scores for each input separately: {layer: [n_inputs, n_channels]}."""
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    c = model.num_classes
    z = forward(model, images).astype(np.float64)
    top = np.argmax(z, axis=1)

    rows_sample, rows_class = [], []
    for s in range(n):
        for i in range(c):
            if i != top[s]:
                rows_sample.append(s)
                rows_class.append(i)
    rows_sample = np.asarray(rows_sample)
    rows_class = np.asarray(rows_class)
    rows_top = top[rows_sample]

    og = np.zeros((len(rows_sample), c), dtype=np.float32)
    og[np.arange(len(og)), rows_class] += 1
    og[np.arange(len(og)), rows_top] -= 1

    _, cache = forward(model, images[rows_sample], keep_cache=True)
    grads = backward(model, cache, og, per_sample=True)
    sq = _channel_sq_norms(grads, model)

    margin = z[rows_sample, rows_class] - z[rows_sample, rows_top]
    denom = margin * margin
    valid = denom >= MARGIN_EPS
    weight = np.where(valid, 1.0 / np.where(valid, denom, 1.0), 0.0)

    out = {}
    for layer, s in sq.items():
        terms = s * weight[:, None]
        per_input = np.zeros((n, s.shape[1]))
        # fixed accumulation order: rows are grouped by sample, classes ascending
        for k in range(c - 1):
            per_input += terms[k :: c - 1]
        out[layer] = per_input
    return out


def channel_vulnerability(
    model: ModelGraph,
    calib: Dataset | np.ndarray,
    batch_size: int = 32,
    seed: int | None = None,
) -> VulnerabilityReport:
    """Mean per-input channel vulnerability over ``calib``."""
    if model.num_classes < 2:
        raise ValueError("channel vulnerability needs at least two classes")
    images = calib.images if isinstance(calib, Dataset) else np.asarray(calib)
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    totals = {i: np.zeros(model.params[i]["weight"].shape[0]) for i in model.parametric_layers()}
    for start in range(0, len(images), batch_size):
        part = per_input_vulnerability(model, images[start : start + batch_size])
        for layer, v in part.items():
            for row in v:
                totals[layer] += row
    n = len(images)
    scores = {
        ChannelId(layer, ch): float(tot[ch] / n) for layer, tot in totals.items() for ch in range(len(tot))
    }
    return VulnerabilityReport(scores, sample_count=n, seed=seed)


def calibration_subset(ds: Dataset, size: int = DEFAULT_CALIBRATION_SIZE, seed: int = 0) -> Dataset:
    """Fixed-seed subset of ``ds`` (all of it when smaller than ``size``)."""
    rng = np.random.default_rng(seed)
    if size >= len(ds):
        return ds
    idx = np.sort(rng.choice(len(ds), size=size, replace=False))
    return ds.subset(idx)


def _count(ratio: float, n: int, rounding) -> int:
    # absorb binary fractions like 0.15 * 20 = 3.0000000000000004
    x = ratio * n
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return int(rounding(x))


def select_channels(
    report: VulnerabilityReport,
    ratio: float,
    direction: str = "most",
    layers: list[int] | None = None,
) -> list[ChannelId]:
    """Per layer, the ceil(ratio * n) most (or least) vulnerable channels.

    Ties resolve toward the lower channel index.  The result is ordered by
    layer, then by rank.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio {ratio} outside [0, 1]")
    if direction not in ("most", "least"):
        raise ValueError(f"direction must be 'most' or 'least', got {direction!r}")
    picked = []
    for layer in layers if layers is not None else report.layers():
        scores = report.layer_scores(layer)
        k = _count(ratio, len(scores), math.ceil)
        if direction == "most":
            order = sorted(range(len(scores)), key=lambda c: (-scores[c], c))
        else:
            order = sorted(range(len(scores)), key=lambda c: (scores[c], c))
        picked.extend(ChannelId(layer, c) for c in order[:k])
    return picked


def report_for_layers(model: ModelGraph, values: dict[int, np.ndarray], source: str) -> VulnerabilityReport:
    scores = {}
    for layer in model.parametric_layers():
        for ch, v in enumerate(values[layer]):
            scores[ChannelId(layer, ch)] = float(v)
    return VulnerabilityReport(scores, source=source)


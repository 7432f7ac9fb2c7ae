"""Structured channel pruning by vulnerability or L1 norm, plus fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import BATCHNORM, CONV, EDAC, FC, FLATTEN, VOTER, LayerSpec, ModelGraph
from .modelio import Dataset
from .training import train_sgd
from .vulnerability import ChannelId, VulnerabilityReport

VULNERABILITY = "vulnerability"
L1 = "l1"


@dataclass
class PruneConfig:
    conv_ratio: float = 0.0
    fc_ratio: float = 0.0
    score_source: str = VULNERABILITY
    epochs: int = 10
    lr: float = 0.001
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("conv_ratio", "fc_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r < 1.0:
                raise ValueError(f"{name} {r} outside [0, 1)")
        if self.score_source not in (VULNERABILITY, L1):
            raise ValueError(f"score_source must be {VULNERABILITY!r} or {L1!r}")


def l1_scores(model: ModelGraph) -> VulnerabilityReport:
    """Sum of absolute weights per output channel (bias excluded)."""
    scores = {}
    for i in model.parametric_layers():
        w = model.params[i]["weight"].astype(np.float64)
        per = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
        for ch, v in enumerate(per):
            scores[ChannelId(i, ch)] = float(v)
    return VulnerabilityReport(scores, source=L1)


def _floor_count(ratio: float, n: int) -> int:
    x = ratio * n
    nearest = round(x)
    if abs(x - nearest) < 1e-9:
        return int(nearest)
    return math.floor(x)


def channels_to_keep(model: ModelGraph, scores: VulnerabilityReport, cfg: PruneConfig) -> dict[int, np.ndarray]:
    """Surviving output channels for every CONV/FC layer (logit layer untouched)."""
    last = model.logit_layer()
    keep = {}
    for i in model.parametric_layers():
        n = model.params[i]["weight"].shape[0]
        if i == last:
            keep[i] = np.arange(n)
            continue
        ratio = cfg.conv_ratio if model.layers[i].kind == CONV else cfg.fc_ratio
        k = _floor_count(ratio, n)
        if k >= n:
            raise ValueError(f"ratio {ratio} would remove all {n} channels of layer {i}")
        s = [scores.scores[ChannelId(i, c)] for c in range(n)]
        # lowest score first; on ties the higher index goes first so the lower one survives
        order = sorted(range(n), key=lambda c: (s[c], -c))
        keep[i] = np.array(sorted(order[k:]), dtype=np.int64)
    return keep


def prune(model: ModelGraph, scores: VulnerabilityReport, cfg: PruneConfig) -> ModelGraph:
    """Remove the lowest-scoring channels and every tensor slice that depends on them."""
    if any(s.kind in (EDAC, VOTER) for s in model.layers):
        raise ValueError("prune the baseline model before hardening it")
    keep = channels_to_keep(model, scores, cfg)
    shapes = model.layer_shapes()
    layers: list[LayerSpec] = []
    params: list[dict[str, np.ndarray]] = []
    # channels currently flowing into the next layer, and the spatial size they carry once flattened
    live: np.ndarray | None = None
    spatial = 1
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        geom = dict(spec.geometry)
        new_p = {k: v.copy() for k, v in p.items()}
        if spec.kind == CONV:
            w = new_p["weight"]
            if live is not None:
                w = w[:, live]
                geom["in_channels"] = len(live)
            live = keep[i]
            new_p["weight"] = np.ascontiguousarray(w[live])
            if "bias" in new_p:
                new_p["bias"] = new_p["bias"][live]
            geom["out_channels"] = len(live)
        elif spec.kind == FC:
            w = new_p["weight"]
            if live is not None:
                cols = (live[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)
                w = w[:, cols]
                geom["in_features"] = len(cols)
            live = keep[i]
            spatial = 1
            new_p["weight"] = np.ascontiguousarray(w[live])
            if "bias" in new_p:
                new_p["bias"] = new_p["bias"][live]
            geom["out_features"] = len(live)
        elif spec.kind == BATCHNORM and live is not None:
            new_p = {k: v[live] for k, v in new_p.items()}
            geom["channels"] = len(live)
        elif spec.kind == FLATTEN and live is not None:
            in_shape = shapes[i - 1] if i else model.input_shape
            spatial = int(np.prod(in_shape[1:]))
        layers.append(LayerSpec(spec.kind, geom, spec.has_bias))
        params.append(new_p)
    out = ModelGraph(layers, params, model.input_shape, model.num_classes, dict(model.meta))
    out.meta["pruning"] = {
        "conv_ratio": cfg.conv_ratio,
        "fc_ratio": cfg.fc_ratio,
        "score_source": scores.source,
    }
    out.validate()
    return out


def fine_tune(model: ModelGraph, train_ds: Dataset, cfg: PruneConfig) -> ModelGraph:
    """Cross-entropy SGD for ``cfg.epochs`` epochs at ``cfg.lr``."""
    return train_sgd(model, train_ds, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed)

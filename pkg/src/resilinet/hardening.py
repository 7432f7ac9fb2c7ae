"""Selective channel duplication (or triplication) with correction layers.

Replicas of a channel are appended after the original output channels of
its CONV/FC layer, and an EDAC (or voter) layer placed right after that
layer folds them back to the baseline channel count, so every downstream
layer is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .edac import ALL_CHANNELS, DUPLICATED_ONLY, SCOPES
from .engine import CONV, EDAC, FC, VOTER, LayerSpec, ModelGraph, count_params_macs
from .modelio import IntervalTable
from .vulnerability import ChannelId, VulnerabilityReport, select_channels

DUPLICATE = "duplicate"
TRIPLICATE = "triplicate"
MODES = (DUPLICATE, TRIPLICATE)


@dataclass
class HardeningPlan:
    mode: str = DUPLICATE
    hardened: set[ChannelId] = field(default_factory=set)
    interval_scope: str = ALL_CHANNELS
    ratio: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.interval_scope not in SCOPES:
            raise ValueError(f"interval_scope must be one of {SCOPES}, got {self.interval_scope!r}")
        self.hardened = {ChannelId(*c) for c in self.hardened}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "interval_scope": self.interval_scope,
            "ratio": self.ratio,
            "hardened": [list(c) for c in sorted(self.hardened)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> HardeningPlan:
        return cls(d["mode"], {ChannelId(*c) for c in d["hardened"]}, d["interval_scope"], d.get("ratio"))


def make_plan(
    model: ModelGraph,
    report: VulnerabilityReport,
    ratio: float,
    mode: str = DUPLICATE,
    interval_scope: str = ALL_CHANNELS,
) -> HardeningPlan:
    """Harden the ``ratio`` most vulnerable channels of each layer plus the whole logit layer."""
    chosen = set(select_channels(report, ratio, "most", layers=model.parametric_layers()))
    last = model.logit_layer()
    chosen |= {ChannelId(last, c) for c in range(model.params[last]["weight"].shape[0])}
    return HardeningPlan(mode, chosen, interval_scope, ratio)


def full_plan(model: ModelGraph, mode: str = DUPLICATE, interval_scope: str = ALL_CHANNELS) -> HardeningPlan:
    chans = {
        ChannelId(i, c) for i in model.parametric_layers() for c in range(model.params[i]["weight"].shape[0])
    }
    return HardeningPlan(mode, chans, interval_scope, 1.0)


def harden_model(model: ModelGraph, plan: HardeningPlan, intervals: IntervalTable | None = None) -> ModelGraph:
    """Return a hardened copy of ``model``.

    ``intervals`` is required in duplicate mode (one profiled table entry per
    CONV/FC layer); the voter ignores it.
    """
    if any(s.kind in (EDAC, VOTER) for s in model.layers):
        raise ValueError("model is already hardened")
    parametric = model.parametric_layers()
    for cid in plan.hardened:
        if cid.layer not in parametric:
            raise ValueError(f"plan references layer {cid.layer}, which is not a CONV/FC layer")
        if not 0 <= cid.channel < model.params[cid.layer]["weight"].shape[0]:
            raise ValueError(f"plan references missing channel {cid.channel} of layer {cid.layer}")
    last = model.logit_layer()
    n_logits = model.params[last]["weight"].shape[0]
    if any(ChannelId(last, c) not in plan.hardened for c in range(n_logits)):
        raise ValueError("every output channel of the logit layer must be hardened")
    if plan.mode == DUPLICATE:
        if intervals is None:
            raise ValueError("duplicate mode needs profiled detection intervals")
        missing = [i for i in parametric if i not in intervals]
        if missing:
            raise ValueError(f"no detection intervals for layers {missing}")

    copies = 1 if plan.mode == DUPLICATE else 2
    layers: list[LayerSpec] = []
    params: list[dict[str, np.ndarray]] = []
    layer_map = []
    for i, (spec, p) in enumerate(zip(model.layers, model.params)):
        layer_map.append(len(layers))
        if spec.kind not in (CONV, FC):
            layers.append(LayerSpec(spec.kind, dict(spec.geometry), spec.has_bias))
            params.append({k: v.copy() for k, v in p.items()})
            continue
        n = p["weight"].shape[0]
        chosen = sorted(c.channel for c in plan.hardened if c.layer == i)
        k = len(chosen)
        groups = [[c] for c in range(n)]
        for r in range(copies):
            for pos, c in enumerate(chosen):
                groups[c].append(n + r * k + pos)
        sel = np.asarray(chosen, dtype=np.int64)
        new_p = {name: np.concatenate([v] + [v[sel]] * copies, axis=0) for name, v in p.items()}
        geom = dict(spec.geometry)
        geom["out_channels" if spec.kind == CONV else "out_features"] = n + copies * k
        layers.append(LayerSpec(spec.kind, geom, spec.has_bias))
        params.append(new_p)
        if plan.mode == DUPLICATE:
            lo, up = intervals[i]
            if len(lo) != n:
                raise ValueError(f"interval table for layer {i} covers {len(lo)} channels, layer has {n}")
            layers.append(LayerSpec(EDAC, {"groups": groups, "scope": plan.interval_scope}))
            params.append({"lower": np.array(lo, dtype=np.float32), "upper": np.array(up, dtype=np.float32)})
        else:
            layers.append(LayerSpec(VOTER, {"groups": groups}))
            params.append({})
    meta = dict(model.meta)
    meta["hardening"] = dict(plan.to_dict(), layer_map=layer_map)
    out = ModelGraph(layers, params, model.input_shape, model.num_classes, meta)
    out.validate()
    return out


def overhead_report(baseline: ModelGraph, hardened: ModelGraph) -> tuple[float, float]:
    """Parameter and MAC overhead of ``hardened`` over ``baseline``, in percent."""
    bp, bm = count_params_macs(baseline)
    hp, hm = count_params_macs(hardened)
    p = 100.0 * (hp - bp) / bp if bp else 0.0
    m = 100.0 * (hm - bm) / bm if bm else 0.0
    return p, m


def interval_param_count(model: ModelGraph) -> int:
    return sum(int(v.size) for s, p in zip(model.layers, model.params) if s.kind == EDAC for v in p.values())


__all__ = [
    "ALL_CHANNELS",
    "DUPLICATED_ONLY",
    "DUPLICATE",
    "TRIPLICATE",
    "HardeningPlan",
    "full_plan",
    "harden_model",
    "interval_param_count",
    "make_plan",
    "overhead_report",
]

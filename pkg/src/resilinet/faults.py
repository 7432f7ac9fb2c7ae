"""Bitflip fault injection into model parameters and repeated-trial campaigns.

Per trial and per layer, ``round(BER * P * 32)`` distinct bits are drawn
without replacement from the layer's ``P * 32`` parameter bits, using a
Philox stream keyed on ``(master seed, trial, layer)``.  Every stored tensor
is a target: weights, biases, batchnorm affine and running statistics, and
EDAC interval bounds.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .engine import ModelGraph, param_shapes
from .modelio import Dataset, evaluate

BER_LADDER = (1e-8, 5e-8, 1e-7, 5e-7, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4)
THREADS_ENV = "RESILINET_THREADS"


def bitflip(value, bit: int) -> np.float32:
    """Toggle one bit (0 = mantissa LSB, 31 = sign) of a binary32 value."""
    if not 0 <= bit <= 31:
        raise ValueError(f"bit {bit} outside [0, 31]")
    word = np.array([value], dtype=np.float32).view(np.uint32)
    word ^= np.uint32(1 << bit)
    return word.view(np.float32)[0]


class Flip(NamedTuple):
    layer: int
    tensor: str
    index: int  # flat element index within the tensor
    bit: int


@dataclass
class FlipPlan:
    flips: list[Flip] = field(default_factory=list)

    def __len__(self):
        return len(self.flips)

    def per_layer(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for f in self.flips:
            counts[f.layer] = counts.get(f.layer, 0) + 1
        return counts

    def to_bytes(self) -> bytes:
        return "\n".join(f"{f.layer},{f.tensor},{f.index},{f.bit}" for f in self.flips).encode()


def layer_bit_counts(model: ModelGraph) -> list[int]:
    """Number of parameter elements per layer (multiply by 32 for bits)."""
    return [sum(int(v.size) for v in p.values()) for p in model.params]


def flip_count(ber: float, n_params: int) -> int:
    # Python's round() is half-to-even
    return int(round(ber * n_params * 32))


def _layer_rng(seed: int, trial: int, layer: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial, layer])))


def plan_flips(model: ModelGraph, ber: float, seed: int, trial: int = 0) -> FlipPlan:
    if not 0.0 < ber <= 1.0:
        raise ValueError(f"BER {ber} outside (0, 1]")
    flips = []
    for li, (spec, p) in enumerate(zip(model.layers, model.params)):
        names = [n for n in param_shapes(spec) if n in p]
        sizes = [int(p[n].size) for n in names]
        total = sum(sizes)
        n = flip_count(ber, total)
        if n == 0:
            continue
        if n > total * 32:
            raise ValueError(f"layer {li}: {n} flips exceed its {total * 32} bits")
        picks = np.sort(_layer_rng(seed, trial, li).choice(total * 32, size=n, replace=False))
        bounds = np.cumsum([0] + sizes)
        for pos in picks.tolist():
            element, bit = divmod(pos, 32)
            t = int(np.searchsorted(bounds, element, side="right")) - 1
            flips.append(Flip(li, names[t], element - int(bounds[t]), bit))
    return FlipPlan(flips)


def apply_flips(model: ModelGraph, plan: FlipPlan) -> ModelGraph:
    """Copy of ``model`` with every planned bit toggled."""
    out = model.copy()
    for f in plan.flips:
        if not 0 <= f.layer < len(out.params) or f.tensor not in out.params[f.layer]:
            raise IndexError(f"flip targets missing tensor {f.tensor!r} of layer {f.layer}")
        arr = out.params[f.layer][f.tensor]
        if not 0 <= f.index < arr.size or not 0 <= f.bit <= 31:
            raise IndexError(f"flip {f} out of bounds for tensor of {arr.size} elements")
        arr.reshape(-1).view(np.uint32)[f.index] ^= np.uint32(1 << f.bit)
    return out


# ---------------------------------------------------------------------------
# campaigns


@dataclass
class CampaignConfig:
    bers: list[float]
    trials: int
    seed: int
    workers: int | None = None

    def __post_init__(self):
        if not self.bers:
            raise ValueError("BER list is empty")
        for b in self.bers:
            if not 0.0 < b <= 1.0:
                raise ValueError(f"BER {b} outside (0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass
class CampaignResult:
    bers: list[float]
    trials: int
    seed: int
    clean_accuracy: float
    accuracies: np.ndarray  # [len(bers), trials]

    @property
    def mean_accuracy(self) -> np.ndarray:
        return np.array([math.fsum(row) / self.trials for row in self.accuracies.tolist()])

    @property
    def mean_drop(self) -> np.ndarray:
        return self.clean_accuracy - self.mean_accuracy

    def trial_rows(self):
        for b, ber in enumerate(self.bers):
            for t in range(self.trials):
                acc = float(self.accuracies[b, t])
                yield ber, t, acc, self.clean_accuracy - acc

    def summary_rows(self):
        for ber, mean, drop in zip(self.bers, self.mean_accuracy, self.mean_drop):
            yield ber, float(mean), float(drop), self.trials, self.seed


_STATE: dict = {}


def _init_worker(model, dataset, clean):
    _STATE["model"] = model
    _STATE["dataset"] = dataset
    _STATE["clean"] = clean


def _run_trial(task):
    ber, seed, trial = task
    model = _STATE["model"]
    plan = plan_flips(model, ber, seed, trial)
    if not plan.flips:
        return _STATE["clean"]
    return evaluate(apply_flips(model, plan), _STATE["dataset"])


def resolve_workers(workers: int | None) -> int:
    n = workers if workers is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def run_campaign(cfg: CampaignConfig, model: ModelGraph, dataset: Dataset) -> CampaignResult:
    """Plan, inject, evaluate for every (BER, trial); results keyed by position."""
    clean = evaluate(model, dataset)
    tasks = [(float(ber), cfg.seed, t) for ber in cfg.bers for t in range(cfg.trials)]
    workers = resolve_workers(cfg.workers)
    if workers == 1:
        _init_worker(model, dataset, clean)
        accs = [_run_trial(t) for t in tasks]
    else:
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(model, dataset, clean)) as pool:
            accs = pool.map(_run_trial, tasks, chunksize=max(1, len(tasks) // (4 * workers)))
    return CampaignResult(
        [float(b) for b in cfg.bers],
        cfg.trials,
        cfg.seed,
        clean,
        np.array(accs, dtype=np.float64).reshape(len(cfg.bers), cfg.trials),
    )

"""CSV emission for campaign results and cross-variant comparisons."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import ModelGraph
from .faults import CampaignResult
from .modelio import Dataset, evaluate

ECHO_NAME = "config_echo.json"
TRIAL_COLUMNS = ["ber", "trial", "accuracy", "drop"]
SUMMARY_COLUMNS = ["ber", "mean_accuracy", "mean_drop", "trials", "seed"]
COMPARISON_COLUMNS = [
    "variant",
    "hardening_ratio",
    "ber",
    "mean_accuracy",
    "mean_drop",
    "trials",
    "seed",
    "clean_accuracy",
    "param_overhead_pct",
    "mac_overhead_pct",
    "inference_time_s",
]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_csv(path, header: list[str], rows) -> Path:
    """UTF-8, LF line endings, header first."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_campaign(result: CampaignResult, directory, prefix: str = "") -> tuple[Path, Path]:
    d = Path(directory)
    trials = write_csv(d / f"{prefix}trials.csv", TRIAL_COLUMNS, result.trial_rows())
    summary = write_csv(d / f"{prefix}summary.csv", SUMMARY_COLUMNS, result.summary_rows())
    return trials, summary


def load_campaign(directory, prefix: str = "") -> CampaignResult:
    """Rebuild a CampaignResult from the CSVs written by ``write_campaign``."""
    d = Path(directory)
    rows = read_csv(d / f"{prefix}trials.csv")
    summary = read_csv(d / f"{prefix}summary.csv")
    if not rows or not summary:
        raise ValueError(f"empty campaign CSVs in {d}")
    bers = [float(r["ber"]) for r in summary]
    trials = int(summary[0]["trials"])
    acc = np.full((len(bers), trials), np.nan)
    pos = {b: i for i, b in enumerate(bers)}
    for r in rows:
        acc[pos[float(r["ber"])], int(r["trial"])] = float(r["accuracy"])
    if np.isnan(acc).any():
        raise ValueError(f"trials CSV in {d} does not cover every (ber, trial)")
    echo = d / ECHO_NAME
    if echo.exists():
        clean = float(json.loads(echo.read_text(encoding="utf-8"))["clean_accuracy"])
    else:
        clean = float(rows[0]["accuracy"]) + float(rows[0]["drop"])
    return CampaignResult(bers, trials, int(summary[0]["seed"]), clean, acc)


def measure_inference_time(model: ModelGraph, ds: Dataset, repeats: int = 3) -> float:
    """Best-of-``repeats`` wall-clock seconds for one pass over ``ds``."""
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        evaluate(model, ds)
        best = min(best, time.perf_counter() - t0)
    return best


@dataclass
class VariantResult:
    name: str
    hardening_ratio: float | None
    result: CampaignResult
    param_overhead: float = 0.0
    mac_overhead: float = 0.0
    inference_time: float = 0.0


def comparison_rows(variants: list[VariantResult]):
    for v in variants:
        for ber, mean, drop, trials, seed in v.result.summary_rows():
            yield (
                v.name,
                v.hardening_ratio,
                ber,
                mean,
                drop,
                trials,
                seed,
                float(v.result.clean_accuracy),
                float(v.param_overhead),
                float(v.mac_overhead),
                float(v.inference_time),
            )


def emit_report(variants: list[VariantResult], directory) -> dict[str, Path]:
    """Per-variant summary CSVs plus ``comparison.csv`` keyed by (variant, ratio, BER)."""
    if not variants:
        raise ValueError("report needs at least one variant")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate variant names in {names}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    for v in variants:
        out[v.name] = write_csv(d / f"{v.name}_summary.csv", SUMMARY_COLUMNS, v.result.summary_rows())
    out["comparison"] = write_csv(d / "comparison.csv", COMPARISON_COLUMNS, comparison_rows(variants))
    return out

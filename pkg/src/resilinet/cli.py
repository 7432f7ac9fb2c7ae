"""Command-line entry point: ``resilinet <subcommand> --config FILE.json``.

Exit codes: 0 success, 2 usage or configuration error (nothing written),
1 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from .desk import desk_cnn, export_digits_idx
from .engine import LayerSpec, build_model, count_params_macs
from .faults import CampaignConfig, run_campaign
from .hardening import DUPLICATE, MODES, full_plan, harden_model, make_plan, overhead_report
from .edac import ALL_CHANNELS, SCOPES
from .modelio import IntervalTable, evaluate, load_dataset, load_model, profile_intervals, save_model
from .pruning import L1, VULNERABILITY, PruneConfig, fine_tune, l1_scores, prune
from .report import ECHO_NAME, VariantResult, emit_report, load_campaign, measure_inference_time, write_campaign
from .training import train_sgd
from .vulnerability import (
    DEFAULT_CALIBRATION_SIZE,
    VulnerabilityReport,
    calibration_subset,
    channel_vulnerability,
)

log = logging.getLogger("resilinet")

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Bad or inconsistent configuration: reported with exit code 2."""


# ---------------------------------------------------------------------------
# config helpers


class Config:
    """A parsed JSON config with typed, path-resolving accessors.

    Every key read is recorded; leftovers are rejected as unknown.
    """

    def __init__(self, data: dict, base: Path, where: str = "config"):
        if not isinstance(data, dict):
            raise ConfigError(f"{where} must be a JSON object")
        self.data = data
        self.base = base
        self.where = where
        self.used: set[str] = set()

    def _get(self, key, default, required):
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigError(f"{self.where}: missing required key {key!r}")
            return default
        return self.data[key]

    def number(self, key, default=None, *, required=False, integer=False, lo=None, hi=None):
        v = self._get(key, default, required)
        if v is None:
            return v
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            raise ConfigError(f"{self.where}: {key!r} must be {'an integer' if integer else 'a number'}")
        if lo is not None and v < lo or hi is not None and v > hi:
            raise ConfigError(f"{self.where}: {key!r}={v} outside [{lo}, {hi}]")
        return v

    def text(self, key, default=None, *, required=False, choices=None):
        v = self._get(key, default, required)
        if v is None:
            return v
        if not isinstance(v, str):
            raise ConfigError(f"{self.where}: {key!r} must be a string")
        if choices is not None and v not in choices:
            raise ConfigError(f"{self.where}: {key!r} must be one of {sorted(choices)}, got {v!r}")
        return v

    def path(self, key, *, required=True, must_exist=True) -> Path | None:
        v = self.text(key, required=required)
        if v is None:
            return None
        p = Path(v)
        p = p if p.is_absolute() else (self.base / p)
        p = p.resolve()
        if must_exist and not p.exists():
            raise ConfigError(f"{self.where}: {key!r} path does not exist: {p}")
        return p

    def seed(self) -> int:
        return self.number("seed", required=True, integer=True, lo=0, hi=2**64 - 1)

    def child(self, key, *, required=True) -> Config | None:
        v = self._get(key, None, required)
        if v is None:
            return None
        return Config(v, self.base, f"{self.where}.{key}")

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self.used)
        if unknown:
            raise ConfigError(f"{self.where}: unknown keys {unknown}")


def _output_path(cfg: Config, key: str) -> Path:
    p = cfg.path(key, must_exist=False)
    if not p.parent.exists():
        raise ConfigError(f"{cfg.where}: directory for {key!r} does not exist: {p.parent}")
    return p


class DataSpec:
    """Where a dataset lives; loading is deferred until the run starts."""

    def __init__(self, cfg: Config, split: str):
        self.split = split
        self.fmt = cfg.text("format", required=True, choices={"idx", "cifar-binary", "digits"})
        self.num_classes = cfg.number("num_classes", integer=True, lo=1)
        self.mean = cfg._get("mean", None, False)
        self.std = cfg._get("std", None, False)
        if self.fmt == "idx":
            self.files = [cfg.path("images"), cfg.path("labels")]
        elif self.fmt == "cifar-binary":
            self.files = [cfg.path("path")]
        else:
            self.dir = cfg.path("dir", must_exist=False)
            self.files = []
        cfg.finish()

    def load(self):
        if self.fmt == "digits":
            paths = export_digits_idx(self.dir)
            self.files = [paths[f"{self.split}_images"], paths[f"{self.split}_labels"]]
            return load_dataset(self.files[0], "idx", self.files[1], self.num_classes or 10, split=self.split)
        labels = self.files[1] if self.fmt == "idx" else None
        return load_dataset(self.files[0], self.fmt, labels, self.num_classes, self.mean, self.std, self.split)

    def echo(self) -> dict:
        d = {"format": self.fmt}
        if self.fmt == "idx":
            d.update(images=str(self.files[0]), labels=str(self.files[1]))
        elif self.fmt == "cifar-binary":
            d.update(path=str(self.files[0]))
        else:
            d.update(dir=str(self.dir))
        for k in ("num_classes", "mean", "std"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# subcommands: each ``prepare_*`` validates the config and returns a runner


def prepare_train(cfg: Config):
    train = DataSpec(cfg.child("train_data"), "train")
    test_cfg = cfg.child("test_data", required=False)
    test = DataSpec(test_cfg, "test") if test_cfg else None
    arch = cfg.text("arch", "desk", choices={"desk", "layers"})
    width = cfg.number("width", 16, integer=True, lo=1)
    hidden = cfg.number("hidden", 64, integer=True, lo=1)
    layer_list = cfg._get("layers", None, arch == "layers")
    init = cfg.path("init_model", required=False)
    epochs = cfg.number("epochs", 30, integer=True, lo=0)
    lr = cfg.number("lr", 0.05, lo=0)
    batch = cfg.number("batch_size", 32, integer=True, lo=1)
    seed = cfg.seed()
    out = _output_path(cfg, "output")
    if layer_list is not None and not isinstance(layer_list, list):
        raise ConfigError("config: 'layers' must be a list")

    def run():
        ds = train.load()
        if init is not None:
            model = load_model(init)
        elif arch == "desk":
            model = desk_cnn(seed, width, hidden)
        else:
            specs = []
            for item in layer_list:
                item = dict(item)
                specs.append(LayerSpec(item.pop("kind"), item.pop("geometry", {}), item.pop("has_bias", False)))
            model = build_model(specs, ds.images.shape[1:], ds.num_classes, seed)
        model = train_sgd(model, ds, epochs, lr, batch, seed)
        save_model(model, out)
        print(f"train accuracy {evaluate(model, ds):.4f}")
        if test is not None:
            print(f"test accuracy {evaluate(model, test.load()):.4f}")
        print(f"wrote {out}")

    return run


def prepare_profile(cfg: Config):
    model_path = cfg.path("model")
    train = DataSpec(cfg.child("train_data"), "train")
    out = _output_path(cfg, "output")

    def run():
        table = profile_intervals(load_model(model_path), train.load())
        table.save_csv(out)
        print(f"wrote {out}")

    return run


def prepare_vuln(cfg: Config):
    model_path = cfg.path("model")
    train = DataSpec(cfg.child("train_data"), "train")
    size = cfg.number("calibration_size", DEFAULT_CALIBRATION_SIZE, integer=True, lo=1)
    batch = cfg.number("batch_size", 32, integer=True, lo=1)
    seed = cfg.seed()
    out = _output_path(cfg, "output")

    def run():
        model = load_model(model_path)
        calib = calibration_subset(train.load(), size, seed)
        channel_vulnerability(model, calib, batch, seed).save_csv(out)
        print(f"wrote {out}")

    return run


def prepare_harden(cfg: Config):
    model_path = cfg.path("model")
    mode = cfg.text("mode", DUPLICATE, choices=set(MODES))
    scope = cfg.text("interval_scope", ALL_CHANNELS, choices=set(SCOPES))
    ratio = cfg.number("ratio", required=True, lo=0, hi=1)
    iv_path = cfg.path("intervals", required=mode == DUPLICATE)
    vuln_path = cfg.path("vulnerability", required=ratio < 1)
    out = _output_path(cfg, "output")

    def run():
        model = load_model(model_path)
        intervals = IntervalTable.load_csv(iv_path) if iv_path else None
        if ratio >= 1:
            plan = full_plan(model, mode, scope)
        else:
            plan = make_plan(model, VulnerabilityReport.load_csv(vuln_path), ratio, mode, scope)
        hardened = harden_model(model, plan, intervals)
        save_model(hardened, out)
        p, m = overhead_report(model, hardened)
        print(f"param overhead {p:.4f}%  mac overhead {m:.4f}%")
        print(f"wrote {out}")

    return run


def prepare_prune(cfg: Config):
    model_path = cfg.path("model")
    train = DataSpec(cfg.child("train_data"), "train")
    source = cfg.text("score_source", VULNERABILITY, choices={VULNERABILITY, L1})
    vuln_path = cfg.path("vulnerability", required=False)
    size = cfg.number("calibration_size", DEFAULT_CALIBRATION_SIZE, integer=True, lo=1)
    try:
        pc = PruneConfig(
            cfg.number("conv_ratio", 0.0),
            cfg.number("fc_ratio", 0.0),
            source,
            cfg.number("epochs", 10, integer=True, lo=0),
            cfg.number("lr", 0.001, lo=0),
            cfg.number("batch_size", 32, integer=True, lo=1),
            cfg.seed(),
        )
    except ValueError as e:
        raise ConfigError(f"config: {e}") from None
    out = _output_path(cfg, "output")

    def run():
        model = load_model(model_path)
        ds = train.load()
        if source == L1:
            scores = l1_scores(model)
        elif vuln_path is not None:
            scores = VulnerabilityReport.load_csv(vuln_path)
        else:
            scores = channel_vulnerability(model, calibration_subset(ds, size, pc.seed), seed=pc.seed)
        pruned = fine_tune(prune(model, scores, pc), ds, pc)
        save_model(pruned, out)
        (p0, m0), (p1, m1) = count_params_macs(model), count_params_macs(pruned)
        print(f"params {p0} -> {p1}  macs {m0} -> {m1}")
        print(f"wrote {out}")

    return run


def prepare_inject(cfg: Config):
    model_path = cfg.path("model")
    test = DataSpec(cfg.child("test_data"), "test")
    bers = cfg._get("bers", None, True)
    if not isinstance(bers, list) or not all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in bers):
        raise ConfigError("config: 'bers' must be a list of numbers")
    trials = cfg.number("trials", required=True, integer=True, lo=1)
    workers = cfg.number("workers", None, integer=True, lo=1)
    seed = cfg.seed()
    out_dir = cfg.path("output_dir", must_exist=False)
    artifacts = cfg._get("artifacts", None, False)  # present when re-running from an echo
    cfg._get("clean_accuracy", None, False)
    cfg._get("command", None, False)
    try:
        camp = CampaignConfig([float(b) for b in bers], trials, seed, workers)
    except ValueError as e:
        raise ConfigError(f"config: {e}") from None

    def run():
        ds = test.load()
        hashes = {"model": sha256(model_path), "test_data": [sha256(p) for p in test.files]}
        if artifacts is not None and artifacts != hashes:
            raise RuntimeError("artifact hashes differ from the echoed config: inputs changed since that run")
        model = load_model(model_path)
        result = run_campaign(camp, model, ds)
        out_dir.mkdir(parents=True, exist_ok=True)
        trials_csv, summary_csv = write_campaign(result, out_dir)
        echo = {
            "schema_version": SCHEMA_VERSION,
            "command": "inject",
            "model": str(model_path),
            "test_data": test.echo(),
            "bers": camp.bers,
            "trials": trials,
            "seed": seed,
            "output_dir": str(out_dir),
            "artifacts": hashes,
            "clean_accuracy": result.clean_accuracy,
        }
        (out_dir / ECHO_NAME).write_text(json.dumps(echo, indent=2) + "\n", encoding="utf-8")
        for row in result.summary_rows():
            print("ber {:g}  mean accuracy {:.4f}  mean drop {:.4f}".format(*row[:3]))
        print(f"wrote {trials_csv}, {summary_csv}")

    return run


def prepare_report(cfg: Config):
    test = DataSpec(cfg.child("test_data"), "test")
    repeats = cfg.number("timing_repeats", 3, integer=True, lo=1)
    out_dir = cfg.path("output_dir", must_exist=False)
    raw = cfg._get("variants", None, True)
    if not isinstance(raw, list) or not raw:
        raise ConfigError("config: 'variants' must be a non-empty list")
    variants = []
    for k, item in enumerate(raw):
        v = Config(item, cfg.base, f"config.variants[{k}]")
        spec = {
            "name": v.text("name", required=True),
            "model": v.path("model"),
            "baseline": v.path("baseline", required=False),
            "hardening_ratio": v.number("hardening_ratio", None, lo=0, hi=1),
            "campaign_dir": v.path("campaign_dir"),
        }
        v.finish()
        variants.append(spec)
    names = [s["name"] for s in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"config: duplicate variant names {names}")

    def run():
        ds = test.load()
        results = []
        for s in variants:
            model = load_model(s["model"])
            p = m = 0.0
            if s["baseline"] is not None:
                p, m = overhead_report(load_model(s["baseline"]), model)
            results.append(
                VariantResult(
                    s["name"],
                    s["hardening_ratio"],
                    load_campaign(s["campaign_dir"]),
                    p,
                    m,
                    measure_inference_time(model, ds, repeats),
                )
            )
        paths = emit_report(results, out_dir)
        echo = {
            "schema_version": SCHEMA_VERSION,
            "command": "report",
            "test_data": test.echo(),
            "timing_repeats": repeats,
            "output_dir": str(out_dir),
            "variants": [
                dict(
                    {k: (str(v) if isinstance(v, Path) else v) for k, v in s.items()},
                    artifacts={"model": sha256(s["model"]), "campaign_echo": _maybe_hash(s["campaign_dir"] / ECHO_NAME)},
                )
                for s in variants
            ],
        }
        (out_dir / ECHO_NAME).write_text(json.dumps(echo, indent=2) + "\n", encoding="utf-8")
        print(f"wrote {paths['comparison']}")

    return run


def _maybe_hash(path: Path):
    return sha256(path) if path.exists() else None


def prepare_stats(cfg: Config):
    model_path = cfg.path("model")

    def run():
        params, macs = count_params_macs(load_model(model_path))
        print(f"params {params}")
        print(f"macs {macs}")

    return run


COMMANDS = {
    "train": (prepare_train, "train a baseline CNN with SGD"),
    "profile": (prepare_profile, "profile per-channel detection intervals on the training split"),
    "vuln": (prepare_vuln, "compute channel vulnerability scores"),
    "harden": (prepare_harden, "duplicate or triplicate channels and insert correction layers"),
    "prune": (prepare_prune, "prune channels by vulnerability or L1 norm, then fine-tune"),
    "inject": (prepare_inject, "run a bitflip fault-injection campaign"),
    "report": (prepare_report, "merge campaigns into comparison CSVs with overheads and timings"),
    "stats": (prepare_stats, "print parameter and MAC counts of a saved model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resilinet", description="Selective channel hardening of CNNs against parameter bitflips.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=name != "stats", type=Path, help="JSON config file")
        if name == "stats":
            p.add_argument("--model", type=Path, help="model file (instead of a config)")
        if name in ("inject", "report"):
            p.add_argument("--output-dir", type=Path, help="override output_dir from the config")
    return parser


def _load_config(args) -> Config:
    if args.command == "stats" and args.config is None:
        if args.model is None:
            raise ConfigError("stats needs --config or --model")
        return Config({"model": str(args.model)}, Path.cwd())
    if args.command == "stats" and args.model is not None:
        raise ConfigError("give either --config or --model, not both")
    try:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {args.config} is not valid JSON: {e}") from None
    cfg = Config(data, Path(args.config).resolve().parent)
    version = cfg.number("schema_version", SCHEMA_VERSION, integer=True)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    if getattr(args, "output_dir", None) is not None:
        data["output_dir"] = str(args.output_dir.resolve())
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help exits 0, usage errors 2
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = _load_config(args)
        runner = COMMANDS[args.command][0](cfg)
        cfg.finish()
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        print(f"resilinet {args.command}: error: {e}", file=sys.stderr)
        return 2
    try:
        runner()
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        print(f"resilinet {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

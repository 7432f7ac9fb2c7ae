"""Model containers, dataset loaders, accuracy evaluation and interval profiling."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import EDAC, LAYER_KINDS, PARAMETRIC, VOTER, LayerSpec, ModelGraph, ShapeError, forward, param_shapes

MAGIC = b"NNHM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class ModelFormatError(ValueError):
    """Base class for malformed model containers."""


class VersionMismatchError(ModelFormatError):
    pass


class UnknownLayerKindError(ModelFormatError):
    pass


class TensorShapeMismatchError(ModelFormatError):
    pass


class TruncatedBlobError(ModelFormatError):
    pass


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model container
#
#   "NNHM" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | blobs
#
# Blobs are little-endian binary32, row-major, at the offsets the manifest
# gives relative to the end of the manifest.


def save_model(model: ModelGraph, path) -> Path:
    model.validate()
    path = Path(path)
    layers = []
    blobs = []
    offset = 0
    for spec, p in zip(model.layers, model.params):
        tensors = []
        for name in param_shapes(spec):
            data = np.ascontiguousarray(p[name], dtype="<f4").tobytes()
            tensors.append({"name": name, "shape": list(p[name].shape), "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        layers.append({"kind": spec.kind, "geometry": spec.geometry, "has_bias": spec.has_bias, "tensors": tensors})
    manifest = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": layers,
        "meta": model.meta,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(text)))
            fh.write(text)
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise OSError(f"cannot write model container {path}: {exc.strerror or exc}") from exc
    return path


def load_model(path) -> ModelGraph:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedBlobError(f"{path}: truncated header")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: container version {version}, this reader supports {FORMAT_VERSION}")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise TruncatedBlobError(f"{path}: truncated manifest")
    manifest = json.loads(raw[start : start + mlen].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: manifest version {manifest.get('version')}")
    payload = memoryview(raw)[start + mlen :]

    layers, params = [], []
    for li, entry in enumerate(manifest["layers"]):
        if entry["kind"] not in LAYER_KINDS:
            raise UnknownLayerKindError(f"{path}: layer {li}: unknown layer kind {entry['kind']!r}")
        spec = LayerSpec(entry["kind"], entry.get("geometry", {}), bool(entry.get("has_bias", False)))
        p = {}
        for t in entry["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape))
            if t["nbytes"] != 4 * count:
                raise TensorShapeMismatchError(
                    f"{path}: layer {li} tensor {t['name']}: shape {list(shape)} needs {4 * count} bytes, "
                    f"manifest declares {t['nbytes']}"
                )
            end = t["offset"] + t["nbytes"]
            if end > len(payload):
                raise TruncatedBlobError(
                    f"{path}: layer {li} tensor {t['name']}: truncated blob "
                    f"({max(0, len(payload) - t['offset']) // 4} of {count} floats present)"
                )
            arr = np.frombuffer(payload[t["offset"] : end], dtype="<f4").astype(np.float32).reshape(shape)
            p[t["name"]] = arr
        layers.append(spec)
        params.append(p)
    model = ModelGraph(layers, params, tuple(manifest["input_shape"]), manifest["num_classes"], manifest.get("meta", {}))
    try:
        model.validate()
    except ShapeError as exc:
        raise TensorShapeMismatchError(f"{path}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) < 1:
            raise DatasetFormatError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetFormatError(f"label out of range [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _read_idx(path: Path, expected_rank: int | None = None) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DatasetFormatError(f"{path}: not an unsigned-byte IDX file (magic {raw[:4].hex()})")
    rank = raw[3]
    if expected_rank is not None and rank != expected_rank:
        magic = 0x800 + expected_rank
        raise DatasetFormatError(f"{path}: magic 0x{int.from_bytes(raw[:4], 'big'):08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{rank}I", raw[4 : 4 + 4 * rank])
    data = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * rank)
    if data.size != int(np.prod(dims)):
        raise DatasetFormatError(f"{path}: expected {int(np.prod(dims))} bytes of data, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def write_cifar(path, images: np.ndarray, labels: np.ndarray, coarse_labels: np.ndarray | None = None) -> None:
    """Write [N, 3, 32, 32] uint8 images in CIFAR-10 (or CIFAR-100) binary layout."""
    imgs = np.ascontiguousarray(images, dtype=np.uint8).reshape(len(images), -1)
    cols = [labels.astype(np.uint8)[:, None]]
    if coarse_labels is not None:
        cols.insert(0, coarse_labels.astype(np.uint8)[:, None])
    np.concatenate(cols + [imgs], axis=1).tofile(path)


def _normalize(images: np.ndarray, mean, std) -> np.ndarray:
    if mean is None and std is None:
        return images
    c = images.shape[1]
    m = np.asarray(mean if mean is not None else [0.0] * c, dtype=np.float32).reshape(1, c, 1, 1)
    s = np.asarray(std if std is not None else [1.0] * c, dtype=np.float32).reshape(1, c, 1, 1)
    return ((images - m) / s).astype(np.float32)


def load_dataset(
    path,
    fmt: str,
    labels_path=None,
    num_classes: int | None = None,
    mean=None,
    std=None,
    split: str = "train",
) -> Dataset:
    """Load an IDX (``idx``) or CIFAR binary (``cifar-binary``) dataset.

    Pixels are scaled to [0, 1]; ``mean``/``std`` are per-channel constants
    applied afterwards.  For IDX, ``labels_path`` names the label file.
    For CIFAR, ``num_classes`` 100 selects the two-label-byte layout.
    """
    path = Path(path)
    if fmt == "idx":
        if labels_path is None:
            raise DatasetFormatError("IDX datasets need a labels file")
        raw = _read_idx(path)
        if raw.ndim == 3:
            raw = raw[:, None]
        elif raw.ndim != 4:
            raise DatasetFormatError(f"{path}: IDX image rank {raw.ndim} unsupported")
        labels = _read_idx(Path(labels_path), expected_rank=1).astype(np.int64)
        num_classes = num_classes or 10
    elif fmt == "cifar-binary":
        num_classes = num_classes or 10
        label_bytes = 2 if num_classes == 100 else 1
        record = label_bytes + 3072
        buf = np.fromfile(path, dtype=np.uint8)
        if buf.size == 0 or buf.size % record:
            raise DatasetFormatError(f"{path}: size {buf.size} is not a multiple of the {record}-byte record")
        rows = buf.reshape(-1, record)
        labels = rows[:, label_bytes - 1].astype(np.int64)
        raw = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    else:
        raise DatasetFormatError(f"unknown dataset format {fmt!r}")
    if len(labels) != len(raw):
        raise DatasetFormatError(f"{len(raw)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DatasetFormatError(f"label {int(labels.max())} out of range for {num_classes} classes")
    images = raw.astype(np.float32) / np.float32(255.0)
    return Dataset(_normalize(images, mean, std), labels, num_classes, split)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: ModelGraph, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Top-1 class per image; ties go to the lower index, NaN logits never win."""
    preds = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        z = forward(model, images[start : start + batch_size])
        z = np.where(np.isnan(z), -np.inf, z)
        preds[start : start + batch_size] = np.argmax(z, axis=1)
    return preds


def evaluate(model: ModelGraph, ds: Dataset, batch_size: int = 512) -> float:
    """Top-1 accuracy in percent."""
    correct = int(np.count_nonzero(predict(model, ds.images, batch_size) == ds.labels))
    return 100.0 * correct / len(ds)


# ---------------------------------------------------------------------------
# detection intervals


@dataclass
class IntervalTable:
    """Per-output-channel [lower, upper] bounds for every CONV/FC layer."""

    bounds: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __getitem__(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        return self.bounds[layer]

    def __contains__(self, layer: int) -> bool:
        return layer in self.bounds

    def layers(self) -> list[int]:
        return sorted(self.bounds)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer_index", "channel_index", "lower", "upper"])
            for layer in self.layers():
                lo, up = self.bounds[layer]
                for ch in range(len(lo)):
                    w.writerow([layer, ch, repr(float(lo[ch])), repr(float(up[ch]))])

    @classmethod
    def load_csv(cls, path) -> IntervalTable:
        rows: dict[int, list[tuple[int, float, float]]] = {}
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.setdefault(int(r["layer_index"]), []).append(
                    (int(r["channel_index"]), float(r["lower"]), float(r["upper"]))
                )
        bounds = {}
        for layer, entries in rows.items():
            entries.sort()
            if [e[0] for e in entries] != list(range(len(entries))):
                raise DatasetFormatError(f"{path}: layer {layer} channel indices are not contiguous")
            bounds[layer] = (
                np.array([e[1] for e in entries], dtype=np.float32),
                np.array([e[2] for e in entries], dtype=np.float32),
            )
        return cls(bounds)


def profile_intervals(model: ModelGraph, train_ds: Dataset, batch_size: int = 512) -> IntervalTable:
    """Min/max of every raw CONV/FC output channel over one clean pass of ``train_ds``."""
    if len(train_ds) == 0:
        raise DatasetFormatError("cannot profile on an empty dataset")
    if any(s.kind in (EDAC, VOTER) for s in model.layers):
        raise ValueError("profile the baseline model, not a hardened one")
    lows: dict[int, np.ndarray] = {}
    highs: dict[int, np.ndarray] = {}

    def observe(i, out):
        if model.layers[i].kind not in PARAMETRIC:
            return
        axes = (0,) + tuple(range(2, out.ndim))
        lo, hi = out.min(axis=axes), out.max(axis=axes)
        lows[i] = lo if i not in lows else np.minimum(lows[i], lo)
        highs[i] = hi if i not in highs else np.maximum(highs[i], hi)

    for start in range(0, len(train_ds), batch_size):
        forward(model, train_ds.images[start : start + batch_size], observer=observe)
    return IntervalTable({i: (lows[i].astype(np.float32), highs[i].astype(np.float32)) for i in sorted(lows)})

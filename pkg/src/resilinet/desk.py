"""Desk-scale stand-in: a small VGG-style CNN on the 8x8 handwritten digits.

The digits set (1,797 images, 10 classes) ships with scikit-learn, so the
whole pipeline runs offline.  It is exported to IDX files so the CLI and the
loaders exercise the same bytes as any MNIST-style dataset.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .engine import ModelGraph, batchnorm, build_model, conv, fc, flatten, maxpool, relu
from .modelio import Dataset, load_dataset, write_idx

DIGITS_SHAPE = (1, 8, 8)
SPLIT_SEED = 2024
TEST_FRACTION = 0.25


def desk_layers(width: int = 16, hidden: int = 64, num_classes: int = 10):
    return [
        conv(1, width, 3, padding=1),
        batchnorm(width),
        relu(),
        maxpool(2),
        conv(width, 2 * width, 3, padding=1),
        batchnorm(2 * width),
        relu(),
        maxpool(2),
        flatten(),
        fc(2 * width * 2 * 2, hidden),
        relu(),
        fc(hidden, num_classes),
    ]


def desk_cnn(seed: int = 0, width: int = 16, hidden: int = 64) -> ModelGraph:
    return build_model(desk_layers(width, hidden), DIGITS_SHAPE, 10, seed=seed)


def _digits_bytes():
    from sklearn.datasets import load_digits

    d = load_digits()
    # 4-bit intensities 0..16 -> 0..255
    images = np.clip(np.rint(d.images * (255.0 / 16.0)), 0, 255).astype(np.uint8)
    return images, d.target.astype(np.uint8)


def export_digits_idx(directory) -> dict[str, Path]:
    """Write the fixed train/test split of the digits as four IDX files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, labels = _digits_bytes()
    order = np.random.default_rng(SPLIT_SEED).permutation(len(labels))
    n_test = int(round(TEST_FRACTION * len(labels)))
    parts = {"test": order[:n_test], "train": np.sort(order[n_test:])}
    parts["test"] = np.sort(parts["test"])
    paths = {}
    for split, idx in parts.items():
        img = directory / f"{split}-images-idx3-ubyte"
        lab = directory / f"{split}-labels-idx1-ubyte"
        write_idx(img, images[idx])
        write_idx(lab, labels[idx])
        paths[f"{split}_images"] = img
        paths[f"{split}_labels"] = lab
    return paths


def digits_datasets(directory) -> tuple[Dataset, Dataset]:
    paths = export_digits_idx(directory)
    train = load_dataset(paths["train_images"], "idx", paths["train_labels"], 10, split="train")
    test = load_dataset(paths["test_images"], "idx", paths["test_labels"], 10, split="test")
    return train, test

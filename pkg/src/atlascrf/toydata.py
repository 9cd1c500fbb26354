"""Synthetic nested-ellipsoid dataset for desk-scale experiments.

Each case is a 3-class volume: background, an outer ellipsoid shell, and an
inner core, with jittered geometry per case. Intensities get i.i.d. noise
plus a smooth random bias field; the bias defeats purely local appearance
classification in places, which is exactly the failure mode the atlas prior
is meant to repair.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import InvalidParamError
from .train import TrainSample
from .volume import LabelMap, ScalarVolume, read_vol1, write_vol1

TOY_K = 3
TOY_DIMS = (32, 32, 32)
TOY_COUNTS = (10, 2, 6)  # train / val / test

CLASS_MEANS = (0.25, 0.55, 0.85)
NOISE_SIGMA = 0.06
BIAS_BUMPS = 3
BIAS_AMPLITUDE = 0.28
BIAS_WIDTH = (6.0, 10.0)
INTENSITY_CLIP = (0.0, 1.2)


def make_toy_case(seed, case_index: int, dims=TOY_DIMS) -> TrainSample:
    """One deterministic case; geometry and corruption vary with the index."""
    rng = np.random.default_rng([int(seed), int(case_index)])
    d, h, w = dims
    center = np.array([d / 2, h / 2, w / 2]) + np.clip(rng.normal(0, 1.0, 3), -2.5, 2.5)
    outer = np.array([0.34 * d, 0.31 * h, 0.28 * w]) * (1.0 + rng.normal(0, 0.06, 3))
    inner = np.array([0.19 * d, 0.17 * h, 0.15 * w]) * (1.0 + rng.normal(0, 0.08, 3))
    grids = np.indices(dims, dtype=np.float64)
    q_outer = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, outer))
    q_inner = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, inner))
    labels = np.zeros(dims, dtype=np.uint16)
    labels[q_outer <= 1.0] = 1
    labels[q_inner <= 1.0] = 2

    scan = np.take(np.asarray(CLASS_MEANS), labels)
    scan = scan + rng.normal(0.0, NOISE_SIGMA, dims)
    for _ in range(BIAS_BUMPS):
        bump_center = rng.uniform(0, np.asarray(dims, dtype=np.float64))
        width = rng.uniform(*BIAS_WIDTH)
        amp = rng.uniform(-BIAS_AMPLITUDE, BIAS_AMPLITUDE)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, bump_center))
        scan = scan + amp * np.exp(-r2 / (2.0 * width**2))
    scan = np.clip(scan, *INTENSITY_CLIP)
    return TrainSample(ScalarVolume(scan), LabelMap(labels, TOY_K))


def generate_toy_dataset(
    root, seed: int = 0, dims=TOY_DIMS, counts=TOY_COUNTS
) -> dict:
    """Write the train/val/test splits as VOL1 files plus a dataset manifest."""
    if len(counts) != 3 or min(counts) < 0:
        raise InvalidParamError(f"counts must be (train, val, test) >= 0, got {counts}")
    splits = {"train": counts[0], "val": counts[1], "test": counts[2]}
    manifest = {
        "k": TOY_K,
        "dims": list(dims),
        "seed": int(seed),
        "splits": {},
    }
    case_index = 0
    for split, count in splits.items():
        split_dir = os.path.join(root, split)
        os.makedirs(split_dir, exist_ok=True)
        names = []
        for _ in range(count):
            sample = make_toy_case(seed, case_index, dims)
            scan_name = f"case_{case_index:03d}.scan.vol1"
            label_name = f"case_{case_index:03d}.labels.vol1"
            write_vol1(os.path.join(split_dir, scan_name), sample.scan)
            write_vol1(os.path.join(split_dir, label_name), sample.labels)
            names.append({"scan": scan_name, "labels": label_name})
            case_index += 1
        manifest["splits"][split] = names
    with open(os.path.join(root, "dataset.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_toy_dataset(root) -> tuple[dict, dict[str, list[TrainSample]]]:
    """Read a toygen directory back into per-split sample lists."""
    manifest_path = os.path.join(root, "dataset.json")
    if not os.path.exists(manifest_path):
        raise InvalidParamError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    splits: dict[str, list[TrainSample]] = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for entry in entries:
            scan = read_vol1(os.path.join(root, split, entry["scan"]))
            labels = read_vol1(os.path.join(root, split, entry["labels"]))
            samples.append(TrainSample(scan, labels))
        splits[split] = samples
    return manifest, splits

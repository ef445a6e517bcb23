"""Datasets: a procedural class-conditional image generator sized for
minutes-scale CPU runs, plus ingestion of CIFAR-style binary records.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .io import load_tensor, save_tensor
from .tensor import Rng, Tensor


@dataclass
class Dataset:
    images: Tensor  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # uint32, length N
    class_count: int

    def __post_init__(self):
        if len(self.images.dims) != 4 or self.images.dims[0] == 0:
            raise DataError(f"dataset images must be a nonempty NCHW tensor, got {self.images.dims}")
        if self.labels.shape != (self.images.dims[0],):
            raise DataError("label count does not match image count")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise DataError("label outside [0, class_count)")

    def __len__(self) -> int:
        return self.images.dims[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(Tensor(self.images.data[idx]), self.labels[idx], self.class_count)


def make_synthetic(classes: int, per_class: int, image_size: int, channels: int,
                   rng: Rng) -> Dataset:
    """Class-conditional oriented gratings with per-sample phase shift and noise."""
    if classes < 1 or per_class < 1:
        raise DataError("need at least one class and one sample per class")
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = np.empty((classes * per_class, channels, image_size, image_size), dtype=np.float64)
    labels = np.empty(classes * per_class, dtype=np.uint32)
    # one grating orientation per class; the random phase doubles as a shift
    for cls in range(classes):
        crng = rng.child("class").child(cls)
        theta = math.pi * cls / classes
        coord = (xs * math.cos(theta) + ys * math.sin(theta)) / image_size
        phases = crng.uniform(per_class) * 2.0 * math.pi
        chan_off = 2.0 * math.pi * (cls + 1) / (2.0 * classes + 4.0)
        noise = crng.normal((per_class, channels, image_size, image_size)) * 0.55
        for ch in range(channels):
            wave = np.sin(2.0 * math.pi * 2.5 * coord[None, :, :]
                          + phases[:, None, None] + ch * chan_off)
            images[cls * per_class:(cls + 1) * per_class, ch] = 0.5 + 0.28 * wave
        images[cls * per_class:(cls + 1) * per_class] += noise
        labels[cls * per_class:(cls + 1) * per_class] = cls
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(Tensor(images.astype(np.float32)), labels, classes)


_META_NAME = "dataset.json"


def gen_synthetic_dataset(out_dir, classes: int, train_per_class: int, test_per_class: int,
                          image_size: int, channels: int, seed: int) -> dict:
    """Render the synthetic task to container files under out_dir."""
    rng = Rng(seed)
    train = make_synthetic(classes, train_per_class, image_size, channels, rng.child("train"))
    test = make_synthetic(classes, test_per_class, image_size, channels, rng.child("test"))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "train_images.sokt", train.images)
    save_tensor(out / "train_labels.sokt", train.labels)
    save_tensor(out / "test_images.sokt", test.images)
    save_tensor(out / "test_labels.sokt", test.labels)
    meta = {
        "class_count": classes,
        "train_per_class": train_per_class,
        "test_per_class": test_per_class,
        "image_size": image_size,
        "channels": channels,
        "seed": seed,
    }
    (out / _META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return meta


def load_dataset(dir_path, split: str) -> Dataset:
    base = Path(dir_path)
    meta_path = base / _META_NAME
    if not meta_path.exists():
        raise DataError(f"no {_META_NAME} in {dir_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    images = load_tensor(base / f"{split}_images.sokt")
    labels = load_tensor(base / f"{split}_labels.sokt")
    return Dataset(images, labels, meta["class_count"])


def load_cifar_records(path, max_records: int | None = None) -> Dataset:
    """Read CIFAR binary batches: label byte(s) then 3072 pixel bytes per record.

    Records with two label bytes (coarse then fine, the 100-class layout) are
    detected by file size; the fine label is used.
    """
    blob = Path(path).read_bytes()
    if len(blob) == 0:
        raise DataError(f"{path}: empty file")
    if len(blob) % 3074 == 0:
        record, label_bytes, classes = 3074, 2, 100
    elif len(blob) % 3073 == 0:
        record, label_bytes, classes = 3073, 1, 10
    else:
        raise DataError(f"{path}: length {len(blob)} is not a multiple of a CIFAR record size")
    n = len(blob) // record
    if max_records is not None:
        n = min(n, max_records)
    raw = np.frombuffer(blob[: n * record], dtype=np.uint8).reshape(n, record)
    labels = raw[:, label_bytes - 1].astype(np.uint32)
    pixels = raw[:, label_bytes:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(Tensor(pixels), labels, classes)


def split_train_val(dataset: Dataset, val_fraction: float, rng: Rng) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split, fixed for the lifetime of a run."""
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val == 0 or n_val == n:
        raise DataError(f"validation fraction {val_fraction} leaves an empty split")
    perm = rng.permutation(n)
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])

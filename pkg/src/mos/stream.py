"""Class-incremental streams: B-m Inc-n splits, synthetic data, file loaders."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng


@dataclass(frozen=True)
class StreamSpec:
    total_classes: int
    base_m: int = 0
    inc_n: int = 10
    shuffle_seed: int = 1993

    def __post_init__(self):
        if self.total_classes < 1 or self.inc_n < 1 or self.base_m < 0:
            raise ValueError("invalid stream spec")

    def task_sizes(self) -> list[int]:
        first = self.base_m if self.base_m > 0 else self.inc_n
        if first > self.total_classes:
            raise ValueError("first task is larger than the class count")
        if self.base_m > 0 and self.base_m + self.inc_n > self.total_classes:
            raise ValueError("no room for an incremental task after the base task")
        sizes = [first]
        rest = self.total_classes - first
        while rest >= self.inc_n:
            sizes.append(self.inc_n)
            rest -= self.inc_n
        if rest:
            # remainder joins the final task
            sizes[-1] += rest
        return sizes


class ClassTaskMap:
    """Class -> task lookup over incrementally numbered classes.

    Classes are numbered in arrival order, so task ``t`` owns a contiguous
    block; unequal task sizes are handled by the lookup table.
    """

    def __init__(self, sizes):
        sizes = [int(s) for s in sizes]
        if not sizes or min(sizes) < 1:
            raise ValueError("task sizes must be positive")
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.task_of = np.repeat(np.arange(len(sizes)), sizes)

    @property
    def num_tasks(self) -> int:
        return len(self.sizes)

    @property
    def num_classes(self) -> int:
        return int(self.offsets[-1])

    def classes(self, task: int) -> range:
        return range(self.offsets[task], self.offsets[task + 1])

    def upto(self, task: int) -> "ClassTaskMap":
        """Map restricted to tasks ``0..task``."""
        return ClassTaskMap(self.sizes[: task + 1])

    def __call__(self, cls: int) -> int:
        return int(self.task_of[cls])


def make_splits(spec: StreamSpec) -> tuple[list[list[int]], ClassTaskMap]:
    """Seeded Fisher-Yates class shuffle, then cut into tasks.

    Returns the original class ids per task and the map over incremental
    class numbers (class ``k`` in arrival order is ``order[k]``).
    """
    sizes = spec.task_sizes()
    order = make_rng(spec.shuffle_seed).permutation(spec.total_classes)
    tasks, start = [], 0
    for s in sizes:
        tasks.append([int(c) for c in order[start:start + s]])
        start += s
    return tasks, ClassTaskMap(sizes)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None
    task: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, D) with one label per row")
        if self.num_classes is not None and len(self.labels) and self.labels.max() >= self.num_classes:
            raise ValueError("label exceeds declared class count")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.features[mask], self.labels[mask], self.split, self.num_classes, self.task)

    def relabel(self, order) -> "Dataset":
        """Renumber labels so original class ``order[k]`` becomes ``k``."""
        inv = np.empty(len(order), dtype=np.int64)
        inv[np.asarray(order)] = np.arange(len(order))
        return Dataset(self.features, inv[self.labels], self.split, self.num_classes, self.task)


def synthetic_cil_dataset(num_classes: int, dim: int, per_class: int, separation: float,
                          noise: float, rng: np.random.Generator,
                          test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """Gaussian clusters with means on the sphere of radius ``separation``."""
    if per_class < 2 or separation <= 0:
        raise ValueError("need per_class >= 2 and separation > 0")
    means = rng.standard_normal((num_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    n_test = max(1, int(round(per_class * test_fraction)))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(num_classes):
        pts = means[c] + noise * rng.standard_normal((per_class, dim))
        te_x.append(pts[:n_test])
        tr_x.append(pts[n_test:])
        te_y += [c] * n_test
        tr_y += [c] * (per_class - n_test)
    return (Dataset(np.vstack(tr_x), tr_y, "train", num_classes),
            Dataset(np.vstack(te_x), te_y, "test", num_classes))


MOSD_MAGIC = b"MOSD"


def save_f32bin(ds: Dataset, path) -> None:
    n, D = ds.features.shape
    blob = (MOSD_MAGIC + struct.pack("<II", n, D)
            + np.ascontiguousarray(ds.features, dtype="<f4").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    Path(path).write_bytes(blob)


def _load_f32bin(path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MOSD_MAGIC:
        raise ValueError("malformed MOSD header")
    n, D = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * n * D + 4 * n
    if len(blob) != expected:
        raise ValueError(f"MOSD file has {len(blob)} bytes, expected {expected}")
    feats = np.frombuffer(blob, dtype="<f4", count=n * D, offset=12).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=12 + 4 * n * D).astype(np.int64)
    return feats.reshape(n, D), labels


def _load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            rows.append((lineno, row))
    if not rows:
        raise ValueError("empty csv dataset")
    width = len(rows[0][1])
    if width < 2:
        raise ValueError("csv rows need at least one feature and a label")
    feats, labels = [], []
    for lineno, row in rows:
        if len(row) != width:
            raise ValueError(f"ragged row at line {lineno}")
        feats.append([float(v) for v in row[:-1]])
        lab = float(row[-1])
        if lab != int(lab):
            raise ValueError(f"non-integer label at line {lineno}")
        labels.append(int(lab))
    return np.array(feats), np.array(labels)


def load_dataset(path, fmt: str | None = None, num_classes: int | None = None,
                 split: str = "train") -> Dataset:
    """Read a ``csv`` or ``f32bin`` dataset (format inferred from suffix)."""
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "f32bin"
    if fmt == "csv":
        feats, labels = _load_csv(path)
    elif fmt == "f32bin":
        feats, labels = _load_f32bin(path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return Dataset(feats, labels, split, num_classes)

"""Synthetic labeled shapes and the binary dataset container."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .geometry import PointCloud, normalize

SHAPES = ("sphere", "cube", "cylinder", "cone")

DATASET_MAGIC = b"SPBADATA"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")  # magic, version, K, N, count, has_normals


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    points: np.ndarray  # (S, N, 3)
    normals: np.ndarray  # (S, N, 3)
    labels: np.ndarray  # (S,)
    class_names: list[str]
    split_tag: str = "train"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError(f"points must be (S, N, 3), got {self.points.shape}")
        if self.normals.shape != self.points.shape:
            raise ValueError("normals must match points")
        if len(self.labels) != len(self.points):
            raise ValueError("one label per sample required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> PointCloud:
        return PointCloud(self.points[i], self.normals[i], int(self.labels[i]))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def subset(self, indices, split_tag: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.points[idx], self.normals[idx], self.labels[idx],
                       list(self.class_names), split_tag or self.split_tag)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_sphere(n, rng):
    p = _unit(rng.normal(size=(n, 3)))
    return p, p.copy()


def _sample_cube(n, rng):
    # six faces of equal area
    face = rng.integers(6, size=n)
    axis, side = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    nrm = np.zeros((n, 3))
    rows = np.arange(n)
    pts[rows, axis] = side
    nrm[rows, axis] = side
    return pts, nrm


def _disc(n, rng, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    return r * np.cos(th), r * np.sin(th)


def _sample_cylinder(n, rng, radius=1.0, height=2.0):
    areas = np.array([2 * np.pi * radius * height, np.pi * radius ** 2, np.pi * radius ** 2])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    barrel = part == 0
    th = rng.uniform(0.0, 2 * np.pi, size=barrel.sum())
    pts[barrel] = np.c_[radius * np.cos(th), radius * np.sin(th), rng.uniform(-height / 2, height / 2, size=len(th))]
    nrm[barrel] = np.c_[np.cos(th), np.sin(th), np.zeros_like(th)]
    for code, z in ((1, height / 2), (2, -height / 2)):
        cap = part == code
        x, y = _disc(cap.sum(), rng, radius)
        pts[cap] = np.c_[x, y, np.full_like(x, z)]
        nrm[cap] = (0.0, 0.0, np.sign(z))
    return pts, nrm


def _sample_cone(n, rng, radius=1.0, height=2.0):
    slant = np.hypot(radius, height)
    areas = np.array([np.pi * radius * slant, np.pi * radius ** 2])
    part = rng.choice(2, size=n, p=areas / areas.sum())
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    side = part == 0
    # the lateral area element grows linearly with distance from the apex
    frac = np.sqrt(rng.uniform(size=side.sum()))
    th = rng.uniform(0.0, 2 * np.pi, size=side.sum())
    rho = radius * frac
    pts[side] = np.c_[rho * np.cos(th), rho * np.sin(th), height / 2 - height * frac]
    nrm[side] = np.c_[height * np.cos(th), height * np.sin(th), np.full_like(th, radius)] / slant
    base = part == 1
    x, y = _disc(base.sum(), rng, radius)
    pts[base] = np.c_[x, y, np.full_like(x, -height / 2)]
    nrm[base] = (0.0, 0.0, -1.0)
    return pts, nrm


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
}


def sample_shape(name: str, n_points: int, rng, noise: float = 0.0) -> PointCloud:
    if name not in _SAMPLERS:
        raise ValueError(f"unknown shape {name!r}; choose from {', '.join(SHAPES)}")
    pts, nrm = _SAMPLERS[name](n_points, rng)
    angle = rng.uniform(0.0, 2 * np.pi)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    scale = rng.uniform(0.9, 1.1)
    pts = scale * pts @ rot.T
    nrm = nrm @ rot.T
    if noise > 0:
        pts = pts + noise * rng.normal(size=pts.shape)
    return normalize(PointCloud(pts, nrm))


def generate_shapes(
    classes: Sequence[str] = SHAPES,
    per_class: int = 100,
    n_points: int = 512,
    noise: float = 0.005,
    seed=0,
    split_tag: str = "train",
) -> Dataset:
    """Balanced dataset; sample i of class c draws from its own child seed."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    classes = list(classes)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = root.spawn(len(classes) * per_class)
    pts, nrm, labels = [], [], []
    for ci, name in enumerate(classes):
        for j in range(per_class):
            rng = np.random.default_rng(children[ci * per_class + j])
            cloud = sample_shape(name, n_points, rng, noise)
            pts.append(cloud.points)
            nrm.append(cloud.normals)
            labels.append(ci)
    return Dataset(np.stack(pts), np.stack(nrm), np.array(labels), classes, split_tag)


def save_dataset(path: Union[str, Path], ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.num_classes, ds.n_points, len(ds), 1))
        for text in [ds.split_tag, *ds.class_names]:
            raw = text.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for i in range(len(ds)):
            fh.write(struct.pack("<I", int(ds.labels[i])))
            fh.write(np.ascontiguousarray(ds.points[i], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.normals[i], dtype="<f8").tobytes())


def load_dataset(path: Union[str, Path]) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header", len(data))
    magic, version, k, n, count, has_normals = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}", 0)
    if version != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: dataset version {version} is not supported (this build reads version {DATASET_VERSION})", 8)
    offset = _HEADER.size

    def take(nbytes, what):
        nonlocal offset
        if offset + nbytes > len(data):
            raise DatasetFormatError(f"{path}: truncated while reading {what}", len(data))
        chunk = data[offset:offset + nbytes]
        offset += nbytes
        return chunk

    texts = []
    for i in range(k + 1):
        (length,) = struct.unpack("<I", take(4, "string length"))
        texts.append(take(length, "string").decode("utf-8"))
    split_tag, class_names = texts[0], texts[1:]
    block = 8 * n * 3
    pts = np.empty((count, n, 3))
    nrm = np.empty((count, n, 3))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label_at = offset
        (labels[i],) = struct.unpack("<I", take(4, f"label of sample {i}"))
        if labels[i] >= k:
            raise DatasetFormatError(f"{path}: label {labels[i]} >= K={k}", label_at)
        pts[i] = np.frombuffer(take(block, f"points of sample {i}"), dtype="<f8").reshape(n, 3)
        if has_normals:
            nrm[i] = np.frombuffer(take(block, f"normals of sample {i}"), dtype="<f8").reshape(n, 3)
        else:
            nrm[i] = 0.0
    if offset != len(data):
        raise DatasetFormatError(f"{path}: {len(data) - offset} trailing bytes", offset)
    return Dataset(pts, nrm, labels, class_names, split_tag)

"""Class-split datasets, episodic K-way N-shot sampling and dataset files.

File formats
------------
CSV: one item per line, no header, ``label,v1,...,vD`` with an integer
class id and ``D`` float features.

IDX: two big-endian IDX files, ``<stem>.idx`` holding the ``(n, D)`` float64
feature matrix (type code ``0x0E``) and ``<stem>.labels.idx`` holding ``n``
int32 class ids (type code ``0x0C``).

Manifest: JSON object mapping ``meta_train`` / ``meta_val`` / ``meta_test``
to lists of class ids. Defaults to ``<stem>.manifest.json``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np

from .base_learners import SupportSet

SPLITS = ("meta_train", "meta_val", "meta_test")


class ParseError(ValueError):
    pass


class SplitOverlap(ValueError):
    pass


class InsufficientItems(ValueError):
    pass


class InsufficientClasses(ValueError):
    pass


@dataclass(frozen=True)
class ClassDataset:
    items: Dict[int, np.ndarray]  # class id -> (n_items, dim)
    splits: Dict[str, List[int]]

    def __post_init__(self):
        seen: Dict[int, str] = {}
        for name, classes in self.splits.items():
            for c in classes:
                if c in seen:
                    raise SplitOverlap(f"class {c} appears in both {seen[c]} and {name}")
                if c not in self.items:
                    raise ValueError(f"split {name} lists unknown class {c}")
                seen[c] = name

    @property
    def dim(self) -> int:
        return next(iter(self.items.values())).shape[1]

    def min_items(self, split: str) -> int:
        return min(self.items[c].shape[0] for c in self.splits[split])


@dataclass(frozen=True)
class EpisodeConfig:
    way: int = 5
    train_shot: int = 5
    test_shot: int = 5
    query_count: int = 6
    test_query_count: int = 15

    def __post_init__(self):
        if self.way < 2:
            raise ValueError("way must be >= 2")
        if min(self.train_shot, self.test_shot, self.query_count, self.test_query_count) < 1:
            raise ValueError("shots and query counts must be >= 1")


@dataclass(frozen=True)
class Episode:
    support_inputs: np.ndarray
    support_labels: np.ndarray
    query_inputs: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray  # local label k -> dataset class id
    support_index: np.ndarray  # item index within its class, per support row
    query_index: np.ndarray

    @property
    def way(self) -> int:
        return len(self.class_ids)

    def support_set(self, features: np.ndarray) -> SupportSet:
        return SupportSet(features, self.support_labels, self.way)


def sample_episode(dataset: ClassDataset, split: str, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    """K distinct classes, then ``shot + query`` distinct items per class.

    Local labels follow the order in which classes were drawn.
    """
    classes = dataset.splits.get(split, [])
    if len(classes) < way:
        raise InsufficientClasses(f"split {split} has {len(classes)} classes, need {way}")
    chosen = rng.choice(np.asarray(classes), size=way, replace=False)
    s_x, s_y, s_i, q_x, q_y, q_i = [], [], [], [], [], []
    for k, c in enumerate(chosen):
        pool = dataset.items[int(c)]
        if pool.shape[0] < shot + query:
            raise InsufficientItems(
                f"class {c} has {pool.shape[0]} items, need {shot + query}")
        idx = rng.choice(pool.shape[0], size=shot + query, replace=False)
        s_x.append(pool[idx[:shot]])
        q_x.append(pool[idx[shot:]])
        s_i.append(idx[:shot])
        q_i.append(idx[shot:])
        s_y.append(np.full(shot, k))
        q_y.append(np.full(query, k))
    return Episode(np.concatenate(s_x), np.concatenate(s_y), np.concatenate(q_x),
                   np.concatenate(q_y), chosen.astype(int), np.concatenate(s_i),
                   np.concatenate(q_i))


def synthetic_task_distribution(num_classes_per_split: Mapping[str, int] | tuple,
                                informative_dim: int = 16, noise_dim: int = 64,
                                cluster_spread: float = 0.5, items_per_class: int = 40,
                                rng: np.random.Generator | None = None,
                                share_means: bool = False) -> ClassDataset:
    """Gaussian class clusters with means on the unit sphere of the informative subspace.

    Items are the class mean plus noise of scale ``cluster_spread`` in the
    informative coordinates and scale 1 in the ``noise_dim`` trailing ones.
    ``share_means`` gives every class the same mean (a chance-level control).
    """
    if min(informative_dim, items_per_class) < 1 or noise_dim < 0:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    if not isinstance(num_classes_per_split, Mapping):
        num_classes_per_split = dict(zip(SPLITS, num_classes_per_split))
    items, splits, next_id = {}, {}, 0
    shared = None
    for name in SPLITS:
        ids = []
        for _ in range(int(num_classes_per_split.get(name, 0))):
            mu = rng.standard_normal(informative_dim)
            mu /= np.linalg.norm(mu)
            if share_means:
                shared = mu if shared is None else shared
                mu = shared
            x = np.concatenate([
                mu + cluster_spread * rng.standard_normal((items_per_class, informative_dim)),
                rng.standard_normal((items_per_class, noise_dim)),
            ], axis=1)
            items[next_id] = x
            ids.append(next_id)
            next_id += 1
        splits[name] = ids
    return ClassDataset(items, splits)


# -------------------------------------------------------------------- file io

def _stem(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (".labels.idx", ".manifest.json", ".csv", ".idx"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def read_manifest(path) -> Dict[str, List[int]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    splits = {name: [int(c) for c in doc.get(name, [])] for name in SPLITS}
    seen: Dict[int, str] = {}
    for name, ids in splits.items():
        for c in ids:
            if c in seen:
                raise SplitOverlap(f"class {c} listed in both {seen[c]} and {name}")
            seen[c] = name
    return splits


def _group(labels: np.ndarray, X: np.ndarray) -> Dict[int, np.ndarray]:
    return {int(c): X[labels == c] for c in np.unique(labels)}


def _read_csv(path: Path):
    labels, rows, width = [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                label = int(fields[0])
                vals = [float(v) for v in fields[1:]]
            except ValueError as e:
                raise ParseError(f"{path}: line {lineno}: {e}") from None
            if width is None:
                width = len(vals)
            if len(vals) != width or width == 0:
                raise ParseError(f"{path}: line {lineno}: expected {width} features, got {len(vals)}")
            labels.append(label)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: line 1: file contains no items")
    return np.array(labels), np.array(rows, dtype=float)


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: offset 0: truncated header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise ParseError(f"{path}: offset 0: bad magic number")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{path}: offset 4: truncated dimension table")
    shape = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = int(np.prod(shape)) * dtype.itemsize
    if len(raw) - head != need:
        raise ParseError(f"{path}: offset {head}: expected {need} data bytes, got {len(raw) - head}")
    return np.frombuffer(raw[head:], dtype=dtype).reshape(shape).astype(
        float if dtype.kind == "f" else np.int64)


def _write_idx(path: Path, arr: np.ndarray, code: int) -> None:
    dtype = np.dtype(_IDX_DTYPES[code])
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_dataset(path, fmt: str = "csv", manifest=None) -> ClassDataset:
    """Load items from ``path`` and the class split from ``manifest``."""
    stem = _stem(path)
    if fmt == "csv":
        labels, X = _read_csv(Path(path))
    elif fmt == "idx":
        X = _read_idx(Path(path))
        labels = _read_idx(stem.with_name(stem.name + ".labels.idx"))
        if X.ndim != 2 or labels.shape != (X.shape[0],):
            raise ParseError(f"{path}: offset 0: features and labels disagree in shape")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    manifest = stem.with_name(stem.name + ".manifest.json") if manifest is None else manifest
    return ClassDataset(_group(labels, X), read_manifest(manifest))


def save_dataset(dataset: ClassDataset, path, fmt: str = "csv") -> Path:
    """Write ``dataset`` plus its manifest; returns the manifest path."""
    stem = _stem(path)
    labels = np.concatenate([np.full(v.shape[0], c) for c, v in dataset.items.items()])
    X = np.concatenate(list(dataset.items.values()))
    if fmt == "csv":
        with open(path, "w") as fh:
            for c, row in zip(labels, X):
                fh.write(",".join([str(int(c))] + [repr(float(v)) for v in row]) + "\n")
    elif fmt == "idx":
        _write_idx(Path(path), X, 0x0E)
        _write_idx(stem.with_name(stem.name + ".labels.idx"), labels, 0x0C)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    manifest = stem.with_name(stem.name + ".manifest.json")
    manifest.write_text(json.dumps({k: list(map(int, v)) for k, v in dataset.splits.items()},
                                   indent=1))
    return manifest

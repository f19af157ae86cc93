"""Synthetic data, Dirichlet client partitioning, public-set sampling and IDX I/O."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError

__all__ = [
    "Dataset",
    "PublicSet",
    "Partition",
    "make_blobs",
    "dirichlet_partition",
    "draw_public",
    "build_partition",
    "load_idx",
    "write_idx",
    "label_entropy",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DataError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class PublicSet:
    inputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)

    def __len__(self):
        return len(self.inputs)


@dataclass
class Partition:
    """Client datasets, unlabeled public set and held-out test set.

    The ``*_idx`` arrays index into the source pool and are what
    :meth:`to_json` exports.
    """

    client_sets: list
    public: PublicSet
    test: Dataset
    alpha: float
    seed: int
    client_idx: list = field(default_factory=list)
    public_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "alpha": self.alpha,
                "seed": self.seed,
                "clients": [np.asarray(c).tolist() for c in self.client_idx],
                "public": [] if self.public_idx is None else np.asarray(self.public_idx).tolist(),
                "test": [] if self.test_idx is None else np.asarray(self.test_idx).tolist(),
            }
        )


def make_blobs(K: int, d: int, per_class: int, spread: float, seed: int,
               center_scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters, one per class, with N(0, center_scale^2) centers.

    Samples are class-ordered; shuffle downstream.
    """
    if K < 2 or per_class < 1 or d < 1:
        raise ParameterError("need K >= 2, d >= 1, per_class >= 1")
    if not spread > 0:
        raise ParameterError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(K, d))
    labels = np.repeat(np.arange(K), per_class)
    inputs = centers[labels] + spread * rng.standard_normal((K * per_class, d))
    return Dataset(inputs, labels, K)


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` proportional to ``weights``."""
    quota = weights / weights.sum() * total
    counts = np.floor(quota).astype(np.int64)
    short = total - counts.sum()
    if short:
        # stable sort keeps ties going to the lower client index
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(pool: Dataset, N: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Split ``pool`` into N disjoint index sets with Dirichlet label skew.

    Each client draws q_n ~ Dir(alpha * 1_K). The samples of class k are then
    dealt out in proportion to column k of the stacked q_n, rounded with
    largest remainders so every sample lands exactly once.
    """
    if N < 1:
        raise ParameterError("N must be >= 1")
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if len(pool) < N:
        raise DataError(f"pool of {len(pool)} samples is too small for {N} clients")
    K = pool.num_classes
    rng = np.random.default_rng(seed)
    q = rng.dirichlet(np.full(K, float(alpha)), size=N)      # N x K
    buckets = [[] for _ in range(N)]
    for k in range(K):
        idx = np.flatnonzero(pool.labels == k)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        col = q[:, k]
        if not col.sum() > 0:
            col = np.ones(N)
        counts = _largest_remainder(col, idx.size)
        for n, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[n].append(chunk)
    return [np.sort(np.concatenate(b)) if b else np.empty(0, np.int64) for b in buckets]


def draw_public(reserve: Dataset | np.ndarray, size: int, seed: int) -> PublicSet:
    """Sample ``size`` rows of the reserve without replacement, labels dropped."""
    inputs = reserve.inputs if isinstance(reserve, Dataset) else np.asarray(reserve, dtype=np.float64)
    if size < 0 or size > len(inputs):
        raise DataError(f"public size {size} exceeds reserve of {len(inputs)}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(inputs))[:size]
    return PublicSet(inputs[idx].reshape(size, inputs.shape[1]))


def build_partition(data: Dataset, N: int, alpha: float, public_size: int, test_size: int,
                    seed: int, test: Dataset | None = None) -> Partition:
    """Carve ``data`` into test / public reserve / client pool, then partition the pool.

    When ``test`` is given (e.g. an IDX test split) no test rows are carved.
    """
    rng = np.random.default_rng([seed, 0x7E57])
    order = rng.permutation(len(data))
    if test is None:
        test_idx, order = order[:test_size], order[test_size:]
        test = data.subset(test_idx)
    else:
        test_idx = None
    if public_size > len(order):
        raise DataError(f"public size {public_size} exceeds available {len(order)} samples")
    reserve_idx, pool_idx = order[:public_size], order[public_size:]
    pool = data.subset(pool_idx)
    local = dirichlet_partition(pool, N, alpha, seed)
    pub_rng = np.random.default_rng([seed, 0x9B1C])
    perm = pub_rng.permutation(public_size)
    public = PublicSet(data.inputs[reserve_idx[perm]])
    return Partition(
        client_sets=[pool.subset(ix) for ix in local],
        public=public,
        test=test,
        alpha=alpha,
        seed=seed,
        client_idx=[pool_idx[ix] for ix in local],
        public_idx=reserve_idx[perm],
        test_idx=test_idx,
    )


def label_entropy(labels: np.ndarray, K: int) -> float:
    """Shannon entropy (nats) of the empirical label distribution; 0 for empty sets."""
    if len(labels) == 0:
        return 0.0
    p = np.bincount(labels, minlength=K) / len(labels)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _read_header(raw: bytes, magic: int, ndim: int, what: str) -> tuple[int, ...]:
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for magic number", 0)
    (m,) = struct.unpack(">I", raw[:4])
    if m != magic:
        raise FormatError(f"{what}: bad magic 0x{m:08x}, expected 0x{magic:08x}", 0)
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{what}: truncated dimension header", len(raw))
    return struct.unpack(f">{ndim}I", raw[4:need])


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(img, IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,) = _read_header(lab, IDX_LABELS_MAGIC, 1, "labels")
    body = n_img * rows * cols
    if len(img) - 16 < body:
        raise FormatError(f"images: expected {body} pixel bytes", len(img))
    if len(lab) - 8 < n_lab:
        raise FormatError(f"labels: expected {n_lab} label bytes", len(lab))
    if n_img != n_lab:
        raise FormatError(f"{n_img} images but {n_lab} labels", 4)
    x = np.frombuffer(img, dtype=np.uint8, count=body, offset=16).reshape(n_img, rows * cols)
    y = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8)
    K = num_classes if num_classes is not None else (int(y.max()) + 1 if n_lab else 0)
    return Dataset(x.astype(np.float64) / 255.0, y.astype(np.int64), K)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())

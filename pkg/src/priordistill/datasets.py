"""Dataset loading, preprocessing, class partitioning and class-conditional sampling.

Images are held channels-last (``[N, H, W, C]``) float32 in preprocessed space.
Networks want ``NCHW``; use :func:`to_nchw` at the boundary.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

from .errors import ClassCoverageError, ConfigError, DataError, NumericError

SUPPORTED = ("digits", "synthetic", "cifar10", "cifar100", "npz")


@dataclass(frozen=True)
class PreprocConfig:
    standardize: bool = True
    zca: bool = False
    zca_epsilon: float = 0.1
    image_size: int | None = None
    test_fraction: float = 0.25
    split_seed: int = 0
    # synthetic generator knobs
    synthetic_classes: int = 10
    synthetic_per_class: int = 60
    synthetic_channels: int = 3
    synthetic_noise: float = 0.15


@dataclass(frozen=True)
class PreprocStats:
    per_channel_mean: np.ndarray
    per_channel_std: np.ndarray
    zca_matrix: np.ndarray | None = None
    zca_mean: np.ndarray | None = None
    zca_epsilon: float | None = None

    def __post_init__(self):
        if np.any(~(self.per_channel_std > 0)):
            raise DataError("per-channel std must be strictly positive")
        if self.zca_matrix is not None:
            d = self.zca_matrix.shape[0]
            if self.zca_matrix.shape != (d, d):
                raise DataError(f"zca matrix must be square, got {self.zca_matrix.shape}")

    def apply(self, raw: np.ndarray) -> np.ndarray:
        out = (raw - self.per_channel_mean) / self.per_channel_std
        if self.zca_matrix is not None:
            flat = out.reshape(len(out), -1)
            if flat.shape[1] != self.zca_matrix.shape[0]:
                raise DataError(f"zca matrix is for d={self.zca_matrix.shape[0]}, images have d={flat.shape[1]}")
            out = ((flat - self.zca_mean) @ self.zca_matrix).reshape(out.shape)
        return out.astype(np.float32)

    def invert(self, images: np.ndarray) -> np.ndarray:
        """Map preprocessed images back to raw pixel space (roughly [0, 1])."""
        out = np.asarray(images, dtype=np.float64)
        if self.zca_matrix is not None:
            flat = out.reshape(len(out), -1)
            flat = np.linalg.solve(self.zca_matrix.astype(np.float64).T, flat.T).T + self.zca_mean
            out = flat.reshape(out.shape)
        return (out * self.per_channel_std + self.per_channel_mean).astype(np.float32)

    def to_manifest(self) -> dict:
        return {
            "per_channel_mean": [float(v) for v in self.per_channel_mean],
            "per_channel_std": [float(v) for v in self.per_channel_std],
            "zca": self.zca_matrix is not None,
            "zca_epsilon": self.zca_epsilon,
        }


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    image_shape: tuple[int, int, int]
    preprocessing: PreprocStats
    class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.class_ids:
            object.__setattr__(self, "class_ids", tuple(range(self.class_count)))
        if len(self.class_ids) != self.class_count:
            raise DataError("class_ids length must equal class_count")
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("label outside [0, class_count)")
        present = np.bincount(self.labels, minlength=self.class_count)
        if np.any(present == 0):
            raise DataError(f"classes without samples: {np.flatnonzero(present == 0).tolist()}")
        if not np.isfinite(self.images).all():
            raise NumericError("non-finite pixel values after preprocessing")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @cached_property
    def _class_index(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == c) for c in range(self.class_count)]

    def class_members(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.class_count:
            raise ClassCoverageError(f"unknown class {class_id} (have {self.class_count})")
        return self._class_index[class_id]

    def restrict(self, global_classes: Sequence[int]) -> "DatasetHandle":
        """Sub-task view over ``global_classes``; labels are remapped to local indices."""
        global_classes = sorted(int(c) for c in global_classes)
        lookup = {g: i for i, g in enumerate(self.class_ids)}
        missing = [g for g in global_classes if g not in lookup]
        if missing:
            raise ClassCoverageError(f"classes {missing} not in dataset {self.name}")
        local = np.full(self.class_count, -1, dtype=np.int64)
        for new, g in enumerate(global_classes):
            local[lookup[g]] = new
        keep = local[self.labels] >= 0
        return replace(
            self,
            images=self.images[keep].copy(),
            labels=local[self.labels[keep]],
            class_count=len(global_classes),
            class_ids=tuple(global_classes),
        )

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return to_nchw(self.images), torch.from_numpy(self.labels.copy())


@dataclass(frozen=True)
class ClassPartition:
    subsets: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.subsets)

    def __post_init__(self):
        seen: set[int] = set()
        for s in self.subsets:
            if not s:
                raise ConfigError("empty class subset")
            if seen.intersection(s):
                raise ConfigError("class subsets overlap")
            seen.update(s)


def to_nchw(images) -> torch.Tensor:
    if not isinstance(images, torch.Tensor):
        arr = np.ascontiguousarray(images)
        images = torch.from_numpy(arr if arr.flags.writeable else arr.copy())
    return images.permute(0, 3, 1, 2).contiguous()


def to_nhwc(images: torch.Tensor) -> torch.Tensor:
    return images.permute(0, 2, 3, 1).contiguous()


def channel_stats(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = raw.reshape(-1, raw.shape[-1]).astype(np.float64)
    return flat.mean(0), flat.std(0)


def zca_whiten(images, epsilon: float = 0.1):
    """Whiten ``images`` (any trailing shape) with eigenvalue regularizer ``epsilon``.

    Returns ``(whitened, W, mean)`` where ``whitened = (X - mean) @ W`` and
    ``W = E diag((lam + eps)^-1/2) E^T`` from the unbiased sample covariance.
    """
    x = np.asarray(images, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise DataError("ZCA needs at least two samples")
    if epsilon < 0:
        raise ConfigError("zca epsilon must be non-negative")
    flat = x.reshape(n, -1)
    if not np.isfinite(flat).all():
        raise NumericError("non-finite input to ZCA")
    mean = flat.mean(0)
    centered = flat - mean
    cov = centered.T @ centered / (n - 1)
    lam, vecs = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    w = (vecs * (lam + epsilon) ** -0.5) @ vecs.T
    return (centered @ w).reshape(x.shape), w, mean


def partition_classes(
    class_count: int, k: int, strategy: Literal["contiguous", "seeded-random"] = "contiguous", seed: int = 0
) -> ClassPartition:
    if not 1 <= k <= class_count:
        raise ConfigError(f"k={k} must lie in [1, {class_count}]", "federated.k")
    ids = np.arange(class_count)
    if strategy == "seeded-random":
        ids = np.random.default_rng(seed).permutation(ids)
    elif strategy != "contiguous":
        raise ConfigError(f"unknown partition strategy {strategy!r}", "federated.strategy")
    return ClassPartition(tuple(tuple(sorted(int(c) for c in chunk)) for chunk in np.array_split(ids, k)))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_class_batch(handle: DatasetHandle, class_id: int, n: int, rng=None) -> np.ndarray:
    """Uniform with-replacement draw of ``n`` images of local class ``class_id``."""
    if n < 1:
        raise ConfigError("batch size must be >= 1")
    members = handle.class_members(class_id)
    pick = _rng(rng).integers(0, len(members), size=n)
    return handle.images[members[pick]]


# --- raw loaders: return (train_x, train_y, test_x, test_y) with x in [0, 1], NHWC ---


def _resize(x: np.ndarray, size: int | None) -> np.ndarray:
    if size is None or x.shape[1] == size:
        return x
    t = torch.nn.functional.interpolate(to_nchw(torch.from_numpy(x)), size=(size, size), mode="bilinear", align_corners=False)
    return to_nhwc(t).numpy()


def _stratified_split(x, y, fraction, seed):
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        test[idx[: max(1, int(round(fraction * len(idx))))]] = True
    return x[~test], y[~test], x[test], y[test]


def _load_digits(root, cfg):
    from sklearn.datasets import load_digits

    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[..., None]
    return _stratified_split(x, d.target.astype(np.int64), cfg.test_fraction, cfg.split_seed)


def _load_synthetic(root, cfg):
    """Class-conditional colored blobs; cheap, deterministic, linearly separable-ish."""
    size = cfg.image_size or 32
    rng = np.random.default_rng(cfg.split_seed + 1)
    c, per = cfg.synthetic_classes, cfg.synthetic_per_class
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    centers = rng.uniform(0.2, 0.8, size=(c, 2))
    colors = rng.uniform(0.2, 1.0, size=(c, cfg.synthetic_channels))
    xs, ys = [], []
    for k in range(c):
        jitter = rng.normal(0, 0.05, size=(per, 2))
        cy = (centers[k, 0] + jitter[:, 0])[:, None, None]
        cx = (centers[k, 1] + jitter[:, 1])[:, None, None]
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12**2))
        img = bump[..., None] * colors[k] + rng.normal(0, cfg.synthetic_noise, size=(per, size, size, cfg.synthetic_channels))
        xs.append(img)
        ys.append(np.full(per, k))
    x = np.clip(np.concatenate(xs), 0, 1).astype(np.float32)
    return _stratified_split(x, np.concatenate(ys).astype(np.int64), cfg.test_fraction, cfg.split_seed)


def _unpickle(path: Path):
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def _cifar_arrays(batches, key):
    xs, ys = [], []
    for b in batches:
        xs.append(b["data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(np.asarray(b[key]))
    return np.concatenate(xs).astype(np.float32) / 255.0, np.concatenate(ys).astype(np.int64)


def _load_cifar10(root, cfg):
    base = Path(root) / "cifar-10-batches-py"
    train = [_unpickle(base / f"data_batch_{i}") for i in range(1, 6)]
    return (*_cifar_arrays(train, "labels"), *_cifar_arrays([_unpickle(base / "test_batch")], "labels"))


def _load_cifar100(root, cfg):
    base = Path(root) / "cifar-100-python"
    return (*_cifar_arrays([_unpickle(base / "train")], "fine_labels"), *_cifar_arrays([_unpickle(base / "test")], "fine_labels"))


def _load_npz(root, cfg):
    path = Path(root)
    with np.load(path) as z:
        arrays = [z[k] for k in ("x_train", "y_train", "x_test", "y_test")]
    out = []
    for i, a in enumerate(arrays):
        if i % 2 == 0:
            a = a.astype(np.float32) / (255.0 if a.dtype == np.uint8 else 1.0)
            out.append(a[..., None] if a.ndim == 3 else a)
        else:
            out.append(a.astype(np.int64).ravel())
    return tuple(out)


_LOADERS = {
    "digits": _load_digits,
    "synthetic": _load_synthetic,
    "cifar10": _load_cifar10,
    "cifar100": _load_cifar100,
    "npz": _load_npz,
}


def fit_preprocessing(raw_train: np.ndarray, cfg: PreprocConfig) -> PreprocStats:
    """Statistics are fit on the training split only."""
    c = raw_train.shape[-1]
    if cfg.standardize:
        mean, std = channel_stats(raw_train)
        if np.any(std <= 0):
            raise DataError(f"zero per-channel std {std.tolist()}: constant-valued dataset")
    else:
        mean, std = np.zeros(c), np.ones(c)
    stats = PreprocStats(mean.astype(np.float32), std.astype(np.float32))
    if cfg.zca:
        if cfg.zca_epsilon <= 0:
            raise ConfigError("zca_epsilon must be > 0", "dataset.zca_epsilon")
        _, w, zmean = zca_whiten(stats.apply(raw_train), cfg.zca_epsilon)
        stats = replace(stats, zca_matrix=w.astype(np.float32), zca_mean=zmean.astype(np.float32), zca_epsilon=cfg.zca_epsilon)
    return stats


def build_handle(name: str, raw: np.ndarray, labels: np.ndarray, stats: PreprocStats, class_count: int | None = None) -> DatasetHandle:
    images = stats.apply(raw.astype(np.float64))
    count = class_count if class_count is not None else int(labels.max()) + 1
    return DatasetHandle(name, images, labels.astype(np.int64), count, tuple(images.shape[1:]), stats)


def load_splits(name: str, root: str | Path | None, config: PreprocConfig | None = None) -> tuple[DatasetHandle, DatasetHandle]:
    cfg = config or PreprocConfig()
    if name not in _LOADERS:
        raise ConfigError(f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED)}", "dataset.name")
    if name in ("cifar10", "cifar100", "npz"):
        if root is None or not Path(root).exists():
            raise FileNotFoundError(f"dataset root {root} does not exist")
    try:
        xtr, ytr, xte, yte = _LOADERS[name](root, cfg)
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FileNotFoundError(str(exc)) from exc
    xtr, xte = _resize(xtr, cfg.image_size), _resize(xte, cfg.image_size)
    stats = fit_preprocessing(xtr, cfg)
    count = int(max(ytr.max(), yte.max())) + 1
    return build_handle(name, xtr, ytr, stats, count), build_handle(name, xte, yte, stats, count)


def load_dataset(name: str, root: str | Path | None, config: PreprocConfig | None = None, split: str = "train") -> DatasetHandle:
    train, test = load_splits(name, root, config)
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}", "dataset.split")
    return train if split == "train" else test

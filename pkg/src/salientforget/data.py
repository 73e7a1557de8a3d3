"""CIFAR binary loaders, forget/retain splits, augmentation and batching."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigError, DataFormatError, EmptyIteratorError, InputError

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
PIXELS = 3072
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR100_TRAIN_FILE = "train.bin"
CIFAR100_TEST_FILE = "test.bin"

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)

MANIFEST_VERSION = 1


@dataclass(eq=False)
class LabeledDataset:
    """uint8 images (N x 3 x 32 x 32) with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    mean: tuple[float, float, float] = CIFAR10_MEAN
    std: tuple[float, float, float] = CIFAR10_STD
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise InputError(f"images must be uint8 Nx3x32x32, got {self.images.dtype} {self.images.shape}")
        if len(self.images) == 0:
            raise InputError("dataset is empty")
        if len(self.labels) != len(self.images):
            raise InputError("images and labels differ in length")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    def normalize(self, images: np.ndarray) -> torch.Tensor:
        mean = np.asarray(self.mean, dtype=np.float32).reshape(1, 3, 1, 1)
        std = np.asarray(self.std, dtype=np.float32).reshape(1, 3, 1, 1)
        return torch.from_numpy((images.astype(np.float32) / 255.0 - mean) / std)

    def tensors(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized float images and labels for ``indices``."""
        indices = np.asarray(indices, dtype=np.int64)
        return self.normalize(self.images[indices]), torch.from_numpy(self.labels[indices])

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=np.ascontiguousarray(self.images[indices]),
            labels=self.labels[indices].copy(),
            name=name or self.name,
            num_classes=self.num_classes,
            mean=self.mean,
            std=self.std,
            coarse_labels=None if self.coarse_labels is None else self.coarse_labels[indices].copy(),
        )


def _resolve(root: Path, names: Sequence[str], nested: str) -> Path:
    for base in (root, root / nested):
        if all((base / n).is_file() for n in names):
            return base
    missing = [n for n in names if not (root / n).is_file()]
    raise DataFormatError(f"missing file {root / missing[0]} (also looked in {root / nested})")


def _read_records(path: Path, record_size: int) -> np.ndarray:
    size = path.stat().st_size
    if size == 0 or size % record_size:
        raise DataFormatError(f"{path}: size {size} is not a positive multiple of {record_size}")
    return np.fromfile(path, dtype=np.uint8).reshape(-1, record_size)


def decode_cifar10(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = raw.reshape(-1, CIFAR10_RECORD)
    return raw[:, 1:].reshape(-1, 3, 32, 32).copy(), raw[:, 0].astype(np.int64)


def encode_cifar10(images: np.ndarray, labels: np.ndarray) -> bytes:
    n = len(labels)
    out = np.empty((n, CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images.reshape(n, PIXELS)
    return out.tobytes()


def encode_cifar100(images: np.ndarray, coarse: np.ndarray, fine: np.ndarray) -> bytes:
    n = len(fine)
    out = np.empty((n, CIFAR100_RECORD), dtype=np.uint8)
    out[:, 0] = coarse
    out[:, 1] = fine
    out[:, 2:] = images.reshape(n, PIXELS)
    return out.tobytes()


def load_cifar10(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Read the five training batches and the test batch, in on-disk order."""
    root = _resolve(Path(directory), CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,), "cifar-10-batches-bin")
    train = [decode_cifar10(_read_records(root / f, CIFAR10_RECORD)) for f in CIFAR10_TRAIN_FILES]
    test_x, test_y = decode_cifar10(_read_records(root / CIFAR10_TEST_FILE, CIFAR10_RECORD))
    for f, (_, y) in zip(CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,), train + [(test_x, test_y)]):
        if y.max() >= 10:
            raise DataFormatError(f"{root / f}: label {y.max()} out of range for CIFAR-10")
    train_set = LabeledDataset(
        np.concatenate([x for x, _ in train]), np.concatenate([y for _, y in train]), "cifar10-train", 10
    )
    return train_set, LabeledDataset(test_x, test_y, "cifar10-test", 10)


_STATS_CACHE: dict[tuple, tuple] = {}


def channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return tuple(round(float(m), 4) for m in mean), tuple(round(float(s), 4) for s in std)


def load_cifar100(directory) -> tuple[LabeledDataset, LabeledDataset]:
    """Like :func:`load_cifar10`; labels are the fine labels, normalization is measured."""
    root = _resolve(Path(directory), (CIFAR100_TRAIN_FILE, CIFAR100_TEST_FILE), "cifar-100-binary")
    out = []
    for fname in (CIFAR100_TRAIN_FILE, CIFAR100_TEST_FILE):
        raw = _read_records(root / fname, CIFAR100_RECORD)
        if raw[:, 1].max() >= 100 or raw[:, 0].max() >= 20:
            raise DataFormatError(f"{root / fname}: label out of range for CIFAR-100")
        out.append((raw[:, 2:].reshape(-1, 3, 32, 32).copy(), raw[:, 1].astype(np.int64), raw[:, 0].astype(np.int64)))
    key = (str((root / CIFAR100_TRAIN_FILE).resolve()), (root / CIFAR100_TRAIN_FILE).stat().st_mtime_ns)
    if key not in _STATS_CACHE:
        _STATS_CACHE[key] = channel_stats(out[0][0])
    mean, std = _STATS_CACHE[key]
    (trx, try_, trc), (tex, tey, tec) = out
    return (
        LabeledDataset(trx, try_, "cifar100-train", 100, mean, std, trc),
        LabeledDataset(tex, tey, "cifar100-test", 100, mean, std, tec),
    )


def toy_subset(train: LabeledDataset, test: LabeledDataset, n: int, seed: int = 0,
               test_n: int | None = None) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-balanced subsample of ``n`` training and ``test_n`` (default n // 5) test images."""
    if test_n is None:
        test_n = max(train.num_classes, n // 5)
    return (
        _stratified(train, n, seed, f"{train.name}-toy{n}"),
        _stratified(test, test_n, seed + 1, f"{test.name}-toy{n}"),
    )


def _stratified(ds: LabeledDataset, n: int, seed: int, name: str) -> LabeledDataset:
    k = ds.num_classes
    if n < k or n > len(ds):
        raise ConfigError(f"toy subset size {n} must lie in [{k}, {len(ds)}]")
    rng = np.random.default_rng(seed)
    per_class = [n // k + (1 if c < n % k else 0) for c in range(k)]
    chosen = []
    for c in range(k):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < per_class[c]:
            raise ConfigError(f"class {c} has only {len(members)} samples, need {per_class[c]}")
        chosen.append(rng.permutation(members)[: per_class[c]])
    return ds.subset(np.sort(np.concatenate(chosen)), name)


# ---------------------------------------------------------------------------
# forget / retain splits


@dataclass(eq=False)
class ForgetSplit:
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    mode: str
    seed: int
    fraction: float | None = None
    label: int | None = None
    dataset: str = ""

    @property
    def n(self) -> int:
        return len(self.forget_indices) + len(self.retain_indices)

    def describe(self) -> dict:
        d = {"mode": self.mode, "seed": self.seed}
        if self.mode == "random":
            d["fraction"] = self.fraction
        else:
            d["class"] = self.label
        return d

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        record = {
            "format_version": MANIFEST_VERSION,
            "dataset": self.dataset,
            "n": self.n,
            **self.describe(),
            "forget_indices": [int(i) for i in self.forget_indices],
        }
        path.write_text(json.dumps(record, separators=(",", ":")) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ForgetSplit":
        path = Path(path)
        try:
            record = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataFormatError(f"cannot read split manifest {path}: {exc}") from exc
        if record.get("format_version") != MANIFEST_VERSION:
            raise DataFormatError(f"{path}: unsupported manifest version {record.get('format_version')}")
        forget = np.asarray(record["forget_indices"], dtype=np.int64)
        retain = np.setdiff1d(np.arange(record["n"], dtype=np.int64), forget)
        return cls(forget, retain, record["mode"], record["seed"], record.get("fraction"),
                   record.get("class"), record["dataset"])


def make_forget_split(dataset: LabeledDataset, mode: str = "random", *, fraction: float | None = None,
                      label: int | str | None = None, seed: int = 0) -> ForgetSplit:
    """Partition ``range(len(dataset))`` into forget and retain indices.

    ``mode="random"`` removes ``round(fraction * N)`` uniformly chosen samples;
    ``mode="class"`` removes every sample of ``label`` (index or CIFAR-10 name).
    """
    n = len(dataset)
    if mode == "random":
        if fraction is None or not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"random split needs a fraction in [0, 1], got {fraction}")
        k = int(np.floor(fraction * n + 0.5))
        rng = np.random.default_rng(seed)
        forget = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
        label = None
    elif mode == "class":
        if isinstance(label, str):
            if dataset.num_classes != 10 or label not in CIFAR10_CLASSES:
                raise ConfigError(f"unknown class name {label!r}")
            label = CIFAR10_CLASSES.index(label)
        if label is None or not 0 <= int(label) < dataset.num_classes:
            raise ConfigError(f"class label must lie in [0, {dataset.num_classes}), got {label}")
        label = int(label)
        forget = np.flatnonzero(dataset.labels == label).astype(np.int64)
        fraction = None
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    retain = np.setdiff1d(np.arange(n, dtype=np.int64), forget)
    return ForgetSplit(forget, retain, mode, seed, fraction, label, dataset.name)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    crop_padding: int = 4
    hflip_prob: float = 0.5
    mean: tuple[float, float, float] = CIFAR10_MEAN
    std: tuple[float, float, float] = CIFAR10_STD

    @classmethod
    def for_dataset(cls, ds: LabeledDataset, **kw) -> "AugmentationPolicy":
        return cls(mean=tuple(ds.mean), std=tuple(ds.std), **kw)


def crop_flip(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop from a zero-padded canvas plus random horizontal flip, per image (uint8 in, uint8 out)."""
    n, c, h, w = images.shape
    p = policy.crop_padding
    out = np.empty_like(images)
    dy = rng.integers(0, 2 * p + 1, size=n)
    dx = rng.integers(0, 2 * p + 1, size=n)
    flip = rng.random(n) < policy.hflip_prob
    if p:
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
        padded[:, :, p:p + h, p:p + w] = images
    else:
        padded = images
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _normalize(images: np.ndarray, policy: AugmentationPolicy) -> torch.Tensor:
    mean = np.asarray(policy.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(policy.std, dtype=np.float32).reshape(1, 3, 1, 1)
    return torch.from_numpy((images.astype(np.float32) / 255.0 - mean) / std)


def augment_positive_pair(sample: np.ndarray, policy: AugmentationPolicy, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (normalized original, normalized augmented copy) for a uint8 3x32x32 image."""
    batch = np.asarray(sample, dtype=np.uint8).reshape(1, 3, 32, 32)
    rng = np.random.default_rng(seed)
    aug = crop_flip(batch, policy, rng)
    return _normalize(batch, policy)[0], _normalize(aug, policy)[0]


def augment_batch(images: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    return _normalize(crop_flip(images, policy, rng), policy)


# ---------------------------------------------------------------------------
# batching


def batch_iter(indices, batch_size: int, shuffle_seed: int | None = None, drop_last: bool = False,
               epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index batches covering ``indices`` once.

    With ``shuffle_seed`` set, the order is a permutation fixed by
    ``(shuffle_seed, epoch)``; otherwise the input order is kept.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if drop_last and batch_size > len(indices):
        raise EmptyIteratorError(f"batch_size {batch_size} exceeds subset size {len(indices)} with drop_last")
    if shuffle_seed is not None:
        indices = indices[np.random.default_rng([shuffle_seed, epoch]).permutation(len(indices))]
    stop = len(indices) - (len(indices) % batch_size if drop_last else 0)
    for start in range(0, stop, batch_size):
        yield indices[start:start + batch_size]


@dataclass
class CyclingBatches:
    """Endless batch stream that reshuffles with a new epoch counter on each wrap."""

    indices: np.ndarray
    batch_size: int
    seed: int
    epoch: int = 0
    _it: Iterator | None = field(default=None, repr=False)

    def __next__(self) -> np.ndarray:
        if self._it is None:
            self._it = batch_iter(self.indices, self.batch_size, self.seed, epoch=self.epoch)
        try:
            return next(self._it)
        except StopIteration:
            self.epoch += 1
            self._it = batch_iter(self.indices, self.batch_size, self.seed, epoch=self.epoch)
            return next(self._it)

    def __iter__(self):
        return self

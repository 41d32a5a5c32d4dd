"""Datasets (CIFAR-10 binary batches, synthetic class blobs) and the
Dirichlet label partitioner that splits them across simulated clients."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], np.float32)

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
_CIFAR_BATCH_RECORDS = 10000
_CIFAR_BATCH_BYTES = _CIFAR_RECORD * _CIFAR_BATCH_RECORDS
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError("image and label counts disagree")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise FormatError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        if not np.isfinite(self.images).all():
            raise FormatError("dataset contains non-finite pixel values")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class PartitionMap:
    """Client id -> example indices, produced by the Dirichlet partitioner."""

    clients: dict[int, np.ndarray]
    dirichlet_alpha: float
    seed: int
    num_examples: int

    def __post_init__(self):
        self.clients = {int(k): np.asarray(v, dtype=np.int64) for k, v in self.clients.items()}

    def sizes(self) -> dict[int, int]:
        return {cid: len(idx) for cid, idx in self.clients.items()}

    def class_histogram(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        hist = np.zeros((len(self.clients), num_classes), np.int64)
        for cid, idx in sorted(self.clients.items()):
            hist[cid] = np.bincount(labels[idx], minlength=num_classes)
        return hist

    def save(self, path) -> None:
        payload = {
            "dirichlet_alpha": self.dirichlet_alpha,
            "seed": self.seed,
            "num_examples": self.num_examples,
            "clients": {str(cid): idx.tolist() for cid, idx in sorted(self.clients.items())},
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionMap":
        payload = json.loads(Path(path).read_text())
        return cls(
            clients={int(k): np.asarray(v, np.int64) for k, v in payload["clients"].items()},
            dirichlet_alpha=float(payload["dirichlet_alpha"]),
            seed=int(payload["seed"]),
            num_examples=int(payload["num_examples"]),
        )


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` across proportions, summing exactly."""
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def lda_partition(
    labels, num_clients: int, alpha: float, seed: int, max_attempts: int = 1000
) -> PartitionMap:
    """Split example indices across clients with per-class Dirichlet proportions.

    Every client is guaranteed at least one example; the whole proportion set
    is re-drawn (bounded attempts) when a draw leaves some client empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if not alpha > 0:
        raise ConfigError(f"dirichlet alpha must be > 0, got {alpha}")
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if n < num_clients:
        raise ConfigError(
            f"cannot guarantee nonempty clients: {n} examples for {num_clients} clients"
        )
    rng = np.random.default_rng(seed)
    class_indices = [np.flatnonzero(labels == c) for c in np.unique(labels)]

    for _ in range(max_attempts):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in class_indices:
            shuffled = rng.permutation(idx)
            proportions = rng.dirichlet(np.full(num_clients, alpha))
            counts = _largest_remainder(proportions, len(idx))
            start = 0
            for cid, cnt in enumerate(counts):
                if cnt:
                    buckets[cid].append(shuffled[start : start + cnt])
                start += cnt
        sizes = [sum(len(a) for a in b) for b in buckets]
        if min(sizes) >= 1:
            clients = {
                cid: np.sort(np.concatenate(b)) for cid, b in enumerate(buckets)
            }
            return PartitionMap(clients, float(alpha), int(seed), n)
    raise ConfigError(
        f"could not produce nonempty clients after {max_attempts} attempts "
        f"(alpha={alpha}, clients={num_clients}, examples={n})"
    )


def _parse_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) != _CIFAR_BATCH_BYTES:
        raise FormatError(
            f"{path}: expected {_CIFAR_BATCH_BYTES} bytes "
            f"({_CIFAR_BATCH_RECORDS} records of {_CIFAR_RECORD}), got {len(raw)}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(_CIFAR_BATCH_RECORDS, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise FormatError(f"{path}: label byte {labels.max()} out of range [0, 10)")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10(root, split: str = "train") -> Dataset:
    """Parse the standard binary batch files under `root`.

    Pixels are scaled to [0, 1] and normalized per channel.
    """
    root = Path(root)
    if split == "train":
        names = CIFAR_TRAIN_FILES
    elif split == "test":
        names = CIFAR_TEST_FILES
    else:
        raise ConfigError(f"split must be 'train' or 'test', got '{split}'")
    paths = [root / name for name in names]
    for p in paths:
        if not p.is_file():
            raise FormatError(f"missing CIFAR-10 batch file: {p}")
    pixel_parts, label_parts = zip(*(_parse_cifar_batch(p) for p in paths))
    pixels = np.concatenate(pixel_parts).astype(np.float32) / 255.0
    images = (pixels - CIFAR10_MEAN[None, :, None, None]) / CIFAR10_STD[None, :, None, None]
    labels = np.concatenate(label_parts)
    return Dataset(
        images=images,
        labels=labels,
        num_classes=10,
        normalization={"mean": CIFAR10_MEAN.tolist(), "std": CIFAR10_STD.tolist()},
    )


def class_patterns(
    num_classes: int, image_size: int, task_seed: int = 0, grid: int = 4
) -> np.ndarray:
    """The fixed per-class mean images: coarse random color blocks upsampled
    to full resolution, normalized to unit RMS."""
    if image_size % grid != 0:
        raise ConfigError(f"image_size {image_size} not divisible by grid {grid}")
    rng = np.random.default_rng(np.random.SeedSequence([task_seed, num_classes, image_size]))
    rep = image_size // grid
    coarse = rng.standard_normal((num_classes, 3, grid, grid)).astype(np.float32)
    patterns = np.repeat(np.repeat(coarse, rep, axis=2), rep, axis=3)
    patterns /= np.sqrt((patterns**2).mean(axis=(1, 2, 3), keepdims=True))
    return patterns


def save_dataset(path, dataset: Dataset) -> None:
    """Persist a dataset in the binary tensor container (labels and the
    class count ride along as float32, exact for these magnitudes)."""
    from . import wire

    entries = [
        ("images", dataset.images),
        ("labels", dataset.labels.astype(np.float32)),
        ("num_classes", np.array([dataset.num_classes], np.float32)),
    ]
    Path(path).write_bytes(wire.serialize(entries))


def load_dataset(path) -> Dataset:
    from . import wire

    _, entries = wire.deserialize(Path(path).read_bytes())
    return Dataset(
        images=entries["images"],
        labels=entries["labels"].astype(np.int64),
        num_classes=int(entries["num_classes"][0]),
    )


def synthetic_dataset(
    num_classes: int,
    per_class: int,
    image_size: int = 16,
    noise: float = 0.25,
    seed: int = 0,
    task_seed: int = 0,
    grid: int = 4,
) -> Dataset:
    """Gaussian class blobs rendered as images: a fixed pattern per class
    plus iid pixel noise. Linearly separable at low noise.

    The patterns depend only on `task_seed` (and the class count / image
    size), so datasets drawn with different `seed` values are disjoint
    samples of the same classification task; use that for train/test splits.
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    patterns = class_patterns(num_classes, image_size, task_seed, grid)
    rng = np.random.default_rng(np.random.SeedSequence([task_seed, seed]))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    images = patterns[labels] + np.float32(noise) * rng.standard_normal(
        (labels.size, 3, image_size, image_size)
    ).astype(np.float32)
    order = rng.permutation(labels.size)
    return Dataset(
        images=images[order].astype(np.float32),
        labels=labels[order],
        num_classes=num_classes,
        normalization={"kind": "synthetic", "noise": noise, "seed": seed,
                       "task_seed": task_seed},
    )

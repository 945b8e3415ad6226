"""Long-tailed dataset construction and ingestion.

Training profiles follow the exponential convention n_k = n_max * rho^(-k/(K-1))
(floored at one sample), with class order fixed to the native label order.
Images are stored uint8 and normalized with per-channel mean/std carried in
the dataset archive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import load_archive, pack_text, save_archive, unpack_text
from .errors import ArchiveError, ConfigError
from .losses import ShotSplits
from .rng import RngStream
from .tte import TteConfig, bilinear_resize, five_crops

CIFAR_RECORD_BYTES = 2 + 3 * 32 * 32
DEFAULT_NORM_MEAN = (0.5, 0.5, 0.5)
DEFAULT_NORM_STD = (0.5, 0.5, 0.5)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, 3, H, W) uint8
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    norm_mean: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_NORM_MEAN, np.float32))
    norm_std: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_NORM_STD, np.float32))

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float32)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ConfigError(f"images must be (N, 3, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError("labels length must match image count")
        K = len(self.class_names)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= K):
            raise ConfigError(f"labels outside [0, {K})")

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count).astype(np.int64)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """uint8-scale pixels -> float32, scaled to [0,1], then standardized."""
        x = pixels.astype(np.float32) / np.float32(255.0)
        return (x - self.norm_mean[:, None, None]) / self.norm_std[:, None, None]

    def normalized_images(self, indices=None) -> np.ndarray:
        imgs = self.images if indices is None else self.images[indices]
        return self.normalize(imgs)


@dataclass(frozen=True)
class SyntheticLTSpec:
    class_count: int
    n_max: int
    imbalance_ratio: float
    image_size: int = 16
    seed: int = 0
    test_per_class: int = 20

    def __post_init__(self):
        if self.imbalance_ratio < 1:
            raise ConfigError(f"imbalance ratio must be >= 1, got {self.imbalance_ratio}")
        if self.n_max < 1 or self.class_count < 1:
            raise ConfigError("class_count and n_max must be >= 1")


def exponential_profile(class_count: int, n_max: int, rho: float) -> np.ndarray:
    """Per-class training counts n_k = max(1, round(n_max * rho^(-k/(K-1))))."""
    if class_count == 1:
        return np.array([n_max], dtype=np.int64)
    k = np.arange(class_count, dtype=np.float64)
    counts = np.round(n_max * rho ** (-k / (class_count - 1)))
    return np.maximum(counts, 1).astype(np.int64)


def _class_prototype(rng: RngStream, size: int) -> np.ndarray:
    """A class signature: two soft color blobs at class-specific positions."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    pattern = np.zeros((3, size, size), dtype=np.float32)
    for _ in range(2):
        cy, cx = rng.uniform((2,), 0.15 * size, 0.85 * size)
        width = float(rng.uniform((), 0.12 * size, 0.30 * size))
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        color = rng.uniform((3,), -1.0, 1.0)
        pattern += color[:, None, None] * blob[None]
    peak = np.abs(pattern).max()
    return pattern / peak if peak > 0 else pattern


SYNTH_SIGNAL = 0.9
SYNTH_NOISE = 0.55


def _render(prototype: np.ndarray, rng: RngStream, count: int) -> np.ndarray:
    size = prototype.shape[-1]
    noise = rng.normal((count, 3, size, size), SYNTH_NOISE)
    raw = SYNTH_SIGNAL * prototype[None] + noise
    return np.clip(127.5 + 110.0 * raw, 0, 255).astype(np.uint8)


def generate_synthetic_lt(spec: SyntheticLTSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Long-tailed train set plus a balanced test set of separable blob classes."""
    root = RngStream(spec.seed)
    counts = exponential_profile(spec.class_count, spec.n_max, spec.imbalance_ratio)
    train_images, train_labels = [], []
    test_images, test_labels = [], []
    for k in range(spec.class_count):
        proto = _class_prototype(root.child(10_000 + k), spec.image_size)
        train_images.append(_render(proto, root.child(20_000 + k), int(counts[k])))
        train_labels.append(np.full(int(counts[k]), k, dtype=np.int64))
        test_images.append(_render(proto, root.child(30_000 + k), spec.test_per_class))
        test_labels.append(np.full(spec.test_per_class, k, dtype=np.int64))
    names = [f"class_{k:03d}" for k in range(spec.class_count)]
    train = LabeledDataset(np.concatenate(train_images), np.concatenate(train_labels), names)
    test = LabeledDataset(np.concatenate(test_images), np.concatenate(test_labels), names)
    return train, test


def parse_cifar100_binary(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw records -> ((N, 3, 32, 32) uint8 images, (N,) fine labels)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES != 0:
        raise ArchiveError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 1].astype(np.int64)  # byte 0 is the coarse label
    images = records[:, 2:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def ingest_cifar100_binary(path, imbalance_ratio: float, seed: int,
                           n_max: int | None = None) -> LabeledDataset:
    """Parse the standard binary file and draw the long-tail subsample.

    Classes keep their native index order; within a class the kept records
    are chosen by a seeded permutation. imbalance_ratio = 1 keeps everything.
    """
    images, labels = parse_cifar100_binary(path)
    K = int(labels.max()) + 1 if labels.size else 0
    full_counts = np.bincount(labels, minlength=K)
    if imbalance_ratio == 1:
        keep = np.arange(len(labels))
    else:
        if n_max is None:
            n_max = int(full_counts.max())
        profile = exponential_profile(K, n_max, imbalance_ratio)
        root = RngStream(seed)
        keep_parts = []
        for k in range(K):
            members = np.flatnonzero(labels == k)
            quota = min(int(profile[k]), len(members))
            order = root.child(k).permutation(len(members))[:quota]
            keep_parts.append(np.sort(members[order]))
        keep = np.concatenate(keep_parts)
    names = [f"class_{k:03d}" for k in range(K)]
    return LabeledDataset(images[keep], labels[keep], names)


def horizontal_flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def random_resized_crop(image: np.ndarray, rng: RngStream, min_area: float = 0.6,
                        out_size: int | None = None) -> np.ndarray:
    size = image.shape[-1]
    out_size = size if out_size is None else out_size
    area = float(rng.uniform((), min_area, 1.0))
    side = max(1, int(round(size * np.sqrt(area))))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    window = image[:, top : top + side, left : left + side]
    return bilinear_resize(window, out_size)


def augment_train(image: np.ndarray, rng: RngStream, flip_prob: float = 0.5,
                  out_size: int | None = None) -> np.ndarray:
    """Random resized crop + horizontal flip; float32 output at uint8 scale."""
    out = random_resized_crop(image, rng, out_size=out_size)
    if rng.random() < flip_prob:
        out = horizontal_flip(out)
    return out


def preprocess_eval(image: np.ndarray, input_size: int, tte_config: TteConfig) -> list[np.ndarray]:
    """Evaluation crops: one resized image, or five expanded crops under TTE."""
    if tte_config.enabled:
        return five_crops(image, input_size, tte_config.expand)
    return [bilinear_resize(image, input_size)]


def shot_splits(dataset: LabeledDataset) -> ShotSplits:
    return ShotSplits.from_counts(dataset.per_class_counts)


def save_dataset(dataset: LabeledDataset, path) -> None:
    entries: dict[str, np.ndarray] = {
        "data.images": dataset.images,
        "data.labels": dataset.labels,
        "meta.class_count": np.int64(dataset.class_count),
        "meta.norm_mean": dataset.norm_mean,
        "meta.norm_std": dataset.norm_std,
    }
    for k, name in enumerate(dataset.class_names):
        entries[f"meta.class_name.{k}"] = pack_text(name)
    save_archive(entries, path)


def load_dataset(path) -> LabeledDataset:
    entries = load_archive(path)
    for key in ("data.images", "data.labels", "meta.class_count"):
        if key not in entries:
            raise ArchiveError(f"{path}: dataset archive missing {key!r}")
    K = int(np.ravel(entries["meta.class_count"])[0])
    names = []
    for k in range(K):
        key = f"meta.class_name.{k}"
        names.append(unpack_text(entries[key]) if key in entries else f"class_{k:03d}")
    return LabeledDataset(
        images=entries["data.images"],
        labels=entries["data.labels"],
        class_names=names,
        norm_mean=entries.get("meta.norm_mean", np.array(DEFAULT_NORM_MEAN, np.float32)),
        norm_std=entries.get("meta.norm_std", np.array(DEFAULT_NORM_STD, np.float32)),
    )

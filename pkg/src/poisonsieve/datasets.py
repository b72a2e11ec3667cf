"""Dataset construction: synthetic textures, CIFAR-binary ingestion, splits.

Each synthetic class is a distinct oriented sinusoidal grating with
per-sample phase/frequency/amplitude jitter plus Gaussian pixel noise, so
classes are linearly separable in pixel space while individual samples stay
distinguishable in feature space.

Provenance (clean vs poisoned) is ground truth for the evaluation harness
only. Filtering code receives a DatasetView, which does not carry it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rng, serialize
from .errors import ConfigError, FormatError

CLEAN = "clean"
POISONED = "poisoned"

_CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes


@dataclass
class DataPoint:
    id: int
    image: np.ndarray  # (C, H, W), float64 in [0, 1]
    label: int
    provenance: str = CLEAN


@dataclass
class ViewPoint:
    id: int
    image: np.ndarray
    label: int


@dataclass
class DatasetView:
    """What a defense is allowed to see: ids, images, labels. No provenance."""
    points: list[ViewPoint]
    classes: int

    def __len__(self) -> int:
        return len(self.points)

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.points])

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.points], dtype=np.int64)

    def ids(self) -> list[int]:
        return [p.id for p in self.points]


@dataclass
class Dataset:
    points: list[DataPoint]
    classes: int

    def __post_init__(self):
        ids = [p.id for p in self.points]
        if len(ids) != len(set(ids)):
            raise ConfigError("dataset ids are not unique")
        for p in self.points:
            if not (0 <= p.label < self.classes):
                raise ConfigError(f"label {p.label} outside [0, {self.classes}) for id {p.id}")
            lo, hi = p.image.min(initial=0.0), p.image.max(initial=0.0)
            if lo < 0.0 or hi > 1.0:
                raise ConfigError(f"pixel values outside [0, 1] for id {p.id}")

    def __len__(self) -> int:
        return len(self.points)

    def view(self) -> DatasetView:
        return DatasetView(
            points=[ViewPoint(p.id, p.image, p.label) for p in self.points],
            classes=self.classes,
        )

    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.points])

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.points], dtype=np.int64)

    def ids(self) -> list[int]:
        return [p.id for p in self.points]

    def by_id(self, point_id: int) -> DataPoint:
        for p in self.points:
            if p.id == point_id:
                return p
        raise ConfigError(f"no point with id {point_id}")

    def class_ids(self, label: int) -> list[int]:
        return [p.id for p in self.points if p.label == label]

    def with_poisons(self, poisoned_images: dict[int, np.ndarray]) -> "Dataset":
        """New dataset where listed ids carry replacement images, flagged poisoned."""
        new_points = []
        for p in self.points:
            if p.id in poisoned_images:
                img = np.clip(poisoned_images[p.id], 0.0, 1.0)
                new_points.append(DataPoint(p.id, img, p.label, POISONED))
            else:
                new_points.append(replace(p))
        return Dataset(points=new_points, classes=self.classes)

    def subset(self, keep_ids) -> "Dataset":
        keep = set(keep_ids)
        return Dataset(points=[replace(p) for p in self.points if p.id in keep],
                       classes=self.classes)

    def provenance_map(self) -> dict[int, str]:
        return {p.id: p.provenance for p in self.points}


@dataclass
class PoisonTask:
    """The adversary's contract: flip one held-out target to the base class."""
    target_image: np.ndarray
    target_label: int
    base_class: int
    poison_budget: float | int
    epsilon: float
    target_id: int = -1

    def __post_init__(self):
        if self.base_class == self.target_label:
            raise ConfigError("base class must differ from the target's true label")
        # epsilon 0 is the degenerate no-perturbation adversary, used by the
        # harness to measure the clean false-positive floor
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if isinstance(self.poison_budget, bool) or (
                isinstance(self.poison_budget, int) and self.poison_budget < 0):
            raise ConfigError("poison budget count must be a nonnegative integer")
        if isinstance(self.poison_budget, float) and not (0.0 <= self.poison_budget <= 1.0):
            raise ConfigError("fractional poison budget must lie in [0, 1]")


def budget_count(budget: float | int, base_class_size: int) -> int:
    """Resolve a budget to a poison count: fractions apply to the base class."""
    if isinstance(budget, float):
        return int(np.floor(budget * base_class_size))
    return int(budget)


# Grating amplitude: large enough that a nearest-centroid pixel classifier
# is near-perfect at sigma=0.05 noise, small enough that a 30/255 pixel
# budget can move a sample's deep activations across class boundaries.
_AMPLITUDE = 0.15


def class_pattern(label: int, classes: int, side: int) -> np.ndarray:
    """The noise-free texture for one class: an oriented grating with
    class-specific frequency, phase, and per-channel phase spread."""
    theta = np.pi * label / classes
    freq = 2.0 + (label % 3)
    base_phase = 2.399963 * label  # golden-angle spacing between classes
    u = np.linspace(0.0, 1.0, side, endpoint=False)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    ramp = uu * np.cos(theta) + vv * np.sin(theta)
    channel_shift = 2.0 * np.pi * (label % 5 + 1) / 6.0
    img = np.empty((3, side, side))
    for ch in range(3):
        img[ch] = 0.5 + _AMPLITUDE * np.sin(2.0 * np.pi * freq * ramp + base_phase + ch * channel_shift)
    return img


def synth_dataset(classes: int, per_class: int, side: int, seed: int,
                  noise_sigma: float = 0.05, id_start: int = 0,
                  tag: str = "synth") -> Dataset:
    """Procedural texture dataset: one grating family per class plus pixel noise."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    gen = rng.stream(seed, tag, classes, per_class, side)
    points = []
    next_id = id_start
    for label in range(classes):
        pattern = class_pattern(label, classes, side)
        for _ in range(per_class):
            img = pattern
            if noise_sigma > 0:
                img = img + gen.normal(0.0, noise_sigma, size=img.shape)
            points.append(DataPoint(next_id, np.clip(img, 0.0, 1.0), label))
            next_id += 1
    return Dataset(points=points, classes=classes)


def class_pixel_centroids(data: Dataset | DatasetView) -> np.ndarray:
    """Mean image per class, for the nearest-centroid pixel classifier."""
    images = data.images()
    labels = data.labels()
    return np.stack([images[labels == y].mean(axis=0) for y in range(data.classes)])


def nearest_centroid_labels(images: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1)
    cflat = centroids.reshape(len(centroids), -1)
    d2 = ((flat[:, None, :] - cflat[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def load_image_batch(path: str | Path, classes: int = 10) -> Dataset:
    """Read classic CIFAR binary records (1 label byte + 3072 pixel bytes)."""
    blob = Path(path).read_bytes()
    if len(blob) % _CIFAR_RECORD != 0:
        offset = (len(blob) // _CIFAR_RECORD) * _CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte {offset}")
    count = len(blob) // _CIFAR_RECORD
    points = []
    for i in range(count):
        rec = blob[i * _CIFAR_RECORD:(i + 1) * _CIFAR_RECORD]
        label = rec[0]
        pixels = np.frombuffer(rec, dtype=np.uint8, offset=1).astype(np.float64) / 255.0
        points.append(DataPoint(i, pixels.reshape(3, 32, 32), int(label)))
    return Dataset(points=points, classes=classes)


def save_image_batch(data: Dataset, path: str | Path) -> None:
    """Write CIFAR binary records, quantizing pixels to 1/255 steps."""
    with open(path, "wb") as fh:
        for p in data.points:
            fh.write(bytes([p.label]))
            fh.write(np.round(p.image * 255.0).astype(np.uint8).tobytes())


def select_poison_slots(data: Dataset, task: PoisonTask, seed: int) -> list[int]:
    """Uniformly chosen ids from the base class, k per the task budget."""
    base_ids = data.class_ids(task.base_class)
    k = budget_count(task.poison_budget, len(base_ids))
    if k > len(base_ids):
        raise ConfigError(f"budget {k} exceeds base class size {len(base_ids)}")
    if k == 0:
        return []
    gen = rng.stream(seed, "poison-slots", task.base_class, k)
    chosen = gen.choice(len(base_ids), size=k, replace=False)
    return sorted(base_ids[i] for i in chosen)


def export_dataset(data: Dataset, directory: str | Path) -> None:
    """Directory of PSV1 image tensors plus an 'id label provenance file' manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# classes={data.classes}"]
    for p in data.points:
        fname = f"img{p.id:06d}.psv"
        serialize.write_tensor(directory / fname, p.image)
        lines.append(f"{p.id} {p.label} {p.provenance} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def import_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing manifest.txt")
    classes = None
    points = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("classes="):
                classes = int(body.split("=", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{manifest}:{lineno}: expected 'id label provenance file'")
        pid, label, provenance, fname = parts
        image = serialize.read_tensor(directory / fname)
        points.append(DataPoint(int(pid), image, int(label), provenance))
    if classes is None:
        raise FormatError(f"{manifest}: missing '# classes=' header")
    return Dataset(points=points, classes=classes)

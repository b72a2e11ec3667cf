"""Characteristic-vector poison filtering, plus a spectral baseline.

A datapoint's characteristic vector is the per-channel mean and population
variance of the activation entering each BN layer, taken over that point's
spatial dimensions. Class centroids pool the same statistics over every
member of the class (batch and spatial dimensions together). A point is kept
when the centroid nearest to it, under a per-layer weighted cosine distance
over means and variances, belongs to its own class.

Nothing in this module sees provenance flags: all entry points take a
DatasetView, which carries only ids, images, and labels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetView
from .errors import ConfigError, ContractError, DegenerateVectorError
from .layers import FeatureExtractor, capture_bn_inputs, extract_features


@dataclass
class LayerStats:
    mean: np.ndarray  # (C,)
    var: np.ndarray  # (C,), >= 0


@dataclass
class CharacteristicVector:
    layers: list[LayerStats]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class Centroid:
    label: int
    cv: CharacteristicVector


@dataclass
class DistanceConfig:
    gamma: np.ndarray | None = None  # per-layer weights; None -> uniform
    beta: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma is not None:
            self.gamma = np.asarray(self.gamma, dtype=np.float64)
            if (self.gamma < 0).any():
                raise ConfigError("gamma weights must be nonnegative")
            if not (self.gamma > 0).any():
                raise ConfigError("at least one gamma weight must be positive")

    def weights(self, n_layers: int) -> np.ndarray:
        if self.gamma is None:
            return np.ones(n_layers)
        if len(self.gamma) != n_layers:
            raise ContractError(f"gamma has {len(self.gamma)} weights for {n_layers} layers")
        return self.gamma


@dataclass
class FilterEntry:
    id: int
    label: int
    real_label: int
    distances: dict[int, float] = field(default_factory=dict)
    score: float | None = None  # spectral baseline only


@dataclass
class FilterReport:
    entries: list[FilterEntry]
    kept_ids: list[int]
    removed_ids: list[int]
    method: str = "sieve"

    def __post_init__(self):
        kept, removed = set(self.kept_ids), set(self.removed_ids)
        if kept & removed:
            raise ContractError("kept and removed ids overlap")
        if kept | removed != {e.id for e in self.entries}:
            raise ContractError("kept/removed do not partition the report entries")

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "kept_ids": self.kept_ids,
            "removed_ids": self.removed_ids,
            "entries": [
                {
                    "id": e.id,
                    "label": e.label,
                    "real_label": e.real_label,
                    "distances": {str(k): v for k, v in sorted(e.distances.items())},
                    "score": e.score,
                }
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FilterReport":
        payload = json.loads(text)
        entries = [
            FilterEntry(
                id=e["id"], label=e["label"], real_label=e["real_label"],
                distances={int(k): v for k, v in e["distances"].items()},
                score=e["score"],
            )
            for e in payload["entries"]
        ]
        return cls(entries=entries, kept_ids=payload["kept_ids"],
                   removed_ids=payload["removed_ids"], method=payload["method"])


def _stats_single(activation: np.ndarray) -> LayerStats:
    # activation: (1, C, H, W); statistics over the spatial dims per channel
    a = activation[0]
    flat = a.reshape(a.shape[0], -1)
    return LayerStats(mean=flat.mean(axis=1), var=flat.var(axis=1))


def _stats_pooled(activation: np.ndarray) -> LayerStats:
    # activation: (N, C, H, W); statistics over batch and spatial dims together
    flat = activation.transpose(1, 0, 2, 3).reshape(activation.shape[1], -1)
    return LayerStats(mean=flat.mean(axis=1), var=flat.var(axis=1))


def characteristic_vector(model: FeatureExtractor, image: np.ndarray,
                          tap: str = "input") -> CharacteristicVector:
    """Per-BN-layer channel statistics of one datapoint."""
    taps = capture_bn_inputs(model, image[None] if image.ndim == 3 else image, tap=tap)
    return CharacteristicVector(layers=[_stats_single(t.data) for t in taps])


def characteristic_vectors(model: FeatureExtractor, images: np.ndarray,
                           tap: str = "input", chunk: int = 256) -> list[CharacteristicVector]:
    """Vectorized per-point statistics for a batch of images."""
    cvs: list[CharacteristicVector] = []
    for start in range(0, len(images), chunk):
        taps = capture_bn_inputs(model, images[start:start + chunk], tap=tap)
        per_layer = []
        for t in taps:
            a = t.data
            flat = a.reshape(a.shape[0], a.shape[1], -1)
            per_layer.append((flat.mean(axis=2), flat.var(axis=2)))
        for i in range(len(per_layer[0][0])):
            cvs.append(CharacteristicVector(
                layers=[LayerStats(mean=m[i], var=v[i]) for m, v in per_layer]))
    return cvs


def class_centroids(model: FeatureExtractor, data: DatasetView,
                    tap: str = "input", chunk: int = 256) -> list[Centroid]:
    """One pooled-statistics centroid per class, ordered by class id."""
    labels = data.labels()
    images = data.images()
    centroids = []
    for y in range(data.classes):
        member_idx = np.flatnonzero(labels == y)
        if len(member_idx) == 0:
            raise ContractError(f"class {y} has no members")
        # Pool over chunks with a running sum / sum of squares per layer.
        sums = sq_sums = counts = None
        for start in range(0, len(member_idx), chunk):
            taps = capture_bn_inputs(model, images[member_idx[start:start + chunk]], tap=tap)
            if sums is None:
                sums = [np.zeros(t.data.shape[1]) for t in taps]
                sq_sums = [np.zeros(t.data.shape[1]) for t in taps]
                counts = [0] * len(taps)
            for i, t in enumerate(taps):
                flat = t.data.transpose(1, 0, 2, 3).reshape(t.data.shape[1], -1)
                sums[i] += flat.sum(axis=1)
                sq_sums[i] += (flat * flat).sum(axis=1)
                counts[i] += flat.shape[1]
        stats = []
        for s, sq, n in zip(sums, sq_sums, counts):
            mean = s / n
            stats.append(LayerStats(mean=mean, var=np.maximum(sq / n - mean * mean, 0.0)))
        centroids.append(Centroid(label=y, cv=CharacteristicVector(layers=stats)))
    return centroids


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b); raises on zero-norm input."""
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ContractError(f"cosine_distance: lengths {av.shape} and {bv.shape} differ")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine distance with a zero-norm vector")
    return float(1.0 - av @ bv / (na * nb))


def _cosine_distance_total(a: np.ndarray, b: np.ndarray) -> float:
    # Total extension for degenerate vectors: zero-vs-zero is identical (0),
    # zero-vs-nonzero maximally dissimilar under nonnegative stats (1).
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - a @ b / (na * nb))


def cv_distance(xcv: CharacteristicVector, centroid: Centroid, cfg: DistanceConfig) -> float:
    """Per-layer weighted sum of mean-vs-mean and variance-vs-variance cosine distances."""
    if len(xcv) != len(centroid.cv):
        raise ContractError(
            f"layer count mismatch: point has {len(xcv)}, centroid has {len(centroid.cv)}")
    gamma = cfg.weights(len(xcv))
    total = 0.0
    for g, point_stats, centroid_stats in zip(gamma, xcv.layers, centroid.cv.layers):
        mean_term = _cosine_distance_total(point_stats.mean, centroid_stats.mean)
        var_term = _cosine_distance_total(point_stats.var, centroid_stats.var)
        total += g * (cfg.beta * mean_term + (1.0 - cfg.beta) * var_term)
    return total


def assign_real_labels(model: FeatureExtractor, data: DatasetView,
                       centroids: list[Centroid], cfg: DistanceConfig,
                       tap: str = "input") -> dict[int, int]:
    """Nearest-centroid label per point; ties go to the smallest class id."""
    cvs = characteristic_vectors(model, data.images(), tap=tap)
    result = {}
    for point, cv in zip(data.points, cvs):
        dists = np.array([cv_distance(cv, c, cfg) for c in centroids])
        result[point.id] = int(dists.argmin())
    return result


def filter_dataset(model: FeatureExtractor, data: DatasetView, cfg: DistanceConfig,
                   tap: str = "input") -> FilterReport:
    """Keep points whose nearest centroid matches their dataset label."""
    if len(data) == 0:
        raise ContractError("cannot filter an empty dataset")
    centroids = class_centroids(model, data, tap=tap)
    cvs = characteristic_vectors(model, data.images(), tap=tap)
    entries = []
    kept, removed = [], []
    for point, cv in zip(data.points, cvs):
        dists = {c.label: cv_distance(cv, c, cfg) for c in centroids}
        real = min(dists, key=lambda y: (dists[y], y))
        entries.append(FilterEntry(id=point.id, label=point.label,
                                   real_label=real, distances=dists))
        (kept if real == point.label else removed).append(point.id)
    return FilterReport(entries=entries, kept_ids=kept, removed_ids=removed, method="sieve")


def spectral_filter_baseline(model: FeatureExtractor, data: DatasetView,
                             removal_fraction: float = 0.2) -> FilterReport:
    """Per class, remove the top scorers along the leading singular direction
    of the centered final-layer features."""
    if not (0.0 < removal_fraction < 1.0):
        raise ConfigError(f"removal_fraction must lie in (0, 1), got {removal_fraction}")
    feats = extract_features(model, data.images()).data
    labels = data.labels()
    ids = np.array(data.ids())
    entries: list[FilterEntry] = []
    kept: list[int] = []
    removed: list[int] = []
    order = np.argsort(ids, kind="stable")  # entries reported in id order
    per_point_score = np.zeros(len(ids))
    remove_mask = np.zeros(len(ids), dtype=bool)
    for y in range(data.classes):
        member_idx = np.flatnonzero(labels == y)
        if len(member_idx) < 2:
            warnings.warn(f"spectral baseline: class {y} has fewer than 2 points, skipped")
            continue
        x = feats[member_idx]
        x = x - x.mean(axis=0)
        _, _, vt = np.linalg.svd(x, full_matrices=False)
        scores = (x @ vt[0]) ** 2
        per_point_score[member_idx] = scores
        n_remove = int(removal_fraction * len(member_idx))
        if n_remove == 0:
            continue
        # highest score first; ties broken toward the highest id
        rank = np.lexsort((-ids[member_idx], -scores))
        remove_mask[member_idx[rank[:n_remove]]] = True
    for i in order:
        pid = int(ids[i])
        label = int(labels[i])
        if remove_mask[i]:
            entries.append(FilterEntry(id=pid, label=label, real_label=-1,
                                       score=float(per_point_score[i])))
            removed.append(pid)
        else:
            entries.append(FilterEntry(id=pid, label=label, real_label=label,
                                       score=float(per_point_score[i])))
            kept.append(pid)
    return FilterReport(entries=entries, kept_ids=kept, removed_ids=removed, method="spectral")


HISTOGRAM_COLUMNS = ("id", "provenance", "distance_to_base", "distance_to_target", "real_or_failed")


def export_distance_histogram(report: FilterReport, base_class: int, target_class: int,
                              provenance: dict[int, str], realness: str) -> list[tuple]:
    """Rows for base-class-labeled points: distances to the base and target
    centroids, provenance, and whether the poison set was real or failed.

    Provenance and realness come from the harness; the filter itself never
    sees them.
    """
    rows = []
    for e in report.entries:
        if e.label != base_class:
            continue
        prov = provenance.get(e.id, "clean")
        rows.append((
            e.id,
            prov,
            e.distances.get(base_class, float("nan")),
            e.distances.get(target_class, float("nan")),
            realness if prov == "poisoned" else "n/a",
        ))
    return rows


def write_histogram_csv(rows: list[tuple], path: str | Path, append: bool = False) -> None:
    import csv

    path = Path(path)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(HISTOGRAM_COLUMNS)
        writer.writerows(rows)

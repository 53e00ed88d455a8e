"""Concept quality metrics: 3D consistency, part localisation, object coverage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConceptVolError, ShapeError

DEFAULT_TAU = 50.0


@dataclass
class ConsistencyResult:
    score: float | None
    n_present: int
    n_images: int
    excluded: str | None = None


def _distribution(item) -> np.ndarray:
    if hasattr(item, "with_background"):
        v = item.with_background()
    else:
        v = np.asarray(item, dtype=np.float64).reshape(-1)
    if np.any(v < 0):
        raise ConceptVolError("face attributions must be non-negative", code="negative")
    total = v.sum()
    return v / total if total > 0 else v


def pairwise_l1_sum(dists: np.ndarray) -> float:
    """Sum of L1 distances over all ordered pairs of rows."""
    total = 0.0
    for i in range(len(dists)):
        total += float(np.abs(dists[i] - dists).sum())
    return total


def three_d_consistency(
    face_attrs, n_images: int | None = None, tau: float = DEFAULT_TAU
) -> ConsistencyResult:
    """One minus half the mean ordered-pair L1 distance of face distributions.

    ``face_attrs`` holds one attribution per image in which the concept is
    present; ``n_images`` is the number of test images of the class (defaults
    to the number of attributions).  Each attribution is renormalised to unit
    mass with its uncovered mass kept as an extra background slot.  A concept
    present in fewer than ``tau`` percent of the images, or in fewer than two,
    is excluded rather than scored.
    """
    if not 0.0 <= tau <= 100.0:
        raise ConceptVolError("tau must lie in [0, 100]", code="tau")
    items = list(face_attrs)
    n = len(items)
    n_images = n if n_images is None else int(n_images)
    if n_images < n:
        raise ConceptVolError("more attributions than images", code="count")
    if n_images == 0 or 100.0 * n / n_images < tau:
        return ConsistencyResult(None, n, n_images, f"present in {n}/{n_images} images < tau={tau}%")
    if n < 2:
        return ConsistencyResult(None, n, n_images, "fewer than 2 images")
    rows = [_distribution(it) for it in items]
    if len({row.shape for row in rows}) != 1:
        raise ShapeError("face counts differ")
    dists = np.stack(rows)
    score = 1.0 - 0.5 * pairwise_l1_sum(dists) / (n * n)
    return ConsistencyResult(score, n, n_images)


def _positive(attr, normalize: bool, threshold_quantile: float | None):
    a = np.maximum(np.asarray(attr, dtype=np.float64), 0.0)
    if threshold_quantile is not None:
        cut = np.quantile(a, threshold_quantile)
        a = np.where(a >= cut, a, 0.0) if cut > 0 else a
    if normalize and a.sum() > 0:
        a = a / a.sum()
    return a


def spatial_localisation(
    attr, part_mask, normalize: bool = True, threshold_quantile: float | None = None
) -> float | None:
    """Attribution-weighted overlap of a concept map with one part mask.

    ``(sum A+ in part + |support in part|) / (sum A+ + |part|)`` where the
    support is every pixel with positive attribution.  Returns None for an
    empty part.
    """
    part = np.asarray(part_mask, dtype=bool)
    a = _positive(attr, normalize, threshold_quantile)
    if a.shape != part.shape:
        raise ShapeError(f"attribution {a.shape} and mask {part.shape} differ")
    n_part = part.sum()
    if n_part == 0:
        return None
    support = a > 0
    num = a[part].sum() + np.sum(support & part)
    return float(num / (a.sum() + n_part))


def object_coverage(attrs, object_mask, threshold_quantile: float | None = None) -> float | None:
    """Share of the jointly normalised concept attribution inside the object."""
    maps = [_positive(a, False, threshold_quantile) for a in attrs]
    if not maps:
        raise ConceptVolError("need at least one concept map", code="empty")
    mask = np.asarray(object_mask, dtype=bool)
    stack = np.stack(maps)
    if stack.shape[1:] != mask.shape:
        raise ShapeError("attribution and mask sizes differ")
    total = stack.sum()
    if total == 0:
        return None
    return float(stack[:, mask].sum() / total)


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) != len(y):
        raise ShapeError("predictions and labels differ in length")
    if len(p) == 0:
        raise ConceptVolError("no predictions", code="empty")
    return 100.0 * float(np.sum(p == y)) / len(p)


def concept_present(relevance_map, winner, concept) -> bool:
    """A concept is present if it won a pixel that carries positive relevance."""
    mask = np.all(np.asarray(winner) == np.asarray(concept), axis=-1)
    return bool(np.any(np.asarray(relevance_map)[mask] > 0))


@dataclass
class MetricReport:
    consistency: list = field(default_factory=list)  # per concept
    localisation: list = field(default_factory=list)  # per (image, concept, part)
    coverage: list = field(default_factory=list)  # per image
    accuracy: list = field(default_factory=list)  # per dataset
    excluded: list = field(default_factory=list)  # concepts with reasons
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def to_text(self) -> str:
        lines = [f"config {k}={v}" for k, v in sorted(self.config.items())]
        for section in ("consistency", "localisation", "coverage", "accuracy", "excluded"):
            for rec in getattr(self, section):
                fields = " ".join(f"{k}={rec[k]}" for k in sorted(rec))
                lines.append(f"{section} {fields}")
        return "\n".join(lines) + "\n"

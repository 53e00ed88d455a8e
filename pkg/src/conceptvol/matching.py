"""Bag-of-words matching of a feature map against per-class vector sets.

The score of class ``y`` sums, over all pixels, the best similarity between
the pixel feature and any of the class's vectors (Gaussian features for the
dense volume, concepts for a dictionary).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeatureMap
from .errors import ConceptVolError, ShapeError

DEFAULT_TEMPERATURE = 0.07


@dataclass
class MatchResult:
    scores: np.ndarray  # (N,) per-class score
    class_sim: np.ndarray  # (N, H, W) best similarity per class and pixel
    class_best: np.ndarray  # (N, H, W) index of that class's best vector
    winner: np.ndarray  # (H, W, 2) globally best (class, concept)
    winner_sim: np.ndarray  # (H, W)
    prediction: int
    confidence: np.ndarray  # (N,)

    @property
    def n_classes(self) -> int:
        return len(self.scores)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _vectors(item) -> np.ndarray:
    for attr in ("concepts", "features"):
        if hasattr(item, attr):
            item = getattr(item, attr)
            break
    m = np.asarray(item, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("class vectors must form a 2-D matrix")
    return m


def _pixels(features) -> tuple[np.ndarray, tuple[int, int]]:
    if isinstance(features, FeatureMap):
        features = features.values
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, C), got {f.shape}")
    return f.reshape(-1, f.shape[2]), f.shape[:2]


def _class_matrices(items, channels: int, normalize: bool) -> list[np.ndarray]:
    mats = []
    if len(items) == 0:
        raise ConceptVolError("no classes given", code="empty")
    for y, item in enumerate(items):
        m = _vectors(item)
        if len(m) == 0:
            raise ConceptVolError(f"class {y} has an empty dictionary", code="empty")
        if m.shape[1] != channels:
            raise ShapeError(f"class {y} has width {m.shape[1]}, feature map has {channels}")
        mats.append(_unit_rows(m) if normalize else m)
    return mats


def novum_score(features, volumes, normalize: bool = False) -> np.ndarray:
    """Per-class score summing each pixel's best match over the dense Gaussians."""
    f, _ = _pixels(features)
    if normalize:
        f = _unit_rows(f)
    mats = _class_matrices(volumes, f.shape[1], normalize)
    return np.array([np.sum(np.max(f @ m.T, axis=1)) for m in mats])


def softmax(scores, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    if not temperature > 0:
        raise ConceptVolError("temperature must be positive", code="temperature")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def match_concepts(
    features,
    dictionaries,
    normalize: bool = True,
    temperature: float = DEFAULT_TEMPERATURE,
) -> MatchResult:
    """Score a feature map against per-class concept dictionaries.

    With ``normalize`` both pixel features and concepts are scaled to unit
    length first, so the dot product is a cosine similarity.  The global
    winner of a pixel is the (class, concept) with the highest similarity;
    ties go to the lowest concept index, then the lowest class index.
    """
    f, (h, w) = _pixels(features)
    if normalize:
        f = _unit_rows(f)
    mats = _class_matrices(dictionaries, f.shape[1], normalize)
    n = len(mats)
    d_max = max(len(m) for m in mats)
    # (P, D_max, N): padded with -inf so short dictionaries never win
    sims = np.full((f.shape[0], d_max, n), -np.inf)
    for y, m in enumerate(mats):
        sims[:, : len(m), y] = f @ m.T
    class_best = np.argmax(sims, axis=1)  # (P, N)
    class_sim = np.take_along_axis(sims, class_best[:, None, :], axis=1)[:, 0, :]
    flat = sims.reshape(f.shape[0], -1)  # concept-major, then class
    idx = np.argmax(flat, axis=1)
    win_concept, win_class = np.divmod(idx, n)
    scores = class_sim.sum(axis=0)
    winner = np.stack([win_class, win_concept], axis=-1).reshape(h, w, 2)
    return MatchResult(
        scores=scores,
        class_sim=class_sim.T.reshape(n, h, w),
        class_best=class_best.T.reshape(n, h, w),
        winner=winner,
        winner_sim=flat[np.arange(len(idx)), idx].reshape(h, w),
        prediction=int(np.argmax(scores)),
        confidence=softmax(scores, temperature),
    )


def classify(result, temperature: float = DEFAULT_TEMPERATURE) -> tuple[int, np.ndarray]:
    scores = result.scores if isinstance(result, MatchResult) else np.asarray(result)
    if len(scores) < 1:
        raise ConceptVolError("no classes to classify", code="empty")
    conf = softmax(scores, temperature)
    return int(np.argmax(scores)), conf

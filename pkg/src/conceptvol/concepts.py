"""Concept dictionaries extracted from Gaussian features, plus diagnostics.

Every extractor returns ``G ~= W @ H`` where ``H`` (D x C) holds the concept
vectors and ``W`` (K x D) the per-Gaussian weights.  PCA additionally keeps
the feature mean, so there ``G ~= W @ H + mean``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ConceptVolError, ShapeError


DEFAULT_CONCEPTS = 20
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
NMF_MAX_ITER = 500
NMF_TOL = 1e-6
SPARSITY_ZERO = 1e-9


@dataclass
class ConceptDictionary:
    concepts: np.ndarray  # (D, C)
    assignment: np.ndarray  # (K, D)
    class_id: int = 0
    method: str = "kmeans"
    seed: int | None = None
    iterations: int = 0
    mean: np.ndarray | None = None  # PCA only
    objective_history: list = field(default_factory=list)
    explained_variance: np.ndarray | None = None

    def __post_init__(self):
        self.concepts = np.asarray(self.concepts, dtype=np.float64)
        self.assignment = np.asarray(self.assignment, dtype=np.float64)
        if len(self.concepts) < 1:
            raise ConceptVolError("dictionary needs at least one concept")
        if self.assignment.shape[1] != len(self.concepts):
            raise ShapeError("assignment columns must equal concept count")

    @property
    def size(self) -> int:
        return len(self.concepts)

    def reconstruct(self) -> np.ndarray:
        rec = self.assignment @ self.concepts
        if self.mean is not None:
            rec = rec + self.mean
        return rec

    def reconstruction_error(self, features) -> float:
        return float(np.linalg.norm(np.asarray(features) - self.reconstruct()))


def _as_matrix(g) -> np.ndarray:
    g = np.asarray(getattr(g, "features", g), dtype=np.float64)
    if g.ndim != 2:
        raise ShapeError("features must be a 2-D matrix")
    return g


# --------------------------------------------------------------------------
# k-means


def _exact_sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("kdc,kdc->kd", diff, diff)


def kmeans_plusplus(x: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; indices of the chosen points."""
    k = len(x)
    chosen = [int(rng.integers(k))]
    closest = _exact_sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, n_clusters):
        total = closest.sum()
        if total > 0:
            probs = closest / total
            idx = int(rng.choice(k, p=probs))
        else:
            # every point coincides with a chosen centre
            rest = [i for i in range(k) if i not in chosen]
            idx = rest[0] if rest else chosen[0]
        chosen.append(idx)
        closest = np.minimum(closest, _exact_sq_dists(x, x[[idx]])[:, 0])
    return np.array(chosen)


def _lloyd(x, centers, max_iter, tol):
    history = []
    n_clusters = len(centers)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = _exact_sq_dists(x, centers)
        labels = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(len(x)), labels].sum()))
        counts = np.bincount(labels, minlength=n_clusters)
        if np.any(counts == 0):
            own = dist[np.arange(len(x)), labels]
            taken = set()
            for j in np.flatnonzero(counts == 0):
                # farthest point from its centre, lowest index on ties,
                # never emptying another cluster
                order = np.lexsort((np.arange(len(x)), -own))
                for i in order:
                    if i in taken or counts[labels[i]] <= 1:
                        continue
                    counts[labels[i]] -= 1
                    labels[i] = j
                    counts[j] = 1
                    taken.add(i)
                    break
        new_centers = centers.copy()
        for j in range(n_clusters):
            members = labels == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
        shift = np.max(np.linalg.norm(new_centers - centers, axis=1))
        centers = new_centers
        if shift < tol:
            break
    dist = _exact_sq_dists(x, centers)
    labels = np.argmin(dist, axis=1)
    history.append(float(dist[np.arange(len(x)), labels].sum()))
    return centers, labels, iterations, history


def extract_kmeans(
    g,
    n_concepts: int = DEFAULT_CONCEPTS,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = KMEANS_MAX_ITER,
    tol: float = KMEANS_TOL,
    class_id: int = 0,
) -> ConceptDictionary:
    """Hard clustering: concepts are centroids, assignment rows are one-hot.

    Runs ``n_init`` k-means++ restarts from ``seed`` and keeps the one with
    the lowest within-cluster sum of squares (earliest on ties).
    """
    x = _as_matrix(g)
    if not 1 <= n_concepts <= len(x):
        raise ConceptVolError(
            f"need 1 <= D <= K, got D={n_concepts}, K={len(x)}", code="too-few-points"
        )
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = x[kmeans_plusplus(x, n_concepts, rng)].copy()
        centers, labels, iters, history = _lloyd(x, init, max_iter, tol)
        if best is None or history[-1] < best[3][-1]:
            best = (centers, labels, iters, history)
    centers, labels, iters, history = best
    w = np.zeros((len(x), n_concepts))
    w[np.arange(len(x)), labels] = 1.0
    return ConceptDictionary(
        centers, w, class_id, "kmeans", seed, iters, objective_history=history
    )


def kmeans_sse(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    total = 0.0
    for j in np.unique(labels):
        pts = x[labels == j]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


# --------------------------------------------------------------------------
# NMF


def extract_nmf(
    g,
    n_concepts: int = DEFAULT_CONCEPTS,
    seed: int = 0,
    max_iter: int = NMF_MAX_ITER,
    tol: float = NMF_TOL,
    class_id: int = 0,
) -> ConceptDictionary:
    """Multiplicative-update NMF minimising the squared Frobenius error.

    Negative inputs are clamped to zero with a warning.
    """
    x = _as_matrix(g)
    if n_concepts > min(x.shape) or n_concepts < 1:
        raise ConceptVolError(
            f"D={n_concepts} exceeds min(K, C)={min(x.shape)}", code="rank"
        )
    if np.any(x < 0):
        msg = f"clamping {int(np.sum(x < 0))} negative feature entries to zero for NMF"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        x = np.maximum(x, 0.0)
    rng = np.random.default_rng(seed)
    scale = np.sqrt(max(x.mean(), 1e-12) / n_concepts)
    w = rng.uniform(0.0, 1.0, size=(x.shape[0], n_concepts)) * scale
    h = rng.uniform(0.0, 1.0, size=(n_concepts, x.shape[1])) * scale
    eps = 1e-12
    history = [float(np.sum((x - w @ h) ** 2))]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        h *= (w.T @ x) / (w.T @ w @ h + eps)
        w *= (x @ h.T) / (w @ (h @ h.T) + eps)
        obj = float(np.sum((x - w @ h) ** 2))
        prev = history[-1]
        history.append(obj)
        if prev == 0 or abs(prev - obj) / prev < tol:
            break
    return ConceptDictionary(h, w, class_id, "nmf", seed, iterations, objective_history=history)


# --------------------------------------------------------------------------
# PCA


def extract_pca(g, n_concepts: int = DEFAULT_CONCEPTS, class_id: int = 0) -> ConceptDictionary:
    """Top right-singular directions of the centred features.

    Each component's sign is fixed so its largest-magnitude entry is
    positive; the assignment holds the projection coefficients.
    """
    x = _as_matrix(g)
    if not 1 <= n_concepts <= min(x.shape):
        raise ConceptVolError(
            f"D={n_concepts} exceeds min(K, C)={min(x.shape)}", code="rank"
        )
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:n_concepts].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    coeffs = centred @ comps.T
    explained = s[:n_concepts] ** 2 / max(len(x) - 1, 1)
    return ConceptDictionary(
        comps, coeffs, class_id, "pca", None, 1, mean=mean, explained_variance=explained
    )


EXTRACTORS = {"kmeans": extract_kmeans, "nmf": extract_nmf, "pca": extract_pca}


def extract(method: str, g, n_concepts: int, seed: int = 0, class_id: int = 0):
    if method == "pca":
        return extract_pca(g, n_concepts, class_id=class_id)
    if method not in EXTRACTORS:
        raise ConceptVolError(f"unknown extraction method {method!r}", code="method")
    return EXTRACTORS[method](g, n_concepts, seed=seed, class_id=class_id)


# --------------------------------------------------------------------------
# diagnostics


def sparsity(w) -> float:
    """Fraction of weight entries that are (numerically) zero."""
    w = np.asarray(getattr(w, "assignment", w))
    if w.size == 0:
        return 0.0
    return float(np.mean(np.abs(w) < SPARSITY_ZERO))


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    vals = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * vals) @ vecs.T


def fdd(g, h) -> float:
    """Squared 2-Wasserstein (Frechet) distance between Gaussian moment fits.

    Covariances are population covariances of the rows.
    """
    g = _as_matrix(g)
    h = _as_matrix(getattr(h, "concepts", h))
    if len(g) < 2 or len(h) < 2:
        raise ConceptVolError("fdd needs at least two rows per set", code="too-few-points")
    if g.shape[1] != h.shape[1]:
        raise ShapeError("feature widths differ")
    mu_g, mu_h = g.mean(axis=0), h.mean(axis=0)
    cov_g = np.atleast_2d(np.cov(g, rowvar=False, bias=True))
    cov_h = np.atleast_2d(np.cov(h, rowvar=False, bias=True))
    root_g = _sqrtm_psd(cov_g)
    cross = _sqrtm_psd(root_g @ cov_h @ root_g)
    value = float(np.sum((mu_g - mu_h) ** 2) + np.trace(cov_g + cov_h - 2.0 * cross))
    return max(value, 0.0)


def _check_labels(points, labels):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise ShapeError("labels and points differ in length")
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ConceptVolError("need at least two clusters", code="single-cluster")
    return x, labels, uniq


def silhouette(points, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    x, labels, uniq = _check_labels(points, labels)
    dist = np.sqrt(_exact_sq_dists(x, x))
    scores = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        n_own = own.sum()
        if n_own == 1:
            continue  # singleton clusters score 0
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, labels == c].mean() for c in uniq if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def davies_bouldin(points, labels) -> float:
    x, labels, uniq = _check_labels(points, labels)
    centroids = np.array([x[labels == c].mean(axis=0) for c in uniq])
    spread = np.array(
        [np.linalg.norm(x[labels == c] - centroids[k], axis=1).mean() for k, c in enumerate(uniq)]
    )
    sep = np.sqrt(_exact_sq_dists(centroids, centroids))
    off = ~np.eye(len(uniq), dtype=bool)
    if np.any(sep[off] == 0):
        raise ConceptVolError("zero separation", code="zero-separation")
    ratios = np.where(off, (spread[:, None] + spread[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(np.mean(ratios.max(axis=1)))


# --------------------------------------------------------------------------
# files: <prefix>.concepts.cavt, <prefix>.assignment.cavt, [<prefix>.mean.cavt],
# <prefix>.txt


def save_dictionary(d: ConceptDictionary, prefix, features=None, extra: dict | None = None):
    prefix = str(prefix)
    tensorio.write_tensor(prefix + ".concepts.cavt", d.concepts)
    tensorio.write_tensor(prefix + ".assignment.cavt", d.assignment)
    if d.mean is not None:
        tensorio.write_tensor(prefix + ".mean.cavt", d.mean)
    entries = {
        "method": d.method,
        "seed": "none" if d.seed is None else d.seed,
        "class_id": d.class_id,
        "concepts": d.size,
        "iterations": d.iterations,
        "sparsity": sparsity(d.assignment),
        "fdd_definition": "frechet-gaussian-w2-squared",
    }
    if features is not None:
        entries["reconstruction_error"] = d.reconstruction_error(features)
    entries.update(extra or {})
    tensorio.write_manifest(prefix + ".txt", entries)


def load_dictionary(prefix) -> ConceptDictionary:
    prefix = str(prefix)
    meta = tensorio.read_manifest(prefix + ".txt")
    concepts = tensorio.read_tensor(prefix + ".concepts.cavt").astype(np.float64)
    concepts = concepts.reshape(int(meta["concepts"]), -1)
    assignment = tensorio.read_tensor(prefix + ".assignment.cavt").astype(np.float64)
    mean = None
    try:
        mean = tensorio.read_tensor(prefix + ".mean.cavt").astype(np.float64)
    except FileNotFoundError:
        pass
    seed = None if meta.get("seed", "none") == "none" else int(meta["seed"])
    return ConceptDictionary(
        concepts,
        assignment.reshape(-1, len(concepts)),
        int(meta["class_id"]),
        meta["method"],
        seed,
        int(meta.get("iterations", 0)),
        mean=mean,
    )

"""Layer-wise relevance propagation through the matching layer and the backbone.

Relevance starts at the matching layer, where every pixel carries the
similarity it contributed to the target class score.  It is spread over the
feature channels in proportion to ``f * h`` (the matched concept), then
pushed back through the backbone:

* conv: epsilon rule, biases excluded from the denominator;
* relu: passes relevance only where the activation is positive;
* nearest upsample: relevance of all replicas is summed into the source;
* concat merge: channel split; relevance on padded positions of the merged
  branch is dropped and booked in a leakage ledger.

Every rule is linear in the incoming relevance, so per-concept maps obtained
by seeding only the pixels a concept won add up to the full map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    ActivationTrace,
    ConcatMerge,
    Conv,
    NetworkSpec,
    ReLU,
    Upsample,
    conv_patches,
)
from .errors import ConceptVolError, ShapeError
from .matching import MatchResult, _unit_rows, _vectors

DEFAULT_EPSILON = 1e-6
DEFAULT_QUANTILE = 0.9
SEED_MODES = ("score", "softmax")


def _sign(z):
    # sign(0) is +1 so the stabiliser never cancels a zero denominator
    return np.where(z >= 0, 1.0, -1.0)


def lrp_epsilon(a, w, r_out, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """Epsilon rule for a dense map ``z_j = sum_i a_i w_ij``."""
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    z = a @ w
    s = r_out / (z + eps * _sign(z))
    return a * (w @ s)


def lrp_conv(layer: Conv, a: np.ndarray, r_out: np.ndarray, eps: float = DEFAULT_EPSILON):
    """Epsilon rule for a zero-padded strided convolution (bias ignored)."""
    k, stride, pad = layer.kernel, layer.stride, layer.kernel // 2
    patches = conv_patches(a, k, stride)  # (Ho, Wo, k, k, C)
    z = np.einsum("hwijc,ijco->hwo", patches, layer.weight, optimize=True)
    if z.shape != r_out.shape:
        raise ShapeError(f"relevance {r_out.shape} does not match conv output {z.shape}")
    s = r_out / (z + eps * _sign(z))
    contrib = patches * np.einsum("hwo,ijco->hwijc", s, layer.weight, optimize=True)
    ho, wo = z.shape[:2]
    h, w, c = a.shape
    acc = np.zeros((h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            acc[i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib[:, :, i, j]
    return acc[pad : pad + h, pad : pad + w]


def lrp_upsample(r: np.ndarray, factor: int, conserve: bool = True) -> np.ndarray:
    """Fold relevance of a nearest-neighbour upsample back onto its source.

    With ``conserve=False`` only the top-left replica is kept, which is how a
    resampling-style backward pass loses relevance.
    """
    if factor == 1:
        return r
    h, w = r.shape[0] // factor, r.shape[1] // factor
    if not conserve:
        return r[::factor, ::factor].copy()
    return r.reshape(h, factor, w, factor, *r.shape[2:]).sum(axis=(1, 3))


@dataclass
class ConcatSplit:
    skip: np.ndarray  # relevance of the earlier (source) branch
    merged: np.ndarray  # relevance of the merged branch, padding removed
    leaked: float  # relevance that sat on padded positions


def lrp_concat_split(
    r_u, first_channels: int, indicator=None, factor: int = 1, record_leak: bool = True
) -> ConcatSplit:
    """Split merged-layer relevance back into its two branches.

    The first ``first_channels`` channels belong to the source branch.  The
    rest is multiplied by ``indicator`` (True on original, non-padded
    positions), cropped to the original extent and, for ``factor > 1``,
    folded back through the nearest-neighbour upsample.
    """
    r_u = np.asarray(r_u, dtype=np.float64)
    if r_u.ndim != 3 or not 0 < first_channels < r_u.shape[2]:
        raise ShapeError(
            f"cannot split {r_u.shape[-1]} channels at {first_channels}"
        )
    skip = r_u[:, :, :first_channels].copy()
    merged = r_u[:, :, first_channels:]
    if indicator is None:
        indicator = np.ones(r_u.shape[:2], dtype=bool)
    indicator = np.asarray(indicator, dtype=bool)
    if indicator.shape != r_u.shape[:2]:
        raise ShapeError("indicator must match the merged grid")
    leaked = float(np.sum(merged[~indicator])) if record_leak else 0.0
    merged = merged * indicator[..., None]
    rows = int(indicator.any(axis=1).sum())
    cols = int(indicator.any(axis=0).sum())
    merged = merged[:rows, :cols]
    merged = lrp_upsample(merged, factor)
    return ConcatSplit(skip, merged, leaked)


def lrp_matching(features, matched, r_match, eps: float = DEFAULT_EPSILON) -> np.ndarray:
    """Distribute per-pixel matching relevance over feature channels.

    ``matched`` holds, per pixel, the concept vector the pixel was matched
    to; each channel receives its share of ``f * h``.
    """
    f = np.asarray(features, dtype=np.float64)
    h = np.asarray(matched, dtype=np.float64)
    r = np.asarray(r_match, dtype=np.float64)
    if f.shape != h.shape or r.shape != f.shape[:-1]:
        raise ShapeError("features, matched concepts and relevance are misaligned")
    prod = f * h
    denom = prod.sum(axis=-1)
    return prod * (r / (denom + eps * _sign(denom)))[..., None]


# --------------------------------------------------------------------------
# backbone backward pass


@dataclass
class BackwardPass:
    input: np.ndarray  # relevance on the network input
    layers: list  # relevance at every layer output
    boundaries: list  # (label, frontier sum) from the features down to the input
    leaks: list  # (layer index, leaked relevance)


def backward(
    spec: NetworkSpec,
    trace: ActivationTrace,
    r_features: np.ndarray,
    eps: float = DEFAULT_EPSILON,
    conserve: bool = True,
) -> BackwardPass:
    """Propagate feature-map relevance to the input.

    ``boundaries`` lists the total relevance on the frontier just above each
    layer, counting relevance parked on skip branches that has not been
    consumed yet.  ``conserve=False`` reproduces a naive pass that drops
    replica relevance at upsamples and does not book padding leakage.
    """
    n = len(spec.layers)
    if len(trace.outputs) != n:
        raise ConceptVolError("trace does not belong to this network", code="trace-mismatch")
    if trace.features.shape != np.shape(r_features):
        raise ShapeError("feature relevance does not match the traced feature map")
    plan = spec.channel_plan()
    pending: dict[int, np.ndarray] = {n - 1: np.asarray(r_features, dtype=np.float64)}
    layers: list = [None] * n
    boundaries = []
    leaks = []
    for i in range(n - 1, -1, -1):
        boundaries.append((f"layer{i}", float(sum(v.sum() for v in pending.values()))))
        r = pending.pop(i)
        layers[i] = r
        layer = spec.layers[i]
        a_in = trace.outputs[i - 1] if i > 0 else trace.input
        if isinstance(layer, Conv):
            r_in = lrp_conv(layer, a_in, r, eps)
        elif isinstance(layer, ReLU):
            r_in = np.where(trace.outputs[i] > 0, r, 0.0)
        elif isinstance(layer, Upsample):
            r_in = lrp_upsample(r, layer.factor, conserve)
        elif isinstance(layer, ConcatMerge):
            split = lrp_concat_split(
                r, plan[layer.source], trace.merge_masks[i], record_leak=conserve
            )
            if split.leaked:
                leaks.append((i, split.leaked))
            pending[layer.source] = pending.get(layer.source, 0.0) + split.skip
            r_in = split.merged
        else:  # pragma: no cover - NetworkSpec validates layer types
            raise ShapeError(f"unsupported layer {layer!r}")
        if i > 0:
            pending[i - 1] = pending.get(i - 1, 0.0) + r_in
        else:
            r_input = r_in
    boundaries.append(("input", float(r_input.sum())))
    return BackwardPass(r_input, layers, boundaries, leaks)


# --------------------------------------------------------------------------
# attribution


@dataclass
class AttributionMap:
    concept: tuple[int, int]  # (class, concept index)
    relevance: np.ndarray  # (H, W)
    normalized: bool = False

    @property
    def positive(self) -> np.ndarray:
        return np.maximum(self.relevance, 0.0)

    def normalize(self) -> "AttributionMap":
        """Positive part scaled to unit mass (left at zero if it has none)."""
        pos = self.positive
        total = pos.sum()
        if total > 0:
            pos = pos / total
        return AttributionMap(self.concept, pos, normalized=total > 0)


@dataclass
class RelevanceState:
    target: int
    match: np.ndarray  # (h, w) relevance at the matching layer
    features: np.ndarray  # (h, w, C) relevance on the feature map
    input: np.ndarray | None = None  # (H, W, Cin)
    layers: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)
    leaks: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(self.match.sum())

    @property
    def input_map(self) -> np.ndarray:
        return self.input.sum(axis=-1)


def seed_relevance(result: MatchResult, target: int, mode: str = "score") -> np.ndarray:
    """Matching-layer relevance: each pixel's contribution to the target score."""
    if mode not in SEED_MODES:
        raise ConceptVolError(f"unknown seed mode {mode!r}", code="seed-mode")
    r = result.class_sim[target].copy()
    if mode == "softmax":
        r *= result.confidence[target]
    return r


def matched_vectors(result: MatchResult, dictionaries, target: int, normalize: bool = True):
    """Per-pixel concept vector of the target class each pixel matched best."""
    concepts = _vectors(dictionaries[target])
    if normalize:
        concepts = _unit_rows(concepts)
    return concepts[result.class_best[target]]


def attribute(
    trace: ActivationTrace | None,
    spec: NetworkSpec | None,
    result: MatchResult,
    dictionaries,
    target_class: int | None = None,
    eps: float = DEFAULT_EPSILON,
    seed_mode: str = "score",
    normalize: bool = True,
    conserve: bool = True,
    features=None,
) -> tuple[RelevanceState, dict]:
    """Attribute the target class score to the input and to every concept.

    Without a trace, pass the matched ``features`` instead: attribution then
    stops at the feature map and concept maps live on the feature grid
    (summed over channels).  Concept maps are keyed by the global winner
    ``(class, concept)`` of each pixel.
    """
    target = result.prediction if target_class is None else int(target_class)
    if not 0 <= target < result.n_classes:
        raise ConceptVolError(f"target class {target} out of range", code="target")
    if trace is not None:
        features = trace.features
    if features is None:
        raise ConceptVolError("attribution needs a trace or a feature map", code="usage")
    features = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if features.shape[:2] != result.winner.shape[:2]:
        raise ConceptVolError("feature map does not match the match result", code="trace-mismatch")

    r_match = seed_relevance(result, target, seed_mode)
    h = matched_vectors(result, dictionaries, target, normalize)
    # channel shares are scale-invariant per pixel, so the unit features give
    # the same split as the raw ones with a better-conditioned epsilon
    shares = _unit_rows(features) if normalize else features
    r_features = lrp_matching(shares, h, r_match, eps)
    state = RelevanceState(target, r_match, r_features)
    state.boundaries = [("match", float(r_match.sum())), ("features", float(r_features.sum()))]

    if trace is not None:
        bw = backward(spec, trace, r_features, eps, conserve)
        state.input = bw.input
        state.layers = bw.layers
        state.boundaries += bw.boundaries[1:]
        state.leaks = bw.leaks

    maps = {}
    for key in sorted({tuple(map(int, w)) for w in result.winner.reshape(-1, 2)}):
        mask = np.all(result.winner == np.array(key), axis=-1)
        r_f = r_features * mask[..., None]
        if trace is None:
            rel = r_f.sum(axis=-1)
        else:
            rel = backward(spec, trace, r_f, eps, conserve).input.sum(axis=-1)
        maps[key] = AttributionMap(key, rel)
    return state, maps


def concept_relevance(r_match, winner, concept) -> float:
    """Matching-layer relevance summed over the pixels a concept won.

    ``winner`` is either an (H, W, 2) array of (class, concept) pairs with
    ``concept`` a pair, or an (H, W) label array with a scalar ``concept``.
    """
    r = np.asarray(r_match, dtype=np.float64)
    winner = np.asarray(winner)
    if winner.ndim == r.ndim + 1:
        mask = np.all(winner == np.asarray(concept), axis=-1)
    else:
        mask = winner == concept
    return float(r[mask].sum())


def concept_importance(per_image: dict, q: float = DEFAULT_QUANTILE) -> dict:
    """Per-concept ``q``-quantile of per-image relevance (linear interpolation).

    Concepts with no recorded relevance are left out of the result.
    """
    if not 0.0 < q < 1.0:
        raise ConceptVolError("quantile must lie in (0, 1)", code="quantile")
    return {
        key: float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))
        for key, values in per_image.items()
        if len(values) > 0
    }


@dataclass
class ConservationReport:
    total: float
    boundaries: list  # (label, sum)
    leaked: float
    drift: float

    def lines(self) -> list[str]:
        out = [f"total={self.total!r}"]
        out += [f"boundary {label} sum={value!r}" for label, value in self.boundaries]
        out.append(f"leaked={self.leaked!r}")
        out.append(f"drift={self.drift!r}")
        return out


def conservation_report(state: RelevanceState) -> ConservationReport:
    """Layer sums and the largest relative deviation from the seeded total.

    Relevance booked as padding leakage is added back before measuring drift
    and reported on its own.
    """
    total = state.total
    leak_at = dict()
    for layer, amount in state.leaks:
        leak_at[f"layer{layer}"] = leak_at.get(f"layer{layer}", 0.0) + amount
    worst = 0.0
    seen_leaks = 0.0
    for label, value in state.boundaries:
        worst = max(worst, abs(value + seen_leaks - total))
        # leakage of a merge layer shows up below its own boundary
        seen_leaks += leak_at.get(label, 0.0)
    drift = worst / abs(total) if total != 0 else worst
    return ConservationReport(total, list(state.boundaries), seen_leaks, drift)

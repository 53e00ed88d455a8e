import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptvol import backbone, matching, relevance
from conceptvol.backbone import Conv, ConcatMerge, NetworkSpec, ReLU
from conceptvol.errors import ConceptVolError, ShapeError

EPS = 1e-6


def epsilon_rule_loops(a, w, r_out, eps=EPS):
    """Direct transcription of the epsilon rule with explicit sums."""
    n_in, n_out = w.shape
    r_in = np.zeros(n_in)
    for j in range(n_out):
        z = sum(a[i] * w[i, j] for i in range(n_in))
        denom = z + eps * (1.0 if z >= 0 else -1.0)
        for i in range(n_in):
            r_in[i] += a[i] * w[i, j] / denom * r_out[j]
    return r_in


def test_epsilon_rule_examples():
    assert np.allclose(relevance.lrp_epsilon([1.0, 1.0], np.eye(2), [0.5, 0.5]), [0.5, 0.5], atol=1e-6)
    assert np.allclose(relevance.lrp_epsilon([2.0, 0.0], [[1.0], [1.0]], [1.0]), [1.0, 0.0], atol=1e-5)
    # zero pre-activation: sign(0) = +1 keeps the result finite
    assert np.all(np.isfinite(relevance.lrp_epsilon([0.0, 0.0], [[1.0], [1.0]], [1.0])))


@pytest.mark.parametrize("seed", range(50))
def test_epsilon_rule_matches_loops_and_conserves(seed):
    rng = np.random.default_rng(seed)
    n_in, n_out = int(rng.integers(8, 17)), int(rng.integers(1, 9))
    a = rng.uniform(0.5, 1.5, n_in)
    w = rng.uniform(0.5, 1.5, (n_in, n_out))
    r = rng.uniform(0, 1, n_out)
    got = relevance.lrp_epsilon(a, w, r)
    assert np.allclose(got, epsilon_rule_loops(a, w, r), atol=1e-12)
    # the stabiliser absorbs exactly r_j * eps / (z_j + eps)
    z = a @ w
    assert got.sum() == pytest.approx(np.sum(r * z / (z + EPS)), abs=1e-12)
    assert abs(got.sum() - r.sum()) <= 1e-6


def conv_as_matrix(layer, shape):
    """The convolution (bias off) as an explicit (inputs x outputs) matrix."""
    n = int(np.prod(shape))
    cols = []
    for idx in range(n):
        e = np.zeros(n)
        e[idx] = 1.0
        cols.append(backbone.conv_forward(layer, e.reshape(shape), with_bias=False).reshape(-1))
    return np.array(cols)


@pytest.mark.parametrize("k, stride", [(1, 1), (3, 1), (3, 2), (5, 2)])
def test_conv_rule_matches_dense_oracle(k, stride):
    rng = np.random.default_rng(k + stride)
    shape = (6, 5, 2)
    layer = Conv(rng.standard_normal((k, k, 2, 3)), rng.standard_normal(3), stride)
    a = rng.uniform(0, 1, shape)
    out_shape = backbone.conv_forward(layer, a).shape
    r_out = rng.standard_normal(out_shape)
    dense = relevance.lrp_epsilon(a.reshape(-1), conv_as_matrix(layer, shape), r_out.reshape(-1))
    assert np.allclose(relevance.lrp_conv(layer, a, r_out), dense.reshape(shape), atol=1e-9)


def test_upsample_sum_rule_and_vanilla():
    r = np.full((2, 2, 1), 0.1)
    assert np.isclose(relevance.lrp_upsample(r, 2).item(), 0.4)
    assert np.isclose(relevance.lrp_upsample(r, 2, conserve=False).item(), 0.1)


def test_concat_split_examples():
    split = relevance.lrp_concat_split(np.array([[[0.3, 0.7]]]), 1)
    assert np.isclose(split.skip.item(), 0.3) and np.isclose(split.merged.item(), 0.7)

    r = np.zeros((2, 2, 2))
    r[:, :, 1] = 0.1
    split = relevance.lrp_concat_split(r, 1, factor=2)
    assert np.isclose(split.merged.item(), 0.4)

    r = np.zeros((2, 2, 2))
    r[:, :, 1] = [[0.5, 0.2], [0.3, 0.0]]
    mask = np.array([[True, False], [True, False]])
    split = relevance.lrp_concat_split(r, 1, indicator=mask)
    assert np.isclose(split.leaked, 0.2)
    assert split.merged.shape == (2, 1, 1)
    assert np.isclose(split.merged.sum(), 0.8)

    with pytest.raises(ShapeError):
        relevance.lrp_concat_split(np.zeros((1, 1, 2)), 2)


def test_matching_rule_examples():
    r = relevance.lrp_matching(np.array([[[2.0, 1.0]]]), np.array([[[0.5, 1.0]]]), np.array([[2.0]]))
    assert np.allclose(r, [[[1.0, 1.0]]], atol=1e-6)
    r = relevance.lrp_matching(np.array([[[2.0, 0.0]]]), np.array([[[0.5, 1.0]]]), np.array([[1.0]]))
    assert r[0, 0, 1] == 0.0


def test_matching_rule_conserves_per_pixel():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((10, 10, 8))
    h = rng.standard_normal((10, 10, 8))
    fu = f / np.linalg.norm(f, axis=-1, keepdims=True)
    hu = h / np.linalg.norm(h, axis=-1, keepdims=True)
    r_phi = np.sum(fu * hu, axis=-1)  # each pixel's own similarity
    r = relevance.lrp_matching(fu, hu, r_phi)
    assert np.max(np.abs(r.sum(axis=-1) - r_phi)) <= 1e-6


def _setup(seed, size=16, classes=3, d=20):
    rng = np.random.default_rng(seed)
    spec = backbone.reference_network()
    x = rng.standard_normal((size, size, 3))
    trace = backbone.forward(spec, x)
    dicts = [rng.standard_normal((d, spec.out_channels)) for _ in range(classes)]
    result = matching.match_concepts(trace.features, dicts)
    return spec, trace, dicts, result


@pytest.mark.parametrize("seed", range(20))
def test_input_relevance_equals_class_score(seed):
    spec, trace, dicts, result = _setup(seed)
    state, maps = relevance.attribute(trace, spec, result, dicts)
    s_y = result.scores[result.prediction]
    assert abs(state.input.sum() - s_y) <= 1e-4 * abs(s_y)
    assert relevance.conservation_report(state).drift < 1e-4
    assert not state.leaks
    total = sum(m.relevance for m in maps.values())
    assert np.allclose(total, state.input_map, atol=1e-6)


def test_concept_partition_and_relu_gating():
    spec, trace, dicts, result = _setup(7)
    state, _ = relevance.attribute(trace, spec, result, dicts)
    keys = {tuple(k) for k in result.winner.reshape(-1, 2)}
    parts = sum(relevance.concept_relevance(state.match, result.winner, k) for k in keys)
    assert parts == pytest.approx(state.match.sum(), abs=1e-12)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ReLU):
            pre = trace.outputs[i - 1]
            assert np.all(state.layers[i - 1][pre <= 0] == 0.0)


def test_vanilla_pass_leaks():
    spec, trace, dicts, result = _setup(3, size=32)
    state, _ = relevance.attribute(trace, spec, result, dicts, conserve=False)
    assert relevance.conservation_report(state).drift > 1e-2


def test_zero_input_gives_zero_sums():
    spec = backbone.reference_network()
    trace = backbone.forward(spec, np.zeros((16, 16, 3)))
    dicts = [np.ones((2, 16)), -np.ones((2, 16))]
    result = matching.match_concepts(trace.features, dicts)
    state, _ = relevance.attribute(trace, spec, result, dicts)
    assert all(v == 0.0 for _, v in state.boundaries)


def test_single_pixel_feature_map():
    feats = np.array([[[1.0, 2.0, 0.5]]])
    dicts = [np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]), np.array([[-1.0, 0.0, 0.0]])]
    result = matching.match_concepts(feats, dicts)
    state, maps = relevance.attribute(None, None, result, dicts, features=feats)
    assert list(maps) == [(0, 0)]
    assert maps[(0, 0)].relevance.sum() == pytest.approx(result.scores[0], abs=1e-6)


def test_softmax_seed_scales_by_confidence():
    spec, trace, dicts, result = _setup(1)
    plain, _ = relevance.attribute(trace, spec, result, dicts)
    soft, _ = relevance.attribute(trace, spec, result, dicts, seed_mode="softmax")
    conf = result.confidence[result.prediction]
    assert soft.total == pytest.approx(plain.total * conf, rel=1e-12)
    with pytest.raises(ConceptVolError):
        relevance.attribute(trace, spec, result, dicts, seed_mode="logit")
    with pytest.raises(ConceptVolError):
        relevance.attribute(trace, spec, result, dicts, target_class=5)


def test_trace_mismatch():
    spec, trace, dicts, result = _setup(2)
    other = backbone.reference_network(merges=1)
    with pytest.raises(ConceptVolError):
        relevance.attribute(trace, other, result, dicts)


def test_padded_merge_books_leakage():
    rng = np.random.default_rng(4)
    layers = [
        Conv(rng.standard_normal((3, 3, 1, 2)), np.zeros(2), 2),
        ReLU(),
        Conv(rng.standard_normal((3, 3, 2, 2)), np.zeros(2), 2),
        ConcatMerge(1),  # 2x2 current padded onto the 4x4 source grid
    ]
    spec = NetworkSpec(layers, 1)
    trace = backbone.forward(spec, rng.uniform(size=(8, 8, 1)))
    assert not trace.merge_masks[3].all()
    r = np.ones(trace.features.shape)
    bw = relevance.backward(spec, trace, r)
    leaked = sum(v for _, v in bw.leaks)
    # 12 padded positions x 2 channels of unit relevance
    assert leaked == pytest.approx(24.0)


def test_concept_relevance_examples():
    r = np.array([1.0, 2.0, 3.0])
    labels = np.array([0, 1, 0])
    assert relevance.concept_relevance(r, labels, 0) == 4.0
    assert relevance.concept_relevance(r, labels, 1) == 2.0
    assert relevance.concept_relevance(r, labels, 2) == 0.0
    assert relevance.concept_relevance(r, np.zeros(3), 0) == 6.0


def test_concept_importance_examples():
    got = relevance.concept_importance({"a": [5, 5, 5], "b": [0, 10], "c": []}, q=0.9)
    assert got == {"a": 5.0, "b": 9.0}
    with pytest.raises(ConceptVolError):
        relevance.concept_importance({"a": [1]}, q=1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_attribution_map_normalization(seed):
    rel = np.random.default_rng(seed).standard_normal((4, 5))
    amap = relevance.AttributionMap((0, 0), rel).normalize()
    assert np.all(amap.relevance >= 0)
    if amap.normalized:
        assert amap.relevance.sum() == pytest.approx(1.0, abs=1e-9)

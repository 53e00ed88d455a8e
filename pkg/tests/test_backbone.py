import numpy as np
import pytest

from conceptvol import backbone
from conceptvol.backbone import Conv, ConcatMerge, NetworkSpec, ReLU, Upsample
from conceptvol.errors import ConceptVolError, FormatError, ShapeError

REFERENCE_CHECKSUM = "e97924b0026ef63d14acc6141fe6f3435181be34cf5d0cf4f8d775af95b255c7"


def naive_conv(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    h, wd, _ = x.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho, wo = (h + stride - 1) // stride, (wd + stride - 1) // stride
    out = np.zeros((ho, wo, w.shape[3]))
    for r in range(ho):
        for c in range(wo):
            for o in range(w.shape[3]):
                patch = xp[r * stride : r * stride + k, c * stride : c * stride + k]
                out[r, c, o] = np.sum(patch * w[:, :, :, o]) + b[o]
    return out


@pytest.mark.parametrize("k, stride, shape", [(3, 1, (5, 6, 2)), (3, 2, (8, 8, 3)), (1, 1, (4, 3, 5)), (5, 2, (7, 9, 2))])
def test_conv_matches_loop_oracle(k, stride, shape):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal(shape)
    layer = Conv(rng.standard_normal((k, k, shape[2], 4)), rng.standard_normal(4), stride)
    assert np.allclose(backbone.conv_forward(layer, x), naive_conv(x, layer.weight, layer.bias, stride), atol=1e-12)


def test_reference_architecture():
    spec = backbone.reference_network()
    assert spec.channel_plan() == [8, 8, 16, 16, 32, 32, 32, 48, 16, 16, 16, 24, 16]
    assert spec.total_stride == 2
    assert spec.input_multiple == 8
    assert spec.merge_count == 2
    assert spec.out_channels == 16
    assert spec.weights_checksum() == REFERENCE_CHECKSUM
    assert all(not np.any(layer.bias) for layer in spec.layers if isinstance(layer, Conv))


def test_reference_forward_shapes():
    spec = backbone.reference_network()
    x = np.random.default_rng(0).standard_normal((32, 40, 3))
    trace = backbone.forward(spec, x)
    assert trace.features.shape == (16, 20, 16)
    assert len(trace.outputs) == len(spec.layers)
    for mask in trace.merge_masks.values():
        assert mask.all()  # input multiple of 8 leaves nothing padded
    with pytest.raises(ShapeError):
        backbone.forward(spec, np.zeros((30, 40, 3)))


def test_stride_eight_variant():
    spec = backbone.reference_network(out_stride=8)
    assert spec.total_stride == 8
    trace = backbone.forward(spec, np.ones((64, 64, 3)))
    assert trace.features.shape == (8, 8, 16)


def test_zero_input_gives_zero_features():
    spec = backbone.reference_network()
    trace = backbone.forward(spec, np.zeros((16, 16, 3)))
    assert not np.any(trace.features)


def test_concat_merge_pads_bottom_right():
    src = np.ones((4, 4, 2))
    cur = np.full((3, 2, 1), 5.0)
    merged, mask = backbone.concat_merge(src, cur)
    assert merged.shape == (4, 4, 3)
    assert mask.sum() == 6 and mask[:3, :2].all()
    assert np.all(merged[..., :2] == 1.0)
    assert np.all(merged[~mask, 2] == 0.0)
    with pytest.raises(ShapeError):
        backbone.concat_merge(cur, src)


def test_padded_merge_network_runs():
    rng = np.random.default_rng(1)
    layers = [
        Conv(rng.standard_normal((3, 3, 1, 2)), np.zeros(2), 2),
        ReLU(),
        Conv(rng.standard_normal((3, 3, 2, 2)), np.zeros(2), 2),
        Upsample(2),
        ConcatMerge(0),
    ]
    trace = backbone.forward(NetworkSpec(layers, 1), rng.standard_normal((12, 12, 1)))
    # 12 -> 6 -> 3 -> 6: no padding needed here
    assert trace.features.shape == (6, 6, 4)


def test_invalid_specs():
    with pytest.raises(ShapeError):
        Conv(np.zeros((2, 2, 1, 1)), np.zeros(1))
    with pytest.raises(ConceptVolError):
        NetworkSpec([Conv(np.zeros((1, 1, 3, 2)), np.zeros(2)), Conv(np.zeros((1, 1, 3, 2)), np.zeros(2))], 3)
    with pytest.raises(ConceptVolError):
        NetworkSpec([ConcatMerge(5)], 3)


def test_normalize_features_flags_zero_vectors():
    f = np.zeros((2, 2, 3))
    f[0, 0] = [3, 4, 0]
    fm = backbone.normalize_features(f)
    assert np.allclose(fm.values[0, 0], [0.6, 0.8, 0])
    assert fm.zero_mask.sum() == 3


def test_network_roundtrip(tmp_path):
    spec = backbone.reference_network()
    backbone.save_network(spec, tmp_path / "net.txt")
    back = backbone.load_network(tmp_path / "net.txt")
    assert backbone.networks_equal(spec, back)
    assert back.weights_checksum() == REFERENCE_CHECKSUM

    text = (tmp_path / "net.txt").read_text().replace("conceptvol-network 1", "conceptvol-network 9")
    (tmp_path / "net.txt").write_text(text)
    with pytest.raises(FormatError):
        backbone.load_network(tmp_path / "net.txt")

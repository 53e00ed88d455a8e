"""A small convolutional feature extractor with upsample-by-concatenation merges.

Activations are channel-last ``(H, W, C)`` float64 arrays.  Every layer
output is kept in an :class:`ActivationTrace` so relevance can be propagated
backwards afterwards.

A :class:`ConcatMerge` layer concatenates ``[source, current]`` along the
channel axis, where ``source`` is the output of an earlier layer and
``current`` the running activation (normally just upsampled).  If
``current`` is spatially smaller than ``source`` it is zero-padded at the
bottom/right edges; the trace records which positions are original.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensorio
from .errors import ConceptVolError, FormatError, ShapeError

NETWORK_HEADER = "conceptvol-network"
NETWORK_VERSION = 1


@dataclass
class Conv:
    weight: np.ndarray  # (k, k, in, out)
    bias: np.ndarray  # (out,)
    stride: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 4 or self.weight.shape[0] != self.weight.shape[1]:
            raise ShapeError(f"conv weight must be (k, k, in, out), got {self.weight.shape}")
        if self.weight.shape[0] % 2 == 0:
            raise ShapeError("conv kernel size must be odd")
        if self.bias.shape != (self.weight.shape[3],):
            raise ShapeError("conv bias length must equal output channels")
        if self.stride < 1:
            raise ShapeError("stride must be positive")

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[3]


@dataclass
class ReLU:
    pass


@dataclass
class Upsample:
    factor: int = 2


@dataclass
class ConcatMerge:
    source: int  # index of an earlier layer whose output is concatenated


Layer = Conv | ReLU | Upsample | ConcatMerge


@dataclass
class NetworkSpec:
    layers: list
    in_channels: int = 3

    def __post_init__(self):
        self.channel_plan()

    def channel_plan(self) -> list[int]:
        """Output channel count of every layer; raises on inconsistencies."""
        plan = []
        ch = self.in_channels
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if layer.in_channels != ch:
                    raise ShapeError(
                        f"layer {i}: conv expects {layer.in_channels} channels, gets {ch}"
                    )
                ch = layer.out_channels
            elif isinstance(layer, ConcatMerge):
                if not (0 <= layer.source < i):
                    raise ShapeError(f"layer {i}: merge source must be an earlier layer")
                ch = plan[layer.source] + ch
            elif isinstance(layer, Upsample):
                if layer.factor < 1:
                    raise ShapeError(f"layer {i}: upsample factor must be positive")
            elif not isinstance(layer, ReLU):
                raise ShapeError(f"layer {i}: unknown layer type {type(layer).__name__}")
            plan.append(ch)
        return plan

    @property
    def out_channels(self) -> int:
        plan = self.channel_plan()
        return plan[-1] if plan else self.in_channels

    @property
    def merge_count(self) -> int:
        return sum(isinstance(l, ConcatMerge) for l in self.layers)

    @property
    def total_stride(self) -> int:
        """Input extent divided by output extent."""
        scale = 1.0
        for layer in self.layers:
            if isinstance(layer, Conv):
                scale *= layer.stride
            elif isinstance(layer, Upsample):
                scale /= layer.factor
        return int(round(scale))

    @property
    def input_multiple(self) -> int:
        """Input extents must be divisible by this (product of conv strides)."""
        return math.prod(l.stride for l in self.layers if isinstance(l, Conv))

    def weights_checksum(self) -> str:
        digest = hashlib.sha256()
        for layer in self.layers:
            if isinstance(layer, Conv):
                digest.update(layer.weight.astype("<f4").tobytes())
                digest.update(layer.bias.astype("<f4").tobytes())
        return digest.hexdigest()


@dataclass
class ActivationTrace:
    input: np.ndarray
    outputs: list  # per-layer outputs
    # for ConcatMerge layers: (H_src, W_src) bool mask of non-padded positions
    merge_masks: dict = field(default_factory=dict)

    @property
    def features(self) -> np.ndarray:
        return self.outputs[-1] if self.outputs else self.input


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, C)
    unit_norm: bool = False
    zero_mask: np.ndarray | None = None  # (H, W) pixels that were zero vectors

    @property
    def shape(self):
        return self.values.shape


# --------------------------------------------------------------------------
# forward


def conv_patches(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Zero-padded patches of shape (Ho, Wo, k, k, C)."""
    pad = kernel // 2
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kernel, kernel), axis=(0, 1))  # (H', W', C, k, k)
    win = win[::stride, ::stride]
    return np.moveaxis(win, 2, -1)


def conv_forward(layer: Conv, x: np.ndarray, with_bias: bool = True) -> np.ndarray:
    patches = conv_patches(x, layer.kernel, layer.stride)
    out = np.einsum("hwijc,ijco->hwo", patches, layer.weight, optimize=True)
    if with_bias:
        out = out + layer.bias
    return out


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


def concat_merge(source: np.ndarray, current: np.ndarray):
    """Concatenate ``[source, current]``; pads ``current`` to ``source``'s grid.

    Returns the merged map and the mask of original (non-padded) positions.
    """
    hs, ws = source.shape[:2]
    hc, wc = current.shape[:2]
    if hc > hs or wc > ws:
        raise ShapeError(f"merged map {hc}x{wc} exceeds source grid {hs}x{ws}")
    mask = np.zeros((hs, ws), dtype=bool)
    mask[:hc, :wc] = True
    padded = np.zeros((hs, ws, current.shape[2]))
    padded[:hc, :wc] = current
    return np.concatenate([source, padded], axis=2), mask


def forward(spec: NetworkSpec, x) -> ActivationTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise ShapeError(f"input must be (H, W, {spec.in_channels}), got {x.shape}")
    m = spec.input_multiple
    if x.shape[0] % m or x.shape[1] % m:
        raise ShapeError(f"input extents {x.shape[:2]} not divisible by {m}")
    outputs = []
    masks = {}
    cur = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            cur = conv_forward(layer, cur)
        elif isinstance(layer, ReLU):
            cur = np.maximum(cur, 0.0)
        elif isinstance(layer, Upsample):
            cur = upsample_nearest(cur, layer.factor)
        elif isinstance(layer, ConcatMerge):
            cur, masks[i] = concat_merge(outputs[layer.source], cur)
        outputs.append(cur)
    return ActivationTrace(x, outputs, masks)


def normalize_features(features) -> FeatureMap:
    """Scale every pixel vector to unit L2 norm; zero vectors stay zero."""
    if isinstance(features, FeatureMap):
        features = features.values
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    out = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    return FeatureMap(out, unit_norm=True, zero_mask=zero)


# --------------------------------------------------------------------------
# reference network


def reference_network(
    seed: int = 42,
    out_stride: int = 2,
    merges: int = 2,
    feature_dim: int = 16,
    in_channels: int = 3,
    base_width: int = 8,
    hidden: int = 16,
) -> NetworkSpec:
    """Build the seeded toy architecture.

    ``log2(out_stride) + merges`` stride-2 3x3 convolutions (widths
    ``base_width * 2**i``), then ``merges`` stages of ``upsample x2 ->
    merge with the matching encoder activation -> 1x1 conv``.  The last
    1x1 conv emits ``feature_dim`` channels and has no ReLU.  With the
    defaults this is::

        conv3x3/s2(3->8) relu conv3x3/s2(8->16) relu conv3x3/s2(16->32) relu
        up x2, merge(16) conv1x1(48->16) relu
        up x2, merge(8)  conv1x1(24->16)

    Weights are uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)), rounded to
    float32 so that a save/load round trip is exact.  Biases are zero,
    which keeps the network positively homogeneous.
    """
    levels = int(round(math.log2(out_stride)))
    if 2**levels != out_stride:
        raise ConceptVolError("out_stride must be a power of two")
    if merges < 0:
        raise ConceptVolError("merges must be non-negative")
    rng = np.random.default_rng(seed)

    def make_conv(k, cin, cout, stride):
        bound = 1.0 / math.sqrt(k * k * cin)
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout))
        return Conv(w.astype(np.float32).astype(np.float64), np.zeros(cout), stride)

    layers: list = []
    skip_ids = []
    ch = in_channels
    n_down = levels + merges
    for i in range(n_down):
        cout = base_width * 2**i
        layers.append(make_conv(3, ch, cout, 2))
        layers.append(ReLU())
        skip_ids.append(len(layers) - 1)
        ch = cout
    if merges == 0:
        layers.append(make_conv(1, ch, feature_dim, 1))
        return NetworkSpec(layers, in_channels)
    for m in range(merges):
        source = skip_ids[n_down - 2 - m]
        src_ch = base_width * 2 ** (n_down - 2 - m)
        layers.append(Upsample(2))
        layers.append(ConcatMerge(source))
        last = m == merges - 1
        cout = feature_dim if last else hidden
        layers.append(make_conv(1, src_ch + ch, cout, 1))
        if not last:
            layers.append(ReLU())
        ch = cout
    return NetworkSpec(layers, in_channels)


# --------------------------------------------------------------------------
# files


def save_network(spec: NetworkSpec, path) -> None:
    """Text header listing layers; conv weights go to sibling tensor files."""
    path = Path(path)
    stem = path.with_suffix("")
    lines = [f"{NETWORK_HEADER} {NETWORK_VERSION}", f"in_channels {spec.in_channels}"]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            wname = f"{stem.name}.layer{i}.weight.cavt"
            bname = f"{stem.name}.layer{i}.bias.cavt"
            tensorio.write_tensor(path.parent / wname, layer.weight)
            tensorio.write_tensor(path.parent / bname, layer.bias)
            lines.append(
                f"conv {layer.kernel} {layer.stride} {layer.in_channels} "
                f"{layer.out_channels} {wname} {bname}"
            )
        elif isinstance(layer, ReLU):
            lines.append("relu")
        elif isinstance(layer, Upsample):
            lines.append(f"upsample {layer.factor}")
        elif isinstance(layer, ConcatMerge):
            lines.append(f"concat {layer.source}")
    path.write_text("\n".join(lines) + "\n")


def load_network(path) -> NetworkSpec:
    path = Path(path)
    lines = [l.split() for l in path.read_text().splitlines() if l.strip()]
    if not lines or lines[0][0] != NETWORK_HEADER:
        raise FormatError("not a network file", code="bad-magic")
    if int(lines[0][1]) != NETWORK_VERSION:
        raise FormatError(f"unsupported network version {lines[0][1]}", code="version")
    in_channels = int(lines[1][1])
    layers: list = []
    for tokens in lines[2:]:
        kind = tokens[0]
        if kind == "conv":
            k, stride, cin, cout = map(int, tokens[1:5])
            w = tensorio.read_tensor(path.parent / tokens[5]).astype(np.float64)
            b = tensorio.read_tensor(path.parent / tokens[6]).astype(np.float64)
            if w.shape != (k, k, cin, cout):
                raise ShapeError(f"weight dims {w.shape} disagree with header {(k, k, cin, cout)}")
            layers.append(Conv(w, b, stride))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "upsample":
            layers.append(Upsample(int(tokens[1])))
        elif kind == "concat":
            layers.append(ConcatMerge(int(tokens[1])))
        else:
            raise FormatError(f"unknown layer {kind!r}")
    return NetworkSpec(layers, in_channels)


def networks_equal(a: NetworkSpec, b: NetworkSpec) -> bool:
    if a.in_channels != b.in_channels or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        if isinstance(la, Conv):
            if la.stride != lb.stride or not (
                np.array_equal(la.weight, lb.weight) and np.array_equal(la.bias, lb.bias)
            ):
                return False
        elif la != lb:
            return False
    return True

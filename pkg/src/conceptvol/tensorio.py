"""Binary tensor files, Wavefront meshes, portable pixmaps and key=value sidecars.

Tensor file layout (all integers little-endian)::

    offset 0   4 bytes   magic b"CAVT"
    offset 4   u8        version (1)
    offset 5   u8        rank r >= 1
    offset 6   r * u32   dims, row-major
    ...        n * f32   payload, n = prod(dims)

Masks are read from binary graymaps (P5) and heatmaps are written as binary
pixmaps (P6).  Only ``v`` and ``f`` records of OBJ files are honoured.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    MeshError,
    NonFiniteError,
    TruncatedError,
)

logger = logging.getLogger(__name__)

MAGIC = b"CAVT"
VERSION = 1


def write_tensor(path, array) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} exceeds 255")
    if arr.size == 0:
        raise FormatError("tensor has a zero extent")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor` as a float32 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise BadMagicError("bad magic")
    version, rank = blob[4], blob[5]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", code="version")
    if rank == 0:
        raise FormatError("rank must be at least 1")
    end_dims = 6 + 4 * rank
    if len(blob) < end_dims:
        raise TruncatedError("truncated header")
    dims = struct.unpack(f"<{rank}I", blob[6:end_dims])
    if any(d == 0 for d in dims):
        raise FormatError("tensor has a zero extent")
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[end_dims:]
    if len(payload) < 4 * count:
        raise TruncatedError("truncated payload")
    if len(payload) > 4 * count:
        raise FormatError("trailing bytes after payload", code="trailing")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value")
    return data


# --------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) == 0:
            raise MeshError("mesh has no faces")
        if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise MeshError("index out of range")

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)


def _parse_index(token: str, n_vertices: int) -> int:
    idx = int(token.split("/")[0])
    if idx < 0:
        # negative indices count back from the most recent vertex
        idx = n_vertices + idx
    else:
        idx -= 1
    return idx


def read_mesh_obj(path) -> Mesh:
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"line {lineno}: vertex needs 3 coordinates")
                vertices.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [_parse_index(p, len(vertices)) for p in parts[1:]]
                if len(idx) < 3:
                    raise MeshError(f"line {lineno}: face needs 3 vertices")
                for i in idx:
                    if i < 0 or i >= len(vertices):
                        raise MeshError(f"line {lineno}: index out of range")
                # fan triangulation around the first corner
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not faces:
        raise MeshError("mesh has no faces")
    return Mesh(np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64))


def write_mesh_obj(path, mesh: Mesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in mesh.faces:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))


# --------------------------------------------------------------------------
# pixmaps


def _read_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    n = len(blob)
    while pos < n:
        c = blob[pos : pos + 1]
        if c == b"#":
            while pos < n and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise TruncatedError("truncated pixmap header")
    return blob[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a binary graymap (P5, maxval <= 255) as an (H, W) uint8 array."""
    blob = Path(path).read_bytes()
    magic, pos = _read_token(blob, 0)
    if magic != b"P5":
        raise BadMagicError("bad magic")
    width, pos = _read_token(blob, pos)
    height, pos = _read_token(blob, pos)
    maxval, pos = _read_token(blob, pos)
    width, height, maxval = int(width), int(height), int(maxval)
    if maxval > 255:
        raise FormatError("only 8-bit graymaps are supported")
    pos += 1  # single whitespace after maxval
    data = blob[pos : pos + width * height]
    if len(data) < width * height:
        raise TruncatedError("truncated payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise FormatError("graymap must be 2-D")
    if labels.min() < 0 or labels.max() > 255:
        raise FormatError("graymap values must lie in [0, 255]")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes())


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, pos = _read_token(blob, 0)
    if magic != b"P6":
        raise BadMagicError("bad magic")
    width, pos = _read_token(blob, pos)
    height, pos = _read_token(blob, pos)
    _, pos = _read_token(blob, pos)
    width, height = int(width), int(height)
    pos += 1
    data = blob[pos : pos + 3 * width * height]
    if len(data) < 3 * width * height:
        raise TruncatedError("truncated payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def _clip01(x):
    return np.clip(x, 0.0, 1.0)


# Each colormap maps v in [0, 1] to (r, g, b) in [0, 1].
COLORMAPS = {
    "gray": lambda v: np.stack([v, v, v], axis=-1),
    "hot": lambda v: np.stack(
        [_clip01(3 * v), _clip01(3 * v - 1), _clip01(3 * v - 2)], axis=-1
    ),
    "jet": lambda v: np.stack(
        [
            _clip01(1.5 - np.abs(4 * v - 3)),
            _clip01(1.5 - np.abs(4 * v - 2)),
            _clip01(1.5 - np.abs(4 * v - 1)),
        ],
        axis=-1,
    ),
}


def apply_colormap(image, colormap: str = "jet") -> np.ndarray:
    """Map a grid of values in [0, 1] to 8-bit RGB."""
    if colormap not in COLORMAPS:
        raise FormatError(f"unknown colormap {colormap!r}", code="colormap")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise FormatError("heatmap must be 2-D")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise FormatError("heatmap values must lie in [0, 1]", code="range")
    rgb = COLORMAPS[colormap](image)
    return np.rint(rgb * 255.0).astype(np.uint8)


def write_heatmap(image, colormap: str, path) -> None:
    # validation happens before the file is opened
    write_ppm(path, apply_colormap(image, colormap))


# --------------------------------------------------------------------------
# key=value sidecars


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(format_value(v) for v in np.asarray(value).tolist())
    return str(value)


def write_manifest(path, entries: dict) -> None:
    """Write ``key=value`` lines in insertion order."""
    with open(path, "w") as fh:
        for key, value in entries.items():
            text = format_value(value)
            if "\n" in text:
                raise FormatError(f"value for {key!r} contains a newline")
            fh.write(f"{key}={text}\n")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            entries[key.strip()] = value.strip()
    return entries


def parse_floats(text: str) -> np.ndarray:
    if not text:
        return np.zeros(0)
    return np.array([float(t) for t in text.split(",")], dtype=np.float64)

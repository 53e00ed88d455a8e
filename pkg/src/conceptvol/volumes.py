"""Neural object volume geometry and per-Gaussian features.

Gaussian centres are placed deterministically on an analytic surface
(cuboid, sphere, ellipsoid) or taken from the vertices of a prototype mesh.
The y axis is "up" for all analytic shapes; the ellipsoid poles sit at
``(0, +-b, 0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorio
from .errors import ConceptVolError, ShapeError
from .tensorio import Mesh

SHAPE_KINDS = ("cuboid", "sphere", "ellipsoid", "cad")
DEFAULT_TARGET_COUNT = 1000
DEFAULT_VISIBILITY_THRESHOLD = 0.1


@dataclass
class ShapeSpec:
    kind: str
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mesh: Mesh | None = None

    @classmethod
    def sphere(cls, radius: float = 1.0) -> "ShapeSpec":
        return cls("sphere", (radius, radius, radius))

    @classmethod
    def ellipsoid(cls, a: float, b: float, c: float) -> "ShapeSpec":
        return cls("ellipsoid", (a, b, c))

    @classmethod
    def cuboid(cls, a: float, b: float, c: float) -> "ShapeSpec":
        """Axis-aligned cuboid with half extents ``(a, b, c)``."""
        return cls("cuboid", (a, b, c))

    @classmethod
    def cad(cls, mesh: Mesh) -> "ShapeSpec":
        return cls("cad", (1.0, 1.0, 1.0), mesh)


@dataclass
class NovGeometry:
    kind: str
    centers: np.ndarray  # (K, 3)
    faces: np.ndarray | None = None  # (F, 3) triangles over ``centers``
    size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def count(self) -> int:
        return len(self.centers)

    def mesh(self) -> Mesh:
        if self.faces is None:
            raise ShapeError(f"{self.kind} geometry carries no faces")
        return Mesh(self.centers, self.faces)

    def implicit(self, points=None) -> np.ndarray:
        """Signed residual of the generating surface equation at ``points``."""
        pts = self.centers if points is None else np.asarray(points, dtype=np.float64)
        a, b, c = self.size
        scaled = pts / np.array([a, b, c])
        if self.kind in ("sphere", "ellipsoid"):
            return np.sum(scaled**2, axis=1) - 1.0
        if self.kind == "cuboid":
            return np.max(np.abs(scaled), axis=1) - 1.0
        raise ShapeError("cad geometry has no implicit equation")


@dataclass
class NeuralObjectVolume:
    geometry: NovGeometry
    features: np.ndarray  # (K, C)
    class_id: int
    visibility: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.visibility is None:
            self.visibility = np.ones(len(self.features))
        self.visibility = np.asarray(self.visibility, dtype=np.float64)
        if len(self.features) != self.geometry.count:
            raise ShapeError(
                f"feature rows ({len(self.features)}) != Gaussian count "
                f"({self.geometry.count})"
            )
        if len(self.visibility) != self.geometry.count:
            raise ShapeError("visibility length does not match Gaussian count")
        if np.any(self.visibility < 0) or np.any(self.visibility > 1):
            raise ShapeError("visibility must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.geometry.count

    @property
    def channels(self) -> int:
        return self.features.shape[1]


def _dedupe(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Drop exactly coincident rows, keeping first occurrences in order.

    Returns the unique points and, for every input row, its index into them.
    """
    seen: dict[tuple, int] = {}
    remap = np.empty(len(points), dtype=np.int64)
    keep = []
    for i, p in enumerate(points):
        key = tuple(p.tolist())
        if key not in seen:
            seen[key] = len(keep)
            keep.append(i)
        remap[i] = seen[key]
    return points[keep], remap


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    # valid for surfaces that are star-shaped about the origin
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    inward = np.einsum("ij,ij->i", normals, tri.mean(axis=1)) < 0
    faces = faces.copy()
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def ellipsoid_resolution(target_count: int) -> tuple[int, int]:
    """Ring and meridian counts whose grid size is closest to ``target_count``.

    A grid with ``n`` latitude bands and ``2n`` meridians holds
    ``(n - 1) * 2n + 2`` distinct points.
    """
    best = None
    for n in range(2, 2 + int(math.sqrt(target_count)) + 2):
        k = (n - 1) * 2 * n + 2
        key = (abs(k - target_count), n)
        if best is None or key < best[0]:
            best = (key, n)
    n = best[1]
    return n, 2 * n


def _ellipsoid(a, b, c, target_count):
    n_lat, n_lon = ellipsoid_resolution(target_count)
    theta = np.arange(1, n_lat) * (math.pi / n_lat)
    phi = np.arange(n_lon) * (2.0 * math.pi / n_lon)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack(
        [a * np.sin(th) * np.cos(ph), b * np.cos(th), c * np.sin(th) * np.sin(ph)],
        axis=-1,
    ).reshape(-1, 3)
    top = np.array([[0.0, b, 0.0]])
    bottom = np.array([[0.0, -b, 0.0]])
    raw = np.concatenate([top, ring, bottom])
    points, remap = _dedupe(raw)

    def ring_idx(r, j):
        return 1 + r * n_lon + (j % n_lon)

    last = len(raw) - 1
    faces = []
    for j in range(n_lon):
        faces.append((0, ring_idx(0, j + 1), ring_idx(0, j)))
        faces.append((last, ring_idx(n_lat - 2, j), ring_idx(n_lat - 2, j + 1)))
    for r in range(n_lat - 2):
        for j in range(n_lon):
            p00, p01 = ring_idx(r, j), ring_idx(r, j + 1)
            p10, p11 = ring_idx(r + 1, j), ring_idx(r + 1, j + 1)
            faces.append((p00, p01, p11))
            faces.append((p00, p11, p10))
    faces = remap[np.array(faces, dtype=np.int64)]
    return points, _orient_outward(points, faces)


def cuboid_resolution(target_count: int) -> int:
    """Points per edge whose grid size ``6n^2 - 12n + 8`` is closest to target."""
    best = None
    for n in range(2, 3 + int(math.sqrt(target_count))):
        k = 6 * n * n - 12 * n + 8
        key = (abs(k - target_count), n)
        if best is None or key < best[0]:
            best = (key, n)
    return best[1]


def _cuboid(a, b, c, target_count):
    n = cuboid_resolution(target_count)
    half = np.array([a, b, c], dtype=np.float64)
    ticks = [np.linspace(-h, h, n) for h in half]
    raw = []
    quads = []
    for axis in range(3):
        u_axis, v_axis = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            base = len(raw)
            for iu in range(n):
                for iv in range(n):
                    p = [0.0, 0.0, 0.0]
                    p[axis] = sign * half[axis]
                    p[u_axis] = ticks[u_axis][iu]
                    p[v_axis] = ticks[v_axis][iv]
                    raw.append(p)
            for iu in range(n - 1):
                for iv in range(n - 1):
                    p00 = base + iu * n + iv
                    quads.append((p00, p00 + 1, p00 + n + 1, p00 + n))
    points, remap = _dedupe(np.array(raw, dtype=np.float64))
    faces = []
    for q in quads:
        faces.append((q[0], q[1], q[2]))
        faces.append((q[0], q[2], q[3]))
    faces = remap[np.array(faces, dtype=np.int64)]
    return points, _orient_outward(points, faces)


def build_volume(shape: ShapeSpec, target_count: int = DEFAULT_TARGET_COUNT) -> NovGeometry:
    """Place Gaussian centres evenly on the surface described by ``shape``.

    Sphere and ellipsoid use a (polar, azimuth) grid with the two poles
    stored once; the cuboid uses a uniform grid on each face with shared
    edge points stored once.  For ``cad`` the mesh vertices are the centres
    and ``target_count`` is ignored.
    """
    if shape.kind not in SHAPE_KINDS:
        raise ShapeError(f"unknown shape kind {shape.kind!r}")
    if shape.kind == "cad":
        if shape.mesh is None:
            raise ShapeError("cad shape requires a mesh")
        return NovGeometry("cad", shape.mesh.vertices.copy(), shape.mesh.faces.copy())
    size = tuple(float(s) for s in shape.size)
    if len(size) != 3 or any(not (s > 0) for s in size):
        raise ShapeError("axis lengths must be positive")
    if shape.kind == "sphere" and not (size[0] == size[1] == size[2]):
        raise ShapeError("sphere requires equal axis lengths")
    if target_count < 6:
        raise ShapeError("target_count must be at least 6")
    if shape.kind == "cuboid":
        centers, faces = _cuboid(*size, target_count)
    else:
        centers, faces = _ellipsoid(*size, target_count)
    return NovGeometry(shape.kind, centers, faces, size)


def attach_features(geometry: NovGeometry, features, class_id: int) -> NeuralObjectVolume:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != geometry.count:
        raise ShapeError(
            f"expected {geometry.count} feature rows, got shape {features.shape}"
        )
    return NeuralObjectVolume(geometry, features, int(class_id), np.ones(geometry.count))


def filter_by_visibility(
    nov: NeuralObjectVolume, threshold: float = DEFAULT_VISIBILITY_THRESHOLD
) -> NeuralObjectVolume:
    """Keep the Gaussians matched in at least ``threshold`` of training images."""
    if not (0.0 <= threshold <= 1.0):
        raise ConceptVolError("threshold must lie in [0, 1]")
    keep = nov.visibility >= threshold
    if not keep.any():
        raise ConceptVolError("empty volume", code="empty-volume")
    geom = nov.geometry
    faces = None
    if geom.faces is not None:
        new_index = np.cumsum(keep) - 1
        alive = keep[geom.faces].all(axis=1)
        faces = new_index[geom.faces[alive]] if alive.any() else None
    new_geom = NovGeometry(geom.kind, geom.centers[keep], faces, geom.size)
    return NeuralObjectVolume(
        new_geom, nov.features[keep], nov.class_id, nov.visibility[keep]
    )


# --------------------------------------------------------------------------
# files: <prefix>.centers.cavt, <prefix>.features.cavt, [<prefix>.faces.cavt],
# <prefix>.txt


def save_volume(nov: NeuralObjectVolume, prefix, extra: dict | None = None) -> None:
    prefix = str(prefix)
    tensorio.write_tensor(prefix + ".centers.cavt", nov.geometry.centers)
    tensorio.write_tensor(prefix + ".features.cavt", nov.features)
    if nov.geometry.faces is not None:
        tensorio.write_tensor(prefix + ".faces.cavt", nov.geometry.faces)
    entries = {
        "kind": nov.geometry.kind,
        "class_id": nov.class_id,
        "size": list(nov.geometry.size),
        "count": nov.count,
        "channels": nov.channels,
        "visibility": [float(v) for v in nov.visibility],
    }
    entries.update(extra or {})
    tensorio.write_manifest(prefix + ".txt", entries)


def load_volume(prefix) -> NeuralObjectVolume:
    prefix = str(prefix)
    meta = tensorio.read_manifest(prefix + ".txt")
    centers = tensorio.read_tensor(prefix + ".centers.cavt").astype(np.float64)
    features = tensorio.read_tensor(prefix + ".features.cavt").astype(np.float64)
    faces = None
    try:
        faces = tensorio.read_tensor(prefix + ".faces.cavt").astype(np.int64)
    except FileNotFoundError:
        pass
    size = tuple(tensorio.parse_floats(meta.get("size", "1,1,1")))
    geom = NovGeometry(meta["kind"], centers.reshape(-1, 3), faces, size)
    return NeuralObjectVolume(
        geom,
        features.reshape(len(centers), -1),
        int(meta["class_id"]),
        tensorio.parse_floats(meta["visibility"]),
    )

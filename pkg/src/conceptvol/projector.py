"""Pinhole cameras, a one-face-per-pixel rasterizer, and face attributions.

World convention: y is up.  CAD meshes stored z-up are brought into this
frame with :func:`cad_to_camera_axes`.  Image coordinates have u to the
right and v downwards; pixel ``(row, col)`` is sampled at its centre
``(col + 0.5, row + 0.5)``.  Canvas sizes are given as ``(height, width)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorio
from .errors import ConceptVolError, ShapeError
from .tensorio import Mesh

DEFAULT_CANVAS = (640, 800)
DEFAULT_BASE_FOCAL = 3000.0
DEFAULT_DISTANCE = 15.0
DEFAULT_ELEVATION = math.radians(30.0)
DEFAULT_AZIMUTH = math.radians(-40.0)
# depths this close (relative) count as a tie; the earlier face keeps the pixel
DEPTH_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Pose:
    azimuth: float = DEFAULT_AZIMUTH
    elevation: float = DEFAULT_ELEVATION
    theta: float = 0.0  # in-plane roll
    distance: float = DEFAULT_DISTANCE

    def __post_init__(self):
        if not self.distance > 0:
            raise ConceptVolError("camera distance must be positive", code="pose")


@dataclass
class Camera:
    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int

    def to_view(self, points) -> np.ndarray:
        """World points to (x right, y up, z along the viewing direction)."""
        d = np.asarray(points, dtype=np.float64) - self.position
        return np.stack([d @ self.right, d @ self.up, d @ self.forward], axis=-1)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(u, v)`` and view depth of world points."""
        view = self.to_view(points)
        z = view[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.cx + self.fx * view[..., 0] / z
            v = self.cy - self.fy * view[..., 1] / z
        return np.stack([u, v], axis=-1), z


def cad_to_camera_axes(mesh: Mesh) -> Mesh:
    """Re-express a z-up CAD mesh in the y-up frame: (x, y, z) -> (x, z, -y)."""
    v = mesh.vertices
    return Mesh(np.stack([v[:, 0], v[:, 2], -v[:, 1]], axis=1), mesh.faces.copy())


def camera_axes_to_cad(mesh: Mesh) -> Mesh:
    v = mesh.vertices
    return Mesh(np.stack([v[:, 0], -v[:, 2], v[:, 1]], axis=1), mesh.faces.copy())


def camera_from_pose(
    pose: Pose,
    canvas: tuple[int, int] = DEFAULT_CANVAS,
    base_focal: float = DEFAULT_BASE_FOCAL,
    base_canvas: tuple[int, int] = DEFAULT_CANVAS,
) -> Camera:
    """Camera on a sphere around the origin, looking at it.

    ``base_focal`` is the focal length (pixels) at ``base_canvas``; the
    focal lengths scale with the canvas so the field of view is kept.
    Positive ``theta`` rolls the image clockwise.
    """
    az, el, d = pose.azimuth, pose.elevation, pose.distance
    position = d * np.array(
        [math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)]
    )
    forward = -position / d
    # horizontal right vector; stays defined when looking straight down
    right = np.array([math.cos(az), 0.0, -math.sin(az)])
    up = np.cross(right, forward)
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    right, up = ct * right + st * up, -st * right + ct * up
    height, width = int(canvas[0]), int(canvas[1])
    fx = base_focal * width / base_canvas[1]
    fy = base_focal * height / base_canvas[0]
    return Camera(position, right, up, forward, fx, fy, width / 2.0, height / 2.0, height, width)


# --------------------------------------------------------------------------
# rasterization


@dataclass
class PixelFaceMap:
    face: np.ndarray  # (H, W) int, -1 where no face covers the pixel
    bary: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), inf where uncovered

    @property
    def shape(self) -> tuple[int, int]:
        return self.face.shape

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _owns(e, dx, dy):
    # top-left fill rule for edges with the interior on their positive side
    top_left = (dy < 0) or (dy == 0 and dx > 0)
    return (e > 0) | ((e == 0) & top_left)


def rasterize(mesh: Mesh, camera: Camera, cull_backfaces: bool = True) -> PixelFaceMap:
    """Nearest face per pixel centre under perspective projection.

    Faces with any vertex at or behind the camera plane are dropped, as are
    back-facing ones (clockwise on screen) when ``cull_backfaces`` is set.
    Barycentric coordinates are taken in screen space; depth is the view
    depth interpolated in 1/z.  On depth ties (within ``DEPTH_TIE_RTOL``,
    which absorbs rounding between duplicated faces) the lower face index
    wins.
    """
    h, w = camera.height, camera.width
    face_map = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    depth = np.full((h, w), np.inf)
    uv, z = camera.project(mesh.vertices)
    for fi, (i0, i1, i2) in enumerate(mesh.faces):
        zs = z[[i0, i1, i2]]
        if np.any(zs <= 1e-9):
            continue
        (x0, y0), (x1, y1), (x2, y2) = uv[i0], uv[i1], uv[i2]
        # in y-down pixels a viewer-facing (counter-clockwise) face has area < 0
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0:
            continue
        if area > 0:
            if cull_backfaces:
                continue
            verts = [(x0, y0, 0), (x1, y1, 1), (x2, y2, 2)]
        else:
            # reorder so the interior is the positive side of every edge
            verts = [(x0, y0, 0), (x2, y2, 2), (x1, y1, 1)]
            area = -area
        xs = [v[0] for v in verts]
        ys = [v[1] for v in verts]
        c0 = max(int(math.floor(min(xs) - 0.5)), 0)
        c1 = min(int(math.ceil(max(xs) - 0.5)), w - 1)
        r0 = max(int(math.floor(min(ys) - 0.5)), 0)
        r1 = min(int(math.ceil(max(ys) - 0.5)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
        inside = np.ones(px.shape, dtype=bool)
        weights = [None, None, None]
        for k in range(3):
            a, b = verts[(k + 1) % 3], verts[(k + 2) % 3]
            e = _edge(a[0], a[1], b[0], b[1], px, py)
            inside &= _owns(e, b[0] - a[0], b[1] - a[1])
            weights[verts[k][2]] = e / area
        if not inside.any():
            continue
        b = np.stack(weights, axis=-1)
        inv_z = b @ (1.0 / zs)
        d = 1.0 / inv_z
        win = d < depth[r0 : r1 + 1, c0 : c1 + 1] * (1.0 - DEPTH_TIE_RTOL)
        sel = inside & win
        block = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        face_map[block][sel] = fi
        depth[block][sel] = d[sel]
        bary[block][sel] = b[sel]
    return PixelFaceMap(face_map, bary, depth)


# --------------------------------------------------------------------------
# face attributions


@dataclass
class FaceAttribution:
    faces: np.ndarray  # (F,) mass per face
    uncovered: float = 0.0

    @property
    def total(self) -> float:
        return float(self.faces.sum() + self.uncovered)

    def with_background(self) -> np.ndarray:
        """Face masses followed by the uncovered mass as one extra slot."""
        return np.append(self.faces, self.uncovered)


def resize_attribution(attr, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize (pixel-centre aligned) that keeps the total mass."""
    attr = np.asarray(attr, dtype=np.float64)
    h, w = attr.shape
    H, W = int(shape[0]), int(shape[1])
    if (h, w) == (H, W):
        return attr.copy()
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = attr[y0][:, x0] * (1 - fx) + attr[y0][:, x1] * fx
    bottom = attr[y1][:, x0] * (1 - fx) + attr[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    mass, new_mass = attr.sum(), out.sum()
    if mass != 0 and new_mass == 0:
        # bilinear samples missed all mass; fall back to nearest cells
        out = attr[(np.arange(H) * h) // H][:, (np.arange(W) * w) // W]
        new_mass = out.sum()
    if new_mass != 0:
        out *= mass / new_mass
    return out


def project_attribution(attr, pfm: PixelFaceMap, n_faces: int) -> FaceAttribution:
    """Add every covered pixel's value to its face; the rest is uncovered mass."""
    attr = np.asarray(attr, dtype=np.float64)
    if attr.shape != pfm.shape:
        raise ShapeError(f"attribution {attr.shape} does not match raster {pfm.shape}")
    covered = pfm.covered
    faces = np.bincount(pfm.face[covered], weights=attr[covered], minlength=n_faces)
    if len(faces) > n_faces:
        raise ShapeError("raster references more faces than given")
    return FaceAttribution(faces, float(attr[~covered].sum()))


def minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi > lo:
        return (v - lo) / (hi - lo)
    # constant input: zeros stay zero, anything else saturates
    return np.where(v != 0, 1.0, 0.0)


def render_face_attribution(face_attr, pfm: PixelFaceMap) -> np.ndarray:
    """Per-face values painted onto the raster, min-max normalised to [0, 1].

    A face-constant texture interpolates to the same constant everywhere on
    the face, so each pixel takes its face's value; background is zero.
    """
    faces = np.asarray(getattr(face_attr, "faces", face_attr), dtype=np.float64)
    values = np.where(pfm.covered, faces[np.maximum(pfm.face, 0)], 0.0)
    if not np.any(values):
        return np.zeros(pfm.shape)
    return minmax(values)


def aggregate_face_attributions(items) -> FaceAttribution:
    """Sum face attributions and min-max normalise the face values.

    The returned uncovered mass is the raw sum of the inputs' uncovered mass.
    """
    items = list(items)
    if not items:
        raise ConceptVolError("nothing to aggregate", code="empty")
    n = len(items[0].faces)
    if any(len(it.faces) != n for it in items):
        raise ShapeError("face counts differ")
    total = np.zeros(n)
    uncovered = 0.0
    for it in items:
        total += it.faces
        uncovered += it.uncovered
    return FaceAttribution(minmax(total), uncovered)


def save_face_attribution(fa: FaceAttribution, prefix, extra: dict | None = None):
    prefix = str(prefix)
    tensorio.write_tensor(prefix + ".faces.cavt", fa.faces)
    entries = {"faces": len(fa.faces), "uncovered": float(fa.uncovered)}
    entries.update(extra or {})
    tensorio.write_manifest(prefix + ".txt", entries)


def load_face_attribution(prefix) -> FaceAttribution:
    prefix = str(prefix)
    meta = tensorio.read_manifest(prefix + ".txt")
    faces = tensorio.read_tensor(prefix + ".faces.cavt").astype(np.float64).reshape(-1)
    return FaceAttribution(faces, float(meta.get("uncovered", 0.0)))

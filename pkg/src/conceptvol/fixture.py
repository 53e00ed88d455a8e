"""Synthetic dataset standing in for trained volumes and backbone features.

Each class owns an ellipsoid volume whose surface is split into four parts;
every part has its own prototype feature, so Gaussian features are coherent
per part and distinct across classes.  Images are feature maps: the class
mesh is rasterized under a random pose and each covered pixel receives the
barycentric blend of its face's vertex features plus noise.  Background
pixels get low-norm noise.

Layout under the output directory::

    manifest.json               classes, images, poses, paths, run config
    class<y>/volume.*           volume (centres, features, faces, visibility)
    class<y>/mesh.obj           the same surface, stored z-up
    images/<id>.features.cavt   (H, W, C) feature map
    images/<id>.occluded.cavt   same map with a 40% block zeroed
    images/<id>.mask.pgm        object mask (0/1)
    images/<id>.parts.pgm       part labels (0 background, 1..4 parts)
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import projector, tensorio, volumes
from .errors import ConceptVolError

N_PARTS = 4
FEATURE_DIM = 16
OCCLUSION_FRACTION = 0.4


@dataclass
class FixtureOptions:
    n_classes: int = 3
    images_per_class: int = 10
    height: int = 32
    width: int = 40
    target_count: int = 200
    noise: float = 0.05
    feature_noise: float = 0.1
    background: float = 0.05


def part_labels(centers: np.ndarray) -> np.ndarray:
    """Quadrant of each point in the (x, y) plane: 0..3."""
    return 2 * (centers[:, 0] > 0).astype(np.int64) + (centers[:, 1] > 0).astype(np.int64)


def class_axes(class_id: int, rng: np.random.Generator) -> tuple[float, float, float]:
    presets = [(1.6, 0.8, 0.8), (1.1, 1.1, 1.1), (0.8, 1.5, 0.7)]
    if class_id < len(presets):
        return presets[class_id]
    return tuple(float(v) for v in rng.uniform(0.7, 1.6, size=3))


def make_volume(class_id: int, opts: FixtureOptions, rng: np.random.Generator):
    geometry = volumes.build_volume(
        volumes.ShapeSpec.ellipsoid(*class_axes(class_id, rng)), opts.target_count
    )
    prototypes = rng.standard_normal((N_PARTS, FEATURE_DIM))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    parts = part_labels(geometry.centers)
    features = prototypes[parts] + opts.feature_noise * rng.standard_normal(
        (geometry.count, FEATURE_DIM)
    )
    nov = volumes.attach_features(geometry, features, class_id)
    nov.visibility = rng.uniform(0.0, 1.0, size=geometry.count)
    return nov, parts


def random_pose(rng: np.random.Generator) -> projector.Pose:
    return projector.Pose(
        azimuth=float(rng.uniform(-math.pi, math.pi)),
        elevation=float(rng.uniform(math.radians(-10.0), math.radians(60.0))),
        theta=float(rng.uniform(math.radians(-10.0), math.radians(10.0))),
        distance=projector.DEFAULT_DISTANCE,
    )


def render_features(nov, parts, pose, opts: FixtureOptions, rng: np.random.Generator):
    """Feature map, object mask and part labels of one view of a volume."""
    camera = projector.camera_from_pose(pose, canvas=(opts.height, opts.width))
    pfm = projector.rasterize(nov.geometry.mesh(), camera)
    covered = pfm.covered
    features = opts.background * rng.standard_normal((opts.height, opts.width, FEATURE_DIM))
    tri = nov.geometry.faces[pfm.face[covered]]  # (P, 3) vertex ids
    bary = pfm.bary[covered]
    blended = np.einsum("pk,pkc->pc", bary, nov.features[tri])
    features[covered] = blended + opts.noise * rng.standard_normal(blended.shape)
    labels = np.zeros((opts.height, opts.width), dtype=np.int64)
    dominant = tri[np.arange(len(tri)), np.argmax(bary, axis=1)]
    labels[covered] = parts[dominant] + 1
    return features, covered, labels


def occlude(features: np.ndarray, rng: np.random.Generator, fraction=OCCLUSION_FRACTION):
    """Zero a full-height block of columns covering ``fraction`` of the pixels."""
    h, w = features.shape[:2]
    width = int(round(fraction * w))
    start = int(rng.integers(0, w - width + 1))
    out = features.copy()
    out[:, start : start + width] = 0.0
    return out


def generate(out_dir, seed: int, opts: FixtureOptions, config: dict | None = None) -> dict:
    """Write a fixture tree and return its manifest."""
    if opts.n_classes < 2:
        raise ConceptVolError("a fixture needs at least 2 classes", code="fixture")
    if opts.images_per_class < 1:
        raise ConceptVolError("a fixture needs at least 1 image per class", code="fixture")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes, images = [], []
    vols = []
    for y in range(opts.n_classes):
        nov, parts = make_volume(y, opts, rng)
        vols.append((nov, parts))
        cdir = out / f"class{y}"
        cdir.mkdir(exist_ok=True)
        volumes.save_volume(nov, cdir / "volume", {"parts": parts.tolist()})
        tensorio.write_mesh_obj(cdir / "mesh.obj", projector.camera_axes_to_cad(nov.geometry.mesh()))
        classes.append(
            {"class": y, "volume": f"class{y}/volume", "mesh": f"class{y}/mesh.obj",
             "axes": list(nov.geometry.size), "gaussians": nov.count}
        )
    for y, (nov, parts) in enumerate(vols):
        for i in range(opts.images_per_class):
            image_id = f"c{y}_{i:03d}"
            pose = random_pose(rng)
            feats, mask, labels = render_features(nov, parts, pose, opts, rng)
            occluded = occlude(feats, rng)
            base = f"images/{image_id}"
            tensorio.write_tensor(out / f"{base}.features.cavt", feats)
            tensorio.write_tensor(out / f"{base}.occluded.cavt", occluded)
            tensorio.write_pgm(out / f"{base}.mask.pgm", mask.astype(np.uint8))
            tensorio.write_pgm(out / f"{base}.parts.pgm", labels)
            images.append({
                "id": image_id,
                "class": y,
                "pose": {"azimuth": pose.azimuth, "elevation": pose.elevation,
                         "theta": pose.theta, "distance": pose.distance},
                "features": f"{base}.features.cavt",
                "occluded": f"{base}.occluded.cavt",
                "mask": f"{base}.mask.pgm",
                "parts": f"{base}.parts.pgm",
            })
    manifest = {
        "seed": seed,
        "n_classes": opts.n_classes,
        "images_per_class": opts.images_per_class,
        "canvas": [opts.height, opts.width],
        "feature_dim": FEATURE_DIM,
        "n_parts": N_PARTS,
        "noise": opts.noise,
        "occlusion_fraction": OCCLUSION_FRACTION,
        "classes": classes,
        "images": images,
        "config": config or {},
    }
    write_json(out / "manifest.json", manifest)
    return manifest


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_manifest(fixture_dir) -> dict:
    path = Path(fixture_dir) / "manifest.json"
    if not path.is_file():
        raise ConceptVolError(f"no fixture manifest at {path}", code="missing")
    with open(path) as fh:
        return json.load(fh)


def pose_from_record(record: dict) -> projector.Pose:
    p = record["pose"]
    return projector.Pose(p["azimuth"], p["elevation"], p["theta"], p["distance"])


def tree_checksum(root) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    digest = hashlib.sha256()
    paths = sorted(
        os.path.relpath(os.path.join(d, f), root) for d, _, files in os.walk(root) for f in files
    )
    for rel in paths:
        digest.update(rel.replace(os.sep, "/").encode())
        digest.update(b"\0")
        digest.update((root / rel).read_bytes())
    return digest.hexdigest()

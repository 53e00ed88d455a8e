"""Command-line entry point: ``conceptvol <subcommand> [options]``.

Exit codes: 0 on success, 1 on a domain or I/O error (one line on stderr,
``error code=<code> message=<json string>``), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone, concepts, fixture, matching, metrics, projector, relevance, tensorio, volumes
from .config import RunConfig, default_seed
from .errors import ConceptVolError

CONSERVATION_TOLERANCE = 1e-4


# --------------------------------------------------------------------------
# shared helpers


def _config(args) -> RunConfig:
    """Flags beat the config file; the seed falls back to the environment."""
    entries = tensorio.read_manifest(args.config) if args.config else {}
    seed = args.seed
    if seed is None and "seed" not in entries:
        seed = default_seed()
    cfg = RunConfig.from_mapping(entries)
    return cfg.with_overrides(
        seed=seed,
        n_concepts=getattr(args, "d", None),
        visibility=args.visibility,
        epsilon=args.epsilon,
        tau=args.tau,
        quantile=args.quantile,
        temperature=args.temperature,
    )


def _emit(payload: dict, out, fmt: str) -> None:
    if fmt == "json":
        text = json.dumps(payload, sort_keys=True, indent=1) + "\n"
    else:
        text = _as_text(payload)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _as_text(payload: dict) -> str:
    lines = []
    for key in sorted(payload):
        value = payload[key]
        if key == "config":
            lines += [f"config {k}={v!r}" for k, v in sorted(value.items())]
        elif isinstance(value, list):
            for rec in value:
                if isinstance(rec, dict):
                    fields = " ".join(f"{k}={_scalar(rec[k])}" for k in sorted(rec))
                    lines.append(f"{key} {fields}")
                else:
                    lines.append(f"{key} {_scalar(rec)}")
        else:
            lines.append(f"{key}={_scalar(value)}")
    return "\n".join(lines) + "\n"


def _scalar(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_scalar(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConceptVolError(f"missing file {path}", code="missing")
    with open(path) as fh:
        return json.load(fh)


def _concept_dir(args) -> Path:
    return Path(args.concepts) if args.concepts else Path(args.fixture) / "concepts"


def _load_dictionaries(cdir: Path, n_classes: int):
    return [concepts.load_dictionary(cdir / f"class{y}") for y in range(n_classes)]


def _key_name(key) -> str:
    return f"{key[0]}_{key[1]}"


# --------------------------------------------------------------------------
# subcommands


def cmd_fixture(args, cfg: RunConfig) -> int:
    opts = fixture.FixtureOptions(
        n_classes=args.classes,
        images_per_class=args.images,
        height=args.height,
        width=args.width,
        noise=args.noise,
    )
    fixture.generate(args.out, cfg.seed, opts, config=cfg.as_dict())
    print(f"fixture dir={args.out} checksum={fixture.tree_checksum(args.out)}")
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    if args.volume:
        jobs = [(Path(args.volume), Path(args.out or args.volume + ".concepts"))]
    elif args.fixture:
        manifest = fixture.load_manifest(args.fixture)
        cdir = _concept_dir(args)
        cdir.mkdir(parents=True, exist_ok=True)
        jobs = [(Path(args.fixture) / c["volume"], cdir / f"class{c['class']}") for c in manifest["classes"]]
    else:
        raise ConceptVolError("extract needs --volume or --fixture", code="usage")
    records = []
    for source, target in jobs:
        nov = volumes.filter_by_visibility(volumes.load_volume(source), cfg.visibility)
        d = concepts.extract(args.method, nov.features, cfg.n_concepts, cfg.seed, nov.class_id)
        extra = {"fdd": concepts.fdd(nov.features, d.reconstruct()), "gaussians": nov.count}
        extra.update(cfg.embedded())
        concepts.save_dictionary(d, target, nov.features, extra)
        records.append({
            "class": nov.class_id,
            "method": d.method,
            "concepts": d.size,
            "gaussians": nov.count,
            "sparsity": concepts.sparsity(d.assignment),
            "fdd": extra["fdd"],
            "output": str(target),
        })
    _emit({"config": cfg.as_dict(), "dictionary": records}, args.report, args.format)
    return 0


def _classify_records(manifest, root: Path, dicts, cfg: RunConfig, occluded: bool):
    key = "occluded" if occluded else "features"
    records = []
    for im in manifest["images"]:
        feats = tensorio.read_tensor(root / im[key])
        result = matching.match_concepts(feats, dicts, temperature=cfg.temperature)
        records.append({
            "id": im["id"],
            "label": im["class"],
            "prediction": result.prediction,
            "scores": result.scores.tolist(),
            "confidence": float(result.confidence[result.prediction]),
        })
    return records


def cmd_classify(args, cfg: RunConfig) -> int:
    if args.features:
        if not args.dictionaries:
            raise ConceptVolError("--features needs --dictionaries", code="usage")
        dicts = [concepts.load_dictionary(p) for p in args.dictionaries]
        result = matching.match_concepts(tensorio.read_tensor(args.features), dicts, temperature=cfg.temperature)
        payload = {
            "config": cfg.as_dict(),
            "prediction": result.prediction,
            "scores": result.scores.tolist(),
            "confidence": result.confidence.tolist(),
        }
    elif args.fixture:
        manifest = fixture.load_manifest(args.fixture)
        dicts = _load_dictionaries(_concept_dir(args), manifest["n_classes"])
        records = _classify_records(manifest, Path(args.fixture), dicts, cfg, args.occluded)
        acc = metrics.accuracy([r["prediction"] for r in records], [r["label"] for r in records])
        payload = {"config": cfg.as_dict(), "image": records, "accuracy": acc, "occluded": args.occluded}
    else:
        raise ConceptVolError("classify needs --features or --fixture", code="usage")
    _emit(payload, args.out, args.format)
    return 0


def cmd_attribute(args, cfg: RunConfig) -> int:
    manifest = fixture.load_manifest(args.fixture)
    root = Path(args.fixture)
    dicts = _load_dictionaries(_concept_dir(args), manifest["n_classes"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = [im for im in manifest["images"] if args.image is None or im["id"] in args.image]
    if not images:
        raise ConceptVolError("no matching images", code="missing")
    records = []
    for im in images:
        feats = tensorio.read_tensor(root / im["features"])
        result = matching.match_concepts(feats, dicts, temperature=cfg.temperature)
        target = im["class"] if args.target == "label" else result.prediction
        state, maps = relevance.attribute(
            None, None, result, dicts, target, cfg.epsilon, args.seed_mode, features=feats
        )
        report = relevance.conservation_report(state)
        entries = []
        for key, amap in maps.items():
            rel = f"{im['id']}.{_key_name(key)}.cavt"
            tensorio.write_tensor(out / rel, amap.relevance)
            entries.append({
                "class": key[0],
                "concept": key[1],
                "path": rel,
                "relevance": float(amap.relevance.sum()),
                "present": bool(np.any(amap.relevance > 0)),
            })
        records.append({
            "image": im["id"],
            "label": im["class"],
            "target": target,
            "prediction": result.prediction,
            "total": report.total,
            "drift": report.drift,
            "maps": entries,
        })
    fixture.write_json(out / "index.json", {"config": cfg.as_dict(), "records": records})
    print(f"attribute images={len(records)} out={out}")
    return 0


def _image_table(manifest) -> dict:
    return {im["id"]: im for im in manifest["images"]}


def _class_meshes(manifest, root: Path) -> dict:
    return {
        c["class"]: projector.cad_to_camera_axes(tensorio.read_mesh_obj(root / c["mesh"]))
        for c in manifest["classes"]
    }


def cmd_project(args, cfg: RunConfig) -> int:
    manifest = fixture.load_manifest(args.fixture)
    root = Path(args.fixture)
    meshes = _class_meshes(manifest, root)
    table = _image_table(manifest)
    adir = Path(args.attributions)
    index = _read_json(adir / "index.json")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    worst = 0.0
    for rec in index["records"]:
        im = table[rec["image"]]
        mesh = meshes[im["class"]]
        attrs = {e["path"]: np.maximum(tensorio.read_tensor(adir / e["path"]), 0.0) for e in rec["maps"]}
        canvas = tuple(manifest["canvas"])
        camera = projector.camera_from_pose(fixture.pose_from_record(im), canvas=canvas)
        pfm = projector.rasterize(mesh, camera)
        for e in rec["maps"]:
            attr = projector.resize_attribution(attrs[e["path"]], canvas)
            fa = projector.project_attribution(attr, pfm, mesh.n_faces)
            prefix = f"{rec['image']}.{e['class']}_{e['concept']}"
            projector.save_face_attribution(fa, out / prefix, cfg.embedded())
            mass_in = float(attr.sum())
            worst = max(worst, abs(fa.total - mass_in))
            records.append({
                "image": rec["image"],
                "label": im["class"],
                "class": e["class"],
                "concept": e["concept"],
                "present": e["present"],
                "prefix": prefix,
                "input_mass": mass_in,
                "projected_mass": fa.total,
            })
    fixture.write_json(out / "index.json", {"config": cfg.as_dict(), "records": records})
    print(f"project maps={len(records)} max_mass_error={worst!r} out={out}")
    return 0


def cmd_eval_3dc(args, cfg: RunConfig) -> int:
    report = metrics.MetricReport(config=cfg.as_dict())
    if args.faces:
        fas = [projector.load_face_attribution(p) for p in args.faces]
        res = metrics.three_d_consistency(fas, args.n_images or len(fas), cfg.tau)
        _record_3dc(report, {"class": None, "concept": None}, res)
    elif args.projections:
        index = _read_json(Path(args.projections) / "index.json")
        manifest = fixture.load_manifest(args.fixture) if args.fixture else None
        n_images = {}
        if manifest:
            for im in manifest["images"]:
                n_images[im["class"]] = n_images.get(im["class"], 0) + 1
        groups: dict = {}
        for r in index["records"]:
            # a concept of class y is scored on images of class y
            if r["class"] != r["label"] or not r["present"]:
                continue
            groups.setdefault((r["class"], r["concept"]), []).append(r["prefix"])
        for (y, h), prefixes in sorted(groups.items()):
            fas = [projector.load_face_attribution(Path(args.projections) / p) for p in sorted(prefixes)]
            res = metrics.three_d_consistency(fas, n_images.get(y, len(fas)), cfg.tau)
            _record_3dc(report, {"class": y, "concept": h}, res)
    else:
        raise ConceptVolError("eval-3dc needs --faces or --projections", code="usage")
    _emit_report(report, args)
    return 0


def _record_3dc(report, ident: dict, res: metrics.ConsistencyResult) -> None:
    rec = dict(ident, n_present=res.n_present, n_images=res.n_images)
    if res.score is None:
        report.excluded.append(dict(rec, reason=res.excluded))
    else:
        report.consistency.append(dict(rec, score=res.score))


def _emit_report(report: metrics.MetricReport, args) -> None:
    text = report.to_json() + "\n" if args.format == "json" else report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _fixture_maps(args):
    manifest = fixture.load_manifest(args.fixture)
    adir = Path(args.attributions)
    index = _read_json(adir / "index.json")
    table = _image_table(manifest)
    for rec in index["records"]:
        yield table[rec["image"]], rec, adir


def cmd_eval_loc(args, cfg: RunConfig) -> int:
    report = metrics.MetricReport(config=cfg.as_dict())
    q = cfg.quantile if args.threshold else None
    if args.attr:
        attr = tensorio.read_tensor(args.attr)
        mask = tensorio.read_pgm(args.mask) > 0
        score = metrics.spatial_localisation(attr, mask, threshold_quantile=q)
        report.localisation.append({"attr": args.attr, "mask": args.mask, "score": score})
    elif args.fixture and args.attributions:
        root = Path(args.fixture)
        for im, rec, adir in _fixture_maps(args):
            parts = tensorio.read_pgm(root / im["parts"])
            for e in rec["maps"]:
                if e["class"] != im["class"] or not e["present"]:
                    continue
                attr = tensorio.read_tensor(adir / e["path"])
                for part in range(1, int(parts.max()) + 1):
                    score = metrics.spatial_localisation(attr, parts == part, threshold_quantile=q)
                    if score is None:
                        continue
                    report.localisation.append({
                        "image": im["id"], "class": e["class"], "concept": e["concept"],
                        "part": part, "score": score,
                    })
    else:
        raise ConceptVolError("eval-loc needs --attr/--mask or --fixture/--attributions", code="usage")
    _emit_report(report, args)
    return 0


def cmd_eval_cov(args, cfg: RunConfig) -> int:
    report = metrics.MetricReport(config=cfg.as_dict())
    q = cfg.quantile if args.threshold else None
    if args.attr:
        attrs = [tensorio.read_tensor(p) for p in args.attr]
        mask = tensorio.read_pgm(args.mask) > 0
        score = metrics.object_coverage(attrs, mask, threshold_quantile=q)
        report.coverage.append({"mask": args.mask, "score": score})
    elif args.fixture and args.attributions:
        root = Path(args.fixture)
        for im, rec, adir in _fixture_maps(args):
            mask = tensorio.read_pgm(root / im["mask"]) > 0
            attrs = [tensorio.read_tensor(adir / e["path"]) for e in rec["maps"]]
            score = metrics.object_coverage(attrs, mask, threshold_quantile=q)
            report.coverage.append({"image": im["id"], "score": score})
    else:
        raise ConceptVolError("eval-cov needs --attr/--mask or --fixture/--attributions", code="usage")
    _emit_report(report, args)
    return 0


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_eval_acc(args, cfg: RunConfig) -> int:
    report = metrics.MetricReport(config=cfg.as_dict())
    if args.predictions:
        data = _read_json(args.predictions)
        preds = [r["prediction"] for r in data["image"]]
        labels = [r["label"] for r in data["image"]]
        name = str(args.predictions)
    elif args.pred is not None and args.labels is not None:
        preds, labels, name = _int_list(args.pred), _int_list(args.labels), "inline"
    else:
        raise ConceptVolError("eval-acc needs --predictions or --pred/--labels", code="usage")
    report.accuracy.append({"dataset": name, "n": len(preds), "accuracy": metrics.accuracy(preds, labels)})
    _emit_report(report, args)
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    if args.attr:
        attr = np.maximum(tensorio.read_tensor(args.attr).astype(np.float64), 0.0)
        image = projector.minmax(attr) if np.any(attr) else np.zeros_like(attr)
    elif args.faces:
        if not (args.mesh and args.pose):
            raise ConceptVolError("--faces needs --mesh and --pose", code="usage")
        mesh = projector.cad_to_camera_axes(tensorio.read_mesh_obj(args.mesh))
        vals = [float(t) for t in args.pose.split(",")]
        if len(vals) != 4:
            raise ConceptVolError("--pose takes azimuth,elevation,theta,distance (radians)", code="usage")
        camera = projector.camera_from_pose(projector.Pose(*vals), canvas=(args.height, args.width))
        pfm = projector.rasterize(mesh, camera)
        fa = projector.load_face_attribution(args.faces)
        if len(fa.faces) != mesh.n_faces:
            raise ConceptVolError("face attribution does not match the mesh", code="shape")
        image = projector.render_face_attribution(fa, pfm)
    else:
        raise ConceptVolError("render needs --attr or --faces", code="usage")
    tensorio.write_heatmap(image, args.colormap, args.out)
    tensorio.write_manifest(str(args.out) + ".txt", dict(colormap=args.colormap, **cfg.embedded()))
    print(f"render out={args.out} size={image.shape[1]}x{image.shape[0]}")
    return 0


def cmd_check_conservation(args, cfg: RunConfig) -> int:
    spec = backbone.load_network(args.network) if args.network else backbone.reference_network()
    rng = np.random.default_rng(cfg.seed)
    size = args.size
    if size % spec.input_multiple:
        raise ConceptVolError(f"input size must be a multiple of {spec.input_multiple}", code="shape")
    start = time.perf_counter()
    worst = 0.0
    totals = []
    for _ in range(args.inputs):
        x = rng.standard_normal((size, size, spec.in_channels))
        trace = backbone.forward(spec, x)
        dicts = [rng.standard_normal((cfg.n_concepts, spec.out_channels)) for _ in range(args.classes)]
        result = matching.match_concepts(trace.features, dicts, temperature=cfg.temperature)
        state, _ = relevance.attribute(
            trace, spec, result, dicts, eps=cfg.epsilon, conserve=not args.vanilla
        )
        report = relevance.conservation_report(state)
        worst = max(worst, report.drift)
        totals.append(report.total)
    elapsed = time.perf_counter() - start
    ok = worst < args.tolerance
    payload = {
        "config": cfg.as_dict(),
        "network_checksum": spec.weights_checksum(),
        "inputs": args.inputs,
        "vanilla": args.vanilla,
        "max_drift": worst,
        "tolerance": args.tolerance,
        "status": "pass" if ok else "fail",
    }
    if args.timing:
        payload["seconds"] = elapsed
    _emit(payload, args.out, args.format)
    if not ok:
        raise ConceptVolError(f"relevance drift {worst!r} exceeds {args.tolerance!r}", code="conservation")
    return 0


# --------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $CONCEPTVOL_SEED or 0)")
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--visibility", type=float, help="visibility threshold for Gaussians")
    p.add_argument("--epsilon", type=float, help="LRP stabiliser")
    p.add_argument("--tau", type=float, help="presence threshold in percent")
    p.add_argument("--quantile", type=float, help="quantile for importance and thresholding")
    p.add_argument("--temperature", type=float, help="softmax temperature")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptvol", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_common()]

    p = sub.add_parser("fixture", parents=common, help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--images", type=int, default=10, help="images per class")
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("extract", parents=common, help="extract concept dictionaries")
    p.add_argument("--fixture")
    p.add_argument("--volume", help="volume prefix")
    p.add_argument("--concepts", help="output directory for a fixture")
    p.add_argument("--out", help="dictionary prefix for --volume")
    p.add_argument("--method", choices=sorted(concepts.EXTRACTORS), default="kmeans")
    p.add_argument("--d", type=int, help="concepts per class")
    p.add_argument("--report", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("classify", parents=common, help="classify feature maps")
    p.add_argument("--fixture")
    p.add_argument("--concepts")
    p.add_argument("--occluded", action="store_true")
    p.add_argument("--features")
    p.add_argument("--dictionaries", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("attribute", parents=common, help="per-concept relevance maps")
    p.add_argument("--fixture", required=True)
    p.add_argument("--concepts")
    p.add_argument("--out", required=True)
    p.add_argument("--image", nargs="+")
    p.add_argument("--target", choices=("label", "prediction"), default="label")
    p.add_argument("--seed-mode", choices=relevance.SEED_MODES, default="score")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("project", parents=common, help="project relevance maps onto class meshes")
    p.add_argument("--fixture", required=True)
    p.add_argument("--attributions", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("eval-3dc", parents=common, help="3D consistency")
    p.add_argument("--projections")
    p.add_argument("--fixture")
    p.add_argument("--faces", nargs="+", help="face attribution prefixes of one concept")
    p.add_argument("--n-images", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_3dc)

    for name, func, helptext in (
        ("eval-loc", cmd_eval_loc, "part localisation"),
        ("eval-cov", cmd_eval_cov, "object coverage"),
    ):
        p = sub.add_parser(name, parents=common, help=helptext)
        p.add_argument("--fixture")
        p.add_argument("--attributions")
        p.add_argument("--attr", nargs="+" if name == "eval-cov" else None)
        p.add_argument("--mask")
        p.add_argument("--threshold", action="store_true", help="keep only values above the quantile")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-acc", parents=common, help="classification accuracy")
    p.add_argument("--predictions")
    p.add_argument("--pred", help="comma-separated predicted labels")
    p.add_argument("--labels", help="comma-separated true labels")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_acc)

    p = sub.add_parser("render", parents=common, help="write a heatmap image")
    p.add_argument("--attr", help="2-D attribution tensor")
    p.add_argument("--faces", help="face attribution prefix")
    p.add_argument("--mesh")
    p.add_argument("--pose")
    p.add_argument("--height", type=int, default=projector.DEFAULT_CANVAS[0])
    p.add_argument("--width", type=int, default=projector.DEFAULT_CANVAS[1])
    p.add_argument("--colormap", choices=sorted(tensorio.COLORMAPS), default="jet")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("check-conservation", parents=common, help="relevance conservation on the toy network")
    p.add_argument("--network")
    p.add_argument("--inputs", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--vanilla", action="store_true", help="naive pass without the conservation fixes")
    p.add_argument("--tolerance", type=float, default=CONSERVATION_TOLERANCE)
    p.add_argument("--timing", action="store_true", help="include wall time (breaks byte determinism)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_check_conservation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except ConceptVolError as exc:
        print(f"error code={exc.code} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        code = "io" if isinstance(exc, OSError) else "format"
        print(f"error code={code} message={json.dumps(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

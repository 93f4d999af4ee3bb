"""Command-line front end.

Every command reads an optional JSON config (``--config``) with
``--set section.key=value`` overrides and writes UTF-8 JSON.  Exit codes:
0 success, 1 validation or parse error, 2 I/O error, 3 numerical failure;
errors are reported as one JSON object on standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FaceGazeError, ParseError, ValidationError
from .fitting import FitResult, centroid_init, fit, landmark_init
from .model import load_model, synthesize
from .pipeline import (
    EYE_KEYS,
    EYES,
    FrameOutcome,
    PipelineConfig,
    build_report,
    dumps_report,
    frontal_features,
    frontal_image,
    load_config,
    load_suite,
    predict_gaze,
    run_pipeline,
    score,
    training_sets,
    write_suite,
)
from .pointcloud import CameraIntrinsics, PointSet, read_ply, write_ply
from .regress import TrainingSet, select_sparse_indices
from .render import normalize_pose, read_pgm, write_pgm

logger = logging.getLogger("facegaze")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _read_json(path) -> object:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from None


def _need(value, flag: str):
    if value is None:
        raise ValidationError(f"{flag} is required (or set it in the config 'paths' section)")
    return value


def _emit(args, doc: dict, name: str) -> None:
    """Write ``doc`` to ``<out>/<name>`` or, without ``--out``, to standard output."""
    text = dumps_report(doc)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8")
        if not args.quiet:
            print(out / name)
    else:
        sys.stdout.write(text)


def _vector(text, size, flag):
    try:
        v = json.loads(text)
    except json.JSONDecodeError:
        v = [float(p) for p in text.split(",")]
    v = np.asarray(v, dtype=float).ravel()
    if v.size != size or not np.all(np.isfinite(v)):
        raise ValidationError(f"{flag} needs {size} finite numbers")
    return v


def _camera(args) -> CameraIntrinsics:
    if args.intrinsics:
        return CameraIntrinsics(**_read_json(args.intrinsics))
    return CameraIntrinsics.vga()


def _load_fit(path) -> FitResult:
    doc = _read_json(path)
    try:
        return FitResult.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"not a fit result ({exc})", path=path) from None


# --- commands ------------------------------------------------------------------------

def cmd_gen(args, config: PipelineConfig) -> int:
    out = _need(args.out or config.paths.suite, "--out")
    manifest = write_suite(out, config)
    if not args.quiet:
        print(Path(out) / "manifest.json")
    logger.info("wrote %d frames", len(manifest["frames"]))
    return EXIT_OK


def cmd_fit(args, config: PipelineConfig) -> int:
    model = load_model(_need(args.model or config.paths.model, "--model"))
    scan = read_ply(_need(args.scan or config.paths.scan, "--scan"))
    lm_path = args.landmarks or config.paths.landmarks
    if args.init == "landmarks":
        init = landmark_init(model, _read_json(_need(lm_path, "--landmarks")))
    else:
        init = centroid_init(model, scan, config.fit)
    result = fit(model, scan, init, config.fit)
    doc = result.to_dict()
    doc["schema_version"] = "1.0"
    _emit(args, doc, "fit.json")
    if args.mesh:
        shape = synthesize(model, result.coeffs).transformed(result.R, result.t)
        write_ply(PointSet(shape.vertices), args.mesh, model.triangles)
    return EXIT_OK


def cmd_normalize(args, config: PipelineConfig) -> int:
    model = load_model(_need(args.model or config.paths.model, "--model"))
    result = _load_fit(_need(args.fit or config.paths.fit, "--fit"))
    image = read_pgm(_need(args.image or config.paths.image, "--image"))
    frontal, _ = frontal_image(model, result, image, _camera(args), config.render)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(frontal, out / "canonical.pgm")
    if not args.quiet:
        print(out / "canonical.pgm")
    return EXIT_OK


def cmd_features(args, config: PipelineConfig) -> int:
    model = load_model(_need(args.model or config.paths.model, "--model"))
    result = _load_fit(_need(args.fit or config.paths.fit, "--fit"))
    frontal = read_pgm(_need(args.image or config.paths.image, "--image"))
    canonical = normalize_pose(result, model, config.render.z0, config.render.require_converged)
    feats = frontal_features(model, frontal, canonical, config.render)
    doc = {EYE_KEYS[e]: feats[e].tolist() for e in EYES}
    doc["rotation"] = result.R.ravel().tolist()
    if args.gaze:
        g = _vector(args.gaze, 3, "--gaze")
        doc["gaze"] = (g / np.linalg.norm(g)).tolist()
    if args.screen:
        doc["screen"] = _vector(args.screen, 2, "--screen").tolist()
    _emit(args, doc, "features.json")
    return EXIT_OK


def _feature_outcome(path, index: int, role: str, need_gaze: bool) -> FrameOutcome:
    doc = _read_json(path)
    try:
        feats = {e: np.asarray(doc[EYE_KEYS[e]], dtype=float) for e in EYES}
        R = np.asarray(doc["rotation"], dtype=float).reshape(3, 3)
        gaze = np.asarray(doc["gaze"], dtype=float) if "gaze" in doc else None
        screen = list(doc.get("screen", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"not a features file ({exc})", path=path) from None
    if need_gaze and gaze is None:
        raise ValidationError(f"{path}: features file lacks the 'gaze' truth")
    return FrameOutcome("cli", index, role, screen, gaze, None, features=feats, fit_rotation=R)


def _feature_paths(args, config):
    paths = list(args.features or config.paths.features)
    if not paths:
        raise ValidationError("--features needs at least one file")
    return paths


def cmd_train(args, config: PipelineConfig) -> int:
    outcomes = [_feature_outcome(p, i, "train", True) for i, p in enumerate(_feature_paths(args, config))]
    if not args.all and all(len(o.screen) == 2 for o in outcomes):
        keep = select_sparse_indices(np.array([o.screen for o in outcomes]), config.regress.grid)
        outcomes = [outcomes[i] for i in keep]
    elif not args.all:
        logger.info("screen points missing; keeping every sample")
    sets = training_sets(outcomes)
    doc = {"schema_version": "1.0"}
    doc.update({EYE_KEYS[e]: sets[e].to_json() for e in EYES})
    _emit(args, doc, "training.json")
    return EXIT_OK


def _load_training(args, config) -> dict:
    path = _need(args.training or config.paths.training, "--training")
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ParseError("training file must be a JSON object", path=path)
    sets = {}
    for e in EYES:
        if EYE_KEYS[e] not in doc:
            raise ParseError("missing eye entry", path=path, field=EYE_KEYS[e])
        sets[e] = TrainingSet.from_json(doc[EYE_KEYS[e]], path)
    return sets


def cmd_predict(args, config: PipelineConfig) -> int:
    sets = _load_training(args, config)
    paths = _feature_paths(args, config)
    preds = []
    for i, p in enumerate(paths):
        o = _feature_outcome(p, i, "test", False)
        rec = {"features": str(p)}
        for r in ("knn", "alr"):
            rec[r] = {}
            for e in EYES:
                try:
                    g = predict_gaze(sets[e], o.features[e], o.fit_rotation, r, config.regress)
                    rec[r][EYE_KEYS[e]] = g.tolist()
                except FaceGazeError as exc:
                    rec[r][EYE_KEYS[e]] = None
                    rec.setdefault("failures", {}).setdefault(r, {})[EYE_KEYS[e]] = (
                        f"{type(exc).__name__}: {exc}")
            if rec[r]["left"] is not None and rec[r]["right"] is not None:
                mean = np.add(rec[r]["left"], rec[r]["right"])
                rec[r]["mean"] = (mean / np.linalg.norm(mean)).tolist()
            else:
                rec[r]["mean"] = None
        preds.append(rec)
    _emit(args, {"schema_version": "1.0", "predictions": preds}, "predictions.json")
    return EXIT_OK


def cmd_eval(args, config: PipelineConfig) -> int:
    sets = _load_training(args, config)
    tests = [_feature_outcome(p, i, "test", True) for i, p in enumerate(_feature_paths(args, config))]
    ev = score(sets, tests, config.regress)
    per_frame = [{"index": i, "features": str(p), **ev["records"][i]}
                 for i, p in enumerate(_feature_paths(args, config))]
    session = {"frames": {"test": len(tests)}, "results": ev["results"], "per_frame": per_frame}
    _emit(args, build_report(config, {"eval": session}), "report.json")
    return EXIT_OK


def cmd_pipeline(args, config: PipelineConfig) -> int:
    suite = args.suite or config.paths.suite
    if suite:
        model, frames, intr = load_suite(suite)
        report = run_pipeline(config, frames, model, intr)
    else:
        report = run_pipeline(config)
    _emit(args, report, "report.json")
    if not args.quiet:
        for name, s in report["sessions"].items():
            for r in ("knn", "alr"):
                m = s["results"][r]["mean"]["mean"]
                logger.info("%s %s mean angular error: %s", name, r, "n/a" if m is None else f"{m:.3f} deg")
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic suite (model, scans, images, manifest)"),
    "fit": (cmd_fit, "fit the morphable model to a scan"),
    "normalize": (cmd_normalize, "render the fitted face frontally with the sensed texture"),
    "features": (cmd_features, "eye features from a frontal rendering"),
    "train": (cmd_train, "build per-eye training sets from feature files"),
    "predict": (cmd_predict, "predict gaze for feature files"),
    "eval": (cmd_eval, "score predictions against known gaze"),
    "pipeline": (cmd_pipeline, "run the full pipeline on a suite and report errors"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. fit.max_iters=50")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only errors on standard error")
    parser = _Parser(prog="facegaze", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"facegaze {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {name: sub.add_parser(name, parents=[common], help=text)
            for name, (_, text) in COMMANDS.items()}
    for name in ("fit", "normalize", "features"):
        subs[name].add_argument("--model", help="model JSON")
    subs["fit"].add_argument("--scan", help="scan PLY")
    subs["fit"].add_argument("--init", choices=("centroid", "landmarks"), default="centroid")
    subs["fit"].add_argument("--landmarks", help="JSON list of 3D landmark positions")
    subs["fit"].add_argument("--mesh", help="also write the fitted mesh to this PLY")
    for name in ("normalize", "features"):
        subs[name].add_argument("--fit", help="fit result JSON")
        subs[name].add_argument("--image", help="PGM image (sensed for normalize, frontal for features)")
        subs[name].add_argument("--intrinsics", help="JSON camera intrinsics of the sensed image")
    subs["features"].add_argument("--gaze", help="true camera-frame gaze; write --gaze=x,y,z when x is negative")
    subs["features"].add_argument("--screen", help="screen point, 'sx,sy'")
    for name in ("train", "predict", "eval"):
        subs[name].add_argument("--features", nargs="+", help="feature JSON files")
    subs["train"].add_argument("--all", action="store_true", help="skip sparse grid selection")
    for name in ("predict", "eval"):
        subs[name].add_argument("--training", help="training JSON")
    subs["pipeline"].add_argument("--suite", help="suite directory written by 'gen'")
    return parser


def _error_exit(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    path = getattr(exc, "filename", None) or getattr(exc, "path", None)
    if path is not None:
        doc["path"] = str(path)
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        return _error_exit(exc, EXIT_VALIDATION)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler = COMMANDS[args.command][0]
    try:
        config = load_config(args.config, args.set, args.seed)
        return handler(args, config)
    except FaceGazeError as exc:
        return _error_exit(exc, exc.exit_code)
    except OSError as exc:
        return _error_exit(exc, EXIT_IO)
    except np.linalg.LinAlgError as exc:
        return _error_exit(exc, EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())

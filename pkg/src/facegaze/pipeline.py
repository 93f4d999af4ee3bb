"""Configuration, synthetic suites, per-frame processing and evaluation reports."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    FaceGazeError,
    InvalidArgumentError,
    ParseError,
    ValidationError,
)
from .fitting import FitConfig, FitResult, fit, landmark_init, rotation_angle_deg
from .model import MorphableModel, Shape, load_model, save_model, synthesize
from .pointcloud import CameraIntrinsics, PointSet, read_ply, write_ply
from .regress import (
    TrainingSet,
    alr_predict,
    angular_error,
    error_stats,
    gaze_angles,
    knn_predict,
    select_sparse_indices,
)
from .render import (
    Image,
    RenderConfig,
    eye_feature,
    normalize_pose,
    read_pgm,
    render_mesh,
    sample_texture,
    subdivide,
    write_pgm,
)
from .synth import (
    Scenario,
    generate_eye_appearance,
    generate_gaze_track,
    generate_landmarks,
    generate_scan,
    head_rotation,
    make_test_model,
    render_sensed_image,
    subject_coefficients,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
EYES = ("left_eye", "right_eye")
EYE_KEYS = {"left_eye": "left", "right_eye": "right"}
REGRESSORS = ("knn", "alr")


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class RenderSettings:
    z0: float = 0.6
    width: int = 320
    height: int = 320
    focal: float = 900.0
    margin: float = 0.0
    subdivide: int = 2
    occlusion_test: bool = True
    require_converged: bool = False

    def __post_init__(self):
        self.render_config()
        if not 0 <= self.subdivide <= 4:
            raise ValidationError("render.subdivide must lie in 0..4")

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.z0, self.width, self.height, self.focal, self.margin)


@dataclass(frozen=True)
class RegressSettings:
    k: int = 3
    eps: float = 0.05
    grid: int = 14
    test_frames: int = 100
    normalize_weights: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("regress.k must be >= 1")
        if self.eps < 0:
            raise ValidationError("regress.eps must be nonnegative")
        if self.grid < 1:
            raise ValidationError("regress.grid must be >= 1")
        if self.test_frames < 0:
            raise ValidationError("regress.test_frames must be nonnegative")


@dataclass(frozen=True)
class ScenarioSettings:
    """Synthetic suite parameters.  Angles in degrees, lengths in meters."""

    n_vertices: int = 2500
    components: int = 6
    model_seed: int = 1
    coeff_scale: float = 1.0
    frames: int = 600
    track: str = "raster"
    track_rows: int = 20
    sessions: tuple = ("static",)
    static_pose: tuple = (5.0, 5.0, 0.0)
    head_distance: float = 0.6
    moving_range: float = 20.0
    moving_shift: float = 0.02
    scan_size: int = 5000
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    appearance_noise: float = 0.0
    landmark_sigma: float = 0.003
    patch_size: tuple = (28, 40)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "static_pose", tuple(float(v) for v in self.static_pose))
        object.__setattr__(self, "patch_size", tuple(int(v) for v in self.patch_size))
        if not (0 <= self.outlier_fraction < 1):
            raise ValidationError("scenario.outlier_fraction must lie in [0, 1)")
        if self.noise_sigma < 0 or self.appearance_noise < 0 or self.landmark_sigma < 0:
            raise ValidationError("scenario noise levels must be nonnegative")
        if self.frames < 1:
            raise ValidationError("scenario.frames must be >= 1")
        if self.n_vertices < 50 or self.components < 1:
            raise ValidationError("scenario model needs n_vertices >= 50 and components >= 1")
        if self.scan_size < 1:
            raise ValidationError("scenario.scan_size must be positive")
        if not self.sessions:
            raise ValidationError("scenario.sessions must name at least one session")
        for s in self.sessions:
            if s not in ("static", "moving"):
                raise ValidationError(f"unknown session '{s}' (expected 'static' or 'moving')")
        if len(set(self.sessions)) != len(self.sessions):
            raise ValidationError("scenario.sessions must not repeat")
        if len(self.static_pose) != 3:
            raise ValidationError("scenario.static_pose is (yaw, pitch, roll)")
        if self.track not in ("raster", "lissajous"):
            raise ValidationError("scenario.track must be 'raster' or 'lissajous'")
        if len(self.patch_size) != 2 or min(self.patch_size) < 5:
            raise ValidationError("scenario.patch_size must be (rows, cols), each >= 5")


@dataclass(frozen=True)
class PathSettings:
    suite: str | None = None
    model: str | None = None
    scan: str | None = None
    image: str | None = None
    fit: str | None = None
    landmarks: str | None = None
    features: tuple = ()
    training: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))


@dataclass(frozen=True)
class PipelineConfig:
    fit: FitConfig = field(default_factory=lambda: FitConfig())
    render: RenderSettings = field(default_factory=RenderSettings)
    regress: RegressSettings = field(default_factory=RegressSettings)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    seed: int = 0

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTIONS = {"fit": FitConfig, "render": RenderSettings, "regress": RegressSettings,
            "scenario": ScenarioSettings, "paths": PathSettings}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, default, name):
    """Convert a JSON value to the type of the field's default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ValidationError(f"{name} must be true or false")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ValidationError(f"{name} must be an integer")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{name} must be a list")
        return tuple(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ValidationError(f"{name} must be a string")
        return value
    return value


def _build_section(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ValidationError(f"config section '{section}' must be an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in names:
            raise ValidationError(f"unknown config key '{section}.{key}'")
        kwargs[key] = _coerce(value, getattr(defaults, key), f"{section}.{key}")
    return cls(**kwargs)


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object")
    kwargs = {}
    for key, value in doc.items():
        if key == "seed":
            kwargs["seed"] = _coerce(value, 0, "seed")
        elif key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], value, key)
        else:
            raise ValidationError(f"unknown config section '{key}'")
    return PipelineConfig(**kwargs)


def parse_override(text: str):
    """``section.key=value``; the value is read as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ValidationError(f"override '{text}' is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) == 1 and parts[0] == "seed":
        pass
    elif len(parts) != 2 or not all(parts):
        raise ValidationError(f"override key '{key}' must be section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts, value


def load_config(path=None, overrides=(), seed=None) -> PipelineConfig:
    """Read a JSON config (all keys optional), then apply overrides; overrides win."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path=path, line=exc.lineno) from None
        if not isinstance(doc, dict):
            raise ParseError("config must be a JSON object", path=path)
    for text in overrides:
        parts, value = parse_override(text)
        if parts == ["seed"]:
            doc["seed"] = value
            continue
        section, key = parts
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ValidationError(f"config section '{section}' must be an object")
        doc[section][key] = value
    if seed is not None:
        doc["seed"] = int(seed)
    return config_from_dict(doc)


# --- synthetic suites --------------------------------------------------------------------

def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class Frame:
    """One synthetic capture with its ground truth."""

    session: str
    index: int
    role: str
    screen: np.ndarray
    gaze: np.ndarray
    scenario: Scenario
    scan: PointSet
    image: Image
    landmarks: np.ndarray
    patches: dict

    @property
    def head_gaze(self) -> np.ndarray:
        return self.scenario.rotation.T @ self.gaze


def split_track(screen_points, grid: int, test_frames: int):
    """Sparse-grid training indices and evenly spaced test indices from the rest."""
    train = select_sparse_indices(screen_points, grid)
    rest = np.setdiff1d(np.arange(len(screen_points)), train)
    if test_frames >= len(rest):
        test = rest
    else:
        pick = np.unique(np.round(np.linspace(0, len(rest) - 1, test_frames)).astype(int))
        test = rest[pick]
    return train, test


def _head_pose(cfg: ScenarioSettings, session: str, session_id: int, index: int, gaze, seed: int):
    """Head rotation and translation; moving sessions resample until the eyes stay in range."""
    if session == "static":
        yaw, pitch, roll = np.radians(cfg.static_pose)
        return head_rotation(yaw, pitch, roll), np.array([0.0, 0.0, cfg.head_distance])
    rng = np.random.default_rng(_seed(seed, session_id, index, 11))
    lim = np.radians(cfg.moving_range)
    for _ in range(200):
        yaw, pitch = rng.uniform(-lim, lim, 2)
        R = head_rotation(yaw, pitch)
        hy, hp = gaze_angles(R.T @ gaze)
        if max(abs(hy), abs(hp)) <= np.radians(30.0):
            shift = rng.uniform(-cfg.moving_shift, cfg.moving_shift, 3)
            return R, np.array([0.0, 0.0, cfg.head_distance]) + shift
    raise InvalidArgumentError("could not draw a head pose keeping the gaze within the eye range")


def generate_frame(model: MorphableModel, cfg: ScenarioSettings, session: str, session_id: int,
                   index: int, role: str, screen, gaze, coeffs, seed: int,
                   intr: CameraIntrinsics) -> Frame:
    R, t = _head_pose(cfg, session, session_id, index, gaze, seed)
    head_gaze = R.T @ gaze
    frame_seed = _seed(seed, session_id, index, 7)
    patches = {
        eye: generate_eye_appearance(head_gaze, cfg.patch_size, cfg.appearance_noise,
                                     seed=_seed(seed, session_id, index, 20 + j))
        for j, eye in enumerate(EYES)
    }
    scenario = Scenario(coeffs, R, t, gaze_true=(gaze,), noise_sigma=cfg.noise_sigma,
                        outlier_fraction=cfg.outlier_fraction, scan_size=cfg.scan_size,
                        seed=frame_seed)
    scan = generate_scan(model, scenario)
    image = render_sensed_image(model, coeffs, R, t, patches, intr)
    landmarks = generate_landmarks(model, scenario, cfg.landmark_sigma)
    return Frame(session, index, role, np.asarray(screen, dtype=float), np.asarray(gaze, dtype=float),
                 scenario, scan, image, landmarks, patches)


def suite_model(cfg: ScenarioSettings) -> MorphableModel:
    return make_test_model(cfg.n_vertices, cfg.components, cfg.model_seed)


def iter_suite(model: MorphableModel, config: PipelineConfig, intr: CameraIntrinsics | None = None):
    """Yield the frames of every configured session in order (training then test, by index)."""
    cfg = config.scenario
    intr = intr or CameraIntrinsics.vga()
    coeffs = subject_coefficients(model, config.seed, cfg.coeff_scale)
    track = generate_gaze_track(cfg.track, cfg.frames, cfg.track_rows)
    screens = np.array([p for p, _ in track])
    train, test = split_track(screens, config.regress.grid, config.regress.test_frames)
    roles = {int(i): "train" for i in train}
    roles.update({int(i): "test" for i in test})
    for sid, session in enumerate(cfg.sessions):
        for i in sorted(roles):
            screen, gaze = track[i]
            yield generate_frame(model, cfg, session, sid, i, roles[i], screen, gaze, coeffs,
                                 config.seed, intr)


# --- per-frame processing --------------------------------------------------------------

@dataclass
class FrameOutcome:
    session: str
    index: int
    role: str
    screen: list
    gaze: np.ndarray
    true_rotation: np.ndarray
    features: dict = field(default_factory=dict)
    fit_rotation: np.ndarray | None = None
    converged: bool | None = None
    iterations: int | None = None
    rotation_error: float | None = None
    translation_error: float | None = None
    failure: str | None = None
    failure_stage: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


def frontal_image(model: MorphableModel, result: FitResult, image: Image, intr: CameraIntrinsics,
                  settings: RenderSettings):
    """Texture the fitted mesh from the sensed image and render it frontally.

    Returns ``(frontal image, canonical shape)``.
    """
    sensed = synthesize(model, result.coeffs).transformed(result.R, result.t)
    canonical = normalize_pose(result, model, settings.z0, settings.require_converged)
    fine_sensed, tris = subdivide(sensed.vertices, model.triangles, settings.subdivide)
    fine_canonical, _ = subdivide(canonical.vertices, model.triangles, settings.subdivide)
    colors = sample_texture(Shape(fine_sensed, tris), image, intr, occlusion_test=settings.occlusion_test)
    frontal = render_mesh(fine_canonical, tris, colors, settings.render_config().intrinsics)
    return frontal, canonical


def frontal_features(model: MorphableModel, frontal: Image, canonical, settings: RenderSettings) -> dict:
    """15-d features of both eyes cropped from a frontal rendering."""
    rc = settings.render_config()
    return {
        eye: eye_feature(frontal, canonical, model.annotations[eye], rc.intrinsics, rc.margin)
        for eye in EYES
    }


def eye_features(model: MorphableModel, result: FitResult, image: Image, intr: CameraIntrinsics,
                 settings: RenderSettings) -> dict:
    """Pose-normalized features of both eyes for one fitted frame."""
    frontal, canonical = frontal_image(model, result, image, intr, settings)
    return frontal_features(model, frontal, canonical, settings)


def process_frame(model: MorphableModel, frame: Frame, config: PipelineConfig,
                  intr: CameraIntrinsics) -> FrameOutcome:
    out = FrameOutcome(frame.session, frame.index, frame.role, frame.screen.tolist(), frame.gaze,
                       frame.scenario.rotation)
    stage = "fit"
    try:
        init = landmark_init(model, frame.landmarks)
        result = fit(model, frame.scan, init, config.fit)
        out.fit_rotation = result.R
        out.converged = bool(result.converged)
        out.iterations = int(result.iterations)
        out.rotation_error = rotation_angle_deg(result.R, frame.scenario.rotation)
        out.translation_error = float(np.linalg.norm(result.t - frame.scenario.translation))
        stage = "features"
        out.features = eye_features(model, result, frame.image, intr, config.render)
    except (FaceGazeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        out.failure = f"{type(exc).__name__}: {exc}"
        out.failure_stage = stage
        logger.info("frame %s/%d failed at %s: %s", frame.session, frame.index, stage, exc)
    return out


# --- evaluation ---------------------------------------------------------------------------

def _stats_mean(a: dict, b: dict) -> dict:
    out = {"count": min(a["count"], b["count"])}
    for key in ("mean", "median", "p90"):
        out[key] = None if a[key] is None or b[key] is None else (a[key] + b[key]) / 2
    return out


def training_sets(outcomes) -> dict:
    """Per-eye training sets with head-frame targets ``R_fit^T g``."""
    train = [o for o in outcomes if o.ok]
    if not train:
        return {}
    screens = np.array([o.screen for o in train], dtype=float)
    return {
        eye: TrainingSet(np.array([o.features[eye] for o in train]),
                         np.array([o.fit_rotation.T @ o.gaze for o in train]), screens)
        for eye in EYES
    }


def predict_gaze(train: TrainingSet, x, rotation, regressor: str, regress: RegressSettings):
    """Camera-frame gaze predicted from one eye feature and the fitted head rotation."""
    if regressor == "knn":
        g_head = knn_predict(train, x, regress.k, regress.normalize_weights)
    elif regressor == "alr":
        g_head = alr_predict(train, x, regress.eps)
    else:
        raise InvalidArgumentError(f"unknown regressor '{regressor}'")
    g = np.asarray(rotation) @ g_head
    return g / np.linalg.norm(g)


def score(sets: dict, tests, regress: RegressSettings) -> dict:
    """Angular errors of both regressors on ``tests`` (outcomes with known gaze)."""
    records = {o.index: {} for o in tests}
    results = {r: {} for r in REGRESSORS}
    for eye in EYES:
        key = EYE_KEYS[eye]
        errs = {r: [] for r in REGRESSORS}
        if eye in sets:
            for o in tests:
                for r in REGRESSORS:
                    try:
                        g = predict_gaze(sets[eye], o.features[eye], o.fit_rotation, r, regress)
                    except FaceGazeError as exc:
                        records[o.index].setdefault("prediction_failures", {}).setdefault(r, {})[key] = (
                            f"{type(exc).__name__}: {exc}")
                        continue
                    e = angular_error(g, o.gaze)
                    errs[r].append(e)
                    records[o.index].setdefault("errors", {}).setdefault(r, {})[key] = e
        for r in REGRESSORS:
            results[r][key] = error_stats(errs[r])
    for r in REGRESSORS:
        results[r]["mean"] = _stats_mean(results[r]["left"], results[r]["right"])
    return {"results": results, "records": records}


def evaluate_session(outcomes, regress: RegressSettings) -> dict:
    """Train both regressors per eye on the training frames and score the test frames."""
    sets = training_sets([o for o in outcomes if o.role == "train"])
    return score(sets, [o for o in outcomes if o.role == "test" and o.ok], regress)


def _outcome_record(o: FrameOutcome) -> dict:
    yaw, pitch = gaze_angles(o.gaze)
    rec = {
        "index": o.index,
        "role": o.role,
        "screen": o.screen,
        "gaze": o.gaze.tolist(),
        "gaze_yaw_deg": float(np.degrees(yaw)),
        "gaze_pitch_deg": float(np.degrees(pitch)),
        "converged": o.converged,
        "iterations": o.iterations,
        "rotation_error_deg": o.rotation_error,
        "translation_error_m": o.translation_error,
    }
    if o.failure is not None:
        rec["failure"] = {"stage": o.failure_stage, "message": o.failure}
    return rec


def session_report(outcomes, regress: RegressSettings) -> dict:
    ev = evaluate_session(outcomes, regress)
    failures: dict = {}
    for o in outcomes:
        if not o.ok:
            failures[o.failure_stage] = failures.get(o.failure_stage, 0) + 1
    fitted = [o for o in outcomes if o.rotation_error is not None]
    per_frame = []
    for o in outcomes:
        rec = _outcome_record(o)
        extra = ev["records"].get(o.index, {})
        if "errors" in extra:
            rec["errors_deg"] = extra["errors"]
        if "prediction_failures" in extra:
            rec["prediction_failures"] = extra["prediction_failures"]
            n = sum(len(v) for v in extra["prediction_failures"].values())
            failures["predict"] = failures.get("predict", 0) + n
        per_frame.append(rec)
    return {
        "frames": {
            "total": len(outcomes),
            "train": sum(o.role == "train" for o in outcomes),
            "test": sum(o.role == "test" for o in outcomes),
            "train_used": sum(o.role == "train" and o.ok for o in outcomes),
            "test_scored": sum(o.role == "test" and o.ok for o in outcomes),
            "failed": sum(not o.ok for o in outcomes),
            "failures_by_stage": dict(sorted(failures.items())),
        },
        "fit": {
            "converged": sum(bool(o.converged) for o in fitted),
            "iterations": error_stats([o.iterations for o in fitted]),
            "rotation_error_deg": error_stats([o.rotation_error for o in fitted]),
            "translation_error_m": error_stats([o.translation_error for o in fitted]),
        },
        "results": ev["results"],
        "per_frame": per_frame,
    }


def build_report(config: PipelineConfig, sessions: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config": config.to_dict(),
        "sessions": sessions,
    }


def run_pipeline(config: PipelineConfig, frames=None, model: MorphableModel | None = None,
                 intr: CameraIntrinsics | None = None) -> dict:
    """Fit, normalize and featurize every frame, then evaluate per session.

    Without ``frames`` the synthetic suite described by ``config.scenario``
    is generated in memory.  Failures are recorded per frame.
    """
    intr = intr or CameraIntrinsics.vga()
    if model is None:
        model = suite_model(config.scenario)
    if frames is None:
        frames = iter_suite(model, config, intr)
    by_session: dict = {}
    for frame in frames:
        by_session.setdefault(frame.session, []).append(process_frame(model, frame, config, intr))
    if not by_session:
        raise ValidationError("the suite contains no frames")
    sessions = {name: session_report(outs, config.regress) for name, outs in by_session.items()}
    return build_report(config, sessions)


def dumps_report(report: dict) -> str:
    """Canonical JSON text (sorted keys, newline-terminated)."""
    return json.dumps(_plain(report), sort_keys=True, indent=1, allow_nan=False) + "\n"


# --- suites on disk -----------------------------------------------------------------------

MANIFEST = "manifest.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _frame_stem(frame: Frame) -> str:
    return f"{frame.session}_{frame.index:04d}"


def write_suite(out_dir, config: PipelineConfig, intr: CameraIntrinsics | None = None) -> dict:
    """Generate the configured suite and write it under ``out_dir``; returns the manifest."""
    out = Path(out_dir)
    intr = intr or CameraIntrinsics.vga()
    model = suite_model(config.scenario)
    for sub in ("scans", "images", "patches"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.json")
    frames = []
    for frame in iter_suite(model, config, intr):
        stem = _frame_stem(frame)
        scan = f"scans/{stem}.ply"
        image = f"images/{stem}.pgm"
        write_ply(frame.scan, out / scan)
        write_pgm(frame.image, out / image)
        patches = {}
        for eye in EYES:
            rel = f"patches/{stem}_{EYE_KEYS[eye]}.pgm"
            write_pgm(frame.patches[eye], out / rel)
            patches[eye] = rel
        frames.append({
            "session": frame.session,
            "index": frame.index,
            "role": frame.role,
            "screen": frame.screen.tolist(),
            "gaze": frame.gaze.tolist(),
            "scan": scan,
            "image": image,
            "patches": patches,
            "landmarks": frame.landmarks.tolist(),
            "scenario": frame.scenario.to_dict(),
        })
    files = ["model.json"] + [p for f in frames for p in (f["scan"], f["image"], *f["patches"].values())]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "config": config.to_dict(),
        "model": "model.json",
        "intrinsics": intr.to_dict(),
        "frames": frames,
        "checksums": {p: _sha256(out / p) for p in files},
    }
    (out / MANIFEST).write_text(dumps_report(manifest), encoding="utf-8")
    return manifest


def read_manifest(suite_dir) -> dict:
    path = Path(suite_dir) / MANIFEST
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from None
    for key in ("model", "frames", "intrinsics"):
        if key not in doc:
            raise ParseError("missing manifest entry", path=path, field=key)
    return doc


def load_suite(suite_dir):
    """``(model, frames, intrinsics)`` of a suite written by :func:`write_suite`."""
    root = Path(suite_dir)
    doc = read_manifest(root)
    model = load_model(root / doc["model"])
    intr = CameraIntrinsics(**doc["intrinsics"])
    frames = []
    for i, f in enumerate(doc["frames"]):
        try:
            scenario = Scenario.from_dict(f["scenario"])
            frames.append(Frame(
                f["session"], int(f["index"]), f["role"], np.array(f["screen"], dtype=float),
                np.array(f["gaze"], dtype=float), scenario, read_ply(root / f["scan"]),
                read_pgm(root / f["image"]), np.array(f["landmarks"], dtype=float), {},
            ))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"bad frame entry ({exc})", path=root / MANIFEST, field=f"frames[{i}]") from None
    return model, frames, intr

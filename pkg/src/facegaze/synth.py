"""Synthetic ground truth: test face models, depth scans, eye appearance and gaze tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScenarioError, InvalidArgumentError, ValidationError
from .model import MorphableModel, sample_mesh, synthesize
from .pointcloud import CameraIntrinsics, PointSet
from .regress import gaze_angles, normalized
from .render import Image, bilinear, rasterize

# screen geometry used for gaze tracks (meters)
SCREEN_WIDTH = 0.5
SCREEN_HEIGHT = 0.3125
SCREEN_DISTANCE = 0.6

SCLERA = 0.9
PUPIL = 0.1
SKIN = 0.55
PUPIL_RANGE_DEG = 30.0
PUPIL_TRAVEL = 0.4


# --- test morphable model -----------------------------------------------------------

def _square_to_disk(u, v):
    return u * np.sqrt(1 - v * v / 2), v * np.sqrt(1 - u * u / 2)


def _gauss(x, y, cx, cy, sx, sy):
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def make_test_model(n_vertices: int = 2500, K: int = 6, seed: int = 0) -> MorphableModel:
    """Procedural face-like morphable model.

    The mesh is a square grid (side ``ceil(sqrt(n_vertices))``, so at least
    ``n_vertices`` vertices) warped onto an ellipsoidal cap facing -z, with a
    nose ridge and two concave eye sockets.  The basis holds ``K`` random
    smooth displacement fields, with rigid motions projected out, then
    orthonormalized.  Image-style axes: +x to the subject's left, +y down.
    """
    if n_vertices < 50:
        raise InvalidArgumentError("need n_vertices >= 50")
    if K < 1:
        raise InvalidArgumentError("need K >= 1")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_vertices)))
    g = np.linspace(-1.0, 1.0, side)
    gu, gv = np.meshgrid(g, g)
    du, dv = _square_to_disk(gu.ravel(), gv.ravel())

    jit = lambda s: 1.0 + s * rng.uniform(-1, 1)  # noqa: E731
    a, b, c = 0.075 * jit(0.05), 0.095 * jit(0.05), 0.06 * jit(0.05)
    eye_x, eye_y = 0.033 * jit(0.05), -0.022 * jit(0.05)
    x = a * du
    y = b * dv
    # strong horizontal wrap, shallower vertical profile (as on real faces)
    z = -c * np.sqrt(1 - 0.9 * du ** 2) + 0.025 * dv ** 2
    # nose: narrow ridge plus tip, both toward the camera (-z)
    z -= 0.018 * jit(0.1) * _gauss(x, y, 0.0, 0.0, 0.007, 0.028)
    z -= 0.012 * jit(0.1) * _gauss(x, y, 0.0, 0.024, 0.009, 0.008)
    for s in (-1, 1):
        z += 0.012 * _gauss(x, y, s * eye_x, eye_y, 0.013, 0.008)      # eye socket
        z -= 0.010 * _gauss(x, y, s * 0.035, -0.040, 0.022, 0.005)     # brow
        z -= 0.006 * _gauss(x, y, s * 0.045, 0.012, 0.012, 0.010)      # cheekbone
    z += 0.008 * _gauss(x, y, 0.0, 0.050, 0.026, 0.004)                 # mouth
    z -= 0.008 * _gauss(x, y, 0.0, 0.078, 0.016, 0.008)                 # chin
    verts = np.column_stack([x, y, z])
    verts -= verts.mean(axis=0)

    tris = []
    for i in range(side - 1):
        for j in range(side - 1):
            p = i * side + j
            tris.append((p, p + side, p + 1))
            tris.append((p + 1, p + side, p + side + 1))
    tris = np.array(tris, dtype=np.int64)

    shift = np.array([x.mean(), y.mean()])  # vertices were centered after construction
    hx, hy = 0.016, 0.011
    annotations = {}
    for name, sx in (("left_eye", 1), ("right_eye", -1)):
        ex, ey = sx * eye_x - shift[0], eye_y - shift[1]
        inside = (np.abs(verts[:, 0] - ex) <= hx) & (np.abs(verts[:, 1] - ey) <= hy)
        annotations[name] = np.flatnonzero(inside)
    marks = [(eye_x + hx, eye_y), (eye_x - hx, eye_y), (-eye_x + hx, eye_y), (-eye_x - hx, eye_y),
             (0.0, 0.03), (0.025, 0.055), (-0.025, 0.055), (0.0, 0.08)]
    lm = []
    for mx, my in marks:
        d = (verts[:, 0] - (mx - shift[0])) ** 2 + (verts[:, 1] - (my - shift[1])) ** 2
        lm.append(int(np.argmin(d)))
    annotations["landmarks"] = np.array(lm)
    annotations["nose_tip"] = np.array([int(np.argmin(verts[:, 2]))])

    fields = []
    for _ in range(K):
        disp = np.zeros_like(verts)
        for _ in range(4):
            cu, cv = rng.uniform(-0.8, 0.8, 2)
            width = rng.uniform(0.3, 0.7)
            bump = _gauss(du, dv, cu, cv, width, width)
            amp = rng.normal(size=3) * np.array([0.3, 0.3, 1.0])
            disp += bump[:, None] * amp
        fields.append(disp.ravel())
    fields = np.array(fields).T
    # Remove infinitesimal rigid motions of the mean shape.  Closest-point
    # registration sees mostly the normal part of a displacement, so the
    # projection uses the area-weighted metric n n^T (+ a little I): a
    # deformation then carries no first-order pose signal of its own.
    rigid = []
    for axis in range(3):
        tr = np.zeros_like(verts)
        tr[:, axis] = 1.0
        rigid.append(tr.ravel())
        w = np.zeros(3)
        w[axis] = 1.0
        rigid.append(np.cross(w, verts).ravel())
    G = np.array(rigid).T
    normals, areas = _vertex_normals_areas(verts, tris)
    M = areas[:, None, None] * (0.02 * np.eye(3) + np.einsum("ni,nj->nij", normals, normals))

    def metric(v):
        return np.einsum("nij,njk->nik", M, v.reshape(len(verts), 3, -1)).reshape(v.shape)

    MG = metric(G)
    fields -= G @ np.linalg.solve(G.T @ MG, MG.T @ fields)
    basis, _ = np.linalg.qr(fields)
    # re-orthonormalize once more to push B^T B - I to round-off level
    basis, _ = np.linalg.qr(basis)
    per_vertex_rms = 0.003 * 0.75 ** np.arange(K)
    scales = per_vertex_rms * np.sqrt(len(verts))
    return MorphableModel(verts.ravel(), basis, scales, tris, annotations)


def _vertex_normals_areas(verts, tris):
    e1 = verts[tris[:, 1]] - verts[tris[:, 0]]
    e2 = verts[tris[:, 2]] - verts[tris[:, 0]]
    fn = np.cross(e1, e2)
    normals = np.zeros_like(verts)
    areas = np.zeros(len(verts))
    for k in range(3):
        np.add.at(normals, tris[:, k], fn)
        np.add.at(areas, tris[:, k], np.linalg.norm(fn, axis=1) / 6.0)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, areas


def eye_regions(model: MorphableModel) -> dict:
    """Texture rectangle of each eye in mean-shape (x, y): ``name -> (x0, y0, x1, y1)``."""
    uv = model.mean_vertices[:, :2]
    out = {}
    for name in ("left_eye", "right_eye"):
        idx = model.annotations[name]
        p = uv[idx]
        out[name] = (p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max())
    return out


# --- rotations ---------------------------------------------------------------------

def head_rotation(yaw: float, pitch: float, roll: float = 0.0) -> np.ndarray:
    """Yaw-pitch-roll rotation ``Ry @ Rx @ Rz`` of a face that looks along -z.

    The rotated facing direction has projected yaw ``yaw`` and elevation
    ``pitch`` (so its projected pitch differs slightly from ``pitch``).
    """
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Ry = np.array([[cy_, 0, -sy_], [0, 1, 0], [sy_, 0, cy_]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Ry @ Rx @ Rz


def random_rotation(max_angle: float, rng) -> np.ndarray:
    """Rotation about a uniformly random axis by exactly ``max_angle`` radians."""
    axis = normalized(rng.normal(size=3))
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(max_angle) * K + (1 - np.cos(max_angle)) * K @ K


# --- scans -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Scenario:
    """Seeded ground truth for one synthetic depth scan.

    ``occlusion`` is ``(normal, offset)``: points with ``normal . p > offset``
    are removed.
    """

    coeffs_true: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    gaze_true: tuple = ()
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    occlusion: tuple | None = None
    scan_size: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.outlier_fraction < 1):
            raise ValidationError("outlier_fraction must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        R = np.asarray(self.rotation, dtype=float)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) <= 0:
            raise ValidationError("scenario rotation must be orthonormal with det +1")
        if self.scan_size < 1:
            raise ValidationError("scan_size must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "coeffs_true", np.asarray(self.coeffs_true, dtype=float).ravel())

    @property
    def pose_true(self):
        """``(rotation, translation)`` of the scanned face."""
        return self.rotation, self.translation

    def to_dict(self) -> dict:
        return {
            "coeffs_true": self.coeffs_true.tolist(),
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "gaze_true": [np.asarray(g).tolist() for g in self.gaze_true],
            "noise_sigma": self.noise_sigma,
            "outlier_fraction": self.outlier_fraction,
            "occlusion": (None if self.occlusion is None
                          else [np.asarray(self.occlusion[0]).tolist(), float(self.occlusion[1])]),
            "scan_size": self.scan_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        occ = d.get("occlusion")
        return cls(
            coeffs_true=np.array(d["coeffs_true"], dtype=float),
            rotation=np.array(d["rotation"], dtype=float).reshape(3, 3),
            translation=np.array(d["translation"], dtype=float),
            gaze_true=tuple(np.array(g, dtype=float) for g in d.get("gaze_true", [])),
            noise_sigma=float(d.get("noise_sigma", 0.0)),
            outlier_fraction=float(d.get("outlier_fraction", 0.0)),
            occlusion=None if occ is None else (np.array(occ[0], dtype=float), float(occ[1])),
            scan_size=int(d.get("scan_size", 5000)),
            seed=int(d.get("seed", 0)),
        )


def posed_shape(model: MorphableModel, scenario: Scenario):
    return synthesize(model, scenario.coeffs_true).transformed(scenario.rotation, scenario.translation)


def generate_scan(model: MorphableModel, scenario: Scenario) -> PointSet:
    """Noisy, occluded, outlier-contaminated samples of the posed true surface."""
    shape = posed_shape(model, scenario)
    pts = sample_mesh(shape.vertices, model.triangles, scenario.scan_size, scenario.seed).points
    rng = np.random.default_rng([scenario.seed, 1])
    if scenario.noise_sigma > 0:
        pts = pts + rng.normal(scale=scenario.noise_sigma, size=pts.shape)
    if scenario.occlusion is not None:
        normal, offset = scenario.occlusion
        pts = pts[pts @ np.asarray(normal, dtype=float) <= offset]
        if len(pts) == 0:
            raise DegenerateScenarioError("occlusion removed every scan point")
    if scenario.outlier_fraction > 0:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid, half = (lo + hi) / 2, (hi - lo) / 2 * 1.5
        hit = rng.random(len(pts)) < scenario.outlier_fraction
        pts = pts.copy()
        pts[hit] = mid + rng.uniform(-1, 1, size=(int(hit.sum()), 3)) * half
    return PointSet(pts)


def generate_landmarks(model: MorphableModel, scenario: Scenario, sigma: float = 0.003, seed=None):
    """Noisy 3D positions of the model's ``landmarks`` vertices at the true pose."""
    shape = posed_shape(model, scenario)
    rng = np.random.default_rng([scenario.seed if seed is None else seed, 2])
    lm = shape.vertices[model.annotations["landmarks"]]
    return lm + rng.normal(scale=sigma, size=lm.shape)


# --- eye appearance -------------------------------------------------------------------

def generate_eye_appearance(gaze, patch_size=(28, 40), noise_sigma_intensity: float = 0.0,
                            seed: int = 0) -> Image:
    """Sclera patch with a dark pupil disc displaced linearly with gaze.

    The pupil center sits at ``(yaw, pitch) / 30deg * 40%`` of the patch
    half-extent from the center; its edge is anti-aliased over one pixel.
    ``gaze`` is a unit vector in the head frame.
    """
    yaw, pitch = gaze_angles(gaze)
    lim = np.radians(PUPIL_RANGE_DEG) + 1e-12
    if abs(yaw) > lim or abs(pitch) > lim:
        raise InvalidArgumentError("eye appearance is defined for |yaw|, |pitch| <= 30 degrees")
    h, w = patch_size
    cx, cy = pupil_center(gaze, patch_size)
    xs = np.arange(w) + 0.5 - w / 2
    ys = np.arange(h) + 0.5 - h / 2
    X, Y = np.meshgrid(xs, ys)
    radius = 0.42 * h / 2
    dist = np.sqrt((X - cx) ** 2 + (Y - cy) ** 2)
    cover = np.clip(radius - dist + 0.5, 0.0, 1.0)
    img = SCLERA + (PUPIL - SCLERA) * cover
    if noise_sigma_intensity > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.normal(scale=noise_sigma_intensity, size=img.shape)
    return Image(np.clip(img, 0.0, 1.0))


def pupil_center(gaze, patch_size=(28, 40)):
    """Pupil offset from the patch center in pixels ``(dx, dy)``."""
    yaw, pitch = gaze_angles(gaze)
    h, w = patch_size
    lim = np.radians(PUPIL_RANGE_DEG)
    return yaw / lim * PUPIL_TRAVEL * w / 2, pitch / lim * PUPIL_TRAVEL * h / 2


# --- gaze tracks ---------------------------------------------------------------------

def screen_to_gaze(screen_point) -> np.ndarray:
    """Gaze from the canonical eye position (on the optical axis) to a normalized screen point."""
    sx, sy = screen_point
    X = (sx - 0.5) * SCREEN_WIDTH
    Y = (sy - 0.5) * SCREEN_HEIGHT
    return normalized(np.array([X, Y, -SCREEN_DISTANCE]))


def generate_gaze_track(spec="raster", frames: int = 600, rows: int = 20):
    """Screen-space gaze trajectory; returns a list of ``(screen_point, gaze)``.

    ``spec`` is ``"raster"`` (a boustrophedon sweep over ``rows`` lines with
    eased turns), ``"lissajous"`` or an explicit (N, 2) array of screen points.
    """
    if frames < 1:
        raise InvalidArgumentError("frames must be >= 1")
    if isinstance(spec, str):
        tau = np.linspace(0.0, 1.0, frames)
        if spec == "raster":
            pos = tau * rows
            row = np.minimum(np.floor(pos), rows - 1)
            frac = pos - row
            sweep = 0.5 - 0.5 * np.cos(np.pi * frac)
            sx = np.where(row % 2 == 0, sweep, 1.0 - sweep)
            sy = row / (rows - 1) if rows > 1 else np.full(frames, 0.5)
            pts = np.column_stack([sx, sy])
        elif spec == "lissajous":
            pts = np.column_stack([0.5 + 0.5 * np.sin(2 * np.pi * 7 * tau),
                                   0.5 + 0.5 * np.sin(2 * np.pi * 5 * tau + np.pi / 3)])
        else:
            raise InvalidArgumentError(f"unknown track spec '{spec}'")
    else:
        pts = np.asarray(spec, dtype=float).reshape(-1, 2)
    return [(p.copy(), screen_to_gaze(p)) for p in pts]


# --- sensed image -----------------------------------------------------------------------

def render_sensed_image(model: MorphableModel, coeffs, rotation, translation, eye_patches: dict,
                        intr: CameraIntrinsics, background: float = 0.0) -> Image:
    """Camera image of the posed face with eye textures mapped onto the eye rectangles.

    Texture coordinates are the mean-shape (x, y) of each vertex; inside an
    eye rectangle the intensity is a bilinear lookup into that eye's patch,
    elsewhere it is uniform skin.
    """
    shape = synthesize(model, coeffs).transformed(rotation, translation)
    frags = rasterize(shape.vertices, model.triangles, intr)
    mask = frags.triangle >= 0
    data = np.full(mask.shape, float(background))
    tri = model.triangles[frags.triangle[mask]]
    uv = np.einsum("ij,ijk->ik", frags.barycentric[mask], model.mean_vertices[tri][:, :, :2])
    vals = np.full(len(uv), SKIN)
    for name, (x0, y0, x1, y1) in eye_regions(model).items():
        patch = eye_patches.get(name)
        if patch is None:
            continue
        inside = (uv[:, 0] >= x0) & (uv[:, 0] <= x1) & (uv[:, 1] >= y0) & (uv[:, 1] <= y1)
        ph, pw = patch.data.shape
        col = (uv[inside, 0] - x0) / (x1 - x0) * pw - 0.5
        row = (uv[inside, 1] - y0) / (y1 - y0) * ph - 0.5
        vals[inside] = bilinear(patch, np.clip(col, 0, pw - 1), np.clip(row, 0, ph - 1))
    data[mask] = vals
    return Image(data, mask, background)


def subject_coefficients(model: MorphableModel, seed: int, scale: float = 1.0) -> np.ndarray:
    rng = np.random.default_rng([seed, 3])
    return rng.normal(size=model.k) * model.basis_scales * scale

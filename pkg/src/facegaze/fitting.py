"""Robust morphable-model registration to a depth point cloud.

The objective couples three terms over the deformed source cloud ``Z``:

* a robustly weighted match term (point-to-plane plus point-to-point
  distance to the closest target point),
* a rigidity term tying ``Z`` to the rigidly posed source samples,
* a model term tying ``Z`` to the posed morphable-model reconstruction.

Each outer iteration freezes correspondences and robust weights, then runs
one block-coordinate sweep: rigid pose, shape coefficients, ``Z``.  A
two-stage schedule keeps the model term switched off until the rigid
stage stalls, then ramps weight from rigidity to the model term.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InvalidArgumentError,
    NoCorrespondenceError,
    NumericalFailureError,
    ValidationError,
)
from .model import MorphableModel, SurfaceSamples, interpolated_rows, sample_surface
from .pointcloud import PointSet, SpatialIndex, build_index, estimate_normals

logger = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    RIGID_ONLY = "rigid_only"
    RAMP = "ramp"
    JOINT = "joint"


@dataclass(frozen=True)
class FitConfig:
    """Weights, thresholds and iteration limits of a fit.

    ``robust=False`` replaces the Tukey weight by a constant 1, and
    ``schedule="fixed"`` skips the rigid stage and ramp, using the final
    weights from the first iteration; both exist for comparison runs.
    ``prealign`` shifts the initial translation so that the coordinate-wise
    medians of the posed source samples and the target coincide.
    """

    omega1_init: float = 1000.0
    omega1_final: float = 0.001
    omega2_final: float = 100.0
    tukey_threshold: float = 0.01
    ramp_iters: int = 10
    stage_tol: float = 1e-5
    conv_tol: float = 1e-5
    max_iters: int = 200
    source_samples: int = 2000
    window: int = 5
    robust: bool = True
    tukey_form: str = "plain"
    schedule: str = "adaptive"
    prealign: bool = True
    normal_k: int = 30
    sample_seed: int = 0

    def __post_init__(self):
        if not (self.omega1_init >= 0 and self.omega1_final >= 0 and self.omega2_final >= 0):
            raise ValidationError("fit weights must be nonnegative")
        if self.omega1_final > self.omega1_init:
            raise ValidationError("omega1_final must not exceed omega1_init")
        if not self.tukey_threshold > 0:
            raise ValidationError("tukey_threshold must be positive")
        if not (self.stage_tol > 0 and self.conv_tol > 0):
            raise ValidationError("tolerances must be positive")
        for name in ("ramp_iters", "max_iters", "source_samples", "window"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if self.tukey_form not in ("plain", "squared"):
            raise ValidationError("tukey_form must be 'plain' or 'squared'")
        if self.schedule not in ("adaptive", "fixed"):
            raise ValidationError("schedule must be 'adaptive' or 'fixed'")
        if self.normal_k < 3:
            raise ValidationError("normal_k must be >= 3")


class Energies(NamedTuple):
    match: float
    rigid: float
    model: float
    total: float


@dataclass(frozen=True, eq=False)
class Matches:
    """Correspondences of Z into the target, frozen for one sweep."""

    index: np.ndarray
    closest: np.ndarray
    normals: np.ndarray
    plane_residual: np.ndarray
    point_residual: np.ndarray
    plane_weight: np.ndarray
    point_weight: np.ndarray


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    stage: str
    omega1: float
    omega2: float
    energy: float


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Everything about a fit that stays fixed across iterations."""

    model: MorphableModel
    target: PointSet
    index: SpatialIndex
    source: SurfaceSamples
    mean_rows: np.ndarray
    basis_rows: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.source.points


@dataclass(frozen=True, eq=False)
class FitState:
    Z: np.ndarray
    R: np.ndarray
    t: np.ndarray
    coeffs: np.ndarray
    omega1: float
    omega2: float
    stage: Stage = Stage.RIGID_ONLY
    iteration: int = 0
    ramp_step: int = 0
    energy_history: tuple = ()
    log: tuple = ()


@dataclass
class FitResult:
    coeffs: np.ndarray
    R: np.ndarray
    t: np.ndarray
    converged: bool
    iterations: int
    final_energies: Energies
    per_point_residuals: np.ndarray
    energy_history: list = field(default_factory=list)
    stage_iterations: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    rigid_stage_energies: Energies | None = None

    def to_dict(self) -> dict:
        return {
            "rotation": np.asarray(self.R).ravel().tolist(),
            "translation": np.asarray(self.t).tolist(),
            "coefficients": np.asarray(self.coeffs).tolist(),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "stage_iterations": dict(self.stage_iterations),
            "energy_history": [float(e) for e in self.energy_history],
            "final_energies": self.final_energies._asdict(),
            "rigid_stage_energies": (self.rigid_stage_energies._asdict()
                                     if self.rigid_stage_energies is not None else None),
            "residual_stats": residual_stats(self.per_point_residuals),
            "schedule": [asdict(r) for r in self.log],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitResult":
        rse = doc.get("rigid_stage_energies")
        return cls(
            coeffs=np.array(doc["coefficients"], dtype=float),
            R=np.array(doc["rotation"], dtype=float).reshape(3, 3),
            t=np.array(doc["translation"], dtype=float),
            converged=bool(doc["converged"]),
            iterations=int(doc["iterations"]),
            final_energies=Energies(**doc["final_energies"]),
            per_point_residuals=np.array([]),
            energy_history=list(doc.get("energy_history", [])),
            stage_iterations=dict(doc.get("stage_iterations", {})),
            log=[IterationRecord(**r) for r in doc.get("schedule", [])],
            rigid_stage_energies=Energies(**rse) if rse else None,
        )


def residual_stats(res) -> dict:
    res = np.asarray(res, dtype=float)
    if res.size == 0:
        return {"count": 0}
    return {
        "count": int(res.size),
        "mean": float(res.mean()),
        "median": float(np.median(res)),
        "p90": float(np.percentile(res, 90)),
        "max": float(res.max()),
    }


# --- elementary operations --------------------------------------------------

def tukey_weight(d, d_t: float, form: str = "plain"):
    """Redescending weight: ``1 - (d/d_t)**2`` inside the threshold, 0 beyond.

    ``form="squared"`` gives the textbook biweight ``(1 - (d/d_t)**2)**2``.
    Works elementwise on arrays; scalars in, float out.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise InvalidArgumentError("tukey_weight needs nonnegative distances")
    if not d_t > 0:
        raise InvalidArgumentError("tukey threshold must be positive")
    u = 1.0 - (d / d_t) ** 2
    if form == "squared":
        u = np.where(d <= d_t, u * u, 0.0)
    else:
        u = np.where(d <= d_t, u, 0.0)
    return float(u) if u.ndim == 0 else u


def small_angle_rotation(a: float, b: float, c: float) -> np.ndarray:
    """First-order rotation update with the sign pattern used by the solver."""
    return np.array([[1.0, a, b], [-a, 1.0, c], [-b, -c, 1.0]])


def orthonormalize(M) -> np.ndarray:
    """Nearest proper rotation to ``M`` in the Frobenius norm (SVD projection)."""
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or not np.all(np.isfinite(M)):
        raise InvalidArgumentError("orthonormalize needs a finite 3x3 matrix")
    U, s, Vt = np.linalg.svd(M)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometryError("cannot orthonormalize a singular matrix")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rigid_align(src, dst, weights=None):
    """Weighted least-squares rotation and translation mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    if len(src) < 3 or w.sum() <= 0:
        raise DegenerateGeometryError("rigid alignment needs >= 3 weighted points")
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def rotation_angle_deg(R_a, R_b) -> float:
    """Angle of the relative rotation between two rotation matrices, in degrees."""
    c = (np.trace(np.asarray(R_a) @ np.asarray(R_b).T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# --- correspondences and energy --------------------------------------------------

def match_residuals(Z, target_index: SpatialIndex, target_normals, d_t: float = 0.01,
                    *, robust: bool = True, form: str = "plain") -> Matches:
    """Closest-point correspondences of each ``z_i`` and their robust weights."""
    if target_normals is None:
        raise InvalidArgumentError("match_residuals needs target normals")
    Z = Z.points if isinstance(Z, PointSet) else np.asarray(Z, dtype=float)
    normals_all = np.asarray(target_normals, dtype=float)
    idx, dist = target_index.query(Z)
    closest = target_index.points[idx]
    normals = normals_all[idx]
    diff = Z - closest
    plane = np.einsum("ij,ij->i", normals, diff)
    if robust:
        wpl = tukey_weight(np.abs(plane), d_t, form)
        wpt = tukey_weight(dist, d_t, form)
    else:
        wpl = np.ones_like(plane)
        wpt = np.ones_like(dist)
    return Matches(idx, closest, normals, plane, dist, wpl, wpt)


def model_points(problem: FitProblem, coeffs) -> np.ndarray:
    """Model-frame reconstruction ``P_i d + m_i`` of every source sample."""
    return problem.mean_rows + problem.basis_rows @ np.asarray(coeffs, dtype=float)


def _frozen_match_terms(Z, matches: Matches):
    diff = Z - matches.closest
    plane = np.einsum("ij,ij->i", matches.normals, diff)
    point_sq = np.einsum("ij,ij->i", diff, diff)
    return matches.plane_weight * plane ** 2 + matches.point_weight * point_sq


def energy(state: FitState, problem: FitProblem, config: FitConfig,
           matches: Matches | None = None) -> Energies:
    """Evaluate the three energy terms and their weighted total.

    With ``matches`` given, correspondences and robust weights are taken
    from it (frozen) and only the residuals are re-evaluated at ``state.Z``.
    """
    Z = state.Z
    if matches is None:
        matches = match_residuals(Z, problem.index, problem.target.normals,
                                  config.tukey_threshold, robust=config.robust,
                                  form=config.tukey_form)
    e_match = float(np.sum(_frozen_match_terms(Z, matches)))
    posed_x = problem.x @ state.R.T + state.t
    e_rigid = float(np.sum((Z - posed_x) ** 2))
    posed_m = model_points(problem, state.coeffs) @ state.R.T + state.t
    e_model = float(np.sum((Z - posed_m) ** 2))
    total = e_match + state.omega1 * e_rigid + state.omega2 * e_model
    return Energies(e_match, e_rigid, e_model, total)


# --- block solves --------------------------------------------------------------

def _coupled_metric(matches: Matches, W: float):
    """Per-point metric left after minimizing the z-terms out of the pose block.

    For one point, min over z of ``w_pl (n.(z-c))^2 + w_pt |z-c|^2 + W |z-a|^2``
    equals ``(a-c)^T (s I + u n n^T) (a-c)``; returns ``(s, u)``.
    """
    wpl, wpt = matches.plane_weight, matches.point_weight
    alpha = wpt + W
    s = W * wpt / alpha
    u = W * W * wpl / (alpha * (alpha + wpl))
    return s, u


def _sweep_energy(Z, R, t, x, y, matches: Matches, w1, w2):
    e = float(np.sum(_frozen_match_terms(Z, matches)))
    if w1 > 0:
        e += w1 * float(np.sum((Z - (x @ R.T + t)) ** 2))
    if w2 > 0:
        e += w2 * float(np.sum((Z - (y @ R.T + t)) ** 2))
    return e


def _metric_translation(R, anchors, matches: Matches, s, u):
    """Translation minimizing sum (R a + t - c)^T M (R a + t - c) for fixed R."""
    n = matches.normals
    r = matches.closest - anchors @ R.T
    un = u[:, None] * n
    A = s.sum() * np.eye(3) + un.T @ n
    b = s @ r + un.T @ np.einsum("ij,ij->i", n, r)
    if np.linalg.cond(A) > 1e12:
        return None
    return np.linalg.solve(A, b)


def _rigid_update(state: FitState, matches: Matches, x, y, w1, w2):
    """Pose step of the sweep, with Z minimized out in closed form.

    Both pose terms combine into one anchor ``a = (w1 x + w2 y) / (w1 + w2)``
    because ``|R(x - y)|`` is pose invariant.  The reduced energy is then a
    weighted point-to-plane / point-to-point problem; one small-angle
    Gauss-Newton step is taken, re-orthonormalized, and halved until the
    Z-optimal sweep energy does not exceed the current one.
    """
    R, t = state.R, state.t
    W = w1 + w2
    if W <= 0:
        return R, t
    anchors = (w1 * x + w2 * y) / W if w2 > 0 else x
    s, u = _coupled_metric(matches, W)
    if not np.any((s > 0) | (u > 0)):
        return R, t
    n = matches.normals
    P = anchors @ R.T + t
    g = (s + u) @ P / max(float(np.sum(s + u)), 1e-300)
    Pc = P - g
    e = P - matches.closest
    px, py, pz = Pc[:, 0], Pc[:, 1], Pc[:, 2]
    zero = np.zeros_like(px)
    one = np.ones_like(px)
    # d(R~ p)/d(a, b, c) for R~ = I + [[0,a,b],[-a,0,c],[-b,-c,0]], then translation
    J = np.stack([
        np.column_stack([py, pz, zero, one, zero, zero]),
        np.column_stack([-px, zero, pz, zero, one, zero]),
        np.column_stack([zero, -px, -py, zero, zero, one]),
    ], axis=1)
    nJ = (n[:, None, :] @ J)[:, 0]
    ne = np.einsum("ni,ni->n", n, e)
    Jf = J.reshape(-1, 6)
    sJ = (s[:, None, None] * J).reshape(-1, 6)
    uJ = u[:, None] * nJ
    H = sJ.T @ Jf + uJ.T @ nJ
    rhs = -(sJ.T @ e.ravel() + uJ.T @ ne)
    step = np.linalg.lstsq(H, rhs, rcond=1e-12)[0]

    def z_opt_energy(Rc, tc):
        Zc = _z_update(matches, x @ Rc.T + tc, y @ Rc.T + tc, w1, w2, state.Z)
        return _sweep_energy(Zc, Rc, tc, x, y, matches, w1, w2)

    e0 = _sweep_energy(state.Z, R, t, x, y, matches, w1, w2)
    best = (R, t, e0)
    t_keep = _metric_translation(R, anchors, matches, s, u)
    if t_keep is not None:
        e_keep = z_opt_energy(R, t_keep)
        if e_keep <= best[2]:
            best = (R, t_keep, e_keep)
    angles = step[:3]
    for _ in range(30):
        R_new = orthonormalize(small_angle_rotation(*angles) @ R)
        t_new = _metric_translation(R_new, anchors, matches, s, u)
        if t_new is None:
            t_new = R_new @ (R.T @ (t - g)) + g + step[3:]
        e_new = z_opt_energy(R_new, t_new)
        if e_new <= best[2]:
            best = (R_new, t_new, e_new)
            break
        angles = angles / 2
    return best[0], best[1]


def _coefficient_update(problem: FitProblem, matches: Matches, R, t, q, w1, w2):
    """Coefficients minimizing the sweep energy jointly with Z, pose fixed.

    Per point, the terms not involving the model have Hessian
    ``A = w_pl n n^T + (w_pt + w1) I`` and minimizer ``z0``; eliminating z
    leaves ``(p - z0)^T w2 A (A + w2 I)^-1 (p - z0)`` for the model point
    ``p = R (m + P d) + t``, a weighted linear least-squares problem in d.
    """
    wpl, wpt = matches.plane_weight, matches.point_weight
    n, c = matches.normals, matches.closest
    alpha = wpt + w1
    lam_n = alpha + wpl
    s = w2 * alpha / (alpha + w2)
    u = w2 * lam_n / (lam_n + w2) - s
    b = (wpl * np.einsum("ij,ij->i", n, c))[:, None] * n + wpt[:, None] * c + w1 * q
    z0 = np.array(c, dtype=float, copy=True)
    ok = alpha > 0
    nb = np.einsum("ij,ij->i", n[ok], b[ok])
    z0[ok] = (b[ok] - (wpl[ok] / lam_n[ok] * nb)[:, None] * n[ok]) / alpha[ok, None]
    B = R @ problem.basis_rows
    r = z0 - (problem.mean_rows @ R.T + t)
    nB = (n[:, None, :] @ B)[:, 0]
    nr = np.einsum("ni,ni->n", n, r)
    ss, su = np.sqrt(s), np.sqrt(np.maximum(u, 0.0))
    A_ls = np.concatenate([(ss[:, None, None] * B).reshape(-1, B.shape[2]), su[:, None] * nB])
    b_ls = np.concatenate([(ss[:, None] * r).ravel(), su * nr])
    coeffs, *_ = np.linalg.lstsq(A_ls, b_ls, rcond=None)
    return coeffs


def _z_update(matches: Matches, q, p, omega1, omega2, Z_old):
    """Closed-form per-point minimizer of the four quadratic terms in z_i.

    The system matrix is ``w_pl n n^T + (w_pt + w1 + w2) I``; it is inverted
    with the Sherman-Morrison identity.
    """
    wpl = matches.plane_weight
    n = matches.normals
    c = matches.closest
    alpha = matches.point_weight + omega1 + omega2
    nc = np.einsum("ij,ij->i", n, c)
    b = (wpl * nc)[:, None] * n + matches.point_weight[:, None] * c
    if omega1 > 0:
        b = b + omega1 * q
    if omega2 > 0:
        b = b + omega2 * p
    Z = np.array(Z_old, dtype=float, copy=True)
    ok = alpha > 0
    a = alpha[ok]
    nb = np.einsum("ij,ij->i", n[ok], b[ok])
    coef = wpl[ok] / (a + wpl[ok])
    Z[ok] = (b[ok] - (coef * nb)[:, None] * n[ok]) / a[:, None]
    # only the plane term is active: move onto the tangent plane
    plane_only = ~ok & (wpl > 0)
    if np.any(plane_only):
        zo = Z_old[plane_only]
        nn = n[plane_only]
        off = np.einsum("ij,ij->i", nn, zo - c[plane_only])
        Z[plane_only] = zo - off[:, None] * nn
    return Z


def solve_iteration(state: FitState, problem: FitProblem, config: FitConfig,
                    matches: Matches | None = None) -> FitState:
    """One outer iteration: refresh correspondences, then one block sweep.

    With correspondences frozen the sweep runs pose, coefficients, then Z.
    The pose and coefficient blocks are each minimized jointly with Z
    (eliminated in closed form), so every step is an exact block
    minimization and the sweep is monotone.
    Raises NoCorrespondenceError when every robust weight is zero.
    """
    if matches is None:
        matches = match_residuals(state.Z, problem.index, problem.target.normals,
                                  config.tukey_threshold, robust=config.robust,
                                  form=config.tukey_form)
    if not (np.any(matches.plane_weight > 0) or np.any(matches.point_weight > 0)):
        raise NoCorrespondenceError("all robust match weights are zero", iteration=state.iteration)
    w1, w2 = state.omega1, state.omega2
    x = problem.x
    y = model_points(problem, state.coeffs)
    R, t = _rigid_update(state, matches, x, y, w1, w2)
    q = x @ R.T + t
    coeffs = state.coeffs
    if w2 > 0:
        coeffs = _coefficient_update(problem, matches, R, t, q, w1, w2)
        y = model_points(problem, coeffs)
    Z_new = _z_update(matches, q, y @ R.T + t, w1, w2, state.Z)
    new = replace(state, Z=Z_new, R=R, t=t, coeffs=coeffs, iteration=state.iteration + 1)
    e = energy(new, problem, config, matches).total
    if not np.isfinite(e):
        raise NumericalFailureError("non-finite energy", iteration=new.iteration)
    rec = IterationRecord(new.iteration, state.stage.value, float(w1), float(w2), float(e))
    return replace(new, energy_history=state.energy_history + (e,), log=state.log + (rec,))


# --- schedule ------------------------------------------------------------------

def _relative_drop(history, window):
    first, last = history[-window], history[-1]
    if first <= 0:
        return 0.0
    return (first - last) / first


def detect_stage_transition(energy_history, stage_tol: float, window: int = 5) -> bool:
    """True when the energy moved by less than ``stage_tol`` (relative) over the last ``window`` entries.

    A rising energy is not a local minimum: early on, points entering the
    robust threshold increase the total, so the magnitude of the change is
    compared rather than the signed decrease.
    """
    h = list(energy_history)
    if len(h) < window:
        return False
    return abs(_relative_drop(h, window)) < stage_tol


def has_converged(energy_history, conv_tol: float, window: int = 5) -> bool:
    """True when the spread of the last ``window`` energies is below ``conv_tol`` (relative)."""
    h = list(energy_history)
    if len(h) < window:
        return False
    tail = h[-window:]
    hi = max(tail)
    if hi <= 0:
        return True
    return (hi - min(tail)) / hi < conv_tol


def update_weights(state: FitState, config: FitConfig):
    """(omega1, omega2) for the state's stage and ramp step."""
    if config.schedule == "fixed":
        return config.omega1_final, config.omega2_final
    if state.stage == Stage.RIGID_ONLY:
        return config.omega1_init, 0.0
    if state.stage == Stage.RAMP:
        f = min(state.ramp_step, config.ramp_iters) / config.ramp_iters
        w1 = config.omega1_init + f * (config.omega1_final - config.omega1_init)
        return w1, f * config.omega2_final
    return config.omega1_final, config.omega2_final


# --- driver --------------------------------------------------------------------

def prepare_problem(model: MorphableModel, target: PointSet, coeffs0, config: FitConfig) -> FitProblem:
    if len(target) == 0:
        raise InvalidArgumentError("target point cloud is empty")
    if target.normals is None:
        target = estimate_normals(target, k=min(config.normal_k, len(target)))
    source = sample_surface(model, coeffs0, config.source_samples, config.sample_seed)
    mean_rows, basis_rows = interpolated_rows(model, source)
    return FitProblem(model, target, build_index(target), source, mean_rows, basis_rows)


def initial_state(problem: FitProblem, R0, t0, coeffs0, config: FitConfig) -> FitState:
    R0 = np.asarray(R0, dtype=float)
    if np.linalg.norm(R0.T @ R0 - np.eye(3)) > 1e-6 or np.linalg.det(R0) <= 0:
        raise InvalidArgumentError("initial rotation must be a proper rotation matrix")
    t0 = np.asarray(t0, dtype=float).reshape(3)
    Z0 = problem.x @ R0.T + t0
    if config.prealign:
        shift = np.median(problem.target.points, axis=0) - np.median(Z0, axis=0)
        t0 = t0 + shift
        Z0 = Z0 + shift
    stage = Stage.JOINT if config.schedule == "fixed" else Stage.RIGID_ONLY
    state = FitState(Z=Z0, R=R0, t=t0, coeffs=np.asarray(coeffs0, dtype=float).copy(),
                     omega1=0.0, omega2=0.0, stage=stage)
    w1, w2 = update_weights(state, config)
    return replace(state, omega1=w1, omega2=w2)


def run_fit(problem: FitProblem, state: FitState, config: FitConfig) -> FitResult:
    stage_hist = []
    counts = {s.value: 0 for s in Stage}
    rigid_energies = None
    converged = False
    for _ in range(config.max_iters):
        w1, w2 = update_weights(state, config)
        state = replace(state, omega1=w1, omega2=w2)
        state = solve_iteration(state, problem, config)
        counts[state.stage.value] += 1
        stage_hist.append(state.energy_history[-1])
        if state.stage == Stage.RIGID_ONLY:
            if detect_stage_transition(stage_hist, config.stage_tol, config.window):
                rigid_energies = energy(state, problem, config)
                state = replace(state, stage=Stage.RAMP, ramp_step=1)
                stage_hist = []
        elif state.stage == Stage.RAMP:
            if state.ramp_step >= config.ramp_iters:
                state = replace(state, stage=Stage.JOINT)
                stage_hist = []
            else:
                state = replace(state, ramp_step=state.ramp_step + 1)
        elif has_converged(stage_hist, config.conv_tol, config.window):
            converged = True
            break
    final_matches = match_residuals(state.Z, problem.index, problem.target.normals,
                                    config.tukey_threshold, robust=config.robust,
                                    form=config.tukey_form)
    final = energy(state, problem, config, final_matches)
    logger.debug("fit finished after %d iterations (converged=%s)", state.iteration, converged)
    return FitResult(
        coeffs=state.coeffs, R=state.R, t=state.t, converged=converged,
        iterations=state.iteration, final_energies=final,
        per_point_residuals=final_matches.point_residual,
        energy_history=list(state.energy_history), stage_iterations=counts,
        log=list(state.log), rigid_stage_energies=rigid_energies,
    )


def fit(model: MorphableModel, target: PointSet, init=None, config: FitConfig | None = None) -> FitResult:
    """Register ``model`` to ``target`` starting from ``init = (R0, t0, coeffs0)``.

    Target normals are estimated (oriented toward the camera origin) when
    the point set carries none.  ``init=None`` means identity rotation,
    centroid-aligned translation and zero coefficients.
    """
    config = config or FitConfig()
    if len(target) == 0:
        raise InvalidArgumentError("target point cloud is empty")
    if init is None:
        init = centroid_init(model, target, config)
    R0, t0, coeffs0 = init
    if coeffs0 is None:
        coeffs0 = np.zeros(model.k)
    problem = prepare_problem(model, target, coeffs0, config)
    state = initial_state(problem, R0, t0, coeffs0, config)
    return run_fit(problem, state, config)


def centroid_init(model: MorphableModel, target: PointSet, config: FitConfig | None = None):
    """Identity rotation with the source centroid moved onto the target centroid."""
    config = config or FitConfig()
    src = sample_surface(model, np.zeros(model.k), config.source_samples, config.sample_seed)
    t0 = target.points.mean(axis=0) - src.points.mean(axis=0)
    return np.eye(3), t0, np.zeros(model.k)


def landmark_init(model: MorphableModel, detected_landmarks):
    """Pose from detected 3D landmark positions matched to the model's ``landmarks``."""
    src = model.mean_vertices[model.annotations["landmarks"]]
    dst = np.asarray(detected_landmarks, dtype=float).reshape(-1, 3)
    if dst.shape != src.shape:
        raise InvalidArgumentError(
            f"expected {len(src)} landmark positions, got {len(dst)}"
        )
    R, t = rigid_align(src, dst)
    return R, t, np.zeros(model.k)

"""Appearance-to-gaze regression: weighted kNN and adaptive (sparse) linear regression."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InfeasibleError,
    InvalidArgumentError,
    NumericalFailureError,
    ParseError,
    ValidationError,
)

EXACT_MATCH_DIST = 1e-12
UNIT_TOL = 1e-9


# --- gaze directions ---------------------------------------------------------------
#
# Gaze vectors live in a camera frame whose z axis points away from the
# viewer; a subject facing the camera looks along -z.  Yaw and pitch are the
# angles of the gaze ray projected onto the x-z and y-z planes.

def gaze_from_angles(yaw: float, pitch: float) -> np.ndarray:
    """Unit gaze vector for yaw/pitch in radians (0, 0 is straight at the camera)."""
    g = np.array([np.tan(yaw), np.tan(pitch), -1.0])
    return g / np.linalg.norm(g)


def gaze_angles(g) -> tuple[float, float]:
    g = np.asarray(g, dtype=float)
    return float(np.arctan2(g[0], -g[2])), float(np.arctan2(g[1], -g[2]))


def normalized(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if not n > 0:
        raise NumericalFailureError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True, eq=False)
class TrainingSet:
    """Parallel arrays of features (N, D), unit gaze targets (N, 3) and optional screen points (N, 2)."""

    features: np.ndarray
    targets: np.ndarray
    screen_points: np.ndarray | None = None

    def __post_init__(self):
        f = np.array(self.features, dtype=float)
        if f.ndim == 1:
            f = f.reshape(-1, 1) if f.size == 0 else f[None, :]
        g = np.array(self.targets, dtype=float).reshape(-1, 3)
        if f.shape[0] != g.shape[0]:
            raise ValidationError("features and targets must have equal length")
        if g.size and np.max(np.abs(np.linalg.norm(g, axis=1) - 1)) > UNIT_TOL:
            raise ValidationError("gaze targets must be unit vectors")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", g)
        if self.screen_points is not None:
            s = np.array(self.screen_points, dtype=float).reshape(-1, 2)
            if s.shape[0] != f.shape[0]:
                raise ValidationError("screen points must match feature count")
            object.__setattr__(self, "screen_points", s)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, indices) -> "TrainingSet":
        idx = np.asarray(indices, dtype=np.int64)
        sp = None if self.screen_points is None else self.screen_points[idx]
        return TrainingSet(self.features[idx], self.targets[idx], sp)

    def to_json(self) -> list:
        out = []
        for i in range(len(self)):
            rec = {"feature": self.features[i].tolist(), "gaze": self.targets[i].tolist()}
            if self.screen_points is not None:
                rec["screen"] = self.screen_points[i].tolist()
            out.append(rec)
        return out

    @classmethod
    def from_json(cls, records, path=None) -> "TrainingSet":
        if not isinstance(records, list):
            raise ParseError("training set must be a JSON array", path=path)
        feats, gazes, screens = [], [], []
        for i, rec in enumerate(records):
            try:
                feats.append([float(v) for v in rec["feature"]])
                gazes.append([float(v) for v in rec["gaze"]])
                if "screen" in rec:
                    screens.append([float(v) for v in rec["screen"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record ({exc})", path=path, field=f"[{i}]") from None
        sp = screens if screens and len(screens) == len(feats) else None
        return cls(np.array(feats).reshape(len(feats), -1), np.array(gazes).reshape(-1, 3), sp)


def save_training_set(ts: TrainingSet, path) -> None:
    Path(path).write_text(json.dumps(ts.to_json()) + "\n", encoding="utf-8")


def load_training_set(path) -> TrainingSet:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path=path, line=exc.lineno) from None
    return TrainingSet.from_json(doc, path)


# --- kNN ---------------------------------------------------------------------------

def knn_neighbors(features, x, k):
    """Indices and distances of the ``k`` nearest rows (stable: ties by lowest index)."""
    d = np.sqrt(np.sum((features - x) ** 2, axis=1))
    order = np.argsort(d, kind="stable")[:k]
    return order, d[order]


def knn_predict(train: TrainingSet, x, k: int = 3, normalize_weights: bool = True) -> np.ndarray:
    """Inverse-distance weighted average of the k nearest targets, renormalized to unit length.

    A neighbour closer than 1e-12 is returned verbatim.  With
    ``normalize_weights=False`` the raw weighted sum (weights 1/distance)
    is returned without any normalization.
    """
    n = len(train)
    if n == 0:
        raise InvalidArgumentError("training set is empty")
    if not (1 <= k <= n):
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    x = np.asarray(x, dtype=float).ravel()
    idx, dist = knn_neighbors(train.features, x, k)
    if dist[0] < EXACT_MATCH_DIST or (k == 1 and normalize_weights):
        return train.targets[idx[0]].copy()
    w = 1.0 / dist
    if not normalize_weights:
        return w @ train.targets[idx]
    w = w / w.sum()
    return normalized(w @ train.targets[idx])


# --- l1-minimal reconstruction --------------------------------------------------------

def l1_min_reconstruction(F, x, eps: float, max_steps: int | None = None) -> np.ndarray:
    """Solve ``min ||w||_1  s.t.  ||x - F w||_2 <= eps`` with a dual log-barrier method.

    ``F`` holds one training feature per column.  The problem is reduced to
    the range of ``F`` (the part of ``x`` outside it only tightens the
    tolerance) and the dual

        max  x'y - eps ||y||   s.t.  |f_j'y| <= 1  for every column j

    is solved with a barrier on the 2N linear constraints.  The dual has at
    most D variables, so each Newton step costs O(N D^2) regardless of how
    degenerate the dictionary is.  The primal weights are the barrier
    multipliers ``w_j = (1/t) (1/(1 - f_j'y) - 1/(1 + f_j'y))``; at a centered
    point ``x - Fw`` has norm exactly eps and the duality gap is below N/t.
    """
    F = np.asarray(F, dtype=float)
    x = np.asarray(x, dtype=float).ravel()
    if F.ndim != 2:
        raise InvalidArgumentError("dictionary must be a 2-d array")
    D, N = F.shape
    if x.size != D:
        raise InvalidArgumentError(f"query has dimension {x.size}, features have {D}")
    if eps < 0:
        raise InvalidArgumentError("eps must be nonnegative")
    if N == 0:
        raise InvalidArgumentError("empty dictionary")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(x))):
        raise InvalidArgumentError("dictionary and query must be finite")
    if np.linalg.norm(x) <= eps:
        return np.zeros(N)
    U, sv, _ = np.linalg.svd(F, full_matrices=False)
    tol = max(D, N) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    Q = U[:, sv > tol]
    if Q.shape[1] == 0:
        raise InfeasibleError(f"all features are zero; no weights reach ||x - Fw|| <= {eps:g}; use a larger eps")
    xr = Q.T @ x
    off = float(np.sum((x - Q @ xr) ** 2))
    slack = 1e-10 * max(1.0, float(np.linalg.norm(x)))
    if off > eps * eps + slack ** 2 and np.sqrt(off) > eps + slack:
        raise InfeasibleError(
            f"query lies {np.sqrt(off):.3g} from the feature span, beyond eps={eps:g}; use a larger eps")
    e = np.sqrt(max(eps * eps - off, 0.0))
    return _dual_barrier(Q.T @ F, xr, e, max_steps or 400)


def _dual_barrier(A, x, e_true, max_steps):
    """Barrier method for ``max x'z - e||z||, |A'z| <= 1``; returns the primal weights.

    Stops when the measured duality gap is tiny or when centering no longer
    succeeds (the Hessian then has condition ~t^2 and round-off dominates);
    the last well-centered point is used.
    """
    r, N = A.shape
    # a slightly smaller radius keeps the returned residual below e despite round-off
    e = e_true * (1 - 1e-6)
    scale = max(1.0, float(np.linalg.norm(x)))
    z = 0.5 * x / np.max(np.abs(A.T @ x))
    t = 1.0
    steps = 0
    eye = np.eye(r)
    best = None

    def barrier(zz):
        a = A.T @ zz
        if np.max(np.abs(a)) >= 1.0:
            return np.inf
        return -t * (x @ zz - e * np.linalg.norm(zz)) - np.sum(np.log1p(-a) + np.log1p(a))

    while True:
        centered = False
        for _ in range(60):
            a = A.T @ z
            lo, hi = 1.0 / (1.0 + a), 1.0 / (1.0 - a)
            nz = np.linalg.norm(z)
            grad = -t * (x - e * z / nz) + A @ (hi - lo)
            H = (A * (hi * hi + lo * lo)) @ A.T
            if e > 0:
                H += (t * e / nz) * (eye - np.outer(z, z) / (nz * nz))
            step = -np.linalg.lstsq(H, grad, rcond=None)[0]
            dec = -grad @ step
            steps += 1
            if dec <= 1e-9:
                centered = True
                break
            if steps > max_steps:
                break
            # largest step keeping |A'z| < 1, then backtrack on the barrier value
            da = A.T @ step
            with np.errstate(divide="ignore", invalid="ignore"):
                lim = np.where(da > 0, (1 - a) / da, np.where(da < 0, (-1 - a) / da, np.inf))
            s = min(1.0, 0.99 * float(lim.min()))
            f0 = barrier(z)
            while s > 1e-12 and barrier(z + s * step) > f0 - 0.25 * s * dec:
                s *= 0.5
            if s <= 1e-12:
                # no progress possible in floating point; close enough if the decrement is small
                centered = dec <= 1e-6
                break
            z = z + s * step
        if not centered:
            if best is None:
                raise NumericalFailureError(f"l1 solver did not converge within {max_steps} Newton steps")
            break
        a = A.T @ z
        w = (1.0 / (1.0 - a) - 1.0 / (1.0 + a)) / t
        lower = float(x @ z - e_true * np.linalg.norm(z))  # weak duality: no feasible w does better
        best = (w, a, lower, 2 * N / t)
        if np.abs(w).sum() - lower <= 1e-9 * scale or 2 * N / t <= 1e-7 * scale:
            break
        t *= 20.0
    w, a, lower, bound = best
    polished = _polish(A, x, e_true, a, lower, max(bound, 1e-9 * scale))
    if polished is not None:
        return polished
    res = np.linalg.norm(x - A @ w)
    if res > e_true:
        # last resort: pull toward an exact interpolant
        w0 = np.linalg.lstsq(A, x, rcond=None)[0]
        theta = 1.0 - e_true / res
        w = (1.0 - theta) * w + theta * w0
    return w


def _polish(A, x, e, a, lower, gap):
    """Exact weights on the support the barrier identified, or None if they cannot be certified.

    Supports are the k most active columns for growing k. A candidate must be
    sign-consistent and feasible, and is then certified either by an exactly
    dual-feasible point or by lying within ``gap`` of the dual lower bound.
    """
    order = np.argsort(1.0 - np.abs(a), kind="stable")
    scale = max(1.0, float(np.linalg.norm(x)))
    best = None
    for k in range(1, min(A.shape[0], A.shape[1]) + 1):
        S = order[:k]
        cand = _support_solution(A, x, e, S, np.sign(a[S]), scale)
        if cand is None:
            continue
        r = x - A @ cand
        l1 = np.abs(cand).sum()
        if e > 0 and np.linalg.norm(r) > e * (1 - 1e-9):
            # optimality: the residual direction, scaled to meet the support signs, is dual feasible
            kappa = float(np.sign(cand[S]) @ (A[:, S].T @ r)) / k
            if kappa > 0 and np.max(np.abs(A.T @ r)) <= kappa * (1 + 1e-9):
                return cand
        if l1 <= lower + gap and (best is None or l1 < np.abs(best).sum()):
            best = cand
    return best


def _support_solution(A, x, e, S, signs, scale):
    """Minimum-norm-in-sign-direction weights on ``S`` reaching residual ``e``."""
    AS = A[:, S]
    w_ls = np.linalg.lstsq(AS, x, rcond=None)[0]
    v = np.linalg.pinv(AS.T @ AS) @ signs
    r_ls = x - AS @ w_ls
    u = AS @ v
    rr, uu = float(r_ls @ r_ls), float(u @ u)
    if rr > e * e:
        if np.sqrt(rr) > e + 1e-12 * scale:
            return None
        lam = 0.0
    else:
        lam = np.sqrt((e * e - rr) / uu) if uu > 0 else 0.0
    cand = np.zeros(A.shape[1])
    cand[S] = w_ls - lam * v
    if np.any(cand[S] * signs < -1e-12 * scale):
        return None
    if np.linalg.norm(x - A @ cand) > e + 1e-12 * scale:
        return None
    return cand


def _checked(F, x, w, eps):
    res = np.linalg.norm(x - F @ w)
    if res > eps + 1e-8:
        raise NumericalFailureError(f"l1 solution infeasible: residual {res:.3g} > eps {eps:g}")
    return w


def alr_weights(train: TrainingSet, x, eps: float = 0.05) -> np.ndarray:
    if len(train) == 0:
        raise InvalidArgumentError("training set is empty")
    return l1_min_reconstruction(train.features.T, x, eps)


def alr_predict(train: TrainingSet, x, eps: float = 0.05) -> np.ndarray:
    """Gaze from the sparsest (l1) reconstruction of ``x`` by training features."""
    w = alr_weights(train, x, eps)
    if not np.any(w):
        raise InvalidArgumentError("query is within eps of the origin; no weights selected")
    return normalized(w @ train.targets)


# --- sparse training selection and metrics ----------------------------------------------

def grid_nodes(G: int) -> np.ndarray:
    """Centers of a G x G partition of the unit screen square, row-major."""
    c = (np.arange(G) + 0.5) / G
    gx, gy = np.meshgrid(c, c)
    return np.column_stack([gx.ravel(), gy.ravel()])


def select_sparse_indices(screen_points, G: int) -> np.ndarray:
    """Sorted unique indices of the track samples closest to each grid node."""
    sp = np.asarray(screen_points, dtype=float).reshape(-1, 2)
    if len(sp) == 0:
        raise InvalidArgumentError("gaze track is empty")
    if G < 1:
        raise InvalidArgumentError("grid size must be >= 1")
    nodes = grid_nodes(G)
    d = np.sqrt(((nodes[:, None, :] - sp[None, :, :]) ** 2).sum(axis=2))
    return np.unique(np.argmin(d, axis=1))


def select_sparse_training(track: TrainingSet, G: int) -> TrainingSet:
    if track.screen_points is None:
        raise InvalidArgumentError("sparse selection needs screen points")
    return track.subset(select_sparse_indices(track.screen_points, G))


def angular_error(g_est, g_true) -> float:
    """Angle between two unit gaze vectors, in degrees."""
    a = np.asarray(g_est, dtype=float)
    b = np.asarray(g_true, dtype=float)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise InvalidArgumentError("angular_error expects unit vectors")
    return float(np.degrees(np.arccos(np.clip(a @ b, -1.0, 1.0))))


def error_stats(errors) -> dict:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return {"count": 0, "mean": None, "median": None, "p90": None}
    return {"count": int(e.size), "mean": float(e.mean()),
            "median": float(np.median(e)), "p90": float(np.percentile(e, 90))}

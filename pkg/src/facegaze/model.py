"""Linear morphable shape model: synthesis, projection, surface sampling, I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InvalidArgumentError,
    ParseError,
    ValidationError,
)
from .pointcloud import PointSet

ORTHONORMAL_TOL = 1e-9
REQUIRED_ANNOTATIONS = ("left_eye", "right_eye", "landmarks")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape plus an orthonormal basis of vertex displacement fields.

    Attributes
    ----------
    mean_shape : ndarray, shape (3n,)
        Stacked ``x0, y0, z0, x1, ...`` vertex coordinates in meters.
    basis : ndarray, shape (3n, K)
        Orthonormal shape components, rows ordered like ``mean_shape``.
    basis_scales : ndarray, shape (K,)
        Per-component standard deviation of the coefficients.
    triangles : ndarray of int, shape (T, 3)
    annotations : dict of str to int ndarray
        Named vertex subsets; ``left_eye``, ``right_eye`` and ``landmarks``
        are mandatory.
    """

    mean_shape: np.ndarray
    basis: np.ndarray
    basis_scales: np.ndarray
    triangles: np.ndarray
    annotations: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", _frozen(self.mean_shape).ravel())
        basis = _frozen(self.basis)
        if basis.ndim == 1:
            basis = _frozen(basis[:, None])
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "basis_scales", _frozen(self.basis_scales).ravel())
        object.__setattr__(self, "triangles", _frozen(np.reshape(self.triangles, (-1, 3)), np.int64))
        object.__setattr__(
            self,
            "annotations",
            {str(k): _frozen(np.ravel(v), np.int64) for k, v in dict(self.annotations).items()},
        )
        self.validate()

    @property
    def n(self) -> int:
        return self.mean_shape.size // 3

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def mean_vertices(self) -> np.ndarray:
        return self.mean_shape.reshape(-1, 3)

    def validate(self):
        """Raise ValidationError naming the first violated invariant."""
        m = self.mean_shape
        if m.size % 3 != 0:
            raise ValidationError("mean_shape length must be a multiple of 3")
        n = m.size // 3
        if n < 4:
            raise ValidationError(f"model needs n >= 4 vertices, got {n}")
        if self.basis.shape[0] != m.size:
            raise ValidationError(
                f"basis has {self.basis.shape[0]} rows, expected 3n = {m.size}"
            )
        k = self.basis.shape[1]
        if k < 1:
            raise ValidationError("model needs K >= 1 basis components")
        if self.basis_scales.size != k:
            raise ValidationError(f"basis_scales has {self.basis_scales.size} entries, expected K = {k}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(self.basis))
                and np.all(np.isfinite(self.basis_scales))):
            raise ValidationError("model arrays must be finite")
        gram = self.basis.T @ self.basis
        resid = np.max(np.abs(gram - np.eye(k)))
        if resid > ORTHONORMAL_TOL:
            raise ValidationError(f"basis columns are not orthonormal (max |B^T B - I| = {resid:.3g})")
        if np.any(self.basis_scales <= 0):
            raise ValidationError("basis_scales must be strictly positive")
        if self.triangles.shape[0] == 0:
            raise ValidationError("triangles must be nonempty")
        if self.triangles.min() < 0 or self.triangles.max() >= n:
            raise ValidationError("triangle index out of range [0, n)")
        for name in REQUIRED_ANNOTATIONS:
            if name not in self.annotations:
                raise ValidationError(f"missing required annotation '{name}'")
        for name, idx in self.annotations.items():
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValidationError(f"annotation '{name}' index out of range [0, n)")


@dataclass(frozen=True, eq=False)
class Shape:
    """Vertices of one synthesized face, sharing the model triangulation."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValidationError("shape vertices must be finite")
        object.__setattr__(self, "vertices", v)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    def transformed(self, rotation, translation) -> "Shape":
        """Return ``R v + t`` applied to every vertex."""
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float)
        return Shape(self.vertices @ R.T + t, self.triangles)


@dataclass(frozen=True, eq=False)
class SurfaceSamples(PointSet):
    """Points sampled on a mesh, remembering where on the mesh they came from.

    ``face_index[i]`` is the triangle of sample ``i`` and ``barycentric[i]``
    its barycentric coordinates with respect to that triangle's vertices.
    """

    face_index: np.ndarray = None
    barycentric: np.ndarray = None


def _coeff_vector(model, coeffs):
    c = np.asarray(coeffs, dtype=float).ravel()
    if c.size != model.k:
        raise InvalidArgumentError(f"expected {model.k} coefficients, got {c.size}")
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("coefficients must be finite")
    return c


def synthesize(model: MorphableModel, coeffs) -> Shape:
    """Shape ``mean_shape + basis @ coeffs`` as an (n, 3) vertex array."""
    c = _coeff_vector(model, coeffs)
    return Shape((model.mean_shape + model.basis @ c).reshape(-1, 3), model.triangles)


def project_to_subspace(model: MorphableModel, shape) -> np.ndarray:
    """Least-squares coefficients of ``shape`` (orthonormal basis: a plain projection)."""
    v = shape.vertices if isinstance(shape, Shape) else np.asarray(shape, dtype=float)
    v = np.reshape(v, -1)
    if v.size != model.mean_shape.size:
        raise InvalidArgumentError(
            f"shape has {v.size // 3} vertices, model has {model.n}"
        )
    return model.basis.T @ (v - model.mean_shape)


def triangle_areas(vertices, triangles) -> np.ndarray:
    a, b, c = (vertices[triangles[:, j]] for j in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_mesh(vertices, triangles, count, seed) -> SurfaceSamples:
    """Area-weighted uniform sampling of a triangle mesh."""
    if count < 1:
        raise InvalidArgumentError("sample count must be >= 1")
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles)
    areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if not total > 0:
        raise DegenerateGeometryError("mesh has zero total area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    faces = np.searchsorted(cdf, rng.random(count), side="right")
    faces = np.minimum(faces, len(triangles) - 1)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.column_stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2])
    tri = triangles[faces]
    pts = np.einsum("ij,ijk->ik", bary, vertices[tri])
    return SurfaceSamples(points=pts, face_index=faces, barycentric=bary)


def sample_surface(model: MorphableModel, coeffs, count: int, seed: int) -> SurfaceSamples:
    """Sample ``count`` points uniformly (by area) on ``synthesize(model, coeffs)``."""
    shape = synthesize(model, coeffs)
    return sample_mesh(shape.vertices, model.triangles, count, seed)


def interpolated_rows(model: MorphableModel, samples: SurfaceSamples):
    """Per-sample mean position and basis rows, interpolated barycentrically.

    Returns ``(mean_rows, basis_rows)`` of shapes (s, 3) and (s, 3, K) such that
    a sample of ``synthesize(model, d)`` sits at ``mean_rows + basis_rows @ d``.
    """
    tri = model.triangles[samples.face_index]
    bary = samples.barycentric
    mean_v = model.mean_vertices
    basis_v = model.basis.reshape(model.n, 3, model.k)
    mean_rows = np.einsum("ij,ijk->ik", bary, mean_v[tri])
    basis_rows = np.einsum("ij,ijkl->ikl", bary, basis_v[tri])
    return mean_rows, basis_rows


# --- persistence -----------------------------------------------------------

def model_to_dict(model: MorphableModel) -> dict:
    return {
        "n": model.n,
        "k": model.k,
        "mean_shape": model.mean_shape.tolist(),
        "basis": model.basis.tolist(),
        "basis_scales": model.basis_scales.tolist(),
        "triangles": model.triangles.tolist(),
        "annotations": {k: v.tolist() for k, v in model.annotations.items()},
    }


def _field(doc, name, path):
    if name not in doc:
        raise ParseError("missing required field", path=path, field=name)
    return doc[name]


def _numeric(value, name, path, shape, dtype=float):
    try:
        arr = np.array(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"not a numeric array ({exc})", path=path, field=name) from None
    if arr.shape != shape:
        raise ParseError(f"expected shape {shape}, got {arr.shape}", path=path, field=name)
    return arr


def model_from_dict(doc: dict, path=None) -> MorphableModel:
    if not isinstance(doc, dict):
        raise ParseError("top level must be a JSON object", path=path)
    n = _field(doc, "n", path)
    k = _field(doc, "k", path)
    if not isinstance(n, int) or not isinstance(k, int) or n < 0 or k < 0:
        raise ParseError("'n' and 'k' must be nonnegative integers", path=path, field="n/k")
    mean = _numeric(_field(doc, "mean_shape", path), "mean_shape", path, (3 * n,))
    basis = _numeric(_field(doc, "basis", path), "basis", path, (3 * n, k))
    scales = _numeric(_field(doc, "basis_scales", path), "basis_scales", path, (k,))
    tris = _field(doc, "triangles", path)
    tris = _numeric(tris, "triangles", path, (len(tris) if isinstance(tris, list) else -1, 3), np.int64)
    ann = _field(doc, "annotations", path)
    if not isinstance(ann, dict):
        raise ParseError("must map names to index arrays", path=path, field="annotations")
    annotations = {}
    for name, idx in ann.items():
        if not isinstance(idx, list):
            raise ParseError("must be an index array", path=path, field=f"annotations.{name}")
        annotations[name] = _numeric(idx, f"annotations.{name}", path, (len(idx),), np.int64)
    return MorphableModel(mean, basis, scales, tris, annotations)


def save_model(model: MorphableModel, path) -> None:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model)) + "\n", encoding="utf-8")


def load_model(path) -> MorphableModel:
    """Load a model JSON file.

    Raises ParseError (with line/field detail) on malformed content and
    ValidationError when the parsed model breaks an invariant.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{exc.msg} (column {exc.colno})", path=path, line=exc.lineno) from None
    return model_from_dict(doc, path)

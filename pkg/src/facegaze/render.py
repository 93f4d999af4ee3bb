"""Frontal re-rendering, eye patch extraction and 3x5 appearance features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ExtractionError,
    InvalidArgumentError,
    ParseError,
    PreconditionError,
    ValidationError,
)
from .model import MorphableModel, Shape, synthesize
from .pointcloud import CameraIntrinsics, project_points

FEATURE_ROWS = 3
FEATURE_COLS = 5


@dataclass(frozen=True, eq=False)
class Image:
    """Grayscale image in [0, 1]; ``mask`` flags pixels that were rendered.

    Unrendered pixels hold ``background``.
    """

    data: np.ndarray
    mask: np.ndarray | None = None
    background: float = 0.0

    def __post_init__(self):
        d = np.array(self.data, dtype=float)
        if d.ndim != 2:
            raise ValidationError("image data must be two-dimensional")
        m = np.ones(d.shape, dtype=bool) if self.mask is None else np.array(self.mask, dtype=bool)
        if m.shape != d.shape:
            raise ValidationError("image mask must match data shape")
        vals = d[m]
        if vals.size and (np.any(~np.isfinite(vals)) or vals.min() < 0 or vals.max() > 1):
            raise ValidationError("rendered intensities must lie in [0, 1]")
        d[~m] = self.background
        d.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RenderConfig:
    """Virtual camera and patch settings for pose normalization."""

    z0: float = 0.6
    width: int = 320
    height: int = 320
    focal: float = 900.0
    margin: float = 0.25

    def __post_init__(self):
        if not self.z0 > 0:
            raise ValidationError("canonical distance z0 must be positive")
        if self.margin < 0:
            raise ValidationError("patch margin must be nonnegative")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2,
                                (self.height - 1) / 2, self.width, self.height)


def project(points, intr: CameraIntrinsics):
    """Per-point ``(u, v, depth)`` plus a flag that is False behind the camera."""
    u, v, z, ok = project_points(points, intr)
    return np.column_stack([u, v, z]), ok


# --- rasterization ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Fragments:
    """Per-pixel winning triangle (-1 if none), perspective-correct barycentrics and depth."""

    triangle: np.ndarray
    barycentric: np.ndarray
    depth: np.ndarray


_CHUNK = 4_000_000
# barycentric slack so pixel centers exactly on an edge count as inside
_EDGE_EPS = 1e-12


def rasterize(vertices, triangles, intr: CameraIntrinsics, skip=None) -> Fragments:
    """Z-buffered coverage of a camera-frame triangle mesh.

    Pixel ``(row, col)`` has its center at image coordinates ``(u, v) =
    (col, row)``.  A pixel is covered when its center lies inside the
    projected triangle (edges inclusive).  Among covering triangles the
    nearest wins; exact depth ties go to the lower triangle index.
    Triangles flagged in ``skip`` or with a vertex behind the camera are
    ignored.
    """
    W, H = intr.width, intr.height
    verts = np.asarray(vertices, dtype=float).reshape(-1, 3)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    uvz, front = project(verts, intr)
    keep = np.all(front[tris], axis=1)
    if skip is not None:
        keep &= ~np.asarray(skip, dtype=bool)
    tri_ids = np.flatnonzero(keep)
    u = uvz[:, 0][tris[tri_ids]]
    v = uvz[:, 1][tris[tri_ids]]
    z = uvz[:, 2][tris[tri_ids]]
    den = (v[:, 1] - v[:, 2]) * (u[:, 0] - u[:, 2]) + (u[:, 2] - u[:, 1]) * (v[:, 0] - v[:, 2])
    good = np.abs(den) > 1e-14
    x0 = np.clip(np.ceil(u.min(axis=1)), 0, W)
    x1 = np.clip(np.floor(u.max(axis=1)), -1, W - 1)
    y0 = np.clip(np.ceil(v.min(axis=1)), 0, H)
    y1 = np.clip(np.floor(v.max(axis=1)), -1, H - 1)
    bw = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    bh = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    counts = np.where(good, bw * bh, 0)

    best_depth = np.full(H * W, np.inf)
    best_tri = np.full(H * W, -1, dtype=np.int64)
    best_bary = np.zeros((H * W, 3))

    order = np.flatnonzero(counts)
    start = 0
    while start < order.size:
        csum = np.cumsum(counts[order[start:]])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK, side="right")))
        sel = order[start:stop]
        start = stop
        c = counts[sel]
        rep = np.repeat(np.arange(sel.size), c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        t = sel[rep]
        px = x0[t] + offs % bw[t]
        py = y0[t] + offs // bw[t]
        l0 = ((v[t, 1] - v[t, 2]) * (px - u[t, 2]) + (u[t, 2] - u[t, 1]) * (py - v[t, 2])) / den[t]
        l1 = ((v[t, 2] - v[t, 0]) * (px - u[t, 2]) + (u[t, 0] - u[t, 2]) * (py - v[t, 2])) / den[t]
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -_EDGE_EPS) & (l1 >= -_EDGE_EPS) & (l2 >= -_EDGE_EPS)
        if not np.any(inside):
            continue
        t, px, py = t[inside], px[inside], py[inside]
        lam = np.column_stack([l0[inside], l1[inside], l2[inside]])
        w = lam / z[t]
        inv_z = w.sum(axis=1)
        depth = 1.0 / inv_z
        bary = w / inv_z[:, None]
        pix = (py * W + px).astype(np.int64)
        gtri = tri_ids[t]
        # merge with what earlier chunks produced
        up = np.unique(pix[best_tri[pix] >= 0])
        cand_pix = np.concatenate([pix, up])
        cand_depth = np.concatenate([depth, best_depth[up]])
        cand_tri = np.concatenate([gtri, best_tri[up]])
        cand_bary = np.vstack([bary, best_bary[up]])
        o = np.lexsort((cand_tri, cand_depth, cand_pix))
        first = np.ones(o.size, dtype=bool)
        first[1:] = cand_pix[o][1:] != cand_pix[o][:-1]
        win = o[first]
        best_depth[cand_pix[win]] = cand_depth[win]
        best_tri[cand_pix[win]] = cand_tri[win]
        best_bary[cand_pix[win]] = cand_bary[win]
    return Fragments(best_tri.reshape(H, W), best_bary.reshape(H, W, 3), best_depth.reshape(H, W))


def subdivide(vertices, triangles, levels: int = 1):
    """Midpoint subdivision: each level splits every triangle into four.

    The surface is unchanged; only the vertex density grows, so per-vertex
    intensities can carry finer texture. Shared edges share one midpoint.
    """
    if levels < 0:
        raise InvalidArgumentError("subdivision levels must be nonnegative")
    verts = np.asarray(vertices, dtype=float).reshape(-1, 3)
    tris = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    for _ in range(levels):
        edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = len(verts) + inv.reshape(3, -1)
        verts = np.vstack([verts, 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])])
        a, b, c = tris.T
        ab, bc, ca = mid
        tris = np.concatenate([np.column_stack(t) for t in
                               ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    return verts, tris


def render_mesh(shape, triangles, vertex_intensities, intr: CameraIntrinsics,
                background: float = 0.0) -> Image:
    """Rasterize a mesh with per-vertex grayscale, interpolated per pixel.

    Triangles touching a vertex with a NaN intensity are not drawn.
    """
    verts = shape.vertices if isinstance(shape, Shape) else np.asarray(shape, dtype=float)
    tris = np.asarray(triangles, dtype=np.int64)
    inten = np.asarray(vertex_intensities, dtype=float).ravel()
    if inten.size != len(verts):
        raise InvalidArgumentError("need one intensity per vertex")
    skip = np.any(np.isnan(inten[tris]), axis=1)
    frags = rasterize(verts, tris, intr, skip=skip)
    mask = frags.triangle >= 0
    data = np.full(mask.shape, float(background))
    tri = frags.triangle[mask]
    vals = np.einsum("ij,ij->i", frags.barycentric[mask], inten[tris[tri]])
    data[mask] = np.clip(vals, 0.0, 1.0)
    return Image(data, mask, background)


def bilinear(image, u, v):
    """Bilinear sample at continuous pixel coordinates; NaN outside the pixel grid."""
    img = image.data if isinstance(image, Image) else np.asarray(image, dtype=float)
    H, W = img.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    out = np.full(u.shape, np.nan)
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu, vv = u[ok], v[ok]
    c0 = np.minimum(np.floor(uu).astype(np.int64), max(W - 2, 0))
    r0 = np.minimum(np.floor(vv).astype(np.int64), max(H - 2, 0))
    c1 = np.minimum(c0 + 1, W - 1)
    r1 = np.minimum(r0 + 1, H - 1)
    fu = uu - c0
    fv = vv - r0
    top = img[r0, c0] * (1 - fu) + img[r0, c1] * fu
    bot = img[r1, c0] * (1 - fu) + img[r1, c1] * fu
    out[ok] = top * (1 - fv) + bot * fv
    return out


def to_gray(rgb) -> np.ndarray:
    """Luminance of an (H, W, 3) color image."""
    rgb = np.asarray(rgb, dtype=float)
    return rgb @ np.array([0.299, 0.587, 0.114])


def sample_texture(shape_at_sensed_pose: Shape, image, intr: CameraIntrinsics,
                   occlusion_test: bool = False, depth_tol: float = 0.004) -> np.ndarray:
    """Per-vertex intensity by bilinear lookup at each vertex's projection.

    Vertices behind the camera or projecting outside the image get NaN.
    With ``occlusion_test`` vertices hidden behind other parts of the same
    mesh (deeper than the z-buffer by more than ``depth_tol``) also get NaN.
    Color input (an (H, W, 3) array) is collapsed to luminance first.
    """
    if not isinstance(image, Image):
        arr = np.asarray(image, dtype=float)
        image = Image(to_gray(arr) if arr.ndim == 3 else arr)
    verts = shape_at_sensed_pose.vertices
    uvz, front = project(verts, intr)
    vals = bilinear(image, uvz[:, 0], uvz[:, 1])
    vals[~front] = np.nan
    if occlusion_test:
        frags = rasterize(verts, shape_at_sensed_pose.triangles, intr)
        zb = bilinear_nearest(frags.depth, uvz[:, 0], uvz[:, 1])
        hidden = np.isfinite(zb) & (uvz[:, 2] > zb + depth_tol)
        vals[hidden] = np.nan
    return vals


def bilinear_nearest(grid, u, v):
    """Nearest-pixel lookup (NaN outside)."""
    H, W = grid.shape
    out = np.full(np.shape(u), np.nan)
    ok = np.isfinite(u) & np.isfinite(v)
    c = np.rint(np.where(ok, u, -1)).astype(np.int64)
    r = np.rint(np.where(ok, v, -1)).astype(np.int64)
    ok &= (c >= 0) & (c < W) & (r >= 0) & (r < H)
    out[ok] = grid[r[ok], c[ok]]
    return out


def normalize_pose(fit, model: MorphableModel, z0: float = 0.6, require_converged: bool = True) -> Shape:
    """Fitted shape with the head moved to identity rotation at ``(0, 0, z0)``."""
    if require_converged and not fit.converged:
        raise PreconditionError("pose normalization needs a converged fit")
    shape = synthesize(model, fit.coeffs)
    return shape.transformed(np.eye(3), (0.0, 0.0, z0))


def eye_box(shape_canonical: Shape, eye_annotation, intr: CameraIntrinsics, margin: float = 0.25):
    """Bounding box ``(u0, v0, u1, v1)`` of the projected eye vertices, grown by ``margin`` per side."""
    idx = np.asarray(eye_annotation, dtype=np.int64)
    if idx.size == 0:
        raise ExtractionError("empty eye annotation")
    uvz, front = project(shape_canonical.vertices[idx], intr)
    if not np.all(front):
        raise ExtractionError("eye vertices behind the camera")
    u0, u1 = uvz[:, 0].min(), uvz[:, 0].max()
    v0, v1 = uvz[:, 1].min(), uvz[:, 1].max()
    du = margin * (u1 - u0)
    dv = margin * (v1 - v0)
    return u0 - du, v0 - dv, u1 + du, v1 + dv


def crop_box(image: Image, box) -> Image:
    u0, v0, u1, v1 = box
    c0, r0 = int(np.floor(u0)), int(np.floor(v0))
    c1, r1 = int(np.ceil(u1)), int(np.ceil(v1))
    if c0 < 0 or r0 < 0 or c1 > image.width or r1 > image.height:
        raise ExtractionError(
            f"eye region ({c0},{r0})-({c1},{r1}) leaves the {image.width}x{image.height} image"
        )
    if c1 <= c0 or r1 <= r0:
        raise ExtractionError("eye region has zero size")
    return Image(image.data[r0:r1, c0:c1], image.mask[r0:r1, c0:c1], image.background)


def extract_eye_patch(image: Image, shape_canonical: Shape, eye_annotation,
                      intr: CameraIntrinsics, margin: float = 0.25) -> Image:
    """Crop the eye region: columns ``floor(u0)..ceil(u1)`` (half open), rows likewise."""
    return crop_box(image, eye_box(shape_canonical, eye_annotation, intr, margin))


def cell_means(patch, rows: int = FEATURE_ROWS, cols: int = FEATURE_COLS) -> np.ndarray:
    """Area averages over a rows x cols partition into near-equal rectangles."""
    data = patch.data if isinstance(patch, Image) else np.asarray(patch, dtype=float)
    h, w = data.shape
    if h < rows or w < cols:
        raise InvalidArgumentError(f"patch {h}x{w} is smaller than {rows}x{cols}")
    re = [(i * h) // rows for i in range(rows + 1)]
    ce = [(j * w) // cols for j in range(cols + 1)]
    out = np.empty((rows, cols))
    for i in range(rows):
        for j in range(cols):
            out[i, j] = data[re[i]:re[i + 1], ce[j]:ce[j + 1]].mean()
    return out


def downsample_to_feature(patch, normalize: bool = True) -> np.ndarray:
    """15-dimensional feature: 3x5 cell means, rescaled to span [0, 1].

    A constant patch maps to all zeros.
    """
    f = cell_means(patch).ravel()
    return _rescale(f) if normalize else f


def _rescale(f):
    lo, hi = f.min(), f.max()
    span = hi - lo
    if span <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(f)
    return (f - lo) / span


def _overlap_weights(lo: float, hi: float, parts: int, size: int) -> np.ndarray:
    """(parts, size) matrix: length of each unit pixel inside each equal sub-interval of [lo, hi]."""
    edges = np.linspace(lo, hi, parts + 1)
    px = np.arange(size, dtype=float)
    left = np.maximum(edges[:-1, None], px[None, :])
    right = np.minimum(edges[1:, None], px[None, :] + 1.0)
    return np.clip(right - left, 0.0, None)


def box_cell_means(image: Image, box, rows: int = FEATURE_ROWS, cols: int = FEATURE_COLS) -> np.ndarray:
    """Exact area averages over a rows x cols split of a sub-pixel box.

    Pixels are unit squares of constant intensity, so the result changes
    continuously as the box moves; an integer crop would jump by whole pixels.
    """
    u0, v0, u1, v1 = (float(b) for b in box)
    if u0 < 0 or v0 < 0 or u1 > image.width or v1 > image.height:
        raise ExtractionError(
            f"eye region ({u0:.1f},{v0:.1f})-({u1:.1f},{v1:.1f}) leaves the {image.width}x{image.height} image"
        )
    if u1 <= u0 or v1 <= v0:
        raise ExtractionError("eye region has zero size")
    wr = _overlap_weights(v0, v1, rows, image.height)
    wc = _overlap_weights(u0, u1, cols, image.width)
    return (wr @ image.data @ wc.T) / np.outer(wr.sum(1), wc.sum(1))


def eye_feature(image: Image, shape_canonical: Shape, eye_annotation, intr: CameraIntrinsics,
                margin: float = 0.25, normalize: bool = True) -> np.ndarray:
    """15-dimensional feature of the eye region, averaged over the exact projected box."""
    f = box_cell_means(image, eye_box(shape_canonical, eye_annotation, intr, margin)).ravel()
    return _rescale(f) if normalize else f


# --- PGM ---------------------------------------------------------------------------

def write_pgm(image: Image, path) -> None:
    """Binary P5, maxval 255, intensities rounded."""
    q = np.rint(np.clip(image.data, 0, 1) * 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def read_pgm(path) -> Image:
    path = Path(path)
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=path)
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ParseError("not a binary PGM (P5)", path=path, field="magic")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer PGM header value", path=path) from None
    if maxval != 255:
        raise ParseError("only maxval 255 is supported", path=path, field="maxval")
    body = raw[pos + 1:]
    if len(body) < w * h:
        raise ParseError(f"expected {w * h} pixel bytes, found {len(body)}", path=path)
    data = np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w) / 255.0
    return Image(data)

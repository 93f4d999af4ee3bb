"""Point sets, exact nearest-neighbour search, normals, depth maps and PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    InvalidArgumentError,
    ParseError,
    ValidationError,
)

NORMAL_UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointSet:
    """A cloud of 3D points (meters) with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValidationError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise ValidationError("normal count must equal point count")
            if nrm.size and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > NORMAL_UNIT_TOL:
                raise ValidationError("normals must have unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    def __len__(self):
        return self.points.shape[0]

    def with_normals(self, normals) -> "PointSet":
        return PointSet(self.points, normals)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @classmethod
    def vga(cls) -> "CameraIntrinsics":
        """Typical consumer RGB-D sensor geometry at 640x480."""
        return cls(fx=575.0, fy=575.0, cx=319.5, cy=239.5, width=640, height=480)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


class SpatialIndex:
    """Exact nearest-neighbour index over a PointSet.

    Backed by a kd-tree; candidate ties are re-resolved with an explicit
    distance computation so that results match a brute-force scan
    (lowest index wins on equal distance).
    """

    def __init__(self, cloud: PointSet):
        if len(cloud) == 0:
            raise InvalidArgumentError("cannot index an empty point cloud")
        self.cloud = cloud
        self.points = cloud.points
        self._tree = cKDTree(self.points)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries):
        """Nearest neighbour of each row of ``queries``; returns (index, distance)."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(q)):
            raise InvalidArgumentError("query points must be finite")
        m = len(self)
        if m == 1:
            idx = np.zeros(q.shape[0], dtype=np.int64)
            return idx, _dist(self.points[idx], q)
        d, idx = self._tree.query(q, k=2)
        idx = idx[:, 0].astype(np.int64)
        # rows whose two best candidates are (nearly) tied get an exact re-check
        near_tie = d[:, 1] - d[:, 0] <= 1e-9 * d[:, 0] + 1e-12
        for row in np.flatnonzero(near_tie):
            radius = d[row, 1] * (1 + 1e-9) + 1e-12
            cand = np.array(sorted(self._tree.query_ball_point(q[row], radius)), dtype=np.int64)
            cd = _dist(self.points[cand], q[row])
            idx[row] = cand[np.argmin(cd)]
        return idx, _dist(self.points[idx], q)

    def query_knn(self, queries, k):
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        _, idx = self._tree.query(q, k=k)
        return np.asarray(idx, dtype=np.int64).reshape(q.shape[0], k)


def _dist(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def build_index(cloud: PointSet) -> SpatialIndex:
    return SpatialIndex(cloud)


def nearest(index: SpatialIndex, q):
    """Closest cloud point to ``q``: returns ``(point, index, distance)``."""
    q = np.asarray(q, dtype=float).reshape(3)
    idx, dist = index.query(q[None, :])
    return index.points[idx[0]].copy(), int(idx[0]), float(dist[0])


def estimate_normals(cloud: PointSet, k: int = 12, viewpoint=(0.0, 0.0, 0.0)) -> PointSet:
    """PCA normals over the ``k`` nearest neighbours, oriented toward ``viewpoint``.

    Rank-deficient neighbourhoods (e.g. collinear points) do not raise: the
    returned normal is some unit vector orthogonal to the dominant direction.
    """
    m = len(cloud)
    if k < 3 or k > m:
        raise InvalidArgumentError(f"need 3 <= k <= {m}, got k={k}")
    pts = cloud.points
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k)
    nbr = nbr.reshape(m, k)
    neigh = pts[nbr]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    view = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointSet(pts, normals)


def depth_to_points(depth, intr: CameraIntrinsics) -> PointSet:
    """Back-project a depth map (meters; NaN or <= 0 marks invalid pixels)."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (intr.height, intr.width):
        raise InvalidArgumentError(
            f"depth map is {depth.shape}, intrinsics expect {(intr.height, intr.width)}"
        )
    v, u = np.nonzero(np.isfinite(depth) & (depth > 0))
    z = depth[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return PointSet(np.column_stack([x, y, z]))


def project_points(points, intr: CameraIntrinsics):
    """Pinhole projection; returns (u, v, depth, in_front) arrays."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, intr.fx * p[:, 0] / z + intr.cx, np.nan)
        v = np.where(in_front, intr.fy * p[:, 1] / z + intr.cy, np.nan)
    return u, v, z, in_front


# --- ASCII PLY ---------------------------------------------------------------

def write_ply(cloud: PointSet, path, triangles=None) -> None:
    """ASCII PLY; ``triangles`` adds a face element after the vertices."""
    pts = cloud.points
    has_n = cloud.normals is not None
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z"]
    if has_n:
        lines += ["property float nx", "property float ny", "property float nz"]
    tris = None if triangles is None else np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if tris is not None:
        lines += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    data = np.hstack([pts, cloud.normals]) if has_n else pts
    rows = [" ".join(repr(float(v)) for v in row) for row in data]
    if tris is not None:
        rows += ["3 " + " ".join(str(int(v)) for v in tri) for tri in tris]
    body = "\n".join(rows)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if rows else ""),
                          encoding="ascii")


def read_ply(path) -> PointSet:
    """Read an ASCII PLY with a ``vertex`` element holding x y z (and optionally nx ny nz)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise ParseError("not an ASCII PLY file", path=path) from None
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path=path, line=1)
    count = None
    props = []
    in_vertex = False
    header_end = None
    fmt_seen = False
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] != "ascii":
                raise ParseError(f"unsupported format '{raw.strip()}'", path=path, line=i)
            fmt_seen = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", path=path, line=i)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", path=path, line=i) from None
                if count < 0:
                    raise ParseError("negative vertex count", path=path, line=i)
        elif tok[0] == "property":
            if len(tok) < 3:
                raise ParseError("malformed property line", path=path, line=i)
            if in_vertex:
                if tok[1] == "list":
                    raise ParseError("list properties unsupported on vertex", path=path, line=i)
                props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
        else:
            raise ParseError(f"unexpected header keyword '{tok[0]}'", path=path, line=i)
    if header_end is None:
        raise ParseError("header not terminated by 'end_header'", path=path)
    if not fmt_seen:
        raise ParseError("missing format line", path=path)
    if count is None:
        raise ParseError("no vertex element declared", path=path)
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise ParseError(f"vertex element lacks property '{axis}'", path=path)
    cols = [props.index(a) for a in ("x", "y", "z")]
    ncols = None
    if all(a in props for a in ("nx", "ny", "nz")):
        ncols = [props.index(a) for a in ("nx", "ny", "nz")]
    body = lines[header_end:header_end + count]
    if len(body) < count:
        raise ParseError(f"expected {count} vertex rows, found {len(body)} (truncated file?)",
                         path=path, line=header_end + len(body) + 1)
    rows = np.empty((count, len(props)))
    for j, raw in enumerate(body):
        tok = raw.split()
        if len(tok) < len(props):
            raise ParseError(f"expected {len(props)} values, found {len(tok)}",
                             path=path, line=header_end + j + 1)
        try:
            rows[j] = [float(t) for t in tok[:len(props)]]
        except ValueError:
            raise ParseError("non-numeric vertex value", path=path, line=header_end + j + 1) from None
    if not np.all(np.isfinite(rows)):
        raise ParseError("non-finite vertex value", path=path)
    pts = rows[:, cols]
    normals = None
    if ncols is not None:
        normals = rows[:, ncols]
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointSet(pts, normals)

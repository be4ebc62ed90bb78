"""Point cloud container, file IO, mesh surface sampling and exact nearest-neighbor queries."""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateMeshError, EmptyCloudError, MalformedRecordError

PathLike = Union[str, os.PathLike]

NORMALIZATION_MODES = ("unit-sphere-centered", "unit-cube-centered", "none")

# float32 is the canonical PLY coordinate type; fall back to double when it
# would lose more than this much absolute precision.
_FLOAT32_TOLERANCE = 1e-7

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered, immutable set of 3D points.

    ``points`` is stored as a read-only ``(n, 3)`` float64 array.
    """

    points: np.ndarray
    category: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyCloudError("point cloud has no points")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.category == other.category
            and self.id == other.id
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None

    @cached_property
    def index(self) -> "NearestNeighborIndex":
        return NearestNeighborIndex(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, category=self.category, id=self.id)


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine map ``p' = (p + offset) * scale`` applied by :func:`normalize`."""

    mode: str
    offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + np.asarray(self.offset)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - np.asarray(self.offset)


class NearestNeighborIndex:
    """Exact nearest-neighbor index over a fixed point set.

    Backed by a KD-tree. Ties are resolved toward the lowest point index so
    results agree with a linear scan over the same points.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {points.shape}")
        if len(points) == 0:
            raise EmptyCloudError("cannot index an empty point set")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return len(self.points)

    def _resolve(self, x: np.ndarray, radius: float) -> Tuple[int, float]:
        cand = self._tree.query_ball_point(x, radius * (1.0 + 1e-9) + 1e-300)
        cand = np.sort(np.asarray(cand, dtype=np.intp))
        d = np.sqrt(((self.points[cand] - x) ** 2).sum(axis=1))
        k = int(np.argmin(d))
        return int(cand[k]), float(d[k])

    def query(self, x: Sequence[float]) -> Tuple[int, float]:
        """Return ``(index, distance)`` of the nearest point to ``x``."""
        x = np.asarray(x, dtype=np.float64).reshape(3)
        d, _ = self._tree.query(x, k=1)
        return self._resolve(x, float(d))

    def query_many(self, xs: np.ndarray, resolve_ties: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`query`; returns ``(indices, distances)`` arrays.

        With ``resolve_ties=False`` the distances are exact but the index of a
        tied neighbor is whichever the tree reports first.
        """
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 1:
            idx = np.zeros(len(xs), dtype=np.intp)
            return idx, np.sqrt(((xs - self.points[0]) ** 2).sum(axis=1))
        d, idx = self._tree.query(xs, k=2)
        idx0 = idx[:, 0].astype(np.intp)
        # recompute with the same formula the linear scan uses
        dist = np.sqrt(((xs - self.points[idx0]) ** 2).sum(axis=1))
        if resolve_ties:
            near_tie = d[:, 1] <= d[:, 0] * (1.0 + 1e-9) + 1e-300
            for row in np.flatnonzero(near_tie):
                idx0[row], dist[row] = self._resolve(xs[row], float(d[row, 0]))
        return idx0, dist


def nearest_neighbor(x: Sequence[float], cloud: PointCloud) -> Tuple[np.ndarray, float]:
    """Nearest point of ``cloud`` to ``x`` and its Euclidean distance."""
    i, d = cloud.index.query(x)
    return cloud.points[i].copy(), d


def linear_scan_nearest(x: Sequence[float], points: np.ndarray) -> Tuple[int, float]:
    """O(n) nearest-neighbor reference; lowest index wins ties."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptyCloudError("cannot search an empty point set")
    d = np.sqrt(((points - np.asarray(x, dtype=np.float64)) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return i, float(d[i])


# --------------------------------------------------------------------------
# normalization


def normalize(cloud: PointCloud, mode: str = "unit-sphere-centered") -> Tuple[PointCloud, NormalizationSpec]:
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    pts = cloud.points
    if mode == "none":
        spec = NormalizationSpec(mode)
    elif mode == "unit-sphere-centered":
        center = pts.mean(axis=0)
        radius = np.sqrt(((pts - center) ** 2).sum(axis=1)).max()
        spec = NormalizationSpec(mode, tuple(float(v) for v in -center), _safe_inverse(radius, pts))
    else:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = (lo + hi) / 2.0
        spec = NormalizationSpec(mode, tuple(float(v) for v in -center), _safe_inverse((hi - lo).max(), pts))
    return cloud.with_points(spec.apply(pts)), spec


def _safe_inverse(extent: float, pts: np.ndarray) -> float:
    # all points coincide (up to rounding in the centroid): scale is undefined, keep it at 1
    magnitude = float(np.abs(pts).max()) if len(pts) else 0.0
    if not extent > 1e-12 * max(magnitude, 1.0):
        return 1.0
    return float(1.0 / extent)


def denormalize(cloud: PointCloud, spec: NormalizationSpec) -> PointCloud:
    return cloud.with_points(spec.invert(cloud.points))


# --------------------------------------------------------------------------
# file IO


def load_cloud(path: PathLike, category: Optional[str] = None, id: Optional[str] = None) -> PointCloud:
    """Read a PLY (ASCII or binary little-endian) or XYZ text file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such cloud file: {path}")
    if path.suffix.lower() == ".ply":
        pts = _read_ply(path)
    else:
        pts = _read_xyz(path)
    if len(pts) == 0:
        raise EmptyCloudError(f"{path}: cloud has no points")
    return PointCloud(pts, category=category, id=id)


def save_cloud(cloud: PointCloud, path: PathLike, format: Optional[str] = None) -> None:
    """Write ``cloud`` as ``ply-ascii`` or ``xyz-text``; format defaults from the suffix."""
    path = Path(path)
    if format is None:
        format = "ply-ascii" if path.suffix.lower() == ".ply" else "xyz-text"
    pts = cloud.points
    if format == "ply-ascii":
        as32 = pts.astype(np.float32)
        if np.abs(as32.astype(np.float64) - pts).max() <= _FLOAT32_TOLERANCE:
            ptype, body = "float", as32
            fmt = "%.9g"
        else:
            ptype, body = "double", pts
            fmt = "%.17g"
        header = "\n".join(
            [
                "ply",
                "format ascii 1.0",
                f"element vertex {len(pts)}",
                f"property {ptype} x",
                f"property {ptype} y",
                f"property {ptype} z",
                "end_header",
            ]
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            np.savetxt(fh, body, fmt=fmt)
    elif format == "xyz-text":
        with open(path, "w") as fh:
            np.savetxt(fh, pts, fmt="%.17g")
    else:
        raise ValueError(f"unknown cloud format {format!r}")


def _read_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.replace(",", " ").split()
            if len(tokens) < 3:
                raise MalformedRecordError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
            try:
                rows.append([float(t) for t in tokens[:3]])
            except ValueError:
                raise MalformedRecordError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise MalformedRecordError(f"{path}: non-finite coordinate")
    return pts


def _parse_ply_header(fh, path: Path):
    if fh.readline().strip() != b"ply":
        raise MalformedRecordError(f"{path}: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype or ('list', count_t, item_t))])
    while True:
        raw = fh.readline()
        if not raw:
            raise MalformedRecordError(f"{path}: header has no end_header")
        tokens = raw.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MalformedRecordError(f"{path}: property before any element")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            else:
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MalformedRecordError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        names = [e[0] for e in elements]
        if "vertex" not in names:
            raise MalformedRecordError(f"{path}: no vertex element")
        vi = names.index("vertex")
        _, count, props = elements[vi]
        pnames = [p[0] for p in props]
        missing = [c for c in "xyz" if c not in pnames]
        if missing:
            raise MalformedRecordError(f"{path}: vertex element lacks properties {missing}")
        cols = [pnames.index(c) for c in "xyz"]
        if fmt == "ascii":
            return _read_ply_ascii(fh, path, elements[:vi], count, len(props), cols)
        return _read_ply_binary(fh, path, elements[:vi], count, props)


def _read_ply_ascii(fh, path, before, count, nprops, cols) -> np.ndarray:
    lines = iter(fh)
    for name, n, _ in before:
        for i in range(n):
            if next(lines, None) is None:
                raise MalformedRecordError(f"{path}: element {name!r} truncated at record {i}")
    out = np.empty((count, 3), dtype=np.float64)
    i = 0
    while i < count:
        raw = next(lines, None)
        if raw is None:
            raise MalformedRecordError(f"{path}: header declares {count} vertices, found {i}")
        tokens = raw.split()
        if not tokens:
            continue
        if len(tokens) < nprops:
            raise MalformedRecordError(f"{path}: vertex {i} has {len(tokens)} values, expected {nprops}")
        try:
            out[i] = [float(tokens[c]) for c in cols]
        except ValueError:
            raise MalformedRecordError(f"{path}: vertex {i} is not numeric") from None
        i += 1
    if not np.isfinite(out).all():
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise MalformedRecordError(f"{path}: vertex {bad} has a non-finite coordinate")
    return out


def _read_ply_binary(fh, path, before, count, props) -> np.ndarray:
    for name, n, eprops in before:
        if any(isinstance(t, tuple) for _, t in eprops):
            raise MalformedRecordError(f"{path}: list properties before vertex element are unsupported")
        fh.read(n * np.dtype([(p, "<" + t) for p, t in eprops]).itemsize)
    if any(isinstance(t, tuple) for _, t in props):
        raise MalformedRecordError(f"{path}: list properties in vertex element are unsupported")
    dtype = np.dtype([(p, "<" + t) for p, t in props])
    buf = fh.read(count * dtype.itemsize)
    if len(buf) < count * dtype.itemsize:
        raise MalformedRecordError(
            f"{path}: header declares {count} vertices, found {len(buf) // dtype.itemsize}"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count)
    out = np.stack([data[c].astype(np.float64) for c in "xyz"], axis=1)
    if not np.isfinite(out).all():
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0])
        raise MalformedRecordError(f"{path}: vertex {bad} has a non-finite coordinate")
    return out


def save_ply_binary(cloud: PointCloud, path: PathLike) -> None:
    """Binary little-endian float32 PLY writer (read support is what matters; used for fixtures)."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(cloud.points.astype("<f4").tobytes())


# --------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) integer indices

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]


def load_obj(path: PathLike) -> TriangleMesh:
    """Read ``v``/``f`` records of a Wavefront OBJ; polygons are fan-triangulated."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such mesh file: {path}")
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                if tokens[0] == "v":
                    verts.append([float(t) for t in tokens[1:4]])
                elif tokens[0] == "f":
                    idx = []
                    for t in tokens[1:]:
                        k = int(t.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    for j in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[j], idx[j + 1]])
            except (ValueError, IndexError):
                raise MalformedRecordError(f"{path}:{lineno}: bad record {line.strip()!r}") from None
    verts = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.intp).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MalformedRecordError(f"{path}: face references a missing vertex")
    return TriangleMesh(verts, faces)


def triangle_areas(triangles: np.ndarray) -> np.ndarray:
    triangles = np.asarray(triangles, dtype=np.float64)
    cross = np.cross(triangles[:, 1] - triangles[:, 0], triangles[:, 2] - triangles[:, 0])
    return 0.5 * np.sqrt((cross ** 2).sum(axis=1))


def sample_mesh_surface(
    mesh: Union[TriangleMesh, np.ndarray], n: int, seed: int = 0, return_faces: bool = False
):
    """Draw ``n`` points uniformly by area from a triangle mesh surface.

    ``mesh`` may be a :class:`TriangleMesh` or a ``(F, 3, 3)`` array of
    triangles. Sampling is deterministic for a given seed (Philox generator).
    """
    tris = mesh.triangles if isinstance(mesh, TriangleMesh) else np.asarray(mesh, dtype=np.float64)
    tris = tris.reshape(-1, 3, 3)
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = triangle_areas(tris)
    total = areas.sum()
    if len(tris) == 0 or not total > 0.0:
        raise DegenerateMeshError("mesh has zero total surface area")
    rng = np.random.Generator(np.random.Philox(seed))
    face = rng.choice(len(tris), size=n, p=areas / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = tris[face, 0], tris[face, 1], tris[face, 2]
    pts = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    cloud = PointCloud(pts)
    return (cloud, face) if return_faces else cloud

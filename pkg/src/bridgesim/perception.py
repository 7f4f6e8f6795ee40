"""Per-RoI 3D box fitting on a camera-frame point cloud.

Pipeline: range filter, floor plane by RANSAC, floor removal, RoI frustum
crop, sparse-outlier removal, euclidean clustering, projection onto the floor
plane, minimum-area rectangle with catalog footprint, extrusion to a cuboid.

Clouds are ``(N, 3)`` float arrays in the camera frame (x right, y down,
z forward), meters.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

CAMERA_DOWN = np.array([0.0, 1.0, 0.0])


def as_cloud(points) -> np.ndarray:
    cloud = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(cloud)):
        raise ValueError("cloud contains non-finite points")
    return cloud


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be > 0")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be > 0")

    def project(self, points) -> np.ndarray:
        p = as_cloud(points)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.column_stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy])


@dataclass(frozen=True)
class Roi2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    category: str

    def __post_init__(self) -> None:
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("RoI must have u_min < u_max and v_min < v_max")

    def check_bounds(self, intrinsics: CameraIntrinsics) -> None:
        if self.u_min < 0 or self.v_min < 0 or self.u_max > intrinsics.width or self.v_max > intrinsics.height:
            raise ValueError("RoI outside the image")


@dataclass(frozen=True, eq=False)
class Plane:
    """Points x with ``n . x + d = 0``."""

    n: np.ndarray
    d: float

    def __post_init__(self) -> None:
        n = np.asarray(self.n, dtype=float)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "n", n)

    def distance(self, points) -> np.ndarray:
        """Signed distance; positive on the side the normal points to."""
        return as_cloud(points) @ self.n + self.d

    @classmethod
    def through(cls, p0, p1, p2) -> Plane | None:
        normal = np.cross(np.subtract(p1, p0), np.subtract(p2, p0))
        norm = np.linalg.norm(normal)
        scale = max(np.linalg.norm(np.subtract(p1, p0)) * np.linalg.norm(np.subtract(p2, p0)), 1e-300)
        if norm <= 1e-12 * scale:
            return None
        n = normal / norm
        return cls(n, -float(n @ np.asarray(p0, dtype=float))).toward_origin()

    def toward_origin(self) -> Plane:
        """Same plane with the normal pointing to the camera side (d >= 0)."""
        return self if self.d >= 0 else Plane(-self.n, -self.d)


@dataclass(frozen=True)
class CategorySpec:
    name: str
    extents: tuple[float, float, float]  # w, d, h

    def __post_init__(self) -> None:
        if len(self.extents) != 3 or not all(e > 0 for e in self.extents):
            raise ValueError("extents must be three positive lengths")
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))

    @property
    def height(self) -> float:
        return self.extents[2]


@dataclass(frozen=True, eq=False)
class OrientedRect:
    """``dims[0]`` runs along ``angle``, ``dims[1]`` perpendicular to it."""

    center: np.ndarray
    angle: float
    dims: tuple[float, float]

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        u = np.array([math.cos(self.angle), math.sin(self.angle)])
        return u, np.array([-u[1], u[0]])

    def corners(self) -> np.ndarray:
        """Counter-clockwise, starting at the (-, -) corner."""
        u, v = self.axes()
        a, b = self.dims[0] / 2, self.dims[1] / 2
        c = np.asarray(self.center, dtype=float)
        return np.array([c - a * u - b * v, c + a * u - b * v, c + a * u + b * v, c - a * u + b * v])


@dataclass(frozen=True, eq=False)
class Box3D:
    corners: np.ndarray  # (8, 3): bottom CCW about the normal, then matching top
    center: np.ndarray
    category: str = ""

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "center": [float(x) for x in self.center],
            "corners": [[float(x) for x in c] for c in self.corners],
        }

    def is_cuboid(self, tol: float = 1e-6) -> bool:
        c = self.corners
        e1, e2, e3 = c[1] - c[0], c[3] - c[0], c[4] - c[0]
        if min(np.linalg.norm(e) for e in (e1, e2, e3)) <= tol:
            return False
        ortho = max(abs(e1 @ e2), abs(e1 @ e3), abs(e2 @ e3))
        expected = np.array([c[0], c[0] + e1, c[0] + e1 + e2, c[0] + e2])
        expected = np.vstack([expected, expected + e3])
        return ortho <= tol and np.allclose(c, expected, atol=tol) and np.allclose(c.mean(axis=0), self.center, atol=1e-9)


@dataclass(frozen=True)
class DetectionFailure:
    roi_index: int
    category: str
    reason: str

    def to_dict(self) -> dict:
        return {"roi_index": self.roi_index, "category": self.category, "failure": self.reason}


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------


def range_filter(cloud, max_range: float = 1.5) -> np.ndarray:
    """Keep points with norm <= ``max_range``."""
    if not max_range > 0:
        raise ValueError("max_range must be > 0")
    cloud = as_cloud(cloud)
    return cloud[np.linalg.norm(cloud, axis=1) <= max_range]


def _count_inliers(cloud: np.ndarray, plane: Plane, tol: float) -> np.ndarray:
    return np.abs(cloud @ plane.n + plane.d) <= tol


def ransac_plane(cloud, iterations: int = 200, inlier_tol: float = 0.005, seed: int = 0) -> tuple[Plane, np.ndarray]:
    """Plane with the most inliers over sampled point triples.

    When ``iterations`` covers every triple, all triples are tried (in a
    seeded order), so the result matches exhaustive search.
    """
    cloud = as_cloud(cloud)
    n = len(cloud)
    if n < 3:
        raise ValueError("need at least 3 points")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    total = math.comb(n, 3)
    if iterations >= total:
        triples: Iterable = np.array(list(itertools.combinations(range(n), 3)))[rng.permutation(total)]
    else:
        triples = (rng.choice(n, 3, replace=False) for _ in range(iterations))
    best: tuple[Plane, np.ndarray] | None = None
    best_count = -1
    for i, j, k in triples:
        plane = Plane.through(cloud[i], cloud[j], cloud[k])
        if plane is None:
            continue
        mask = _count_inliers(cloud, plane, inlier_tol)
        count = int(mask.sum())
        if count > best_count:
            best, best_count = (plane, mask), count
    if best is None:
        raise ValueError("all sampled triples are collinear")
    return best[0], np.flatnonzero(best[1])


def refit_plane(points, toward: Plane | None = None) -> Plane:
    """Least-squares plane through ``points`` (smallest singular vector)."""
    p = as_cloud(points)
    centroid = p.mean(axis=0)
    _, _, vt = np.linalg.svd(p - centroid, full_matrices=False)
    n = vt[-1] / np.linalg.norm(vt[-1])
    if toward is not None and n @ toward.n < 0:
        n = -n
    plane = Plane(n, -float(n @ centroid))
    return plane if toward is not None else plane.toward_origin()


def find_floor_plane(
    cloud,
    *,
    iterations: int = 200,
    inlier_tol: float = 0.006,
    seed: int = 0,
    down_axis=CAMERA_DOWN,
    max_tilt_deg: float = 30.0,
    attempts: int = 3,
    min_inliers: int = 3,
) -> tuple[Plane, np.ndarray]:
    """RANSAC planes, largest first, until one faces the camera's down axis."""
    cloud = as_cloud(cloud)
    remaining = np.arange(len(cloud))
    down = np.asarray(down_axis, dtype=float) / np.linalg.norm(down_axis)
    cos_limit = math.cos(math.radians(max_tilt_deg))
    for attempt in range(attempts):
        if len(remaining) < 3:
            break
        plane, idx = ransac_plane(cloud[remaining], iterations, inlier_tol, seed + attempt)
        if len(idx) < min_inliers:
            break
        if abs(plane.n @ down) >= cos_limit:
            return plane, remaining[idx]
        remaining = np.delete(remaining, idx)
    raise ValueError("no floor plane")


def crop_by_roi(cloud, roi: Roi2D, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Points in front of the camera whose projection lies in ``roi`` (edges inclusive)."""
    cloud = as_cloud(cloud)
    front = cloud[cloud[:, 2] > 0]
    uv = intrinsics.project(front)
    inside = (uv[:, 0] >= roi.u_min) & (uv[:, 0] <= roi.u_max) & (uv[:, 1] >= roi.v_min) & (uv[:, 1] <= roi.v_max)
    return front[inside]


def radius_outlier_filter(cloud, radius: float = 0.015, min_neighbors: int = 4) -> np.ndarray:
    """Drop points with fewer than ``min_neighbors`` others within ``radius``."""
    cloud = as_cloud(cloud)
    if len(cloud) == 0:
        return cloud
    counts = cKDTree(cloud).query_ball_point(cloud, radius, return_length=True) - 1
    return cloud[counts >= min_neighbors]


def euclidean_cluster(cloud, tol: float = 0.02, min_size: int = 30) -> list[np.ndarray]:
    """Connected components of the within-``tol`` graph, largest first."""
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    cloud = as_cloud(cloud)
    n = len(cloud)
    if n == 0:
        return []
    pairs = cKDTree(cloud).query_pairs(tol, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    sizes = np.bincount(labels)
    keep = [lab for lab in np.argsort(-sizes, kind="stable") if sizes[lab] >= min_size]
    return [cloud[labels == lab] for lab in keep]


def select_target_cluster(clusters: Sequence[np.ndarray]) -> np.ndarray:
    """Largest cluster; ties go to the centroid nearest the camera."""
    if not clusters:
        raise ValueError("no clusters")
    return min(clusters, key=lambda c: (-len(c), float(np.linalg.norm(c.mean(axis=0)))))


def plane_basis(plane: Plane) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(origin, e1, e2) with e1 x e2 = n; origin is the plane point nearest the camera."""
    n = plane.n
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    e1 = axis - (axis @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return -plane.d * n, e1, e2


def project_to_plane(points, plane: Plane) -> np.ndarray:
    """Orthogonal projection into in-plane coordinates, shape (N, 2)."""
    origin, e1, e2 = plane_basis(plane)
    rel = as_cloud(points) - origin
    return np.column_stack([rel @ e1, rel @ e2])


def lift_to_plane(points2d, plane: Plane) -> np.ndarray:
    origin, e1, e2 = plane_basis(plane)
    p = np.asarray(points2d, dtype=float).reshape(-1, 2)
    return origin + p[:, :1] * e1 + p[:, 1:] * e2


def convex_hull(points2d) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points2d, dtype=float).reshape(-1, 2))))
    if len(pts) < 3:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b) -> float:
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _extent(hull: np.ndarray, angle: float) -> tuple[float, float, np.ndarray]:
    u = np.array([math.cos(angle), math.sin(angle)])
    v = np.array([-u[1], u[0]])
    a, b = hull @ u, hull @ v
    center = u * (a.max() + a.min()) / 2 + v * (b.max() + b.min()) / 2
    return a.max() - a.min(), b.max() - b.min(), center


def min_area_rect(points2d) -> tuple[np.ndarray, float, tuple[float, float]]:
    """Minimum-area enclosing rectangle over hull edge directions.

    Returns (center, angle in [0, pi/2), (extent along angle, extent across)).
    """
    hull = convex_hull(points2d)
    if len(hull) < 3:
        raise ValueError("degenerate input: points are collinear")
    best = None
    for i in range(len(hull)):
        edge = hull[(i + 1) % len(hull)] - hull[i]
        angle = math.atan2(edge[1], edge[0]) % (math.pi / 2)
        if math.pi / 2 - angle < 1e-9:
            angle = 0.0
        a, b, center = _extent(hull, angle)
        area = a * b
        if best is None or area < best[0] * (1 - 1e-12):
            best = (area, angle, a, b, center)
    area, angle, a, b, center = best
    if area <= 1e-18:
        raise ValueError("degenerate input: points are collinear")
    return center, angle, (a, b)


def fit_rectangle(points2d, category: CategorySpec) -> OrientedRect:
    """Fitted center and angle with the category footprint as dims.

    The longer fitted side gets the longer footprint side (ties: first axis).
    """
    center, angle, (a, b) = min_area_rect(points2d)
    long_side, short_side = max(category.extents[:2]), min(category.extents[:2])
    dims = (long_side, short_side) if a >= b else (short_side, long_side)
    return OrientedRect(center, angle, dims)


def extrude_box(rect: OrientedRect, plane: Plane, height: float, category: str = "") -> Box3D:
    """Lift ``rect`` onto ``plane`` and extrude it ``height`` along the normal."""
    if not height > 0:
        raise ValueError("height must be > 0")
    bottom = lift_to_plane(rect.corners(), plane)
    corners = np.vstack([bottom, bottom + height * plane.n])
    return Box3D(corners, corners.mean(axis=0), category)


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorParams:
    max_range: float = 1.5
    ransac_iterations: int = 200
    ransac_tol: float = 0.006
    floor_margin: float = 0.012
    max_tilt_deg: float = 30.0
    outlier_radius: float = 0.015
    outlier_min_neighbors: int = 4
    cluster_tol: float = 0.02
    cluster_min_size: int = 30
    seed: int = 0


def detect_boxes(
    cloud,
    rois: Sequence[Roi2D],
    intrinsics: CameraIntrinsics = CameraIntrinsics(),
    catalog: Mapping[str, CategorySpec] | None = None,
    params: DetectorParams = DetectorParams(),
) -> list[Box3D | DetectionFailure]:
    """One Box3D or DetectionFailure per RoI, in RoI order."""
    catalog = catalog or {}
    cloud = range_filter(cloud, params.max_range)
    try:
        plane, inliers = find_floor_plane(
            cloud,
            iterations=params.ransac_iterations,
            inlier_tol=params.ransac_tol,
            seed=params.seed,
            max_tilt_deg=params.max_tilt_deg,
        )
    except ValueError:
        return [DetectionFailure(i, r.category, "no floor plane") for i, r in enumerate(rois)]
    plane = refit_plane(cloud[inliers], toward=plane)
    above = cloud[plane.distance(cloud) > params.floor_margin]

    out: list[Box3D | DetectionFailure] = []
    for i, roi in enumerate(rois):
        spec = catalog.get(roi.category)
        if spec is None:
            out.append(DetectionFailure(i, roi.category, "unknown category"))
            continue
        crop = radius_outlier_filter(crop_by_roi(above, roi, intrinsics), params.outlier_radius, params.outlier_min_neighbors)
        clusters = euclidean_cluster(crop, params.cluster_tol, params.cluster_min_size)
        if not clusters:
            out.append(DetectionFailure(i, roi.category, "no cluster"))
            continue
        target = select_target_cluster(clusters)
        try:
            rect = fit_rectangle(project_to_plane(target, plane), spec)
        except ValueError:
            out.append(DetectionFailure(i, roi.category, "degenerate cluster"))
            continue
        out.append(extrude_box(rect, plane, spec.height, spec.name))
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def write_ply(path: str | Path, cloud) -> None:
    cloud = as_cloud(cloud)
    header = f"ply\nformat ascii 1.0\nelement vertex {len(cloud)}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    with open(path, "w") as fh:
        fh.write(header)
        for x, y, z in cloud:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        n, props = None, []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                n = int(parts[2])
            elif parts[0] == "property" and n is not None:
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if n is None:
            raise ValueError("PLY has no vertex element")
        cols = [props.index(c) for c in "xyz"]
        rows = [next(fh).split() for _ in range(n)]
    data = np.array(rows, dtype=float).reshape(-1, len(props))
    return data[:, cols]


def write_cloud_csv(path: str | Path, cloud) -> None:
    cloud = as_cloud(cloud)
    with open(path, "w") as fh:
        fh.write("x,y,z\n")
        for x, y, z in cloud:
            fh.write(f"{x:.6f},{y:.6f},{z:.6f}\n")


def read_cloud_csv(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return as_cloud(data)


def read_cloud(path: str | Path) -> np.ndarray:
    return read_ply(path) if str(path).lower().endswith(".ply") else read_cloud_csv(path)


def rois_to_json(rois: Sequence[Roi2D]) -> list[dict]:
    return [
        {"u_min": r.u_min, "v_min": r.v_min, "u_max": r.u_max, "v_max": r.v_max, "category": r.category} for r in rois
    ]


def rois_from_json(data: list[dict]) -> list[Roi2D]:
    return [Roi2D(d["u_min"], d["v_min"], d["u_max"], d["v_max"], d["category"]) for d in data]


def catalog_from_json(data: Mapping[str, Sequence[float]]) -> dict[str, CategorySpec]:
    return {name: CategorySpec(name, tuple(ext)) for name, ext in data.items()}


def catalog_to_json(catalog: Mapping[str, CategorySpec]) -> dict[str, list[float]]:
    return {name: list(spec.extents) for name, spec in sorted(catalog.items())}


def load_json(path: str | Path):
    return json.loads(Path(path).read_text())

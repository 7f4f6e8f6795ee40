"""Synthetic tabletop scenes: cuboids on a floor seen by a pitched pinhole camera.

World frame: floor is z = 0, z up. The camera sits above the origin looking
along +y, pitched down. Output clouds, boxes and RoIs are in the camera frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .perception import Box3D, CameraIntrinsics, CategorySpec, Roi2D, as_cloud

DEFAULT_CATALOG = {
    "snack_box": CategorySpec("snack_box", (0.15, 0.06, 0.22)),
    "cereal_box": CategorySpec("cereal_box", (0.19, 0.07, 0.28)),
    "milk_carton": CategorySpec("milk_carton", (0.07, 0.07, 0.20)),
}


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectPose:
    category: str
    x: float  # floor position, meters
    y: float
    yaw: float  # radians about world z


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectPose, ...]
    camera_height: float = 0.6
    camera_pitch_deg: float = 25.0
    density: float = 15000.0  # points per m^2
    noise_sigma: float = 0.002
    outlier_fraction: float = 0.05
    floor_extent: tuple[float, float, float, float] = (-0.7, 0.7, 0.2, 1.5)  # x0, x1, y0, y1
    roi_padding_px: float = 8.0
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    catalog: dict = field(default_factory=lambda: dict(DEFAULT_CATALOG))

    def validate(self) -> None:
        if self.density <= 0:
            raise SceneError("density must be > 0")
        if self.noise_sigma < 0:
            raise SceneError("noise_sigma must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise SceneError("outlier_fraction must be in [0, 1)")
        if self.camera_height <= 0:
            raise SceneError("camera_height must be > 0")
        for obj in self.objects:
            if obj.category not in self.catalog:
                raise SceneError(f"unknown category {obj.category!r}")
        footprints = [footprint(o, self.catalog[o.category]) for o in self.objects]
        for (i, a), (j, b) in _pairs(list(enumerate(footprints))):
            if polygons_overlap(a, b):
                raise SceneError(f"objects {i} and {j} overlap")

    @classmethod
    def from_dict(cls, data: dict) -> SceneSpec:
        data = dict(data)
        objects = tuple(
            ObjectPose(o["category"], float(o["x"]), float(o["y"]), float(o.get("yaw", 0.0))) for o in data.pop("objects")
        )
        catalog = dict(DEFAULT_CATALOG)
        for name, ext in data.pop("catalog", {}).items():
            catalog[name] = CategorySpec(name, tuple(ext))
        if "intrinsics" in data:
            data["intrinsics"] = CameraIntrinsics(**data["intrinsics"])
        if "floor_extent" in data:
            data["floor_extent"] = tuple(data["floor_extent"])
        known = set(cls.__dataclass_fields__) - {"objects", "catalog"}
        unknown = set(data) - known
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        return cls(objects, catalog=catalog, **data)


def _pairs(items):
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            yield items[i], items[j]


def footprint(obj: ObjectPose, spec: CategorySpec) -> np.ndarray:
    """Floor rectangle corners (CCW) in world x, y."""
    w, d, _ = spec.extents
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    local = np.array([[-w, -d], [w, -d], [w, d], [-w, d]]) / 2
    return local @ np.array([[c, s], [-s, c]]) + [obj.x, obj.y]


def polygons_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for convex polygons (touching counts as overlap)."""
    for poly in (a, b):
        for i in range(len(poly)):
            edge = poly[(i + 1) % len(poly)] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa, pb = a @ axis, b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def camera_pose(height: float, pitch_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """(R, C): world-from-camera rotation (columns x, y, z axes) and camera center."""
    p = math.radians(pitch_deg)
    x = [1.0, 0.0, 0.0]
    y = [0.0, -math.sin(p), -math.cos(p)]
    z = [0.0, math.cos(p), -math.sin(p)]
    return np.array([x, y, z]).T, np.array([0.0, 0.0, height])


def world_to_camera(points, R: np.ndarray, C: np.ndarray) -> np.ndarray:
    return (as_cloud(points) - C) @ R


def box_corners_world(obj: ObjectPose, spec: CategorySpec) -> np.ndarray:
    """Bottom CCW (seen from above), then top."""
    fp = footprint(obj, spec)
    bottom = np.column_stack([fp, np.zeros(4)])
    return np.vstack([bottom, bottom + [0.0, 0.0, spec.height]])


def _sample_rect(rng, origin, e1, e2, density) -> np.ndarray:
    area = np.linalg.norm(np.cross(e1, e2))
    n = rng.poisson(density * area)
    uv = rng.random((n, 2))
    return origin + uv[:, :1] * e1 + uv[:, 1:] * e2


def _inside(points_xy: np.ndarray, poly: np.ndarray) -> np.ndarray:
    inside = np.ones(len(points_xy), dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cross = (b[0] - a[0]) * (points_xy[:, 1] - a[1]) - (b[1] - a[1]) * (points_xy[:, 0] - a[0])
        inside &= cross >= 0
    return inside


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: np.ndarray
    boxes: list[Box3D]
    rois: list[Roi2D]
    spec: SceneSpec

    def ground_truth(self) -> list[dict]:
        out = []
        for obj, box in zip(self.spec.objects, self.boxes):
            d = box.to_dict()
            d.update({"floor_x": obj.x, "floor_y": obj.y, "yaw": obj.yaw})
            out.append(d)
        return out


def gen_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    """Sample visible cuboid faces and the surrounding floor, add noise and outliers."""
    spec.validate()
    rng = np.random.default_rng(seed)
    R, C = camera_pose(spec.camera_height, spec.camera_pitch_deg)
    x0, x1, y0, y1 = spec.floor_extent
    floor = _sample_rect(rng, np.array([x0, y0, 0.0]), np.array([x1 - x0, 0, 0]), np.array([0, y1 - y0, 0]), spec.density)
    parts = []
    boxes, rois = [], []
    for obj in spec.objects:
        cat = spec.catalog[obj.category]
        fp = footprint(obj, cat)
        floor = floor[~_inside(floor[:, :2], fp)]
        corners = box_corners_world(obj, cat)
        faces = [(corners[4], corners[5] - corners[4], corners[7] - corners[4], np.array([0.0, 0.0, 1.0]))]
        for i in range(4):
            a, b = corners[i], corners[(i + 1) % 4]
            edge = b - a
            normal = np.array([edge[1], -edge[0], 0.0]) / np.linalg.norm(edge)
            faces.append((a, edge, np.array([0.0, 0.0, cat.height]), normal))
        for origin, e1, e2, normal in faces:
            centre = origin + (e1 + e2) / 2
            if normal @ (C - centre) > 0:
                parts.append(_sample_rect(rng, origin, e1, e2, spec.density))
        cam_corners = world_to_camera(corners, R, C)
        boxes.append(Box3D(cam_corners, cam_corners.mean(axis=0), obj.category))
        uv = spec.intrinsics.project(cam_corners)
        pad = spec.roi_padding_px
        rois.append(
            Roi2D(
                float(max(uv[:, 0].min() - pad, 0.0)),
                float(max(uv[:, 1].min() - pad, 0.0)),
                float(min(uv[:, 0].max() + pad, spec.intrinsics.width)),
                float(min(uv[:, 1].max() + pad, spec.intrinsics.height)),
                obj.category,
            )
        )
    clean = world_to_camera(np.vstack([floor, *parts]), R, C)
    clean = clean + rng.normal(0.0, spec.noise_sigma, clean.shape) if spec.noise_sigma > 0 else clean
    n_out = int(round(spec.outlier_fraction * len(clean) / (1 - spec.outlier_fraction)))
    lo, hi = clean.min(axis=0), clean.max(axis=0)
    outliers = lo + rng.random((n_out, 3)) * (hi - lo)
    cloud = np.vstack([clean, outliers])
    cloud = cloud[rng.permutation(len(cloud))]
    return Scene(cloud, boxes, rois, spec)


def random_pose(rng: np.random.Generator, category: str) -> ObjectPose:
    return ObjectPose(category, float(rng.uniform(-0.25, 0.25)), float(rng.uniform(0.6, 1.0)), float(rng.uniform(0, math.pi)))


def single_object_specs(categories: Sequence[str], poses_per_category: int, seed: int, **kwargs) -> list[SceneSpec]:
    rng = np.random.default_rng(seed)
    return [
        SceneSpec((random_pose(rng, cat),), **kwargs) for cat in categories for _ in range(poses_per_category)
    ]

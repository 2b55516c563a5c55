"""Pinhole camera: projection, splat rendering, coverage counting.

Image coordinates are continuous with integer pixel centers: pixel (u, v)
covers the unit square centered on the integer point, images are indexed
[row, col] = [v, u]. The camera frame has +z forward, +x toward image
right, +y toward image bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .particles import ValidationError

__all__ = ["CameraModel", "render_coverage", "visible_mask"]

_MIN_DEPTH = 1e-9


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")

    @classmethod
    def look_at(
        cls,
        position,
        target,
        up=(0.0, 0.0, 1.0),
        focal=(525.0, 525.0),
        resolution=(640, 480),
        principal=None,
    ) -> "CameraModel":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(forward, right)
        rotation = np.vstack([right, down, forward])
        if principal is None:
            principal = ((resolution[0] - 1) / 2.0, (resolution[1] - 1) / 2.0)
        return cls(
            fx=float(focal[0]),
            fy=float(focal[1]),
            cx=float(principal[0]),
            cy=float(principal[1]),
            width=int(resolution[0]),
            height=int(resolution[1]),
            rotation=rotation,
            translation=-rotation @ position,
        )

    @property
    def resolution(self):
        return (self.width, self.height)

    @property
    def origin(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray):
        """Continuous pixel coordinates plus a validity mask (z > 0).

        Points at or behind the camera plane are marked invalid and their
        coordinates are unusable, never clamped.
        """
        cam = self.world_to_camera(points)
        z = cam[:, 2]
        valid = z > _MIN_DEPTH
        zsafe = np.where(valid, z, 1.0)
        u = self.fx * cam[:, 0] / zsafe + self.cx
        v = self.fy * cam[:, 1] / zsafe + self.cy
        return np.column_stack([u, v]), valid

    def depths(self, points: np.ndarray) -> np.ndarray:
        return self.world_to_camera(points)[:, 2]

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        u = np.rint(uv[:, 0])
        v = np.rint(uv[:, 1])
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    def backproject_image_vector(self, image_vector, depth: float) -> np.ndarray:
        """3D world vector in the plane parallel to the image plane.

        The result projects back onto `image_vector` at the given depth:
        equal pixel displacements correspond to equal metric displacements
        at that depth.
        """
        if depth <= 0:
            raise ValidationError(f"depth must be positive, got {depth}")
        du, dv = float(image_vector[0]), float(image_vector[1])
        cam_vec = np.array([du * depth / self.fx, dv * depth / self.fy, 0.0])
        return self.rotation.T @ cam_vec

    def backproject_image_vectors(self, image_vectors: np.ndarray, depths: np.ndarray) -> np.ndarray:
        cam = np.zeros((len(depths), 3))
        cam[:, 0] = image_vectors[:, 0] * depths / self.fx
        cam[:, 1] = image_vectors[:, 1] * depths / self.fy
        return cam @ self.rotation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        return cls(**{**data, "rotation": np.array(data["rotation"]), "translation": np.array(data["translation"])})


def visible_mask(camera: CameraModel, positions: np.ndarray, posed_scene=None) -> np.ndarray:
    """Particles that project inside the image with an unobstructed segment
    from the particle to the camera center."""
    positions = np.atleast_2d(positions)
    if positions.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    uv, valid = camera.project(positions)
    vis = valid.copy()
    vis[valid] &= camera.in_image(uv[valid])
    if posed_scene is not None and np.any(vis):
        idx = np.nonzero(vis)[0]
        blocked = posed_scene.occluded(positions[idx], camera.origin)
        vis[idx[blocked]] = False
    return vis


def render_coverage(
    camera: CameraModel,
    positions: np.ndarray,
    visible: np.ndarray | None = None,
    splat_radius: float = 0.0025,
) -> np.ndarray:
    """Per-pixel count of visible particle splats.

    Each visible particle marks every pixel whose center lies within its
    projected disc radius fx * splat_radius / depth. The binary liquid
    mask is exactly coverage > 0.
    """
    if splat_radius <= 0:
        raise ValidationError(f"splat radius must be positive, got {splat_radius}")
    coverage = np.zeros((camera.height, camera.width), dtype=np.int32)
    positions = np.atleast_2d(positions)
    if positions.shape[0] == 0:
        return coverage
    if visible is None:
        visible = np.ones(positions.shape[0], dtype=bool)
    pts = positions[visible]
    if pts.shape[0] == 0:
        return coverage
    uv, valid = camera.project(pts)
    z = camera.depths(pts)
    uv, z = uv[valid], z[valid]
    if uv.shape[0] == 0:
        return coverage
    radii = camera.fx * splat_radius / z
    rmax = int(np.ceil(radii.max() + 0.5))
    span = np.arange(-rmax, rmax + 1)
    ox, oy = np.meshgrid(span, span, indexing="xy")
    offsets = np.column_stack([ox.ravel(), oy.ravel()])  # (K, 2)
    base = np.rint(uv).astype(np.int64)
    px = base[:, None, 0] + offsets[None, :, 0]
    py = base[:, None, 1] + offsets[None, :, 1]
    du = px - uv[:, None, 0]
    dv = py - uv[:, None, 1]
    hit = du * du + dv * dv <= (radii**2)[:, None]
    hit &= (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    flat = (py * camera.width + px)[hit]
    counts = np.bincount(flat, minlength=camera.width * camera.height)
    return counts.reshape(camera.height, camera.width).astype(np.int32)

"""Cameras, pinhole projection, and pose construction.

Conventions used throughout the package:

* World frame is right-handed with +z up.
* A camera pose is the 4x4 camera-to-world rigid transform. Camera axes
  follow the OpenGL convention: +x is image right, +y is image up, and
  the camera looks along -z.
* Pixel (row, col) indexes with row 0 at the top of the image; the pixel
  center sits at continuous image coordinates (u, v) = (col, row), so a
  pixel exactly at (cy, cx) maps to the optical axis.
* Depth images store distance along the optical axis (positive z-depth),
  not distance along the ray.
"""

from dataclasses import dataclass

import numpy as np

_EPS = 1e-9


@dataclass
class Camera:
    """Pinhole camera with a camera-to-world pose."""

    pose: np.ndarray  # (4, 4) world-from-camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {self.pose.shape}")
        rot = self.pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("pose rotation block has negative determinant")
        if not np.allclose(self.pose[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise ValueError("pose last row must be (0, 0, 0, 1)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def forward(self) -> np.ndarray:
        """Unit viewing direction in world coordinates (-z camera axis)."""
        return -self.pose[:3, 2]


def pixel_directions(camera: Camera, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Unit world-space ray directions through the given pixel centers.

    Returns an (N, 3) array; rows/cols may be float for sub-pixel rays.
    """
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d_cam = np.stack(
        [
            (cols - camera.cx) / camera.fx,
            -(rows - camera.cy) / camera.fy,
            -np.ones_like(rows),
        ],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def ray_depth_scale(camera: Camera, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Factor converting z-depth to distance along the (unit) pixel ray."""
    u = (np.asarray(cols, dtype=np.float64) - camera.cx) / camera.fx
    v = (np.asarray(rows, dtype=np.float64) - camera.cy) / camera.fy
    return np.sqrt(u * u + v * v + 1.0)


def project_points(camera: Camera, points: np.ndarray):
    """Project world points into the image.

    Args:
        points: (N, 3) world coordinates.

    Returns:
        (u, v, z) arrays: continuous pixel coordinates and positive
        z-depth. Points behind the camera get z <= 0 and meaningless u/v;
        callers must mask on z > 0 before use.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = (points - camera.position) @ camera.rotation
    z = -p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.cx + camera.fx * p_cam[:, 0] / z
        v = camera.cy - camera.fy * p_cam[:, 1] / z
    return u, v, z


def lookat_pose(eye, target, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from `eye` toward `target`.

    The camera -z axis points at the target. If `up_hint` is parallel to
    the viewing direction, the world axis least aligned with it is used
    instead so the result is always well defined.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up_hint = np.asarray(up_hint, dtype=np.float64)

    forward = target - eye
    dist = np.linalg.norm(forward)
    if dist <= _EPS:
        raise ValueError("lookat target coincides with camera position")
    forward = forward / dist

    if np.linalg.norm(np.cross(forward, up_hint)) <= 1e-8:
        # Degenerate hint: fall back to the axis most orthogonal to forward.
        axis = np.argmin(np.abs(forward))
        up_hint = np.zeros(3)
        up_hint[axis] = 1.0

    right = np.cross(forward, up_hint)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)

    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def intersect_aabb(origins: np.ndarray, directions: np.ndarray,
                   bbox_min, bbox_max):
    """Entry/exit ray parameters against an axis-aligned box.

    Returns (t_near, t_far); the ray misses the box where t_near > t_far.
    Zero direction components are handled via IEEE infinities.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bbox_min - origins) * inv
        t1 = (bbox_max - origins) * inv
    # A zero component with the origin on the slab boundary yields NaN;
    # treat that slab as non-constraining.
    lo = np.fmin(t0, t1)
    hi = np.fmax(t0, t1)
    t_near = np.nanmax(lo, axis=1)
    t_far = np.nanmin(hi, axis=1)
    return t_near, t_far

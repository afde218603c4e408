"""Camera mathematics, ray maps, depth unprojection and point-cloud rendering.

Conventions used throughout the package:

* World frame is right-handed with z up.
* Extrinsics are world-to-camera: ``x_cam = R @ x_world + t``.
* Camera frame is the usual computer-vision one: x right, y down, z forward.
* Continuous pixel coordinates place integer coordinates at pixel centers,
  so pixel (row, col) spans ``[col-0.5, col+0.5] x [row-0.5, row+0.5]`` and
  the principal axis of a camera with ``cx = (W-1)/2`` exits through the
  image center.
* A patch grid of ``grid_w`` patches over ``W`` pixels has patch ``i``
  centered at the continuous coordinate ``(i + 0.5) * (W / grid_w) - 0.5``.

All functions are pure and operate on float64 internally.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCameraError, ShapeMismatchError, SingularProjectionError

_MIN_CAMERA_DEPTH = 1e-6  # points closer than this are culled before division
_WFPC_MAGIC = b"WFPC"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidCameraError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def matrix_ndc(self) -> np.ndarray:
        """K composed with the map from pixels to [-1, 1] device coordinates.

        Keeps projection-matrix entries O(1), which matters when the matrix is
        used as a linear operator inside attention.
        """
        s = np.array(
            [
                [2.0 / self.width, 0.0, (1.0 - self.width) / self.width],
                [0.0, 2.0 / self.height, (1.0 - self.height) / self.height],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )
        return s @ self.matrix()


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidCameraError(f"rotation must be 3x3, got {r.shape}")
    if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
        raise InvalidCameraError("rotation is not orthonormal")
    if np.linalg.det(r) < 0:
        raise InvalidCameraError("rotation has determinant -1 (reflection)")
    return r


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: ``x_cam = rotation @ x_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera matrix."""
        m = np.eye(4, dtype=np.float64)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        """Camera origin in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    def flat_rt(self) -> np.ndarray:
        """Row-major (R | t) as a 12-vector."""
        return np.concatenate([self.rotation.reshape(9), self.translation])


def identity_pose() -> CameraPose:
    return CameraPose(np.eye(3), np.zeros(3))


def compose_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Compose two world-to-camera poses, applying ``b`` first, then ``a``."""
    return CameraPose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse_pose(a: CameraPose) -> CameraPose:
    return CameraPose(a.rotation.T, -a.rotation.T @ a.translation)


def rotation_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle in radians between two rotation matrices."""
    cos = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True)
class ProjectionMatrix:
    """4x4 homogeneous projection: K (embedded) composed with [R | t]."""

    P: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.P, dtype=np.float64)
        if p.shape != (4, 4):
            raise SingularProjectionError(f"projection must be 4x4, got {p.shape}")
        if abs(np.linalg.det(p)) <= 1e-12:
            raise SingularProjectionError("projection matrix is singular")
        object.__setattr__(self, "P", p)

    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.P)


@dataclass(frozen=True)
class PluckerRayMap:
    """Per-patch rays as (moment, direction) 6-vectors on a grid.

    ``moments[i, j] = origin x directions[i, j]`` with unit directions.
    """

    moments: np.ndarray  # (grid_h, grid_w, 3)
    directions: np.ndarray  # (grid_h, grid_w, 3)
    origin: np.ndarray  # (3,) camera center in world coordinates

    def as_array(self) -> np.ndarray:
        """(grid_h, grid_w, 6) array with moment in [..., :3] and direction in [..., 3:]."""
        return np.concatenate([self.moments, self.directions], axis=-1)


@dataclass
class DepthMap:
    """Per-pixel depth in world units with a validity mask."""

    depth: np.ndarray  # (H, W) float
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape or self.depth.ndim != 2:
            raise ShapeMismatchError(
                f"depth {self.depth.shape} and valid {self.valid.shape} must be equal 2-d shapes"
            )
        if np.any(self.depth[self.valid] <= 0):
            raise ValueError("valid pixels must carry positive depth")


@dataclass
class PointCloud:
    """Colored world-space points."""

    positions: np.ndarray  # (N, 3) float64
    colors: np.ndarray  # (N, 3) float in [0, 1]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ShapeMismatchError(
                f"positions ({len(self.positions)}) and colors ({len(self.colors)}) differ in length"
            )
        if self.colors.size and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    def extent(self) -> float:
        """Diagonal of the axis-aligned bounding box (0 for empty clouds)."""
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))


def merge_clouds(clouds: list[PointCloud]) -> PointCloud:
    if not clouds:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(
        np.concatenate([c.positions for c in clouds], axis=0),
        np.concatenate([c.colors for c in clouds], axis=0),
    )


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud as magic 'WFPC', u32 N, Nx3 f32 positions, Nx3 f32 colors (LE)."""
    with open(path, "wb") as f:
        f.write(_WFPC_MAGIC)
        f.write(struct.pack("<I", len(cloud)))
        f.write(cloud.positions.astype("<f4").tobytes())
        f.write(cloud.colors.astype("<f4").tobytes())


def load_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _WFPC_MAGIC:
        raise ValueError(f"bad point-cloud magic {data[:4]!r}")
    (n,) = struct.unpack_from("<I", data, 4)
    need = 8 + n * 24
    if len(data) < need:
        raise ValueError(f"truncated point-cloud file: {len(data)} < {need} bytes")
    pos = np.frombuffer(data, dtype="<f4", count=n * 3, offset=8).reshape(n, 3)
    col = np.frombuffer(data, dtype="<f4", count=n * 3, offset=8 + n * 12).reshape(n, 3)
    return PointCloud(pos, np.clip(col, 0.0, 1.0))


@dataclass
class AnchorRender:
    """Z-buffered point-cloud rendering at a target view."""

    rgb: np.ndarray  # (H, W, 3) float in [0, 1]; zero where mask is false
    mask: np.ndarray  # (H, W) bool, true where >= 1 point landed
    depth: np.ndarray  # (H, W) float; camera depth of the winning point, 0 elsewhere

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if np.any(self.rgb[~self.mask] != 0):
            raise ValueError("rgb must be zero outside the mask")
        if np.any(self.depth[self.mask] <= 0):
            raise ValueError("covered pixels must carry positive depth")

    def hole_fraction(self) -> float:
        return float(1.0 - self.mask.mean())


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def make_projection_matrix(
    K: CameraIntrinsics, E: CameraPose, *, ndc: bool = False
) -> ProjectionMatrix:
    """Build the 4x4 projection ``K~ @ [R | t]``.

    Dividing ``P @ [x; 1]`` by its third component yields pixel coordinates
    (u, v) for points with positive camera depth.  With ``ndc=True`` the
    intrinsic part is normalized to [-1, 1] device coordinates.
    """
    k4 = np.eye(4, dtype=np.float64)
    k4[:3, :3] = K.matrix_ndc() if ndc else K.matrix()
    return ProjectionMatrix(k4 @ E.matrix())


def relative_projection(P_i: ProjectionMatrix, P_j: ProjectionMatrix) -> np.ndarray:
    """``P_i @ P_j^{-1}``: invariant to a global rigid re-basing of the world frame."""
    return P_i.P @ P_j.inv()


def project_points(
    points: np.ndarray, K: CameraIntrinsics, E: CameraPose
) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to continuous pixel coordinates.

    Returns (uv, depth) where uv is (N, 2) and depth the camera-frame z.
    Points at or behind the camera get depth <= 0 and undefined uv; callers
    must cull on depth.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = p @ E.rotation.T + E.translation
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) < _MIN_CAMERA_DEPTH, _MIN_CAMERA_DEPTH, z)
    u = K.fx * cam[:, 0] / safe_z + K.cx
    v = K.fy * cam[:, 1] / safe_z + K.cy
    return np.stack([u, v], axis=1), z


def compute_plucker_map(
    K: CameraIntrinsics, E: CameraPose, grid_h: int, grid_w: int
) -> PluckerRayMap:
    """Rays through patch centers as (o x d, d) with unit world-space directions."""
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid dims must be >= 1, got {grid_h}x{grid_w}")
    patch_w = K.width / grid_w
    patch_h = K.height / grid_h
    cols = (np.arange(grid_w) + 0.5) * patch_w - 0.5
    rows = (np.arange(grid_h) + 0.5) * patch_h - 0.5
    u, v = np.meshgrid(cols, rows)  # (grid_h, grid_w)
    d_cam = np.stack(
        [(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1
    )
    d_world = d_cam @ E.rotation  # == (R^T @ d_cam^T)^T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origin = E.camera_center()
    moments = np.cross(np.broadcast_to(origin, d_world.shape), d_world)
    return PluckerRayMap(moments=moments, directions=d_world, origin=origin)


def unproject_depth(
    depth: DepthMap, rgb: np.ndarray, K: CameraIntrinsics, E: CameraPose
) -> PointCloud:
    """Lift every valid pixel to a world point carrying the pixel's color.

    ``rgb`` may be float in [0, 1] or uint8; one point per valid pixel, in
    row-major pixel order.
    """
    rgb = np.asarray(rgb)
    if rgb.shape[:2] != depth.depth.shape:
        raise ShapeMismatchError(f"rgb {rgb.shape[:2]} vs depth {depth.depth.shape}")
    if rgb.dtype == np.uint8:
        rgb = rgb.astype(np.float64) / 255.0
    h, w = depth.depth.shape
    vv, uu = np.nonzero(depth.valid)
    z = depth.depth[vv, uu]
    x_cam = (uu - K.cx) / K.fx * z
    y_cam = (vv - K.cy) / K.fy * z
    cam = np.stack([x_cam, y_cam, z], axis=1)
    world = (cam - E.translation) @ E.rotation  # == R^T @ (cam - t)
    colors = rgb[vv, uu].astype(np.float64)
    return PointCloud(world, np.clip(colors, 0.0, 1.0))


def render_point_cloud(
    cloud: PointCloud, K: CameraIntrinsics, E: CameraPose, width: int, height: int
) -> AnchorRender:
    """Z-buffer splat with 1-pixel splats.

    The nearest point (smallest positive camera depth) wins each pixel; depth
    ties break toward the lower point index.  Points behind the camera or
    outside the frustum are dropped.
    """
    rgb = np.zeros((height, width, 3), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    depth = np.zeros((height, width), dtype=np.float64)
    if len(cloud) == 0:
        return AnchorRender(rgb=rgb, mask=mask, depth=depth)

    uv, z = project_points(cloud.positions, K, E)
    col = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    keep = (z > _MIN_CAMERA_DEPTH) & (col >= 0) & (col < width) & (row >= 0) & (row < height)
    if not np.any(keep):
        return AnchorRender(rgb=rgb, mask=mask, depth=depth)

    idx = np.nonzero(keep)[0]
    order = np.lexsort((idx, z[idx]))  # primary: depth ascending; secondary: index
    idx = idx[order]
    pix = row[idx] * width + col[idx]
    _, first = np.unique(pix, return_index=True)
    winners = idx[first]
    r, c = row[winners], col[winners]
    rgb[r, c] = cloud.colors[winners]
    depth[r, c] = z[winners]
    mask[r, c] = True
    return AnchorRender(rgb=rgb, mask=mask, depth=depth)

"""Procedural 3D scenes with analytic ray-cast rendering.

Scenes are rooms bounded by a textured ground plane and optional walls,
populated with axis-aligned boxes and spheres carrying low-frequency
procedural textures.  Rendering intersects each pixel ray analytically, so
depth is exact and every rendered view comes with ground-truth geometry.
Trajectories are sampled with collision avoidance so every camera center
keeps a configured clearance from all surfaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NoValidTrajectoryError
from .geometry import CameraIntrinsics, CameraPose, DepthMap

SKY_COLOR = np.array([0.62, 0.74, 0.92])
_RAY_EPS = 1e-9


# ---------------------------------------------------------------------------
# Textures: smooth procedural color fields over world coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Texture:
    """Low-frequency procedural color field.

    kind 'gradient': lerp between two colors along a world direction.
    kind 'checker':  soft two-color checkerboard in world coordinates.
    kind 'bands':    sinusoidal blend between two colors along a direction.
    """

    kind: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    direction: tuple[float, float, float]
    scale: float
    phase: float = 0.0

    def sample(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        proj = p @ np.asarray(self.direction)
        if self.kind == "gradient":
            w = np.clip(proj * self.scale + self.phase, 0.0, 1.0)
        elif self.kind == "bands":
            w = 0.5 * (1.0 + np.sin(proj * self.scale + self.phase))
        elif self.kind == "checker":
            # Smoothed checker: product of two soft square waves keeps the
            # field low-frequency enough for a small model to learn.
            u = np.sin(p[..., 0] * self.scale + self.phase)
            v = np.sin(p[..., 1] * self.scale + self.phase)
            w = 0.5 * (1.0 + np.tanh(3.0 * u * v))
        else:
            raise ConfigError(f"unknown texture kind {self.kind!r}")
        return a + (b - a) * w[..., None]


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Slab test; returns nearest positive t per ray (inf on miss)."""
        c = np.asarray(self.center)
        h = np.asarray(self.size) / 2.0
        lo, hi = c - h, c + h
        inv = 1.0 / np.where(np.abs(d) < _RAY_EPS, _RAY_EPS, d)
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
        tmin = np.minimum(t0, t1).max(axis=-1)
        tmax = np.maximum(t0, t1).min(axis=-1)
        hit = (tmax >= tmin) & (tmax > _RAY_EPS)
        t = np.where(tmin > _RAY_EPS, tmin, tmax)
        return np.where(hit, t, np.inf)

    def distance(self, p: np.ndarray) -> float:
        """Signed distance from a point to the box surface (negative inside)."""
        q = np.abs(np.asarray(p) - np.asarray(self.center)) - np.asarray(self.size) / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0))
        inside = min(q.max(), 0.0)
        return float(outside + inside)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius**2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = -b - sq
        t_far = -b + sq
        t = np.where(t_near > _RAY_EPS, t_near, t_far)
        return np.where((disc >= 0) & (t > _RAY_EPS), t, np.inf)

    def distance(self, p: np.ndarray) -> float:
        return float(np.linalg.norm(np.asarray(p) - np.asarray(self.center)) - self.radius)


@dataclass(frozen=True)
class Plane:
    """Axis-aligned plane clipped to the scene bounds (ground or wall)."""

    axis: int  # 0=x, 1=y, 2=z
    offset: float
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray, bounds: "Bounds") -> np.ndarray:
        dn = d[..., self.axis]
        safe = np.where(np.abs(dn) < _RAY_EPS, _RAY_EPS, dn)
        t = (self.offset - o[..., self.axis]) / safe
        p = o + t[..., None] * d
        inside = np.ones(t.shape, dtype=bool)
        for ax in range(3):
            if ax == self.axis:
                continue
            inside &= (p[..., ax] >= bounds.lo[ax] - 1e-9) & (p[..., ax] <= bounds.hi[ax] + 1e-9)
        return np.where((np.abs(dn) >= _RAY_EPS) & (t > _RAY_EPS) & inside, t, np.inf)

    def distance(self, p: np.ndarray) -> float:
        return float(abs(np.asarray(p)[self.axis] - self.offset))


Primitive = Box | Sphere | Plane


@dataclass(frozen=True)
class Bounds:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise ConfigError(f"degenerate bounds {self.lo}..{self.hi}")

    def contains(self, p: np.ndarray, margin: float = 0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= np.asarray(self.lo) + margin) and np.all(p <= np.asarray(self.hi) - margin))

    def center(self) -> np.ndarray:
        return (np.asarray(self.lo) + np.asarray(self.hi)) / 2.0

    def extent(self) -> float:
        return float(np.linalg.norm(np.asarray(self.hi) - np.asarray(self.lo)))


@dataclass(frozen=True)
class Scene:
    """A deterministic function of (seed, config); see ``generate_scene``."""

    seed: int
    primitives: tuple[Primitive, ...]
    bounds: Bounds

    def surface_distance(self, p: np.ndarray) -> float:
        """Distance from a point to the nearest primitive surface."""
        return min(
            prim.distance(p) if not isinstance(prim, Plane) else prim.distance(p)
            for prim in self.primitives
        )

    def centroid(self) -> np.ndarray:
        """Mean of object centers; falls back to the bounds center."""
        centers = [np.asarray(p.center) for p in self.primitives if isinstance(p, (Box, Sphere))]
        if not centers:
            return self.bounds.center()
        return np.mean(centers, axis=0)


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for procedural scene generation.

    ``primitive_range`` counts every primitive including the ground plane and
    walls, so its lower bound must leave room for the structural ones.
    """

    primitive_range: tuple[int, int] = (8, 14)
    bounds: Bounds = field(default_factory=lambda: Bounds((-5.0, -5.0, 0.0), (5.0, 5.0, 4.0)))
    include_ground: bool = True
    include_walls: bool = True
    object_size_range: tuple[float, float] = (0.6, 1.8)
    texture_kinds: tuple[str, ...] = ("gradient", "bands", "checker")
    texture_scale_range: tuple[float, float] = (0.3, 1.4)

    def n_structural(self) -> int:
        return (1 if self.include_ground else 0) + (4 if self.include_walls else 0)

    def __post_init__(self):
        lo, hi = self.primitive_range
        if lo < self.n_structural() + 1:
            raise ConfigError(
                f"primitive_range lower bound {lo} leaves no room for "
                f"{self.n_structural()} structural primitives plus one object"
            )
        if hi < lo:
            raise ConfigError(f"empty primitive_range {self.primitive_range}")


@dataclass(frozen=True)
class TrajectoryConfig:
    mode: str = "stochastic"  # 'stochastic' | 'template'
    template: str = "orbit"  # 'orbit' | 'dolly' | 'pan' | 'arc'
    n_frames: int = 16
    step_scale: float = 0.35  # max translation between consecutive frames
    rotation_scale: float = 0.25  # max rotation angle (radians) between frames
    min_clearance: float = 0.4
    rejection_budget: int = 10_000

    def __post_init__(self):
        if self.n_frames < 2:
            raise ConfigError(f"n_frames must be >= 2, got {self.n_frames}")
        if self.min_clearance <= 0:
            raise ConfigError("min_clearance must be positive")
        if self.mode not in ("stochastic", "template"):
            raise ConfigError(f"unknown trajectory mode {self.mode!r}")
        if self.template not in ("orbit", "dolly", "pan", "arc"):
            raise ConfigError(f"unknown template {self.template!r}")


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _random_texture(rng: np.random.Generator, cfg: SceneConfig) -> Texture:
    kind = str(rng.choice(list(cfg.texture_kinds)))
    hue = rng.uniform(0.15, 0.95, size=3)
    other = np.clip(hue + rng.uniform(-0.45, 0.45, size=3), 0.05, 1.0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return Texture(
        kind=kind,
        color_a=tuple(np.round(hue, 6)),
        color_b=tuple(np.round(other, 6)),
        direction=tuple(np.round(direction, 6)),
        scale=float(rng.uniform(*cfg.texture_scale_range)),
        phase=float(rng.uniform(0, 2 * math.pi)),
    )


def generate_scene(seed: int, config: SceneConfig | None = None) -> Scene:
    """Deterministically build a scene from a seed.

    Identical (seed, config) yields an identical scene.  The total primitive
    count is drawn uniformly from ``config.primitive_range``.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.primitive_range
    n_total = int(rng.integers(lo, hi + 1))
    prims: list[Primitive] = []
    b = cfg.bounds
    if cfg.include_ground:
        prims.append(Plane(axis=2, offset=b.lo[2], texture=_random_texture(rng, cfg)))
    if cfg.include_walls:
        wall_tex = _random_texture(rng, cfg)
        prims.append(Plane(axis=0, offset=b.lo[0], texture=wall_tex))
        prims.append(Plane(axis=0, offset=b.hi[0], texture=wall_tex))
        prims.append(Plane(axis=1, offset=b.lo[1], texture=wall_tex))
        prims.append(Plane(axis=1, offset=b.hi[1], texture=wall_tex))

    n_objects = n_total - len(prims)
    smin, smax = cfg.object_size_range
    margin = smax
    for _ in range(n_objects):
        tex = _random_texture(rng, cfg)
        cx = rng.uniform(b.lo[0] + margin, b.hi[0] - margin)
        cy = rng.uniform(b.lo[1] + margin, b.hi[1] - margin)
        if rng.uniform() < 0.5:
            size = rng.uniform(smin, smax, size=3)
            prims.append(
                Box(center=(cx, cy, b.lo[2] + size[2] / 2), size=tuple(np.round(size, 6)), texture=tex)
            )
        else:
            r = rng.uniform(smin / 2, smax / 2)
            prims.append(Sphere(center=(cx, cy, b.lo[2] + r), radius=float(round(r, 6)), texture=tex))
    return Scene(seed=seed, primitives=tuple(prims), bounds=b)


# ---------------------------------------------------------------------------
# Ray-cast rendering
# ---------------------------------------------------------------------------


def render_view(
    scene: Scene, K: CameraIntrinsics, pose: CameraPose
) -> tuple[np.ndarray, DepthMap]:
    """Render (rgb, depth) by nearest analytic ray-primitive intersection.

    Depth is the exact camera-frame z of the hit point.  Pixels whose ray
    escapes the scene carry ``valid=False`` and the fixed sky color.
    """
    h, w = K.height, K.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    d_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    d_world = d_cam @ pose.rotation  # R^T applied per-ray
    norms = np.linalg.norm(d_world, axis=-1, keepdims=True)
    d_unit = d_world / norms
    origin = pose.camera_center()
    o = np.broadcast_to(origin, d_unit.shape)

    best_t = np.full((h, w), np.inf)
    best_idx = np.full((h, w), -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Plane):
            t = prim.intersect(o, d_unit, scene.bounds)
        else:
            t = prim.intersect(o, d_unit)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, i, best_idx)

    valid = np.isfinite(best_t)
    rgb = np.tile(SKY_COLOR, (h, w, 1))
    for i, prim in enumerate(scene.primitives):
        sel = best_idx == i
        if not sel.any():
            continue
        pts = o[sel] + best_t[sel, None] * d_unit[sel]
        rgb[sel] = prim.texture.sample(pts)

    # Camera depth: hit point z in camera frame equals t times the camera-z
    # component of the unit direction (direction had z_cam = 1 before the
    # normalization, so that component is 1/norm).
    depth = np.where(valid, best_t / norms[..., 0], 0.0)
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb.astype(np.float32), DepthMap(np.where(valid, depth, 1.0), valid)


# ---------------------------------------------------------------------------
# Trajectory sampling
# ---------------------------------------------------------------------------


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(f)
    if n < 1e-9:
        raise ValueError("eye and target coincide")
    f = f / n
    upv = np.asarray(up, dtype=np.float64)
    x = np.cross(f, upv)
    if np.linalg.norm(x) < 1e-9:  # looking straight along up: pick any right
        x = np.cross(f, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    r = np.stack([x, y, f], axis=0)
    return CameraPose(r, -r @ eye)


def _pose_ok(scene: Scene, eye: np.ndarray, clearance: float) -> bool:
    if not scene.bounds.contains(eye, margin=clearance):
        return False
    return scene.surface_distance(eye) >= clearance


def _template_poses(scene: Scene, rng: np.random.Generator, cfg: TrajectoryConfig) -> list[CameraPose] | None:
    center = scene.centroid()
    n = cfg.n_frames
    b = scene.bounds

    if cfg.template in ("orbit", "arc"):
        radius = rng.uniform(0.35, 0.48) * min(b.hi[0] - b.lo[0], b.hi[1] - b.lo[1])
        height = rng.uniform(1.0, 2.2)
        # Per-frame angle limited by both motion caps; 0.95 margin absorbs
        # the pitch/rise contribution of arcs.
        max_by_step = 0.95 * cfg.step_scale / max(radius, 1e-6)
        dtheta = min(0.95 * cfg.rotation_scale, max_by_step)
        theta0 = rng.uniform(0, 2 * math.pi)
        rise = rng.uniform(-0.5, 0.5) if cfg.template == "arc" else 0.0
        eyes = []
        for i in range(n):
            th = theta0 + i * dtheta
            eye = center + np.array(
                [radius * math.cos(th), radius * math.sin(th), height - center[2] + rise * i / max(n - 1, 1)]
            )
            eyes.append(eye)
        poses = [look_at_pose(e, center) for e in eyes]
    elif cfg.template == "dolly":
        eye0 = center + np.array(
            [rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(1.0, 2.2) - center[2]]
        )
        direction = center - eye0
        direction[2] = 0
        nrm = np.linalg.norm(direction)
        if nrm < 1e-6:
            return None
        direction /= nrm
        step = rng.uniform(0.4, 1.0) * cfg.step_scale
        eyes = [eye0 + direction * step * i for i in range(n)]
        look = eye0 + direction * 100.0
        poses = [look_at_pose(e, look + (e - eye0)) for e in eyes]
    elif cfg.template == "pan":
        eye = center + np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1.0, 2.2) - center[2]])
        dyaw = rng.uniform(0.3, 0.95) * cfg.rotation_scale
        yaw0 = rng.uniform(0, 2 * math.pi)
        poses = []
        for i in range(n):
            yaw = yaw0 + i * dyaw
            target = eye + np.array([math.cos(yaw), math.sin(yaw), 0.0])
            poses.append(look_at_pose(eye, target))
    else:  # pragma: no cover - guarded by config validation
        raise ConfigError(cfg.template)

    for p in poses:
        if not _pose_ok(scene, p.camera_center(), cfg.min_clearance):
            return None
    return poses


def _stochastic_poses(scene: Scene, rng: np.random.Generator, cfg: TrajectoryConfig) -> list[CameraPose] | None:
    b = scene.bounds
    center = scene.centroid()
    zlo = max(b.lo[2] + cfg.min_clearance, 0.8)
    zhi = min(b.hi[2] - cfg.min_clearance, 2.5)
    if (
        b.lo[0] + cfg.min_clearance >= b.hi[0] - cfg.min_clearance
        or b.lo[1] + cfg.min_clearance >= b.hi[1] - cfg.min_clearance
        or zlo >= zhi
    ):
        return None
    for _ in range(50):
        eye = np.array(
            [
                rng.uniform(b.lo[0] + cfg.min_clearance, b.hi[0] - cfg.min_clearance),
                rng.uniform(b.lo[1] + cfg.min_clearance, b.hi[1] - cfg.min_clearance),
                rng.uniform(zlo, zhi),
            ]
        )
        if _pose_ok(scene, eye, cfg.min_clearance):
            break
    else:
        return None

    look = center + rng.normal(scale=0.3, size=3)
    look[2] = np.clip(look[2], 0.3, 2.0)
    if np.linalg.norm(look - eye) < 1e-3:
        look = eye + np.array([1.0, 0.0, 0.0])
    poses = [look_at_pose(eye, look)]
    heading = look - eye
    heading /= np.linalg.norm(heading)
    for _ in range(cfg.n_frames - 1):
        placed = False
        for _ in range(60):
            step = rng.uniform(0.3, 1.0) * cfg.step_scale
            drift = rng.normal(scale=0.45, size=3)
            drift[2] *= 0.3
            move = heading + drift
            move /= np.linalg.norm(move)
            new_eye = eye + move * step
            if _pose_ok(scene, new_eye, cfg.min_clearance):
                placed = True
                break
        if not placed:
            return None
        # Aim toward a drifting target, then clamp the full relative
        # rotation so the inter-frame cap holds exactly.
        max_rot = cfg.rotation_scale * rng.uniform(0.2, 0.95)
        desired = look + rng.normal(scale=0.4, size=3) - new_eye
        if np.linalg.norm(desired) < 1e-6:
            desired = poses[-1].rotation[2]
        wanted = look_at_pose(new_eye, new_eye + desired / np.linalg.norm(desired))
        new_rot = _clamp_rotation(poses[-1].rotation, wanted.rotation, max_rot)
        poses.append(CameraPose(new_rot, -new_rot @ new_eye))
        eye = new_eye
        heading = 0.7 * heading + 0.3 * move
        heading /= np.linalg.norm(heading)
    return poses


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues formula for a rotation about unit ``axis``."""
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _clamp_rotation(prev: np.ndarray, wanted: np.ndarray, max_angle: float) -> np.ndarray:
    """Limit the geodesic distance from ``prev`` to ``wanted``."""
    rel = wanted @ prev.T
    cos = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(cos)
    if angle <= max_angle or angle < 1e-9:
        return wanted
    axis = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return prev
    return _axis_angle_matrix(axis / n, max_angle) @ prev


def sample_trajectory(
    scene: Scene, rng: np.random.Generator, cfg: TrajectoryConfig
) -> list[CameraPose]:
    """Sample a collision-free camera trajectory.

    Every returned camera center keeps ``cfg.min_clearance`` from all
    primitive surfaces and stays inside the scene bounds; consecutive
    translations and rotations respect the configured caps.  Raises
    ``NoValidTrajectoryError`` when the rejection budget is exhausted.
    """
    attempts = 0
    while attempts < cfg.rejection_budget:
        attempts += 1
        if cfg.mode == "template":
            poses = _template_poses(scene, rng, cfg)
        else:
            poses = _stochastic_poses(scene, rng, cfg)
        if poses is not None:
            return poses
    raise NoValidTrajectoryError(
        f"no collision-free trajectory after {cfg.rejection_budget} attempts "
        f"(clearance {cfg.min_clearance})"
    )

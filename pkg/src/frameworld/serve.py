"""Interactive session service: pose control, keyframe memory, frame streaming.

A session holds the explorable world state: the current camera, a global
point cloud (the explicit 3D memory), and a bounded keyframe store (the
appearance memory).  Each user action maps to a target pose; the distilled
generator synthesizes the frame; frames sufficiently far from every stored
keyframe are folded back into both memories.

Wire protocol (one session per connection):
  client -> server (JSON text):
    {"type":"create","seed":<u64>} | {"type":"action","dx":f,"dy":f,"dz":f,
    "dyaw":f,"dpitch":f,"ts":ms} | {"type":"reset"} | {"type":"close"}
  server -> client: {"type":"frame","frame_id":u64,"pose":[12 floats R|t],
    "gen_ms":f,"keyframes":n} followed by one binary PNG message;
    errors as {"type":"error","code":int,"msg":str}.
A plain HTTP endpoint exposes /metrics and /healthz.
"""

from __future__ import annotations

import asyncio
import hashlib
import io
import json
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from PIL import Image

from .codec import IdentityCodec
from .dataset import REFERENCE_INDICES
from .distill import TwoStepSchedule, generator_sample
from .diffusion import make_schedule
from .errors import (
    FrameGenerationError,
    ImportBundleError,
    SessionCapacityError,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    merge_clouds,
    render_point_cloud,
    rotation_angle,
    unproject_depth,
)
from .model import FrameDiT, build_conditions
from .synthscene import (
    Scene,
    SceneConfig,
    TrajectoryConfig,
    generate_scene,
    render_view,
    sample_trajectory,
)

PITCH_LIMIT = math.radians(80.0)


# ---------------------------------------------------------------------------
# Actions and pose control
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionClamps:
    max_translation: float = 0.5  # per axis, world units
    max_rotation: float = 0.5  # radians per component


@dataclass(frozen=True)
class Action:
    """Camera deltas in the camera's local frame (x right, y down, z forward)."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dyaw: float = 0.0
    dpitch: float = 0.0
    ts: float = 0.0  # client timestamp (ms), echoed for latency measurement

    def clamped(self, clamps: ActionClamps) -> "Action":
        ct, cr = clamps.max_translation, clamps.max_rotation
        return Action(
            dx=float(np.clip(self.dx, -ct, ct)),
            dy=float(np.clip(self.dy, -ct, ct)),
            dz=float(np.clip(self.dz, -ct, ct)),
            dyaw=float(np.clip(self.dyaw, -cr, cr)),
            dpitch=float(np.clip(self.dpitch, -cr, cr)),
            ts=self.ts,
        )


def _yaw_rotation(yaw: float) -> np.ndarray:
    """World-to-camera rotation for a level camera facing (cos yaw, sin yaw, 0)."""
    c, s = math.cos(yaw), math.sin(yaw)
    x = np.array([s, -c, 0.0])
    y = np.array([0.0, 0.0, -1.0])
    f = np.array([c, s, 0.0])
    return np.stack([x, y, f])


def _pitch_rotation(pitch: float) -> np.ndarray:
    """Camera-side rotation about local x tilting the view up by ``pitch``."""
    a = -pitch
    return np.array(
        [[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]]
    )


def orientation_from_angles(yaw: float, pitch: float) -> np.ndarray:
    return _pitch_rotation(pitch) @ _yaw_rotation(yaw)


def angles_from_rotation(rotation: np.ndarray) -> tuple[float, float]:
    """(yaw, pitch) of a roll-free world-to-camera rotation."""
    f = rotation[2]
    pitch = math.asin(float(np.clip(f[2], -1.0, 1.0)))
    yaw = math.atan2(f[1], f[0])
    return yaw, pitch


class PoseController:
    """Yaw/pitch/position camera state with collision-clamped movement."""

    def __init__(self, pose: CameraPose, collision=None):
        self.yaw, self.pitch = angles_from_rotation(pose.rotation)
        self.position = pose.camera_center()
        self.collision = collision
        self.clamp_events = 0

    def pose(self) -> CameraPose:
        r = orientation_from_angles(self.yaw, self.pitch)
        return CameraPose(r, -r @ self.position)

    def apply(self, action: Action) -> CameraPose:
        """Rotation always applies; translation reverts if it would collide."""
        self.yaw += action.dyaw
        self.pitch = float(np.clip(self.pitch + action.dpitch, -PITCH_LIMIT, PITCH_LIMIT))
        r = orientation_from_angles(self.yaw, self.pitch)
        delta_world = r.T @ np.array([action.dx, action.dy, action.dz])
        candidate = self.position + delta_world
        if self.collision is None or self.collision(candidate):
            self.position = candidate
        else:
            self.clamp_events += 1
        return self.pose()


def make_collision_checker(scene: Scene | None, clearance: float):
    if scene is None:
        return None

    def ok(eye: np.ndarray) -> bool:
        return scene.bounds.contains(eye, margin=clearance) and scene.surface_distance(eye) >= clearance

    return ok


# ---------------------------------------------------------------------------
# Keyframes
# ---------------------------------------------------------------------------


@dataclass
class Keyframe:
    rgb: np.ndarray  # (H, W, 3) uint8
    pose: CameraPose


def pose_distance(a: CameraPose, b: CameraPose, beta: float = 1.0) -> float:
    """Translation distance plus ``beta`` (world units / radian) rotation angle."""
    return float(
        np.linalg.norm(a.camera_center() - b.camera_center())
        + beta * rotation_angle(a.rotation, b.rotation)
    )


class KeyframeStore:
    """Bounded reference-appearance memory; eviction is strictly oldest-first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.frames: list[Keyframe] = []

    def __len__(self) -> int:
        return len(self.frames)

    def add(self, kf: Keyframe) -> None:
        self.frames.append(kf)
        while len(self.frames) > self.capacity:
            self.frames.pop(0)

    def nearest(self, pose: CameraPose, beta: float = 1.0) -> tuple[int, float]:
        if not self.frames:
            raise ValueError("keyframe store is empty")
        dists = [pose_distance(kf.pose, pose, beta) for kf in self.frames]
        i = int(np.argmin(dists))
        return i, dists[i]


# ---------------------------------------------------------------------------
# Frame generators
# ---------------------------------------------------------------------------


class DistilledFrameGenerator:
    """Few-step sampler wrapper; one generation at a time per instance."""

    def __init__(self, model: FrameDiT, t_mid: int = 200, base_seed: int = 0):
        self.model = model.eval()
        self.schedule = make_schedule(model.cfg.timesteps)
        self.two_step = TwoStepSchedule(self.schedule, t_mid)
        self.codec = IdentityCodec()
        self.base_seed = base_seed
        self._lock = threading.Lock()

    @property
    def n_steps(self) -> int:
        return self.two_step.n_steps

    def generate(
        self,
        K: CameraIntrinsics,
        pose_tgt: CameraPose,
        pose_ref: CameraPose,
        anchor_rgb: np.ndarray,
        anchor_mask: np.ndarray,
        ref_rgb: np.ndarray,
        noise_key: int,
    ) -> np.ndarray:
        dtype = next(self.model.parameters()).dtype
        cond = build_conditions(
            K, pose_tgt, pose_ref, anchor_rgb, anchor_mask, ref_rgb, self.model.cfg, dtype
        )
        size = self.model.cfg.image_size
        g = torch.Generator().manual_seed((self.base_seed * 2_654_435_761 + noise_key) % (2**63 - 1))
        init = torch.randn((1, 3, size, size), generator=g, dtype=dtype)
        bridge = torch.randn((1, 3, size, size), generator=g, dtype=dtype)
        with self._lock, torch.no_grad():
            img = generator_sample(
                self.model, cond, self.two_step, init, bridge_noise=bridge,
                codec=self.codec, return_latent=False,
            )
        if not torch.isfinite(img).all():
            raise FrameGenerationError("generator produced non-finite pixels")
        arr = img[0].permute(1, 2, 0).cpu().numpy()
        return np.round(arr * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


@dataclass
class ServerConfig:
    resolution: int = 64
    fov_deg: float = 60.0
    keyframe_threshold: float = 0.5
    keyframe_capacity: int = 16
    pose_beta: float = 1.0
    clearance: float = 0.35
    max_sessions: int = 8
    clamps: ActionClamps = field(default_factory=ActionClamps)
    scene: SceneConfig = field(default_factory=SceneConfig)
    init_trajectory: TrajectoryConfig = field(
        default_factory=lambda: TrajectoryConfig(mode="template", template="orbit", n_frames=16)
    )

    def intrinsics(self) -> CameraIntrinsics:
        f = 0.5 * self.resolution / math.tan(math.radians(self.fov_deg) / 2)
        c = (self.resolution - 1) / 2
        return CameraIntrinsics(
            fx=f, fy=f, cx=c, cy=c, width=self.resolution, height=self.resolution
        )


@dataclass
class FrameResult:
    frame_id: int
    rgb: np.ndarray  # uint8
    pose: CameraPose
    gen_ms: float
    keyframe_count: int
    reference_index: int


@dataclass
class ObservationBundle:
    """Pre-computed posed observations for session import (offline stage)."""

    rgbs: list[np.ndarray]
    depths: list[np.ndarray]
    valids: list[np.ndarray]
    poses: list[CameraPose]
    K: CameraIntrinsics

    def validate(self):
        n = len(self.rgbs)
        if not (len(self.depths) == len(self.valids) == len(self.poses) == n) or n == 0:
            raise ImportBundleError("bundle arrays must be non-empty and equal length")
        shape = np.asarray(self.rgbs[0]).shape[:2]
        if shape != (self.K.height, self.K.width):
            raise ImportBundleError(f"rgb shape {shape} != intrinsics {self.K.height}x{self.K.width}")
        for r, d in zip(self.rgbs, self.depths):
            if np.asarray(r).shape[:2] != shape or np.asarray(d).shape != shape:
                raise ImportBundleError("bundle frames disagree in resolution")


class SceneSession:
    """Mutable per-client world state; all methods require the session lock."""

    def __init__(
        self,
        session_id: str,
        cfg: ServerConfig,
        generator: DistilledFrameGenerator,
        seed: int | None = None,
        bundle: ObservationBundle | None = None,
    ):
        self.id = session_id
        self.cfg = cfg
        self.generator = generator
        self.lock = threading.Lock()
        self.frame_counter = 0
        self.seed = seed if seed is not None else 0

        if bundle is not None:
            bundle.validate()
            self.K = bundle.K
            self.scene = None
            clouds, keyframes = [], []
            from .geometry import DepthMap

            for rgb, depth, valid, pose in zip(bundle.rgbs, bundle.depths, bundle.valids, bundle.poses):
                rgb8 = rgb if rgb.dtype == np.uint8 else np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
                clouds.append(unproject_depth(DepthMap(depth, valid), rgb8, bundle.K, pose))
                keyframes.append(Keyframe(rgb=rgb8, pose=pose))
            self.cloud = merge_clouds(clouds)
            init_keyframes = keyframes[: cfg.keyframe_capacity]
            init_pose = bundle.poses[0]
        else:
            self.K = cfg.intrinsics()
            self.scene = generate_scene(self.seed, cfg.scene)
            rng = np.random.default_rng(self.seed)
            trajectory = sample_trajectory(self.scene, rng, cfg.init_trajectory)
            clouds, init_keyframes = [], []
            for idx in REFERENCE_INDICES:
                pose = trajectory[idx]
                rgb, depth = render_view(self.scene, self.K, pose)
                rgb8 = np.round(rgb * 255).astype(np.uint8)
                clouds.append(unproject_depth(depth, rgb8, self.K, pose))
                init_keyframes.append(Keyframe(rgb=rgb8, pose=pose))
            self.cloud = merge_clouds(clouds)
            init_pose = trajectory[0]

        self.keyframes = KeyframeStore(cfg.keyframe_capacity)
        for kf in init_keyframes:
            self.keyframes.add(kf)
        self.controller = PoseController(
            init_pose, make_collision_checker(self.scene, cfg.clearance)
        )
        # Snapshot for reset.
        self._initial = (
            [Keyframe(kf.rgb.copy(), kf.pose) for kf in self.keyframes.frames],
            PointCloud(self.cloud.positions.copy(), self.cloud.colors.copy()),
            init_pose,
        )

    def reset(self) -> None:
        keyframes, cloud, pose = self._initial
        self.keyframes = KeyframeStore(self.cfg.keyframe_capacity)
        for kf in keyframes:
            self.keyframes.add(Keyframe(kf.rgb.copy(), kf.pose))
        self.cloud = PointCloud(cloud.positions.copy(), cloud.colors.copy())
        self.controller = PoseController(
            pose, make_collision_checker(self.scene, self.cfg.clearance)
        )

    def apply_action(self, action: Action) -> CameraPose:
        return self.controller.apply(action.clamped(self.cfg.clamps))

    def generate_frame(self, target_pose: CameraPose) -> FrameResult:
        """Synthesize the frame at ``target_pose`` and update spatial memory.

        The reference is the keyframe nearest in weighted pose distance.  If
        that distance exceeds the keyframe threshold, the generated frame
        becomes a new keyframe and its unprojection (using anchor depth
        where the anchor covered the pixel) is merged into the cloud.
        Failures leave the session untouched.
        """
        ref_idx, dist = self.keyframes.nearest(target_pose, self.cfg.pose_beta)
        ref = self.keyframes.frames[ref_idx]
        anchor = render_point_cloud(self.cloud, self.K, target_pose, self.K.width, self.K.height)
        t0 = time.perf_counter()
        try:
            rgb = self.generator.generate(
                self.K,
                target_pose,
                ref.pose,
                anchor.rgb,
                anchor.mask,
                ref.rgb,
                noise_key=self.seed * 100_003 + self.frame_counter,
            )
        except FrameGenerationError:
            raise
        except Exception as e:  # noqa: BLE001 - surface as a frame error
            raise FrameGenerationError(f"frame synthesis failed: {e}") from e
        gen_ms = (time.perf_counter() - t0) * 1000.0

        if dist > self.cfg.keyframe_threshold:
            self.keyframes.add(Keyframe(rgb=rgb, pose=target_pose))
            from .geometry import DepthMap

            merged = unproject_depth(
                DepthMap(np.where(anchor.mask, anchor.depth, 1.0), anchor.mask),
                rgb,
                self.K,
                target_pose,
            )
            self.cloud = merge_clouds([self.cloud, merged])

        result = FrameResult(
            frame_id=self.frame_counter,
            rgb=rgb,
            pose=target_pose,
            gen_ms=gen_ms,
            keyframe_count=len(self.keyframes),
            reference_index=ref_idx,
        )
        self.frame_counter += 1
        return result


# ---------------------------------------------------------------------------
# Manager, metrics and the wire protocol
# ---------------------------------------------------------------------------


class Metrics:
    def __init__(self, window: int = 1000):
        self._lock = threading.Lock()
        self.latencies = deque(maxlen=window)
        self.frames_total = 0

    def record(self, gen_ms: float) -> None:
        with self._lock:
            self.latencies.append(gen_ms)
            self.frames_total += 1

    def snapshot(self, active_sessions: int, clamps: int) -> dict:
        with self._lock:
            lat = list(self.latencies)
        if lat:
            p50 = float(np.percentile(lat, 50))
            p95 = float(np.percentile(lat, 95))
            fps = 1000.0 / max(np.mean(lat), 1e-9)
        else:
            p50 = p95 = fps = 0.0
        return {
            "fps": fps,
            "latency_ms_p50": p50,
            "latency_ms_p95": p95,
            "active_sessions": active_sessions,
            "boundary_clamps": clamps,
            "frames_total": self.frames_total,
        }


class SessionManager:
    def __init__(self, generator: DistilledFrameGenerator, cfg: ServerConfig | None = None):
        self.generator = generator
        self.cfg = cfg or ServerConfig()
        self.sessions: dict[str, SceneSession] = {}
        self.metrics = Metrics()
        self._lock = threading.Lock()
        self._counter = 0

    def create(self, seed: int | None = None, bundle: ObservationBundle | None = None) -> SceneSession:
        with self._lock:
            if len(self.sessions) >= self.cfg.max_sessions:
                raise SessionCapacityError(f"at most {self.cfg.max_sessions} concurrent sessions")
            self._counter += 1
            sid = f"s{self._counter:06d}"
            session = SceneSession(sid, self.cfg, self.generator, seed=seed, bundle=bundle)
            self.sessions[sid] = session
            return session

    def get(self, sid: str) -> SceneSession | None:
        return self.sessions.get(sid)

    def close(self, sid: str) -> bool:
        with self._lock:
            return self.sessions.pop(sid, None) is not None

    def total_clamps(self) -> int:
        return sum(s.controller.clamp_events for s in self.sessions.values())


def encode_frame_png(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb).save(buf, format="PNG")
    return buf.getvalue()


def frame_header(result: FrameResult) -> dict:
    return {
        "type": "frame",
        "frame_id": result.frame_id,
        "pose": [float(x) for x in result.pose.flat_rt()],
        "gen_ms": result.gen_ms,
        "keyframes": result.keyframe_count,
    }


def _error(code: int, msg: str) -> dict:
    return {"type": "error", "code": code, "msg": msg}


_ACTION_FIELDS = ("dx", "dy", "dz", "dyaw", "dpitch")


def parse_action(msg: dict) -> Action:
    vals = {}
    for k in _ACTION_FIELDS + ("ts",):
        v = msg.get(k, 0.0)
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ValueError(f"field {k!r} must be numeric")
        vals[k] = float(v)
    return Action(**vals)


@dataclass
class ConnectionState:
    session_id: str | None = None


def handle_message(
    manager: SessionManager, conn: ConnectionState, msg
) -> list[dict | bytes]:
    """Pure message dispatcher: returns the ordered outgoing messages.

    Malformed input yields a 400-class error response and keeps the
    connection (and session) alive; unknown sessions yield 404.
    """
    if not isinstance(msg, dict) or "type" not in msg:
        return [_error(400, "message must be an object with a 'type'")]
    mtype = msg["type"]

    if mtype == "create":
        seed = msg.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            return [_error(400, "'seed' must be a non-negative integer")]
        try:
            session = manager.create(seed=seed)
        except SessionCapacityError as e:
            return [_error(503, str(e))]
        conn.session_id = session.id
        with session.lock:
            result = session.generate_frame(session.controller.pose())
        manager.metrics.record(result.gen_ms)
        header = frame_header(result)
        header["session_id"] = session.id
        return [header, encode_frame_png(result.rgb)]

    session = manager.get(conn.session_id) if conn.session_id else None
    if session is None:
        return [_error(404, "no session bound to this connection")]

    if mtype == "action":
        try:
            action = parse_action(msg)
        except ValueError as e:
            return [_error(400, str(e))]
        with session.lock:
            pose = session.apply_action(action)
            try:
                result = session.generate_frame(pose)
            except FrameGenerationError as e:
                return [_error(500, str(e))]
        manager.metrics.record(result.gen_ms)
        header = frame_header(result)
        if action.ts:
            header["ts"] = action.ts
        return [header, encode_frame_png(result.rgb)]

    if mtype == "reset":
        with session.lock:
            session.reset()
            result = session.generate_frame(session.controller.pose())
        manager.metrics.record(result.gen_ms)
        return [frame_header(result), encode_frame_png(result.rgb)]

    if mtype == "close":
        manager.close(session.id)
        conn.session_id = None
        return [{"type": "closed"}]

    return [_error(400, f"unknown message type {mtype!r}")]


class CoalescingMailbox:
    """Latest-wins action slot bounding per-session latency.

    While a generation is in flight, newly arriving actions replace the
    pending one instead of queueing; ``dropped`` counts replacements.
    """

    def __init__(self):
        self._item = None
        self._dropped = 0
        self._cond = asyncio.Condition()

    @property
    def dropped(self) -> int:
        return self._dropped

    async def put(self, item) -> None:
        async with self._cond:
            if self._item is not None:
                self._dropped += 1
            self._item = item
            self._cond.notify()

    async def take(self):
        async with self._cond:
            while self._item is None:
                await self._cond.wait()
            item, self._item = self._item, None
            return item


# ---------------------------------------------------------------------------
# FastAPI application
# ---------------------------------------------------------------------------


def make_app(manager: SessionManager, static_dir: str | Path | None = None):
    app = FastAPI(title="frameworld")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/metrics")
    def metrics():
        return manager.metrics.snapshot(
            active_sessions=len(manager.sessions), clamps=manager.total_clamps()
        )

    @app.websocket("/ws")
    async def ws(websocket: WebSocket):
        await websocket.accept()
        conn = ConnectionState()
        mailbox = CoalescingMailbox()
        loop = asyncio.get_event_loop()

        async def respond(messages):
            for out in messages:
                if isinstance(out, bytes):
                    await websocket.send_bytes(out)
                else:
                    await websocket.send_text(json.dumps(out))

        async def worker():
            while True:
                msg = await mailbox.take()
                out = await loop.run_in_executor(None, handle_message, manager, conn, msg)
                await respond(out)

        worker_task = asyncio.create_task(worker())
        try:
            while True:
                raw = await websocket.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await respond([_error(400, "invalid JSON")])
                    continue
                if isinstance(msg, dict) and msg.get("type") == "action":
                    await mailbox.put(msg)  # latest-wins under backlog
                else:
                    # Control messages are processed in order, never dropped.
                    out = await loop.run_in_executor(None, handle_message, manager, conn, msg)
                    await respond(out)
                    if isinstance(msg, dict) and msg.get("type") == "close":
                        break
        except WebSocketDisconnect:
            pass
        finally:
            worker_task.cancel()
            if conn.session_id:
                manager.close(conn.session_id)

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="static")
    return app


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def replay(
    manager: SessionManager,
    seed: int,
    actions: list[dict],
    out_dir: str | Path | None = None,
) -> dict:
    """Drive a fresh session through a recorded action script.

    Uses the same dispatch path as the wire protocol, dumps one PNG per
    frame when ``out_dir`` is given, and returns a digest over all frame
    bytes plus per-frame metadata.  Single-threaded torch keeps the frame
    bytes bitwise stable across runs.
    """
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        conn = ConnectionState()
        out = handle_message(manager, conn, {"type": "create", "seed": seed})
        frames = [out]
        for a in actions:
            msg = {"type": "action", **{k: float(a.get(k, 0.0)) for k in _ACTION_FIELDS}}
            frames.append(handle_message(manager, conn, msg))
        digest = hashlib.sha256()
        records = []
        png_index = 0
        for msgs in frames:
            header = next(m for m in msgs if isinstance(m, dict))
            if header.get("type") == "error":
                raise FrameGenerationError(f"replay failed: {header}")
            blob = next(m for m in msgs if isinstance(m, bytes))
            digest.update(blob)
            records.append(
                {"frame_id": header["frame_id"], "keyframes": header["keyframes"]}
            )
            if out_dir is not None:
                out_path = Path(out_dir)
                out_path.mkdir(parents=True, exist_ok=True)
                (out_path / f"frame_{png_index:05d}.png").write_bytes(blob)
            png_index += 1
        handle_message(manager, conn, {"type": "close"})
        result = {
            "digest": digest.hexdigest(),
            "n_frames": len(records),
            "final_keyframes": records[-1]["keyframes"],
            "frames": records,
        }
        if out_dir is not None:
            (Path(out_dir) / "replay.json").write_text(json.dumps(result, indent=2))
        return result
    finally:
        torch.set_num_threads(n_threads)

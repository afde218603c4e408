"""Training-pair construction and shard storage.

Each 16-frame sequence yields one sample group: frames {0, 5, 10, 15} form
the reference group whose unprojections build the global point cloud, and
the remaining 12 frames become targets.  Each target is paired with its
temporally closest reference frame and an anchor image rendered from the
(optionally augmented) global cloud at the target camera.

Shards are flat binary files: magic ``WFDS``, u16 format version, u32 sample
count, then length-prefixed records.  Images are stored as lossless 8-bit,
poses and intrinsics as float64, anchor depth as float32, so a read-back
reproduces every field bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptShardError, ShapeMismatchError
from .geometry import (
    AnchorRender,
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    PointCloud,
    merge_clouds,
    render_point_cloud,
    unproject_depth,
)

REFERENCE_INDICES = (0, 5, 10, 15)
GROUP_SIZE = 16
_WFDS_MAGIC = b"WFDS"
_FORMAT_VERSION = 1


@dataclass
class FrameRecord:
    """One posed frame with ground-truth (or estimated) depth."""

    rgb: np.ndarray  # (H, W, 3) uint8
    depth: DepthMap
    K: CameraIntrinsics
    pose: CameraPose
    time_index: int

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        if self.rgb.dtype != np.uint8:
            if self.rgb.max(initial=0.0) > 1.0 + 1e-6:
                raise ValueError("float rgb must lie in [0, 1]")
            self.rgb = np.round(np.clip(self.rgb, 0, 1) * 255).astype(np.uint8)
        if self.rgb.shape[:2] != self.depth.depth.shape:
            raise ShapeMismatchError(f"rgb {self.rgb.shape[:2]} vs depth {self.depth.depth.shape}")


def frames_from_arrays(rgbs, depths, valids, K, poses) -> list[FrameRecord]:
    """Adapter for externally reconstructed sequences (posed rgb + depth).

    This is the ingestion point for real-video pipelines whose poses and
    depths come from a separate reconstruction model; nothing here runs one.
    """
    return [
        FrameRecord(rgb=r, depth=DepthMap(d, v), K=K, pose=p, time_index=i)
        for i, (r, d, v, p) in enumerate(zip(rgbs, depths, valids, poses))
    ]


@dataclass
class TrainingSample:
    """One (reference, target, anchor) conditioning tuple.

    Image payloads are uint8; the anchor is stored pre-quantized so shard
    round-trips are bit-exact.
    """

    x_ref: np.ndarray  # (H, W, 3) uint8
    ref_pose: CameraPose
    x_tgt: np.ndarray  # (H, W, 3) uint8
    tgt_pose: CameraPose
    K: CameraIntrinsics
    anchor_rgb: np.ndarray  # (H, W, 3) uint8, zero outside mask
    anchor_mask: np.ndarray  # (H, W) bool
    anchor_depth: np.ndarray  # (H, W) float32
    sequence_id: int
    target_index: int

    def anchor(self) -> AnchorRender:
        rgb = self.anchor_rgb.astype(np.float64) / 255.0
        rgb[~self.anchor_mask] = 0.0
        return AnchorRender(rgb=rgb, mask=self.anchor_mask, depth=self.anchor_depth.astype(np.float64))


@dataclass(frozen=True)
class AugmentConfig:
    """Point-cloud corruption applied before anchor rendering.

    ``p_drop``: independent drop probability per point (1.0 empties the
    cloud; training configs should stay at or below 0.9).
    ``jitter_sigma``: isotropic positional noise; ``None`` selects
    0.005 x cloud extent.
    ``shuffle``: randomly permute surviving points.
    """

    p_drop: float = 0.3
    jitter_sigma: float | None = None
    shuffle: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.jitter_sigma is not None and self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")


NO_AUGMENT = AugmentConfig(p_drop=0.0, jitter_sigma=0.0, shuffle=False)


def augment_anchor_cloud(
    cloud: PointCloud, rng: np.random.Generator, aug: AugmentConfig
) -> PointCloud:
    """Drop, shuffle and jitter points; deterministic given the rng state."""
    n = len(cloud)
    if n == 0:
        return cloud
    keep = rng.uniform(size=n) >= aug.p_drop
    pos = cloud.positions[keep]
    col = cloud.colors[keep]
    if aug.shuffle and len(pos) > 1:
        perm = rng.permutation(len(pos))
        pos, col = pos[perm], col[perm]
    sigma = aug.jitter_sigma
    if sigma is None:
        sigma = 0.005 * cloud.extent()
    if sigma > 0 and len(pos) > 0:
        pos = pos + rng.normal(scale=sigma, size=pos.shape)
    return PointCloud(pos, col)


def nearest_reference(target_time: int, reference_times: list[int]) -> int:
    """Index into ``reference_times`` of the temporally closest reference.

    Ties break toward the earlier frame.
    """
    dists = [abs(target_time - t) for t in reference_times]
    return int(np.argmin(dists))  # argmin takes the first minimum: earlier wins


def build_sample_group(
    frames: list[FrameRecord],
    rng: np.random.Generator,
    aug: AugmentConfig = NO_AUGMENT,
    sequence_id: int = 0,
) -> list[TrainingSample]:
    """Turn a 16-frame sequence into 12 training samples.

    The global cloud is the union of the four reference unprojections; the
    augmented cloud is shared by all 12 anchors of the group.
    """
    if len(frames) != GROUP_SIZE:
        raise ValueError(f"need exactly {GROUP_SIZE} frames, got {len(frames)}")
    k0 = frames[0].K
    shape0 = frames[0].rgb.shape
    for f in frames:
        if f.K != k0:
            raise ValueError("frames must share intrinsics")
        if f.rgb.shape != shape0:
            raise ShapeMismatchError("frames must share resolution")
    times = [f.time_index for f in frames]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("time indices must be strictly increasing")

    refs = [frames[i] for i in REFERENCE_INDICES]
    cloud = merge_clouds(
        [unproject_depth(r.depth, r.rgb, r.K, r.pose) for r in refs]
    )
    cloud = augment_anchor_cloud(cloud, rng, aug)

    samples = []
    for idx, frame in enumerate(frames):
        if idx in REFERENCE_INDICES:
            continue
        ref = refs[nearest_reference(frame.time_index, [r.time_index for r in refs])]
        anchor = render_point_cloud(cloud, frame.K, frame.pose, k0.width, k0.height)
        samples.append(
            TrainingSample(
                x_ref=ref.rgb,
                ref_pose=ref.pose,
                x_tgt=frame.rgb,
                tgt_pose=frame.pose,
                K=k0,
                anchor_rgb=np.round(anchor.rgb * 255).astype(np.uint8),
                anchor_mask=anchor.mask,
                anchor_depth=anchor.depth.astype(np.float32),
                sequence_id=sequence_id,
                target_index=idx,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Shard IO
# ---------------------------------------------------------------------------


def _pack_pose(pose: CameraPose) -> bytes:
    return pose.flat_rt().astype("<f8").tobytes()


def _unpack_pose(buf: bytes, off: int) -> tuple[CameraPose, int]:
    vals = np.frombuffer(buf, dtype="<f8", count=12, offset=off)
    return CameraPose(vals[:9].reshape(3, 3), vals[9:]), off + 96


def _pack_sample(s: TrainingSample) -> bytes:
    h, w = s.x_tgt.shape[:2]
    parts = [
        struct.pack("<IHHH", s.sequence_id, s.target_index, h, w),
        struct.pack("<4d2I", s.K.fx, s.K.fy, s.K.cx, s.K.cy, s.K.width, s.K.height),
        _pack_pose(s.ref_pose),
        _pack_pose(s.tgt_pose),
        np.ascontiguousarray(s.x_ref).tobytes(),
        np.ascontiguousarray(s.x_tgt).tobytes(),
        np.ascontiguousarray(s.anchor_rgb).tobytes(),
        np.packbits(s.anchor_mask).tobytes(),
        s.anchor_depth.astype("<f4").tobytes(),
    ]
    body = b"".join(parts)
    return struct.pack("<I", len(body)) + body


def write_shard(samples: list[TrainingSample], path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_WFDS_MAGIC)
        f.write(struct.pack("<HI", _FORMAT_VERSION, len(samples)))
        for s in samples:
            f.write(_pack_sample(s))
    tmp.replace(path)


def _need(buf: bytes, off: int, n: int) -> None:
    if off + n > len(buf):
        raise CorruptShardError(f"record extends past end of shard", offset=len(buf))


def read_shard(path) -> list[TrainingSample]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _WFDS_MAGIC:
        raise CorruptShardError(f"bad shard magic {buf[:4]!r}", offset=0)
    if len(buf) < 10:
        raise CorruptShardError("truncated shard header", offset=len(buf))
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != _FORMAT_VERSION:
        raise CorruptShardError(f"unsupported shard version {version}", offset=4)
    off = 10
    samples = []
    for _ in range(count):
        _need(buf, off, 4)
        (body_len,) = struct.unpack_from("<I", buf, off)
        off += 4
        _need(buf, off, body_len)
        end = off + body_len

        seq_id, tgt_idx, h, w = struct.unpack_from("<IHHH", buf, off)
        off += 10
        fx, fy, cx, cy, kw, kh = struct.unpack_from("<4d2I", buf, off)
        off += 40
        K = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=kw, height=kh)
        ref_pose, off = _unpack_pose(buf, off)
        tgt_pose, off = _unpack_pose(buf, off)

        img_bytes = h * w * 3
        mask_bytes = (h * w + 7) // 8
        depth_bytes = h * w * 4
        expected = 10 + 40 + 192 + 3 * img_bytes + mask_bytes + depth_bytes
        if body_len != expected:
            raise CorruptShardError(
                f"record length {body_len} != expected {expected}", offset=off
            )
        x_ref = np.frombuffer(buf, dtype=np.uint8, count=img_bytes, offset=off).reshape(h, w, 3)
        off += img_bytes
        x_tgt = np.frombuffer(buf, dtype=np.uint8, count=img_bytes, offset=off).reshape(h, w, 3)
        off += img_bytes
        anchor_rgb = np.frombuffer(buf, dtype=np.uint8, count=img_bytes, offset=off).reshape(h, w, 3)
        off += img_bytes
        mask_flat = np.unpackbits(
            np.frombuffer(buf, dtype=np.uint8, count=mask_bytes, offset=off), count=h * w
        )
        off += mask_bytes
        anchor_depth = np.frombuffer(buf, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += depth_bytes
        if off != end:
            raise CorruptShardError("record parsing misaligned", offset=off)
        samples.append(
            TrainingSample(
                x_ref=x_ref.copy(),
                ref_pose=ref_pose,
                x_tgt=x_tgt.copy(),
                tgt_pose=tgt_pose,
                K=K,
                anchor_rgb=anchor_rgb.copy(),
                anchor_mask=mask_flat.reshape(h, w).astype(bool),
                anchor_depth=anchor_depth.copy(),
                sequence_id=seq_id,
                target_index=tgt_idx,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ShardEntry:
    path: str
    n_samples: int
    sequence_id: int
    seed: int
    trajectory: dict = field(default_factory=dict)


def write_manifest(entries: list[ShardEntry], path) -> None:
    payload = {
        "format": "frameworld-manifest",
        "version": 1,
        "shards": [vars(e) for e in entries],
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def read_manifest(path) -> list[ShardEntry]:
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != "frameworld-manifest":
        raise ValueError(f"not a manifest: {path}")
    return [ShardEntry(**e) for e in payload["shards"]]


def load_corpus(manifest_path) -> list[TrainingSample]:
    """Read every shard listed in a manifest into memory."""
    root = Path(manifest_path).parent
    samples: list[TrainingSample] = []
    for entry in read_manifest(manifest_path):
        p = Path(entry.path)
        samples.extend(read_shard(p if p.is_absolute() else root / p))
    return samples

"""Quantitative evaluation: pose-following fidelity, cross-view consistency,
pose-encoding convergence comparison, and throughput measurement.

All image metrics operate on float arrays in [0, 1].  PSNR is capped at a
99 dB sentinel so identical inputs stay finite and comparable.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .codec import IdentityCodec, image_to_tensor
from .dataset import NO_AUGMENT, FrameRecord, TrainingSample, build_sample_group
from .diffusion import TrainConfig, Trainer, ddim_sample, make_schedule
from .distill import TwoStepSchedule, generator_sample
from .errors import (
    EmptyMeasurementError,
    InvalidComparisonError,
    ShapeMismatchError,
    UndefinedMetricError,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    DepthMap,
    render_point_cloud,
    unproject_depth,
)
from .model import FrameDiT, ModelConfig, POSE_MODES, conditions_from_samples
from .synthscene import Scene, render_view

PSNR_CAP = 99.0


def _as_float(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) for [0,1] images, optionally restricted to a mask."""
    a, b = _as_float(a), _as_float(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"psnr inputs differ: {a.shape} vs {b.shape}")
    if mask is not None:
        if mask.shape != a.shape[:2]:
            raise ShapeMismatchError(f"mask {mask.shape} vs image {a.shape[:2]}")
        if not mask.any():
            raise UndefinedMetricError("psnr over an empty mask")
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# Frame synthesizers (pluggable generators for evaluation)
# ---------------------------------------------------------------------------


class FrameSynthesizer:
    """Maps a TrainingSample's conditions to a [0,1] float image."""

    name = "base"

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        raise NotImplementedError


class AnchorCopyBaseline(FrameSynthesizer):
    """Outputs the anchor rendering; holes stay black."""

    name = "anchor-copy"

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        return sample.anchor_rgb.astype(np.float64) / 255.0


class ReferenceCopyBaseline(FrameSynthesizer):
    """Outputs the reference image unchanged."""

    name = "reference-copy"

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        return sample.x_ref.astype(np.float64) / 255.0


class GroundTruthOracle(FrameSynthesizer):
    """Returns the ground-truth target (upper bound; 99 dB everywhere)."""

    name = "oracle"

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        return sample.x_tgt.astype(np.float64) / 255.0


def _sample_noise(shape, seed: int, sample: TrainingSample, dtype) -> torch.Tensor:
    g = torch.Generator().manual_seed(
        (seed * 1_000_003 + sample.sequence_id * 131 + sample.target_index) % (2**63 - 1)
    )
    return torch.randn(shape, generator=g, dtype=dtype)


class TeacherSynthesizer(FrameSynthesizer):
    """Multi-step deterministic sampling from a trained noise predictor."""

    name = "teacher"

    def __init__(self, model: FrameDiT, schedule=None, n_steps: int = 50, seed: int = 0):
        self.model = model.eval()
        self.schedule = schedule or make_schedule(model.cfg.timesteps)
        self.n_steps = n_steps
        self.seed = seed
        self.codec = IdentityCodec()

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        dtype = next(self.model.parameters()).dtype
        _, cond = conditions_from_samples([sample], self.model.cfg, dtype=dtype)
        size = self.model.cfg.image_size
        noise = _sample_noise((1, 3, size, size), self.seed, sample, dtype)
        with torch.no_grad():
            img = ddim_sample(self.model, cond, self.n_steps, self.schedule, noise, codec=self.codec)
        return img[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)


class DistilledSynthesizer(FrameSynthesizer):
    """Few-step sampling from a distilled generator."""

    name = "distilled"

    def __init__(self, gen: FrameDiT, two_step: TwoStepSchedule, seed: int = 0):
        self.gen = gen.eval()
        self.two_step = two_step
        self.seed = seed
        self.codec = IdentityCodec()

    def __call__(self, sample: TrainingSample) -> np.ndarray:
        dtype = next(self.gen.parameters()).dtype
        _, cond = conditions_from_samples([sample], self.gen.cfg, dtype=dtype)
        size = self.gen.cfg.image_size
        noise = _sample_noise((2, 1, 3, size, size), self.seed, sample, dtype)
        with torch.no_grad():
            img = generator_sample(
                self.gen, cond, self.two_step, noise[0], bridge_noise=noise[1],
                codec=self.codec, return_latent=False,
            )
        return img[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)


# ---------------------------------------------------------------------------
# Pose-following error
# ---------------------------------------------------------------------------


@dataclass
class PoseFollowingReport:
    synthesizer: str
    per_frame_psnr: list[float]
    per_frame_hole_psnr: list[float | None]
    mean_psnr: float
    mean_hole_psnr: float | None

    def summary(self) -> str:
        hole = f"{self.mean_hole_psnr:.2f}" if self.mean_hole_psnr is not None else "n/a"
        return f"{self.synthesizer}: psnr {self.mean_psnr:.2f} dB, holes {hole} dB"


def eval_samples_for_trajectory(
    scene: Scene, K: CameraIntrinsics, poses: list[CameraPose], sequence_id: int = 0
) -> list[TrainingSample]:
    """Ground-truth 16-frame group with augmentation off."""
    frames = []
    for i, pose in enumerate(poses):
        rgb, depth = render_view(scene, K, pose)
        frames.append(FrameRecord(rgb=rgb, depth=depth, K=K, pose=pose, time_index=i))
    return build_sample_group(frames, np.random.default_rng(0), NO_AUGMENT, sequence_id)


def pose_following_error(
    synth: FrameSynthesizer,
    scene: Scene,
    K: CameraIntrinsics,
    poses: list[CameraPose],
    sequence_id: int = 0,
) -> PoseFollowingReport:
    """Generate every target of a trajectory group and compare with ground truth.

    Reports overall PSNR per frame plus PSNR restricted to anchor holes
    (pixels the point-cloud render left uncovered), which is where the
    generator must rely on the reference image.
    """
    samples = eval_samples_for_trajectory(scene, K, poses, sequence_id)
    per_frame, per_hole = [], []
    for s in samples:
        out = synth(s)
        gt = s.x_tgt.astype(np.float64) / 255.0
        per_frame.append(psnr(out, gt))
        holes = ~s.anchor_mask
        per_hole.append(psnr(out, gt, holes) if holes.any() else None)
    holes_present = [h for h in per_hole if h is not None]
    return PoseFollowingReport(
        synthesizer=synth.name,
        per_frame_psnr=per_frame,
        per_frame_hole_psnr=per_hole,
        mean_psnr=float(np.mean(per_frame)),
        mean_hole_psnr=float(np.mean(holes_present)) if holes_present else None,
    )


# ---------------------------------------------------------------------------
# Cross-view consistency
# ---------------------------------------------------------------------------


def cross_view_consistency(
    frame_a: np.ndarray,
    frame_b: np.ndarray,
    depth_a: DepthMap,
    K: CameraIntrinsics,
    pose_a: CameraPose,
    pose_b: CameraPose,
    depth_b: DepthMap | None = None,
    depth_tolerance: float = 0.01,
) -> float:
    """PSNR between view A warped into view B and frame B, on visible overlap.

    Pixels of A are lifted with A's depth and splatted into B with a
    z-buffer.  When ``depth_b`` is available (synthetic scenes), pixels
    whose warped depth disagrees with B's depth by more than
    ``depth_tolerance`` (relative) are treated as occluded and excluded;
    otherwise the z-buffer among warped points is the only occlusion filter.
    """
    a = _as_float(frame_a)
    b = _as_float(frame_b)
    h, w = depth_a.depth.shape
    cloud = unproject_depth(depth_a, a, K, pose_a)
    warped = render_point_cloud(cloud, K, pose_b, w, h)
    overlap = warped.mask.copy()
    if depth_b is not None:
        ok = depth_b.valid & (
            np.abs(warped.depth - depth_b.depth)
            <= depth_tolerance * np.maximum(depth_b.depth, 1e-9)
        )
        overlap &= ok
    if not overlap.any():
        raise UndefinedMetricError("no mutually visible pixels")
    mse = float(np.mean((warped.rgb[overlap] - b[overlap]) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# Convergence comparison across pose-encoding modes
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    mode: str
    checkpoints: list[int]
    train_loss: list[float]
    val_psnr: list[float]


def convergence_report(
    modes: list[str],
    corpus: list[TrainingSample],
    val_samples: list[TrainingSample],
    base_model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    checkpoint_every: int = 50,
    eval_steps: int = 20,
    log=None,
) -> list[ConvergenceRow]:
    """Identical-budget training runs differing only in pose encoding.

    Returns one row per mode with smoothed train loss and validation PSNR
    at every checkpoint.  Seeds, data and budget are shared; passing
    duplicate or unknown modes is an invalid comparison.
    """
    if not modes or len(set(modes)) != len(modes):
        raise InvalidComparisonError(f"modes must be unique and non-empty: {modes}")
    for m in modes:
        if m not in POSE_MODES:
            raise InvalidComparisonError(f"unknown pose mode {m!r}")
    rows = []
    for mode in modes:
        cfg_kwargs = {**asdict(base_model_cfg), "pose_mode": mode}
        torch.manual_seed(train_cfg.seed)
        model = FrameDiT(ModelConfig(**cfg_kwargs))
        trainer = Trainer(model, train_cfg)
        checkpoints, losses, psnrs = [], [], []
        history = []
        for start in range(0, train_cfg.total_steps, checkpoint_every):
            n = min(checkpoint_every, train_cfg.total_steps - start)
            history.extend(trainer.fit(corpus, steps=n, log=None))
            checkpoints.append(trainer.global_step)
            losses.append(float(np.mean([m_.loss for m_ in history[-n:]])))
            synth = TeacherSynthesizer(trainer.ema_model(), trainer.schedule, n_steps=eval_steps)
            vals = [psnr(synth(s), s.x_tgt.astype(np.float64) / 255.0) for s in val_samples]
            psnrs.append(float(np.mean(vals)))
            if log:
                log(f"{mode} step {trainer.global_step}: loss {losses[-1]:.4f} val {psnrs[-1]:.2f} dB")
        rows.append(ConvergenceRow(mode=mode, checkpoints=checkpoints, train_loss=losses, val_psnr=psnrs))
    return rows


def convergence_table(rows: list[ConvergenceRow]) -> str:
    """Machine-readable JSON-lines table, one row per mode."""
    return "\n".join(json.dumps(asdict(r)) for r in rows)


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------


@dataclass
class ThroughputReport:
    fps: float
    latency_ms_mean: float
    latency_ms_p50: float
    latency_ms_p95: float
    n_frames: int
    resolution: int
    hardware: str
    exclusive: bool = True  # measured with no concurrent load on the process

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def measure_throughput(frame_fn, resolution: int, n_frames: int, warmup: int = 1) -> ThroughputReport:
    """Wall-clock single-frame generation statistics.

    ``frame_fn()`` must synthesize one frame end to end.  Run exclusively;
    the report records that contract.
    """
    if n_frames <= 0:
        raise EmptyMeasurementError("n_frames must be positive")
    for _ in range(warmup):
        frame_fn()
    times = []
    for _ in range(n_frames):
        t0 = time.perf_counter()
        frame_fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    times = np.asarray(times)
    return ThroughputReport(
        fps=float(1000.0 * n_frames / times.sum()),
        latency_ms_mean=float(times.mean()),
        latency_ms_p50=float(np.percentile(times, 50)),
        latency_ms_p95=float(np.percentile(times, 95)),
        n_frames=n_frames,
        resolution=resolution,
        hardware=f"{platform.machine()}/{platform.processor() or 'cpu'} threads={torch.get_num_threads()}",
    )


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: dict[str, float]
    provenance: dict[str, str]
    wallclock: ThroughputReport | None = None

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not np.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")
        if not self.provenance or any(not str(v) for v in self.provenance.values()):
            raise ValueError("provenance fields must be non-empty")

    def to_json(self) -> str:
        payload = {
            "metrics": self.metrics,
            "provenance": self.provenance,
            "wallclock": asdict(self.wallclock) if self.wallclock else None,
        }
        return json.dumps(payload, indent=2)

"""Noise schedule, forward process, training loop and deterministic sampler.

The schedule is a variance-preserving cosine table (alpha_t^2 + sigma_t^2 = 1)
over ``T`` discrete steps.  Training predicts the injected noise with three
stabilizers: biased sampling of high-noise timesteps, progressive injection
of the explicit anchor (reference-only early phase, then a linear ramp), and
random anchor masking late in training.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import IdentityCodec, LatentCodec
from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from .model import (
    FrameConditions,
    FrameDiT,
    ModelConfig,
    conditions_from_samples,
    save_checkpoint,
)


# ---------------------------------------------------------------------------
# Schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step (alpha_t, sigma_t) tables with alpha^2 + sigma^2 = 1."""

    T: int
    alpha: torch.Tensor  # (T,) float64, decreasing from ~1
    sigma: torch.Tensor  # (T,) float64, increasing from ~0

    def coeffs(self, t: torch.Tensor, dtype=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Gather (alpha_t, sigma_t) for integer timesteps, broadcast-ready."""
        a = self.alpha.to(t.device)[t]
        s = self.sigma.to(t.device)[t]
        if dtype is not None:
            a, s = a.to(dtype), s.to(dtype)
        return a, s


def make_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine variance-preserving schedule on T steps."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    t = torch.arange(T, dtype=torch.float64) / T
    f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    abar = f / f[0]
    alpha = torch.sqrt(abar)
    sigma = torch.sqrt(1 - abar)
    return NoiseSchedule(T=T, alpha=alpha, sigma=sigma)


def add_noise(
    z: torch.Tensor, eps: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Exact forward process ``alpha_t * z + sigma_t * eps``."""
    if z.shape != eps.shape:
        raise ShapeMismatchError(f"z {tuple(z.shape)} vs eps {tuple(eps.shape)}")
    a, s = schedule.coeffs(t, dtype=z.dtype)
    view = (-1,) + (1,) * (z.dim() - 1)
    return a.view(view) * z + s.view(view) * eps


# ---------------------------------------------------------------------------
# Training configuration and strategy
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    total_steps: int = 4000
    batch_size: int = 16
    lr: float = 2e-4
    warmup_steps: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    # High-noise timestep biasing: with probability w_hi draw t uniformly
    # from [t_lo_frac * T, T).
    w_hi: float = 0.3
    t_lo_frac: float = 0.7
    # Progressive anchor injection: first n_phase1 steps reference-only,
    # then the unmask probability ramps linearly over n_ramp steps up to
    # (1 - p_mask), which is also the steady-state unmask probability.
    n_phase1: int | None = None  # default: 20% of total_steps
    n_ramp: int | None = None  # default: 10% of total_steps
    p_mask: float = 0.2
    ema_decay: float | None = 0.999
    log_every: int = 50

    def __post_init__(self):
        if not 0 <= self.w_hi <= 1:
            raise ConfigError("w_hi must be in [0, 1]")
        if not 0 <= self.p_mask <= 1:
            raise ConfigError("p_mask must be in [0, 1]")
        if self.n_phase1 is None:
            self.n_phase1 = int(0.2 * self.total_steps)
        if self.n_ramp is None:
            self.n_ramp = int(0.1 * self.total_steps)
        if self.n_phase1 < 0 or self.n_ramp < 0:
            raise ConfigError("phase lengths must be >= 0")


def sample_timestep_biased(
    rng: np.random.Generator, cfg: TrainConfig, T: int, size: int | None = None
) -> np.ndarray | int:
    """Mixture of uniform over [0, T) and uniform over the high-noise band."""
    n = 1 if size is None else size
    t_lo = int(cfg.t_lo_frac * T)
    hi = rng.uniform(size=n) < cfg.w_hi
    t = rng.integers(0, T, size=n)
    t_high = rng.integers(t_lo, T, size=n)
    out = np.where(hi, t_high, t)
    return int(out[0]) if size is None else out


def anchor_unmask_probability(step: int, cfg: TrainConfig) -> float:
    """Probability that the anchor is *visible* at a given global step."""
    target = 1.0 - cfg.p_mask
    if step < cfg.n_phase1:
        return 0.0
    if step < cfg.n_phase1 + cfg.n_ramp:
        frac = (step - cfg.n_phase1 + 1) / cfg.n_ramp
        return target * frac
    return target


def sample_anchor_masked(
    rng: np.random.Generator, step: int, cfg: TrainConfig, batch: int
) -> np.ndarray:
    """Per-sample anchor mask decision (True = anchor hidden)."""
    p_unmask = anchor_unmask_probability(step, cfg)
    return rng.uniform(size=batch) >= p_unmask


def training_phase(step: int, cfg: TrainConfig) -> str:
    if step < cfg.n_phase1:
        return "implicit-only"
    if step < cfg.n_phase1 + cfg.n_ramp:
        return "ramp"
    return "steady"


# ---------------------------------------------------------------------------
# Single training step and the loop
# ---------------------------------------------------------------------------


def epsilon_mse(
    model: FrameDiT,
    z0: torch.Tensor,
    cond: FrameConditions | None,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    anchor_masked: bool | torch.Tensor = False,
) -> torch.Tensor:
    """Per-batch mean of the noise-prediction squared error."""
    z_t = add_noise(z0, eps, t, schedule)
    pred = model(z_t, t, cond, anchor_masked)
    return ((pred - eps) ** 2).mean()


@dataclass
class StepMetrics:
    step: int
    loss: float
    phase: str
    anchor_masked_frac: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


class Trainer:
    """Noise-prediction training over TrainingSample batches.

    Holds the model, optimizer, schedule and the anchor-injection
    instrumentation counters used to verify the strategy empirically.
    """

    def __init__(
        self,
        model: FrameDiT,
        cfg: TrainConfig,
        schedule: NoiseSchedule | None = None,
        codec: LatentCodec | None = None,
        device: str = "cpu",
    ):
        self.model = model.to(device)
        self.cfg = cfg
        self.schedule = schedule or make_schedule(model.cfg.timesteps)
        self.codec = codec or IdentityCodec()
        self.device = device
        self.opt = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.global_step = 0
        self.mask_counts = {"implicit-only": [0, 0], "ramp": [0, 0], "steady": [0, 0]}
        self.ema: dict[str, torch.Tensor] | None = None
        if cfg.ema_decay is not None:
            self.ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    def _lr_at(self, step: int) -> float:
        if step < self.cfg.warmup_steps:
            return self.cfg.lr * (step + 1) / self.cfg.warmup_steps
        return self.cfg.lr

    def _update_ema(self):
        if self.ema is None:
            return
        d = self.cfg.ema_decay
        with torch.no_grad():
            for k, v in self.model.state_dict().items():
                if v.dtype.is_floating_point:
                    self.ema[k].mul_(d).add_(v, alpha=1 - d)
                else:
                    self.ema[k].copy_(v)

    def step(self, samples) -> StepMetrics:
        """One optimizer step on a list of TrainingSamples."""
        cfg = self.cfg
        targets, cond = conditions_from_samples(samples, self.model.cfg)
        targets = targets.to(self.device)
        cond = cond.to(device=self.device)
        z0 = self.codec.encode(targets)
        b = z0.shape[0]

        t_np = sample_timestep_biased(self.rng, cfg, self.schedule.T, size=b)
        t = torch.from_numpy(np.asarray(t_np)).long().to(self.device)
        masked_np = sample_anchor_masked(self.rng, self.global_step, cfg, b)
        masked = torch.from_numpy(masked_np).to(self.device)
        phase = training_phase(self.global_step, cfg)
        self.mask_counts[phase][0] += int(masked_np.sum())
        self.mask_counts[phase][1] += b

        gen = torch.Generator(device="cpu").manual_seed(
            int(self.rng.integers(0, 2**63 - 1))
        )
        eps = torch.randn(z0.shape, generator=gen).to(self.device, z0.dtype)

        for group in self.opt.param_groups:
            group["lr"] = self._lr_at(self.global_step)
        self.opt.zero_grad(set_to_none=True)
        loss = epsilon_mse(self.model, z0, cond, t, eps, self.schedule, masked)
        if not torch.isfinite(loss):
            raise TrainingDivergedError("non-finite training loss", step=self.global_step)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.opt.step()
        self._update_ema()

        metrics = StepMetrics(
            step=self.global_step,
            loss=float(loss.detach()),
            phase=phase,
            anchor_masked_frac=float(masked_np.mean()),
            lr=self._lr_at(self.global_step),
        )
        self.global_step += 1
        return metrics

    def fit(
        self,
        corpus,
        steps: int | None = None,
        metrics_path=None,
        log=print,
    ) -> list[StepMetrics]:
        """Train for ``steps`` (default cfg.total_steps) over a sample corpus."""
        steps = steps if steps is not None else self.cfg.total_steps
        history: list[StepMetrics] = []
        sink = open(metrics_path, "a") if metrics_path else None
        start = time.perf_counter()
        try:
            for _ in range(steps):
                idx = self.rng.choice(len(corpus), size=min(self.cfg.batch_size, len(corpus)), replace=False)
                batch = [corpus[i] for i in idx]
                m = self.step(batch)
                history.append(m)
                if sink:
                    sink.write(m.to_json() + "\n")
                if log and m.step % self.cfg.log_every == 0:
                    rate = (m.step + 1) / (time.perf_counter() - start)
                    log(
                        f"step {m.step} loss {m.loss:.4f} phase {m.phase} "
                        f"mask {m.anchor_masked_frac:.2f} ({rate:.2f} it/s)"
                    )
        finally:
            if sink:
                sink.close()
        return history

    def ema_model(self) -> FrameDiT:
        """A copy of the model carrying the EMA weights (or live weights)."""
        m = FrameDiT(self.model.cfg)
        m.load_state_dict(self.ema if self.ema is not None else self.model.state_dict())
        m.eval()
        return m

    def save(self, path, extra: dict | None = None):
        payload = dict(extra or {})
        payload["global_step"] = self.global_step
        if self.ema is not None:
            payload["ema"] = {k: v.clone() for k, v in self.ema.items()}
        save_checkpoint(path, self.model, payload)


# ---------------------------------------------------------------------------
# Deterministic sampler
# ---------------------------------------------------------------------------


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """Evenly spaced descending sub-schedule from T-1 to 0, n_steps+1 points."""
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    return [int(round(x)) for x in np.linspace(T - 1, 0, n_steps + 1)]


@torch.no_grad()
def ddim_sample(
    model,
    cond: FrameConditions | None,
    n_steps: int,
    schedule: NoiseSchedule,
    init_noise: torch.Tensor,
    codec: LatentCodec | None = None,
    anchor_masked: bool | torch.Tensor = False,
    return_latent: bool = False,
) -> torch.Tensor:
    """Deterministic ancestral-free sampling from pure noise.

    Each step predicts the clean latent via ``x0 = (z - sigma * eps) / alpha``
    and re-projects it onto the next noise level with the same predicted
    noise.  Output is decoded through the codec unless ``return_latent``.
    """
    ts = ddim_timesteps(schedule.T, n_steps)
    z = init_noise
    b = z.shape[0]
    x0 = z
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        t = torch.full((b,), t_cur, dtype=torch.long, device=z.device)
        eps_hat = model(z, t, cond, anchor_masked)
        a, s = schedule.coeffs(t, dtype=z.dtype)
        view = (-1,) + (1,) * (z.dim() - 1)
        x0 = (z - s.view(view) * eps_hat) / a.view(view)
        t_n = torch.full((b,), t_next, dtype=torch.long, device=z.device)
        a_n, s_n = schedule.coeffs(t_n, dtype=z.dtype)
        z = a_n.view(view) * x0 + s_n.view(view) * eps_hat
    if return_latent:
        return x0
    codec = codec or IdentityCodec()
    return codec.decode(x0)

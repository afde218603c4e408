"""Distillation of the multi-step teacher into a few-step generator.

Three networks take part: a frozen copy of the teacher estimating the real
denoising score, a continually trained copy estimating the score of the
generator's output distribution, and the generator itself.  The generator
descends the difference between the two denoising predictions, regularized
by regression onto pre-computed (noise -> teacher sample) pairs.

Sampling uses a two-step schedule: denoise from pure noise to a clean
estimate, re-noise to an intermediate timestep ``t_mid`` with fresh noise,
and denoise once more.  ``t_mid = 0`` degenerates to single-step sampling.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import IdentityCodec, LatentCodec
from .diffusion import (
    NoiseSchedule,
    TrainConfig,
    add_noise,
    ddim_sample,
    make_schedule,
    sample_timestep_biased,
)
from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError
from .model import FrameConditions, stack_conditions


# ---------------------------------------------------------------------------
# Two-step schedule and generator sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoStepSchedule:
    """Denoising step list [T-1 -> t_mid, t_mid -> 0]; t_mid=0 is 1-step."""

    schedule: NoiseSchedule
    t_mid: int = 200

    def __post_init__(self):
        if not 0 <= self.t_mid < self.schedule.T:
            raise ConfigError(f"t_mid must lie in [0, {self.schedule.T}), got {self.t_mid}")

    @property
    def n_steps(self) -> int:
        return 2 if self.t_mid > 0 else 1

    def step_list(self) -> list[int]:
        start = self.schedule.T - 1
        return [start, self.t_mid, 0] if self.t_mid > 0 else [start, 0]


def _x0_from_eps(z, eps, t, schedule: NoiseSchedule):
    a, s = schedule.coeffs(t, dtype=z.dtype)
    view = (-1,) + (1,) * (z.dim() - 1)
    return (z - s.view(view) * eps) / a.view(view)


def _clean_estimate(model, z, t, cond, anchor_masked, schedule: NoiseSchedule):
    """Model-predicted clean latent under either output parameterization.

    Models carrying ``predicts == "x0"`` emit the clean latent directly;
    everything else is treated as a noise predictor.  Direct prediction is
    what few-step students use: near t = T-1 the epsilon conversion divides
    by alpha ~ 1e-3, which buries the sample content in a microscopic
    perturbation of the predicted noise.
    """
    out = model(z, t, cond, anchor_masked)
    if getattr(model, "predicts", "eps") == "x0":
        return out
    return _x0_from_eps(z, out, t, schedule)


def generator_sample(
    gen,
    cond: FrameConditions | None,
    sched: TwoStepSchedule,
    init_noise: torch.Tensor,
    bridge_noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
    anchor_masked: bool | torch.Tensor = False,
    codec: LatentCodec | None = None,
    return_latent: bool = True,
) -> torch.Tensor:
    """Few-step sampling: denoise, re-noise to t_mid with fresh noise, denoise.

    Deterministic given ``init_noise`` and either an explicit
    ``bridge_noise`` or a seeded ``generator`` for the re-noising draw.
    """
    schedule = sched.schedule
    b = init_noise.shape[0]
    device = init_noise.device
    t0 = torch.full((b,), schedule.T - 1, dtype=torch.long, device=device)
    z = init_noise
    x0 = _clean_estimate(gen, z, t0, cond, anchor_masked, schedule)
    if sched.t_mid > 0:
        if bridge_noise is None:
            bridge_noise = torch.randn(
                x0.shape, generator=generator, dtype=x0.dtype, device=device
            )
        t_mid = torch.full((b,), sched.t_mid, dtype=torch.long, device=device)
        z2 = add_noise(x0, bridge_noise, t_mid, schedule)
        x0 = _clean_estimate(gen, z2, t_mid, cond, anchor_masked, schedule)
    if return_latent:
        return x0
    return (codec or IdentityCodec()).decode(x0)


# ---------------------------------------------------------------------------
# Distillation state
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    steps: int = 400
    batch_size: int = 8
    t_mid: int = 200
    lr_generator: float = 1e-4
    lr_fake: float = 2e-4
    lambda_reg: float = 0.25
    dmd_weight: float = 1.0
    # Regression-only warm start: the few-step sampler inherits a wild
    # clean-latent estimate at t = T-1 from the epsilon parameterization, so
    # the generator is first anchored to the teacher's sampler outputs.
    warmstart_steps: int = 0
    fake_updates_per_step: int = 1
    # Timestep band for the score-difference gradient (fractions of T).
    t_band: tuple[float, float] = (0.02, 0.98)
    reg_pairs: int = 64
    teacher_steps: int = 50
    reg_batch: int = 4
    seed: int = 0
    grad_clip: float = 1.0
    # Per-sample cap on the score-difference direction norm.  At low noise
    # levels the stability normalizer shrinks faster than the fake-score
    # fitting error, which would otherwise inject unbounded noise.
    dmd_grad_max_norm: float | None = 1.0
    # Anchor handling for the fake-score updates mirrors steady-state
    # training; the generator itself always sees its conditions.
    fake_p_mask: float = 0.2

    def __post_init__(self):
        if not 0 <= self.t_band[0] < self.t_band[1] <= 1:
            raise ConfigError(f"bad t_band {self.t_band}")
        if self.lambda_reg < 0 or self.dmd_weight < 0:
            raise ConfigError("loss weights must be >= 0")


class DMDState:
    """Holds the generator, the frozen real-score model and the fake-score model."""

    def __init__(
        self,
        teacher,
        cfg: DistillConfig,
        schedule: NoiseSchedule | None = None,
        generator=None,
        fake_score=None,
    ):
        """By default the generator and fake score start as teacher copies.

        Explicit ``generator``/``fake_score`` modules support teachers that
        are not trainable networks (e.g. closed-form scores in the 2-d
        test beds).
        """
        self.cfg = cfg
        self.schedule = schedule or make_schedule(getattr(teacher, "cfg", None).timesteps if hasattr(teacher, "cfg") else 1000)
        self.generator = (generator or copy.deepcopy(teacher)).train()
        # The student emits the clean latent directly; its weights still
        # start from the teacher copy in the default path.
        self.generator.predicts = "x0"
        self.real_score = copy.deepcopy(teacher).eval()
        for p in self.real_score.parameters():
            p.requires_grad_(False)
        self.fake_score = (fake_score or copy.deepcopy(teacher)).train()
        self.opt_generator = torch.optim.AdamW(self.generator.parameters(), lr=cfg.lr_generator)
        self.opt_fake = torch.optim.AdamW(self.fake_score.parameters(), lr=cfg.lr_fake)
        self.two_step = TwoStepSchedule(self.schedule, cfg.t_mid)
        self.step_count = 0
        self.real_hash = self.parameter_hash(self.real_score)

    @staticmethod
    def parameter_hash(model) -> str:
        from .model import parameter_hash

        return parameter_hash(model)

    def assert_real_frozen(self):
        h = self.parameter_hash(self.real_score)
        if h != self.real_hash:
            raise RuntimeError("real-score parameters changed during distillation")


def dmd_generator_grad(
    state: DMDState,
    x_gen: torch.Tensor,
    cond: FrameConditions | None,
    t: torch.Tensor,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Score-difference update direction for the generator output.

    Returns the per-sample direction ``(x0_real - x0_fake) / n`` where both
    clean-latent estimates are evaluated at the same noised input and ``n``
    is the mean absolute real-prediction error (a per-sample stability
    normalizer).  The direction is proportional to the fake-real noise
    prediction difference; adding it to ``x_gen`` descends the distribution
    mismatch, so the surrogate loss couples it to the generator with the
    gradient flowing through ``x_gen`` only.
    """
    with torch.no_grad():
        z_t = add_noise(x_gen, noise, t, state.schedule)
        eps_real = state.real_score(z_t, t, cond, False)
        eps_fake = state.fake_score(z_t, t, cond, False)
        x0_real = _x0_from_eps(z_t, eps_real, t, state.schedule)
        x0_fake = _x0_from_eps(z_t, eps_fake, t, state.schedule)
        err = (x_gen - x0_real).flatten(1).abs().mean(dim=1)
        norm = err.clamp(min=1e-8).view((-1,) + (1,) * (x_gen.dim() - 1))
        grad = (x0_real - x0_fake) / norm
        cap = state.cfg.dmd_grad_max_norm
        if cap is not None:
            n = grad.flatten(1).norm(dim=1).view((-1,) + (1,) * (grad.dim() - 1))
            grad = grad * torch.clamp(cap / n.clamp(min=1e-12), max=1.0)
    if not torch.isfinite(grad).all():
        raise TrainingDivergedError("non-finite distillation gradient", step=state.step_count)
    return grad


def dmd_surrogate_loss(x_gen: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """0.5 || x_gen - sg(x_gen + grad) ||^2; pushes x_gen along ``grad``."""
    target = (x_gen + grad).detach()
    return 0.5 * ((x_gen - target) ** 2).flatten(1).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# Regression pairs
# ---------------------------------------------------------------------------


@dataclass
class RegressionPair:
    init_noise: torch.Tensor
    bridge_noise: torch.Tensor
    cond_index: int  # -1 for unconditional
    teacher_latent: torch.Tensor


@dataclass
class RegressionPairs:
    pairs: list[RegressionPair]
    conds: list[FrameConditions] | None

    def __len__(self) -> int:
        return len(self.pairs)

    def cond_of(self, pair: RegressionPair) -> FrameConditions | None:
        if pair.cond_index < 0 or self.conds is None:
            return None
        return self.conds[pair.cond_index]


def build_regression_pairs(
    teacher,
    conds: list[FrameConditions] | None,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    latent_shape: tuple[int, ...],
    teacher_steps: int = 50,
) -> RegressionPairs:
    """Pre-compute (noise, condition, deterministic-sampler output) triples."""
    pairs = []
    teacher.eval()
    for i in range(n):
        g = torch.Generator().manual_seed(seed * 1_000_003 + i)
        init = torch.randn((1, *latent_shape), generator=g)
        bridge = torch.randn((1, *latent_shape), generator=g)
        idx = -1
        cond = None
        if conds:
            idx = i % len(conds)
            cond = conds[idx]
        dtype = next(teacher.parameters()).dtype
        with torch.no_grad():
            out = ddim_sample(
                teacher, cond, teacher_steps, schedule, init.to(dtype), return_latent=True
            )
        pairs.append(
            RegressionPair(
                init_noise=init.to(dtype),
                bridge_noise=bridge.to(dtype),
                cond_index=idx,
                teacher_latent=out,
            )
        )
    return RegressionPairs(pairs=pairs, conds=conds)


def regression_loss(sample_fn, pairs: RegressionPairs, indices=None) -> torch.Tensor:
    """MSE between ``sample_fn(init, bridge, cond)`` and the stored teacher output."""
    if indices is None:
        indices = range(len(pairs))
    losses = []
    for i in indices:
        p = pairs.pairs[i]
        if p.teacher_latent.shape != p.init_noise.shape:
            raise ShapeMismatchError("pair latent/noise shape mismatch")
        out = sample_fn(p.init_noise, p.bridge_noise, pairs.cond_of(p))
        losses.append(((out - p.teacher_latent) ** 2).mean())
    return torch.stack(losses).mean()


def per_step_regression(
    state: DMDState, pairs: RegressionPairs, indices, chain_grad: bool = False
) -> torch.Tensor:
    """Regression decomposed per sampler step.

    Step 1 is trained from pure noise toward the teacher output; step 2 from
    the *re-noised teacher output*, so neither step chases the other's
    moving estimate.  This conditions the warm start far better than
    back-propagating through the full chain, whose first step carries a
    1/alpha_(T-1) amplification.
    """
    sched = state.schedule
    gen = state.generator
    losses = []
    for i in indices:
        p = pairs.pairs[i]
        cond = pairs.cond_of(p)
        b = p.init_noise.shape[0]
        t0 = torch.full((b,), sched.T - 1, dtype=torch.long)
        x0a = _clean_estimate(gen, p.init_noise, t0, cond, False, sched)
        losses.append(((x0a - p.teacher_latent) ** 2).mean())
        if state.two_step.t_mid > 0:
            tm = torch.full((b,), state.two_step.t_mid, dtype=torch.long)
            z2 = add_noise(p.teacher_latent, p.bridge_noise, tm, sched)
            x0b = _clean_estimate(gen, z2, tm, cond, False, sched)
            losses.append(((x0b - p.teacher_latent) ** 2).mean())
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Fake-score updates and the loop
# ---------------------------------------------------------------------------


def fake_score_step(
    state: DMDState,
    x_gen: torch.Tensor,
    cond: FrameConditions | None,
    rng: np.random.Generator,
) -> float:
    """One noise-prediction step for the fake-score model on generator outputs."""
    if x_gen.requires_grad:
        raise ValueError("fake-score updates need detached generator outputs")
    b = x_gen.shape[0]
    tcfg = TrainConfig(total_steps=1, n_phase1=0, n_ramp=0, p_mask=state.cfg.fake_p_mask)
    t = torch.from_numpy(
        np.asarray(sample_timestep_biased(rng, tcfg, state.schedule.T, size=b))
    ).long()
    masked = torch.from_numpy(rng.uniform(size=b) < state.cfg.fake_p_mask) if cond is not None else False
    g = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    eps = torch.randn(x_gen.shape, generator=g, dtype=x_gen.dtype)
    z_t = add_noise(x_gen, eps, t, state.schedule)
    pred = state.fake_score(z_t, t, cond, masked)
    loss = ((pred - eps) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError("fake-score loss diverged", step=state.step_count)
    state.opt_fake.zero_grad(set_to_none=True)
    loss.backward()
    if state.cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.fake_score.parameters(), state.cfg.grad_clip)
    state.opt_fake.step()
    return float(loss.detach())


@dataclass
class DistillMetrics:
    step: int
    loss_dmd: float
    loss_reg: float
    loss_fake: float


@dataclass
class DistillResult:
    metrics: list[DistillMetrics]
    aborted: bool = False
    abort_reason: str = ""


def distill_loop(
    state: DMDState,
    conds: list[FrameConditions] | None,
    latent_shape: tuple[int, ...],
    cfg: DistillConfig,
    pairs: RegressionPairs | None = None,
    log=print,
    log_every: int = 25,
) -> DistillResult:
    """Alternate fake-score and generator updates.

    On divergence the loop aborts, restores the last finite-loss generator
    parameters, and reports the reason instead of raising.
    """
    rng = np.random.default_rng(cfg.seed)
    metrics: list[DistillMetrics] = []
    t_lo = int(cfg.t_band[0] * state.schedule.T)
    t_hi = max(int(cfg.t_band[1] * state.schedule.T), t_lo + 1)
    dtype = next(state.generator.parameters()).dtype
    last_good = copy.deepcopy(state.generator.state_dict())

    for step in range(cfg.steps):
        warm = step < cfg.warmstart_steps
        try:
            if conds:
                idx = rng.choice(len(conds), size=min(cfg.batch_size, len(conds)), replace=False)
                cond = stack_conditions([conds[i] for i in idx])
                b = cond.batch_size
            else:
                cond = None
                b = cfg.batch_size

            g = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
            init = torch.randn((b, *latent_shape), generator=g, dtype=dtype)
            bridge = torch.randn((b, *latent_shape), generator=g, dtype=dtype)
            loss_fake = 0.0
            loss_dmd = torch.zeros((), dtype=dtype)
            if warm:
                # Keep the fake score tracking the generator's (moving)
                # output distribution even before its gradient is used.
                with torch.no_grad():
                    x_sim = generator_sample(
                        state.generator, cond, state.two_step, init, bridge_noise=bridge
                    )
                for _ in range(cfg.fake_updates_per_step):
                    loss_fake = fake_score_step(state, x_sim, cond, rng)
            else:
                x_gen = generator_sample(
                    state.generator, cond, state.two_step, init, bridge_noise=bridge
                )
                for _ in range(cfg.fake_updates_per_step):
                    loss_fake = fake_score_step(state, x_gen.detach(), cond, rng)

                t = torch.from_numpy(rng.integers(t_lo, t_hi, size=b)).long()
                noise = torch.randn(x_gen.shape, generator=g, dtype=dtype)
                grad = dmd_generator_grad(state, x_gen, cond, t, noise)
                loss_dmd = dmd_surrogate_loss(x_gen, grad)

            loss_reg = torch.zeros((), dtype=dtype)
            reg_weight = 1.0 if warm else cfg.lambda_reg
            if pairs and reg_weight > 0:
                sel = rng.choice(len(pairs), size=min(cfg.reg_batch, len(pairs)), replace=False)
                if warm:
                    loss_reg = per_step_regression(state, pairs, sel)
                else:
                    sample_fn = lambda ni, bn, c: generator_sample(
                        state.generator, c, state.two_step, ni, bridge_noise=bn
                    )
                    loss_reg = regression_loss(sample_fn, pairs, indices=sel)

            total = (0.0 if warm else cfg.dmd_weight) * loss_dmd + reg_weight * loss_reg
            if not torch.isfinite(total):
                raise TrainingDivergedError("generator loss diverged", step=step)
            state.opt_generator.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(state.generator.parameters(), cfg.grad_clip)
            state.opt_generator.step()
            state.step_count += 1
            last_good = copy.deepcopy(state.generator.state_dict())
        except TrainingDivergedError as e:
            state.generator.load_state_dict(last_good)
            return DistillResult(metrics=metrics, aborted=True, abort_reason=str(e))

        m = DistillMetrics(
            step=step,
            loss_dmd=float(loss_dmd.detach()),
            loss_reg=float(loss_reg.detach()),
            loss_fake=loss_fake,
        )
        metrics.append(m)
        if log and step % log_every == 0:
            log(
                f"distill step {step}: dmd {m.loss_dmd:.4f} reg {m.loss_reg:.4f} "
                f"fake {m.loss_fake:.4f}"
            )
    state.assert_real_frozen()
    return DistillResult(metrics=metrics)

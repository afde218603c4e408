"""Few-step distillation: schedules, score-difference gradients, regression
pairs, and the full loop on 2-d toys."""

import numpy as np
import pytest
import torch

from frameworld.diffusion import ddim_sample, make_schedule
from frameworld.distill import (
    DistillConfig,
    DMDState,
    RegressionPairs,
    TwoStepSchedule,
    build_regression_pairs,
    distill_loop,
    dmd_generator_grad,
    dmd_surrogate_loss,
    fake_score_step,
    generator_sample,
    regression_loss,
)
from frameworld.errors import ConfigError
from frameworld.model import parameter_hash
from frameworld.toys import (
    AnalyticGaussianEps,
    AnalyticMixtureEps,
    ToyEpsNet,
    component_means,
    sample_mixture,
    train_toy_teacher,
)

SCHED = make_schedule(1000)


class PerfectEps(torch.nn.Module):
    """Oracle that knows the ground-truth latent."""

    def __init__(self, x_gt: torch.Tensor, schedule):
        super().__init__()
        self.x_gt = x_gt
        self.schedule = schedule

    def forward(self, z_t, t, cond=None, anchor_masked=False):
        a, s = self.schedule.coeffs(t, dtype=z_t.dtype)
        view = (-1,) + (1,) * (z_t.dim() - 1)
        return (z_t - a.view(view) * self.x_gt) / torch.clamp(s.view(view), min=1e-12)


class TestTwoStepSchedule:
    def test_step_list(self):
        two = TwoStepSchedule(SCHED, t_mid=200)
        assert two.step_list() == [999, 200, 0]
        assert two.n_steps == 2

    def test_degenerate_single_step(self):
        one = TwoStepSchedule(SCHED, t_mid=0)
        assert one.step_list() == [999, 0]
        assert one.n_steps == 1

    def test_invalid_tmid(self):
        with pytest.raises(ConfigError):
            TwoStepSchedule(SCHED, t_mid=1000)


class TestGeneratorSample:
    def test_tmid_zero_reduces_to_single_step(self):
        x_gt = torch.randn(2, 2, dtype=torch.float64)
        gen = PerfectEps(x_gt, SCHED)
        noise = torch.randn_like(x_gt)
        one = generator_sample(gen, None, TwoStepSchedule(SCHED, 0), noise)
        # Single-step output equals the first-step x0 estimate directly.
        t0 = torch.full((2,), 999)
        eps = gen(noise, t0)
        a, s = SCHED.coeffs(t0, dtype=noise.dtype)
        expected = (noise - s[:, None] * eps) / a[:, None]
        assert torch.allclose(one, expected, atol=1e-12)

    def test_oracle_recovers_ground_truth_both_steps(self):
        x_gt = torch.randn(3, 2, dtype=torch.float64)
        gen = PerfectEps(x_gt, SCHED)
        noise = torch.randn_like(x_gt)
        bridge = torch.randn_like(x_gt)
        out = generator_sample(gen, None, TwoStepSchedule(SCHED, 200), noise, bridge_noise=bridge)
        assert torch.allclose(out, x_gt, atol=1e-5)

    def test_deterministic_with_seeded_generator(self):
        x_gt = torch.randn(1, 2, dtype=torch.float64)
        gen = PerfectEps(x_gt, SCHED)
        noise = torch.randn_like(x_gt)
        a = generator_sample(gen, None, TwoStepSchedule(SCHED, 300), noise,
                             generator=torch.Generator().manual_seed(5))
        b = generator_sample(gen, None, TwoStepSchedule(SCHED, 300), noise,
                             generator=torch.Generator().manual_seed(5))
        assert torch.equal(a, b)


class TestDMDGradient:
    def make_state(self, mu_real, mu_fake, cfg=None):
        real = AnalyticGaussianEps(torch.tensor(mu_real), SCHED)
        state = DMDState(real, cfg or DistillConfig(), schedule=SCHED)
        state.fake_score = AnalyticGaussianEps(torch.tensor(mu_fake), SCHED)
        return state

    def test_matched_scores_zero_gradient(self):
        state = self.make_state([1.0, -2.0], [1.0, -2.0])
        x = torch.randn(8, 2, dtype=torch.float64)
        t = torch.full((8,), 500)
        noise = torch.randn_like(x)
        grad = dmd_generator_grad(state, x, None, t, noise)
        assert grad.abs().max().item() < 1e-10

    def test_gradient_points_toward_real_mean(self):
        # Closed-form scores: the update direction must point from the fake
        # mean toward the real mean.
        mu_real = np.array([2.0, 0.0])
        mu_fake = np.array([-1.0, 1.0])
        state = self.make_state(mu_real, mu_fake)
        rng = np.random.default_rng(0)
        x = torch.tensor(mu_fake + 0.1 * rng.normal(size=(64, 2)))
        t = torch.from_numpy(rng.integers(50, 950, size=64)).long()
        noise = torch.randn(64, 2, dtype=torch.float64,
                            generator=torch.Generator().manual_seed(1))
        grad = dmd_generator_grad(state, x, None, t, noise)
        direction = torch.tensor(mu_real - mu_fake)
        dots = (grad * direction).sum(dim=1)
        assert dots.mean().item() > 0
        assert (dots > 0).float().mean().item() > 0.9

    def test_gradient_finite_fuzz(self):
        state = self.make_state([0.5, 0.5], [-0.5, 0.3])
        rng = np.random.default_rng(2)
        for _ in range(20):
            n = int(rng.integers(1, 16))
            x = torch.tensor(rng.normal(scale=3.0, size=(n, 2)))
            t = torch.from_numpy(rng.integers(20, 980, size=n)).long()
            noise = torch.tensor(rng.normal(size=(n, 2)))
            grad = dmd_generator_grad(state, x, None, t, noise)
            assert torch.isfinite(grad).all()

    def test_surrogate_loss_moves_x_along_grad(self):
        x = torch.zeros(2, 2, dtype=torch.float64, requires_grad=True)
        grad = torch.tensor([[1.0, -1.0], [0.5, 0.0]], dtype=torch.float64)
        loss = dmd_surrogate_loss(x, grad)
        loss.backward()
        # Gradient descent x -= lr * x.grad moves x along +grad (the loss
        # averages over the batch, hence the 1/B factor).
        assert torch.allclose(x.grad, -grad / x.shape[0])


class TestRegressionPairs:
    def test_pair_count_and_reproducibility(self):
        x_gt = torch.randn(1, 2, dtype=torch.float64)
        teacher = PerfectEps(x_gt, SCHED)
        teacher.dummy = torch.nn.Parameter(torch.zeros(1))  # parameters() non-empty
        a = build_regression_pairs(teacher, None, 5, seed=3, schedule=SCHED, latent_shape=(2,))
        b = build_regression_pairs(teacher, None, 5, seed=3, schedule=SCHED, latent_shape=(2,))
        assert len(a) == 5
        for pa, pb in zip(a.pairs, b.pairs):
            assert torch.equal(pa.init_noise, pb.init_noise)
            assert torch.equal(pa.teacher_latent, pb.teacher_latent)

    def test_wrapped_teacher_sampler_zero_loss(self):
        x_gt = torch.randn(1, 2, dtype=torch.float64)
        teacher = PerfectEps(x_gt, SCHED)
        teacher.dummy = torch.nn.Parameter(torch.zeros(1))
        pairs = build_regression_pairs(teacher, None, 4, seed=0, schedule=SCHED,
                                       latent_shape=(2,), teacher_steps=50)
        sample_fn = lambda ni, bn, c: ddim_sample(teacher, c, 50, SCHED, ni, return_latent=True)
        loss = regression_loss(sample_fn, pairs)
        assert loss.item() < 1e-20


class TestFakeScoreStep:
    def test_real_hash_invariant_and_optimizer_isolation(self):
        sched = make_schedule(1000)
        rng = np.random.default_rng(4)
        data = sample_mixture(rng, 512, np.array([[1.5, 0.0], [-1.5, 0.0]]))
        teacher = train_toy_teacher(data, sched, steps=100, seed=0)
        state = DMDState(teacher, DistillConfig(), schedule=sched)
        fake_before = parameter_hash(state.fake_score)
        gen_before = parameter_hash(state.generator)
        x_gen = torch.tensor(rng.normal(size=(16, 2)))
        for _ in range(3):
            fake_score_step(state, x_gen, None, rng)
        state.assert_real_frozen()
        assert parameter_hash(state.fake_score) != fake_before
        assert parameter_hash(state.generator) == gen_before  # untouched

    def test_requires_detached_input(self):
        sched = make_schedule(100)
        teacher = ToyEpsNet(timesteps=100).double()
        state = DMDState(teacher, DistillConfig(t_mid=20), schedule=sched)
        x = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError):
            fake_score_step(state, x, None, np.random.default_rng(0))

    def test_fake_loss_drops_on_fixed_generator_outputs(self):
        sched = make_schedule(1000)
        rng = np.random.default_rng(5)
        data = sample_mixture(rng, 512, np.array([[1.0, 1.0], [-1.0, -1.0]]))
        teacher = train_toy_teacher(data, sched, steps=200, seed=1)
        state = DMDState(teacher, DistillConfig(lr_fake=1e-3), schedule=sched)
        # Fixed synthetic outputs from a shifted distribution.
        x_gen = torch.tensor(rng.normal(loc=3.0, scale=0.2, size=(64, 2)))
        first = np.mean([fake_score_step(state, x_gen, None, rng) for _ in range(5)])
        for _ in range(120):
            fake_score_step(state, x_gen, None, rng)
        last = np.mean([fake_score_step(state, x_gen, None, rng) for _ in range(5)])
        assert last < first


class TestDistillLoop:
    def test_gaussian_mixture_recovers_teacher_means(self):
        # Distill a closed-form mixture score into a 2-step sampler and
        # compare component means against the teacher's 50-step sampler.
        sched = make_schedule(1000)
        means = np.array([[1.5, 0.0], [-1.5, 0.0]])
        teacher = AnalyticMixtureEps(means, std=0.3, schedule=sched)

        def sample_model(model, n, seed, sampler):
            g = torch.Generator().manual_seed(seed)
            noise = torch.randn(n, 2, generator=g, dtype=torch.float64)
            with torch.no_grad():
                return sampler(model, noise, g).numpy()

        teacher_pts = sample_model(
            teacher, 2048, 7,
            lambda m, z, g: ddim_sample(m, None, 50, sched, z, return_latent=True),
        )
        t_means = component_means(teacher_pts, means)

        torch.manual_seed(0)
        cfg = DistillConfig(steps=1000, warmstart_steps=400, batch_size=64, t_mid=200,
                            reg_pairs=256, reg_batch=32, lr_generator=1e-3, lr_fake=1e-3,
                            dmd_weight=0.05, lambda_reg=1.0, fake_updates_per_step=2, seed=0)
        state = DMDState(teacher, cfg, schedule=sched,
                         generator=ToyEpsNet().double(), fake_score=ToyEpsNet().double())
        pairs = build_regression_pairs(teacher, None, cfg.reg_pairs, seed=1,
                                       schedule=sched, latent_shape=(2,))
        result = distill_loop(state, None, (2,), cfg, pairs, log=None)
        assert not result.aborted

        two = TwoStepSchedule(sched, 200)
        student_pts = sample_model(
            state.generator, 2048, 8,
            lambda m, z, g: generator_sample(m, None, two, z, generator=g),
        )
        s_means = component_means(student_pts, means)
        err = np.linalg.norm(s_means - t_means, axis=1).max()
        assert err < 0.1, f"component means off by {err}"
        state.assert_real_frozen()

    def test_pure_regression_mode(self):
        sched = make_schedule(500)
        rng = np.random.default_rng(9)
        data = sample_mixture(rng, 512, np.array([[0.0, 1.0], [0.0, -1.0]]))
        teacher = train_toy_teacher(data, sched, steps=150, seed=3)
        cfg = DistillConfig(steps=20, batch_size=16, lambda_reg=1.0, dmd_weight=0.0,
                            reg_pairs=8, reg_batch=4, seed=1)
        state = DMDState(teacher, cfg, schedule=sched)
        pairs = build_regression_pairs(teacher, None, 8, seed=2, schedule=sched, latent_shape=(2,))
        result = distill_loop(state, None, (2,), cfg, pairs, log=None)
        assert not result.aborted
        regs = [m.loss_reg for m in result.metrics]
        assert np.mean(regs[-5:]) < np.mean(regs[:5])

    def test_divergence_aborts_and_restores(self):
        sched = make_schedule(100)

        class Exploder(ToyEpsNet):
            def forward(self, z_t, t, cond=None, anchor_masked=False):
                out = super().forward(z_t, t, cond, anchor_masked)
                return out * torch.nan if self.training and z_t.shape[0] > 2 else out

        teacher = Exploder(timesteps=100).double()
        cfg = DistillConfig(steps=10, batch_size=8, lambda_reg=0.0, t_mid=20, seed=0)
        state = DMDState(teacher, cfg, schedule=sched)
        before = parameter_hash(state.generator)
        result = distill_loop(state, None, (2,), cfg, pairs=None, log=None)
        assert result.aborted
        assert parameter_hash(state.generator) == before  # rolled back

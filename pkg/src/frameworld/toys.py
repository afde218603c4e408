"""Tiny 2-d diffusion test beds.

These models exercise the distillation machinery on distributions whose
scores are known or quickly learnable: a single Gaussian with a closed-form
noise predictor, and a two-component mixture fit by a small MLP.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, add_noise


class AnalyticGaussianEps(nn.Module):
    """Exact noise predictor for data ~ N(mu, I) under a VP schedule.

    For z_t = a x0 + s eps with x0 ~ N(mu, I), the posterior mean of the
    noise is E[eps | z_t] = s * (z_t - a * mu).
    """

    def __init__(self, mu: torch.Tensor, schedule: NoiseSchedule):
        super().__init__()
        self.register_buffer("mu", mu.double())
        self.schedule = schedule
        # A dummy parameter so optimizer/hash plumbing treats this like a model.
        self._token = nn.Parameter(torch.zeros(1, dtype=torch.float64), requires_grad=False)

    def forward(self, z_t, t, cond=None, anchor_masked=False):
        a, s = self.schedule.coeffs(t, dtype=z_t.dtype)
        view = (-1,) + (1,) * (z_t.dim() - 1)
        return s.view(view) * (z_t - a.view(view) * self.mu.to(z_t.dtype))


class AnalyticMixtureEps(nn.Module):
    """Exact noise predictor for an equal-weight isotropic Gaussian mixture.

    With component means ``mu_k`` and data std ``std``, the posterior over
    components given ``z_t`` is Gaussian-responsibility weighted, and the
    optimal noise prediction follows from the posterior mean of the clean
    point.
    """

    def __init__(self, means: np.ndarray, std: float, schedule: NoiseSchedule):
        super().__init__()
        self.register_buffer("mu", torch.tensor(means, dtype=torch.float64))
        self.var0 = float(std) ** 2
        self.schedule = schedule
        self._token = nn.Parameter(torch.zeros(1, dtype=torch.float64), requires_grad=False)

    def forward(self, z_t, t, cond=None, anchor_masked=False):
        a, s = self.schedule.coeffs(t, dtype=z_t.dtype)
        a, s = a[:, None], s[:, None]
        mu = self.mu.to(z_t.dtype)
        v = a * a * self.var0 + s * s  # (B, 1)
        d2 = ((z_t[:, None, :] - a[:, None] * mu[None]) ** 2).sum(-1)  # (B, K)
        w = torch.softmax(-d2 / (2 * v), dim=1)
        ex0_k = mu[None] + (a[:, None] * self.var0 / v[:, None]) * (
            z_t[:, None, :] - a[:, None] * mu[None]
        )
        ex0 = (w[..., None] * ex0_k).sum(1)
        return (z_t - a * ex0) / s


class ToyEpsNet(nn.Module):
    """Small MLP noise predictor for 2-d points."""

    def __init__(self, hidden: int = 96, t_dim: int = 16, timesteps: int = 1000):
        super().__init__()
        self.t_dim = t_dim
        self.timesteps = timesteps
        self.net = nn.Sequential(
            nn.Linear(2 + t_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, 2),
        )

    def _t_embed(self, t: torch.Tensor, dtype) -> torch.Tensor:
        half = self.t_dim // 2
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
        )
        args = t[:, None].double() * freqs[None]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(dtype)

    def forward(self, z_t, t, cond=None, anchor_masked=False):
        emb = self._t_embed(t, z_t.dtype)
        return self.net(torch.cat([z_t, emb], dim=1))


def sample_mixture(
    rng: np.random.Generator, n: int, means: np.ndarray, std: float = 0.15
) -> np.ndarray:
    """Draw points from an equal-weight isotropic Gaussian mixture."""
    comp = rng.integers(0, len(means), size=n)
    return means[comp] + rng.normal(scale=std, size=(n, 2))


def train_toy_teacher(
    data: np.ndarray,
    schedule: NoiseSchedule,
    steps: int = 8000,
    batch: int = 512,
    lr: float = 2e-3,
    seed: int = 0,
    w_hi: float = 0.3,
    hidden: int = 128,
) -> ToyEpsNet:
    """Fit the MLP noise predictor to a fixed 2-d dataset.

    ``w_hi`` oversamples the high-noise band exactly as the image trainer
    does, which matters for the few-step sampling downstream.  The learning
    rate decays cosine-style to zero; multi-step sampling compounds the
    pointwise noise-prediction error, so the fit must be tight.
    """
    torch.manual_seed(seed)
    model = ToyEpsNet(hidden=hidden, timesteps=schedule.T).double()
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    x = torch.tensor(data, dtype=torch.float64)
    t_lo = int(0.7 * schedule.T)
    for step in range(steps):
        for group in opt.param_groups:
            group["lr"] = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        idx = rng.integers(0, len(x), size=batch)
        z0 = x[idx]
        t_np = rng.integers(0, schedule.T, size=batch)
        hi = rng.uniform(size=batch) < w_hi
        t_np = np.where(hi, rng.integers(t_lo, schedule.T, size=batch), t_np)
        t = torch.from_numpy(t_np).long()
        g = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        z_t = add_noise(z0, eps, t, schedule)
        loss = ((model(z_t, t) - eps) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model


def component_means(points: np.ndarray, reference_means: np.ndarray) -> np.ndarray:
    """Mean of points assigned to their nearest reference component."""
    d = np.linalg.norm(points[:, None] - reference_means[None], axis=2)
    assign = d.argmin(axis=1)
    out = []
    for k in range(len(reference_means)):
        sel = points[assign == k]
        out.append(sel.mean(axis=0) if len(sel) else reference_means[k] * np.nan)
    return np.stack(out)

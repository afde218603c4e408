"""Frame diffusion transformer with pluggable camera-pose conditioning.

The network denoises a target view conditioned on a point-cloud anchor
render and a reference image.  The three inputs are patch-embedded by one
shared projection, concatenated along the width axis into a single token
grid, and processed by self-attention-only transformer blocks with adaptive
layer-norm timestep modulation.  Only the target third of the output is
un-patchified into the noise prediction.

Camera poses enter through one of three modes:

* ``plucker``    — per-token ray coordinates through a two-layer MLP, added
                   to the patch embeddings.
* ``parametric`` — flattened (R | t) through an MLP, broadcast per view.
* ``prope``      — projection matrices applied inside attention: P^T on
                   queries and P^{-1} on keys/values in 4-dim blocks (the
                   attended output is mapped back through P), combined with
                   2D rotary embeddings on the remaining head dims.  Logits
                   then depend on cameras only via the relative P_i P_j^{-1}.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .codec import image_to_tensor
from .errors import CheckpointError, ConfigError, ShapeMismatchError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    compute_plucker_map,
    make_projection_matrix,
)

POSE_MODES = ("plucker", "prope", "parametric")
VIEW_TARGET, VIEW_ANCHOR, VIEW_REFERENCE = 0, 1, 2
_IN_CHANNELS = 4  # rgb + validity channel, uniform across the three views
_OUT_CHANNELS = 3

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    hidden_dim: int = 128
    n_heads: int = 4
    n_layers: int = 6
    pose_mode: str = "prope"
    prope_fraction: float = 0.5  # fraction of each head given projective blocks
    timesteps: int = 1000

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch {self.patch_size}"
            )
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.pose_mode not in POSE_MODES:
            raise ConfigError(f"pose_mode must be one of {POSE_MODES}")
        if not 0 < self.prope_fraction <= 1:
            raise ConfigError("prope_fraction must be in (0, 1]")
        if self.pose_mode == "prope" and self.head_dim % 4 != 0:
            raise ConfigError("head_dim must be divisible by 4 for projective blocks")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def prope_dims(self) -> int:
        """Head dims receiving projective transforms (multiple of 4)."""
        raw = int(self.head_dim * self.prope_fraction)
        return max(4, (raw // 4) * 4)


# ---------------------------------------------------------------------------
# Positional embeddings
# ---------------------------------------------------------------------------


def sincos_position_embedding(
    rows: int, cols: int, dim: int, dtype=torch.float32, device=None
) -> torch.Tensor:
    """2D sinusoidal embedding on a (rows x cols) grid, shape (rows*cols, dim).

    Half the channels encode the row coordinate, half the column, each with
    the usual sin/cos frequency ladder.
    """
    if dim % 4 != 0:
        raise ConfigError("positional embedding dim must be divisible by 4")
    half = dim // 2

    def axis_embed(positions):
        freqs = torch.exp(
            -math.log(10_000.0) * torch.arange(0, half // 2, dtype=torch.float64) / (half // 2)
        )
        args = positions[:, None].double() * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=1)

    emb_r = axis_embed(torch.arange(rows, dtype=torch.float64))  # (rows, half)
    emb_c = axis_embed(torch.arange(cols, dtype=torch.float64))  # (cols, half)
    out = torch.cat(
        [
            emb_r[:, None, :].expand(rows, cols, half),
            emb_c[None, :, :].expand(rows, cols, half),
        ],
        dim=2,
    )
    return out.reshape(rows * cols, dim).to(dtype=dtype, device=device)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10_000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t[:, None].double() * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


# ---------------------------------------------------------------------------
# Token grid
# ---------------------------------------------------------------------------


@dataclass
class TokenGrid:
    """Tokens on a (rows x total-cols) grid with per-token view metadata.

    ``view_ids`` marks each token target/anchor/reference; ``rope_pos`` is
    the intra-image (row, col) used by rotary embeddings; ``proj`` carries
    the per-token 4x4 projection when the pose mode needs it.
    """

    tokens: torch.Tensor  # (B, N, D)
    rows: int
    cols_per_view: int
    n_views: int
    view_ids: torch.Tensor  # (N,) int
    rope_pos: torch.Tensor  # (N, 2) intra-image (row, col)
    proj: torch.Tensor | None = None  # (B, N, 4, 4)

    @property
    def total_cols(self) -> int:
        return self.cols_per_view * self.n_views


def assemble_sequence(
    z_tokens: torch.Tensor,
    anchor_tokens: torch.Tensor,
    ref_tokens: torch.Tensor,
    rows: int,
    cols: int,
    P_tgt: torch.Tensor | None = None,
    P_ref: torch.Tensor | None = None,
) -> TokenGrid:
    """Concatenate [target | anchor | reference] along the width axis.

    Each input is (B, rows*cols, D) in row-major grid order.  Positional
    identity comes from the caller having added embeddings computed on the
    concatenated grid; this function attaches view ids, intra-image rotary
    positions, and per-token projections (target and anchor share the target
    camera; the reference carries its own).
    """
    if not (z_tokens.shape == anchor_tokens.shape == ref_tokens.shape):
        raise ShapeMismatchError(
            f"token grids differ: {z_tokens.shape} {anchor_tokens.shape} {ref_tokens.shape}"
        )
    b, n, d = z_tokens.shape
    if n != rows * cols:
        raise ShapeMismatchError(f"expected {rows * cols} tokens per view, got {n}")
    device = z_tokens.device
    # Width concatenation in grid space: token (r, c) of view v lands at
    # column v*cols + c of the combined grid.
    per_view = [z_tokens, anchor_tokens, ref_tokens]
    grids = [t.reshape(b, rows, cols, d) for t in per_view]
    combined = torch.cat(grids, dim=2).reshape(b, rows * cols * 3, d)

    rr, cc = torch.meshgrid(
        torch.arange(rows, device=device), torch.arange(3 * cols, device=device), indexing="ij"
    )
    view_ids = (cc // cols).reshape(-1)
    rope_pos = torch.stack([rr.reshape(-1), (cc % cols).reshape(-1)], dim=1)

    proj = None
    if P_tgt is not None and P_ref is not None:
        per_token = [P_tgt, P_tgt, P_ref]  # target, anchor, reference
        proj = torch.stack(per_token, dim=1)  # (B, 3, 4, 4)
        proj = proj[:, view_ids]  # (B, N, 4, 4)
    return TokenGrid(
        tokens=combined,
        rows=rows,
        cols_per_view=cols,
        n_views=3,
        view_ids=view_ids,
        rope_pos=rope_pos,
        proj=proj,
    )


def split_target(grid: TokenGrid) -> torch.Tensor:
    """Inverse of assembly for the target portion: (B, rows*cols, D)."""
    b, n, d = grid.tokens.shape
    g = grid.tokens.reshape(b, grid.rows, grid.total_cols, d)
    return g[:, :, : grid.cols_per_view].reshape(b, grid.rows * grid.cols_per_view, d)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class PatchEmbed(nn.Module):
    """Shared linear projection of non-overlapping patches."""

    def __init__(self, patch_size: int, in_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.in_channels = in_channels
        self.proj = nn.Linear(in_channels * patch_size**2, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, (H/p)*(W/p), D) in row-major patch order."""
        b, c, h, w = x.shape
        p = self.patch_size
        if c != self.in_channels:
            raise ShapeMismatchError(f"expected {self.in_channels} channels, got {c}")
        if h % p or w % p:
            raise ShapeMismatchError(f"resolution {h}x{w} not divisible by patch {p}")
        x = x.reshape(b, c, h // p, p, w // p, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)
        return self.proj(x)


class Unpatchify(nn.Module):
    def __init__(self, patch_size: int, out_channels: int, dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.out_channels = out_channels
        self.proj = nn.Linear(dim, out_channels * patch_size**2)

    def forward(self, tokens: torch.Tensor, rows: int, cols: int) -> torch.Tensor:
        b, n, _ = tokens.shape
        p, c = self.patch_size, self.out_channels
        x = self.proj(tokens).reshape(b, rows, cols, c, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5).reshape(b, c, rows * p, cols * p)
        return x


class PluckerPoseEncoder(nn.Module):
    """Two-layer MLP lifting per-token 6-dim ray coordinates to the hidden dim."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(6, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, rays: torch.Tensor) -> torch.Tensor:
        """(B, N, 6) -> (B, N, D)."""
        return self.mlp(rays)


class ParametricPoseEncoder(nn.Module):
    """MLP from a flattened world-to-camera (R | t) 12-vector to one embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(12, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, rt: torch.Tensor) -> torch.Tensor:
        """(B, 12) -> (B, D); callers broadcast over the view's tokens."""
        return self.mlp(rt)


def rope_2d(x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """Apply 2D rotary embedding to the trailing dim of ``x``.

    x: (..., N, d) with d divisible by 4; pos: (N, 2) integer grid positions.
    The first half of dim pairs rotates by row position, the second by col.
    """
    d = x.shape[-1]
    quarter = d // 4  # frequency pairs per axis
    freqs = 10_000.0 ** (
        -torch.arange(quarter, dtype=x.dtype, device=x.device) / max(quarter, 1)
    )
    out = []
    for axis in range(2):
        angles = pos[:, axis].to(x.dtype)[:, None] * freqs[None]  # (N, quarter)
        cos, sin = torch.cos(angles), torch.sin(angles)
        seg = x[..., axis * 2 * quarter : (axis + 1) * 2 * quarter]
        even, odd = seg[..., 0::2], seg[..., 1::2]
        rot_even = even * cos - odd * sin
        rot_odd = even * sin + odd * cos
        merged = torch.stack([rot_even, rot_odd], dim=-1).flatten(-2)
        out.append(merged)
    return torch.cat(out, dim=-1)


def prope_transform_qkv(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, proj: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Apply P^T to queries and P^{-1} to keys and values in 4-dim blocks.

    q, k, v: (B, heads, N, d) with d divisible by 4; proj: (B, N, 4, 4).
    Attention logits then carry q^T (P_i P_j^{-1}) k cross-view terms; pair
    with :func:`prope_untransform_out` so the value pathway is also a pure
    function of relative projections.
    """
    if q.shape[-1] % 4 != 0:
        raise ConfigError("projective transform needs head dims divisible by 4")
    p_inv = torch.linalg.inv(proj)

    def blocks(x):
        b, h, n, d = x.shape
        return x.reshape(b, h, n, d // 4, 4)

    q_b, k_b, v_b = blocks(q), blocks(k), blocks(v)
    # q' = P^T q ; k' = P^{-1} k ; v' = P^{-1} v, per token.
    q_t = torch.einsum("bnji,bhnkj->bhnki", proj, q_b)
    k_t = torch.einsum("bnij,bhnkj->bhnki", p_inv, k_b)
    v_t = torch.einsum("bnij,bhnkj->bhnki", p_inv, v_b)
    flat = lambda x: x.reshape(*x.shape[:3], -1)
    return flat(q_t), flat(k_t), flat(v_t)


def prope_untransform_out(out: torch.Tensor, proj: torch.Tensor) -> torch.Tensor:
    """Map attended values back through the query token's projection P."""
    b, h, n, d = out.shape
    o = out.reshape(b, h, n, d // 4, 4)
    o = torch.einsum("bnij,bhnkj->bhnki", proj, o)
    return o.reshape(b, h, n, d)


class SelfAttention(nn.Module):
    """Multi-head self-attention, optionally camera-modulated."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.hidden_dim, 3 * cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)

    def forward(self, x: torch.Tensor, grid: TokenGrid) -> torch.Tensor:
        b, n, d = x.shape
        h = self.cfg.n_heads
        dh = self.cfg.head_dim
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = lambda t: t.reshape(b, n, h, dh).transpose(1, 2)  # (B, h, N, dh)
        q, k, v = shape(q), shape(k), shape(v)

        if self.cfg.pose_mode == "prope":
            if grid.proj is None:
                raise ConfigError("prope mode requires per-token projections")
            npp = self.cfg.prope_dims()
            q_pp, k_pp, v_pp = prope_transform_qkv(
                q[..., :npp], k[..., :npp], v[..., :npp], grid.proj
            )
            if npp < dh:
                q_r = rope_2d(q[..., npp:], grid.rope_pos)
                k_r = rope_2d(k[..., npp:], grid.rope_pos)
                q = torch.cat([q_pp, q_r], dim=-1)
                k = torch.cat([k_pp, k_r], dim=-1)
                v = torch.cat([v_pp, v[..., npp:]], dim=-1)
            else:
                q, k, v = q_pp, k_pp, v_pp

        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = attn @ v

        if self.cfg.pose_mode == "prope":
            npp = self.cfg.prope_dims()
            out = torch.cat(
                [prope_untransform_out(out[..., :npp], grid.proj), out[..., npp:]], dim=-1
            )
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.out(out)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale[:, None]) + shift[:, None]


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaptive layer-norm modulation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(d, elementwise_affine=False)
        self.attn = SelfAttention(cfg)
        self.norm2 = nn.LayerNorm(d, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 6 * d))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor, grid: TokenGrid) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(t_emb).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1), grid)
        x = x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))
        return x


# ---------------------------------------------------------------------------
# Conditions
# ---------------------------------------------------------------------------


@dataclass
class FrameConditions:
    """Batched conditioning tensors for one denoising call.

    Images are in [-1, 1] (anchor zeroed in holes); the validity mask is a
    {0,1} channel.  Pose payloads cover all three encoding modes so a single
    batch serves any model.
    """

    anchor_rgb: torch.Tensor  # (B, 3, H, W)
    anchor_mask: torch.Tensor  # (B, 1, H, W)
    ref_rgb: torch.Tensor  # (B, 3, H, W)
    plucker_tgt: torch.Tensor  # (B, N_view, 6)
    plucker_ref: torch.Tensor  # (B, N_view, 6)
    posevec_tgt: torch.Tensor  # (B, 12)
    posevec_ref: torch.Tensor  # (B, 12)
    P_tgt: torch.Tensor  # (B, 4, 4)
    P_ref: torch.Tensor  # (B, 4, 4)

    def to(self, device=None, dtype=None) -> "FrameConditions":
        kw = {"device": device, "dtype": dtype}
        return FrameConditions(**{k: v.to(**kw) for k, v in self.__dict__.items()})

    def __getitem__(self, idx) -> "FrameConditions":
        return FrameConditions(**{k: v[idx] for k, v in self.__dict__.items()})

    @property
    def batch_size(self) -> int:
        return self.anchor_rgb.shape[0]


def build_conditions(
    K: CameraIntrinsics,
    pose_tgt: CameraPose,
    pose_ref: CameraPose,
    anchor_rgb: np.ndarray,
    anchor_mask: np.ndarray,
    ref_rgb: np.ndarray,
    cfg: ModelConfig,
    dtype=torch.float32,
) -> FrameConditions:
    """Assemble single-sample conditions from numpy inputs (batch of 1)."""
    g = cfg.grid
    pl_tgt = compute_plucker_map(K, pose_tgt, g, g).as_array().reshape(-1, 6)
    pl_ref = compute_plucker_map(K, pose_ref, g, g).as_array().reshape(-1, 6)
    p_tgt = make_projection_matrix(K, pose_tgt, ndc=True).P
    p_ref = make_projection_matrix(K, pose_ref, ndc=True).P
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
    anchor = image_to_tensor(anchor_rgb, dtype) * 2.0 - 1.0
    mask = t(anchor_mask.astype(np.float32))[None]
    anchor = anchor * mask  # holes carry exactly zero
    return FrameConditions(
        anchor_rgb=anchor[None],
        anchor_mask=mask[None],
        ref_rgb=(image_to_tensor(ref_rgb, dtype) * 2.0 - 1.0)[None],
        plucker_tgt=t(pl_tgt)[None],
        plucker_ref=t(pl_ref)[None],
        posevec_tgt=t(pose_tgt.flat_rt())[None],
        posevec_ref=t(pose_ref.flat_rt())[None],
        P_tgt=t(p_tgt)[None],
        P_ref=t(p_ref)[None],
    )


def stack_conditions(conds: list[FrameConditions]) -> FrameConditions:
    return FrameConditions(
        **{
            k: torch.cat([getattr(c, k) for c in conds], dim=0)
            for k in FrameConditions.__dataclass_fields__
        }
    )


def conditions_from_samples(samples, cfg: ModelConfig, dtype=torch.float32):
    """TrainingSamples -> (target tensor in [0,1], FrameConditions)."""
    conds = []
    targets = []
    for s in samples:
        conds.append(
            build_conditions(
                s.K,
                s.tgt_pose,
                s.ref_pose,
                s.anchor_rgb,
                s.anchor_mask,
                s.x_ref,
                cfg,
                dtype=dtype,
            )
        )
        targets.append(image_to_tensor(s.x_tgt, dtype))
    return torch.stack(targets), stack_conditions(conds)


# ---------------------------------------------------------------------------
# The frame model
# ---------------------------------------------------------------------------


class FrameDiT(nn.Module):
    """Width-concatenated conditional diffusion transformer.

    ``forward(z_t, t, cond, anchor_masked)`` returns the predicted noise for
    the target view.  With ``cond=None`` the model runs on the target tokens
    alone (the unconditional image-prior mode used for pretraining).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden_dim
        self.patch = PatchEmbed(cfg.patch_size, _IN_CHANNELS, d)
        self.unpatch = Unpatchify(cfg.patch_size, _OUT_CHANNELS, d)
        self.null_anchor = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.null_anchor, std=0.02)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        if cfg.pose_mode == "plucker":
            self.pose_enc = PluckerPoseEncoder(d)
        elif cfg.pose_mode == "parametric":
            self.pose_enc = ParametricPoseEncoder(d)
        else:
            self.pose_enc = None
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)

    # -- embedding helpers ---------------------------------------------------

    def _pos_table(self, rows: int, total_cols: int, like: torch.Tensor) -> torch.Tensor:
        return sincos_position_embedding(
            rows, total_cols, self.cfg.hidden_dim, dtype=like.dtype, device=like.device
        ).reshape(rows, total_cols, self.cfg.hidden_dim)

    def _with_validity(self, rgb: torch.Tensor, validity: torch.Tensor | None = None) -> torch.Tensor:
        if validity is None:
            validity = torch.ones_like(rgb[:, :1])
        return torch.cat([rgb, validity], dim=1)

    # -- forward ---------------------------------------------------------------

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        cond: FrameConditions | None = None,
        anchor_masked: bool | torch.Tensor = False,
    ) -> torch.Tensor:
        b = z_t.shape[0]
        g = self.cfg.grid
        if z_t.shape[-1] != self.cfg.image_size or z_t.shape[-2] != self.cfg.image_size:
            raise ShapeMismatchError(
                f"latent {tuple(z_t.shape[-2:])} != configured {self.cfg.image_size}"
            )
        if torch.any(t < 0) or torch.any(t >= self.cfg.timesteps):
            raise ValueError(f"timesteps must lie in [0, {self.cfg.timesteps})")
        t_emb = self.t_mlp(timestep_embedding(t, self.cfg.hidden_dim).to(z_t.dtype))

        z_tokens = self.patch(self._with_validity(z_t))

        if cond is None:
            grid = self._single_view_grid(z_tokens, g)
        else:
            grid = self._conditioned_grid(z_tokens, cond, anchor_masked, b, g)

        x = grid.tokens
        for block in self.blocks:
            x = block(x, t_emb, grid)
        grid = TokenGrid(
            tokens=x,
            rows=grid.rows,
            cols_per_view=grid.cols_per_view,
            n_views=grid.n_views,
            view_ids=grid.view_ids,
            rope_pos=grid.rope_pos,
            proj=grid.proj,
        )
        tgt = split_target(grid)
        sh, sc = self.final_ada(t_emb).chunk(2, dim=-1)
        tgt = modulate(self.final_norm(tgt), sh, sc)
        return self.unpatch(tgt, g, g)

    def _single_view_grid(self, z_tokens: torch.Tensor, g: int) -> TokenGrid:
        b, n, d = z_tokens.shape
        pos = self._pos_table(g, g, z_tokens).reshape(n, d)
        tokens = z_tokens + pos
        device = z_tokens.device
        rr, cc = torch.meshgrid(
            torch.arange(g, device=device), torch.arange(g, device=device), indexing="ij"
        )
        proj = None
        if self.cfg.pose_mode == "prope":
            eye = torch.eye(4, dtype=z_tokens.dtype, device=device)
            proj = eye.expand(b, n, 4, 4)
        return TokenGrid(
            tokens=tokens,
            rows=g,
            cols_per_view=g,
            n_views=1,
            view_ids=torch.zeros(n, dtype=torch.long, device=device),
            rope_pos=torch.stack([rr.reshape(-1), cc.reshape(-1)], dim=1),
            proj=proj,
        )

    def _conditioned_grid(
        self,
        z_tokens: torch.Tensor,
        cond: FrameConditions,
        anchor_masked: bool | torch.Tensor,
        b: int,
        g: int,
    ) -> TokenGrid:
        anchor_img = self._with_validity(cond.anchor_rgb, cond.anchor_mask)
        anchor_tokens = self.patch(anchor_img)
        ref_tokens = self.patch(self._with_validity(cond.ref_rgb))

        if not isinstance(anchor_masked, torch.Tensor):
            anchor_masked = torch.full(
                (b,), bool(anchor_masked), dtype=torch.bool, device=z_tokens.device
            )
        null = self.null_anchor.to(z_tokens.dtype).expand_as(anchor_tokens)
        anchor_tokens = torch.where(anchor_masked[:, None, None], null, anchor_tokens)

        if self.cfg.pose_mode == "plucker":
            z_tokens = z_tokens + self.pose_enc(cond.plucker_tgt.to(z_tokens.dtype))
            anchor_tokens = anchor_tokens + self.pose_enc(cond.plucker_tgt.to(z_tokens.dtype))
            ref_tokens = ref_tokens + self.pose_enc(cond.plucker_ref.to(z_tokens.dtype))
        elif self.cfg.pose_mode == "parametric":
            e_tgt = self.pose_enc(cond.posevec_tgt.to(z_tokens.dtype))[:, None]
            e_ref = self.pose_enc(cond.posevec_ref.to(z_tokens.dtype))[:, None]
            z_tokens = z_tokens + e_tgt
            anchor_tokens = anchor_tokens + e_tgt
            ref_tokens = ref_tokens + e_ref

        pos = self._pos_table(g, 3 * g, z_tokens)
        n = g * g
        add = lambda toks, view: toks + pos[:, view * g : (view + 1) * g].reshape(n, -1)
        z_tokens = add(z_tokens, 0)
        anchor_tokens = add(anchor_tokens, 1)
        ref_tokens = add(ref_tokens, 2)

        P_tgt = P_ref = None
        if self.cfg.pose_mode == "prope":
            P_tgt = cond.P_tgt.to(z_tokens.dtype)
            P_ref = cond.P_ref.to(z_tokens.dtype)
        return assemble_sequence(z_tokens, anchor_tokens, ref_tokens, g, g, P_tgt, P_ref)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: FrameDiT, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[FrameDiT, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:  # noqa: BLE001 - normalize loader failures
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload['format_version']}")
    cfg = ModelConfig(**payload["config"])
    model = FrameDiT(cfg)
    expected = model.state_dict()
    params = payload["params"]
    if set(expected) != set(params):
        missing = set(expected) ^ set(params)
        raise CheckpointError(f"parameter names mismatch: {sorted(missing)[:5]}")
    for k, v in params.items():
        if expected[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)}")
    model.load_state_dict(params)
    return model, payload.get("extra", {})


def parameter_hash(model: nn.Module) -> str:
    """Stable digest of all parameters (order-sensitive)."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().to(torch.float64).numpy().tobytes())
    return h.hexdigest()

"""Pluggable latent codec between images and the diffusion working space.

The default codec is an affine identity: pixels in [0, 1] map to latents in
[-1, 1] at full resolution, i.e. pixel-space diffusion.  A learned
autoencoder can be substituted behind the same interface.
"""

from __future__ import annotations

import numpy as np
import torch


class LatentCodec:
    """Interface: encode images to latents and decode back."""

    latent_channels: int = 3

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityCodec(LatentCodec):
    """Affine pixel-space codec: x in [0,1] <-> z = 2x - 1."""

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images * 2.0 - 1.0

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return ((latents + 1.0) / 2.0).clamp(0.0, 1.0)


def image_to_tensor(rgb: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 or float [0,1] -> (3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(rgb)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [0,1] -> (H, W, 3) uint8."""
    arr = t.detach().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    return np.round(arr * 255).astype(np.uint8)

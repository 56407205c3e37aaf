"""
Latent space of the toy model: a lossless space-to-depth rearrangement, plus
the lightweight pose encoder that maps normal maps onto the latent grid.
"""
from typing import Union

import numpy as np
import torch
from einops import rearrange
from torch import nn

from ..exceptions import ShapeError

ArrayLike = Union[np.ndarray, torch.Tensor]


def as_tensor(image: ArrayLike) -> torch.Tensor:
    if torch.is_tensor(image):
        return image.to(torch.float64)
    return torch.as_tensor(np.asarray(image, dtype=np.float64))


def _check_divisible(image: torch.Tensor, patch: int):
    if image.dim() < 3:
        raise ShapeError(f"expected [..., H, W, C] image, got {image.shape}")
    height, width = image.shape[-3], image.shape[-2]
    if height % patch or width % patch:
        raise ShapeError(
            f"image {height}x{width} is not divisible by patch {patch}"
        )


class ToyAutoencoder:
    """
    ``encode`` maps an ``[..., H, W, C]`` image to a ``[..., C*p*p, H/p, W/p]``
    latent. ``decode`` inverts it exactly.
    """

    def __init__(self, patch: int = 4, channels: int = 3):
        if patch < 1:
            raise ShapeError(f"patch must be positive, got {patch}")
        self.patch = patch
        self.channels = channels

    @property
    def latent_channels(self) -> int:
        return self.channels * self.patch**2

    def latent_size(self, height: int, width: int):
        return height // self.patch, width // self.patch

    def encode(self, image: ArrayLike) -> torch.Tensor:
        image = as_tensor(image)
        _check_divisible(image, self.patch)
        return rearrange(
            image,
            "... (h p1) (w p2) c -> ... (c p1 p2) h w",
            p1=self.patch,
            p2=self.patch,
        )

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[-3] % (self.patch**2):
            raise ShapeError(
                f"latent with {latent.shape[-3]} channels cannot be decoded "
                f"with patch {self.patch}"
            )
        return rearrange(
            latent,
            "... (c p1 p2) h w -> ... (h p1) (w p2) c",
            p1=self.patch,
            p2=self.patch,
        )


class PoseEncoder(nn.Module):
    """Patchify the normal map, then one affine map per latent channel."""

    def __init__(self, patch: int, out_channels: int, in_channels: int = 3):
        super().__init__()
        self.patch = patch
        self.autoencoder = ToyAutoencoder(patch, in_channels)
        fan_in = in_channels * patch**2
        self.weight = nn.Parameter(
            torch.randn(out_channels, fan_in, dtype=torch.float64)
            / np.sqrt(fan_in)
        )
        self.bias = nn.Parameter(
            torch.zeros(out_channels, dtype=torch.float64)
        )

    def forward(self, normal_map: ArrayLike) -> torch.Tensor:
        patches = self.autoencoder.encode(normal_map)
        return (
            torch.einsum("oc,...chw->...ohw", self.weight, patches)
            + self.bias[:, None, None]
        )


def encode(image: ArrayLike, autoencoder: ToyAutoencoder) -> torch.Tensor:
    return autoencoder.encode(image)


def decode(latent: torch.Tensor, autoencoder: ToyAutoencoder) -> torch.Tensor:
    return autoencoder.decode(latent)


def encode_pose(normal_map: ArrayLike, params: PoseEncoder) -> torch.Tensor:
    return params(normal_map)

"""
Projection of Gaussians to the image plane and front-to-back alpha
compositing, written with torch so that autograd provides the gradients.
"""
import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch

from ..camera import Camera
from ..exceptions import ShapeError
from .gaussians import (
    DTYPE,
    Gaussian,
    GaussianCloud,
    covariance_from_scale_rot,
)

logger = logging.getLogger(__name__)


@dataclass
class SplatConfig:
    # screen space variance added to every projected covariance, in px^2
    blur: float = 0.3
    near: float = 0.01
    # Mahalanobis radius of the evaluated support; None evaluates everywhere
    support_sigma: Optional[float] = 3.0


@dataclass
class ProjectedGaussian:
    mu2d: torch.Tensor
    sigma2d: torch.Tensor
    depth: float
    opacity: float
    color: torch.Tensor


@dataclass
class ProjectedCloud:
    mu2d: torch.Tensor
    sigma2d: torch.Tensor
    depth: torch.Tensor
    visible: torch.Tensor


@dataclass
class RenderOutput:
    """
    ``image`` is ``[H, W, 3]`` and ``alpha`` ``[H, W]``. ``transmittance``
    holds ``T_i`` per composited Gaussian in ``order`` (front to back).
    """

    image: torch.Tensor
    alpha: torch.Tensor
    transmittance: torch.Tensor
    order: torch.Tensor


@dataclass
class CloudGradients:
    mu: torch.Tensor
    scale: torch.Tensor
    quat: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor

    def as_dict(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def camera_tensors(camera: Camera):
    R = torch.as_tensor(camera.R, dtype=DTYPE)
    t = torch.as_tensor(camera.t, dtype=DTYPE)
    return R, t


def project_cloud(
    cloud: GaussianCloud, camera: Camera, config: Optional[SplatConfig] = None
) -> ProjectedCloud:
    """
    Perspective projection of the means and the affine approximation
    ``J W Sigma W^T J^T`` of the covariances.
    """
    config = config or SplatConfig()
    k = camera.intrinsics
    R, t = camera_tensors(camera)
    p = cloud.mu @ R.T + t
    x, y, z = p.unbind(-1)
    visible = z > config.near
    z = torch.where(visible, z, torch.ones_like(z))

    mu2d = torch.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([k.fx / z, zero, -k.fx * x / z**2], dim=-1),
            torch.stack([zero, k.fy / z, -k.fy * y / z**2], dim=-1),
        ],
        dim=-2,
    )
    M = J @ R
    sigma3d = covariance_from_scale_rot(cloud.scale, cloud.quat)
    sigma2d = M @ sigma3d @ M.transpose(-1, -2)
    sigma2d = sigma2d + config.blur * torch.eye(2, dtype=DTYPE)
    return ProjectedCloud(mu2d, sigma2d, p[:, 2], visible)


def project_gaussian(
    gaussian: Gaussian, camera: Camera, config: Optional[SplatConfig] = None
) -> Optional[ProjectedGaussian]:
    """Project one Gaussian; ``None`` when it lies behind the near plane."""
    projected = project_cloud(
        GaussianCloud.from_gaussians([gaussian]), camera, config
    )
    if not bool(projected.visible[0]):
        return None
    return ProjectedGaussian(
        projected.mu2d[0],
        projected.sigma2d[0],
        float(projected.depth[0]),
        gaussian.opacity,
        torch.as_tensor(gaussian.color, dtype=DTYPE),
    )


def depth_order(projected: ProjectedCloud) -> torch.Tensor:
    """Indices of the visible Gaussians front to back, ties by index."""
    indices = torch.nonzero(projected.visible).reshape(-1)
    depth = projected.depth.detach()[indices]
    return indices[torch.sort(depth, stable=True).indices]


def pixel_centers(width: int, height: int) -> torch.Tensor:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=DTYPE),
        torch.arange(width, dtype=DTYPE),
        indexing="ij",
    )
    return torch.stack([u, v], dim=-1).reshape(-1, 2)


def render(
    cloud: GaussianCloud, camera: Camera, config: Optional[SplatConfig] = None
) -> RenderOutput:
    config = config or SplatConfig()
    k = camera.intrinsics
    pixels = k.height * k.width
    projected = project_cloud(cloud, camera, config)
    order = depth_order(projected)
    if len(order) == 0:
        return RenderOutput(
            torch.zeros(k.height, k.width, 3, dtype=DTYPE),
            torch.zeros(k.height, k.width, dtype=DTYPE),
            torch.zeros(0, k.height, k.width, dtype=DTYPE),
            order,
        )

    mu2d = projected.mu2d[order]
    precision = torch.linalg.inv(projected.sigma2d[order])
    offset = pixel_centers(k.width, k.height)[None] - mu2d[:, None]
    mahalanobis = torch.einsum("npi,nij,npj->np", offset, precision, offset)
    falloff = torch.exp(-0.5 * mahalanobis)
    if config.support_sigma is not None:
        falloff = torch.where(
            mahalanobis <= config.support_sigma**2,
            falloff,
            torch.zeros_like(falloff),
        )

    alpha = cloud.opacity[order][:, None] * falloff
    survive = 1 - alpha
    transmittance = torch.cumprod(
        torch.cat([torch.ones(1, pixels, dtype=DTYPE), survive[:-1]]), dim=0
    )
    weights = alpha * transmittance
    image = torch.einsum("np,nc->pc", weights, cloud.color[order])
    coverage = 1 - transmittance[-1] * survive[-1]
    return RenderOutput(
        image.reshape(k.height, k.width, 3),
        coverage.reshape(k.height, k.width),
        transmittance.reshape(-1, k.height, k.width),
        order,
    )


def render_grad(
    cloud: GaussianCloud,
    camera: Camera,
    upstream: torch.Tensor,
    config: Optional[SplatConfig] = None,
) -> CloudGradients:
    """Gradients of ``<upstream, render(cloud, camera).image>``."""
    leaves = [t.detach().clone().requires_grad_(True) for t in cloud.tensors()]
    with torch.enable_grad():
        image = render(GaussianCloud(*leaves), camera, config).image
        upstream = torch.as_tensor(upstream, dtype=DTYPE)
        if upstream.shape != image.shape:
            raise ShapeError(
                f"upstream gradient {tuple(upstream.shape)} does not match "
                f"image {tuple(image.shape)}"
            )
        if not image.requires_grad:
            return CloudGradients(*map(torch.zeros_like, leaves))
        grads = torch.autograd.grad(
            image, leaves, grad_outputs=upstream, allow_unused=True
        )
    return CloudGradients(
        *(
            torch.zeros_like(leaf) if g is None else g
            for leaf, g in zip(leaves, grads)
        )
    )

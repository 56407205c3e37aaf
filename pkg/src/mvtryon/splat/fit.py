"""
Photometric L2 fitting of a fixed-size Gaussian cloud to posed images.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..camera import Camera
from ..exceptions import InvalidParameterError, ShapeError
from .gaussians import DTYPE, GaussianCloud
from .rasterize import SplatConfig, project_cloud, render

logger = logging.getLogger(__name__)

View = Tuple[np.ndarray, Camera]


@dataclass
class FitConfig:
    iters: int = 300
    lr: float = 0.01
    seed: int = 0
    # views per iteration; None uses every view each iteration
    views_per_step: Optional[int] = None
    min_scale: float = 1e-4
    log_interval: int = 100
    splat: SplatConfig = field(default_factory=SplatConfig)


@dataclass
class FitResult:
    cloud: GaussianCloud
    view_losses: List[float]
    losses: List[float]


def view_loss(
    cloud: GaussianCloud,
    image: torch.Tensor,
    camera: Camera,
    config: Optional[SplatConfig] = None,
) -> torch.Tensor:
    rendered = render(cloud, camera, config).image
    if rendered.shape != image.shape:
        raise ShapeError(
            f"target {tuple(image.shape)} does not match the camera image "
            f"{tuple(rendered.shape)}"
        )
    return torch.mean((rendered - image) ** 2)


def view_losses(
    cloud: GaussianCloud,
    targets: Sequence[View],
    config: Optional[SplatConfig] = None,
) -> List[float]:
    losses = []
    with torch.no_grad():
        for image, camera in targets:
            image = torch.as_tensor(image, dtype=DTYPE)
            losses.append(float(view_loss(cloud, image, camera, config)))
    return losses


def _project_invariants(cloud: GaussianCloud, min_scale: float):
    norm = cloud.quat.norm(dim=-1, keepdim=True)
    degenerate = norm[:, 0] == 0
    if degenerate.any():
        logger.warning("reset %d zero-norm quaternions", int(degenerate.sum()))
        cloud.quat[degenerate] = torch.tensor([1.0, 0, 0, 0], dtype=DTYPE)
        norm = cloud.quat.norm(dim=-1, keepdim=True)
    cloud.quat /= norm
    cloud.scale.clamp_(min=min_scale)
    cloud.opacity.clamp_(0.0, 1.0)
    cloud.color.clamp_(0.0, 1.0)


def fit_cloud(
    targets: Sequence[View],
    init: GaussianCloud,
    iters: int,
    lr: float,
    seed: int,
    config: Optional[FitConfig] = None,
    progress: bool = False,
) -> FitResult:
    """
    Adam on the mean per-pixel squared error over the target views.
    Quaternions are renormalized and scales, opacities and colors clamped
    back into range after every step.
    """
    config = config or FitConfig()
    if len(targets) == 0:
        raise InvalidParameterError("no target views to fit")
    if len(targets) < 2:
        raise InvalidParameterError("fitting needs at least two views")
    images = [torch.as_tensor(image, dtype=DTYPE) for image, _ in targets]
    cameras = [camera for _, camera in targets]
    culled = max(
        int((~project_cloud(init, camera, config.splat).visible).sum())
        for camera in cameras
    )
    if culled:
        logger.warning("up to %d Gaussians are culled in a view", culled)

    cloud = init.detach()
    losses: List[float] = []
    if iters > 0 and lr != 0 and cloud.count > 0:
        leaves = [t.requires_grad_(True) for t in cloud.tensors()]
        optimizer = torch.optim.Adam(leaves, lr=lr)
        batch = config.views_per_step or len(targets)
        for step in tqdm(range(iters), desc="fit", disable=not progress):
            if batch < len(targets):
                rng = np.random.default_rng([seed, step])
                chosen = sorted(rng.choice(len(targets), batch, replace=False))
            else:
                chosen = range(len(targets))
            loss = torch.stack(
                [
                    view_loss(cloud, images[i], cameras[i], config.splat)
                    for i in chosen
                ]
            ).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            with torch.no_grad():
                _project_invariants(cloud, config.min_scale)
            losses.append(loss.detach().item())
            if config.log_interval and (step + 1) % config.log_interval == 0:
                logger.debug("fit step %d: loss %.3e", step + 1, losses[-1])
        cloud = cloud.detach()

    return FitResult(cloud, view_losses(cloud, targets, config.splat), losses)

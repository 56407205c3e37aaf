"""
Variance preserving noise schedule, forward noising and the deterministic
DDIM sampler.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ..exceptions import InvalidParameterError, ShapeError

logger = logging.getLogger(__name__)

VP_TOLERANCE = 1e-9


@dataclass
class ScheduleConfig:
    steps: int = 100
    # fraction of pi/2 reached at the last step; keeps alpha_T above zero
    max_angle: float = 0.995


class NoiseSchedule:
    def __init__(self, alpha: Sequence[float], sigma: Sequence[float]):
        alpha = np.asarray(alpha, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if alpha.ndim != 1 or alpha.shape != sigma.shape or len(alpha) < 1:
            raise InvalidParameterError(
                f"alpha/sigma must be equal length vectors, got "
                f"{alpha.shape} and {sigma.shape}"
            )
        if np.any(np.diff(alpha) >= 0) or np.any(np.diff(sigma) <= 0):
            raise InvalidParameterError(
                "alpha must strictly decrease and sigma strictly increase"
            )
        residual = np.abs(alpha**2 + sigma**2 - 1).max()
        if residual > VP_TOLERANCE:
            raise InvalidParameterError(
                f"schedule is not variance preserving (residual {residual})"
            )
        self.alpha = alpha
        self.sigma = sigma

    @classmethod
    def cosine(cls, T: int, max_angle: float = 0.995) -> "NoiseSchedule":
        if T < 1:
            raise InvalidParameterError(f"step count must be >= 1, got {T}")
        if not 0 < max_angle < 1:
            raise InvalidParameterError("max_angle must lie in (0, 1)")
        angles = (math.pi / 2) * max_angle * np.arange(1, T + 1) / T
        return cls(np.cos(angles), np.sin(angles))

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        return cls.cosine(config.steps, config.max_angle)

    @property
    def T(self) -> int:
        return len(self.alpha)

    def check_step(self, t: int):
        if not 0 <= int(t) < self.T:
            raise InvalidParameterError(
                f"timestep {t} outside [0, {self.T})"
            )

    def coefficients(self, t: int):
        self.check_step(t)
        return float(self.alpha[t]), float(self.sigma[t])

    def sampling_steps(self, steps: int) -> List[int]:
        """``steps`` strictly decreasing timesteps from T-1 down to 0."""
        if steps < 1:
            raise InvalidParameterError(f"steps must be >= 1, got {steps}")
        if steps > self.T:
            raise InvalidParameterError(
                f"cannot sample with {steps} steps on a {self.T} step schedule"
            )
        if steps == 1:
            return [self.T - 1]
        grid = np.round(np.linspace(self.T - 1, 0, steps)).astype(int)
        return [int(t) for t in grid]


def forward_noising(
    z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ShapeError(
            f"latent {tuple(z0.shape)} and noise {tuple(eps.shape)} differ"
        )
    alpha, sigma = schedule.coefficients(t)
    return alpha * z0 + sigma * eps


def view_generator(seed: int, view_id: int) -> torch.Generator:
    state = np.random.SeedSequence([int(seed), int(view_id)]).generate_state(1)
    return torch.Generator().manual_seed(int(state[0]))


def initial_noise(
    shape: Sequence[int],
    seed: int,
    view_ids: Sequence[int],
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """One Gaussian latent per view, each drawn from its own view seed."""
    return torch.stack(
        [
            torch.randn(
                tuple(shape), generator=view_generator(seed, i), dtype=dtype
            )
            for i in view_ids
        ]
    )


def ddim_sample(
    model,
    cond,
    steps: int,
    seed: int,
    schedule: Optional[NoiseSchedule] = None,
    latent_shape: Optional[Sequence[int]] = None,
    progress: bool = False,
) -> List[torch.Tensor]:
    """
    Deterministic DDIM sampling of all views of ``cond`` jointly.

    ``model(z_t, t, cond)`` predicts the noise of the ``[m, c, h, w]`` latent
    batch. The last update jumps straight to the predicted clean latent.
    """
    schedule = schedule or model.schedule
    timesteps = schedule.sampling_steps(steps)
    latent_shape = latent_shape or model.latent_shape
    view_ids = list(cond.view_ids)

    z = initial_noise(latent_shape, seed, view_ids)
    with torch.no_grad():
        # garment features are constant across steps, compute them once
        encoded = (
            model.encode_conditions(cond)
            if hasattr(model, "encode_conditions")
            else cond
        )
        for i, t in enumerate(tqdm(timesteps, disable=not progress)):
            alpha, sigma = schedule.coefficients(t)
            eps = model(z, t, encoded)
            z0_hat = (z - sigma * eps) / alpha
            if i + 1 < len(timesteps):
                alpha_next, sigma_next = schedule.coefficients(
                    timesteps[i + 1]
                )
                z = alpha_next * z0_hat + sigma_next * eps
            else:
                z = z0_hat
    logger.debug("sampled %d views in %d steps", len(view_ids), steps)
    return list(z.unbind(0))

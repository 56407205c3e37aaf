"""
Two stage training of the toy denoiser on synthetic garment swaps.

Stage 1 trains on single views (multi-view attention degenerates to self
attention), stage 2 on ``train_views`` views per item. Each example is
conditioned on the original subject's agnostic images and normal maps plus
the target garment pair, and supervised with the views rendered wearing the
target garment.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ..exceptions import InvalidParameterError
from .denoiser import (
    ConditioningBundle,
    ToyDenoiser,
    ldm_loss,
    make_conditioning,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage1_steps: int = 100
    stage2_steps: int = 100
    lr: float = 1e-3
    train_views: int = 8
    seed: int = 0
    log_interval: int = 10

    @property
    def total_steps(self) -> int:
        return self.stage1_steps + self.stage2_steps


@dataclass
class TrainingExample:
    cond: ConditioningBundle
    z0: torch.Tensor
    t: int
    eps: torch.Tensor


@dataclass
class TrainingResult:
    model: ToyDenoiser
    losses: List[float]
    optimizer_state: Optional[Dict[str, Any]]
    step: int


class TrainingDataGenerator:
    """
    Draws training examples from a dataset of ``TryOnItem``. The example of
    a step depends only on ``(seed, step)``.
    """

    def __init__(
        self, model: ToyDenoiser, dataset: Sequence, views: int, seed: int
    ):
        if len(dataset) == 0:
            raise InvalidParameterError("cannot train on an empty dataset")
        self.model = model
        self.views = views
        self.seed = seed
        self.bundles = [
            make_conditioning(model, item.views, item.target_garments)
            for item in dataset
        ]
        self.targets = [
            model.autoencoder.encode(item.target_views.rgb) for item in dataset
        ]

    def __len__(self) -> int:
        return len(self.bundles)

    def __call__(self, step: int) -> TrainingExample:
        rng = np.random.default_rng([self.seed, step])
        item = int(rng.integers(len(self.bundles)))
        bundle = self.bundles[item]
        m = min(self.views, bundle.view_count)
        indices = sorted(
            int(i) for i in rng.choice(bundle.view_count, m, replace=False)
        )
        t = int(rng.integers(self.model.schedule.T))
        z0 = self.targets[item][indices]
        generator = torch.Generator().manual_seed(int(rng.integers(2**62)))
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        return TrainingExample(bundle.subset(indices), z0, t, eps)


def train(
    model: ToyDenoiser,
    dataset: Sequence,
    stage: int,
    steps: int,
    lr: float,
    seed: int,
    config: Optional[TrainConfig] = None,
    start_step: int = 0,
    optimizer_state: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> TrainingResult:
    config = config or TrainConfig()
    if stage not in (1, 2):
        raise InvalidParameterError(f"stage must be 1 or 2, got {stage}")
    if steps < 0:
        raise InvalidParameterError(f"steps must be >= 0, got {steps}")
    views = 1 if stage == 1 else config.train_views
    generator = TrainingDataGenerator(model, dataset, views, seed)

    optimizer = torch.optim.Adam(params=model.parameters(), lr=lr)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
        for group in optimizer.param_groups:
            group["lr"] = lr

    model.train()
    losses = []
    for step in tqdm(
        range(start_step, start_step + steps),
        desc=f"stage {stage}",
        disable=not progress,
    ):
        example = generator(step)
        loss = ldm_loss(
            model, example.cond, example.z0, example.t, example.eps
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.detach().item())
        if config.log_interval and (step + 1) % config.log_interval == 0:
            logger.info(
                "stage %d step %d: loss %.6f", stage, step + 1, losses[-1]
            )
    model.eval()
    return TrainingResult(
        model, losses, optimizer.state_dict(), start_step + steps
    )


def train_two_stage(
    model: ToyDenoiser,
    dataset: Sequence,
    config: Optional[TrainConfig] = None,
    start_step: int = 0,
    optimizer_state: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> TrainingResult:
    """
    Single-view then multi-view training sharing one Adam state. Resuming at
    ``start_step`` reproduces the uninterrupted run.
    """
    config = config or TrainConfig()
    losses: List[float] = []
    step = start_step
    state = optimizer_state
    for stage, end in ((1, config.stage1_steps), (2, config.total_steps)):
        if step >= end:
            continue
        result = train(
            model,
            dataset,
            stage,
            end - step,
            config.lr,
            config.seed,
            config,
            start_step=step,
            optimizer_state=state,
            progress=progress,
        )
        losses.extend(result.losses)
        step = result.step
        state = result.optimizer_state
    return TrainingResult(model, losses, state, step)

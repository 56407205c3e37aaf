"""
Toy epsilon-prediction denoiser with the conditioning topology of the full
try-on model: the main trunk takes the channel concatenation of the noisy
latent, the pose latent and the clothing-agnostic latent; every block runs
correlation modulated multi-view attention against cached garment features
and camera conditioned cross-attention against garment embedding tokens.
The garment features come from running the same blocks over the garment
latents at t=0.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from einops import rearrange
from torch import nn

from ..camera import build_correlation_matrix, encode_camera_rotation
from ..exceptions import InvalidParameterError, ShapeError
from ..metrics import ToyEmbedder
from ..mvattn import (
    AttentionParams,
    MlpParams,
    build_condition_tokens,
    cross_attention,
    mv_attention,
)
from .autoencoder import PoseEncoder, ToyAutoencoder, as_tensor
from .schedule import NoiseSchedule, ScheduleConfig

logger = logging.getLogger(__name__)

# channel order of the main trunk input
INPUT_CHANNELS = ("z_t", "pose", "agnostic")
DTYPE = torch.float64


@dataclass
class DenoiserConfig:
    width: int = 64
    height: int = 96
    patch: int = 8
    hidden: int = 32
    head_dim: int = 16
    blocks: int = 2
    embed_dim: int = 64
    encoding_length: int = 4
    mlp_hidden: int = 32
    # False replaces the rotation correlation matrix by the identity
    use_correlation: bool = True
    # False feeds a zero pose latent instead of the encoded normal maps
    use_pose: bool = True
    # False leaves the camera token out of the cross-attention keys
    use_camera_token: bool = True
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.width % self.patch or self.height % self.patch:
            raise InvalidParameterError(
                f"image {self.width}x{self.height} is not divisible by "
                f"patch {self.patch}"
            )
        if self.blocks < 1:
            raise InvalidParameterError("the denoiser needs at least 1 block")

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch**2

    @property
    def latent_size(self) -> Tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def tokens(self) -> int:
        h, w = self.latent_size
        return h * w

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "DenoiserConfig":
        document = dict(document)
        document["schedule"] = ScheduleConfig(**document.get("schedule", {}))
        return cls(**document)


@dataclass
class ConditioningBundle:
    """
    Raw per-view conditioning of one multi-view denoising problem.

    Latents are CHW tensors; ``normals`` are the ``[m, H, W, 3]`` encoded
    normal maps fed to the pose encoder.
    """

    garment_front: torch.Tensor
    garment_back: torch.Tensor
    garment_tokens: torch.Tensor
    normals: torch.Tensor
    agnostic: torch.Tensor
    rotations: np.ndarray
    C: torch.Tensor
    view_ids: Tuple[int, ...]

    def __post_init__(self):
        self.view_ids = tuple(int(i) for i in self.view_ids)
        m = len(self.view_ids)
        counts = {
            "normals": self.normals.shape[0],
            "agnostic": self.agnostic.shape[0],
            "rotations": len(self.rotations),
            "C": self.C.shape[0],
        }
        for name, count in counts.items():
            if count != m:
                raise ShapeError(
                    f"{name} holds {count} views but there are {m} view ids"
                )
        if self.garment_front.shape != self.garment_back.shape:
            raise ShapeError("garment latents differ in shape")

    @property
    def view_count(self) -> int:
        return len(self.view_ids)

    def subset(self, indices: Sequence[int]) -> "ConditioningBundle":
        indices = list(indices)
        return ConditioningBundle(
            garment_front=self.garment_front,
            garment_back=self.garment_back,
            garment_tokens=self.garment_tokens,
            normals=self.normals[indices],
            agnostic=self.agnostic[indices],
            rotations=self.rotations[indices],
            C=self.C[indices][:, indices],
            view_ids=tuple(self.view_ids[i] for i in indices),
        )


@dataclass
class EncodedConditions:
    pose: torch.Tensor
    agnostic: torch.Tensor
    tokens: torch.Tensor
    garment_features: List[Tuple[torch.Tensor, torch.Tensor]]
    C: torch.Tensor
    view_ids: Tuple[int, ...]

    @property
    def view_count(self) -> int:
        return len(self.view_ids)


def _linear(fan_in: int, fan_out: int) -> nn.Linear:
    return nn.Linear(fan_in, fan_out, dtype=DTYPE)


class CameraMlp(nn.Module):
    def __init__(self, in_width: int, hidden: int, out_width: int):
        super().__init__()
        self.W1 = nn.Parameter(
            torch.randn(in_width, hidden, dtype=DTYPE) / np.sqrt(in_width)
        )
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.W2 = nn.Parameter(
            torch.randn(hidden, out_width, dtype=DTYPE) / np.sqrt(hidden)
        )
        self.b2 = nn.Parameter(torch.zeros(out_width, dtype=DTYPE))

    def params(self) -> MlpParams:
        return MlpParams(self.W1, self.b1, self.W2, self.b2)


class DenoiserBlock(nn.Module):
    def __init__(self, hidden: int, head_dim: int, embed_dim: int):
        super().__init__()
        self.lin_in = _linear(hidden, hidden)
        self.lin_out = _linear(hidden, hidden)
        spatial = AttentionParams.random(hidden, head_dim, value_dim=hidden)
        self.W_Q = nn.Parameter(spatial.W_Q)
        self.W_K = nn.Parameter(spatial.W_K)
        self.W_V = nn.Parameter(spatial.W_V)
        crossing = AttentionParams.random(
            hidden, head_dim, key_width=embed_dim, value_dim=hidden
        )
        self.X_Q = nn.Parameter(crossing.W_Q)
        self.X_K = nn.Parameter(crossing.W_K)
        self.X_V = nn.Parameter(crossing.W_V)

    @property
    def spatial(self) -> AttentionParams:
        return AttentionParams(self.W_Q, self.W_K, self.W_V)

    @property
    def crossing(self) -> AttentionParams:
        return AttentionParams(self.X_Q, self.X_K, self.X_V)

    def garment_pass(
        self, h: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Self attention only, each garment latent attending to itself. Returns
        the block input features and the block output.
        """
        u = self.lin_in(h)
        empty = u.new_zeros(0, u.shape[-1])
        separate = torch.eye(h.shape[0], dtype=u.dtype)
        out = u + mv_attention(u, empty, empty, separate, self.spatial)
        return u, h + self.lin_out(torch.tanh(out))

    def forward(
        self,
        h: torch.Tensor,
        garment_front: torch.Tensor,
        garment_back: torch.Tensor,
        C: torch.Tensor,
        tokens: torch.Tensor,
    ) -> torch.Tensor:
        u = self.lin_in(h)
        u = u + mv_attention(u, garment_front, garment_back, C, self.spatial)
        crossing = self.crossing
        u = u + torch.stack(
            [
                cross_attention(u[i], tokens[i], crossing)
                for i in range(u.shape[0])
            ]
        )
        return h + self.lin_out(torch.tanh(u))


class ToyDenoiser(nn.Module):
    """
    ``model(z_t, t, cond)`` predicts the noise of the ``[m, c, h, w]`` latent
    batch of all views of ``cond`` jointly.
    """

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        config = config or DenoiserConfig()
        self.config = config
        self.autoencoder = ToyAutoencoder(config.patch)
        self.schedule = NoiseSchedule.from_config(config.schedule)
        self.embedder = ToyEmbedder(config.embed_dim, config.seed)
        channels = config.latent_channels
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.pose_encoder = PoseEncoder(config.patch, channels)
            self.input = _linear(len(INPUT_CHANNELS) * channels, config.hidden)
            self.garment_input = _linear(channels, config.hidden)
            self.position = nn.Parameter(
                0.1 * torch.randn(config.tokens, config.hidden, dtype=DTYPE)
            )
            self.time = nn.Embedding(
                self.schedule.T, config.hidden, dtype=DTYPE
            )
            nn.init.normal_(self.time.weight, std=0.1)
            self.camera_mlp = CameraMlp(
                18 * config.encoding_length,
                config.mlp_hidden,
                config.embed_dim,
            )
            self.blocks = nn.ModuleList(
                DenoiserBlock(config.hidden, config.head_dim, config.embed_dim)
                for _ in range(config.blocks)
            )
            self.output = _linear(config.hidden, channels)

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return (self.config.latent_channels, *self.config.latent_size)

    def _tokens(self, latent: torch.Tensor) -> torch.Tensor:
        return rearrange(latent, "m c h w -> m (h w) c")

    def _check_latent(self, name: str, latent: torch.Tensor):
        if tuple(latent.shape[-3:]) != self.latent_shape:
            raise ShapeError(
                f"{name} has shape {tuple(latent.shape)}, expected "
                f"[..., {', '.join(map(str, self.latent_shape))}]"
            )

    def encode_conditions(self, cond: ConditioningBundle) -> EncodedConditions:
        self._check_latent("garment latent", cond.garment_front)
        self._check_latent("agnostic latent", cond.agnostic)
        if self.config.use_pose:
            pose = self.pose_encoder(cond.normals)
            self._check_latent("pose latent", pose)
        else:
            pose = torch.zeros_like(cond.agnostic)

        if self.config.use_camera_token:
            mlp = self.camera_mlp.params()
            tokens = torch.stack(
                [
                    build_condition_tokens(
                        cond.garment_tokens,
                        encode_camera_rotation(R, self.config.encoding_length),
                        mlp,
                    )
                    for R in cond.rotations
                ]
            )
        else:
            tokens = cond.garment_tokens.expand(cond.view_count, -1, -1)

        garments = torch.stack([cond.garment_front, cond.garment_back])
        h = (
            self.garment_input(self._tokens(garments))
            + self.position
            + self.time.weight[0]
        )
        features = []
        for block in self.blocks:
            u, h = block.garment_pass(h)
            features.append((u[0], u[1]))

        return EncodedConditions(
            pose=pose,
            agnostic=cond.agnostic,
            tokens=tokens,
            garment_features=features,
            C=torch.as_tensor(cond.C, dtype=DTYPE),
            view_ids=cond.view_ids,
        )

    def forward(
        self,
        z_t: torch.Tensor,
        t,
        cond: Union[ConditioningBundle, EncodedConditions],
    ) -> torch.Tensor:
        if isinstance(cond, ConditioningBundle):
            cond = self.encode_conditions(cond)
        self._check_latent("z_t", z_t)
        if z_t.dim() != 4 or z_t.shape[0] != cond.view_count:
            raise ShapeError(
                f"z_t has shape {tuple(z_t.shape)} but the conditioning "
                f"holds {cond.view_count} views"
            )
        t = as_timesteps(t, z_t.shape[0], self.schedule)

        x = torch.cat([z_t, cond.pose, cond.agnostic], dim=1)
        h = (
            self.input(self._tokens(x))
            + self.position
            + self.time(t)[:, None, :]
        )
        for block, (front, back) in zip(self.blocks, cond.garment_features):
            h = block(h, front, back, cond.C, cond.tokens)
        height, width = self.config.latent_size
        return rearrange(
            self.output(h), "m (h w) c -> m c h w", h=height, w=width
        )


def as_timesteps(t, m: int, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1:
        t = t.expand(m)
    if t.numel() != m:
        raise ShapeError(f"{t.numel()} timesteps for {m} views")
    for step in t.unique().tolist():
        schedule.check_step(step)
    return t


def make_conditioning(
    model: ToyDenoiser,
    views,
    garments,
    view_ids: Optional[Sequence[int]] = None,
) -> ConditioningBundle:
    """
    Conditioning for editing ``views`` (``SceneViews``) to wear
    ``garments`` (``GarmentPair``).
    """
    autoencoder = model.autoencoder
    m = views.view_count
    if model.config.use_correlation:
        C = build_correlation_matrix(views.rig)
    else:
        C = np.eye(m)
    embedder = model.embedder
    garment_tokens = np.stack(
        [embedder.embed(garments.front), embedder.embed(garments.back)]
    )
    return ConditioningBundle(
        garment_front=autoencoder.encode(garments.front),
        garment_back=autoencoder.encode(garments.back),
        garment_tokens=torch.as_tensor(garment_tokens, dtype=DTYPE),
        normals=as_tensor(views.normal),
        agnostic=autoencoder.encode(views.agnostic),
        rotations=views.rig.rotations(),
        C=torch.as_tensor(C, dtype=DTYPE),
        view_ids=tuple(range(m)) if view_ids is None else tuple(view_ids),
    )


def ldm_loss(
    model,
    cond,
    z0: torch.Tensor,
    t,
    eps: torch.Tensor,
    schedule: Optional[NoiseSchedule] = None,
) -> torch.Tensor:
    """Mean squared error between ``eps`` and the model's noise estimate."""
    schedule = schedule or model.schedule
    if z0.shape != eps.shape:
        raise ShapeError(
            f"latent {tuple(z0.shape)} and noise {tuple(eps.shape)} differ"
        )
    t = as_timesteps(t, z0.shape[0], schedule)
    alpha = torch.as_tensor(schedule.alpha, dtype=z0.dtype)[t]
    sigma = torch.as_tensor(schedule.sigma, dtype=z0.dtype)[t]
    z_t = alpha[:, None, None, None] * z0 + sigma[:, None, None, None] * eps
    prediction = model(z_t, t, cond)
    if prediction.shape != eps.shape:
        raise ShapeError(
            f"model predicted {tuple(prediction.shape)}, expected "
            f"{tuple(eps.shape)}"
        )
    return torch.mean((eps - prediction) ** 2)

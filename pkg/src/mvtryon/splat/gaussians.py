"""
Anisotropic 3D Gaussians parameterized by mean, per-axis scale, unit
quaternion ``(w, x, y, z)``, opacity and flat RGB color.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence

import numpy as np
import torch

from ..exceptions import FormatError, InvalidParameterError, ShapeError

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b"GSPL"
CLOUD_VERSION = 1
QUAT_TOLERANCE = 1e-9
DTYPE = torch.float64


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        sizes = (("mu", 3), ("scale", 3), ("quat", 4), ("color", 3))
        for name, size in sizes:
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != (size,):
                raise ShapeError(f"{name} must have {size} entries")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "opacity", float(self.opacity))
        if abs(np.linalg.norm(self.quat) - 1) > QUAT_TOLERANCE:
            raise InvalidParameterError(
                f"quaternion {self.quat} does not have unit norm"
            )
        if np.any(self.scale <= 0):
            raise InvalidParameterError(
                f"scales must be positive: {self.scale}"
            )
        if not 0 <= self.opacity <= 1:
            raise InvalidParameterError(
                f"opacity {self.opacity} not in [0, 1]"
            )
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidParameterError(f"color {self.color} not in [0, 1]")


class GaussianCloud:
    """
    Structure of arrays over ``N`` Gaussians: ``mu [N, 3]``, ``scale
    [N, 3]``, ``quat [N, 4]``, ``opacity [N]``, ``color [N, 3]``.
    """

    fields = ("mu", "scale", "quat", "opacity", "color")

    def __init__(self, mu, scale, quat, opacity, color):
        self.mu = torch.as_tensor(mu, dtype=DTYPE).reshape(-1, 3)
        n = self.mu.shape[0]
        self.scale = torch.as_tensor(scale, dtype=DTYPE).reshape(n, 3)
        self.quat = torch.as_tensor(quat, dtype=DTYPE).reshape(n, 4)
        self.opacity = torch.as_tensor(opacity, dtype=DTYPE).reshape(n)
        self.color = torch.as_tensor(color, dtype=DTYPE).reshape(n, 3)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(
            torch.zeros(0, 3),
            torch.zeros(0, 3),
            torch.zeros(0, 4),
            torch.zeros(0),
            torch.zeros(0, 3),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.quat for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> Gaussian:
        return Gaussian(
            self.mu[index].detach().numpy(),
            self.scale[index].detach().numpy(),
            self.quat[index].detach().numpy(),
            float(self.opacity[index]),
            self.color[index].detach().numpy(),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        return (self[i] for i in range(self.count))

    def tensors(self) -> List[torch.Tensor]:
        return [getattr(self, name) for name in self.fields]

    def detach(self) -> "GaussianCloud":
        return GaussianCloud(*(t.detach().clone() for t in self.tensors()))

    def select(self, indices) -> "GaussianCloud":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return GaussianCloud(*(t[indices] for t in self.tensors()))

    def check(self) -> "GaussianCloud":
        """Raise if any Gaussian violates its invariants."""
        list(self)
        return self

    def equal(self, other: "GaussianCloud") -> bool:
        return self.count == other.count and all(
            torch.equal(a, b) for a, b in zip(self.tensors(), other.tensors())
        )


def quaternion_to_rotation(quat: torch.Tensor) -> torch.Tensor:
    """``[..., 4]`` quaternions ``(w, x, y, z)`` to rotation matrices."""
    norm = quat.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise InvalidParameterError("zero-norm quaternion")
    w, x, y, z = (quat / norm).unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(*quat.shape[:-1], 3, 3)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def covariance_from_scale_rot(scale, quat) -> torch.Tensor:
    """``R(q) diag(scale^2) R(q)^T``, batched over leading axes."""
    scale = torch.as_tensor(scale, dtype=DTYPE)
    quat = torch.as_tensor(quat, dtype=DTYPE)
    R = quaternion_to_rotation(quat)
    return (R * (scale**2)[..., None, :]) @ R.transpose(-1, -2)


def rotate_cloud(cloud: GaussianCloud, quat) -> GaussianCloud:
    """Apply the world rotation ``quat`` to every Gaussian."""
    quat = torch.as_tensor(quat, dtype=DTYPE)
    R = quaternion_to_rotation(quat)
    return GaussianCloud(
        cloud.mu @ R.T,
        cloud.scale,
        quaternion_multiply(quat.expand_as(cloud.quat), cloud.quat),
        cloud.opacity,
        cloud.color,
    )


def init_cloud_from_scene(
    scene,
    n_azimuth: int = 24,
    n_height: int = 12,
    seed: int = 0,
    opacity: float = 0.9,
) -> GaussianCloud:
    """
    Flat Gaussians tiling the capsule surface of a ``BodyScene``, colored
    with its unshaded albedo.
    """
    if n_azimuth < 1 or n_height < 1:
        raise InvalidParameterError("need at least one Gaussian per axis")
    rng = np.random.default_rng(seed)
    bottom, top = scene.extent
    margin = 0.5 * (top - bottom) / n_height
    heights = np.linspace(bottom + margin, top - margin, n_height)
    jitter = rng.uniform(-0.25, 0.25, (n_height, n_azimuth))
    azimuths = 2 * np.pi * (np.arange(n_azimuth)[None] + jitter) / n_azimuth

    y = np.repeat(heights[:, None], n_azimuth, axis=1)
    overhang = np.maximum(np.abs(y) - scene.half_length, 0.0)
    ring = np.sqrt(np.maximum(scene.radius**2 - overhang**2, 1e-6))
    points = np.stack(
        [ring * np.sin(azimuths), y, ring * np.cos(azimuths)], axis=-1
    ).reshape(-1, 3)
    tangential = (np.pi * ring / n_azimuth).reshape(-1)
    vertical = 0.5 * (top - bottom) / n_height
    scale = np.stack(
        [
            tangential,
            np.full_like(tangential, vertical),
            np.full_like(tangential, 0.05 * scene.radius),
        ],
        axis=-1,
    )
    # rotation about +y by the azimuth maps local z onto the surface normal
    half = azimuths.reshape(-1) / 2
    quat = np.stack(
        [np.cos(half), np.zeros_like(half), np.sin(half), np.zeros_like(half)],
        axis=-1,
    )
    return GaussianCloud(
        points,
        scale,
        quat,
        np.full(len(points), opacity),
        scene.albedo(points),
    )


def save_cloud(path, cloud: GaussianCloud):
    rows = torch.cat(
        [
            cloud.mu,
            cloud.scale,
            cloud.quat,
            cloud.opacity[:, None],
            cloud.color,
        ],
        dim=1,
    )
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<IQ", CLOUD_VERSION, cloud.count))
        f.write(rows.detach().numpy().astype("<f8").tobytes())


def load_cloud(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    header = 4 + struct.calcsize("<IQ")
    if len(data) < header or data[:4] != CLOUD_MAGIC:
        raise FormatError(f"{path} is not a Gaussian cloud file")
    version, count = struct.unpack("<IQ", data[4:header])
    if version != CLOUD_VERSION:
        raise FormatError(f"unsupported cloud version {version}")
    if len(data) != header + count * 14 * 8:
        raise FormatError(f"{path} does not hold {count} Gaussians")
    rows = np.frombuffer(data, dtype="<f8", offset=header).reshape(count, 14)
    rows = rows.astype(np.float64)
    return GaussianCloud(
        rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10], rows[:, 11:14]
    )

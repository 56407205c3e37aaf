"""
Pinhole cameras, view rigs, the rotation correlation between views and the
sinusoidal encoding of camera rotations.

World frame is right handed with +y up and the subject facing +z. Cameras use
the OpenCV frame (x right, y down, z forward) and always look at the origin.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import InvalidParameterError, InvalidRotationError

logger = logging.getLogger(__name__)

ROTATION_TOLERANCE = 1e-6
WORLD_UP = (0.0, 1.0, 0.0)


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 96
    focal: float = 100.0
    radius: float = 2.5
    elevation: float = 0.0
    encoding_length: int = 4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError(
                f"focal lengths must be positive, got ({self.fx}, {self.fy})"
            )
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    @classmethod
    def centered(
        cls, width: int, height: int, focal: float
    ) -> "CameraIntrinsics":
        return cls(focal, focal, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0, 0, 1.0]]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }


def check_rotation(R: np.ndarray, tolerance: float = ROTATION_TOLERANCE):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidRotationError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation has non-finite entries")
    residual = np.abs(R.T @ R - np.eye(3)).max()
    if residual > tolerance:
        raise InvalidRotationError(
            f"rotation is not orthonormal (residual {residual:.3e})"
        )
    det = np.linalg.det(R)
    if abs(det - 1.0) > tolerance:
        raise InvalidRotationError(f"rotation has determinant {det:.6f}")
    return R


@dataclass(frozen=True)
class CameraExtrinsics:
    """World to camera transform ``x_cam = R @ x_world + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", check_rotation(self.R))
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise InvalidParameterError(
                f"translation must be a 3-vector, got shape {t.shape}"
            )
        object.__setattr__(self, "t", t)

    def __eq__(self, other):
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(
            self.t, other.t
        )

    __hash__ = None


@dataclass(frozen=True)
class Camera:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics

    @property
    def R(self) -> np.ndarray:
        return self.extrinsics.R

    @property
    def t(self) -> np.ndarray:
        return self.extrinsics.t

    @property
    def center(self) -> np.ndarray:
        return camera_center(self.extrinsics)

    @property
    def azimuth(self) -> float:
        return camera_azimuth(self.extrinsics)


@dataclass(frozen=True)
class ViewRig:
    cameras: Tuple[Camera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if len(self.cameras) < 1:
            raise InvalidParameterError("a rig needs at least one camera")

    @property
    def view_count(self) -> int:
        return len(self.cameras)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.cameras[0].intrinsics

    def rotations(self) -> np.ndarray:
        return np.stack([camera.R for camera in self.cameras])

    def azimuths(self) -> np.ndarray:
        return np.array([camera.azimuth for camera in self.cameras])

    def subset(self, indices: Sequence[int]) -> "ViewRig":
        return ViewRig(tuple(self.cameras[i] for i in indices))

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self) -> Iterator[Camera]:
        return iter(self.cameras)

    def __getitem__(self, index: Union[int, slice]):
        if isinstance(index, slice):
            return ViewRig(self.cameras[index])
        return self.cameras[index]


@dataclass(frozen=True)
class CameraToken:
    values: np.ndarray
    L: int

    def __len__(self) -> int:
        return len(self.values)


def camera_center(extrinsics: CameraExtrinsics) -> np.ndarray:
    return -extrinsics.R.T @ extrinsics.t


def camera_azimuth(extrinsics: CameraExtrinsics) -> float:
    x, _, z = camera_center(extrinsics)
    return float(math.atan2(x, z) % (2 * math.pi))


def look_at(
    eye: Sequence[float],
    target: Sequence[float] = (0.0, 0.0, 0.0),
    up: Sequence[float] = WORLD_UP,
) -> CameraExtrinsics:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise InvalidParameterError("camera eye coincides with its target")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise InvalidParameterError("view direction is parallel to up vector")
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return CameraExtrinsics(R, -R @ eye)


def orbit_position(
    azimuth: float, radius: float, elevation: float
) -> np.ndarray:
    return radius * np.array(
        [
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
            math.cos(elevation) * math.cos(azimuth),
        ]
    )


def rig_from_azimuths(
    azimuths: Sequence[float],
    radius: float,
    elevation: float,
    intrinsics: CameraIntrinsics,
) -> ViewRig:
    if radius <= 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    return ViewRig(
        tuple(
            Camera(
                intrinsics, look_at(orbit_position(az, radius, elevation))
            )
            for az in azimuths
        )
    )


def _default_intrinsics() -> CameraIntrinsics:
    config = CameraConfig()
    return CameraIntrinsics.centered(config.width, config.height, config.focal)


def sample_azimuth_rig(
    m: int,
    radius: float,
    elevation: float,
    seed: int,
    intrinsics: Optional[CameraIntrinsics] = None,
) -> ViewRig:
    """
    ``m`` cameras on a circle at random azimuths in [0, 2pi), drawn from a
    seeded PCG64 generator.
    """
    if m < 1:
        raise InvalidParameterError(f"view count must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    azimuths = rng.random(m) * (2 * math.pi)
    return rig_from_azimuths(
        azimuths, radius, elevation, intrinsics or _default_intrinsics()
    )


def uniform_rig(
    n: int,
    radius: float,
    elevation: float,
    intrinsics: Optional[CameraIntrinsics] = None,
    start_azimuth: float = 0.0,
) -> ViewRig:
    if n < 1:
        raise InvalidParameterError(f"view count must be >= 1, got {n}")
    azimuths = [start_azimuth + 2 * math.pi * k / n for k in range(n)]
    return rig_from_azimuths(
        azimuths, radius, elevation, intrinsics or _default_intrinsics()
    )


def rotation_correlation(R_i: np.ndarray, R_j: np.ndarray) -> float:
    R_i = check_rotation(R_i)
    R_j = check_rotation(R_j)
    cosine = (np.trace(R_i.T @ R_j) - 1) / 2
    cosine = min(1.0, max(-1.0, float(cosine)))
    return (cosine + 1) / 2


def build_correlation_matrix(rig: ViewRig) -> np.ndarray:
    rotations = rig.rotations()
    for R in rotations:
        check_rotation(R)
    # trace(R_i^T R_j) is the Frobenius inner product of R_i and R_j
    traces = np.einsum("iab,jab->ij", rotations, rotations)
    cosines = np.clip((traces - 1) / 2, -1.0, 1.0)
    C = (cosines + 1) / 2
    np.fill_diagonal(C, 1.0)
    return C


def encode_camera_rotation(R: np.ndarray, L: int) -> CameraToken:
    if not isinstance(L, (int, np.integer)) or L < 1:
        raise InvalidParameterError(f"encoding length must be >= 1, got {L}")
    r = check_rotation(R).reshape(9)
    blocks: List[np.ndarray] = []
    for k in range(L):
        frequency = (2.0**k) * math.pi
        blocks.append(np.sin(frequency * r))
        blocks.append(np.cos(frequency * r))
    return CameraToken(np.concatenate(blocks), int(L))


def rig_to_json(rig: ViewRig) -> Dict[str, Any]:
    shared = rig.intrinsics
    views = []
    for camera in rig:
        view: Dict[str, Any] = {
            "R": [float(x) for x in camera.R.reshape(9)],
            "t": [float(x) for x in camera.t],
        }
        if camera.intrinsics != shared:
            view["intrinsics"] = camera.intrinsics.to_dict()
        views.append(view)
    return {"intrinsics": shared.to_dict(), "views": views}


def rig_from_json(document: Dict[str, Any]) -> ViewRig:
    shared = CameraIntrinsics(**document["intrinsics"])
    cameras = []
    for view in document["views"]:
        intrinsics = (
            CameraIntrinsics(**view["intrinsics"])
            if "intrinsics" in view
            else shared
        )
        R = np.asarray(view["R"], dtype=np.float64).reshape(3, 3)
        cameras.append(Camera(intrinsics, CameraExtrinsics(R, view["t"])))
    return ViewRig(tuple(cameras))

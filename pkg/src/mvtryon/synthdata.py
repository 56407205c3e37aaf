"""
Procedural "clothed body" scenes.

The body is a vertical capsule centred at the origin and facing +z. A garment
band covers an interval of heights and carries an analytic texture defined on
(azimuth, height) surface coordinates; the top of the capsule is the
face/hair region. Views are rendered by sphere tracing the capsule SDF.
"""
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from ._reader import read_json, read_rig
from ._writer import write_json, write_ppm, write_rig
from .camera import (
    CameraConfig,
    CameraIntrinsics,
    ViewRig,
    sample_azimuth_rig,
)
from .exceptions import InvalidParameterError

logger = logging.getLogger(__name__)

TEXTURES = ("stripes", "checker", "logo-patch")
# camera frame (x right, y down, z forward) to normal-map frame
# (x right, y up, z towards the viewer)
VIEW_FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass
class SynthConfig:
    camera: CameraConfig = field(default_factory=CameraConfig)
    dilation: int = 2
    agnostic_gray: float = 0.5
    march_steps: int = 128
    hit_epsilon: float = 1e-6
    ambient: float = 0.45
    light: Tuple[float, float, float] = (0.3, 0.6, 1.0)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.centered(
            self.camera.width, self.camera.height, self.camera.focal
        )


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - angle, 2 * np.pi)


@dataclass(frozen=True)
class GarmentTexture:
    kind: str
    params: Dict[str, Any]

    def __post_init__(self):
        if self.kind not in TEXTURES:
            raise InvalidParameterError(
                f"unknown texture {self.kind!r}, expected one of {TEXTURES}"
            )

    def albedo(
        self, azimuth: np.ndarray, height: np.ndarray, radius: float
    ) -> np.ndarray:
        p = self.params
        azimuth = np.asarray(azimuth, dtype=np.float64)
        height = np.asarray(height, dtype=np.float64)
        first = np.asarray(p["color_a"], dtype=np.float64)
        second = np.asarray(p["color_b"], dtype=np.float64)
        if self.kind == "stripes":
            if p.get("axis", "azimuth") == "azimuth":
                coordinate = np.mod(azimuth, 2 * np.pi)
            else:
                coordinate = height
            phase = np.floor(coordinate / (p["period"] / 2)).astype(int)
            select = np.mod(phase, 2) == 0
        elif self.kind == "checker":
            column = np.floor(
                np.mod(azimuth, 2 * np.pi) / (2 * np.pi / p["columns"])
            )
            row = np.floor(height / p["cell_height"])
            select = np.mod(column + row, 2) == 0
        else:
            half = p["size"] / 2
            arc = np.abs(wrap_angle(azimuth - p["azimuth"])) * radius
            select = ~(
                (arc <= half) & (np.abs(height - p["height"]) <= half)
            )
        return np.where(select[..., None], first, second)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "GarmentTexture":
        return cls(document["kind"], dict(document["params"]))


@dataclass(frozen=True)
class BodyScene:
    """
    Capsule body with axis from ``(0, -half_length, 0)`` to
    ``(0, half_length, 0)``.
    """

    half_length: float
    radius: float
    band: Tuple[float, float]
    head: Tuple[float, float]
    garment: GarmentTexture
    skin: Tuple[float, float, float]
    hair: Tuple[float, float, float]
    seed: int = 0

    def __post_init__(self):
        top = self.half_length + self.radius
        lo, hi = self.band
        head_lo, head_hi = self.head
        if not (-top <= lo < hi <= top):
            raise InvalidParameterError(f"invalid garment band {self.band}")
        if not (-top <= head_lo < head_hi <= top):
            raise InvalidParameterError(f"invalid head interval {self.head}")
        if hi >= head_lo:
            raise InvalidParameterError(
                f"garment band {self.band} overlaps head {self.head}"
            )

    @property
    def extent(self) -> Tuple[float, float]:
        top = self.half_length + self.radius
        return -top, top

    def with_garment(self, garment: GarmentTexture) -> "BodyScene":
        return replace(self, garment=garment)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return (
            np.linalg.norm(points - self.axis_point(points), axis=-1)
            - self.radius
        )

    def axis_point(self, points: np.ndarray) -> np.ndarray:
        closest = np.zeros_like(points)
        closest[..., 1] = np.clip(
            points[..., 1], -self.half_length, self.half_length
        )
        return closest

    def normal(self, points: np.ndarray) -> np.ndarray:
        offset = points - self.axis_point(points)
        return offset / np.linalg.norm(offset, axis=-1, keepdims=True)

    def albedo(self, points: np.ndarray) -> np.ndarray:
        azimuth = np.arctan2(points[..., 0], points[..., 2])
        height = points[..., 1]
        colors = np.broadcast_to(
            np.asarray(self.skin), points.shape
        ).copy()
        in_band = self.band_mask(height)
        colors[in_band] = self.garment.albedo(
            azimuth[in_band], height[in_band], self.radius
        )
        colors[self.head_mask(height)] = self.hair
        return colors

    def band_mask(self, height: np.ndarray) -> np.ndarray:
        return (height >= self.band[0]) & (height <= self.band[1])

    def head_mask(self, height: np.ndarray) -> np.ndarray:
        return (height >= self.head[0]) & (height <= self.head[1])

    def to_dict(self) -> Dict[str, Any]:
        document = asdict(self)
        document["garment"] = self.garment.to_dict()
        return _jsonable(document)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "BodyScene":
        document = dict(document)
        document["garment"] = GarmentTexture.from_dict(document["garment"])
        for key in ("band", "head", "skin", "hair"):
            document[key] = tuple(document[key])
        return cls(**document)


@dataclass
class SceneViews:
    """Per-view images are stacked along the first axis, HWC, in [0, 1]."""

    rgb: np.ndarray
    normal: np.ndarray
    agnostic: np.ndarray
    agnostic_mask: np.ndarray
    face_mask: np.ndarray
    alpha: np.ndarray
    garment_mask: np.ndarray
    rig: ViewRig

    @property
    def view_count(self) -> int:
        return self.rgb.shape[0]

    def subset(self, indices: Sequence[int]) -> "SceneViews":
        indices = list(indices)
        return SceneViews(
            self.rgb[indices],
            self.normal[indices],
            self.agnostic[indices],
            self.agnostic_mask[indices],
            self.face_mask[indices],
            self.alpha[indices],
            self.garment_mask[indices],
            self.rig.subset(indices),
        )


@dataclass
class GarmentPair:
    front: np.ndarray
    back: np.ndarray

    def __post_init__(self):
        if self.front.shape != self.back.shape:
            raise InvalidParameterError(
                f"garment images differ in shape: {self.front.shape} vs "
                f"{self.back.shape}"
            )


@dataclass
class TryOnItem:
    subject: int
    scene: BodyScene
    target_scene: BodyScene
    views: SceneViews
    garments: GarmentPair
    target_garments: GarmentPair
    target_views: SceneViews


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _color(rng: np.random.Generator) -> List[float]:
    return [float(c) for c in rng.uniform(0.05, 0.95, 3)]


def default_texture_params(
    texture: str, rng: np.random.Generator
) -> Dict[str, Any]:
    params: Dict[str, Any] = {"color_a": _color(rng), "color_b": _color(rng)}
    if texture == "stripes":
        params["period"] = float(2 * np.pi / rng.integers(4, 9))
        params["axis"] = "azimuth"
    elif texture == "checker":
        params["columns"] = int(rng.integers(4, 9)) * 2
        params["cell_height"] = float(rng.uniform(0.08, 0.15))
    else:
        params["azimuth"] = 0.0
        params["height"] = 0.1
        params["size"] = float(rng.uniform(0.12, 0.2))
    return params


def make_scene(
    seed: int, texture: str, params: Optional[Dict[str, Any]] = None
) -> BodyScene:
    """
    Deterministic body scene for ``seed``. ``params`` override the randomly
    drawn texture parameters (and ``band``/``head`` when given).
    """
    if texture not in TEXTURES:
        raise InvalidParameterError(f"unknown texture {texture!r}")
    rng = np.random.default_rng(seed)
    half_length = float(rng.uniform(0.5, 0.6))
    radius = float(rng.uniform(0.25, 0.3))
    band = (float(rng.uniform(-0.35, -0.2)), float(rng.uniform(0.2, 0.3)))
    head = (half_length - 0.05, half_length + radius)
    skin = tuple(
        float(c) for c in rng.uniform([0.6, 0.4, 0.3], [0.9, 0.7, 0.6])
    )
    hair = tuple(float(c) for c in rng.uniform(0.05, 0.3, 3))
    texture_params = default_texture_params(texture, rng)
    params = dict(params or {})
    band = tuple(params.pop("band", band))
    head = tuple(params.pop("head", head))
    texture_params.update(params)
    return BodyScene(
        half_length=half_length,
        radius=radius,
        band=band,
        head=head,
        garment=GarmentTexture(texture, texture_params),
        skin=skin,
        hair=hair,
        seed=int(seed),
    )


def camera_rays(camera) -> Tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit world directions through every pixel centre."""
    k = camera.intrinsics
    v, u = np.meshgrid(
        np.arange(k.height, dtype=np.float64),
        np.arange(k.width, dtype=np.float64),
        indexing="ij",
    )
    directions = np.stack(
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1
    )
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    directions = directions @ camera.R  # R^T applied to row vectors
    origins = np.broadcast_to(camera.center, directions.shape)
    return origins, directions


def sphere_trace(
    scene: BodyScene,
    origins: np.ndarray,
    directions: np.ndarray,
    steps: int,
    epsilon: float,
) -> Tuple[np.ndarray, np.ndarray]:
    depth = np.zeros(origins.shape[:-1])
    for _ in range(steps):
        distance = scene.sdf(origins + depth[..., None] * directions)
        depth = depth + np.maximum(distance, 0.0)
    points = origins + depth[..., None] * directions
    hit = np.abs(scene.sdf(points)) < epsilon
    return points, hit


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    pooled = F.max_pool2d(
        torch.as_tensor(mask, dtype=torch.float64)[None, None],
        kernel_size=2 * radius + 1,
        stride=1,
        padding=radius,
    )
    return pooled[0, 0].numpy() > 0


def render_scene(
    scene: BodyScene, rig: ViewRig, config: Optional[SynthConfig] = None
) -> SceneViews:
    config = config or SynthConfig()
    light = np.asarray(config.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    outputs: Dict[str, List[np.ndarray]] = {
        key: []
        for key in (
            "rgb",
            "normal",
            "agnostic",
            "agnostic_mask",
            "face_mask",
            "alpha",
            "garment_mask",
        )
    }
    for camera in rig:
        origins, directions = camera_rays(camera)
        points, hit = sphere_trace(
            scene, origins, directions, config.march_steps, config.hit_epsilon
        )
        height = points[..., 1]
        normals = scene.normal(points)
        shade = config.ambient + (1 - config.ambient) * np.maximum(
            normals @ light, 0.0
        )
        rgb = np.where(
            hit[..., None], scene.albedo(points) * shade[..., None], 0.0
        )
        view_normals = normals @ (VIEW_FLIP @ camera.R).T
        normal_map = np.where(hit[..., None], (view_normals + 1) / 2, 0.0)
        face = hit & scene.head_mask(height)
        band = hit & scene.band_mask(height)
        agnostic_mask = dilate(band, config.dilation) & ~face
        agnostic = np.where(
            agnostic_mask[..., None], config.agnostic_gray, rgb
        )

        outputs["rgb"].append(rgb)
        outputs["normal"].append(normal_map)
        outputs["agnostic"].append(agnostic)
        outputs["agnostic_mask"].append(agnostic_mask)
        outputs["face_mask"].append(face)
        outputs["alpha"].append(hit)
        outputs["garment_mask"].append(band)
    stacked = {key: np.stack(value) for key, value in outputs.items()}
    return SceneViews(rig=rig, **stacked)


def garment_images(
    scene: BodyScene, size: Optional[Tuple[int, int]] = None
) -> GarmentPair:
    """
    Orthographic front (azimuth 0) and back (azimuth pi) crops of the
    garment band, unshaded.
    """
    if size is None:
        camera = CameraConfig()
        size = (camera.height, camera.width)
    height, width = size
    lo, hi = scene.band
    r = scene.radius
    rows = hi - (np.arange(height) + 0.5) / height * (hi - lo)
    columns = -r + (np.arange(width) + 0.5) / width * 2 * r
    y, x = np.meshgrid(rows, columns, indexing="ij")
    depth = np.sqrt(np.maximum(r**2 - x**2, 0.0))
    front = scene.garment.albedo(np.arctan2(x, depth), y, r)
    # seen from behind, image right is world -x
    back = scene.garment.albedo(np.arctan2(-x, -depth), y, r)
    return GarmentPair(front, back)


def _subject_seed(seed: int, subject: int) -> int:
    state = np.random.SeedSequence([int(seed), subject]).generate_state(1)
    return int(state[0])


def make_item(
    subject: int,
    views_per_subject: int,
    seed: int,
    config: Optional[SynthConfig] = None,
    rig: Optional[ViewRig] = None,
) -> TryOnItem:
    config = config or SynthConfig()
    subject_seed = _subject_seed(seed, subject)
    rng = np.random.default_rng(subject_seed)
    source_kind = TEXTURES[int(rng.integers(len(TEXTURES)))]
    target_kind = [kind for kind in TEXTURES if kind != source_kind][
        int(rng.integers(len(TEXTURES) - 1))
    ]
    scene = make_scene(subject_seed, source_kind)
    target = scene.with_garment(
        GarmentTexture(target_kind, default_texture_params(target_kind, rng))
    )
    if rig is None:
        rig = sample_azimuth_rig(
            views_per_subject,
            config.camera.radius,
            config.camera.elevation,
            subject_seed,
            config.intrinsics,
        )
    size = (config.camera.height, config.camera.width)
    return TryOnItem(
        subject=subject,
        scene=scene,
        target_scene=target,
        views=render_scene(scene, rig, config),
        garments=garment_images(scene, size),
        target_garments=garment_images(target, size),
        target_views=render_scene(target, rig, config),
    )


def make_dataset(
    n_subjects: int,
    views_per_subject: int,
    seed: int,
    config: Optional[SynthConfig] = None,
) -> List[TryOnItem]:
    if n_subjects < 1:
        raise InvalidParameterError(
            f"need at least one subject, got {n_subjects}"
        )
    items = [
        make_item(subject, views_per_subject, seed, config)
        for subject in range(n_subjects)
    ]
    logger.info(
        "generated %d subjects with %d views each",
        n_subjects,
        views_per_subject,
    )
    return items


def synth_config_from_dict(document: Dict[str, Any]) -> SynthConfig:
    document = dict(document)
    document["camera"] = CameraConfig(**document.get("camera", {}))
    if "light" in document:
        document["light"] = tuple(document["light"])
    return SynthConfig(**document)


def _write_subject(directory: Path, item: TryOnItem):
    views = item.views
    for i in range(views.view_count):
        prefix = directory / f"view_{i:03d}"
        write_ppm(f"{prefix}_rgb.ppm", views.rgb[i])
        write_ppm(f"{prefix}_normal.ppm", views.normal[i])
        write_ppm(f"{prefix}_agnostic.ppm", views.agnostic[i])
        write_ppm(f"{prefix}_mask.ppm", views.agnostic_mask[i])
        write_ppm(f"{prefix}_face.ppm", views.face_mask[i])
    write_ppm(directory / "garment_f.ppm", item.garments.front)
    write_ppm(directory / "garment_b.ppm", item.garments.back)
    write_ppm(directory / "target_garment_f.ppm", item.target_garments.front)
    write_ppm(directory / "target_garment_b.ppm", item.target_garments.back)
    write_rig(directory / "rig.json", views.rig)


def write_dataset(
    items: Sequence[TryOnItem],
    out_dir,
    config: Optional[SynthConfig] = None,
    echo: Optional[Dict[str, Any]] = None,
) -> List[Path]:
    """
    One directory per subject. Each subject is written to a temporary
    directory first and renamed into place once complete.
    """
    config = config or SynthConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for item in items:
        final = out_dir / f"subject_{item.subject:03d}"
        staging = Path(
            tempfile.mkdtemp(prefix=f".{final.name}-", dir=out_dir)
        )
        try:
            _write_subject(staging, item)
            write_json(
                staging / "meta.json",
                {
                    "subject": item.subject,
                    "scene": item.scene.to_dict(),
                    "target_garment": item.target_scene.garment.to_dict(),
                    "synth": _jsonable(asdict(config)),
                    "config": echo or {},
                },
            )
            if final.exists():
                shutil.rmtree(final)
            os.replace(staging, final)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        logger.info(
            "wrote subject %d with %d views to %s",
            item.subject,
            item.views.view_count,
            final,
        )
        written.append(final)
    return written


def subject_dirs(path) -> List[Path]:
    return sorted(
        p for p in Path(path).glob("subject_*") if (p / "meta.json").exists()
    )


def load_subject(directory) -> TryOnItem:
    """Rebuild a subject from its metadata and rig, re-rendering all views."""
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    config = synth_config_from_dict(meta["synth"])
    rig = read_rig(directory / "rig.json")
    scene = BodyScene.from_dict(meta["scene"])
    target = scene.with_garment(
        GarmentTexture.from_dict(meta["target_garment"])
    )
    size = (config.camera.height, config.camera.width)
    return TryOnItem(
        subject=int(meta["subject"]),
        scene=scene,
        target_scene=target,
        views=render_scene(scene, rig, config),
        garments=garment_images(scene, size),
        target_garments=garment_images(target, size),
        target_views=render_scene(target, rig, config),
    )


def load_dataset(path) -> List[TryOnItem]:
    directories = subject_dirs(path)
    if not directories:
        raise FileNotFoundError(f"no subject directories found in {path}")
    return [load_subject(directory) for directory in directories]

"""
End-to-end try-on: render the subject from uniform views, edit the views in
batches with the multi-view denoiser, copy the face and hair back from the
originals, discard outlier views by the z-score of their reconstruction loss
and fit a Gaussian cloud to the remaining views.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .camera import ViewRig, uniform_rig
from .diffusion import (
    DenoiserConfig,
    ToyDenoiser,
    TrainConfig,
    ddim_sample,
    make_conditioning,
    train_two_stage,
)
from .exceptions import InvalidParameterError, ShapeError
from .metrics import (
    EmbeddingProvider,
    MetricsConfig,
    ToyEmbedder,
    classify_views,
    clip_cons,
    dino_sim,
)
from .splat import (
    FitConfig,
    GaussianCloud,
    fit_cloud,
    init_cloud_from_scene,
    render,
)
from .synthdata import (
    BodyScene,
    GarmentPair,
    SceneViews,
    SynthConfig,
    render_scene,
)

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    test_views: int = 32
    batch_size: int = 16
    ddim_steps: int = 20
    zscore: float = 1.5
    seed: int = 0
    cloud_azimuth: int = 24
    cloud_height: int = 12
    synth: SynthConfig = field(default_factory=SynthConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.test_views % self.batch_size:
            raise InvalidParameterError(
                f"{self.test_views} test views cannot be split into batches "
                f"of {self.batch_size}"
            )
        if not self.zscore > 0:
            raise InvalidParameterError(
                f"z-score threshold must be positive, got {self.zscore}"
            )
        if self.ddim_steps < 1:
            raise InvalidParameterError("ddim_steps must be >= 1")

    def rig(self, n: int) -> ViewRig:
        camera = self.synth.camera
        return uniform_rig(
            n, camera.radius, camera.elevation, self.synth.intrinsics
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ReconstructionResult:
    cloud: GaussianCloud
    kept: List[int]
    view_losses: List[float]
    final_losses: List[float]


@dataclass
class EditResult:
    edited: List[np.ndarray]
    kept: List[bool]
    cloud: GaussianCloud
    report: Dict[str, Any]

    def __post_init__(self):
        if not any(self.kept):
            raise InvalidParameterError("no view was kept")


def batches(n: int, batch_size: int) -> List[List[int]]:
    return [
        list(range(start, min(start + batch_size, n)))
        for start in range(0, n, batch_size)
    ]


def edit_views(
    model: ToyDenoiser,
    views: SceneViews,
    garments: GarmentPair,
    config: PipelineConfig,
    progress: bool = False,
) -> List[np.ndarray]:
    """
    Jointly denoise consecutive batches of ``batch_size`` views; the
    correlation matrix of each batch comes from that batch's cameras.
    """
    expected = (model.config.height, model.config.width, 3)
    if views.rgb.shape[1:] != expected:
        raise ShapeError(
            f"views of shape {views.rgb.shape[1:]} do not match the model's "
            f"{expected}"
        )
    edited: List[np.ndarray] = []
    for indices in batches(views.view_count, config.batch_size):
        cond = make_conditioning(
            model, views.subset(indices), garments, view_ids=indices
        )
        latents = ddim_sample(
            model, cond, config.ddim_steps, config.seed, progress=progress
        )
        for latent in latents:
            image = model.autoencoder.decode(latent).clamp(0.0, 1.0)
            edited.append(image.numpy())
        logger.info("edited views %d-%d", indices[0], indices[-1])
    return edited


def composite_preserve(
    edited: np.ndarray, original: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """``(1 - m) * e + m * o``; an HxW mask applies to every channel."""
    edited = np.asarray(edited, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if edited.shape != original.shape:
        raise ShapeError(
            f"edited {edited.shape} and original {original.shape} differ"
        )
    if mask.ndim == edited.ndim - 1:
        mask = mask[..., None]
    if mask.shape[:2] != edited.shape[:2]:
        raise ShapeError(
            f"mask {mask.shape} does not match image {edited.shape}"
        )
    if mask.min(initial=0.0) < 0 or mask.max(initial=0.0) > 1:
        raise InvalidParameterError("mask values must lie in [0, 1]")
    return (1 - mask) * edited + mask * original


def zscore_filter(losses: Sequence[float], threshold: float) -> List[int]:
    """
    Indices of the views whose loss z-score is at most ``threshold``. At
    least two views are always kept.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or len(losses) < 2:
        raise InvalidParameterError("z-score filtering needs >= 2 views")
    if not np.all(np.isfinite(losses)):
        raise InvalidParameterError("view losses must be finite")
    spread = losses.std()
    if spread == 0:
        return list(range(len(losses)))
    scores = (losses - losses.mean()) / spread
    kept = [i for i, score in enumerate(scores) if not score > threshold]
    if len(kept) < 2:
        logger.warning(
            "z-score filter kept %d views, keeping the two best", len(kept)
        )
        kept = sorted(int(i) for i in np.argsort(losses, kind="stable")[:2])
    discarded = sorted(set(range(len(losses))) - set(kept))
    if discarded:
        logger.info("discarded views %s", discarded)
    return kept


def reconstruct(
    images: Sequence[np.ndarray],
    rig: ViewRig,
    init: GaussianCloud,
    config: PipelineConfig,
    progress: bool = False,
) -> ReconstructionResult:
    """Fit, drop outlier views, then refit from ``init`` on the rest."""
    if len(images) != len(rig):
        raise ShapeError(f"{len(images)} images for {len(rig)} cameras")
    fit = config.fit
    targets = list(zip(images, rig))
    first = fit_cloud(
        targets, init, fit.iters, fit.lr, fit.seed, fit, progress=progress
    )
    kept = zscore_filter(first.view_losses, config.zscore)
    if len(kept) == len(targets):
        return ReconstructionResult(
            first.cloud, kept, first.view_losses, first.view_losses
        )
    second = fit_cloud(
        [targets[i] for i in kept],
        init,
        fit.iters,
        fit.lr,
        fit.seed,
        fit,
        progress=progress,
    )
    return ReconstructionResult(
        second.cloud, kept, first.view_losses, second.view_losses
    )


def batch_seam(
    edited: Sequence[np.ndarray], batch_size: int
) -> Optional[float]:
    """
    Mean squared difference of consecutive views (cyclic) that fall in
    different batches, relative to consecutive views within one batch.
    ``None`` when either kind of pair is missing.
    """
    n = len(edited)
    across, within = [], []
    for i in range(n):
        j = (i + 1) % n
        if i == j:
            continue
        gap = float(np.mean((edited[i] - edited[j]) ** 2))
        if i // batch_size != j // batch_size:
            across.append(gap)
        else:
            within.append(gap)
    if not across or not within or np.mean(within) == 0:
        return None
    return float(np.mean(across) / np.mean(within))


def render_turntable(
    cloud: GaussianCloud, rig: ViewRig, config: PipelineConfig
) -> List[np.ndarray]:
    with torch.no_grad():
        return [
            render(cloud, camera, config.fit.splat).image.clamp(0, 1).numpy()
            for camera in rig
        ]


def evaluate_clouds(
    edited: GaussianCloud,
    original: GaussianCloud,
    garments: GarmentPair,
    config: PipelineConfig,
    provider: Optional[EmbeddingProvider] = None,
) -> Dict[str, float]:
    provider = provider or ToyEmbedder.from_config(config.metrics)
    rig = config.rig(config.metrics.eval_views)
    edited_views = render_turntable(edited, rig, config)
    original_views = render_turntable(original, rig, config)
    report = {"clip_cons": clip_cons(edited_views, original_views, provider)}
    try:
        classes = classify_views(rig, config.metrics.eval_views)
    except InvalidParameterError as e:
        logger.warning("dino_sim skipped: %s", e)
    else:
        report["dino_sim"] = dino_sim(
            garments.front, garments.back, edited_views, classes, provider
        )
    return report


def source_cloud(
    scene: BodyScene, config: PipelineConfig, progress: bool = False
) -> GaussianCloud:
    """
    The subject before editing: Gaussians placed on the body surface, fitted
    to the renders of the uniform test views.
    """
    rig = config.rig(config.test_views)
    views = render_scene(scene, rig, config.synth)
    init = init_cloud_from_scene(
        scene, config.cloud_azimuth, config.cloud_height, config.seed
    )
    fit = config.fit
    result = fit_cloud(
        list(zip(views.rgb, rig)),
        init,
        fit.iters,
        fit.lr,
        fit.seed,
        fit,
        progress=progress,
    )
    logger.info(
        "fitted the source cloud, mean view loss %.3e",
        float(np.mean(result.view_losses)),
    )
    return result.cloud


def edit_scene(
    scene: BodyScene,
    garments: GarmentPair,
    model: ToyDenoiser,
    config: PipelineConfig,
    progress: bool = False,
) -> Tuple[ViewRig, List[np.ndarray]]:
    """Edited uniform views of ``scene`` with face and hair restored."""
    rig = config.rig(config.test_views)
    views = render_scene(scene, rig, config.synth)
    edited = edit_views(model, views, garments, config, progress)
    composited = [
        composite_preserve(e, o, m)
        for e, o, m in zip(edited, views.rgb, views.face_mask)
    ]
    return rig, composited


def run_vton(
    scene: BodyScene,
    garments: GarmentPair,
    model: ToyDenoiser,
    config: PipelineConfig,
    original: Optional[GaussianCloud] = None,
    provider: Optional[EmbeddingProvider] = None,
    progress: bool = False,
) -> EditResult:
    rig, composited = edit_scene(scene, garments, model, config, progress)
    if original is None:
        original = source_cloud(scene, config, progress)
    result = reconstruct(composited, rig, original, config, progress)
    metrics = evaluate_clouds(
        result.cloud, original, garments, config, provider
    )
    kept = [i in result.kept for i in range(len(rig))]
    report = {
        "metrics": metrics,
        "kept": result.kept,
        "discarded": [i for i, keep in enumerate(kept) if not keep],
        "view_losses": result.view_losses,
        "batch_seam": batch_seam(composited, config.batch_size),
    }
    logger.info("try-on metrics %s", metrics)
    return EditResult(composited, kept, result.cloud, report)


# cumulative: each row adds one conditioning module to the previous one
ABLATION_ROWS: Dict[str, Dict[str, bool]] = {
    "2d_vton": dict(
        use_pose=False, use_camera_token=False, use_correlation=False
    ),
    "pseudo_3d_pose": dict(
        use_pose=True, use_camera_token=False, use_correlation=False
    ),
    "camera_token": dict(
        use_pose=True, use_camera_token=True, use_correlation=False
    ),
    "mv_attention": dict(
        use_pose=True, use_camera_token=True, use_correlation=True
    ),
}


def ablation_experiment(
    train_items: Sequence,
    test_items: Sequence,
    config: PipelineConfig,
    rows: Optional[Sequence[str]] = None,
    progress: bool = False,
) -> Dict[str, float]:
    """
    Train one denoiser per ablation row and score the mean consistency of
    its reconstructed try-on turntables. ``improvement`` is the gain of the
    full model over the same model with the identity correlation matrix.
    """
    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    unknown = sorted(set(rows) - set(ABLATION_ROWS))
    if unknown:
        raise InvalidParameterError(f"unknown ablation rows {unknown}")
    originals = [source_cloud(item.scene, config) for item in test_items]
    scores: Dict[str, float] = {}
    for name in rows:
        model = ToyDenoiser(replace(config.denoiser, **ABLATION_ROWS[name]))
        train_two_stage(model, train_items, config.train, progress=progress)
        values = [
            run_vton(
                item.scene, item.target_garments, model, config, original
            ).report["metrics"]["clip_cons"]
            for item, original in zip(test_items, originals)
        ]
        scores[name] = float(np.mean(values))
        logger.info("%s: mean clip_cons %.6f", name, scores[name])
    if "mv_attention" in scores and "camera_token" in scores:
        scores["improvement"] = scores["mv_attention"] - scores["camera_token"]
    return scores

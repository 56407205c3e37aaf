"""
Command-line entry points: ``mvtryon synth|train|edit|reconstruct|eval|
turntable``. Every subcommand accepts ``--config PATH`` (a flat JSON object)
and one flag per config key; flags override the file.
"""
import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from ._reader import read_json, read_pfm, read_rig
from ._writer import write_json, write_pfm, write_ppm, write_rig
from .camera import CameraConfig
from .diffusion import (
    DenoiserConfig,
    ToyDenoiser,
    TrainConfig,
    load_denoiser,
    save_checkpoint,
    train_two_stage,
)
from .exceptions import ConfigError, MvTryOnError
from .metrics import MetricsConfig, ToyEmbedder, load_embeddings
from .pipeline import (
    PipelineConfig,
    batch_seam,
    edit_scene,
    evaluate_clouds,
    reconstruct,
    render_turntable,
    source_cloud,
)
from .splat import FitConfig, load_cloud, save_cloud
from .synthdata import (
    SynthConfig,
    TryOnItem,
    load_dataset,
    load_subject,
    make_dataset,
    subject_dirs,
    write_dataset,
)

logger = logging.getLogger(__name__)


def _key(default, description: str):
    return field(default=default, metadata={"help": description})


@dataclass
class CliConfig:
    dataset: str = _key("dataset", "dataset directory")
    checkpoint: str = _key("checkpoint.mvtk", "denoiser checkpoint file")
    out: str = _key("out", "output directory")
    cloud: str = _key("", "edited cloud file (default OUT/cloud.gspl)")
    original: str = _key(
        "", "original cloud file (default OUT/original.gspl)"
    )
    embeddings: str = _key(
        "", "precomputed embeddings file; empty uses the toy embedder"
    )
    seed: int = _key(0, "global seed")
    subjects: int = _key(2, "subjects to synthesize")
    views: int = _key(8, "views per synthesized subject")
    subject: int = _key(0, "dataset subject to edit")
    width: int = _key(64, "image width in pixels")
    height: int = _key(96, "image height in pixels")
    focal: float = _key(100.0, "focal length in pixels")
    radius: float = _key(2.5, "camera orbit radius")
    elevation: float = _key(0.0, "camera elevation in radians")
    patch: int = _key(8, "autoencoder patch size")
    hidden: int = _key(32, "denoiser hidden width")
    blocks: int = _key(2, "denoiser blocks")
    use_correlation: bool = _key(
        True, "use rotation correlations in multi-view attention"
    )
    use_pose: bool = _key(True, "condition on the encoded normal maps")
    use_camera_token: bool = _key(
        True, "append the camera token to the cross-attention keys"
    )
    stage1_steps: int = _key(100, "single-view training steps")
    stage2_steps: int = _key(100, "multi-view training steps")
    lr: float = _key(1e-3, "training learning rate")
    train_views: int = _key(8, "views per multi-view training example")
    resume: bool = _key(False, "resume training from --checkpoint")
    test_views: int = _key(32, "uniform views edited per subject")
    batch_size: int = _key(16, "views denoised jointly")
    ddim_steps: int = _key(20, "DDIM sampling steps")
    zscore: float = _key(1.5, "z-score threshold for discarding views")
    fit_iters: int = _key(300, "cloud fitting iterations")
    fit_lr: float = _key(0.01, "cloud fitting learning rate")
    eval_views: int = _key(120, "turntable views rendered for metrics")
    frames: int = _key(120, "turntable frames to export")

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            kind = type(f.default)
            if kind is float and type(value) is int:
                value = float(value)
                setattr(self, f.name, value)
            if type(value) is not kind:
                raise ConfigError(
                    f"config key {f.name!r} must be {kind.__name__}, got "
                    f"{value!r}"
                )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cloud_path(self) -> Path:
        return Path(self.cloud) if self.cloud else self.out_dir / "cloud.gspl"

    @property
    def original_path(self) -> Path:
        if self.original:
            return Path(self.original)
        return self.out_dir / "original.gspl"

    @property
    def edit_dir(self) -> Path:
        return self.out_dir / "edit"

    def pipeline_config(self) -> PipelineConfig:
        try:
            synth = SynthConfig(
                camera=CameraConfig(
                    self.width,
                    self.height,
                    self.focal,
                    self.radius,
                    self.elevation,
                )
            )
            return PipelineConfig(
                test_views=self.test_views,
                batch_size=self.batch_size,
                ddim_steps=self.ddim_steps,
                zscore=self.zscore,
                seed=self.seed,
                synth=synth,
                denoiser=DenoiserConfig(
                    width=self.width,
                    height=self.height,
                    patch=self.patch,
                    hidden=self.hidden,
                    blocks=self.blocks,
                    use_correlation=self.use_correlation,
                    use_pose=self.use_pose,
                    use_camera_token=self.use_camera_token,
                    seed=self.seed,
                ),
                train=TrainConfig(
                    stage1_steps=self.stage1_steps,
                    stage2_steps=self.stage2_steps,
                    lr=self.lr,
                    train_views=self.train_views,
                    seed=self.seed,
                ),
                fit=FitConfig(
                    iters=self.fit_iters, lr=self.fit_lr, seed=self.seed
                ),
                metrics=MetricsConfig(eval_views=self.eval_views),
            )
        except MvTryOnError as e:
            raise ConfigError(str(e)) from e


def load_config(
    path: Optional[str], overrides: Dict[str, Any]
) -> CliConfig:
    """File values first, then every override that is not ``None``."""
    values: Dict[str, Any] = {}
    if path:
        try:
            document = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"config {path} is not a JSON object")
        values.update(document)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(CliConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return CliConfig(**values)


def _boolean(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _selected(config: CliConfig) -> TryOnItem:
    directories = subject_dirs(config.dataset)
    if not directories:
        raise FileNotFoundError(f"no subjects in {config.dataset}")
    if not 0 <= config.subject < len(directories):
        raise ConfigError(
            f"subject {config.subject} not in a dataset of "
            f"{len(directories)} subjects"
        )
    return load_subject(directories[config.subject])


def _require(*paths: Path):
    for path in paths:
        if not Path(path).exists():
            raise FileNotFoundError(f"{path} does not exist")


def write_loss_trace(path: Path, losses: Sequence[float], start: int = 0):
    lines = [f"{start + i} {loss!r}" for i, loss in enumerate(losses)]
    path.write_text("".join(line + "\n" for line in lines))


def read_loss_trace(path: Path) -> List[float]:
    if not path.exists():
        return []
    return [float(line.split()[1]) for line in path.read_text().splitlines()]


def plot_losses(path: Path, losses: Sequence[float]):
    figure = Figure(figsize=(4, 3))
    FigureCanvasAgg(figure)
    axes = figure.add_subplot(111)
    axes.plot(range(len(losses)), losses)
    axes.set_xlabel("step")
    axes.set_ylabel("loss")
    axes.set_yscale("log" if losses and min(losses) > 0 else "linear")
    figure.tight_layout()
    figure.savefig(path, format="png", metadata={"Software": None})


def cmd_synth(config: CliConfig, progress: bool = False):
    """Synthesize a garment-swap dataset."""
    pipeline = config.pipeline_config()
    items = make_dataset(
        config.subjects, config.views, config.seed, pipeline.synth
    )
    written = write_dataset(
        items, config.dataset, pipeline.synth, config.to_dict()
    )
    print(
        f"wrote {len(written)} subjects with {config.views} views each to "
        f"{config.dataset}"
    )


def cmd_train(config: CliConfig, progress: bool = False):
    """Two-stage training of the denoiser."""
    pipeline = config.pipeline_config()
    dataset = load_dataset(config.dataset)
    checkpoint_path = Path(config.checkpoint)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = config.out_dir / "loss_trace.txt"

    start, state, previous = 0, None, []
    if config.resume and checkpoint_path.exists():
        model, checkpoint = load_denoiser(checkpoint_path)
        start = checkpoint.step
        state = checkpoint.optimizer_state(model)
        previous = read_loss_trace(trace_path)[:start]
        logger.info("resuming from step %d", start)
    else:
        model = ToyDenoiser(pipeline.denoiser)

    result = train_two_stage(
        model,
        dataset,
        pipeline.train,
        start_step=start,
        optimizer_state=state,
        progress=progress,
    )
    losses = previous + result.losses
    checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(
        checkpoint_path,
        model,
        result.step,
        result.optimizer_state,
        config.to_dict(),
    )
    write_loss_trace(trace_path, losses)
    plot_losses(config.out_dir / "loss.png", losses)
    logger.info("trained to step %d", result.step)


def cmd_edit(config: CliConfig, progress: bool = False):
    """Edit uniform views of one subject into the target garment."""
    pipeline = config.pipeline_config()
    _require(config.checkpoint)
    item = _selected(config)
    model, _ = load_denoiser(config.checkpoint)
    rig, edited = edit_scene(
        item.scene, item.target_garments, model, pipeline, progress
    )
    directory = config.edit_dir
    directory.mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(edited):
        write_pfm(directory / f"view_{i:03d}.pfm", image)
        write_ppm(directory / f"view_{i:03d}.ppm", image)
    write_rig(directory / "rig.json", rig)
    write_json(
        directory / "edit.json",
        {
            "subject": item.subject,
            "views": len(edited),
            "batch_size": pipeline.batch_size,
            "batch_seam": batch_seam(edited, pipeline.batch_size),
            "config": config.to_dict(),
        },
    )
    logger.info("wrote %d edited views to %s", len(edited), directory)


def cmd_reconstruct(config: CliConfig, progress: bool = False):
    """Fit a Gaussian cloud to the edited views."""
    pipeline = config.pipeline_config()
    directory = config.edit_dir
    _require(directory / "rig.json")
    item = _selected(config)
    rig = read_rig(directory / "rig.json")
    images = [read_pfm(path) for path in sorted(directory.glob("view_*.pfm"))]
    original = source_cloud(item.scene, pipeline, progress)
    result = reconstruct(images, rig, original, pipeline, progress)
    config.cloud_path.parent.mkdir(parents=True, exist_ok=True)
    config.original_path.parent.mkdir(parents=True, exist_ok=True)
    save_cloud(config.cloud_path, result.cloud)
    save_cloud(config.original_path, original)
    write_json(
        config.out_dir / "reconstruct.json",
        {
            "kept": result.kept,
            "discarded": sorted(set(range(len(rig))) - set(result.kept)),
            "view_losses": result.view_losses,
            "final_losses": result.final_losses,
            "config": config.to_dict(),
        },
    )
    logger.info(
        "wrote %d Gaussians to %s", result.cloud.count, config.cloud_path
    )


def cmd_eval(config: CliConfig, progress: bool = False):
    """Turntable metrics of the edited cloud against the original."""
    pipeline = config.pipeline_config()
    _require(config.cloud_path, config.original_path)
    item = _selected(config)
    if config.embeddings:
        provider = load_embeddings(config.embeddings)
    else:
        provider = ToyEmbedder.from_config(pipeline.metrics)
    metrics = evaluate_clouds(
        load_cloud(config.cloud_path),
        load_cloud(config.original_path),
        item.target_garments,
        pipeline,
        provider,
    )
    report: Dict[str, Any] = {
        "metrics": metrics,
        "subject": item.subject,
        "eval_views": pipeline.metrics.eval_views,
        "config": config.to_dict(),
    }
    reconstruction = config.out_dir / "reconstruct.json"
    if reconstruction.exists():
        document = read_json(reconstruction)
        report["kept"] = document["kept"]
        report["discarded"] = document["discarded"]
    config.out_dir.mkdir(parents=True, exist_ok=True)
    write_json(config.out_dir / "report.json", report)
    logger.info("wrote report %s", metrics)


def cmd_turntable(config: CliConfig, progress: bool = False):
    """Export turntable frames of the edited cloud."""
    pipeline = config.pipeline_config()
    _require(config.cloud_path)
    if config.frames < 1:
        raise ConfigError(f"frames must be >= 1, got {config.frames}")
    rig = pipeline.rig(config.frames)
    frames = render_turntable(load_cloud(config.cloud_path), rig, pipeline)
    directory = config.out_dir / "turntable"
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_ppm(directory / f"frame_{i:03d}.ppm", frame)
    write_rig(directory / "rig.json", rig)
    logger.info("wrote %d frames to %s", len(frames), directory)


COMMANDS: Dict[str, Callable[[CliConfig, bool], None]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "edit": cmd_edit,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "turntable": cmd_turntable,
}


def _config_arguments() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="flat JSON config file")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging"
    )
    parser.add_argument(
        "--progress", action="store_true", help="show progress bars"
    )
    keys = parser.add_argument_group("config keys")
    for f in fields(CliConfig):
        kind = type(f.default)
        keys.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f.name,
            type=_boolean if kind is bool else kind,
            default=None,
            metavar=kind.__name__.upper(),
            help=f"{f.metadata['help']} (default: {f.default!r})",
        )
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvtryon", description="Multi-view virtual try-on"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _config_arguments()
    for name, command in COMMANDS.items():
        subparsers.add_parser(
            name,
            parents=[common],
            help=command.__doc__,
            description=command.__doc__,
        )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {f.name: getattr(args, f.name) for f in fields(CliConfig)}
    try:
        config = load_config(args.config, overrides)
        COMMANDS[args.command](config, args.progress)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return 2
    except Exception as e:
        logger.error("%s failed: %s", args.command, e)
        logger.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

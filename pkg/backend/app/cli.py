"""cli.py

Command-line surface. Each subcommand reads JSON configs and manifests from
flags, writes models/reports into an output directory and prints its result
as JSON on stdout. Diagnostics go to stderr.
"""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Annotated

import typer

from app.config import settings
from app.dependencies import get_default_config, get_feature_service
from app.services.audio_service import load_manifest, read_wav
from app.services.detection_service import (
    detect,
    export_cvmd_csv,
    load_detection_model,
    predict_cvmd,
    save_detection_model,
)
from app.services.experiment_service import (
    ExperimentConfig,
    cross_validate,
    export_histograms,
    load_experiment_config,
    load_report,
    train_detector_from_manifest,
    train_speed_from_manifest,
    write_report,
)
from app.services.feature_service import FeatureService, export_feature_csv
from app.services.speed_service import load_speed_model, predict_speed, save_speed_model
from app.services.synth_service import (
    SynthDatasetSpec,
    benchmark_dataset_spec,
    synth_dataset,
)

logger = logging.getLogger(__name__)

app = typer.Typer(
    help="Vehicle pass-by detection and speed estimation from roadside audio.",
    no_args_is_help=True,
    add_completion=False,
)


class Representation(str, Enum):
    MS = "MS"
    LMS = "LMS"
    MFCC = "MFCC"


ManifestOption = Annotated[
    Path,
    typer.Option("--manifest", exists=True, dir_okay=False, help="Manifest CSV."),
]
ConfigOption = Annotated[
    Path | None,
    typer.Option("--config", exists=True, dir_okay=False, help="Experiment config JSON."),
]
WavOption = Annotated[
    Path, typer.Option("--wav", exists=True, dir_okay=False, help="Input WAV file.")
]
OutOption = Annotated[Path, typer.Option("--out", help="Output directory.")]


def _emit(payload: dict) -> None:
    typer.echo(json.dumps(payload, sort_keys=True))


def _config(path: Path | None) -> ExperimentConfig:
    return load_experiment_config(path) if path else get_default_config()


def _feature_service(config: ExperimentConfig) -> FeatureService:
    if config.features == get_default_config().features:
        return get_feature_service()
    return FeatureService(config.features)


@app.callback()
def main_callback(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging.")] = False,
):
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


@app.command()
def synth(
    spec: Annotated[
        Path | None,
        typer.Option("--spec", exists=True, dir_okay=False, help="SynthDatasetSpec JSON."),
    ] = None,
    out: Annotated[Path | None, typer.Option("--out", help="Dataset directory.")] = None,
    benchmark: Annotated[
        bool, typer.Option("--benchmark", help="10 vehicles x 30 clips + 71 noise clips.")
    ] = False,
    seed: Annotated[int | None, typer.Option("--seed", help="Master seed.")] = None,
):
    """Generate a synthetic pass-by dataset and its manifest."""
    if spec is not None:
        dataset_spec = SynthDatasetSpec.model_validate_json(spec.read_text(encoding="utf-8"))
        if out is not None:
            dataset_spec = dataset_spec.model_copy(update={"output_dir": out})
        if seed is not None:
            dataset_spec = dataset_spec.model_copy(update={"master_seed": seed})
    elif benchmark:
        if out is None:
            raise typer.BadParameter("--out is required with --benchmark", param_hint="--out")
        dataset_spec = benchmark_dataset_spec(
            out, settings.MASTER_SEED if seed is None else seed
        )
    else:
        raise typer.BadParameter("pass --spec or --benchmark", param_hint="--spec")

    manifest = synth_dataset(dataset_spec)
    _emit(
        {
            "manifest": str(Path(dataset_spec.output_dir) / "manifest.csv"),
            "vehicle_clips": len(manifest.vehicle_entries),
            "noise_clips": len(manifest.noise_entries),
        }
    )


@app.command()
def features(wav: WavOption, out: OutOption, config: ConfigOption = None):
    """Write the MS, LMS and MFCC matrices of a clip as CSV."""
    feature_set = _feature_service(_config(config)).compute(read_wav(wav))
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for kind in ("MS", "LMS", "MFCC"):
        fm = feature_set.get(kind)
        export_feature_csv(fm, out / f"{wav.stem}_{kind.lower()}.csv")
        shapes[kind] = list(fm.values.shape)
    _emit({"frame_period_s": feature_set.lms.frame_period_s, "shapes": shapes})


@app.command("train-detector")
def train_detector_command(
    manifest: ManifestOption, out: OutOption, config: ConfigOption = None
):
    """Train the two-stage CVMD detector on every clip of a manifest."""
    cfg = _config(config)
    model = train_detector_from_manifest(load_manifest(manifest), cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "detector.json"
    save_detection_model(model, path)
    _emit({"model": str(path), "presence_threshold": model.presence_threshold})


@app.command("detect")
def detect_command(
    model: Annotated[
        Path, typer.Option("--model", exists=True, dir_okay=False, help="Detector JSON.")
    ],
    wav: WavOption,
    threshold: Annotated[
        float | None, typer.Option("--threshold", help="Override the presence threshold.")
    ] = None,
    one_stage: Annotated[
        bool, typer.Option("--one-stage", help="Skip the stage-2 refinement.")
    ] = False,
    curve: Annotated[
        Path | None, typer.Option("--curve", help="Also write the CVMD curve CSV.")
    ] = None,
):
    """Estimate the CPA time of a clip and decide whether a vehicle passed."""
    detector = load_detection_model(model)
    lms = FeatureService(detector.features).compute_lms(read_wav(wav))
    use_stage2 = False if one_stage else None
    result = detect(detector, lms, threshold=threshold, use_stage2=use_stage2)
    if curve is not None:
        export_cvmd_csv(predict_cvmd(detector, lms, use_stage2=use_stage2), curve)
    _emit(result.model_dump())


@app.command("train-speed")
def train_speed_command(
    manifest: ManifestOption,
    out: OutOption,
    representation: Annotated[
        Representation, typer.Option("--representation", help="Feature representation.")
    ] = Representation.MS,
    config: ConfigOption = None,
):
    """Train the SVR speed model at the annotated CPA of every vehicle clip."""
    cfg = _config(config)
    model = train_speed_from_manifest(load_manifest(manifest), cfg, representation.value)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"speed_{representation.value}.json"
    save_speed_model(model, path)
    _emit(
        {
            "model": str(path),
            "representation": representation.value,
            "support_vectors": len(model.svr.support_indices),
            "converged": model.svr.converged,
        }
    )


@app.command()
def estimate(
    detector: Annotated[
        Path, typer.Option("--detector", exists=True, dir_okay=False, help="Detector JSON.")
    ],
    speed_model: Annotated[
        Path,
        typer.Option("--speed-model", exists=True, dir_okay=False, help="Speed model JSON."),
    ],
    wav: WavOption,
    force: Annotated[
        bool, typer.Option("--force", help="Estimate speed even if no vehicle is detected.")
    ] = False,
):
    """Detect the CPA of a clip and estimate the vehicle speed there."""
    detection_model = load_detection_model(detector)
    model = load_speed_model(speed_model)
    clip = read_wav(wav)
    detection_features = FeatureService(detection_model.features).compute(clip)
    speed_features = (
        detection_features
        if model.features == detection_model.features
        else FeatureService(model.features).compute(clip)
    )
    result = detect(detection_model, detection_features.lms)
    payload = {**result.model_dump(), "speed_kmh": None, "class_index": None}
    if result.vehicle_present or force:
        speed = predict_speed(
            model,
            speed_features.get(model.spec.representation),
            result,
            require_presence=not force,
        )
        payload.update(speed.model_dump())
    _emit(payload)


@app.command("cross-validate")
def cross_validate_command(
    manifest: ManifestOption,
    config: ConfigOption = None,
    out: OutOption = Path(settings.OUTPUT_DIR),
    iterations: Annotated[
        int | None, typer.Option("--iterations", min=1, help="Override the iteration count.")
    ] = None,
):
    """Leave-one-vehicle-out cross-validation with report, tables and histograms."""
    cfg = _config(config)
    if iterations is not None:
        cfg = cfg.model_copy(update={"iterations": iterations})
    report = cross_validate(load_manifest(manifest), cfg)
    written = write_report(report, out) + export_histograms(report, out)
    _emit({"files": [str(p) for p in written], "summary": report.summary.model_dump()})


@app.command()
def report(
    report_path: Annotated[
        Path, typer.Option("--report", exists=True, dir_okay=False, help="report.json.")
    ],
    out: Annotated[Path | None, typer.Option("--out", help="Output directory.")] = None,
):
    """Re-export tables and histograms of a saved report."""
    loaded = load_report(report_path)
    target = out or report_path.parent
    written = write_report(loaded, target) + export_histograms(loaded, target)
    _emit({"files": [str(p) for p in written], "summary": loaded.summary.model_dump()})


def run_cli(argv: list[str] | None = None) -> int:
    """Run one subcommand and return its exit code instead of exiting.

    Usage errors exit with 2, data/configuration and I/O errors with 1.
    """
    command = typer.main.get_command(app)
    try:
        # Standalone mode: the command reports usage errors itself and always exits.
        command.main(args=argv, prog_name="passby", standalone_mode=True)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0
    except (ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        typer.echo(f"Error: {e}", err=True)
        return 1
    return 0

"""services/experiment_service.py

This module runs the leave-one-vehicle-out protocol: per iteration and fold
it trains a detector and one speed model per representation on the other
vehicles, evaluates the held-out vehicle and a share of the noise clips,
and collects raw per-clip records from which every report table is derived.
All randomness comes from seeds derived from the master seed.
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import settings
from app.exceptions import ConfigurationError, PreconditionError
from app.schemas import ClipAnnotation, FeatureKind, FeatureMatrix, Manifest, ManifestEntry
from app.seeding import derive_rng, derive_seed
from app.services.audio_service import read_wav, resolve_clip_path, validate_protocol_clip
from app.services.detection_service import (
    DetectionModel,
    DetectorConfig,
    calibrate_presence_threshold,
    detect,
    train_detector,
)
from app.services.feature_service import FeatureConfig, FeatureService, FeatureSet
from app.services.representation_factory import RepresentationFactory
from app.services.speed_service import (
    SpeedFeatureSpec,
    SpeedModel,
    SpeedRecord,
    per_vehicle_tables,
    predict_speed,
    speed_class,
    train_speed_model,
)
from app.services.svr_service import SvrConfig

logger = logging.getLogger(__name__)

EPSILON_NOTE = "SVR C and epsilon apply to standardized speed targets"


# ---------- Configuration ------------------
class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = settings.CONFIG_SCHEMA_VERSION
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    svr: SvrConfig = Field(default_factory=SvrConfig)
    speed_specs: dict[str, SpeedFeatureSpec] = Field(
        default_factory=lambda: RepresentationFactory().default_specs()
    )
    representations: list[FeatureKind] = Field(
        default_factory=lambda: ["MS", "LMS", "MFCC"], min_length=1
    )
    iterations: int = Field(default=10, ge=1)
    validation_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    noise_test_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    master_seed: int = settings.MASTER_SEED
    expected_duration_s: float | None = 10.0
    expected_sample_rate: int | None = 44100
    run_ablation: bool = True  # also evaluate the one-stage detector

    @model_validator(mode="after")
    def validate_config(self) -> "ExperimentConfig":
        if self.schema_version != settings.CONFIG_SCHEMA_VERSION:
            raise ValueError(
                f"Config schema version {self.schema_version} is not supported "
                f"(expected {settings.CONFIG_SCHEMA_VERSION})"
            )
        for rep in self.representations:
            spec = self.speed_specs.get(rep)
            if spec is None:
                raise ValueError(f"No speed feature spec for representation {rep}")
            if spec.representation != rep:
                raise ValueError(
                    f"speed_specs['{rep}'] describes {spec.representation} features"
                )
        return self


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ---------- Records ------------------
class DetectionRecord(BaseModel):
    iteration: int
    fold: str
    path: str
    vehicle_id: str
    has_vehicle: bool
    t_cpa_s: float | None
    t_cpa_hat: float
    offset_s: float | None  # t_cpa_hat - t_cpa_s
    min_cvmd: float
    vehicle_present: bool
    one_stage_t_cpa_hat: float | None = None
    one_stage_offset_s: float | None = None
    one_stage_min_cvmd: float | None = None


class FoldRecord(BaseModel):
    iteration: int
    fold: str
    seeds: dict[str, int]
    n_train: int
    n_validation: int
    n_test: int
    n_noise_train: int
    n_noise_validation: int
    n_noise_test: int
    training_fingerprint: str  # sha256 over sorted training + validation paths
    presence_threshold: float
    validation_gap: float | None
    test_gap: float | None  # min(noise minima) - max(vehicle minima) on test clips
    svr_converged: dict[str, bool]


class ExperimentSummary(BaseModel):
    frame_period_s: float
    n_vehicle_tests: int
    n_noise_tests: int
    offset_mean_s: float
    offset_std_s: float
    one_stage_offset_mean_s: float | None
    one_stage_offset_std_s: float | None
    detection_rate: float
    false_alarm_rate: float | None
    n_folds: int
    folds_with_positive_gap: int
    rmse_average: dict[str, float]
    accuracy_exact_average: dict[str, float]
    accuracy_within1_average: dict[str, float]


class ExperimentReport(BaseModel):
    config: ExperimentConfig
    epsilon_note: str = EPSILON_NOTE
    folds: list[FoldRecord]
    detections: list[DetectionRecord]
    speeds: list[SpeedRecord]
    summary: ExperimentSummary
    rmse_table: list[dict]
    accuracy_table: list[dict]


# ---------- Data ------------------
def load_feature_sets(
    manifest: Manifest, cfg: ExperimentConfig, service: FeatureService | None = None
) -> dict[str, FeatureSet]:
    """Read every manifest clip once and compute its MS/LMS/MFCC."""
    service = service or FeatureService(cfg.features)
    feature_sets = {}
    for entry in manifest.entries:
        clip = read_wav(resolve_clip_path(manifest, entry))
        validate_protocol_clip(
            clip, entry.annotation, cfg.expected_duration_s, cfg.expected_sample_rate
        )
        feature_sets[entry.path] = service.compute(clip)
    logger.info(f"Computed features for {len(feature_sets)} clips")
    return feature_sets


def split_train_validation(
    entries: list[ManifestEntry], fraction: float, seed: int
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Seeded split of entries (ordered by path) into train and validation.

    Both sides are non-empty whenever there are at least two entries.
    """
    if len(entries) < 2:
        raise PreconditionError(
            f"Need at least 2 clips to split into train/validation, got {len(entries)}"
        )
    ordered = sorted(entries, key=lambda e: e.path)
    order = np.random.default_rng(seed).permutation(len(ordered))
    n_val = min(max(1, int(round(fraction * len(ordered)))), len(ordered) - 1)
    val = [ordered[i] for i in sorted(order[:n_val])]
    train = [ordered[i] for i in sorted(order[n_val:])]
    return train, val


def split_noise(
    noise_entries: list[ManifestEntry], test_fraction: float, master_seed: int, iteration: int
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Per-iteration (train, test) split of the no-vehicle clips."""
    ordered = sorted(noise_entries, key=lambda e: e.path)
    if len(ordered) < 2:
        return ordered, []
    order = derive_rng(master_seed, iteration, "noise-split").permutation(len(ordered))
    n_test = min(max(1, int(test_fraction * len(ordered))), len(ordered) - 1)
    test = [ordered[i] for i in sorted(order[:n_test])]
    train = [ordered[i] for i in sorted(order[n_test:])]
    return train, test


def training_fingerprint(paths: list[str]) -> str:
    return hashlib.sha256("\n".join(sorted(paths)).encode("utf-8")).hexdigest()


def _items(
    entries: list[ManifestEntry], feature_sets: dict[str, FeatureSet], kind: FeatureKind
) -> list[tuple[FeatureMatrix, ClipAnnotation]]:
    return [(feature_sets[e.path].get(kind), e.annotation) for e in entries]


def _with_seeds(cfg: DetectorConfig, stage1_seed: int, stage2_seed: int) -> DetectorConfig:
    return cfg.model_copy(
        update={
            "stage1_train": cfg.stage1_train.model_copy(update={"seed": stage1_seed}),
            "stage2_train": cfg.stage2_train.model_copy(update={"seed": stage2_seed}),
        }
    )


def _gap(vehicle_minima: list[float], noise_minima: list[float]) -> float | None:
    if not vehicle_minima or not noise_minima:
        return None
    return float(min(noise_minima) - max(vehicle_minima))


# ---------- Training on a whole manifest ------------------
def fit_detector(
    vehicle_train: list[ManifestEntry],
    vehicle_val: list[ManifestEntry],
    noise_train: list[ManifestEntry],
    noise_val: list[ManifestEntry],
    feature_sets: dict[str, FeatureSet],
    cfg: ExperimentConfig,
    detector_cfg: DetectorConfig | None = None,
) -> tuple[DetectionModel, float | None]:
    """Train a detector and calibrate its presence threshold on the validation clips.

    Returns:
        tuple[DetectionModel, float | None]: The model (threshold set) and the
            validation gap, or None when no validation noise clips exist.
    """
    detector_cfg = detector_cfg or cfg.detector
    model = train_detector(
        _items(vehicle_train + noise_train, feature_sets, "LMS"),
        _items(vehicle_val + noise_val, feature_sets, "LMS"),
        detector_cfg,
        cfg.features,
    )
    vehicle_minima = [
        detect(model, feature_sets[e.path].lms).min_cvmd for e in vehicle_val
    ]
    noise_minima = [detect(model, feature_sets[e.path].lms).min_cvmd for e in noise_val]
    if noise_minima:
        calibrated = calibrate_presence_threshold(vehicle_minima, noise_minima)
        threshold, gap = calibrated.threshold, calibrated.gap
    else:
        logger.warning("No validation noise clips; presence threshold falls back to T_D")
        threshold, gap = detector_cfg.cvmd.t_d, None
    return model.model_copy(update={"presence_threshold": threshold}), gap


def train_detector_from_manifest(
    manifest: Manifest,
    cfg: ExperimentConfig,
    feature_sets: dict[str, FeatureSet] | None = None,
) -> DetectionModel:
    """Train on every manifest clip with a seeded train/validation split."""
    feature_sets = feature_sets or load_feature_sets(manifest, cfg)
    vehicle_train, vehicle_val = split_train_validation(
        manifest.vehicle_entries,
        cfg.validation_fraction,
        derive_seed(cfg.master_seed, "manifest", "split"),
    )
    noise = manifest.noise_entries
    if len(noise) >= 2:
        noise_train, noise_val = split_train_validation(
            noise, cfg.validation_fraction, derive_seed(cfg.master_seed, "manifest", "noise")
        )
    else:
        noise_train, noise_val = noise, []
    detector_cfg = _with_seeds(
        cfg.detector,
        derive_seed(cfg.master_seed, "manifest", "stage1"),
        derive_seed(cfg.master_seed, "manifest", "stage2"),
    )
    model, _ = fit_detector(
        vehicle_train, vehicle_val, noise_train, noise_val, feature_sets, cfg, detector_cfg
    )
    return model


def train_speed_from_manifest(
    manifest: Manifest,
    cfg: ExperimentConfig,
    representation: FeatureKind,
    feature_sets: dict[str, FeatureSet] | None = None,
) -> SpeedModel:
    if representation not in cfg.speed_specs:
        raise ConfigurationError(f"No speed feature spec for {representation}")
    feature_sets = feature_sets or load_feature_sets(manifest, cfg)
    return train_speed_model(
        _items(manifest.vehicle_entries, feature_sets, representation),
        cfg.speed_specs[representation],
        cfg.svr,
        cfg.features,
    )


# ---------- Cross-validation ------------------
def run_fold(
    manifest: Manifest,
    feature_sets: dict[str, FeatureSet],
    cfg: ExperimentConfig,
    iteration: int,
    fold: str,
    noise_train: list[ManifestEntry],
    noise_test: list[ManifestEntry],
) -> tuple[FoldRecord, list[DetectionRecord], list[SpeedRecord]]:
    """Train on every vehicle except `fold` and evaluate the held-out vehicle.

    Raises:
        ConfigurationError: If the fold has no test clips.
    """
    test = sorted(
        (e for e in manifest.vehicle_entries if e.annotation.vehicle_id == fold),
        key=lambda e: e.path,
    )
    if not test:
        raise ConfigurationError(f"Fold '{fold}' has no test clips")
    pool = [e for e in manifest.vehicle_entries if e.annotation.vehicle_id != fold]

    seeds = {
        purpose: derive_seed(cfg.master_seed, iteration, fold, purpose)
        for purpose in ("split", "noise-validation", "stage1", "stage2")
    }
    train, val = split_train_validation(pool, cfg.validation_fraction, seeds["split"])
    if len(noise_train) >= 2:
        noise_fit, noise_val = split_train_validation(
            noise_train, cfg.validation_fraction, seeds["noise-validation"]
        )
    else:
        noise_fit, noise_val = list(noise_train), []

    detector_cfg = _with_seeds(cfg.detector, seeds["stage1"], seeds["stage2"])
    model, validation_gap = fit_detector(
        train, val, noise_fit, noise_val, feature_sets, cfg, detector_cfg
    )
    speed_models = {
        rep: train_speed_model(
            _items(train, feature_sets, rep), cfg.speed_specs[rep], cfg.svr, cfg.features
        )
        for rep in cfg.representations
    }

    detections, speeds = [], []
    for entry in [*test, *noise_test]:
        fs = feature_sets[entry.path]
        annotation = entry.annotation
        result = detect(model, fs.lms)
        record = DetectionRecord(
            iteration=iteration,
            fold=fold,
            path=entry.path,
            vehicle_id=annotation.vehicle_id,
            has_vehicle=annotation.has_vehicle,
            t_cpa_s=annotation.t_cpa_s,
            t_cpa_hat=result.t_cpa_hat,
            offset_s=(
                result.t_cpa_hat - annotation.t_cpa_s if annotation.has_vehicle else None
            ),
            min_cvmd=result.min_cvmd,
            vehicle_present=result.vehicle_present,
        )
        if cfg.run_ablation:
            one_stage = detect(model, fs.lms, use_stage2=False)
            record.one_stage_t_cpa_hat = one_stage.t_cpa_hat
            record.one_stage_min_cvmd = one_stage.min_cvmd
            if annotation.has_vehicle:
                record.one_stage_offset_s = one_stage.t_cpa_hat - annotation.t_cpa_s
        detections.append(record)

        if not annotation.has_vehicle:
            continue
        for rep, speed_model in speed_models.items():
            estimate = predict_speed(speed_model, fs.get(rep), result, require_presence=False)
            speeds.append(
                SpeedRecord(
                    iteration=iteration,
                    fold=fold,
                    path=entry.path,
                    vehicle_id=annotation.vehicle_id,
                    representation=rep,
                    true_kmh=annotation.speed_kmh,
                    estimated_kmh=estimate.speed_kmh,
                    true_class=speed_class(annotation.speed_kmh),
                    estimated_class=estimate.class_index,
                )
            )

    fold_record = FoldRecord(
        iteration=iteration,
        fold=fold,
        seeds=seeds,
        n_train=len(train),
        n_validation=len(val),
        n_test=len(test),
        n_noise_train=len(noise_fit),
        n_noise_validation=len(noise_val),
        n_noise_test=len(noise_test),
        training_fingerprint=training_fingerprint(
            [e.path for e in [*train, *val, *noise_fit, *noise_val]]
        ),
        presence_threshold=model.presence_threshold,
        validation_gap=validation_gap,
        test_gap=_gap(
            [d.min_cvmd for d in detections if d.has_vehicle],
            [d.min_cvmd for d in detections if not d.has_vehicle],
        ),
        svr_converged={rep: m.svr.converged for rep, m in speed_models.items()},
    )
    logger.info(
        f"Iteration {iteration} fold {fold}: {len(test)} test clips, "
        f"threshold {model.presence_threshold:.4f} s, test gap {fold_record.test_gap}"
    )
    return fold_record, detections, speeds


def _mean_std(values: list[float]) -> tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


def summarize(
    folds: list[FoldRecord],
    detections: list[DetectionRecord],
    speeds: list[SpeedRecord],
    frame_period_s: float,
) -> tuple[ExperimentSummary, pd.DataFrame, pd.DataFrame]:
    """Summary statistics and per-vehicle tables from the raw records."""
    vehicle = [d for d in detections if d.has_vehicle]
    noise = [d for d in detections if not d.has_vehicle]
    if not vehicle:
        raise PreconditionError("No vehicle test records to summarize")

    offset_mean, offset_std = _mean_std([d.offset_s for d in vehicle])
    one_stage = [d.one_stage_offset_s for d in vehicle if d.one_stage_offset_s is not None]
    one_mean, one_std = _mean_std(one_stage) if one_stage else (None, None)

    rmse_table, accuracy_table = per_vehicle_tables(speeds)
    average_rmse = rmse_table.iloc[-1]
    average_accuracy = accuracy_table.iloc[-1]
    representations = [c for c in rmse_table.columns if c != "vehicle"]

    summary = ExperimentSummary(
        frame_period_s=frame_period_s,
        n_vehicle_tests=len(vehicle),
        n_noise_tests=len(noise),
        offset_mean_s=offset_mean,
        offset_std_s=offset_std,
        one_stage_offset_mean_s=one_mean,
        one_stage_offset_std_s=one_std,
        detection_rate=float(np.mean([d.vehicle_present for d in vehicle])),
        false_alarm_rate=(
            float(np.mean([d.vehicle_present for d in noise])) if noise else None
        ),
        n_folds=len(folds),
        folds_with_positive_gap=sum(1 for f in folds if f.test_gap is not None and f.test_gap > 0),
        rmse_average={rep: float(average_rmse[rep]) for rep in representations},
        accuracy_exact_average={
            rep: float(average_accuracy[f"{rep}_exact"]) for rep in representations
        },
        accuracy_within1_average={
            rep: float(average_accuracy[f"{rep}_within1"]) for rep in representations
        },
    )
    return summary, rmse_table, accuracy_table


def cross_validate(
    manifest: Manifest,
    cfg: ExperimentConfig,
    feature_sets: dict[str, FeatureSet] | None = None,
) -> ExperimentReport:
    """Leave-one-vehicle-out cross-validation repeated `cfg.iterations` times.

    Raises:
        PreconditionError: If the manifest has fewer than 2 vehicles.
    """
    vehicles = manifest.vehicle_ids
    if len(vehicles) < 2:
        raise PreconditionError(
            f"Cross-validation needs at least 2 vehicles, got {vehicles}"
        )
    feature_sets = feature_sets or load_feature_sets(manifest, cfg)
    frame_period_s = next(iter(feature_sets.values())).lms.frame_period_s

    folds, detections, speeds = [], [], []
    for iteration in range(cfg.iterations):
        noise_train, noise_test = split_noise(
            manifest.noise_entries, cfg.noise_test_fraction, cfg.master_seed, iteration
        )
        for fold in vehicles:
            fold_record, fold_detections, fold_speeds = run_fold(
                manifest, feature_sets, cfg, iteration, fold, noise_train, noise_test
            )
            folds.append(fold_record)
            detections.extend(fold_detections)
            speeds.extend(fold_speeds)
        logger.info(f"Finished iteration {iteration + 1}/{cfg.iterations}")

    summary, rmse_table, accuracy_table = summarize(
        folds, detections, speeds, frame_period_s
    )
    return ExperimentReport(
        config=cfg,
        folds=folds,
        detections=detections,
        speeds=speeds,
        summary=summary,
        rmse_table=rmse_table.to_dict(orient="records"),
        accuracy_table=accuracy_table.to_dict(orient="records"),
    )


# ---------- Output ------------------
def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def write_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """report.json plus the RMSE, accuracy, detection and speed CSV tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": settings.MODEL_FORMAT_VERSION,
        **report.model_dump(mode="json"),
    }
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")

    written = [
        report_path,
        _write_csv(pd.DataFrame(report.rmse_table), out_dir / "rmse_table.csv"),
        _write_csv(pd.DataFrame(report.accuracy_table), out_dir / "accuracy_table.csv"),
        _write_csv(
            pd.DataFrame([d.model_dump() for d in report.detections]),
            out_dir / "detections.csv",
        ),
        _write_csv(
            pd.DataFrame([s.model_dump() for s in report.speeds]),
            out_dir / "speed_records.csv",
        ),
    ]
    logger.info(f"Wrote experiment report to '{out_dir}'")
    return written


def load_report(path: str | Path) -> ExperimentReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.pop("format_version", None)
    if version != settings.MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"'{path}' has report format {version}")
    return ExperimentReport.model_validate(data)


def offset_histogram(offsets: list[float], frame_period_s: float) -> pd.DataFrame:
    """Counts per bin of one frame period, bins centered on multiples of it."""
    if not offsets:
        return pd.DataFrame(columns=["bin_left_s", "bin_right_s", "bin_center_s", "count"])
    bins = np.floor(np.asarray(offsets) / frame_period_s + 0.5).astype(int)
    index = np.arange(bins.min(), bins.max() + 1)
    counts = np.array([np.sum(bins == k) for k in index])
    return pd.DataFrame(
        {
            "bin_left_s": (index - 0.5) * frame_period_s,
            "bin_right_s": (index + 0.5) * frame_period_s,
            "bin_center_s": index * frame_period_s,
            "count": counts,
        }
    )


def minima_histogram(
    vehicle_minima: list[float], noise_minima: list[float], t_d: float, n_bins: int = 30
) -> pd.DataFrame:
    """Vehicle and no-vehicle CVMD-minimum counts over equal bins of [0, T_D]."""
    edges = np.linspace(0.0, t_d, n_bins + 1)
    vehicle_counts, _ = np.histogram(np.clip(vehicle_minima, 0.0, t_d), bins=edges)
    noise_counts, _ = np.histogram(np.clip(noise_minima, 0.0, t_d), bins=edges)
    return pd.DataFrame(
        {
            "bin_left_s": edges[:-1],
            "bin_right_s": edges[1:],
            "vehicle_count": vehicle_counts,
            "noise_count": noise_counts,
        }
    )


def export_histograms(
    report: ExperimentReport, out_dir: str | Path, n_bins: int = 30
) -> list[Path]:
    """Detection-offset histograms (two- and one-stage), CVMD-minima histograms
    and the separating interval between vehicle and noise minima."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    period = report.summary.frame_period_s
    vehicle = [d for d in report.detections if d.has_vehicle]
    noise = [d for d in report.detections if not d.has_vehicle]

    written = [
        _write_csv(
            offset_histogram([d.offset_s for d in vehicle], period),
            out_dir / "offset_histogram.csv",
        )
    ]
    one_stage = [d.one_stage_offset_s for d in vehicle if d.one_stage_offset_s is not None]
    if one_stage:
        written.append(
            _write_csv(
                offset_histogram(one_stage, period),
                out_dir / "offset_histogram_one_stage.csv",
            )
        )

    vehicle_minima = [d.min_cvmd for d in vehicle]
    noise_minima = [d.min_cvmd for d in noise]
    written.append(
        _write_csv(
            minima_histogram(
                vehicle_minima, noise_minima, report.config.detector.cvmd.t_d, n_bins
            ),
            out_dir / "cvmd_minima_histogram.csv",
        )
    )

    gap = _gap(vehicle_minima, noise_minima)
    interval = pd.DataFrame(
        [
            {
                "max_vehicle_min_s": max(vehicle_minima) if vehicle_minima else None,
                "min_noise_min_s": min(noise_minima) if noise_minima else None,
                "gap_s": gap,
                "separable": gap is not None and gap > 0,
            }
        ]
    )
    written.append(_write_csv(interval, out_dir / "separating_interval.csv"))
    logger.info(f"Wrote {len(written)} histogram files to '{out_dir}'")
    return written

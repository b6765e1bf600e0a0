"""services/detection_service.py

CPA detection by regression of the clipped vehicle-to-microphone distance
(CVMD). Stage 1 maps LMS context vectors to a per-frame CVMD; stage 2
refines a window of stage-1 predictions. The CPA is the argmin of the
refined curve, and a vehicle is present when that minimum is below a
calibrated threshold.
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import settings
from app.exceptions import AnnotationError, ConfigurationError, PreconditionError
from app.schemas import (
    ArrayModel,
    ClipAnnotation,
    CvmdCurve,
    DetectionResult,
    FeatureMatrix,
    Standardizer,
)
from app.services.feature_service import FeatureConfig
from app.services.neural_service import (
    Fcnn,
    TrainConfig,
    TrainReport,
    fcnn_init,
    forward_batch,
    train,
)

logger = logging.getLogger(__name__)


# ---------- Configuration ------------------
class CvmdParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t_d: float = Field(default=0.75, gt=0.0)  # clip threshold T_D, seconds


class ContextSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    q: int = Field(default=12, ge=0)  # context half-width, in selected frames
    stride: int = Field(default=3, ge=1)  # frames between selected frames

    @property
    def width(self) -> int:
        return 2 * self.q + 1

    def offsets(self) -> np.ndarray:
        return np.arange(-self.q, self.q + 1) * self.stride


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cvmd: CvmdParams = Field(default_factory=CvmdParams)
    context: ContextSpec = Field(default_factory=ContextSpec)
    stage1_hidden: list[int] = Field(default_factory=lambda: [64, 64])
    stage2_hidden: list[int] = Field(default_factory=lambda: [31, 15])
    stage2_window: int = Field(default=31, ge=1)
    stage1_l2: float = Field(default=1e-4, ge=0.0)
    stage2_l2: float = Field(default=5e-6, ge=0.0)
    stage1_train: TrainConfig = Field(default_factory=TrainConfig)
    stage2_train: TrainConfig = Field(default_factory=TrainConfig)
    use_stage2: bool = True  # False gives the one-stage ablation
    train_frame_stride: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def validate_window(self) -> "DetectorConfig":
        if self.stage2_window % 2 == 0:
            raise ValueError(f"stage2_window must be odd, got {self.stage2_window}")
        return self


# ---------- Model ------------------
class DetectionModel(ArrayModel):
    features: FeatureConfig
    config: DetectorConfig
    n_mel: int
    stage1: Fcnn
    stage2: Fcnn
    stage1_scaler: Standardizer
    stage2_scaler: Standardizer
    presence_threshold: float | None = None
    stage1_report: TrainReport | None = None
    stage2_report: TrainReport | None = None

    @model_validator(mode="after")
    def validate_inputs(self) -> "DetectionModel":
        expected = self.config.context.width * self.n_mel
        if self.stage1.n_inputs != expected:
            raise ValueError(
                f"Stage 1 takes {self.stage1.n_inputs} inputs, context needs {expected}"
            )
        if self.stage2.n_inputs != self.config.stage2_window:
            raise ValueError(
                f"Stage 2 takes {self.stage2.n_inputs} inputs, "
                f"window is {self.config.stage2_window}"
            )
        return self


class PresenceThreshold(BaseModel):
    threshold: float  # seconds; vehicle present iff min_cvmd < threshold
    gap: float  # min(noise) - max(vehicle); negative when the sets overlap


# ---------- Targets and inputs ------------------
def cvmd_target(t: float, t_cpa: float, params: CvmdParams) -> float:
    """|t - t_cpa| below T_D, T_D elsewhere."""
    distance = abs(t - t_cpa)
    return distance if distance < params.t_d else params.t_d


def cvmd_curve_target(
    times: np.ndarray, t_cpa: float | None, params: CvmdParams
) -> np.ndarray:
    """Vectorized CVMD target; a clip without a vehicle is T_D everywhere."""
    times = np.asarray(times, dtype=np.float64)
    if t_cpa is None:
        return np.full(times.shape, params.t_d)
    distance = np.abs(times - t_cpa)
    return np.where(distance < params.t_d, distance, params.t_d)


def _require_lms(lms: FeatureMatrix) -> None:
    if lms.kind != "LMS":
        raise PreconditionError(f"Detection works on LMS features, got {lms.kind}")


def assemble_context(lms: FeatureMatrix, frame: int, spec: ContextSpec) -> np.ndarray:
    """LMS frames at offsets -Q*stride..Q*stride around `frame`, concatenated.

    Offsets falling outside the clip replicate the edge frame.
    """
    _require_lms(lms)
    idx = np.clip(frame + spec.offsets(), 0, lms.n_frames - 1)
    return lms.values[idx].reshape(-1)


def context_matrix(lms: FeatureMatrix, spec: ContextSpec) -> np.ndarray:
    """`assemble_context` for every frame: (frames, (2Q+1) * N_mel)."""
    _require_lms(lms)
    frames = np.arange(lms.n_frames)
    idx = np.clip(frames[:, None] + spec.offsets()[None, :], 0, lms.n_frames - 1)
    return lms.values[idx].reshape(lms.n_frames, -1)


def prediction_windows(values: np.ndarray, width: int) -> np.ndarray:
    """Centered windows of `width` consecutive values, edge-replicated."""
    half = width // 2
    padded = np.pad(np.asarray(values, dtype=np.float64), half, mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, width).copy()


# ---------- Training ------------------
def _stage_targets(
    items: list[tuple[FeatureMatrix, ClipAnnotation]], params: CvmdParams
) -> list[np.ndarray]:
    problems = []
    for i, (lms, annotation) in enumerate(items):
        _require_lms(lms)
        if annotation.has_vehicle and annotation.t_cpa_s is None:
            problems.append(f"clip {i} ({annotation.vehicle_id}) has no t_cpa_s")
    if problems:
        raise AnnotationError(problems)
    return [
        cvmd_curve_target(lms.frame_times(), annotation.t_cpa_s, params)
        for lms, annotation in items
    ]


def _stage1_pairs(
    items: list[tuple[FeatureMatrix, ClipAnnotation]],
    targets: list[np.ndarray],
    cfg: DetectorConfig,
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for (lms, _), target in zip(items, targets, strict=True):
        keep = slice(None, None, cfg.train_frame_stride)
        xs.append(context_matrix(lms, cfg.context)[keep])
        ys.append(target[keep])
    return np.concatenate(xs), np.concatenate(ys)


def _stage1_curves(
    net: Fcnn,
    scaler: Standardizer,
    items: list[tuple[FeatureMatrix, ClipAnnotation]],
    context: ContextSpec,
) -> list[np.ndarray]:
    return [
        forward_batch(net, scaler.transform(context_matrix(lms, context)))[:, 0]
        for lms, _ in items
    ]


def _stage2_pairs(
    curves: list[np.ndarray], targets: list[np.ndarray], width: int
) -> tuple[np.ndarray, np.ndarray]:
    xs = [prediction_windows(curve, width) for curve in curves]
    return np.concatenate(xs), np.concatenate(targets)


def train_detector(
    train_items: list[tuple[FeatureMatrix, ClipAnnotation]],
    val_items: list[tuple[FeatureMatrix, ClipAnnotation]],
    cfg: DetectorConfig,
    features: FeatureConfig,
) -> DetectionModel:
    """Train both CVMD regressors.

    Stage 1 learns (context vector -> CVMD) over the frames of every training
    clip; stage 2 learns (window of stage-1 predictions -> CVMD) from
    stage 1's predictions on the same training clips. Inputs of each stage
    are standardized with training statistics only.

    Raises:
        PreconditionError: If either set is empty.
        AnnotationError: If a vehicle clip lacks its CPA time.
    """
    if not train_items or not val_items:
        raise PreconditionError("train_detector needs non-empty training and validation sets")

    n_mel = train_items[0][0].n_bands
    train_targets = _stage_targets(train_items, cfg.cvmd)
    val_targets = _stage_targets(val_items, cfg.cvmd)

    x1, y1 = _stage1_pairs(train_items, train_targets, cfg)
    x1_val, y1_val = _stage1_pairs(val_items, val_targets, cfg)
    logger.info(
        f"Stage 1: {x1.shape[0]} training pairs of dimension {x1.shape[1]}, "
        f"{x1_val.shape[0]} validation pairs"
    )
    scaler1 = Standardizer.fit(x1)
    x1 = scaler1.transform(x1)
    x1_val = scaler1.transform(x1_val)
    stage1 = fcnn_init(
        [x1.shape[1], *cfg.stage1_hidden, 1],
        l2_factor=cfg.stage1_l2,
        seed=cfg.stage1_train.seed,
    )
    stage1, report1 = train(stage1, x1, y1, x1_val, y1_val, cfg.stage1_train)
    del x1, x1_val

    curves = _stage1_curves(stage1, scaler1, train_items, cfg.context)
    val_curves = _stage1_curves(stage1, scaler1, val_items, cfg.context)
    x2, y2 = _stage2_pairs(curves, train_targets, cfg.stage2_window)
    x2_val, y2_val = _stage2_pairs(val_curves, val_targets, cfg.stage2_window)
    scaler2 = Standardizer.fit(x2)
    stage2 = fcnn_init(
        [cfg.stage2_window, *cfg.stage2_hidden, 1],
        l2_factor=cfg.stage2_l2,
        seed=cfg.stage2_train.seed,
    )
    stage2, report2 = train(
        stage2,
        scaler2.transform(x2),
        y2,
        scaler2.transform(x2_val),
        y2_val,
        cfg.stage2_train,
    )

    return DetectionModel(
        features=features,
        config=cfg,
        n_mel=n_mel,
        stage1=stage1,
        stage2=stage2,
        stage1_scaler=scaler1,
        stage2_scaler=scaler2,
        stage1_report=report1,
        stage2_report=report2,
    )


# ---------- Inference ------------------
def predict_stage1(model: DetectionModel, lms: FeatureMatrix) -> np.ndarray:
    x = model.stage1_scaler.transform(context_matrix(lms, model.config.context))
    return forward_batch(model.stage1, x)[:, 0]


def predict_cvmd(
    model: DetectionModel, lms: FeatureMatrix, use_stage2: bool | None = None
) -> CvmdCurve:
    """Per-frame CVMD prediction, clamped to [0, T_D].

    Args:
        use_stage2: Overrides `model.config.use_stage2`; False returns the
            one-stage curve.

    Raises:
        PreconditionError: If the clip has fewer frames than the stage-2 window.
    """
    _require_lms(lms)
    width = model.config.stage2_window
    if lms.n_frames < width:
        raise PreconditionError(
            f"Detection needs at least {width} frames, got {lms.n_frames}"
        )
    if lms.n_bands != model.n_mel:
        raise ConfigurationError(
            f"Model expects {model.n_mel} mel bands, features have {lms.n_bands}"
        )

    stage2_on = model.config.use_stage2 if use_stage2 is None else use_stage2
    values = predict_stage1(model, lms)
    if stage2_on:
        windows = model.stage2_scaler.transform(prediction_windows(values, width))
        values = forward_batch(model.stage2, windows)[:, 0]
    values = np.clip(values, 0.0, model.config.cvmd.t_d)
    return CvmdCurve(values=values, frame_period_s=lms.frame_period_s, t0_s=lms.t0_s)


def estimate_cpa(curve: CvmdCurve) -> tuple[float, float]:
    """Global argmin of the curve, earliest frame on ties.

    Returns:
        tuple[float, float]: (t_cpa_hat in seconds, minimum CVMD in seconds).
    """
    if curve.values.size == 0:
        raise PreconditionError("estimate_cpa needs a non-empty curve")
    frame = int(np.argmin(curve.values))
    return curve.t0_s + frame * curve.frame_period_s, float(curve.values[frame])


def calibrate_presence_threshold(
    vehicle_minima: list[float], noise_minima: list[float]
) -> PresenceThreshold:
    """Threshold on the CVMD minimum separating vehicle from no-vehicle clips.

    With a gap, the midpoint between max(vehicle) and min(noise). Otherwise
    the observed minimum that misclassifies fewest clips (ties to the
    smaller value), with vehicle present iff min_cvmd < threshold.
    """
    if not vehicle_minima or not noise_minima:
        raise PreconditionError("Both vehicle and noise minima are required")
    vehicle = np.asarray(vehicle_minima, dtype=np.float64)
    noise = np.asarray(noise_minima, dtype=np.float64)
    gap = float(noise.min() - vehicle.max())
    if gap > 0:
        return PresenceThreshold(
            threshold=float((vehicle.max() + noise.min()) / 2.0), gap=gap
        )

    candidates = np.unique(np.concatenate([vehicle, noise]))
    errors = [int(np.sum(vehicle >= c) + np.sum(noise < c)) for c in candidates]
    best = int(np.argmin(errors))
    logger.warning(
        f"Vehicle and noise minima overlap (gap {gap:.4f} s); "
        f"threshold {candidates[best]:.4f} s misclassifies {errors[best]} clip(s)"
    )
    return PresenceThreshold(threshold=float(candidates[best]), gap=gap)


def vehicle_present(min_cvmd: float, threshold: float) -> bool:
    return min_cvmd < threshold


def detect(
    model: DetectionModel,
    lms: FeatureMatrix,
    threshold: float | None = None,
    use_stage2: bool | None = None,
) -> DetectionResult:
    """predict_cvmd + estimate_cpa + presence decision.

    Without a threshold (argument or calibrated on the model) the clip is
    reported present whenever the curve dips below T_D.
    """
    curve = predict_cvmd(model, lms, use_stage2=use_stage2)
    t_cpa_hat, min_cvmd = estimate_cpa(curve)
    if threshold is None:
        threshold = model.presence_threshold
    if threshold is None:
        threshold = model.config.cvmd.t_d
    return DetectionResult(
        t_cpa_hat=t_cpa_hat,
        min_cvmd=min_cvmd,
        vehicle_present=vehicle_present(min_cvmd, threshold),
        cpa_frame=int(round((t_cpa_hat - curve.t0_s) / curve.frame_period_s)),
    )


# ---------- Persistence ------------------
def export_cvmd_csv(curve: CvmdCurve, path: str | Path) -> None:
    frame = pd.DataFrame(
        {
            "frame": np.arange(curve.values.size),
            "time_s": curve.frame_times(),
            "cvmd_s": curve.values,
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def save_detection_model(model: DetectionModel, path: str | Path) -> None:
    payload = {"format_version": settings.MODEL_FORMAT_VERSION, **model.model_dump()}
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved detection model to '{path}'")


def load_detection_model(path: str | Path) -> DetectionModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.pop("format_version", None)
    if version != settings.MODEL_FORMAT_VERSION:
        raise ConfigurationError(
            f"'{path}' has detection model format {version}, "
            f"expected {settings.MODEL_FORMAT_VERSION}"
        )
    return DetectionModel.model_validate(data)

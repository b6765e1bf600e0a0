"""services/speed_service.py

This module cuts CPA-centered feature windows out of MS/LMS/MFCC matrices,
trains the epsilon-SVR speed regressor on them and computes the evaluation
metrics (RMSE and speed-class accuracy) plus the per-vehicle tables.
"""

import json
import logging
import math
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator, validate_call

from app.config import settings
from app.exceptions import (
    AnnotationError,
    ConfigurationError,
    PreconditionError,
    ShapeError,
)
from app.schemas import ArrayModel, ClipAnnotation, DetectionResult, FeatureKind, FeatureMatrix
from app.services.feature_service import FeatureConfig
from app.services.svr_service import SvrConfig, SvrModel, svr_predict, svr_train

logger = logging.getLogger(__name__)

CLASS_START_KMH = 25.0
CLASS_STEP_KMH = 10.0
N_SPEED_CLASSES = 8


class SpeedFeatureSpec(BaseModel):
    """Time window (odd frame count) and inclusive band range of one representation."""

    model_config = ConfigDict(extra="forbid")

    representation: FeatureKind
    time_window: int = Field(ge=1)
    band_low: int = Field(ge=0)
    band_high: int = Field(ge=0)
    index_base: Literal[0, 1] = 0  # 1 reads the band range as 1-based

    @model_validator(mode="after")
    def validate_window(self) -> "SpeedFeatureSpec":
        if self.time_window % 2 == 0:
            raise ValueError(f"time_window must be odd, got {self.time_window}")
        if self.band_low > self.band_high:
            raise ValueError(
                f"band_low ({self.band_low}) must not exceed band_high ({self.band_high})"
            )
        if self.band_low < self.index_base:
            raise ValueError(
                f"band_low {self.band_low} is below the index base {self.index_base}"
            )
        return self

    @property
    def n_bands(self) -> int:
        return self.band_high - self.band_low + 1

    @property
    def vector_length(self) -> int:
        return self.time_window * self.n_bands

    def band_slice(self) -> slice:
        return slice(self.band_low - self.index_base, self.band_high - self.index_base + 1)


class SpeedEstimate(BaseModel):
    speed_kmh: float
    class_index: int = Field(ge=0, lt=N_SPEED_CLASSES)


class SpeedModel(ArrayModel):
    """A trained regressor with the feature settings it must be applied with."""

    spec: SpeedFeatureSpec
    features: FeatureConfig
    svr: SvrModel

    @model_validator(mode="after")
    def validate_dimensions(self) -> "SpeedModel":
        if self.svr.n_features != self.spec.vector_length:
            raise ValueError(
                f"SVR expects {self.svr.n_features} features, "
                f"spec produces {self.spec.vector_length}"
            )
        return self


class SpeedRecord(BaseModel):
    """One test clip's speed outcome for one representation."""

    iteration: int
    fold: str
    path: str
    vehicle_id: str
    representation: FeatureKind
    true_kmh: float
    estimated_kmh: float
    true_class: int
    estimated_class: int


# ---------- Discretization ------------------
@validate_call  # Check type constraints for parameters
def speed_class(speed_kmh: float) -> int:
    """10 km/h classes from 25 km/h, clamped to 0..7."""
    index = math.floor((speed_kmh - CLASS_START_KMH) / CLASS_STEP_KMH)
    return min(max(index, 0), N_SPEED_CLASSES - 1)


def cpa_frame_index(fm: FeatureMatrix, t_cpa_s: float) -> int:
    """Nearest frame to t_cpa_s, clamped into the matrix."""
    position = (t_cpa_s - fm.t0_s) / fm.frame_period_s
    return min(max(int(math.floor(position + 0.5)), 0), fm.n_frames - 1)


# ---------- Features ------------------
def extract_speed_features(
    fm: FeatureMatrix, cpa_frame: int, spec: SpeedFeatureSpec
) -> np.ndarray:
    """Time-major flattening of the window around `cpa_frame`.

    Frames beyond the clip edges repeat the first/last frame.

    Raises:
        ConfigurationError: If the representation or band range does not fit `fm`.
        PreconditionError: If `cpa_frame` lies outside the matrix.
    """
    if fm.kind != spec.representation:
        raise ConfigurationError(
            f"Speed spec is for {spec.representation}, features are {fm.kind}"
        )
    bands = spec.band_slice()
    if bands.start < 0 or bands.stop > fm.n_bands:
        raise ConfigurationError(
            f"Band range [{spec.band_low}, {spec.band_high}] (base {spec.index_base}) "
            f"is outside {fm.n_bands} bands"
        )
    if not 0 <= cpa_frame < fm.n_frames:
        raise PreconditionError(
            f"CPA frame {cpa_frame} is outside the {fm.n_frames}-frame matrix"
        )

    half = spec.time_window // 2
    rows = np.clip(np.arange(cpa_frame - half, cpa_frame + half + 1), 0, fm.n_frames - 1)
    return fm.values[rows, bands].reshape(-1)


# ---------- Training and prediction ------------------
def train_speed_model(
    items: list[tuple[FeatureMatrix, ClipAnnotation]],
    spec: SpeedFeatureSpec,
    svr_cfg: SvrConfig,
    features: FeatureConfig | None = None,
) -> SpeedModel:
    """Fit the SVR on windows centered at the ground-truth CPA of each clip.

    Raises:
        PreconditionError: If there are no items.
        AnnotationError: If a clip lacks speed or CPA annotations.
        ConfigurationError: If the features do not match `spec`.
    """
    if not items:
        raise PreconditionError("Speed training needs at least one clip")

    problems = [
        f"item {i} ({annotation.vehicle_id or 'no vehicle'}) has no speed/CPA annotation"
        for i, (_, annotation) in enumerate(items)
        if not annotation.has_vehicle
        or annotation.speed_kmh is None
        or annotation.t_cpa_s is None
    ]
    if problems:
        raise AnnotationError(problems)

    x = np.stack(
        [
            extract_speed_features(fm, cpa_frame_index(fm, annotation.t_cpa_s), spec)
            for fm, annotation in items
        ]
    )
    y = np.array([annotation.speed_kmh for _, annotation in items])
    svr = svr_train(x, y, svr_cfg)
    logger.info(
        f"Trained {spec.representation} speed model on {len(items)} clips "
        f"({spec.vector_length} features)"
    )
    return SpeedModel(spec=spec, features=features or FeatureConfig(), svr=svr)


def predict_speed(
    model: SpeedModel,
    fm: FeatureMatrix,
    detection: DetectionResult,
    require_presence: bool = True,
) -> SpeedEstimate:
    """SVR speed at the estimated CPA frame, with its speed class.

    Raises:
        PreconditionError: If the detector found no vehicle and
            `require_presence` is set.
    """
    if require_presence and not detection.vehicle_present:
        raise PreconditionError("No vehicle detected; speed is undefined")
    frame = cpa_frame_index(fm, detection.t_cpa_hat)
    speed = svr_predict(model.svr, extract_speed_features(fm, frame, model.spec))
    return SpeedEstimate(speed_kmh=speed, class_index=speed_class(speed))


# ---------- Metrics ------------------
def _paired(est: list[float], truth: list[float]) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(est, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{a.size} estimates do not match {b.size} ground truths")
    if a.size == 0:
        raise PreconditionError("Metrics need at least one pair")
    return a, b


def rmse(est: list[float], truth: list[float]) -> float:
    a, b = _paired(est, truth)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@validate_call
def class_accuracy(est: list[int], truth: list[int], delta: int) -> float:
    """Fraction of pairs whose classes differ by at most `delta`."""
    if delta < 0:
        raise ConfigurationError(f"delta must be non-negative, got {delta}")
    a, b = _paired(est, truth)
    return float(np.mean(np.abs(a - b) <= delta))


def per_vehicle_tables(
    records: list[SpeedRecord],
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """RMSE and class-accuracy tables, one row per vehicle plus "Average".

    The average row is the unweighted mean of the vehicle rows.

    Returns:
        tuple[pd.DataFrame, pd.DataFrame]: (rmse table with one column per
            representation, accuracy table with `<rep>_exact` and
            `<rep>_within1` columns).
    """
    if not records:
        raise PreconditionError("No speed records to tabulate")
    frame = pd.DataFrame([r.model_dump() for r in records])
    representations = [k for k in ("MS", "LMS", "MFCC") if k in set(frame.representation)]
    vehicles = sorted(frame.vehicle_id.unique())

    rmse_rows, accuracy_rows = [], []
    for vehicle in vehicles:
        rmse_row = {"vehicle": vehicle}
        accuracy_row = {"vehicle": vehicle}
        for rep in representations:
            subset = frame[(frame.vehicle_id == vehicle) & (frame.representation == rep)]
            if subset.empty:
                continue
            rmse_row[rep] = rmse(subset.estimated_kmh.tolist(), subset.true_kmh.tolist())
            est, truth = subset.estimated_class.tolist(), subset.true_class.tolist()
            accuracy_row[f"{rep}_exact"] = class_accuracy(est, truth, 0)
            accuracy_row[f"{rep}_within1"] = class_accuracy(est, truth, 1)
        rmse_rows.append(rmse_row)
        accuracy_rows.append(accuracy_row)

    tables = []
    for rows in (rmse_rows, accuracy_rows):
        table = pd.DataFrame(rows)
        average = table.drop(columns="vehicle").mean(axis=0)
        table.loc[len(table)] = {"vehicle": "Average", **average.to_dict()}
        tables.append(table)
    return tables[0], tables[1]


# ---------- Persistence ------------------
def save_speed_model(model: SpeedModel, path: str | Path) -> None:
    payload = {"format_version": settings.MODEL_FORMAT_VERSION, **model.model_dump()}
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    logger.info(f"Saved {model.spec.representation} speed model to '{path}'")


def load_speed_model(path: str | Path) -> SpeedModel:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.pop("format_version", None)
    if version != settings.MODEL_FORMAT_VERSION:
        raise ConfigurationError(f"'{path}' has speed model format {version}")
    return SpeedModel.model_validate(data)

import math
from pathlib import Path
from typing import Annotated, Any, Literal

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    model_validator,
)


def _as_float64(value: Any) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _as_float32(value: Any) -> np.ndarray:
    return np.asarray(value, dtype=np.float32)


def _to_list(array: np.ndarray) -> list:
    return array.tolist()


# numpy fields dump to nested lists, so json round-trips are bit-exact
FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float64),
    PlainSerializer(_to_list, return_type=list),
]
Float32Array = Annotated[
    np.ndarray,
    BeforeValidator(_as_float32),
    PlainSerializer(_to_list, return_type=list),
]

FeatureKind = Literal["MS", "LMS", "MFCC"]


class ArrayModel(BaseModel):
    """Base for models carrying numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


# ---------- Audio ------------------
class AudioClip(ArrayModel):
    samples: Float32Array  # mono PCM, nominal range [-1, 1]
    sample_rate: int = Field(gt=0)

    @model_validator(mode="after")
    def validate_samples(self) -> "AudioClip":
        if self.samples.ndim != 1:
            raise ValueError(
                f"AudioClip samples must be 1-D, got shape {self.samples.shape}"
            )
        if self.samples.size == 0:
            raise ValueError("AudioClip samples must not be empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must all be finite")
        return self

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


class ClipAnnotation(BaseModel):
    vehicle_id: str = ""
    has_vehicle: bool
    speed_kmh: float | None = None  # absent for no-vehicle clips
    t_cpa_s: float | None = None  # seconds from clip start

    @model_validator(mode="after")
    def validate_annotation(self) -> "ClipAnnotation":
        present = self.speed_kmh is not None and self.t_cpa_s is not None
        if self.has_vehicle and not present:
            raise ValueError("vehicle clip needs both speed_kmh and t_cpa_s")
        if not self.has_vehicle and (
            self.speed_kmh is not None or self.t_cpa_s is not None
        ):
            raise ValueError("no-vehicle clip must not carry speed_kmh or t_cpa_s")
        for name, value in [("speed_kmh", self.speed_kmh), ("t_cpa_s", self.t_cpa_s)]:
            if value is not None and not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
        if self.speed_kmh is not None and not self.speed_kmh > 0:
            raise ValueError(f"speed_kmh must be positive, got {self.speed_kmh}")
        if self.t_cpa_s is not None and not self.t_cpa_s >= 0:
            raise ValueError(f"t_cpa_s must be non-negative, got {self.t_cpa_s}")
        return self


class ManifestEntry(BaseModel):
    path: str
    annotation: ClipAnnotation


class Manifest(BaseModel):
    entries: list[ManifestEntry]
    root: Path | None = None  # directory relative paths are resolved against

    @model_validator(mode="after")
    def validate_unique_paths(self) -> "Manifest":
        seen = set()
        duplicates = []
        for entry in self.entries:
            if entry.path in seen:
                duplicates.append(entry.path)
            seen.add(entry.path)
        if duplicates:
            raise ValueError(f"Manifest paths must be unique, repeated: {duplicates}")
        return self

    @property
    def vehicle_ids(self) -> list[str]:
        return sorted(
            {e.annotation.vehicle_id for e in self.entries if e.annotation.has_vehicle}
        )

    @property
    def vehicle_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.annotation.has_vehicle]

    @property
    def noise_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.annotation.has_vehicle]


# ---------- Features ------------------
class FeatureMatrix(ArrayModel):
    kind: FeatureKind
    values: FloatArray  # frames x bands
    frame_period_s: float = Field(gt=0)
    t0_s: float = 0.0  # time of frame 0

    @model_validator(mode="after")
    def validate_values(self) -> "FeatureMatrix":
        if self.values.ndim != 2:
            raise ValueError(
                f"FeatureMatrix values must be 2-D, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("FeatureMatrix values must all be finite")
        if self.kind == "MS" and np.any(self.values < 0):
            raise ValueError("MS values must be non-negative")
        return self

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    def frame_times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.n_frames) * self.frame_period_s


# ---------- Detection ------------------
class CvmdCurve(ArrayModel):
    values: FloatArray  # seconds, one per frame
    frame_period_s: float = Field(gt=0)
    t0_s: float = 0.0

    @model_validator(mode="after")
    def validate_values(self) -> "CvmdCurve":
        if self.values.ndim != 1:
            raise ValueError(f"CvmdCurve must be 1-D, got shape {self.values.shape}")
        return self

    def frame_times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.values.size) * self.frame_period_s


class DetectionResult(BaseModel):
    t_cpa_hat: float  # seconds
    min_cvmd: float  # seconds
    vehicle_present: bool
    cpa_frame: int = Field(ge=0)


# ---------- Scaling ------------------
class Standardizer(ArrayModel):
    """Per-dimension zero-mean/unit-variance scaling fit on training data."""

    mean: FloatArray
    scale: FloatArray

    @classmethod
    def fit(cls, data: np.ndarray) -> "Standardizer":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        mean = data.mean(axis=0)
        scale = data.std(axis=0)
        # constant dimensions pass through unscaled
        scale = np.where(scale > 1e-12, scale, 1.0)
        return cls(mean=mean, scale=scale)

    def transform(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.scale

    def inverse_transform(self, data: np.ndarray) -> np.ndarray:
        return np.asarray(data, dtype=np.float64) * self.scale + self.mean

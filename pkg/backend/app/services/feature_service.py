"""services/feature_service.py

Short-time power spectra and the three mel representations:
MS (mel spectrogram), LMS (log-mel, dB) and MFCC (orthonormal DCT-II of LMS).
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import fft
from scipy.signal import get_window

from app.exceptions import ConfigurationError, PreconditionError, ShapeError
from app.schemas import ArrayModel, AudioClip, FeatureKind, FeatureMatrix, FloatArray

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10


# ---------- Configuration ------------------
class StftConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window_len: int = Field(default=4096, gt=0)  # N_w, samples
    hop: int = Field(default=1105, gt=0)  # N_h, samples
    window: str = "hamming"
    center: bool = True  # reflect-pad N_w/2 samples on both sides

    @model_validator(mode="after")
    def validate_geometry(self) -> "StftConfig":
        if self.hop > self.window_len:
            raise ValueError(
                f"hop ({self.hop}) must not exceed window_len ({self.window_len})"
            )
        if self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len must be a power of two, got {self.window_len}")
        return self

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1


class MelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_mel: int = Field(default=40, ge=1)
    f_low: float = Field(default=0.0, ge=0.0)  # Hz
    f_high: float = 16000.0  # Hz, clamped at Nyquist when building filters

    @model_validator(mode="after")
    def validate_range(self) -> "MelConfig":
        if not self.f_low < self.f_high:
            raise ValueError(
                f"f_low ({self.f_low}) must be below f_high ({self.f_high})"
            )
        return self


class FeatureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stft: StftConfig = Field(default_factory=StftConfig)
    mel: MelConfig = Field(default_factory=MelConfig)


# ---------- Types ------------------
class PowerSpectrogram(ArrayModel):
    values: FloatArray  # frames x (N_w/2 + 1)
    frame_period_s: float = Field(gt=0)
    t0_s: float = 0.0
    sample_rate: int = Field(gt=0)
    window_len: int = Field(gt=0)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


class FilterBank(ArrayModel):
    weights: FloatArray  # n_mel x (N_w/2 + 1)

    @model_validator(mode="after")
    def validate_weights(self) -> "FilterBank":
        if self.weights.ndim != 2:
            raise ValueError("FilterBank weights must be 2-D")
        if np.any(self.weights < 0):
            raise ValueError("FilterBank weights must be non-negative")
        return self


class FeatureSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    ms: FeatureMatrix
    lms: FeatureMatrix
    mfcc: FeatureMatrix

    def get(self, kind: FeatureKind) -> FeatureMatrix:
        return {"MS": self.ms, "LMS": self.lms, "MFCC": self.mfcc}[kind]


# ---------- Operations ------------------
def frame_count(num_samples: int, hop: int) -> int:
    """Frames produced by centered framing: 1 + floor((L - 1) / N_h)."""
    return 1 + (num_samples - 1) // hop


def stft_power(clip: AudioClip, cfg: StftConfig) -> PowerSpectrogram:
    """|FFT|^2 of Hamming-windowed frames centered at f * N_h."""
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size < 1:
        raise PreconditionError("stft_power needs at least one sample")

    n_w = cfg.window_len
    if cfg.center:
        n_frames = frame_count(x.size, cfg.hop)
        padded = np.pad(x, n_w // 2, mode="reflect")
    else:
        if x.size < n_w:
            raise PreconditionError(
                f"Uncentered framing needs at least {n_w} samples, got {x.size}"
            )
        n_frames = 1 + (x.size - n_w) // cfg.hop
        padded = x

    frames = np.lib.stride_tricks.sliding_window_view(padded, n_w)[::cfg.hop][:n_frames]
    window = get_window(cfg.window, n_w, fftbins=True)
    spectrum = fft.rfft(frames * window, axis=1)
    power = spectrum.real**2 + spectrum.imag**2

    return PowerSpectrogram(
        values=power,
        frame_period_s=cfg.hop / clip.sample_rate,
        t0_s=0.0 if cfg.center else (n_w / 2) / clip.sample_rate,
        sample_rate=clip.sample_rate,
        window_len=n_w,
    )


def hz_to_mel(f: float | np.ndarray) -> float | np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: float | np.ndarray) -> float | np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    mel_cfg: MelConfig, stft_cfg: StftConfig, sample_rate: int
) -> FilterBank:
    """HTK-style triangular filters, unit peak, no area normalization.

    Peaks are equally spaced on the mel scale between m(f_low) and m(f_high);
    each filter's edges are its neighbours' peaks.

    Raises:
        ConfigurationError: If a filter covers no FFT bin or the range is empty
            after clamping at Nyquist.
    """
    nyquist = sample_rate / 2.0
    f_high = mel_cfg.f_high
    if f_high > nyquist:
        logger.warning(
            f"Mel upper edge {f_high} Hz exceeds Nyquist {nyquist} Hz; clamping"
        )
        f_high = nyquist
    if not mel_cfg.f_low < f_high:
        raise ConfigurationError(
            f"Empty mel range [{mel_cfg.f_low}, {f_high}] Hz at {sample_rate} Hz"
        )

    mel_points = np.linspace(
        hz_to_mel(mel_cfg.f_low), hz_to_mel(f_high), mel_cfg.n_mel + 2
    )
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(stft_cfg.n_bins) * sample_rate / stft_cfg.window_len

    left = hz_points[:-2, None]
    center = hz_points[1:-1, None]
    right = hz_points[2:, None]
    rising = (bin_freqs[None, :] - left) / (center - left)
    falling = (right - bin_freqs[None, :]) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"{mel_cfg.n_mel} mel bands are too many for N_w={stft_cfg.window_len} "
            f"at {sample_rate} Hz: filter(s) {empty.tolist()} cover no FFT bin"
        )
    return FilterBank(weights=weights)


def mel_spectrogram(power: PowerSpectrogram, fb: FilterBank) -> FeatureMatrix:
    if power.values.shape[1] != fb.weights.shape[1]:
        raise ShapeError(
            f"Spectrogram has {power.values.shape[1]} bins, "
            f"filterbank expects {fb.weights.shape[1]}"
        )
    return FeatureMatrix(
        kind="MS",
        values=power.values @ fb.weights.T,
        frame_period_s=power.frame_period_s,
        t0_s=power.t0_s,
    )


def log_mel(ms: FeatureMatrix) -> FeatureMatrix:
    """Decibels: 10 * log10(max(MS, 1e-10))."""
    if ms.kind != "MS":
        raise PreconditionError(f"log_mel expects an MS matrix, got {ms.kind}")
    return FeatureMatrix(
        kind="LMS",
        values=10.0 * np.log10(np.maximum(ms.values, LOG_FLOOR)),
        frame_period_s=ms.frame_period_s,
        t0_s=ms.t0_s,
    )


def mfcc(lms: FeatureMatrix) -> FeatureMatrix:
    """Orthonormal DCT-II over the mel bands, all coefficients kept."""
    if lms.kind != "LMS":
        raise PreconditionError(f"mfcc expects an LMS matrix, got {lms.kind}")
    return FeatureMatrix(
        kind="MFCC",
        values=fft.dct(lms.values, type=2, norm="ortho", axis=1),
        frame_period_s=lms.frame_period_s,
        t0_s=lms.t0_s,
    )


def dct_matrix(n: int) -> np.ndarray:
    """D such that D @ x is the orthonormal DCT-II of x."""
    return fft.dct(np.eye(n), type=2, norm="ortho", axis=0)


def export_feature_csv(fm: FeatureMatrix, path: str | Path) -> None:
    frame = pd.DataFrame(fm.values, columns=[str(b) for b in range(fm.n_bands)])
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info(f"Wrote {fm.kind} matrix {fm.values.shape} to '{path}'")


# ---------- Service ------------------
class FeatureService:
    """Computes MS/LMS/MFCC for clips under one FeatureConfig.

    Filterbanks are built once per sample rate.
    """

    def __init__(self, config: FeatureConfig | None = None):
        self.config = config or FeatureConfig()
        self._filterbanks: dict[int, FilterBank] = {}

    def filterbank(self, sample_rate: int) -> FilterBank:
        if sample_rate not in self._filterbanks:
            self._filterbanks[sample_rate] = build_mel_filterbank(
                self.config.mel, self.config.stft, sample_rate
            )
        return self._filterbanks[sample_rate]

    def compute(self, clip: AudioClip) -> FeatureSet:
        power = stft_power(clip, self.config.stft)
        ms = mel_spectrogram(power, self.filterbank(clip.sample_rate))
        lms = log_mel(ms)
        return FeatureSet(ms=ms, lms=lms, mfcc=mfcc(lms))

    def compute_lms(self, clip: AudioClip) -> FeatureMatrix:
        power = stft_power(clip, self.config.stft)
        return log_mel(mel_spectrogram(power, self.filterbank(clip.sample_rate)))

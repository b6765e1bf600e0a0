"""services/synth_service.py

This module synthesizes annotated pass-by clips and ambient noise clips.

A vehicle drives a straight line at constant speed past a microphone at
perpendicular distance d. Its source is a harmonic engine stack plus
low-passed broadband (tire) noise. The instantaneous radial velocity drives
the Doppler shift through phase integration, the amplitude falls off as 1/r,
and pink ambient noise is mixed in at a given SNR.
"""

import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import fft
from scipy.signal import butter, sosfilt

from app.config import settings
from app.exceptions import DomainError
from app.schemas import AudioClip, ClipAnnotation, Manifest, ManifestEntry
from app.seeding import derive_rng, derive_seed
from app.services.audio_service import save_manifest, write_wav

logger = logging.getLogger(__name__)

SOURCE_GAIN = 0.25  # source RMS at 1 m
BROADBAND_CUTOFF_HZ = 4000.0
PINK_FLOOR_HZ = 20.0  # the 1/f shaping flattens below this frequency
SNR_WINDOW_S = 2.0
REFERENCE_SPEED_KMH = 50.0


class PassBySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    speed_kmh: float = Field(gt=0.0)
    t_cpa_s: float = Field(gt=0.0)
    cpa_distance_m: float = Field(default=5.0, gt=0.0)
    duration_s: float = Field(default=10.0, gt=0.0)
    sample_rate: int = Field(default=44100, gt=0)
    engine_f0_hz: float = Field(default=60.0, gt=0.0)
    n_harmonics: int = Field(default=8, ge=1)
    harmonic_rolloff_db: float = Field(default=3.0, ge=0.0)
    broadband_level: float = Field(default=0.3, ge=0.0)
    snr_db: float = 20.0
    seed: int = 0

    @model_validator(mode="after")
    def validate_timing(self) -> "PassBySpec":
        if not self.t_cpa_s < self.duration_s:
            raise ValueError(
                f"t_cpa_s ({self.t_cpa_s}) must lie inside the clip ({self.duration_s} s)"
            )
        # The fundamental stays below Nyquist even at the full approach shift.
        peak_hz = doppler_frequency(self.engine_f0_hz, self.speed_kmh * settings.KMH_TO_MS)
        if peak_hz >= self.sample_rate / 2.0:
            raise ValueError(
                f"engine_f0_hz ({self.engine_f0_hz}) reaches {peak_hz:.1f} Hz on approach, "
                f"above the Nyquist frequency of {self.sample_rate} Hz audio"
            )
        return self


class VehicleProfile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vehicle_id: str = Field(min_length=1)
    base_f0_hz: float = Field(default=60.0, gt=0.0)
    n_harmonics: int = Field(default=8, ge=1)
    harmonic_rolloff_db: float = Field(default=3.0, ge=0.0)
    broadband_level: float = Field(default=0.3, ge=0.0)
    speed_correlated_f0: bool = True  # f0 = base * speed / 50 km/h
    speeds_kmh: list[float] | None = None  # drawn uniformly when omitted


class SynthDatasetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vehicles: list[VehicleProfile]
    clips_per_vehicle: int = Field(default=30, ge=1)
    speed_min_kmh: float = Field(default=30.0, gt=0.0)
    speed_max_kmh: float = Field(default=105.0, gt=0.0)
    n_noise_clips: int = Field(default=71, ge=0)
    duration_s: float = Field(default=10.0, gt=0.0)
    sample_rate: int = Field(default=44100, gt=0)
    cpa_distance_min_m: float = Field(default=4.0, gt=0.0)
    cpa_distance_max_m: float = Field(default=8.0, gt=0.0)
    t_cpa_margin_s: float = Field(default=2.0, ge=0.0)
    snr_min_db: float = 10.0
    snr_max_db: float = 25.0
    noise_rms_min_dbfs: float = -55.0
    noise_rms_max_dbfs: float = -35.0
    output_dir: Path
    master_seed: int = settings.MASTER_SEED

    @model_validator(mode="after")
    def validate_ranges(self) -> "SynthDatasetSpec":
        ids = [v.vehicle_id for v in self.vehicles]
        if len(set(ids)) < 2:
            raise ValueError(f"At least 2 distinct vehicles are required, got {ids}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"Vehicle ids must be unique, got {ids}")
        for low, high, name in [
            (self.speed_min_kmh, self.speed_max_kmh, "speed"),
            (self.cpa_distance_min_m, self.cpa_distance_max_m, "cpa_distance"),
            (self.snr_min_db, self.snr_max_db, "snr"),
            (self.noise_rms_min_dbfs, self.noise_rms_max_dbfs, "noise_rms"),
        ]:
            if low > high:
                raise ValueError(f"{name} range is empty: [{low}, {high}]")
        if not self.t_cpa_margin_s * 2 < self.duration_s:
            raise ValueError(
                f"t_cpa_margin_s {self.t_cpa_margin_s} leaves no room in "
                f"a {self.duration_s} s clip"
            )
        return self


# ---------- Physics ------------------
def doppler_frequency(
    f_src: float | np.ndarray,
    v_radial: float | np.ndarray,
    c: float = settings.SPEED_OF_SOUND_M_S,
) -> float | np.ndarray:
    """Observed frequency f_src * c / (c - v_radial); v_radial > 0 approaches.

    Raises:
        DomainError: If |v_radial| >= c.
    """
    v = np.asarray(v_radial, dtype=np.float64)
    if np.any(np.abs(v) >= c):
        raise DomainError(f"Radial speed must stay below the speed of sound ({c} m/s)")
    observed = np.asarray(f_src, dtype=np.float64) * c / (c - v)
    return float(observed) if observed.ndim == 0 else observed


def _pink(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS noise with a 1/f power spectrum above PINK_FLOOR_HZ."""
    spectrum = fft.rfft(rng.standard_normal(n))
    freqs = fft.rfftfreq(n, d=1.0 / sample_rate)
    shaping = 1.0 / np.sqrt(np.maximum(freqs, PINK_FLOOR_HZ))
    shaping[0] = 0.0
    pink = fft.irfft(spectrum * shaping, n)
    return pink / np.sqrt(np.mean(pink**2))


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x * x)))


# ---------- Clips ------------------
def synth_passby(spec: PassBySpec) -> tuple[AudioClip, ClipAnnotation]:
    """One vehicle pass-by; the annotation carries the exact CPA and speed."""
    rng = np.random.default_rng(spec.seed)
    sr = spec.sample_rate
    n = int(round(spec.duration_s * sr))
    t = np.arange(n) / sr

    v = spec.speed_kmh * settings.KMH_TO_MS
    x = v * (t - spec.t_cpa_s)
    r = np.sqrt(x * x + spec.cpa_distance_m**2)
    v_radial = -v * x / r
    factor = doppler_frequency(1.0, v_radial)

    engine = np.zeros(n)
    nyquist = sr / 2.0
    for k in range(1, spec.n_harmonics + 1):
        if k * spec.engine_f0_hz * factor.max() >= nyquist:
            break
        instantaneous = k * spec.engine_f0_hz * factor
        phase = 2.0 * np.pi * np.cumsum(instantaneous) / sr + rng.uniform(0, 2 * np.pi)
        engine += 10.0 ** (-spec.harmonic_rolloff_db * (k - 1) / 20.0) * np.sin(phase)
    engine /= _rms(engine)

    sos = butter(4, min(BROADBAND_CUTOFF_HZ, 0.45 * sr), fs=sr, output="sos")
    broadband = sosfilt(sos, rng.standard_normal(n))
    broadband /= _rms(broadband)

    source = engine + spec.broadband_level * broadband
    signal = SOURCE_GAIN * source / r

    ambient = _pink(n, sr, rng)
    half = SNR_WINDOW_S / 2.0
    central = (t >= spec.t_cpa_s - half) & (t <= spec.t_cpa_s + half)
    ambient *= _rms(signal[central]) / 10.0 ** (spec.snr_db / 20.0)

    clip = AudioClip(samples=(signal + ambient).astype(np.float32), sample_rate=sr)
    annotation = ClipAnnotation(
        has_vehicle=True, speed_kmh=spec.speed_kmh, t_cpa_s=spec.t_cpa_s
    )
    return clip, annotation


def synth_noise(duration_s: float, sample_rate: int, seed: int) -> AudioClip:
    """Pink noise normalized to unit peak."""
    if not duration_s > 0:
        raise ValueError(f"duration_s must be positive, got {duration_s}")
    n = int(round(duration_s * sample_rate))
    pink = _pink(n, sample_rate, np.random.default_rng(seed))
    pink /= np.max(np.abs(pink))
    return AudioClip(samples=pink.astype(np.float32), sample_rate=sample_rate)


# ---------- Datasets ------------------
def _vehicle_clip_spec(
    spec: SynthDatasetSpec, profile: VehicleProfile, index: int
) -> PassBySpec:
    rng = derive_rng(spec.master_seed, "params", profile.vehicle_id, index)
    if profile.speeds_kmh:
        speed = profile.speeds_kmh[index % len(profile.speeds_kmh)]
    else:
        speed = float(rng.uniform(spec.speed_min_kmh, spec.speed_max_kmh))
    ratio = speed / REFERENCE_SPEED_KMH
    return PassBySpec(
        speed_kmh=speed,
        t_cpa_s=float(
            rng.uniform(spec.t_cpa_margin_s, spec.duration_s - spec.t_cpa_margin_s)
        ),
        cpa_distance_m=float(rng.uniform(spec.cpa_distance_min_m, spec.cpa_distance_max_m)),
        duration_s=spec.duration_s,
        sample_rate=spec.sample_rate,
        engine_f0_hz=profile.base_f0_hz * (ratio if profile.speed_correlated_f0 else 1.0),
        n_harmonics=profile.n_harmonics,
        harmonic_rolloff_db=profile.harmonic_rolloff_db,
        broadband_level=profile.broadband_level * ratio**2,
        snr_db=float(rng.uniform(spec.snr_min_db, spec.snr_max_db)),
        seed=derive_seed(spec.master_seed, "audio", profile.vehicle_id, index),
    )


def synth_dataset(spec: SynthDatasetSpec) -> Manifest:
    """Write vehicle and noise WAVs plus `manifest.csv` under `spec.output_dir`.

    Every clip's parameters and audio come from seeds derived from the
    master seed, so regeneration is byte-identical.
    """
    root = Path(spec.output_dir)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    (root / "noise").mkdir(parents=True, exist_ok=True)

    entries = []
    for profile in spec.vehicles:
        for index in range(spec.clips_per_vehicle):
            clip, annotation = synth_passby(_vehicle_clip_spec(spec, profile, index))
            relative = f"clips/{profile.vehicle_id}_{index:03d}.wav"
            write_wav(root / relative, clip)
            annotation = annotation.model_copy(update={"vehicle_id": profile.vehicle_id})
            entries.append(ManifestEntry(path=relative, annotation=annotation))
        logger.info(
            f"Synthesized {spec.clips_per_vehicle} pass-bys of vehicle {profile.vehicle_id}"
        )

    for index in range(spec.n_noise_clips):
        clip = synth_noise(
            spec.duration_s,
            spec.sample_rate,
            derive_seed(spec.master_seed, "noise", index),
        )
        level_rng = derive_rng(spec.master_seed, "noise-level", index)
        target = 10.0 ** (
            level_rng.uniform(spec.noise_rms_min_dbfs, spec.noise_rms_max_dbfs) / 20.0
        )
        samples = clip.samples.astype(np.float64) * target / _rms(clip.samples.astype(np.float64))
        relative = f"noise/noise_{index:03d}.wav"
        write_wav(root / relative, AudioClip(samples=samples, sample_rate=spec.sample_rate))
        entries.append(
            ManifestEntry(path=relative, annotation=ClipAnnotation(has_vehicle=False))
        )

    manifest = Manifest(entries=entries, root=root)
    save_manifest(manifest, root / "manifest.csv")
    logger.info(
        f"Dataset in '{root}': {len(manifest.vehicle_entries)} vehicle clips, "
        f"{len(manifest.noise_entries)} noise clips"
    )
    return manifest


def benchmark_dataset_spec(
    output_dir: str | Path, master_seed: int = settings.MASTER_SEED
) -> SynthDatasetSpec:
    """Ten vehicles with 30 pass-bys each at 30-105 km/h, plus 71 noise clips."""
    vehicles = [
        VehicleProfile(
            vehicle_id=f"V{i + 1:02d}",
            base_f0_hz=40.0 + 5.0 * i,
            n_harmonics=6 + i % 5,
            harmonic_rolloff_db=2.0 + 0.25 * (i % 4),
            broadband_level=0.2 + 0.05 * (i % 5),
        )
        for i in range(10)
    ]
    return SynthDatasetSpec(
        vehicles=vehicles,
        clips_per_vehicle=30,
        n_noise_clips=71,
        output_dir=Path(output_dir),
        master_seed=master_seed,
    )

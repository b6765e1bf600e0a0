"""services/audio_service.py

Reading/writing audio clips and dataset manifests.

WAV files are read with soundfile (codec introspection, integer PCM
normalized to [-1, 1]) and written with scipy.io.wavfile as 32-bit float
PCM. scipy writes no timestamped PEAK chunk, so regenerated files are
byte-identical.
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import soundfile as sf
from pydantic import ValidationError
from scipy.io import wavfile

from app.exceptions import (
    AnnotationError,
    AudioFormatError,
    AudioWriteError,
    ManifestSchemaError,
    PreconditionError,
    UnsupportedAudioError,
)
from app.schemas import AudioClip, ClipAnnotation, Manifest, ManifestEntry

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["path", "vehicle_id", "speed_kmh", "t_cpa_s", "has_vehicle"]
WAV_FORMATS = {"WAV", "WAVEX", "RF64"}
PCM_SUBTYPES = {"PCM_U8", "PCM_16", "PCM_24", "PCM_32", "FLOAT", "DOUBLE"}
_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


def read_wav(path: str | Path) -> AudioClip:
    """Read a WAV file as a mono clip.

    Multichannel files are downmixed by averaging the channels.

    Raises:
        FileNotFoundError: If the file does not exist.
        AudioFormatError: If the file is not a WAV container or is malformed.
        UnsupportedAudioError: If the codec is not integer/float PCM.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"WAV file '{path}' does not exist")

    try:
        info = sf.info(str(path))
    except (sf.SoundFileError, RuntimeError) as e:
        raise AudioFormatError(f"Cannot parse WAV header of '{path}': {e}") from e

    if info.format not in WAV_FORMATS:
        raise AudioFormatError(f"'{path}' is a {info.format} file, not WAV")
    if info.subtype not in PCM_SUBTYPES:
        raise UnsupportedAudioError(
            f"'{path}' uses unsupported codec {info.subtype}; only PCM is accepted"
        )

    try:
        data, sample_rate = sf.read(str(path), dtype="float32", always_2d=True)
    except (sf.SoundFileError, RuntimeError) as e:
        raise AudioFormatError(f"Cannot decode WAV data of '{path}': {e}") from e

    if data.shape[1] == 1:
        samples = data[:, 0]
    else:
        samples = data.astype(np.float64).mean(axis=1)

    clip = AudioClip(samples=samples, sample_rate=int(sample_rate))
    logger.debug(
        f"Read '{path}': {clip.samples.size} samples at {clip.sample_rate} Hz "
        f"({info.subtype}, {info.channels} channel(s))"
    )
    return clip


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as 32-bit float PCM mono WAV (values are not clamped).

    Raises:
        PreconditionError: If the clip has no samples.
        AudioWriteError: If the file cannot be written.
    """
    samples = np.asarray(clip.samples, dtype=np.float32)
    if samples.size == 0:
        raise PreconditionError("Cannot write an empty clip")
    path = Path(path)
    try:
        wavfile.write(str(path), clip.sample_rate, samples)
    except OSError as e:
        logger.error(f"Writing '{path}' failed: {e}")
        raise AudioWriteError(f"Cannot write WAV file '{path}': {e}") from e
    logger.debug(f"Wrote '{path}' ({samples.size} samples)")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"has_vehicle must be true/false, got '{text}'")


def _parse_optional_float(text: str, column: str) -> float | None:
    text = text.strip()
    if not text:
        return None
    try:
        return float(text)
    except ValueError as e:
        raise ValueError(f"{column} is not a number: '{text}'") from e


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest CSV with header `path,vehicle_id,speed_kmh,t_cpa_s,has_vehicle`.

    Every row is validated; all offending rows are reported together.

    Raises:
        ManifestSchemaError: If a required column is missing.
        AnnotationError: If any row violates the annotation invariants.
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestSchemaError(f"Manifest '{path}' is missing column(s) {missing}")

    entries = []
    problems = []
    seen_paths = set()
    # header is line 1, first data row is line 2
    for line_no, row in enumerate(frame.itertuples(index=False), start=2):
        clip_path = row.path.strip()
        try:
            if not clip_path:
                raise ValueError("path is empty")
            if clip_path in seen_paths:
                raise ValueError(f"path '{clip_path}' is repeated")
            annotation = ClipAnnotation(
                vehicle_id=row.vehicle_id.strip(),
                has_vehicle=_parse_bool(row.has_vehicle),
                speed_kmh=_parse_optional_float(row.speed_kmh, "speed_kmh"),
                t_cpa_s=_parse_optional_float(row.t_cpa_s, "t_cpa_s"),
            )
        except ValidationError as e:
            reasons = ", ".join(err["msg"] for err in e.errors())
            problems.append(f"row {line_no} ({clip_path}): {reasons}")
            continue
        except ValueError as e:
            problems.append(f"row {line_no} ({clip_path}): {e}")
            continue
        seen_paths.add(clip_path)
        entries.append(ManifestEntry(path=clip_path, annotation=annotation))

    if problems:
        logger.warning(f"Manifest '{path}' has {len(problems)} invalid row(s)")
        raise AnnotationError(problems)

    logger.info(f"Loaded manifest '{path}' with {len(entries)} entries")
    return Manifest(entries=entries, root=path.parent)


def _format_optional(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest in the CSV schema read by `load_manifest`."""
    rows = [
        {
            "path": e.path,
            "vehicle_id": e.annotation.vehicle_id,
            "speed_kmh": _format_optional(e.annotation.speed_kmh),
            "t_cpa_s": _format_optional(e.annotation.t_cpa_s),
            "has_vehicle": "true" if e.annotation.has_vehicle else "false",
        }
        for e in manifest.entries
    ]
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    frame.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    logger.info(f"Wrote manifest '{path}' with {len(rows)} entries")


def resolve_clip_path(manifest: Manifest, entry: ManifestEntry) -> Path:
    clip_path = Path(entry.path)
    if clip_path.is_absolute() or manifest.root is None:
        return clip_path
    return manifest.root / clip_path


def validate_protocol_clip(
    clip: AudioClip,
    annotation: ClipAnnotation,
    duration_s: float | None,
    sample_rate: int | None,
) -> None:
    """Check the fixed-length experiment protocol for one clip.

    Raises:
        PreconditionError: If the sample rate or duration differ from the protocol.
        AnnotationError: If the CPA lies outside the clip.
    """
    if sample_rate is not None and clip.sample_rate != sample_rate:
        raise PreconditionError(
            f"Clip sample rate {clip.sample_rate} Hz, protocol requires {sample_rate} Hz"
        )
    if duration_s is not None and abs(clip.duration_s - duration_s) > 0.5 / clip.sample_rate:
        raise PreconditionError(
            f"Clip lasts {clip.duration_s:.6f} s, protocol requires {duration_s} s"
        )
    if annotation.t_cpa_s is not None and annotation.t_cpa_s > clip.duration_s:
        raise AnnotationError(
            [f"t_cpa_s {annotation.t_cpa_s} exceeds clip duration {clip.duration_s}"]
        )

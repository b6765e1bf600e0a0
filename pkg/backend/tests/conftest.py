import numpy as np
import pytest
from app.schemas import AudioClip, ClipAnnotation, FeatureMatrix
from app.services.detection_service import ContextSpec, DetectorConfig
from app.services.feature_service import FeatureConfig, MelConfig, StftConfig
from app.services.neural_service import TrainConfig

SAMPLE_RATE = 44100


@pytest.fixture
def rng() -> np.random.Generator:
    """A fixed-seed generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def sine_clip() -> AudioClip:
    """One second of a 1 kHz sine at half scale."""
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    return AudioClip(samples=0.5 * np.sin(2 * np.pi * 1000.0 * t), sample_rate=SAMPLE_RATE)


@pytest.fixture
def small_feature_config() -> FeatureConfig:
    """A cheap STFT/mel setup for tests that do not check full-size dimensions."""
    return FeatureConfig(
        stft=StftConfig(window_len=1024, hop=512),
        mel=MelConfig(n_mel=16, f_low=0.0, f_high=8000.0),
    )


@pytest.fixture
def tiny_detector_config() -> DetectorConfig:
    """A detector small enough to train in a fraction of a second."""
    return DetectorConfig(
        context=ContextSpec(q=2, stride=2),
        stage1_hidden=[8],
        stage2_hidden=[5],
        stage2_window=5,
        stage1_train=TrainConfig(epochs=5, batch_size=32, learning_rate=1e-2, seed=1),
        stage2_train=TrainConfig(epochs=5, batch_size=32, learning_rate=1e-2, seed=2),
    )


@pytest.fixture
def make_lms():
    """Builds an LMS FeatureMatrix from a frames x bands array."""

    def _make(values: np.ndarray, frame_period_s: float = 0.025) -> FeatureMatrix:
        return FeatureMatrix(kind="LMS", values=values, frame_period_s=frame_period_s)

    return _make


@pytest.fixture
def vehicle_annotation():
    """Builds a vehicle ClipAnnotation."""

    def _make(t_cpa_s: float, speed_kmh: float = 60.0, vehicle_id: str = "A"):
        return ClipAnnotation(
            vehicle_id=vehicle_id, has_vehicle=True, speed_kmh=speed_kmh, t_cpa_s=t_cpa_s
        )

    return _make

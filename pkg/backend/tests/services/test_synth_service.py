import numpy as np
import pytest
from app.exceptions import DomainError
from app.services import audio_service, synth_service
from app.services.synth_service import PassBySpec, SynthDatasetSpec, VehicleProfile
from pydantic import ValidationError

SR = 8000


def _envelope(samples: np.ndarray, sample_rate: int, window_s: float = 0.1) -> np.ndarray:
    """RMS over consecutive non-overlapping windows."""
    size = int(round(window_s * sample_rate))
    n = samples.size // size
    frames = samples[: n * size].astype(np.float64).reshape(n, size)
    return np.sqrt(np.mean(frames**2, axis=1))


def _clean_spec(**overrides) -> PassBySpec:
    """A tonal pass-by at low sample rate with negligible ambient noise."""
    base = {
        "speed_kmh": 60.0,
        "t_cpa_s": 5.0,
        "cpa_distance_m": 5.0,
        "duration_s": 10.0,
        "sample_rate": SR,
        "broadband_level": 0.0,
        "snr_db": 60.0,
        "seed": 3,
    }
    return PassBySpec(**{**base, **overrides})


def _peak_frequency(samples: np.ndarray, sample_rate: int) -> float:
    windowed = samples.astype(np.float64) * np.hanning(samples.size)
    spectrum = np.abs(np.fft.rfft(windowed))
    return float(np.fft.rfftfreq(samples.size, 1.0 / sample_rate)[np.argmax(spectrum)])


@pytest.fixture
def small_dataset_spec(tmp_path) -> SynthDatasetSpec:
    """Two vehicles x two 2 s clips at 8 kHz, plus two noise clips."""
    return SynthDatasetSpec(
        vehicles=[
            VehicleProfile(vehicle_id="A", speeds_kmh=[40.0, 80.0]),
            VehicleProfile(vehicle_id="B", base_f0_hz=45.0),
        ],
        clips_per_vehicle=2,
        n_noise_clips=2,
        duration_s=2.0,
        sample_rate=SR,
        t_cpa_margin_s=0.5,
        output_dir=tmp_path / "data",
        master_seed=7,
    )


# --- Tests for doppler_frequency ---


class TestDopplerFrequency:
    def test_stationary_source(self):
        assert synth_service.doppler_frequency(100.0, 0.0) == 100.0

    def test_approaching_source_is_shifted_up(self):
        assert synth_service.doppler_frequency(100.0, 20.0, 343.0) == pytest.approx(
            106.19, abs=0.01
        )

    def test_symmetric_speeds_multiply_to_identity(self):
        up = synth_service.doppler_frequency(100.0, 20.0, 343.0)
        down = synth_service.doppler_frequency(100.0, -20.0, 343.0)

        assert up * down == pytest.approx(100.0**2 * 343.0**2 / (343.0**2 - 20.0**2))

    def test_vectorized(self):
        observed = synth_service.doppler_frequency(100.0, np.array([-10.0, 0.0, 10.0]))

        assert observed.shape == (3,)
        assert observed[0] < 100.0 < observed[2]

    @pytest.mark.parametrize("v", [343.0, -400.0])
    def test_sonic_speed_raises_domain_error(self, v):
        with pytest.raises(DomainError):
            synth_service.doppler_frequency(100.0, v, 343.0)


# --- Tests for synth_passby ---


class TestSynthPassby:
    def test_annotation_and_length(self):
        clip, annotation = synth_service.synth_passby(_clean_spec())

        assert clip.samples.size == 10 * SR
        assert clip.sample_rate == SR
        assert annotation.has_vehicle
        assert (annotation.speed_kmh, annotation.t_cpa_s) == (60.0, 5.0)

    @pytest.mark.parametrize("t_cpa", [3.0, 5.0, 6.5])
    def test_envelope_peaks_at_the_cpa(self, t_cpa):
        clip, _ = synth_service.synth_passby(_clean_spec(t_cpa_s=t_cpa, snr_db=10.0))

        envelope = _envelope(clip.samples, SR)
        peak_time = (int(np.argmax(envelope)) + 0.5) * 0.1

        assert abs(peak_time - t_cpa) <= 0.2

    def test_same_spec_is_bit_identical(self):
        a, _ = synth_service.synth_passby(_clean_spec(broadband_level=0.3, snr_db=15.0))
        b, _ = synth_service.synth_passby(_clean_spec(broadband_level=0.3, snr_db=15.0))

        np.testing.assert_array_equal(a.samples, b.samples)

    def test_different_seeds_differ(self):
        a, _ = synth_service.synth_passby(_clean_spec(seed=1))
        b, _ = synth_service.synth_passby(_clean_spec(seed=2))

        assert not np.array_equal(a.samples, b.samples)

    def test_doubling_distance_halves_peak_envelope(self):
        near, _ = synth_service.synth_passby(_clean_spec(cpa_distance_m=5.0))
        far, _ = synth_service.synth_passby(_clean_spec(cpa_distance_m=10.0))

        ratio = _envelope(far.samples, SR).max() / _envelope(near.samples, SR).max()

        assert ratio == pytest.approx(0.5, rel=0.05)

    def test_faster_pass_by_has_narrower_envelope(self):
        widths = []
        for speed in (30.0, 60.0, 90.0):
            clip, _ = synth_service.synth_passby(_clean_spec(speed_kmh=speed))
            envelope = _envelope(clip.samples, SR)
            widths.append(int(np.sum(envelope >= envelope.max() / 2.0)))

        assert widths[0] > widths[1] > widths[2]

    def test_doppler_ridge_falls_through_the_cpa(self):
        # ARRANGE: a single 500 Hz harmonic at 90 km/h (25 m/s).
        spec = _clean_spec(speed_kmh=90.0, engine_f0_hz=500.0, n_harmonics=1)
        clip, _ = synth_service.synth_passby(spec)
        half_second = SR // 2

        # ACT: dominant frequency 3 s before and 3 s after the CPA
        before = _peak_frequency(clip.samples[2 * SR : 2 * SR + half_second], SR)
        after = _peak_frequency(clip.samples[8 * SR - half_second : 8 * SR], SR)

        # ASSERT: 500 * 343 / (343 -+ 25) is about 539 / 466 Hz
        assert before > 500.0 > after
        assert before == pytest.approx(539.3, abs=5.0)
        assert after == pytest.approx(466.0, abs=5.0)

    def test_harmonics_above_nyquist_are_dropped(self):
        clip, _ = synth_service.synth_passby(
            _clean_spec(engine_f0_hz=2000.0, n_harmonics=8, duration_s=2.0, t_cpa_s=1.0)
        )

        assert np.all(np.isfinite(clip.samples))

    def test_cpa_outside_clip_is_rejected(self):
        with pytest.raises(ValidationError):
            _clean_spec(t_cpa_s=10.0)

    def test_fundamental_above_nyquist_is_rejected(self):
        # 3900 Hz at 60 km/h shifts to about 4100 Hz on approach, past the 4 kHz Nyquist.
        with pytest.raises(ValidationError, match="Nyquist"):
            _clean_spec(engine_f0_hz=3900.0)

    def test_fundamental_just_below_nyquist_is_audible(self):
        clip, _ = synth_service.synth_passby(
            _clean_spec(engine_f0_hz=3500.0, duration_s=2.0, t_cpa_s=1.0)
        )

        assert np.all(np.isfinite(clip.samples))
        assert np.abs(clip.samples).max() > 0.0


# --- Tests for synth_noise ---


class TestSynthNoise:
    def test_peak_is_normalized(self):
        clip = synth_service.synth_noise(2.0, SR, seed=1)

        assert np.max(np.abs(clip.samples)) == pytest.approx(1.0)

    def test_different_seeds_differ(self):
        a = synth_service.synth_noise(1.0, SR, seed=1)
        b = synth_service.synth_noise(1.0, SR, seed=2)

        assert not np.array_equal(a.samples, b.samples)

    def test_rms_is_stationary_across_halves(self):
        samples = synth_service.synth_noise(10.0, SR, seed=4).samples.astype(np.float64)
        first, second = np.split(samples, 2)

        ratio = np.sqrt(np.mean(first**2) / np.mean(second**2))

        assert ratio == pytest.approx(1.0, rel=0.2)

    def test_non_positive_duration_is_rejected(self):
        with pytest.raises(ValueError):
            synth_service.synth_noise(0.0, SR, seed=1)


# --- Tests for synth_dataset ---


class TestSynthDataset:
    def test_writes_clips_and_manifest(self, small_dataset_spec):
        manifest = synth_service.synth_dataset(small_dataset_spec)
        root = small_dataset_spec.output_dir

        assert len(manifest.vehicle_entries) == 4
        assert len(manifest.noise_entries) == 2
        assert [e.path for e in manifest.vehicle_entries] == [
            "clips/A_000.wav",
            "clips/A_001.wav",
            "clips/B_000.wav",
            "clips/B_001.wav",
        ]
        assert audio_service.load_manifest(root / "manifest.csv").entries == manifest.entries

    def test_clips_follow_the_profiles(self, small_dataset_spec):
        manifest = synth_service.synth_dataset(small_dataset_spec)

        speeds_a = [e.annotation.speed_kmh for e in manifest.vehicle_entries[:2]]
        speeds_b = [e.annotation.speed_kmh for e in manifest.vehicle_entries[2:]]
        assert speeds_a == [40.0, 80.0]
        assert all(30.0 <= s <= 105.0 for s in speeds_b)
        for entry in manifest.vehicle_entries:
            assert 0.5 <= entry.annotation.t_cpa_s <= 1.5

    def test_noise_levels_are_in_range(self, small_dataset_spec):
        manifest = synth_service.synth_dataset(small_dataset_spec)

        for entry in manifest.noise_entries:
            clip = audio_service.read_wav(audio_service.resolve_clip_path(manifest, entry))
            level = 20 * np.log10(np.sqrt(np.mean(clip.samples.astype(np.float64) ** 2)))
            assert -55.01 <= level <= -34.99
            assert clip.samples.size == 2 * SR

    def test_regeneration_is_byte_identical(self, small_dataset_spec, tmp_path):
        again = small_dataset_spec.model_copy(update={"output_dir": tmp_path / "again"})

        synth_service.synth_dataset(small_dataset_spec)
        synth_service.synth_dataset(again)

        first = sorted(p.relative_to(small_dataset_spec.output_dir) for p in small_dataset_spec.output_dir.rglob("*.*"))
        second = sorted(p.relative_to(again.output_dir) for p in again.output_dir.rglob("*.*"))
        assert first == second
        for relative in first:
            assert (small_dataset_spec.output_dir / relative).read_bytes() == (
                again.output_dir / relative
            ).read_bytes()

    def test_zero_noise_clips_gives_vehicle_rows_only(self, small_dataset_spec):
        spec = small_dataset_spec.model_copy(update={"n_noise_clips": 0})

        manifest = synth_service.synth_dataset(spec)

        assert all(e.annotation.has_vehicle for e in manifest.entries)

    def test_single_vehicle_is_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            SynthDatasetSpec(vehicles=[VehicleProfile(vehicle_id="A")], output_dir=tmp_path)

    def test_duplicate_vehicle_ids_are_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            SynthDatasetSpec(
                vehicles=[
                    VehicleProfile(vehicle_id="A"),
                    VehicleProfile(vehicle_id="B"),
                    VehicleProfile(vehicle_id="A"),
                ],
                output_dir=tmp_path,
            )


def test_benchmark_spec_has_300_vehicle_clips(tmp_path):
    spec = synth_service.benchmark_dataset_spec(tmp_path, master_seed=1)

    clip_specs = [
        synth_service._vehicle_clip_spec(spec, profile, i)
        for profile in spec.vehicles
        for i in range(spec.clips_per_vehicle)
    ]

    assert len(spec.vehicles) == 10
    assert len(clip_specs) == 300
    assert spec.n_noise_clips == 71
    assert all(30.0 <= c.speed_kmh <= 105.0 for c in clip_specs)
    assert all(2.0 <= c.t_cpa_s <= 8.0 for c in clip_specs)
    assert all(10.0 <= c.snr_db <= 25.0 for c in clip_specs)

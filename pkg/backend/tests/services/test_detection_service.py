import numpy as np
import pytest
from app.exceptions import AnnotationError, PreconditionError
from app.schemas import ClipAnnotation, CvmdCurve, FeatureMatrix
from app.services import detection_service, synth_service
from app.services.detection_service import ContextSpec, CvmdParams, DetectorConfig
from app.services.feature_service import FeatureConfig, FeatureService
from app.services.neural_service import TrainConfig
from app.services.synth_service import PassBySpec
from hypothesis import given
from hypothesis import strategies as st
from pydantic import ValidationError

PARAMS = CvmdParams()
FRAME_PERIOD = 1105 / 44100

finite_times = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)


# --- Fixtures ---


@pytest.fixture
def passby_items(rng, make_lms, vehicle_annotation):
    """Three 60-frame clips with a loud bump at the CPA, plus one noise clip."""
    n_frames, n_bands = 60, 4
    times = np.arange(n_frames) * 0.025
    items = []
    for t_cpa in (0.5, 0.8, 1.1):
        bump = 30.0 * np.exp(-((times - t_cpa) ** 2) / 0.02)
        values = -60.0 + bump[:, None] + rng.normal(0, 1, (n_frames, n_bands))
        items.append((make_lms(values), vehicle_annotation(t_cpa)))
    noise = -60.0 + rng.normal(0, 1, (n_frames, n_bands))
    items.append((make_lms(noise), ClipAnnotation(has_vehicle=False)))
    return items


@pytest.fixture
def trained_model(passby_items, tiny_detector_config, small_feature_config):
    """A tiny detector trained on `passby_items`."""
    return detection_service.train_detector(
        passby_items, passby_items[:2], tiny_detector_config, small_feature_config
    )


# --- Tests for cvmd_target ---


class TestCvmdTarget:
    @pytest.mark.parametrize(
        ("t", "expected"), [(5.0, 0.0), (5.3, 0.3), (7.0, 0.75), (4.25, 0.75)]
    )
    def test_examples(self, t, expected):
        assert detection_service.cvmd_target(t, 5.0, PARAMS) == pytest.approx(expected)

    @given(t_cpa=finite_times, d=finite_times)
    def test_even_around_cpa(self, t_cpa, d):
        assert detection_service.cvmd_target(
            t_cpa + d, t_cpa, PARAMS
        ) == pytest.approx(detection_service.cvmd_target(t_cpa - d, t_cpa, PARAMS))

    @given(a=finite_times, b=finite_times, t_cpa=finite_times)
    def test_one_lipschitz(self, a, b, t_cpa):
        fa = detection_service.cvmd_target(a, t_cpa, PARAMS)
        fb = detection_service.cvmd_target(b, t_cpa, PARAMS)

        assert abs(fa - fb) <= abs(a - b) + 1e-9

    @given(t=finite_times, t_cpa=finite_times)
    def test_bounded_and_saturates_at_t_d(self, t, t_cpa):
        value = detection_service.cvmd_target(t, t_cpa, PARAMS)

        assert 0.0 <= value <= PARAMS.t_d
        if abs(t - t_cpa) >= PARAMS.t_d:
            assert value == PARAMS.t_d

    def test_curve_target_without_vehicle_is_t_d_everywhere(self):
        curve = detection_service.cvmd_curve_target(np.arange(400) * FRAME_PERIOD, None, PARAMS)

        assert np.all(curve == 0.75)

    def test_non_positive_t_d_is_rejected(self):
        with pytest.raises(ValidationError):
            CvmdParams(t_d=0.0)


# --- Tests for assemble_context ---


class TestAssembleContext:
    def test_default_context_has_1000_values(self, rng, make_lms):
        lms = make_lms(rng.normal(size=(400, 40)))

        assert detection_service.assemble_context(lms, 200, ContextSpec()).size == 1000

    def test_zero_width_context_is_the_frame(self, rng, make_lms):
        lms = make_lms(rng.normal(size=(50, 40)))

        vector = detection_service.assemble_context(lms, 17, ContextSpec(q=0))

        np.testing.assert_array_equal(vector, lms.values[17])

    def test_first_frame_replicates_the_edge(self, rng, make_lms):
        lms = make_lms(rng.normal(size=(20, 3)))

        vector = detection_service.assemble_context(lms, 0, ContextSpec(q=1, stride=3))

        expected = np.concatenate([lms.values[0], lms.values[0], lms.values[3]])
        np.testing.assert_array_equal(vector, expected)

    def test_interior_frames_match_direct_slicing(self, rng, make_lms):
        lms = make_lms(rng.normal(size=(30, 5)))
        spec = ContextSpec(q=2, stride=3)

        for frame in range(6, 24):
            expected = lms.values[frame - 6 : frame + 7 : 3].reshape(-1)
            np.testing.assert_array_equal(
                detection_service.assemble_context(lms, frame, spec), expected
            )

    def test_context_matrix_rows_match_single_assembly(self, rng, make_lms):
        lms = make_lms(rng.normal(size=(15, 4)))
        spec = ContextSpec(q=2, stride=2)

        matrix = detection_service.context_matrix(lms, spec)

        assert matrix.shape == (15, 20)
        for frame in range(15):
            np.testing.assert_array_equal(
                matrix[frame], detection_service.assemble_context(lms, frame, spec)
            )

    def test_rejects_non_lms_features(self, rng):
        ms = FeatureMatrix(kind="MS", values=rng.uniform(size=(5, 4)), frame_period_s=0.025)

        with pytest.raises(PreconditionError):
            detection_service.assemble_context(ms, 0, ContextSpec(q=0))


def test_prediction_windows_replicate_edges():
    windows = detection_service.prediction_windows(np.array([1.0, 2.0, 3.0, 4.0]), 3)

    np.testing.assert_array_equal(
        windows, [[1.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [3.0, 4.0, 4.0]]
    )


# --- Tests for estimate_cpa ---


class TestEstimateCpa:
    def test_exact_target_curve_is_within_half_a_frame(self):
        times = np.arange(400) * FRAME_PERIOD
        curve = CvmdCurve(
            values=detection_service.cvmd_curve_target(times, 5.0, PARAMS),
            frame_period_s=FRAME_PERIOD,
        )

        t_cpa_hat, min_cvmd = detection_service.estimate_cpa(curve)

        assert abs(t_cpa_hat - 5.0) <= 0.0125
        assert min_cvmd <= 0.0125

    def test_constant_curve_picks_frame_zero(self):
        curve = CvmdCurve(values=np.full(50, 0.75), frame_period_s=0.025, t0_s=1.0)

        assert detection_service.estimate_cpa(curve) == (1.0, 0.75)

    def test_ties_go_to_the_earliest_frame(self):
        values = np.full(40, 0.75)
        values[[10, 20]] = 0.1

        t_cpa_hat, _ = detection_service.estimate_cpa(
            CvmdCurve(values=values, frame_period_s=0.025)
        )

        assert t_cpa_hat == pytest.approx(10 * 0.025)

    @given(
        values=st.lists(
            st.integers(min_value=0, max_value=750), min_size=1, max_size=60
        )
    )
    def test_invariant_under_increasing_transforms(self, values):
        curve = CvmdCurve(values=np.array(values) / 1000.0, frame_period_s=0.025)
        warped = CvmdCurve(values=np.exp(3.0 * curve.values) - 7.0, frame_period_s=0.025)

        assert (
            detection_service.estimate_cpa(curve)[0]
            == detection_service.estimate_cpa(warped)[0]
        )


# --- Tests for calibrate_presence_threshold ---


class TestPresenceThreshold:
    def test_separated_sets_use_the_midpoint(self):
        result = detection_service.calibrate_presence_threshold([0.1, 0.2], [0.6, 0.7])

        assert result.threshold == pytest.approx(0.4)
        assert result.gap == pytest.approx(0.4)

    def test_overlapping_sets_minimize_errors(self, caplog):
        result = detection_service.calibrate_presence_threshold([0.1, 0.5], [0.4, 0.7])

        assert 0.4 <= result.threshold <= 0.5
        assert result.gap < 0
        assert "overlap" in caplog.text

    def test_presence_is_strictly_below_threshold(self):
        assert detection_service.vehicle_present(0.39, 0.4)
        assert not detection_service.vehicle_present(0.4, 0.4)

    def test_empty_sets_are_rejected(self):
        with pytest.raises(PreconditionError):
            detection_service.calibrate_presence_threshold([], [0.5])


# --- Tests for training and inference ---


class TestDetectorConfig:
    def test_even_stage2_window_is_rejected(self):
        with pytest.raises(ValidationError):
            DetectorConfig(stage2_window=30)

    def test_defaults_give_documented_layer_sizes(self):
        cfg = DetectorConfig()

        assert cfg.context.width * 40 == 1000
        assert cfg.stage2_window == 31
        assert (cfg.stage1_l2, cfg.stage2_l2) == (1e-4, 5e-6)


class TestTrainDetector:
    def test_model_dimensions(self, trained_model):
        assert trained_model.n_mel == 4
        assert trained_model.stage1.layer_sizes == [20, 8, 1]
        assert trained_model.stage2.layer_sizes == [5, 5, 1]
        assert trained_model.presence_threshold is None

    def test_training_is_deterministic(
        self, passby_items, tiny_detector_config, small_feature_config, trained_model
    ):
        again = detection_service.train_detector(
            passby_items, passby_items[:2], tiny_detector_config, small_feature_config
        )

        for p, q in zip(
            trained_model.stage2.parameters(), again.stage2.parameters(), strict=True
        ):
            np.testing.assert_array_equal(p, q)

    def test_stage1_fits_a_synthetic_passby_better_than_its_mean(self, small_feature_config):
        # ARRANGE: one 10 s pass-by, used for both training and validation.
        clip, annotation = synth_service.synth_passby(
            PassBySpec(speed_kmh=60.0, t_cpa_s=5.0, sample_rate=16000, seed=7)
        )
        lms = FeatureService(small_feature_config).compute_lms(clip)
        cfg = DetectorConfig(
            context=ContextSpec(q=2, stride=2),
            stage1_hidden=[16],
            stage2_hidden=[5],
            stage2_window=5,
            stage1_train=TrainConfig(epochs=30, batch_size=32, learning_rate=1e-2, seed=1),
            stage2_train=TrainConfig(epochs=5, batch_size=32, learning_rate=1e-2, seed=2),
        )

        # ACT
        model = detection_service.train_detector(
            [(lms, annotation)], [(lms, annotation)], cfg, small_feature_config
        )
        predicted = detection_service.predict_stage1(model, lms)

        # ASSERT: beats the constant predictor, whose MSE is the target variance.
        target = detection_service.cvmd_curve_target(
            lms.frame_times(), annotation.t_cpa_s, cfg.cvmd
        )
        assert np.mean((predicted - target) ** 2) < target.var()

    def test_empty_validation_set_is_rejected(
        self, passby_items, tiny_detector_config, small_feature_config
    ):
        with pytest.raises(PreconditionError):
            detection_service.train_detector(
                passby_items, [], tiny_detector_config, small_feature_config
            )

    def test_vehicle_clip_without_cpa_is_rejected(
        self, passby_items, tiny_detector_config, small_feature_config
    ):
        # ARRANGE: bypass ClipAnnotation validation to fake a half-filled row.
        lms = passby_items[0][0]
        broken = ClipAnnotation.model_construct(
            vehicle_id="B", has_vehicle=True, speed_kmh=50.0, t_cpa_s=None
        )

        # ACT & ASSERT
        with pytest.raises(AnnotationError):
            detection_service.train_detector(
                [(lms, broken)], passby_items[:1], tiny_detector_config, small_feature_config
            )


class TestPredictCvmd:
    def test_curve_has_one_clamped_value_per_frame(self, trained_model, passby_items):
        lms = passby_items[0][0]

        curve = detection_service.predict_cvmd(trained_model, lms)

        assert curve.values.shape == (lms.n_frames,)
        assert np.all((curve.values >= 0.0) & (curve.values <= 0.75))
        assert curve.frame_period_s == lms.frame_period_s

    def test_constant_input_gives_constant_curve(self, trained_model, make_lms):
        curve = detection_service.predict_cvmd(trained_model, make_lms(np.full((30, 4), -40.0)))

        np.testing.assert_allclose(curve.values, curve.values[0], atol=1e-12)

    def test_one_stage_curve_is_clamped_stage1_output(self, trained_model, passby_items):
        lms = passby_items[0][0]

        one = detection_service.predict_cvmd(trained_model, lms, use_stage2=False)
        np.testing.assert_allclose(
            one.values,
            np.clip(detection_service.predict_stage1(trained_model, lms), 0.0, 0.75),
        )

    def test_too_few_frames_raise(self, trained_model, make_lms):
        with pytest.raises(PreconditionError):
            detection_service.predict_cvmd(trained_model, make_lms(np.zeros((4, 4))))

    def test_detect_defaults_to_t_d_threshold(self, trained_model, passby_items):
        lms = passby_items[1][0]

        result = detection_service.detect(trained_model, lms)

        assert result.vehicle_present == (result.min_cvmd < 0.75)
        assert 0 <= result.cpa_frame < lms.n_frames
        assert result.t_cpa_hat == pytest.approx(result.cpa_frame * lms.frame_period_s)

    def test_explicit_threshold_overrides_model(self, trained_model, passby_items):
        result = detection_service.detect(trained_model, passby_items[0][0], threshold=-1.0)

        assert not result.vehicle_present


# --- Persistence ---


def test_saved_model_reloads_with_identical_predictions(
    tmp_path, trained_model, passby_items
):
    path = tmp_path / "detector.json"
    lms = passby_items[2][0]

    detection_service.save_detection_model(
        trained_model.model_copy(update={"presence_threshold": 0.3}), path
    )
    loaded = detection_service.load_detection_model(path)

    assert loaded.presence_threshold == 0.3
    np.testing.assert_array_equal(
        detection_service.predict_cvmd(loaded, lms).values,
        detection_service.predict_cvmd(trained_model, lms).values,
    )


def test_export_cvmd_csv(tmp_path):
    curve = CvmdCurve(values=np.array([0.75, 0.5, 0.75]), frame_period_s=0.5)
    path = tmp_path / "curve.csv"

    detection_service.export_cvmd_csv(curve, path)

    assert path.read_text().splitlines() == [
        "frame,time_s,cvmd_s",
        "0,0,0.75",
        "1,0.5,0.5",
        "2,1,0.75",
    ]


def test_feature_config_travels_with_the_model(trained_model, small_feature_config):
    assert trained_model.features == small_feature_config
    assert isinstance(trained_model.features, FeatureConfig)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmkit.errors import (
    BatchMismatch,
    DegenerateNormalizer,
    EmptyInput,
    InvalidConfig,
    ShapeMismatch,
)
from asmkit.metrics import (
    EvalConfig,
    auc,
    ced,
    ced_to_csv,
    default_eye_indices,
    evaluate,
    failure_rate,
    nme,
    pose_mae,
    report_to_csv,
)
from asmkit.shape_core import Shape

CONFIG_01 = EvalConfig(left_eye_index=0, right_eye_index=1)


def brute_force_auc(errors, upper):
    """Closed-form oracle: mean clipped headroom above each error."""
    return sum(max(0.0, upper - e) for e in errors) / (len(errors) * upper)


class TestDefaultEyeIndices:
    def test_standard_layouts(self):
        assert default_eye_indices(68) == (36, 45)
        assert default_eye_indices(98) == (60, 72)
        assert default_eye_indices(8) == (0, 4)
        assert default_eye_indices(3) == (0, 1)


class TestEvalConfig:
    def test_rejects_equal_indices(self):
        with pytest.raises(InvalidConfig):
            EvalConfig(left_eye_index=3, right_eye_index=3)

    def test_rejects_bad_thresholds(self):
        with pytest.raises(InvalidConfig):
            EvalConfig(0, 1, failure_threshold=0.0)
        with pytest.raises(InvalidConfig):
            EvalConfig(0, 1, auc_upper=-0.1)


class TestNme:
    def test_zero_for_perfect_prediction(self):
        gt = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        assert nme(gt, gt, CONFIG_01) == 0.0

    def test_uniform_offset_over_interocular_two(self):
        gt = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
        pred = gt + np.array([0.0, 1.0])
        assert abs(nme(gt, pred, CONFIG_01) - 0.5) < 1e-12

    def test_two_point_layout(self):
        d = 3.0
        gt = np.array([[0.0, 0.0], [d, 0.0]])
        pred = gt + np.array([d, 0.0])
        assert abs(nme(gt, pred, CONFIG_01) - 1.0) < 1e-12

    def test_accepts_shape_objects_and_flat_vectors(self):
        gt = Shape([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0]])
        pred = np.array([0.0, 1.0, 2.0, 1.0, 1.0, 2.0])
        expected = 1.0 / 2.0
        assert abs(nme(gt, pred, CONFIG_01) - expected) < 1e-12

    def test_degenerate_normalizer(self):
        gt = np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(DegenerateNormalizer):
            nme(gt, gt, CONFIG_01)

    def test_index_out_of_range(self):
        gt = np.zeros((3, 2))
        with pytest.raises(InvalidConfig):
            nme(gt, gt, EvalConfig(0, 5))

    def test_mismatched_points(self):
        with pytest.raises(ShapeMismatch):
            nme(np.zeros((3, 2)), np.zeros((4, 2)), CONFIG_01)

    @given(st.floats(0.1, 100.0), st.floats(-50.0, 50.0), st.floats(-50.0, 50.0))
    @settings(max_examples=40, deadline=None)
    def test_scale_and_translation_invariance(self, scale, tx, ty):
        rng = np.random.default_rng(0)
        gt = rng.normal(0, 1, (6, 2))
        pred = gt + rng.normal(0, 0.1, (6, 2))
        base = nme(gt, pred, CONFIG_01)
        shift = np.array([tx, ty])
        moved = nme(scale * gt + shift, scale * pred + shift, CONFIG_01)
        assert abs(base - moved) < 1e-9 * max(1.0, base)


class TestFailureRate:
    def test_all_zero(self):
        assert failure_rate([0.0, 0.0, 0.0], 0.1) == 0.0

    def test_half_failing(self):
        assert failure_rate([0.05, 0.15, 0.25, 0.05], 0.1) == 50.0

    def test_boundary_is_success(self):
        assert failure_rate([0.1, 0.1, 0.1], 0.1) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            failure_rate([], 0.1)


class TestCed:
    def test_single_sample(self):
        assert ced([0.07]) == [(0.07, 1.0)]

    def test_duplicates_merge(self):
        pairs = ced([0.02, 0.04, 0.04, 0.08])
        assert pairs == [(0.02, 0.25), (0.04, 0.75), (0.08, 1.0)]

    def test_all_duplicates(self):
        assert ced([0.3, 0.3, 0.3]) == [(0.3, 1.0)]

    def test_is_valid_cdf(self):
        rng = np.random.default_rng(1)
        pairs = ced(rng.uniform(0, 0.3, 100))
        errors = [e for e, _ in pairs]
        fractions = [f for _, f in pairs]
        assert errors == sorted(errors)
        assert all(b >= a for a, b in zip(fractions, fractions[1:]))
        assert 0.0 < fractions[0] <= 1.0
        assert fractions[-1] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(EmptyInput):
            ced([])


class TestAuc:
    def test_all_zero_gives_one(self):
        assert auc([0.0, 0.0], 0.1) == 1.0

    def test_all_above_upper_gives_zero(self):
        assert auc([0.5, 0.9], 0.1) == 0.0

    def test_single_midpoint(self):
        assert abs(auc([0.05], 0.1) - 0.5) < 1e-15

    def test_matches_closed_form_oracle(self):
        rng = np.random.default_rng(2)
        errors = rng.uniform(0, 0.25, 500).tolist()
        assert abs(auc(errors, 0.1) - brute_force_auc(errors, 0.1)) < 1e-12

    def test_matches_riemann_sum(self):
        rng = np.random.default_rng(3)
        errors = np.sort(rng.uniform(0, 0.2, 1000))
        upper = 0.1
        grid = (np.arange(1_000_000) + 0.5) * (upper / 1_000_000)
        cdf = np.searchsorted(errors, grid, side="right") / errors.size
        riemann = float(cdf.mean())
        assert abs(auc(errors.tolist(), upper) - riemann) < 1e-5

    def test_consistent_with_failure_rate(self):
        rng = np.random.default_rng(4)
        errors = rng.uniform(0, 0.05, 50).tolist()
        if auc(errors, 0.1) == 1.0:
            assert failure_rate(errors, 0.1) == 0.0


class TestPoseMae:
    def test_zero(self):
        batch = np.array([[1.0, 2.0, 3.0]])
        assert pose_mae(batch, batch) == (0.0, 0.0, 0.0)

    def test_symmetric_yaw_errors(self):
        gt = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        pred = np.array([[3.0, 0.0, 0.0], [-3.0, 0.0, 0.0]])
        assert pose_mae(gt, pred) == (3.0, 0.0, 0.0)

    def test_constant_pitch_offset(self):
        gt = np.zeros((4, 3))
        pred = gt.copy()
        pred[:, 1] = -2.5
        assert pose_mae(gt, pred) == (0.0, 2.5, 0.0)

    def test_mismatch(self):
        with pytest.raises(BatchMismatch):
            pose_mae(np.zeros((2, 3)), np.zeros((5, 3)))


class TestEvaluate:
    def fixture(self):
        gt = [np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]]) for _ in range(4)]
        offsets = [0.0, 0.05, 0.12, 0.3]
        pred = [g + np.array([0.0, o]) for g, o in zip(gt, offsets)]
        poses_gt = np.array([[10.0, 0.0, -5.0]] * 4)
        poses_pred = poses_gt + np.array([[1.0, -2.0, 0.5]] * 4)
        return gt, pred, poses_gt, poses_pred

    def test_report_matches_component_metrics(self):
        gt, pred, poses_gt, poses_pred = self.fixture()
        config = EvalConfig(0, 1)
        report = evaluate(gt, pred, poses_gt, poses_pred, config)
        expected_nmes = [nme(g, p, config) for g, p in zip(gt, pred)]
        assert np.allclose(report.nmes, expected_nmes, atol=1e-15)
        assert abs(report.mean_nme_percent - 100 * np.mean(expected_nmes)) < 1e-12
        assert report.failure_rate_percent == failure_rate(expected_nmes, 0.1)
        assert report.auc == auc(expected_nmes, 0.1)
        assert report.pose_mae == (1.0, 2.0, 0.5)
        assert report.n_excluded == 0

    def test_degenerate_samples_excluded_and_counted(self):
        gt, pred, poses_gt, poses_pred = self.fixture()
        gt.append(np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]))
        pred.append(gt[-1].copy())
        report = evaluate(gt, pred,
                          np.vstack([poses_gt, [[0.0, 0.0, 0.0]]]),
                          np.vstack([poses_pred, [[0.0, 0.0, 0.0]]]),
                          EvalConfig(0, 1))
        assert report.n_excluded == 1
        assert len(report.nmes) == 4

    def test_length_mismatch(self):
        gt, pred, poses_gt, poses_pred = self.fixture()
        with pytest.raises(BatchMismatch):
            evaluate(gt[:3], pred, poses_gt, poses_pred, EvalConfig(0, 1))


class TestCsvExports:
    def test_ced_csv_layout(self):
        text = ced_to_csv([(0.02, 0.25), (0.04, 1.0)], comments=["hello"])
        lines = text.splitlines()
        assert lines[0] == "# hello"
        assert lines[1] == "error,fraction"
        error, fraction = lines[2].split(",")
        assert float(error) == 0.02 and float(fraction) == 0.25

    def test_report_csv_round_trips_values(self):
        gt = [np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])] * 3
        pred = [g + 0.01 for g in gt]
        poses = np.zeros((3, 3))
        report = evaluate(gt, pred, poses, poses, EvalConfig(0, 1))
        text = report_to_csv(report)
        header, row = text.splitlines()
        fields = dict(zip(header.split(","), row.split(",")))
        assert int(fields["samples"]) == 3
        assert float(fields["mean_nme_percent"]) == report.mean_nme_percent
        assert float(fields["auc"]) == report.auc

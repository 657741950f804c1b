import math

import numpy as np
import pytest

from app.constants import ErrorScope
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.metrics import (
    ErrorReport,
    error_report,
    mae,
    per_flow_rmse,
    report_csv_row,
    rmse,
    scale_to_training_range,
    write_report,
)
from app.lib.tmdata import NormalizationParams


class TestRmseMae:
    def test_identical_inputs(self):
        truth = np.arange(8, dtype=float).reshape(2, 2, 2)
        assert rmse(truth, truth) == 0.0
        assert mae(truth, truth) == 0.0

    def test_single_entry(self):
        assert rmse([[[0.0]]], [[[3.0]]]) == 3.0

    def test_mae_of_symmetric_errors(self):
        assert mae([0.0, 0.0], [1.0, -1.0]) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(TmException) as e:
            rmse(np.zeros((2, 2, 2)), np.zeros((2, 3, 3)))
        assert e.value.code == Status.DIMENSION_ERROR

    def test_empty(self):
        with pytest.raises(TmException) as e:
            mae(np.zeros((0, 2, 2)), np.zeros((0, 2, 2)))
        assert e.value.code == Status.EMPTY_INPUT

    def test_direct_formula_and_ordering(self, rng):
        for _ in range(100):
            truth = rng.uniform(0, 10, size=(2, 2, 2))
            pred = rng.uniform(0, 10, size=(2, 2, 2))
            diffs = [p - t for p, t in zip(pred.reshape(-1).tolist(), truth.reshape(-1).tolist())]

            assert rmse(truth, pred) == pytest.approx(math.sqrt(math.fsum(d * d for d in diffs) / 8), abs=1e-12)
            assert mae(truth, pred) == pytest.approx(math.fsum(abs(d) for d in diffs) / 8, abs=1e-12)
            assert rmse(truth, pred) >= mae(truth, pred)
            assert rmse(truth, pred) == rmse(pred, truth)

    def test_permutation_invariance(self, rng):
        truth = rng.uniform(size=(5, 3, 3))
        pred = rng.uniform(size=(5, 3, 3))
        order = rng.permutation(5)
        assert rmse(truth[order], pred[order]) == pytest.approx(rmse(truth, pred), rel=1e-12)
        assert mae(truth[order], pred[order]) == pytest.approx(mae(truth, pred), rel=1e-12)

    def test_per_flow(self):
        truth = np.zeros((2, 1, 2))
        pred = np.array([[[3.0, 0.0]], [[4.0, 0.0]]])
        np.testing.assert_allclose(per_flow_rmse(truth, pred), [math.sqrt(12.5), 0.0])


class TestErrorReport:
    def test_normalized_scope_divides_by_training_range(self):
        params = NormalizationParams(per_flow_min=[0.0], per_flow_max=[10.0])
        truth = np.full((4, 1, 1), 5.0)
        report = error_report(truth, truth + 1.0, ErrorScope.NORMALIZED, params)
        assert report.rmse == pytest.approx(0.1, abs=1e-12)
        assert report.mae == pytest.approx(0.1, abs=1e-12)
        assert report.n == 4

    def test_normalized_scope_does_not_clip(self):
        params = NormalizationParams(per_flow_min=[0.0], per_flow_max=[10.0])
        scaled = scale_to_training_range(np.array([[[20.0]], [[-5.0]]]), params)
        np.testing.assert_allclose(scaled.reshape(-1), [2.0, -0.5])

    def test_normalized_scope_needs_parameters(self):
        with pytest.raises(TmException) as e:
            error_report(np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), ErrorScope.NORMALIZED)
        assert e.value.code == Status.DOMAIN_ERROR

    def test_identical_inputs_give_zero_report(self):
        truth = np.ones((3, 2, 2))
        report = error_report(truth, truth, per_flow=True)
        assert (report.rmse, report.mae) == (0.0, 0.0)
        assert report.scope == ErrorScope.DENORMALIZED
        assert not report.per_flow_rmse.any()

    def test_rmse_below_mae_is_rejected(self):
        with pytest.raises(TmException) as e:
            ErrorReport(rmse=0.5, mae=1.0, n=1, scope=ErrorScope.DENORMALIZED)
        assert e.value.code == Status.NUMERIC_ERROR

    def test_serialisation(self, tmp_path):
        report = error_report(np.zeros((2, 1, 2)), np.array([[[3.0, 0.0]], [[4.0, 0.0]]]), per_flow=True)
        text = write_report(report, tmp_path / "errors.txt").read_text(encoding="utf-8")
        assert "scope=denormalized\n" in text
        assert "n=2\n" in text
        assert "worst_flow=0\n" in text
        assert report_csv_row(report, "histogram", 7) == ["histogram", 7, "denormalized", 2, report.rmse, report.mae]

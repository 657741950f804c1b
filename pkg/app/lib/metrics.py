"""Error metrics between predicted and ground-truth traffic matrix sequences."""
from pathlib import Path
from typing import Any, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.constants import ErrorScope
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.tmdata import NormalizationParams
from app.utils.csvio import write_key_values

REPORT_CSV_HEADER = ("method", "seed", "scope", "n", "rmse", "mae")


class ErrorReport(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rmse: float = Field(ge=0)
    mae: float = Field(ge=0)
    n: int = Field(ge=1)
    scope: ErrorScope
    per_flow_rmse: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_order(self):
        # power-mean inequality, with slack for rounding
        if self.rmse < self.mae * (1 - 1e-12) - 1e-15:
            raise TmException(Status.NUMERIC_ERROR, f"rmse {self.rmse} below mae {self.mae}")
        return self


def _pair(truth, pred) -> tuple:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise TmException(Status.DIMENSION_ERROR, f"shape mismatch: truth {truth.shape}, prediction {pred.shape}")
    if truth.size == 0:
        raise TmException(Status.EMPTY_INPUT, "no values to compare")
    return truth, pred


def rmse(truth, pred) -> float:
    truth, pred = _pair(truth, pred)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mae(truth, pred) -> float:
    truth, pred = _pair(truth, pred)
    return float(np.mean(np.abs(pred - truth)))


def per_flow_rmse(truth, pred) -> np.ndarray:
    """RMSE per flow over windows; inputs are W x N x N or W x F."""
    truth, pred = _pair(truth, pred)
    columns = (pred - truth).reshape(len(truth), -1)
    return np.sqrt(np.mean(columns ** 2, axis=0))


def scale_to_training_range(values, p: NormalizationParams) -> np.ndarray:
    """Affine min-max scaling with training-split parameters, unclipped. Constant flows map to 0."""
    values = np.asarray(values, dtype=np.float64)
    columns = values.reshape(len(values), -1)
    if columns.shape[1] != p.flow_count:
        raise TmException(Status.DIMENSION_ERROR,
                          f"{columns.shape[1]} flows but normalization covers {p.flow_count}")
    constant = p.constant
    span = np.where(constant, 1.0, p.span)
    scaled = np.where(constant, 0.0, (columns - p.per_flow_min) / span)
    return scaled.reshape(values.shape)


def error_report(truth, pred, scope: ErrorScope = ErrorScope.DENORMALIZED,
                 params: Optional[NormalizationParams] = None, per_flow: bool = False) -> ErrorReport:
    truth, pred = _pair(truth, pred)
    scope = ErrorScope(scope)
    if scope == ErrorScope.NORMALIZED:
        if params is None:
            raise TmException(Status.DOMAIN_ERROR, "normalized scope needs training-split normalization parameters")
        truth = scale_to_training_range(truth, params)
        pred = scale_to_training_range(pred, params)
    return ErrorReport(
        rmse=rmse(truth, pred),
        mae=mae(truth, pred),
        n=len(truth),
        scope=scope,
        per_flow_rmse=per_flow_rmse(truth, pred) if per_flow else None,
    )


def write_report(report: ErrorReport, path: Union[str, Path]) -> Path:
    values = {"scope": report.scope.value, "n": report.n, "rmse": report.rmse, "mae": report.mae}
    if report.per_flow_rmse is not None:
        values["worst_flow"] = int(np.argmax(report.per_flow_rmse))
        values["worst_flow_rmse"] = float(np.max(report.per_flow_rmse))
    return write_key_values(path, values)


def report_csv_row(report: ErrorReport, method: str, seed: int) -> List[Any]:
    """One row under REPORT_CSV_HEADER for cross-run aggregation."""
    return [method, seed, report.scope.value, report.n, report.rmse, report.mae]

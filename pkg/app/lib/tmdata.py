"""Traffic matrix data model: ingestion, normalization, chronological splits and sliding windows."""
import csv
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator, model_validator

from app.constants import CANONICAL_HEADER
from app.constants.status import Status
from app.lib.exception import TmException
from app.utils.csvio import format_cell
from app.utils.logger import logger


def _frozen_array(value, dtype) -> np.ndarray:
    array = np.array(value, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


class TmSeries(BaseModel):
    """Ordered sequence of N x N traffic matrices (bytes per interval)."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    node_count: int = Field(gt=0)
    timestamps: np.ndarray
    matrices: np.ndarray
    interval_seconds: int = Field(gt=0)

    @field_validator("timestamps", mode="before")
    @classmethod
    def coerce_timestamps(cls, value):
        return _frozen_array(value, np.int64).reshape(-1)

    @field_validator("matrices", mode="before")
    @classmethod
    def coerce_matrices(cls, value, info: ValidationInfo):
        array = _frozen_array(value, np.float64)
        n = info.data.get("node_count")
        if array.size == 0 and n:
            # empty slice keeps its T x N x N shape so concatenation works
            array = _frozen_array(np.zeros((0, n, n)), np.float64)
        return array

    @model_validator(mode="after")
    def validate_series(self):
        n = self.node_count
        if self.matrices.ndim != 3 or self.matrices.shape[1:] != (n, n):
            raise TmException(Status.DIMENSION_ERROR,
                              f"matrices must be T x {n} x {n}, got shape {self.matrices.shape}")
        if len(self.matrices) != len(self.timestamps):
            raise TmException(Status.DIMENSION_ERROR,
                              f"{len(self.matrices)} matrices but {len(self.timestamps)} timestamps")
        if not np.all(np.isfinite(self.matrices)) or np.any(self.matrices < 0):
            raise TmException(Status.DOMAIN_ERROR, "traffic matrix entries must be finite and >= 0")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise TmException(Status.ORDERING_ERROR, "timestamps must be strictly increasing")
        return self

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def flow_count(self) -> int:
        return self.node_count * self.node_count

    def flow_matrix(self) -> np.ndarray:
        """T x N² view with columns in flow_id order."""
        return self.matrices.reshape(len(self), self.flow_count)

    def slice(self, start: int, stop: Optional[int] = None) -> "TmSeries":
        return TmSeries(
            node_count=self.node_count,
            timestamps=self.timestamps[start:stop],
            matrices=self.matrices[start:stop],
            interval_seconds=self.interval_seconds,
        )


class FlowSeries(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    src: int = Field(ge=0)
    dst: int = Field(ge=0)
    flow_id: int = Field(ge=0)
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def coerce_values(cls, value):
        return _frozen_array(value, np.float64).reshape(-1)


class NormalizationParams(BaseModel):
    """Per-flow min/max fitted on the training split."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    per_flow_min: np.ndarray
    per_flow_max: np.ndarray

    @field_validator("per_flow_min", "per_flow_max", mode="before")
    @classmethod
    def coerce_bounds(cls, value):
        return _frozen_array(value, np.float64).reshape(-1)

    @model_validator(mode="after")
    def validate_bounds(self):
        if self.per_flow_min.shape != self.per_flow_max.shape:
            raise TmException(Status.DIMENSION_ERROR, "per_flow_min and per_flow_max differ in length")
        if np.any(self.per_flow_max < self.per_flow_min):
            raise TmException(Status.DOMAIN_ERROR, "per_flow_max must be >= per_flow_min")
        return self

    @property
    def flow_count(self) -> int:
        return len(self.per_flow_min)

    @property
    def constant(self) -> np.ndarray:
        return self.per_flow_max == self.per_flow_min

    @property
    def span(self) -> np.ndarray:
        return self.per_flow_max - self.per_flow_min


class WindowedDataset(BaseModel):
    """Supervised windows: the first L-1 steps are inputs, step L is the target."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    inputs: np.ndarray
    targets: np.ndarray
    window_length: int = Field(ge=2)
    flow_ids: List[int]

    @model_validator(mode="after")
    def validate_shapes(self):
        w, steps, f = self.inputs.shape
        if steps != self.window_length - 1 or self.targets.shape != (w, f) or len(self.flow_ids) != f:
            raise TmException(Status.DIMENSION_ERROR,
                              f"inconsistent window shapes: inputs {self.inputs.shape}, targets {self.targets.shape}")
        return self

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def flow_dim(self) -> int:
        return len(self.flow_ids)

    def subset(self, flow_ids: Sequence[int]) -> "WindowedDataset":
        """Same windows restricted to `flow_ids`, in the given order."""
        position = {flow_id: k for k, flow_id in enumerate(self.flow_ids)}
        missing = [f for f in flow_ids if f not in position]
        if missing:
            raise TmException(Status.DIMENSION_ERROR, f"flows {missing} are not in this dataset")
        columns = [position[f] for f in flow_ids]
        return WindowedDataset(
            inputs=np.ascontiguousarray(self.inputs[:, :, columns]),
            targets=np.ascontiguousarray(self.targets[:, columns]),
            window_length=self.window_length,
            flow_ids=[int(f) for f in flow_ids],
        )


class IngestStats(BaseModel):
    rows: int
    steps: int
    node_count: int
    flow_count: int
    nonzero_entries: int
    missing_entries: int
    irregular_gaps: int
    duration_seconds: int


# --- ingestion -----------------------------------------------------------------------------------


def _require_file(path: Path) -> None:
    if not path.is_file():
        raise TmException(Status.MISSING_ARTIFACT, f"traffic matrix file not found: {path}")


def _parse_error(path: Path, line_no: int, msg: str) -> TmException:
    return TmException(Status.PARSE_ERROR, f"{path}:{line_no}: {msg}")


def _parse_timestamp(path: Path, line_no: int, text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise _parse_error(path, line_no, f"timestamp is not an integer: {text!r}")


def _parse_volume(path: Path, line_no: int, text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise _parse_error(path, line_no, f"traffic volume is not a number: {text!r}")
    if not math.isfinite(value) or value < 0:
        raise _parse_error(path, line_no, f"traffic volume must be finite and >= 0: {text!r}")
    return value


def _build_series(path: Path, timestamps: List[int], matrices: List[np.ndarray], rows: int,
                  node_count: int, interval_seconds: int) -> Tuple[TmSeries, IngestStats]:
    if not timestamps:
        raise TmException(Status.NO_RECORDS, f"{path}: no records")
    tm = TmSeries(
        node_count=node_count,
        timestamps=timestamps,
        matrices=np.stack(matrices),
        interval_seconds=interval_seconds,
    )
    nonzero = int(np.count_nonzero(tm.matrices))
    stats = IngestStats(
        rows=rows,
        steps=len(tm),
        node_count=node_count,
        flow_count=tm.flow_count,
        nonzero_entries=nonzero,
        missing_entries=tm.matrices.size - nonzero,
        irregular_gaps=int(np.count_nonzero(np.diff(tm.timestamps) != interval_seconds)),
        duration_seconds=int(tm.timestamps[-1] - tm.timestamps[0]) + interval_seconds,
    )
    return tm, stats


def read_canonical(path: Union[str, Path], node_count: int, interval_seconds: int) -> Tuple[TmSeries, IngestStats]:
    path = Path(path)
    _require_file(path)
    timestamps: List[int] = []
    matrices: List[np.ndarray] = []
    seen: set[Tuple[int, int]] = set()
    rows = 0

    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TmException(Status.NO_RECORDS, f"{path}: no records")
        if tuple(h.strip() for h in header) != CANONICAL_HEADER:
            raise _parse_error(path, 1, f"expected header {','.join(CANONICAL_HEADER)}, got {','.join(header)}")

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise _parse_error(path, line_no, f"expected 4 fields, got {len(row)}")
            ts = _parse_timestamp(path, line_no, row[0].strip())
            try:
                src, dst = int(row[1]), int(row[2])
            except ValueError:
                raise _parse_error(path, line_no, f"node indices must be integers: {row[1]!r}, {row[2]!r}")
            volume = _parse_volume(path, line_no, row[3].strip())

            if not (0 <= src < node_count and 0 <= dst < node_count):
                raise TmException(Status.BOUNDS_ERROR,
                                  f"{path}:{line_no}: entry ({src},{dst}) outside node range [0,{node_count})")
            if timestamps and ts < timestamps[-1]:
                raise TmException(Status.ORDERING_ERROR,
                                  f"{path}:{line_no}: timestamp {ts} precedes {timestamps[-1]}")
            if not timestamps or ts != timestamps[-1]:
                timestamps.append(ts)
                matrices.append(np.zeros((node_count, node_count)))
                seen.clear()
            if (src, dst) in seen:
                raise _parse_error(path, line_no, f"duplicate entry ({src},{dst}) at timestamp {ts}")
            seen.add((src, dst))
            matrices[-1][src, dst] = volume
            rows += 1

    return _build_series(path, timestamps, matrices, rows, node_count, interval_seconds)


def ingest_canonical(path: Union[str, Path], node_count: int, interval_seconds: int) -> TmSeries:
    tm, stats = read_canonical(path, node_count, interval_seconds)
    logger.info(f"Ingested {stats.rows} rows into {stats.steps} matrices ({stats.flow_count} flows) from {path}")
    return tm


def read_dense(path: Union[str, Path], node_count: int, interval_seconds: int) -> Tuple[TmSeries, IngestStats]:
    """Dense converter layout: `timestamp,f0,...,f{N²-1}`, one row per interval."""
    path = Path(path)
    _require_file(path)
    flows = node_count * node_count
    timestamps: List[int] = []
    matrices: List[np.ndarray] = []

    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise TmException(Status.NO_RECORDS, f"{path}: no records")
        if len(header) != flows + 1 or header[0].strip() != "timestamp":
            raise _parse_error(path, 1, f"expected header timestamp plus {flows} flow columns")

        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != flows + 1:
                raise _parse_error(path, line_no, f"expected {flows + 1} fields, got {len(row)}")
            ts = _parse_timestamp(path, line_no, row[0].strip())
            if timestamps and ts <= timestamps[-1]:
                raise TmException(Status.ORDERING_ERROR,
                                  f"{path}:{line_no}: timestamp {ts} does not follow {timestamps[-1]}")
            values = [_parse_volume(path, line_no, cell.strip()) for cell in row[1:]]
            timestamps.append(ts)
            matrices.append(np.asarray(values).reshape(node_count, node_count))

    return _build_series(path, timestamps, matrices, len(timestamps), node_count, interval_seconds)


def ingest_dense(path: Union[str, Path], node_count: int, interval_seconds: int) -> TmSeries:
    tm, stats = read_dense(path, node_count, interval_seconds)
    logger.info(f"Ingested {stats.steps} dense rows ({stats.flow_count} flows) from {path}")
    return tm


def write_canonical(tm: TmSeries, path: Union[str, Path]) -> Path:
    """Canonical CSV with one row per nonzero entry; an all-zero matrix keeps a single (0,0) row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CANONICAL_HEADER)
        for ts, matrix in zip(tm.timestamps, tm.matrices):
            src, dst = np.nonzero(matrix)
            if len(src) == 0:
                writer.writerow([int(ts), 0, 0, format_cell(0.0)])
                continue
            for s, d in zip(src, dst):
                writer.writerow([int(ts), int(s), int(d), format_cell(matrix[s, d])])
    return path


# --- flows ---------------------------------------------------------------------------------------


def extract_flows(tm: TmSeries) -> List[FlowSeries]:
    if len(tm) == 0:
        raise TmException(Status.EMPTY_INPUT, "cannot extract flows from an empty series")
    n = tm.node_count
    columns = tm.flow_matrix()
    return [
        FlowSeries(src=flow_id // n, dst=flow_id % n, flow_id=flow_id, values=columns[:, flow_id])
        for flow_id in range(n * n)
    ]


def assemble_matrices(flows: Sequence[FlowSeries], node_count: int) -> np.ndarray:
    """Inverse of extract_flows: T x N x N from flows in any order."""
    if len(flows) != node_count * node_count:
        raise TmException(Status.DIMENSION_ERROR, f"expected {node_count * node_count} flows, got {len(flows)}")
    steps = len(flows[0].values)
    out = np.zeros((steps, node_count, node_count))
    for flow in flows:
        out[:, flow.src, flow.dst] = flow.values
    return out


# --- splits --------------------------------------------------------------------------------------


def chronological_split(tm: TmSeries, train_frac: float, val_frac_of_train: float) -> Tuple[TmSeries, TmSeries, TmSeries]:
    if not 0 < train_frac < 1:
        raise TmException(Status.SPLIT_ERROR, f"train_frac must lie in (0, 1), got {train_frac}")
    if not 0 <= val_frac_of_train < 1:
        raise TmException(Status.SPLIT_ERROR, f"val_frac_of_train must lie in [0, 1), got {val_frac_of_train}")

    total = len(tm)
    # the epsilon absorbs products such as 0.9 * 0.8 * 100 = 71.99999...
    train_end = math.floor(train_frac * total + 1e-9)
    fit_end = math.floor((1 - val_frac_of_train) * train_frac * total + 1e-9)

    empty = []
    if fit_end == 0:
        empty.append("train")
    if val_frac_of_train > 0 and train_end - fit_end == 0:
        empty.append("validation")
    if total - train_end == 0:
        empty.append("test")
    if empty:
        raise TmException(Status.SPLIT_ERROR,
                          f"split of {total} steps leaves empty {', '.join(empty)} set(s)")

    return tm.slice(0, fit_end), tm.slice(fit_end, train_end), tm.slice(train_end)


def with_history(history: TmSeries, tm: TmSeries, steps: int) -> TmSeries:
    """Prepend the last `steps` matrices of `history`, so windows target every step of `tm`."""
    if steps <= 0 or len(history) == 0:
        return tm
    head = history.slice(max(0, len(history) - steps))
    return TmSeries(
        node_count=tm.node_count,
        timestamps=np.concatenate([head.timestamps, tm.timestamps]),
        matrices=np.concatenate([head.matrices, tm.matrices]),
        interval_seconds=tm.interval_seconds,
    )


# --- normalization -------------------------------------------------------------------------------


def fit_normalization(train: TmSeries) -> NormalizationParams:
    if len(train) == 0:
        raise TmException(Status.EMPTY_INPUT, "cannot fit normalization on an empty training split")
    columns = train.flow_matrix()
    params = NormalizationParams(per_flow_min=columns.min(axis=0), per_flow_max=columns.max(axis=0))
    constant = int(params.constant.sum())
    if constant:
        logger.warning(f"{constant} of {params.flow_count} flows are constant over the training split")
    return params


def _check_flow_id(p: NormalizationParams, flow_id: int) -> None:
    if not 0 <= flow_id < p.flow_count:
        raise TmException(Status.BOUNDS_ERROR, f"flow_id {flow_id} outside [0,{p.flow_count})")


def normalize(values, p: NormalizationParams, flow_id: int) -> np.ndarray:
    _check_flow_id(p, flow_id)
    values = np.asarray(values, dtype=np.float64)
    if p.constant[flow_id]:
        return np.zeros_like(values)
    scaled = (values - p.per_flow_min[flow_id]) / p.span[flow_id]
    return np.clip(scaled, 0.0, 1.0)


def denormalize(values, p: NormalizationParams, flow_id: int) -> np.ndarray:
    _check_flow_id(p, flow_id)
    values = np.asarray(values, dtype=np.float64)
    if p.constant[flow_id]:
        return np.full_like(values, p.per_flow_min[flow_id])
    return values * p.span[flow_id] + p.per_flow_min[flow_id]


def normalize_columns(columns: np.ndarray, p: NormalizationParams, flow_ids: Sequence[int]) -> np.ndarray:
    """Vectorised normalize over a T x len(flow_ids) block."""
    ids = np.asarray(flow_ids, dtype=np.int64)
    lo, span, constant = p.per_flow_min[ids], p.span[ids], p.constant[ids]
    safe_span = np.where(constant, 1.0, span)
    scaled = np.clip((columns - lo) / safe_span, 0.0, 1.0)
    return np.where(constant, 0.0, scaled)


def denormalize_columns(columns: np.ndarray, p: NormalizationParams, flow_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(flow_ids, dtype=np.int64)
    lo, span, constant = p.per_flow_min[ids], p.span[ids], p.constant[ids]
    return np.where(constant, lo, columns * span + lo)


# --- windows -------------------------------------------------------------------------------------


def build_windows(tm: TmSeries, p: NormalizationParams, flow_ids: Sequence[int], window_length: int) -> WindowedDataset:
    if window_length < 2:
        raise TmException(Status.DIMENSION_ERROR, f"window_length must be >= 2, got {window_length}")
    if len(tm) < window_length:
        raise TmException(Status.INSUFFICIENT_DATA,
                          f"{len(tm)} matrices cannot fill a window of length {window_length}")
    flow_ids = [int(i) for i in flow_ids]
    if not flow_ids:
        raise TmException(Status.EMPTY_INPUT, "no flows selected for windowing")
    for flow_id in flow_ids:
        _check_flow_id(p, flow_id)

    normalized = normalize_columns(tm.flow_matrix()[:, flow_ids], p, flow_ids)
    # (W, F, L) -> (W, L, F)
    windows = np.ascontiguousarray(sliding_window_view(normalized, window_length, axis=0).transpose(0, 2, 1))
    return WindowedDataset(
        inputs=windows[:, :-1, :],
        targets=windows[:, -1, :],
        window_length=window_length,
        flow_ids=flow_ids,
    )

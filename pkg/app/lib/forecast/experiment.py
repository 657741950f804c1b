"""Per-cluster training and assembly of predicted traffic matrices."""
import asyncio
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.constants import DEFAULT_HIDDEN_DIM, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC_OF_TRAIN
from app.constants.status import Status
from app.lib.clusters import ClusterAssignment
from app.lib.exception import TmException
from app.lib.forecast.gru import GruForecaster, init_forecaster
from app.lib.forecast.trainer import TrainConfig, TrainReport, predict_group, train
from app.lib.tmdata import (
    NormalizationParams,
    TmSeries,
    WindowedDataset,
    build_windows,
    chronological_split,
    fit_normalization,
    with_history,
)
from app.utils.logger import logger


class ClusterFit(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    cluster_index: int
    flow_ids: List[int]
    model: GruForecaster
    report: TrainReport


class PredictionSet(BaseModel):
    """Test-split predictions (W x N x N) aligned with the ground truth they forecast."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    node_count: int
    interval_seconds: int
    window_length: int
    timestamps: np.ndarray
    truth: np.ndarray
    predicted: np.ndarray
    params: NormalizationParams
    fits: List[ClusterFit]
    # step counts of the train / validation / test splits
    split: Dict[str, int]

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def reports(self) -> List[TrainReport]:
        return [fit.report for fit in self.fits]

    @property
    def models(self) -> List[GruForecaster]:
        return [fit.model for fit in self.fits]

    def predicted_series(self) -> TmSeries:
        return TmSeries(node_count=self.node_count, timestamps=self.timestamps,
                        matrices=self.predicted, interval_seconds=self.interval_seconds)


class _Windows(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    train: WindowedDataset
    val: Optional[WindowedDataset]
    test: WindowedDataset


def derive_seed(seed: int, cluster_index: int) -> int:
    """Independent, reproducible stream per cluster regardless of scheduling."""
    return int(np.random.SeedSequence([seed, cluster_index]).generate_state(1)[0])


def _fit_cluster(index: int, flow_ids: Sequence[int], windows: _Windows, params: NormalizationParams,
                 cfg: TrainConfig, hidden_dim: int):
    seed = derive_seed(cfg.seed, index)
    model = init_forecaster(len(flow_ids), hidden_dim, seed)
    val = windows.val.subset(flow_ids) if windows.val is not None else None
    trained, report = train(model, windows.train.subset(flow_ids), val, cfg.model_copy(update={"seed": seed}))
    prediction = predict_group(trained, windows.test.subset(flow_ids), params)
    logger.info(f"cluster {index} ({len(flow_ids)} flows): {report.epochs_run} epochs, "
                f"best {report.monitored} loss {report.best_loss:.6g} at epoch {report.best_epoch}")
    return ClusterFit(cluster_index=index, flow_ids=list(flow_ids), model=trained, report=report), prediction


async def run_experiment_async(tm: TmSeries, assignment: ClusterAssignment, cfg: TrainConfig, window_length: int,
                               hidden_dim: int = DEFAULT_HIDDEN_DIM, train_frac: float = DEFAULT_TRAIN_FRAC,
                               val_frac_of_train: float = DEFAULT_VAL_FRAC_OF_TRAIN,
                               jobs: int = 1) -> PredictionSet:
    if assignment.flow_count != tm.flow_count:
        raise TmException(Status.DIMENSION_ERROR,
                          f"assignment covers {assignment.flow_count} flows, series has {tm.flow_count}")
    if jobs < 1:
        raise TmException(Status.DOMAIN_ERROR, f"jobs must be >= 1, got {jobs}")

    train_s, val_s, test_s = chronological_split(tm, train_frac, val_frac_of_train)
    params = fit_normalization(train_s)
    all_flows = list(range(tm.flow_count))
    history = window_length - 1
    windows = _Windows(
        train=build_windows(train_s, params, all_flows, window_length),
        val=(build_windows(with_history(train_s, val_s, history), params, all_flows, window_length)
             if len(val_s) else None),
        test=build_windows(with_history(tm.slice(0, len(train_s) + len(val_s)), test_s, history),
                           params, all_flows, window_length),
    )
    logger.info(f"Training {len(assignment)} {assignment.method.value} model(s) on "
                f"{len(windows.train)} windows with {jobs} job(s)")

    semaphore = asyncio.Semaphore(jobs)

    async def fit(index: int, flow_ids: List[int]):
        async with semaphore:
            return await asyncio.to_thread(_fit_cluster, index, flow_ids, windows, params, cfg, hidden_dim)

    # gather keeps submission order, so results never depend on `jobs`
    results = await asyncio.gather(*(fit(i, ids) for i, ids in enumerate(assignment.clusters)))

    columns = np.full((len(windows.test), tm.flow_count), np.nan)
    for fit_result, prediction in results:
        if not np.all(np.isnan(columns[:, fit_result.flow_ids])):
            raise TmException(Status.DOMAIN_ERROR, f"cluster {fit_result.cluster_index} overlaps another cluster")
        columns[:, fit_result.flow_ids] = prediction
    if np.any(np.isnan(columns)):
        raise TmException(Status.DOMAIN_ERROR, "assembled predictions are missing flows")

    n = tm.node_count
    return PredictionSet(
        node_count=n,
        interval_seconds=tm.interval_seconds,
        window_length=window_length,
        timestamps=np.array(test_s.timestamps),
        truth=np.array(test_s.matrices),
        predicted=columns.reshape(len(columns), n, n),
        params=params,
        fits=[fit_result for fit_result, _ in results],
        split={"train": len(train_s), "validation": len(val_s), "test": len(test_s)},
    )


def run_experiment(tm: TmSeries, assignment: ClusterAssignment, cfg: TrainConfig, window_length: int,
                   **kwargs) -> PredictionSet:
    """Blocking wrapper around `run_experiment_async` for callers without an event loop."""
    return asyncio.run(run_experiment_async(tm, assignment, cfg, window_length, **kwargs))

from app.lib.forecast.checkpoint import load_checkpoint, save_checkpoint
from app.lib.forecast.experiment import (
    ClusterFit,
    PredictionSet,
    derive_seed,
    run_experiment,
    run_experiment_async,
)
from app.lib.forecast.gru import (
    GruForecaster,
    forward,
    forward_batch,
    init_forecaster,
    loss_and_gradients,
)
from app.lib.forecast.optimizer import Adam, EarlyStopping
from app.lib.forecast.trainer import TrainConfig, TrainReport, predict_group, train

__all__ = [
    "Adam",
    "ClusterFit",
    "EarlyStopping",
    "GruForecaster",
    "PredictionSet",
    "TrainConfig",
    "TrainReport",
    "derive_seed",
    "forward",
    "forward_batch",
    "init_forecaster",
    "load_checkpoint",
    "loss_and_gradients",
    "predict_group",
    "run_experiment",
    "run_experiment_async",
    "save_checkpoint",
    "train",
]

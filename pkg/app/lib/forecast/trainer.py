from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.constants import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MIN_DELTA,
    DEFAULT_PATIENCE,
)
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.forecast.gru import GruForecaster, forward_batch, loss_and_gradients, mse
from app.lib.forecast.optimizer import Adam, EarlyStopping
from app.lib.tmdata import NormalizationParams, WindowedDataset, denormalize_columns
from app.utils.logger import logger


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=DEFAULT_EPOCHS, gt=0)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, gt=0)
    learning_rate: float = Field(default=DEFAULT_LEARNING_RATE, gt=0)
    patience: int = Field(default=DEFAULT_PATIENCE, gt=0)
    min_delta: float = Field(default=DEFAULT_MIN_DELTA, ge=0)
    seed: int = 0
    loss: Literal["mse"] = "mse"


class TrainReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs_run: int
    train_loss_curve: List[float]
    val_loss_curve: List[float]
    best_epoch: int
    stopped_early: bool
    # "validation" when a validation set drove early stopping, "training" otherwise
    monitored: Literal["validation", "training"] = "validation"

    @model_validator(mode="after")
    def validate_curves(self):
        if not 0 <= self.best_epoch < self.epochs_run:
            raise TmException(Status.DOMAIN_ERROR,
                              f"best_epoch {self.best_epoch} outside [0,{self.epochs_run})")
        if len(self.train_loss_curve) != self.epochs_run:
            raise TmException(Status.DIMENSION_ERROR, "train_loss_curve must have one entry per epoch")
        if self.val_loss_curve and len(self.val_loss_curve) != self.epochs_run:
            raise TmException(Status.DIMENSION_ERROR, "val_loss_curve must have one entry per epoch")
        return self

    @property
    def monitored_curve(self) -> List[float]:
        return self.val_loss_curve if self.monitored == "validation" else self.train_loss_curve

    @property
    def best_loss(self) -> float:
        return self.monitored_curve[self.best_epoch]


def _check_dataset(m: GruForecaster, ds: WindowedDataset, name: str) -> None:
    if len(ds) == 0:
        raise TmException(Status.EMPTY_INPUT, f"{name} dataset has no windows")
    if ds.flow_dim != m.input_dim:
        raise TmException(Status.DIMENSION_ERROR,
                          f"{name} dataset has {ds.flow_dim} flows, model expects {m.input_dim}")


def train(m: GruForecaster, train_ds: WindowedDataset, val_ds: Optional[WindowedDataset],
          cfg: TrainConfig) -> Tuple[GruForecaster, TrainReport]:
    """Adam over seeded mini-batches with early stopping; returns the best-epoch parameters."""
    _check_dataset(m, train_ds, "training")
    use_val = val_ds is not None and len(val_ds) > 0
    if use_val:
        _check_dataset(m, val_ds, "validation")
        if list(val_ds.flow_ids) != list(train_ds.flow_ids):
            raise TmException(Status.DIMENSION_ERROR, "training and validation datasets cover different flows")

    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(m.params, learning_rate=cfg.learning_rate)
    stopper = EarlyStopping(patience=cfg.patience, min_delta=cfg.min_delta)
    params = {name: value.copy() for name, value in m.params.items()}
    best_params = params
    train_curve: List[float] = []
    val_curve: List[float] = []
    window_count = len(train_ds)

    for epoch in range(cfg.epochs):
        order = rng.permutation(window_count)
        weighted = 0.0
        for start in range(0, window_count, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            current = m.with_params(params)
            loss, grads = loss_and_gradients(current, train_ds.inputs[batch], train_ds.targets[batch])
            params = optimizer.step(params, grads)
            weighted += loss * len(batch)
        train_curve.append(weighted / window_count)

        current = m.with_params(params)
        if use_val:
            val_curve.append(mse(current, val_ds.inputs, val_ds.targets))
            monitored = val_curve[-1]
        else:
            monitored = train_curve[-1]
        logger.debug(f"epoch {epoch}: train={train_curve[-1]:.6g}"
                     + (f" val={val_curve[-1]:.6g}" if use_val else ""))

        if stopper(monitored, epoch):
            best_params = params
        if stopper.early_stop:
            break

    report = TrainReport(
        epochs_run=len(train_curve),
        train_loss_curve=train_curve,
        val_loss_curve=val_curve,
        best_epoch=stopper.best_epoch,
        stopped_early=stopper.early_stop,
        monitored="validation" if use_val else "training",
    )
    return m.with_params(best_params), report


def predict_group(m: GruForecaster, test_ds: WindowedDataset, p: NormalizationParams) -> np.ndarray:
    """W x F_g one-step predictions in original units. Constant flows emit their training constant."""
    if test_ds.flow_dim != m.input_dim:
        raise TmException(Status.DIMENSION_ERROR,
                          f"test dataset has {test_ds.flow_dim} flows, model expects {m.input_dim}")
    if len(test_ds) == 0:
        return np.zeros((0, m.input_dim))
    normalized = forward_batch(m, test_ds.inputs)
    # traffic volumes cannot be negative
    return np.maximum(denormalize_columns(normalized, p, test_ds.flow_ids), 0.0)

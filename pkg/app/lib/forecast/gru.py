"""Single-layer gated recurrent forecaster with an affine readout, in numpy.

Recurrence for one step (row-vector convention, batch on axis 0):

    z  = sigmoid(x W_z^T + h U_z^T + b_z)        update gate
    r  = sigmoid(x W_r^T + h U_r^T + b_r)        reset gate
    n  = tanh(x W_n^T + (r * h) U_n^T + b_n)     candidate state
    h' = (1 - z) * h + z * n

The prediction is the readout of the final hidden state: y = h_T W_out^T + b_out.
"""
import math
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from app.constants.status import Status
from app.lib.exception import TmException

PARAM_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_n", "U_n", "b_n", "W_out", "b_out")

Params = Dict[str, np.ndarray]


def param_shapes(input_dim: int, hidden_dim: int) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for gate in ("z", "r", "n"):
        shapes[f"W_{gate}"] = (hidden_dim, input_dim)
        shapes[f"U_{gate}"] = (hidden_dim, hidden_dim)
        shapes[f"b_{gate}"] = (hidden_dim,)
    shapes["W_out"] = (input_dim, hidden_dim)
    shapes["b_out"] = (input_dim,)
    return shapes


class GruForecaster(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    input_dim: int = Field(ge=1)
    hidden_dim: int = Field(ge=1)
    seed: int = 0
    params: Params

    @model_validator(mode="after")
    def validate_params(self):
        expected = param_shapes(self.input_dim, self.hidden_dim)
        if set(self.params) != set(expected):
            raise TmException(Status.DIMENSION_ERROR, f"parameters must be exactly {sorted(expected)}")
        for name, shape in expected.items():
            value = self.params[name]
            if value.shape != shape:
                raise TmException(Status.DIMENSION_ERROR, f"{name} has shape {value.shape}, expected {shape}")
            if not np.all(np.isfinite(value)):
                raise TmException(Status.NUMERIC_ERROR, f"{name} contains non-finite values")
        return self

    @property
    def parameter_count(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def with_params(self, params: Params) -> "GruForecaster":
        return GruForecaster(input_dim=self.input_dim, hidden_dim=self.hidden_dim, seed=self.seed,
                             params={k: np.array(v, dtype=np.float64) for k, v in params.items()})


def init_forecaster(input_dim: int, hidden_dim: int, seed: int) -> GruForecaster:
    """Weights ~ U(-1/sqrt(H), 1/sqrt(H)) from a seeded generator, biases zero."""
    if input_dim < 1 or hidden_dim < 1:
        raise TmException(Status.DIMENSION_ERROR,
                          f"input_dim and hidden_dim must be >= 1, got {input_dim} and {hidden_dim}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(hidden_dim)
    params: Params = {}
    for name, shape in param_shapes(input_dim, hidden_dim).items():
        if name.startswith("b_"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-bound, bound, size=shape)
    return GruForecaster(input_dim=input_dim, hidden_dim=hidden_dim, seed=seed, params=params)


def _check_inputs(m: GruForecaster, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[2] != m.input_dim or inputs.shape[1] < 1:
        raise TmException(Status.DIMENSION_ERROR,
                          f"expected batch x steps x {m.input_dim} inputs, got shape {inputs.shape}")
    return inputs


def _run(params: Params, inputs: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, ...]], np.ndarray]:
    """Unrolled forward pass; returns outputs, per-step cache and the final hidden state."""
    batch = inputs.shape[0]
    h = np.zeros((batch, params["U_z"].shape[0]))
    cache = []
    for t in range(inputs.shape[1]):
        x = inputs[:, t, :]
        z = expit(x @ params["W_z"].T + h @ params["U_z"].T + params["b_z"])
        r = expit(x @ params["W_r"].T + h @ params["U_r"].T + params["b_r"])
        rh = r * h
        n = np.tanh(x @ params["W_n"].T + rh @ params["U_n"].T + params["b_n"])
        cache.append((x, h, z, r, rh, n))
        h = (1.0 - z) * h + z * n
    outputs = h @ params["W_out"].T + params["b_out"]
    return outputs, cache, h


def forward_batch(m: GruForecaster, inputs: np.ndarray) -> np.ndarray:
    """B x steps x F windows -> B x F one-step-ahead outputs."""
    outputs, _, _ = _run(m.params, _check_inputs(m, inputs))
    return outputs


def forward(m: GruForecaster, window: np.ndarray) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise TmException(Status.DIMENSION_ERROR, f"expected a steps x {m.input_dim} window, got {window.shape}")
    return forward_batch(m, window[None, :, :])[0]


def loss_and_gradients(m: GruForecaster, batch_inputs: np.ndarray, batch_targets: np.ndarray) -> Tuple[float, Params]:
    """MSE over batch and flows, with gradients by backpropagation through the whole window."""
    inputs = _check_inputs(m, batch_inputs)
    targets = np.asarray(batch_targets, dtype=np.float64)
    if targets.shape != (inputs.shape[0], m.input_dim):
        raise TmException(Status.DIMENSION_ERROR,
                          f"targets shape {targets.shape} does not match inputs {inputs.shape}")

    p = m.params
    outputs, cache, h_last = _run(p, inputs)
    bad = ~np.all(np.isfinite(outputs), axis=1)
    if np.any(bad):
        raise TmException(Status.NUMERIC_ERROR,
                          f"non-finite forecaster output at batch index {int(np.argmax(bad))}")

    error = outputs - targets
    loss = float(np.mean(error ** 2))

    grads: Params = {name: np.zeros_like(value) for name, value in p.items()}
    d_out = 2.0 * error / error.size
    grads["W_out"] = d_out.T @ h_last
    grads["b_out"] = d_out.sum(axis=0)
    dh = d_out @ p["W_out"]

    for x, h_prev, z, r, rh, n in reversed(cache):
        dn = dh * z
        dz = dh * (n - h_prev)
        dh_prev = dh * (1.0 - z)

        da_n = dn * (1.0 - n ** 2)
        grads["W_n"] += da_n.T @ x
        grads["U_n"] += da_n.T @ rh
        grads["b_n"] += da_n.sum(axis=0)
        d_rh = da_n @ p["U_n"]
        dh_prev += d_rh * r

        da_r = d_rh * h_prev * r * (1.0 - r)
        grads["W_r"] += da_r.T @ x
        grads["U_r"] += da_r.T @ h_prev
        grads["b_r"] += da_r.sum(axis=0)
        dh_prev += da_r @ p["U_r"]

        da_z = dz * z * (1.0 - z)
        grads["W_z"] += da_z.T @ x
        grads["U_z"] += da_z.T @ h_prev
        grads["b_z"] += da_z.sum(axis=0)
        dh_prev += da_z @ p["U_z"]

        dh = dh_prev

    return loss, grads


def mse(m: GruForecaster, inputs: np.ndarray, targets: np.ndarray) -> float:
    outputs = forward_batch(m, inputs)
    return float(np.mean((outputs - np.asarray(targets, dtype=np.float64)) ** 2))

"""Synthetic traffic matrices with flows drawn from planted behaviour regimes."""
from typing import Tuple

import numpy as np

from app.constants import ABILENE_INTERVAL_SECONDS
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.tmdata import TmSeries

REGIME_NAMES = ("steady", "bursty", "saturated")

# latent swing: a slow cycle plus a faster one of this relative amplitude, so |s| <= 1 + FAST_AMPLITUDE
FAST_AMPLITUDE = 0.6
SLOW_PERIOD_STEPS = (16.0, 40.0)
FAST_PERIOD_STEPS = (5.0, 9.0)
SHARPNESS = 1.5
NOISE = 0.005


def _swing(rng: np.random.Generator, steps: int) -> np.ndarray:
    t = np.arange(steps)
    slow = rng.uniform(*SLOW_PERIOD_STEPS)
    fast = rng.uniform(*FAST_PERIOD_STEPS)
    phases = rng.uniform(0.0, 2 * np.pi, size=2)
    return np.sin(2 * np.pi * t / slow + phases[0]) + FAST_AMPLITUDE * np.sin(2 * np.pi * t / fast + phases[1])


def _steady(s: np.ndarray) -> np.ndarray:
    # most time near the mean, short excursions
    return 1.0 + 0.15 * (s + 0.5 * s ** 3)


def _bursty(s: np.ndarray) -> np.ndarray:
    # low floor, sharp peaks
    return np.exp(SHARPNESS * s)


def _saturated(s: np.ndarray) -> np.ndarray:
    # pinned near a ceiling, sharp dips; mirror image of `_bursty`
    return np.exp(SHARPNESS * (1.0 + FAST_AMPLITUDE)) + 1.0 - np.exp(-SHARPNESS * s)


_SHAPES = (_steady, _bursty, _saturated)


def planted_regimes(node_count: int, steps: int, regimes: int = 3, seed: int = 0,
                    interval_seconds: int = ABILENE_INTERVAL_SECONDS) -> Tuple[TmSeries, np.ndarray]:
    """
    Every flow (diagonal included) follows one of `regimes` distribution families:
    steady around its mean, bursty above a low floor, or saturated below a ceiling.

    Each flow has its own latent swing (two cycles with flow-specific periods and phases)
    pushed through the regime's monotone shape, scaled by a flow-specific level and
    perturbed by small multiplicative noise. Flows are independent of one another, so a
    one-step forecast of a flow needs that flow's own recent history.

    Returns the series and the regime index of each flow id.
    """
    if not 1 <= regimes <= len(_SHAPES):
        raise TmException(Status.DOMAIN_ERROR, f"regimes must lie in [1,{len(_SHAPES)}], got {regimes}")
    if node_count < 1 or steps < 1:
        raise TmException(Status.DOMAIN_ERROR, f"node_count and steps must be >= 1, got {node_count} and {steps}")

    rng = np.random.default_rng(seed)
    flow_count = node_count * node_count
    labels = rng.permutation(np.arange(flow_count) % regimes)
    columns = np.empty((steps, flow_count))
    for flow_id, regime in enumerate(labels):
        level = rng.uniform(1e6, 1e7)
        shape = _SHAPES[regime](_swing(rng, steps))
        columns[:, flow_id] = level * shape * (1.0 + NOISE * rng.standard_normal(steps))

    tm = TmSeries(
        node_count=node_count,
        timestamps=np.arange(steps, dtype=np.int64) * interval_seconds,
        matrices=np.maximum(columns, 0.0).reshape(steps, node_count, node_count),
        interval_seconds=interval_seconds,
    )
    return tm, labels.astype(np.int64)

"""Flow statistics: Pearson correlation, same-source consistency, histograms and Jensen-Shannon distances."""
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import rel_entr

from app.constants import Grouping
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.tmdata import FlowSeries
from app.utils.csvio import write_square
from app.utils.logger import logger

LOG2 = math.log(2.0)


class CorrelationMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    node_count: int = Field(gt=0)
    flow_ids: List[int]
    rho: np.ndarray
    valid_mask: np.ndarray

    @model_validator(mode="after")
    def validate_matrix(self):
        f = len(self.flow_ids)
        if self.rho.shape != (f, f) or self.valid_mask.shape != (f, f):
            raise TmException(Status.DIMENSION_ERROR, f"correlation matrix must be {f} x {f}")
        return self

    @property
    def dim(self) -> int:
        return len(self.flow_ids)


class FlowHistogram(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    bin_count: int = Field(ge=1)
    probs: np.ndarray
    flow_id: int = 0

    @field_validator("probs", mode="before")
    @classmethod
    def coerce_probs(cls, value):
        return np.asarray(value, dtype=np.float64).reshape(-1)

    @model_validator(mode="after")
    def validate_probs(self):
        if len(self.probs) != self.bin_count:
            raise TmException(Status.DIMENSION_ERROR, f"{len(self.probs)} probabilities for {self.bin_count} bins")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise TmException(Status.DOMAIN_ERROR, "histogram probabilities must be >= 0 and sum to 1")
        return self


class DistanceMatrix(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    d: np.ndarray
    flow_ids: List[int]

    @model_validator(mode="after")
    def validate_distances(self):
        f = len(self.flow_ids)
        if self.d.shape != (f, f):
            raise TmException(Status.DIMENSION_ERROR, f"distance matrix must be {f} x {f}, got {self.d.shape}")
        if not np.array_equal(self.d, self.d.T) or np.any(np.diag(self.d) != 0):
            raise TmException(Status.DOMAIN_ERROR, "distance matrix must be symmetric with a zero diagonal")
        return self

    @property
    def dim(self) -> int:
        return len(self.flow_ids)


# --- correlation ---------------------------------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation. Returns 0.0 when either series has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise TmException(Status.DIMENSION_ERROR, f"pearson needs equal-length series, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise TmException(Status.DIMENSION_ERROR, "pearson needs at least 2 samples")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    dx = x - x.mean()
    dy = y - y.mean()
    rho = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return min(1.0, max(-1.0, rho))


def correlation_matrix(flows: Sequence[FlowSeries], node_count: Optional[int] = None) -> CorrelationMatrix:
    if len(flows) < 2:
        raise TmException(Status.DIMENSION_ERROR, f"correlation needs at least 2 flows, got {len(flows)}")
    lengths = {len(flow.values) for flow in flows}
    if len(lengths) != 1:
        raise TmException(Status.DIMENSION_ERROR, f"flows differ in length: {sorted(lengths)}")
    if lengths.pop() < 2:
        raise TmException(Status.DIMENSION_ERROR, "pearson needs at least 2 samples")

    if node_count is None:
        node_count = max(max(flow.src, flow.dst) for flow in flows) + 1
    values = np.column_stack([flow.values for flow in flows])
    varying = np.ptp(values, axis=0) > 0
    centered = values - values.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->j", centered, centered))
    safe = np.where(varying, norms, 1.0)

    rho = (centered.T @ centered) / np.outer(safe, safe)
    rho = np.clip((rho + rho.T) / 2.0, -1.0, 1.0)
    valid = np.outer(varying, varying)
    rho = np.where(valid, rho, 0.0)
    np.fill_diagonal(rho, np.where(varying, 1.0, 0.0))

    skipped = int((~varying).sum())
    if skipped:
        logger.debug(f"{skipped} zero-variance flows excluded from correlation ranking")
    return CorrelationMatrix(
        node_count=node_count,
        flow_ids=[flow.flow_id for flow in flows],
        rho=rho,
        valid_mask=valid,
    )


def _ranked_pairs(corr: CorrelationMatrix) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Valid unordered pairs sorted by rho descending, ties by (flow_id_i, flow_id_j) ascending."""
    ids = np.asarray(corr.flow_ids)
    i, j = np.triu_indices(corr.dim, k=1)
    keep = corr.valid_mask[i, j]
    i, j = i[keep], j[keep]
    a, b = np.minimum(ids[i], ids[j]), np.maximum(ids[i], ids[j])
    rho = corr.rho[i, j]
    order = np.lexsort((b, a, -rho))
    return a[order], b[order], rho[order]


def _shares_endpoint(a: np.ndarray, b: np.ndarray, node_count: int, grouping: Grouping) -> np.ndarray:
    same_src = (a // node_count) == (b // node_count)
    if grouping == Grouping.SOURCE:
        return same_src
    return same_src | ((a % node_count) == (b % node_count))


def same_source_fraction(corr: CorrelationMatrix, top_percent: float, grouping: Grouping = Grouping.SOURCE) -> float:
    if not 0 < top_percent <= 100:
        raise TmException(Status.DOMAIN_ERROR, f"top_percent must lie in (0, 100], got {top_percent}")
    a, b, _ = _ranked_pairs(corr)
    if len(a) == 0:
        raise TmException(Status.EMPTY_INPUT, "no valid flow pairs to rank")
    count = max(1, math.ceil(len(a) * top_percent / 100.0 - 1e-9))
    shared = _shares_endpoint(a[:count], b[:count], corr.node_count, Grouping(grouping))
    return float(shared.mean())


def same_source_curve(corr: CorrelationMatrix, percents: Sequence[float],
                      grouping: Grouping = Grouping.SOURCE) -> List[Tuple[float, float]]:
    """Fraction of same-source pairs among the top x% correlated pairs, for every x in percents."""
    return [(float(x), same_source_fraction(corr, x, grouping)) for x in percents]


def strong_pairs(corr: CorrelationMatrix, threshold: float) -> List[Tuple[int, int]]:
    if not -1 <= threshold <= 1:
        raise TmException(Status.DOMAIN_ERROR, f"threshold must lie in [-1, 1], got {threshold}")
    a, b, rho = _ranked_pairs(corr)
    keep = rho >= threshold
    return [(int(x), int(y)) for x, y in zip(a[keep], b[keep])]


def strong_pair_consistency(flows: Sequence[FlowSeries], segments: int, threshold: float) -> List[float]:
    """Share of the first segment's strong pairs that stay strong in each later segment."""
    if segments < 2:
        raise TmException(Status.DOMAIN_ERROR, f"need at least 2 segments, got {segments}")
    length = len(flows[0].values)
    bounds = np.linspace(0, length, segments + 1).astype(int)
    node_count = max(max(flow.src, flow.dst) for flow in flows) + 1

    pair_sets = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        part = [flow.model_copy(update={"values": flow.values[start:stop]}) for flow in flows]
        pair_sets.append(set(strong_pairs(correlation_matrix(part, node_count), threshold)))

    reference = pair_sets[0]
    if not reference:
        raise TmException(Status.EMPTY_INPUT, f"no pairs with rho >= {threshold} in the first segment")
    return [len(reference & later) / len(reference) for later in pair_sets[1:]]


# --- histograms and divergences ------------------------------------------------------------------


def flow_histogram(normalized_values: Sequence[float], bin_count: int, flow_id: int = 0) -> FlowHistogram:
    """Uniform bins over [0, 1]; bin k holds (k/B, (k+1)/B] and bin 0 also holds 0."""
    values = np.asarray(normalized_values, dtype=np.float64).reshape(-1)
    if bin_count < 1:
        raise TmException(Status.DOMAIN_ERROR, f"bin_count must be >= 1, got {bin_count}")
    if len(values) == 0:
        raise TmException(Status.EMPTY_INPUT, f"flow {flow_id}: cannot histogram an empty series")
    if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
        raise TmException(Status.DOMAIN_ERROR, f"flow {flow_id}: histogram values must lie in [0, 1]")

    index = np.clip(np.ceil(values * bin_count).astype(np.int64) - 1, 0, bin_count - 1)
    counts = np.bincount(index, minlength=bin_count)
    return FlowHistogram(bin_count=bin_count, probs=counts / len(values), flow_id=flow_id)


def flow_histograms(normalized: np.ndarray, bin_count: int, flow_ids: Sequence[int]) -> List[FlowHistogram]:
    """One histogram per column of a T x F normalized block."""
    return [flow_histogram(normalized[:, k], bin_count, int(flow_id)) for k, flow_id in enumerate(flow_ids)]


def _check_bins(p: FlowHistogram, q: FlowHistogram) -> None:
    if p.bin_count != q.bin_count:
        raise TmException(Status.DIMENSION_ERROR,
                          f"histograms {p.flow_id} and {q.flow_id} differ in bin count ({p.bin_count} vs {q.bin_count})")


def kl_divergence(p: FlowHistogram, m: FlowHistogram) -> float:
    """KL divergence in bits; bins with p_k = 0 contribute nothing."""
    _check_bins(p, m)
    if np.any((p.probs > 0) & (m.probs <= 0)):
        raise TmException(Status.DOMAIN_ERROR,
                          f"histogram {m.flow_id} has no mass where histogram {p.flow_id} does")
    return max(0.0, float(rel_entr(p.probs, m.probs).sum() / LOG2))


def _jsd_rows(p: np.ndarray, others: np.ndarray) -> np.ndarray:
    """JSD in bits between one probability vector and each row of `others`."""
    m = (p + others) / 2.0
    total = rel_entr(p, m).sum(axis=-1) + rel_entr(others, m).sum(axis=-1)
    return np.clip(total / (2.0 * LOG2), 0.0, 1.0)


def jsd(p: FlowHistogram, q: FlowHistogram) -> float:
    _check_bins(p, q)
    if np.array_equal(p.probs, q.probs):
        return 0.0
    return float(_jsd_rows(p.probs, q.probs[None, :])[0])


def jsd_distance_matrix(histograms: Sequence[FlowHistogram]) -> DistanceMatrix:
    if len(histograms) < 2:
        raise TmException(Status.DIMENSION_ERROR, f"need at least 2 histograms, got {len(histograms)}")
    for h in histograms[1:]:
        _check_bins(histograms[0], h)

    probs = np.stack([h.probs for h in histograms])
    f = len(histograms)
    d = np.zeros((f, f))
    for i in range(f - 1):
        row = _jsd_rows(probs[i], probs[i + 1:])
        row[np.all(probs[i + 1:] == probs[i], axis=1)] = 0.0
        d[i, i + 1:] = row
        d[i + 1:, i] = row
    logger.debug(f"Computed {f}x{f} JSD distance matrix")
    return DistanceMatrix(d=d, flow_ids=[h.flow_id for h in histograms])


def export_square_csv(matrix: Union[CorrelationMatrix, DistanceMatrix, np.ndarray], path: Union[str, Path],
                      flow_ids: Optional[Sequence[int]] = None) -> Path:
    if isinstance(matrix, CorrelationMatrix):
        values, ids = matrix.rho, matrix.flow_ids
    elif isinstance(matrix, DistanceMatrix):
        values, ids = matrix.d, matrix.flow_ids
    else:
        values, ids = np.asarray(matrix), list(flow_ids if flow_ids is not None else range(len(matrix)))
    return write_square(path, values, ids)

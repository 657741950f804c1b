"""Routing-level evaluation: minimum maximum-link-utilization routing and MLU bias."""
import asyncio
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.csgraph import breadth_first_order

from app.constants import RING_CAPACITY, MluStatus
from app.constants.status import Status
from app.lib.exception import TmException
from app.utils.csvio import write_rows
from app.utils.logger import logger


class Link(BaseModel):
    model_config = ConfigDict(frozen=True)

    src: int = Field(ge=0)
    dst: int = Field(ge=0)
    capacity: float = Field(gt=0)


class Topology(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_count: int = Field(gt=0)
    links: List[Link]

    @model_validator(mode="after")
    def validate_links(self):
        seen = set()
        for link in self.links:
            if link.src >= self.node_count or link.dst >= self.node_count:
                raise TmException(Status.TOPOLOGY_ERROR,
                                  f"link {link.src}->{link.dst} outside [0,{self.node_count})")
            if link.src == link.dst:
                raise TmException(Status.TOPOLOGY_ERROR, f"self-loop link at node {link.src}")
            if (link.src, link.dst) in seen:
                raise TmException(Status.TOPOLOGY_ERROR, f"duplicate link {link.src}->{link.dst}")
            seen.add((link.src, link.dst))
        return self

    @property
    def capacities(self) -> np.ndarray:
        return np.array([link.capacity for link in self.links], dtype=np.float64)

    def adjacency(self) -> sparse.csr_matrix:
        rows = [link.src for link in self.links]
        cols = [link.dst for link in self.links]
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.node_count, self.node_count))

    def reachable(self, src: int) -> np.ndarray:
        mask = np.zeros(self.node_count, dtype=bool)
        mask[breadth_first_order(self.adjacency(), src, directed=True, return_predecessors=False)] = True
        return mask


class MluResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mlu: float = Field(ge=0)
    per_link_utilization: np.ndarray
    status: MluStatus
    # (src, dst) per commodity, aligned with the rows of commodity_flows (commodity x link)
    commodities: List[Tuple[int, int]] = Field(default_factory=list)
    commodity_flows: Optional[np.ndarray] = None

    @property
    def optimal(self) -> bool:
        return self.status == MluStatus.OPTIMAL


class BiasReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    # None only when every window was skipped and the caller allowed it
    mean: Optional[float]
    per_window: List[Optional[float]]
    # windows whose true MLU is zero
    skipped: int
    # windows where the true or predicted demand cannot be routed
    unroutable: int

    @property
    def evaluated(self) -> int:
        return sum(b is not None for b in self.per_window)


# --- topology files ------------------------------------------------------------------------------


def _topology_error(path: Path, line_no: int, msg: str) -> TmException:
    return TmException(Status.TOPOLOGY_ERROR, f"{path}:{line_no}: {msg}")


def load_topology(path: Union[str, Path]) -> Topology:
    """`nodes <N>` on the first content line, then `link <src> <dst> <capacity>` per directed edge."""
    path = Path(path)
    if not path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"topology file not found: {path}")
    node_count: Optional[int] = None
    links: List[Link] = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if node_count is None:
            if len(parts) != 2 or parts[0] != "nodes":
                raise _topology_error(path, line_no, "expected `nodes <N>` before any link")
            try:
                node_count = int(parts[1])
            except ValueError:
                raise _topology_error(path, line_no, f"node count {parts[1]!r} is not an integer")
            continue
        if len(parts) != 4 or parts[0] != "link":
            raise _topology_error(path, line_no, "expected `link <src> <dst> <capacity>`")
        try:
            src, dst, capacity = int(parts[1]), int(parts[2]), float(parts[3])
        except ValueError:
            raise _topology_error(path, line_no, f"malformed link {line!r}")
        if not math.isfinite(capacity) or capacity <= 0:
            raise _topology_error(path, line_no, f"capacity must be finite and > 0, got {parts[3]}")
        links.append(Link(src=src, dst=dst, capacity=capacity))
    if node_count is None:
        raise TmException(Status.TOPOLOGY_ERROR, f"{path}: no `nodes` line")
    return Topology(node_count=node_count, links=links)


def write_topology(topo: Topology, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"nodes {topo.node_count}"]
    lines += [f"link {link.src} {link.dst} {link.capacity!r}" for link in topo.links]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def ring_topology(node_count: int, capacity: float = RING_CAPACITY) -> Topology:
    """Bidirectional ring, the topology `synth` ships next to a generated dataset."""
    edges = sorted({(v, (v + 1) % node_count) for v in range(node_count)}
                   | {((v + 1) % node_count, v) for v in range(node_count)})
    return Topology(node_count=node_count,
                    links=[Link(src=s, dst=d, capacity=capacity) for s, d in edges if s != d])


# --- optimisation --------------------------------------------------------------------------------


def _check_demand(topo: Topology, demand) -> np.ndarray:
    demand = np.array(demand, dtype=np.float64)
    n = topo.node_count
    if demand.shape != (n, n):
        raise TmException(Status.DIMENSION_ERROR, f"demand must be {n} x {n}, got {demand.shape}")
    if not np.all(np.isfinite(demand)) or np.any(demand < 0):
        raise TmException(Status.DOMAIN_ERROR, "demand entries must be finite and >= 0")
    np.fill_diagonal(demand, 0.0)
    return demand


def _unroutable(topo: Topology) -> MluResult:
    return MluResult(mlu=math.inf, per_link_utilization=np.zeros(len(topo.links)),
                     status=MluStatus.INFEASIBLE_DEMAND_UNROUTABLE)


def min_mlu(topo: Topology, demand) -> MluResult:
    """
    Route `demand` to minimise the maximum link utilization.

    Node-arc multi-commodity flow LP, one commodity per nonzero (s, d) demand:

        minimise U
        s.t. out(v) - in(v) = +d_k at s_k, -d_k at t_k, 0 elsewhere   for every commodity k and node v
             sum_k f_{k,e} <= U * c_e                                 for every link e
             f >= 0, U >= 0

    Demands and capacities are divided by the largest capacity before solving; utilization is scale-free.
    """
    demand = _check_demand(topo, demand)
    link_count = len(topo.links)
    srcs, dsts = np.nonzero(demand)
    commodities = list(zip(srcs.tolist(), dsts.tolist()))
    if not commodities:
        return MluResult(mlu=0.0, per_link_utilization=np.zeros(link_count), status=MluStatus.OPTIMAL,
                         commodities=[], commodity_flows=np.zeros((0, link_count)))
    if link_count == 0:
        return _unroutable(topo)

    for src in np.unique(srcs):
        reach = topo.reachable(int(src))
        if not np.all(reach[dsts[srcs == src]]):
            logger.debug(f"demand from node {src} cannot reach every destination")
            return _unroutable(topo)

    n = topo.node_count
    k_count = len(commodities)
    scale = float(topo.capacities.max())
    capacities = topo.capacities / scale
    volumes = demand[srcs, dsts] / scale
    link_src = np.array([link.src for link in topo.links])
    link_dst = np.array([link.dst for link in topo.links])

    # variables: f[k, e] flattened as k * link_count + e, then U last
    var_count = k_count * link_count + 1
    k_index = np.repeat(np.arange(k_count), link_count)
    e_index = np.tile(np.arange(link_count), k_count)
    columns = k_index * link_count + e_index
    # conservation row of (commodity k, node v) is k * n + v
    eq_rows = np.concatenate([k_index * n + link_src[e_index], k_index * n + link_dst[e_index]])
    eq_cols = np.concatenate([columns, columns])
    eq_vals = np.concatenate([np.ones(len(columns)), -np.ones(len(columns))])
    a_eq = sparse.csr_matrix((eq_vals, (eq_rows, eq_cols)), shape=(k_count * n, var_count))
    b_eq = np.zeros(k_count * n)
    b_eq[np.arange(k_count) * n + srcs] += volumes
    b_eq[np.arange(k_count) * n + dsts] -= volumes

    ub_rows = np.concatenate([e_index, np.arange(link_count)])
    ub_cols = np.concatenate([columns, np.full(link_count, var_count - 1)])
    ub_vals = np.concatenate([np.ones(len(columns)), -capacities])
    a_ub = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(link_count, var_count))
    b_ub = np.zeros(link_count)

    objective = np.zeros(var_count)
    objective[-1] = 1.0
    result = linprog(objective, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                     options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if result.status != 0:
        raise TmException(Status.SOLVER_ERROR, f"LP solver failed with status {result.status}: {result.message}")

    flows = np.maximum(result.x[:-1].reshape(k_count, link_count), 0.0)
    utilization = flows.sum(axis=0) / capacities
    mlu = float(utilization.max())
    logger.debug(f"min_mlu: {k_count} commodities over {link_count} links -> {mlu:.6g}")
    return MluResult(mlu=mlu, per_link_utilization=utilization, status=MluStatus.OPTIMAL,
                     commodities=commodities, commodity_flows=flows * scale)


def mlu_bias(topo: Topology, truth, pred) -> float:
    truth_result = min_mlu(topo, truth)
    if truth_result.optimal and truth_result.mlu <= 0.0:
        raise TmException(Status.UNDEFINED_BIAS, "bias is undefined when the true MLU is 0")
    pred_result = min_mlu(topo, pred)
    if not (truth_result.optimal and pred_result.optimal):
        raise TmException(Status.TOPOLOGY_ERROR, "demand cannot be routed on this topology")
    return pred_result.mlu / truth_result.mlu


def _window_bias(topo: Topology, truth, pred) -> Tuple[Optional[float], str]:
    truth_result = min_mlu(topo, truth)
    if not truth_result.optimal:
        return None, "unroutable"
    if truth_result.mlu <= 0.0:
        return None, "skipped"
    pred_result = min_mlu(topo, pred)
    if not pred_result.optimal:
        return None, "unroutable"
    return pred_result.mlu / truth_result.mlu, "ok"


async def avg_mlu_bias_async(topo: Topology, truths: Sequence, preds: Sequence, jobs: int = 1,
                             allow_empty: bool = False) -> BiasReport:
    if len(truths) != len(preds):
        raise TmException(Status.DIMENSION_ERROR, f"{len(truths)} true windows but {len(preds)} predicted")
    if len(truths) == 0:
        raise TmException(Status.EMPTY_INPUT, "no windows to evaluate")

    semaphore = asyncio.Semaphore(max(1, jobs))

    async def solve(truth, pred):
        async with semaphore:
            return await asyncio.to_thread(_window_bias, topo, truth, pred)

    outcomes = await asyncio.gather(*(solve(t, p) for t, p in zip(truths, preds)))
    per_window = [bias for bias, _ in outcomes]
    skipped = sum(kind == "skipped" for _, kind in outcomes)
    unroutable = sum(kind == "unroutable" for _, kind in outcomes)
    if skipped:
        logger.warning(f"{skipped} window(s) skipped: true MLU is 0")
    if unroutable:
        logger.warning(f"{unroutable} window(s) skipped: demand cannot be routed")

    biases = [b for b in per_window if b is not None]
    if not biases:
        if allow_empty:
            return BiasReport(mean=None, per_window=per_window, skipped=skipped, unroutable=unroutable)
        raise TmException(Status.EMPTY_INPUT, f"all {len(per_window)} windows were skipped")
    return BiasReport(mean=math.fsum(biases) / len(biases), per_window=per_window,
                      skipped=skipped, unroutable=unroutable)


def avg_mlu_bias(topo: Topology, truths: Sequence, preds: Sequence, jobs: int = 1) -> BiasReport:
    return asyncio.run(avg_mlu_bias_async(topo, truths, preds, jobs=jobs))


def export_utilization_csv(result: MluResult, topo: Topology, path: Union[str, Path]) -> Path:
    rows = ((link.src, link.dst, link.capacity, float(u))
            for link, u in zip(topo.links, result.per_link_utilization))
    return write_rows(path, ["src", "dst", "capacity", "utilization"], rows)

"""Flow clustering: source grouping, agglomerative clustering of a distance matrix and dendrogram cuts."""
import json
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.cluster.hierarchy import DisjointSet

from app.constants import ClusterMethod, Linkage
from app.constants.status import Status
from app.lib.analysis import DistanceMatrix
from app.lib.exception import TmException
from app.types import ClusterSummaryType
from app.utils.csvio import write_rows
from app.utils.logger import logger


class ClusterAssignment(BaseModel):
    """Partition of flow ids 0..F-1 into disjoint, non-empty clusters."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    method: ClusterMethod
    clusters: List[List[int]]
    flow_to_cluster: np.ndarray
    provenance: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def from_clusters(cls, method: ClusterMethod, clusters: Sequence[Sequence[int]],
                      provenance: Optional[Dict[str, Any]] = None) -> "ClusterAssignment":
        ordered = sorted((sorted(int(f) for f in members) for members in clusters), key=lambda c: c[0] if c else -1)
        flow_count = sum(len(c) for c in ordered)
        flow_to_cluster = np.full(flow_count, -1, dtype=np.int64)
        for index, members in enumerate(ordered):
            for flow_id in members:
                if not 0 <= flow_id < flow_count or flow_to_cluster[flow_id] != -1:
                    raise TmException(Status.DOMAIN_ERROR,
                                      f"clusters do not partition 0..{flow_count - 1} (flow {flow_id})")
                flow_to_cluster[flow_id] = index
        return cls(method=method, clusters=ordered, flow_to_cluster=flow_to_cluster, provenance=provenance or {})

    @model_validator(mode="after")
    def validate_partition(self):
        flow_count = len(self.flow_to_cluster)
        if any(len(c) == 0 for c in self.clusters):
            raise TmException(Status.DOMAIN_ERROR, "cluster assignment contains an empty cluster")
        members = sorted(f for c in self.clusters for f in c)
        if members != list(range(flow_count)):
            raise TmException(Status.DOMAIN_ERROR, f"clusters do not partition 0..{flow_count - 1}")
        if self.method == ClusterMethod.SOURCE:
            node_count = int(round(flow_count ** 0.5))
            if node_count * node_count != flow_count or len(self.clusters) != node_count:
                raise TmException(Status.DOMAIN_ERROR, "source clustering must have one cluster per node")
        elif self.method == ClusterMethod.ENTIRE_MATRIX and len(self.clusters) != 1:
            raise TmException(Status.DOMAIN_ERROR, "entire-matrix assignment must be a single cluster")
        elif self.method == ClusterMethod.LOCAL and len(self.clusters) != flow_count:
            raise TmException(Status.DOMAIN_ERROR, "local assignment must use singleton clusters")
        return self

    @property
    def flow_count(self) -> int:
        return len(self.flow_to_cluster)

    def __len__(self) -> int:
        return len(self.clusters)


class LinkageMatrix(BaseModel):
    """(F-1) merge rows of (left id, right id, distance, merged size); ids >= F are earlier merges."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    merges: np.ndarray
    flow_ids: List[int]
    linkage: Linkage = Linkage.AVERAGE

    @model_validator(mode="after")
    def validate_merges(self):
        f = len(self.flow_ids)
        if self.merges.shape != (f - 1, 4):
            raise TmException(Status.DIMENSION_ERROR, f"linkage for {f} leaves needs {f - 1} x 4 rows")
        if f > 1 and int(self.merges[-1, 3]) != f:
            raise TmException(Status.DOMAIN_ERROR, "final merge must contain every leaf")
        return self

    @property
    def leaf_count(self) -> int:
        return len(self.flow_ids)

    @property
    def distances(self) -> np.ndarray:
        return self.merges[:, 2]


# --- fixed groupings -----------------------------------------------------------------------------


def source_clusters(node_count: int) -> ClusterAssignment:
    if node_count < 1:
        raise TmException(Status.DOMAIN_ERROR, f"node_count must be >= 1, got {node_count}")
    clusters = [[s * node_count + d for d in range(node_count)] for s in range(node_count)]
    return ClusterAssignment.from_clusters(ClusterMethod.SOURCE, clusters)


def entire_matrix_clusters(flow_count: int) -> ClusterAssignment:
    return ClusterAssignment.from_clusters(ClusterMethod.ENTIRE_MATRIX, [list(range(flow_count))])


def local_clusters(flow_count: int) -> ClusterAssignment:
    return ClusterAssignment.from_clusters(ClusterMethod.LOCAL, [[f] for f in range(flow_count)])


# --- agglomeration -------------------------------------------------------------------------------


def _pick_pair(dist: np.ndarray, ids: np.ndarray) -> Tuple[int, int]:
    """Slots of the closest pair; equal distances resolve to the smallest (left id, right id)."""
    best = dist.min()
    rows, cols = np.nonzero(dist == best)
    lo = np.minimum(ids[rows], ids[cols])
    hi = np.maximum(ids[rows], ids[cols])
    k = np.lexsort((hi, lo))[0]
    return int(rows[k]), int(cols[k])


def agglomerate(d: DistanceMatrix, linkage: Linkage = Linkage.AVERAGE) -> LinkageMatrix:
    f = d.dim
    if f < 2:
        raise TmException(Status.INSUFFICIENT_DATA, f"agglomeration needs at least 2 points, got {f}")
    linkage = Linkage(linkage)

    dist = np.array(d.d, dtype=np.float64)
    np.fill_diagonal(dist, np.inf)
    ids = np.arange(f)
    sizes = np.ones(f, dtype=np.int64)
    active = np.ones(f, dtype=bool)
    merges = np.zeros((f - 1, 4))
    previous = 0.0

    for step in range(f - 1):
        a, b = _pick_pair(dist, ids)
        height = max(float(dist[a, b]), previous)
        merges[step] = (min(ids[a], ids[b]), max(ids[a], ids[b]), height, sizes[a] + sizes[b])
        previous = height

        # Lance-Williams update into slot a; slot b retires
        da, db = dist[a], dist[b]
        with np.errstate(invalid="ignore"):
            if linkage == Linkage.SINGLE:
                merged = np.minimum(da, db)
            elif linkage == Linkage.COMPLETE:
                merged = np.maximum(da, db)
            else:
                # written as an offset so equal inputs stay bit-identical
                merged = da + (db - da) * (sizes[b] / (sizes[a] + sizes[b]))
        merged[~active] = np.inf
        dist[a, :] = merged
        dist[:, a] = merged
        dist[a, a] = np.inf
        dist[b, :] = np.inf
        dist[:, b] = np.inf

        active[b] = False
        sizes[a] += sizes[b]
        ids[a] = f + step

    logger.debug(f"Agglomerated {f} leaves with {linkage.value} linkage; final height {previous:.6g}")
    return LinkageMatrix(merges=merges, flow_ids=list(d.flow_ids), linkage=linkage)


def cut_tree(l: LinkageMatrix, threshold: float) -> ClusterAssignment:
    """Clusters are the leaf sets joined by merges strictly below `threshold`."""
    if threshold < 0:
        raise TmException(Status.DOMAIN_ERROR, f"threshold must be >= 0, got {threshold}")
    f = l.leaf_count
    forest = DisjointSet(range(2 * f - 1))
    for step, (left, right, height, _) in enumerate(l.merges):
        if height < threshold:
            forest.merge(int(left), f + step)
            forest.merge(int(right), f + step)

    groups: Dict[int, List[int]] = {}
    for leaf in range(f):
        groups.setdefault(forest[leaf], []).append(l.flow_ids[leaf])
    return ClusterAssignment.from_clusters(
        ClusterMethod.HISTOGRAM,
        list(groups.values()),
        provenance={"threshold": float(threshold), "linkage": l.linkage.value},
    )


def largest_gap_threshold(l: LinkageMatrix) -> float:
    """Midpoint of the widest gap between consecutive merge heights."""
    heights = np.sort(l.distances)
    if len(heights) < 2:
        heights = np.concatenate([[0.0], heights])
    gaps = np.diff(heights)
    k = int(np.argmax(gaps))
    return float((heights[k] + heights[k + 1]) / 2.0)


def threshold_sweep(l: LinkageMatrix, thresholds: Sequence[float]) -> List[Tuple[float, int]]:
    return [(float(t), len(cut_tree(l, t))) for t in thresholds]


# --- reporting and persistence -------------------------------------------------------------------


def cluster_summary(a: ClusterAssignment) -> ClusterSummaryType:
    sizes = Counter(len(c) for c in a.clusters)
    return {
        "method": a.method.value,
        "flow_count": a.flow_count,
        "cluster_count": len(a.clusters),
        "size_histogram": [[size, sizes[size]] for size in sorted(sizes)],
        "clusters": [list(c) for c in a.clusters],
        "provenance": dict(a.provenance),
    }


def check_reference_count(a: ClusterAssignment, reference: Optional[int]) -> Optional[int]:
    """Deviation from a reference cluster count; reported, never raised."""
    if reference is None:
        return None
    deviation = len(a) - reference
    if deviation:
        logger.warning(f"{a.method.value} clustering produced {len(a)} clusters, reference is {reference}")
    return deviation


def save_assignment(a: ClusterAssignment, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"method": a.method.value, "clusters": a.clusters, "provenance": a.provenance}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_assignment(path: Union[str, Path]) -> ClusterAssignment:
    path = Path(path)
    if not path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"cluster assignment not found: {path} (run `cluster` first)")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return ClusterAssignment.from_clusters(
            ClusterMethod(payload["method"]), payload["clusters"], payload.get("provenance", {}))
    except (KeyError, ValueError) as e:
        raise TmException(Status.PARSE_ERROR, f"{path}: malformed cluster assignment: {e}") from e


def export_linkage_csv(l: LinkageMatrix, path: Union[str, Path]) -> Path:
    rows = ((int(left), int(right), float(dist), int(size)) for left, right, dist, size in l.merges)
    return write_rows(path, ["left", "right", "distance", "size"], rows)

import sys
from typing import Any, Dict, List, Optional

if sys.version_info >= (3, 11):
    from typing import NotRequired, Required, TypedDict
else:
    from typing_extensions import NotRequired, Required, TypedDict


class ClusterSummaryType(TypedDict):
    method: str
    flow_count: int
    cluster_count: int
    size_histogram: List[List[int]]
    clusters: List[List[int]]
    provenance: Dict[str, Any]


class ModelReportType(TypedDict):
    cluster_index: int
    flow_ids: List[int]
    epochs_run: int
    best_epoch: int
    best_val_loss: Optional[float]
    stopped_early: bool
    checkpoint: NotRequired[str]


class StageResultType(TypedDict):
    stage: str
    output_dir: Required[str]
    files: List[str]
    summary: NotRequired[Dict[str, Any]]

"""
Pipeline stages behind the command line.

Every stage reads its inputs from and writes its outputs to `RunConfig.output_dir`:

    ingest    tm.csv, ingest_summary.txt
    cluster   assignment.json, cluster_summary.json, linkage.csv, jsd_distance.csv,
              threshold_sweep.csv, same_source_curve.csv, strong_pair_consistency.csv
    train     predictions.csv, checkpoints/*.npz, train_reports.json, training_curves.csv
    evaluate  errors.csv, errors_*.txt, per_flow_rmse.csv, traces/, heatmaps/,
              bias.csv, bias.txt, bias_per_window.csv, utilization/
    report    runs.csv, table_errors.csv, table_bias.csv (in the report directory)

plus `manifest.txt` (replayable config) and `run_info.txt` (config hash and split boundaries).
"""
import asyncio
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.constants import ClusterMethod, ErrorScope, Grouping, InputFormat, STRONG_CORRELATION
from app.constants.status import Status
from app.config.settings import RunConfig
from app.lib.analysis import (
    correlation_matrix,
    export_square_csv,
    flow_histograms,
    jsd_distance_matrix,
    same_source_curve,
    strong_pair_consistency,
)
from app.lib.clusters import (
    ClusterAssignment,
    agglomerate,
    check_reference_count,
    cluster_summary,
    cut_tree,
    entire_matrix_clusters,
    export_linkage_csv,
    largest_gap_threshold,
    load_assignment,
    local_clusters,
    save_assignment,
    source_clusters,
    threshold_sweep,
)
from app.lib.exception import TmException
from app.lib.forecast import TrainConfig, run_experiment_async, save_checkpoint
from app.lib.metrics import (
    REPORT_CSV_HEADER,
    error_report,
    report_csv_row,
    write_report,
)
from app.lib.synthetic import REGIME_NAMES, planted_regimes
from app.lib.teeval import (
    Topology,
    avg_mlu_bias_async,
    export_utilization_csv,
    load_topology,
    min_mlu,
    ring_topology,
    write_topology,
)
from app.lib.tmdata import (
    TmSeries,
    chronological_split,
    extract_flows,
    fit_normalization,
    normalize_columns,
    read_canonical,
    read_dense,
    write_canonical,
)
from app.types import ModelReportType, StageResultType
from app.utils.csvio import read_rows, write_key_values, write_rows, write_square
from app.utils.logger import logger

TM_FILE = "tm.csv"
MANIFEST_FILE = "manifest.txt"
RUN_INFO_FILE = "run_info.txt"
ASSIGNMENT_FILE = "assignment.json"
PREDICTIONS_FILE = "predictions.csv"
ERRORS_FILE = "errors.csv"
BIAS_FILE = "bias.csv"

BIAS_CSV_HEADER = ("method", "seed", "avg_mlu_bias", "evaluated", "skipped", "unroutable")
CURVE_PERCENTS = (1, 2, 5, 10, 15, 20, 25, 30, 40, 50, 60, 70, 80, 90, 100)
CONSISTENCY_SEGMENTS = 4
METHOD_ORDER = (ClusterMethod.SOURCE, ClusterMethod.HISTOGRAM, ClusterMethod.ENTIRE_MATRIX, ClusterMethod.LOCAL)


def _stage_result(stage: str, cfg_or_dir: Union[RunConfig, Path], files: List[Path],
                  summary: Optional[Dict[str, Any]] = None) -> StageResultType:
    out = cfg_or_dir.output_dir if isinstance(cfg_or_dir, RunConfig) else cfg_or_dir
    result: StageResultType = {"stage": stage, "output_dir": str(out), "files": [str(f) for f in files]}
    if summary is not None:
        result["summary"] = summary
    logger.success(f"{stage} finished: {len(files)} file(s) in {out}")
    return result


def _write_manifest(cfg: RunConfig, info: Optional[Dict[str, Any]] = None) -> List[Path]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / MANIFEST_FILE
    manifest.write_text(cfg.to_manifest_text(), encoding="utf-8")
    run_info = write_key_values(out / RUN_INFO_FILE, {"config_hash": cfg.config_hash(), **(info or {})})
    return [manifest, run_info]


def _load_tm(cfg: RunConfig) -> TmSeries:
    path = Path(cfg.output_dir) / TM_FILE
    if not path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"{path} not found (run `ingest` first)")
    tm, _ = read_canonical(path, cfg.node_count, cfg.interval_seconds)
    return tm


def _split_info(cfg: RunConfig, tm: TmSeries) -> Tuple[TmSeries, TmSeries, TmSeries, Dict[str, Any]]:
    train_s, val_s, test_s = chronological_split(tm, cfg.train_frac, cfg.val_frac_of_train)
    info = {
        "train_steps": len(train_s),
        "validation_steps": len(val_s),
        "test_steps": len(test_s),
        "test_first_timestamp": int(test_s.timestamps[0]),
    }
    return train_s, val_s, test_s, info


# --- ingest --------------------------------------------------------------------------------------


async def ingest(cfg: RunConfig) -> StageResultType:
    reader = read_dense if cfg.input_format == InputFormat.DENSE else read_canonical
    tm, stats = reader(cfg.dataset, cfg.node_count, cfg.interval_seconds)
    out = Path(cfg.output_dir)
    files = [
        write_canonical(tm, out / TM_FILE),
        write_key_values(out / "ingest_summary.txt", stats.model_dump()),
        *_write_manifest(cfg),
    ]
    logger.info(f"{stats.flow_count} flows over {stats.steps} steps ({stats.duration_seconds} s); "
                f"{stats.missing_entries} zero entries, {stats.irregular_gaps} irregular gaps")
    return _stage_result("ingest", cfg, files, stats.model_dump())


# --- cluster -------------------------------------------------------------------------------------


def _correlation_outputs(train_s: TmSeries, out: Path) -> List[Path]:
    flows = extract_flows(train_s)
    if len(flows) < 2:
        return []
    corr = correlation_matrix(flows, train_s.node_count)
    try:
        by_source = same_source_curve(corr, CURVE_PERCENTS, Grouping.SOURCE)
        by_either = same_source_curve(corr, CURVE_PERCENTS, Grouping.SOURCE_OR_DESTINATION)
    except TmException as e:
        logger.warning(f"same-source analysis skipped: {e.msg}")
        return []
    files = [write_rows(out / "same_source_curve.csv", ["top_percent", "same_source", "same_source_or_destination"],
                        ((x, a, b) for (x, a), (_, b) in zip(by_source, by_either)))]
    try:
        consistency = strong_pair_consistency(flows, CONSISTENCY_SEGMENTS, STRONG_CORRELATION)
        files.append(write_rows(out / "strong_pair_consistency.csv", ["segment", "still_strong"],
                                enumerate(consistency, start=1)))
    except TmException as e:
        logger.warning(f"strong-pair consistency skipped: {e.msg}")
    return files


def _histogram_assignment(cfg: RunConfig, train_s: TmSeries, out: Path) -> Tuple[ClusterAssignment, List[Path]]:
    params = fit_normalization(train_s)
    flow_ids = list(range(train_s.flow_count))
    normalized = normalize_columns(train_s.flow_matrix(), params, flow_ids)
    distances = jsd_distance_matrix(flow_histograms(normalized, cfg.bin_count, flow_ids))
    tree = agglomerate(distances, cfg.linkage)

    if cfg.cut_threshold == "auto":
        threshold = largest_gap_threshold(tree)
        logger.info(f"Largest dendrogram gap puts the cut at {threshold:.6g}")
    else:
        threshold = float(cfg.cut_threshold)
    cut = cut_tree(tree, threshold)
    assignment = ClusterAssignment.from_clusters(
        cut.method, cut.clusters,
        {**cut.provenance, "bin_count": cfg.bin_count, "auto_threshold": cfg.cut_threshold == "auto"})

    files = [export_linkage_csv(tree, out / "linkage.csv"), export_square_csv(distances, out / "jsd_distance.csv")]
    if cfg.sweep_thresholds:
        files.append(write_rows(out / "threshold_sweep.csv", ["threshold", "cluster_count"],
                                threshold_sweep(tree, sorted(cfg.sweep_thresholds))))
    return assignment, files


async def cluster(cfg: RunConfig) -> StageResultType:
    tm = _load_tm(cfg)
    train_s, _, _, info = _split_info(cfg, tm)
    out = Path(cfg.output_dir)
    files: List[Path] = []

    if cfg.method == ClusterMethod.SOURCE:
        assignment = source_clusters(tm.node_count)
        files += _correlation_outputs(train_s, out)
    elif cfg.method == ClusterMethod.ENTIRE_MATRIX:
        assignment = entire_matrix_clusters(tm.flow_count)
    elif cfg.method == ClusterMethod.LOCAL:
        assignment = local_clusters(tm.flow_count)
    else:
        assignment, extra = _histogram_assignment(cfg, train_s, out)
        files += extra

    summary = cluster_summary(assignment)
    deviation = check_reference_count(assignment, cfg.reference_cluster_count)
    if deviation is not None:
        summary["provenance"]["reference_deviation"] = deviation
    summary_path = out / "cluster_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files += [save_assignment(assignment, out / ASSIGNMENT_FILE), summary_path,
              *_write_manifest(cfg, {**info, "cluster_count": len(assignment)})]
    logger.info(f"{cfg.method.value}: {len(assignment)} cluster(s) over {assignment.flow_count} flows")
    return _stage_result("cluster", cfg, files, {"cluster_count": len(assignment)})


# --- train ---------------------------------------------------------------------------------------


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                       patience=cfg.patience, min_delta=cfg.min_delta, seed=cfg.seed)


async def train(cfg: RunConfig) -> StageResultType:
    tm = _load_tm(cfg)
    out = Path(cfg.output_dir)
    assignment = load_assignment(out / ASSIGNMENT_FILE)
    if assignment.method != cfg.method:
        raise TmException(Status.CONFIG_ERROR,
                          f"{out / ASSIGNMENT_FILE} holds a {assignment.method.value} assignment but the run "
                          f"asks for {cfg.method.value} (re-run `cluster`)")
    _, _, _, info = _split_info(cfg, tm)

    predictions = await run_experiment_async(
        tm, assignment, train_config(cfg), cfg.window_length, hidden_dim=cfg.hidden_dim,
        train_frac=cfg.train_frac, val_frac_of_train=cfg.val_frac_of_train, jobs=cfg.jobs)

    checkpoint_dir = out / "checkpoints"
    if checkpoint_dir.exists():
        for stale in checkpoint_dir.glob("*.npz"):
            stale.unlink()
    files = [write_canonical(predictions.predicted_series(), out / PREDICTIONS_FILE)]

    reports: List[ModelReportType] = []
    curves = []
    for fit in predictions.fits:
        checkpoint = save_checkpoint(fit.model, checkpoint_dir / f"cluster_{fit.cluster_index:04d}.npz")
        files.append(checkpoint)
        report = fit.report
        reports.append({
            "cluster_index": fit.cluster_index,
            "flow_ids": fit.flow_ids,
            "epochs_run": report.epochs_run,
            "best_epoch": report.best_epoch,
            "best_val_loss": report.val_loss_curve[report.best_epoch] if report.val_loss_curve else None,
            "stopped_early": report.stopped_early,
            "checkpoint": checkpoint.name,
        })
        for epoch, train_loss in enumerate(report.train_loss_curve):
            val_loss = report.val_loss_curve[epoch] if report.val_loss_curve else None
            curves.append((fit.cluster_index, epoch, train_loss, val_loss))

    reports_path = out / "train_reports.json"
    reports_path.write_text(json.dumps(reports, indent=2) + "\n", encoding="utf-8")
    files += [reports_path,
              write_rows(out / "training_curves.csv", ["cluster", "epoch", "train_loss", "val_loss"], curves),
              *_write_manifest(cfg, {**info, "model_count": len(reports)})]
    return _stage_result("train", cfg, files, {"model_count": len(reports)})


# --- evaluate ------------------------------------------------------------------------------------


def _trace_flows(cfg: RunConfig, constant: np.ndarray) -> List[int]:
    if cfg.trace_flows:
        flows = list(cfg.trace_flows)
    else:
        flows = [int(f) for f in np.flatnonzero(~constant)[:3]]
    for flow_id in flows:
        if not 0 <= flow_id < len(constant):
            raise TmException(Status.BOUNDS_ERROR, f"trace flow {flow_id} outside [0,{len(constant)})")
    return flows


def _heatmap_windows(cfg: RunConfig, window_count: int) -> List[int]:
    windows = list(cfg.heatmap_windows) or sorted({0, window_count - 1})
    for w in windows:
        if not 0 <= w < window_count:
            raise TmException(Status.BOUNDS_ERROR, f"heatmap window {w} outside [0,{window_count})")
    return windows


async def _utilization_outputs(topo: Topology, truth: np.ndarray, pred: np.ndarray, windows: Sequence[int],
                               out: Path) -> List[Path]:
    """Per-link utilization of the optimal routing of the true and predicted demand of each window."""
    files = []
    for w in windows:
        for kind, demand in (("truth", truth[w]), ("predicted", pred[w])):
            result = await asyncio.to_thread(min_mlu, topo, demand)
            if not result.optimal:
                logger.warning(f"window {w}: {kind} demand cannot be routed, no utilization written")
                continue
            files.append(export_utilization_csv(result, topo, out / "utilization" / f"window_{w}_{kind}.csv"))
    return files


async def evaluate(cfg: RunConfig) -> StageResultType:
    tm = _load_tm(cfg)
    out = Path(cfg.output_dir)
    train_s, _, test_s, _ = _split_info(cfg, tm)
    params = fit_normalization(train_s)

    pred_path = out / PREDICTIONS_FILE
    if not pred_path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"{pred_path} not found (run `train` first)")
    predicted, _ = read_canonical(pred_path, cfg.node_count, cfg.interval_seconds)
    if not np.array_equal(predicted.timestamps, test_s.timestamps):
        raise TmException(Status.DIMENSION_ERROR,
                          f"{pred_path} does not cover the {len(test_s)} test steps of this configuration")
    truth, pred = test_s.matrices, predicted.matrices
    method, seed = cfg.method.value, cfg.seed

    normalized = error_report(truth, pred, ErrorScope.NORMALIZED, params, per_flow=True)
    raw = error_report(truth, pred, ErrorScope.DENORMALIZED)
    n = cfg.node_count
    files = [
        write_report(normalized, out / "errors_normalized.txt"),
        write_report(raw, out / "errors_denormalized.txt"),
        write_rows(out / ERRORS_FILE, REPORT_CSV_HEADER,
                   [report_csv_row(normalized, method, seed), report_csv_row(raw, method, seed)]),
        write_rows(out / "per_flow_rmse.csv", ["flow_id", "src", "dst", "rmse_normalized"],
                   ((f, f // n, f % n, float(v)) for f, v in enumerate(normalized.per_flow_rmse))),
    ]
    logger.info(f"{method} seed {seed}: normalized RMSE {normalized.rmse:.6g}, MAE {normalized.mae:.6g}")

    truth_cols, pred_cols = test_s.flow_matrix(), predicted.flow_matrix()
    for flow_id in _trace_flows(cfg, params.constant):
        files.append(write_rows(out / "traces" / f"flow_{flow_id}.csv", ["timestamp", "truth", "predicted"],
                                zip(test_s.timestamps.tolist(), truth_cols[:, flow_id], pred_cols[:, flow_id])))
    for w in _heatmap_windows(cfg, len(test_s)):
        files.append(write_square(out / "heatmaps" / f"window_{w}_truth.csv", truth[w], range(n), corner="src"))
        files.append(write_square(out / "heatmaps" / f"window_{w}_predicted.csv", pred[w], range(n), corner="src"))

    summary: Dict[str, Any] = {"rmse": normalized.rmse, "mae": normalized.mae}
    if cfg.topology is not None:
        topo = load_topology(cfg.topology)
        if topo.node_count != n:
            raise TmException(Status.TOPOLOGY_ERROR,
                              f"{cfg.topology} has {topo.node_count} nodes, traffic matrices have {n}")
        bias = await avg_mlu_bias_async(topo, truth, pred, jobs=cfg.jobs, allow_empty=True)
        files += [
            write_rows(out / BIAS_FILE, BIAS_CSV_HEADER,
                       [(method, seed, bias.mean, bias.evaluated, bias.skipped, bias.unroutable)]),
            write_key_values(out / "bias.txt", {"avg_mlu_bias": bias.mean, "evaluated": bias.evaluated,
                                                "skipped": bias.skipped, "unroutable": bias.unroutable}),
            write_rows(out / "bias_per_window.csv", ["window", "timestamp", "bias"],
                       ((w, int(ts), b) for w, (ts, b) in enumerate(zip(test_s.timestamps, bias.per_window)))),
        ]
        files += await _utilization_outputs(topo, truth, pred, _heatmap_windows(cfg, len(test_s)), out)
        summary["avg_mlu_bias"] = bias.mean
        if bias.mean is None:
            logger.warning(f"no window could be evaluated for MLU bias ({bias.skipped} skipped, "
                           f"{bias.unroutable} unroutable)")
        else:
            logger.info(f"{method} seed {seed}: average MLU bias {bias.mean:.6g} over {bias.evaluated} windows")

    files += _write_manifest(cfg, {"test_steps": len(test_s)})
    return _stage_result("evaluate", cfg, files, summary)


# --- report --------------------------------------------------------------------------------------


def _read_float(text: str) -> Optional[float]:
    return float(text) if text.strip() else None


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return math.fsum(present) / len(present) if present else None


def load_reference_table(path: Union[str, Path]) -> Dict[Tuple[str, str], float]:
    """CSV with `method,metric,value` rows; metric is rmse, mae or bias."""
    path = Path(path)
    if not path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"reference table not found: {path}")
    header, rows = read_rows(path)
    if [h.strip() for h in header] != ["method", "metric", "value"]:
        raise TmException(Status.PARSE_ERROR, f"{path}:1: expected header method,metric,value")
    table = {}
    for line_no, row in enumerate(rows, start=2):
        try:
            method = ClusterMethod.from_cli(row[0].strip()).value
            table[(method, row[1].strip())] = float(row[2])
        except (IndexError, ValueError) as e:
            raise TmException(Status.PARSE_ERROR, f"{path}:{line_no}: malformed reference row: {e}") from e
    return table


def _collect_runs(run_dirs: Sequence[Union[str, Path]]) -> List[Dict[str, Any]]:
    runs: Dict[Tuple[str, int], Dict[str, Any]] = {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        errors = run_dir / ERRORS_FILE
        if not errors.exists():
            raise TmException(Status.MISSING_ARTIFACT, f"{errors} not found (run `evaluate` first)")
        _, rows = read_rows(errors)
        for method, seed, scope, n, rmse, mae in rows:
            run = runs.setdefault((method, int(seed)), {"method": method, "seed": int(seed), "avg_mlu_bias": None})
            suffix = "_normalized" if scope == ErrorScope.NORMALIZED.value else ""
            run["n"] = int(n)
            run[f"rmse{suffix}"] = float(rmse)
            run[f"mae{suffix}"] = float(mae)
        bias = run_dir / BIAS_FILE
        if bias.exists():
            _, rows = read_rows(bias)
            for method, seed, mean, *_ in rows:
                runs.setdefault((method, int(seed)), {"method": method, "seed": int(seed)})["avg_mlu_bias"] = \
                    _read_float(mean)

    order = {m.value: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(runs.values(), key=lambda r: (order.get(r["method"], len(order)), r["method"], r["seed"]))


async def report(run_dirs: Sequence[Union[str, Path]], output_dir: Union[str, Path],
                 reference_table: Optional[Union[str, Path]] = None) -> StageResultType:
    if not run_dirs:
        raise TmException(Status.EMPTY_INPUT, "no run directories given")
    out = Path(output_dir)
    runs = _collect_runs(run_dirs)
    reference = load_reference_table(reference_table) if reference_table is not None else {}
    methods = list(dict.fromkeys(r["method"] for r in runs))

    run_columns = ["method", "seed", "n", "rmse_normalized", "mae_normalized", "rmse", "mae", "avg_mlu_bias"]
    files = [write_rows(out / "runs.csv", run_columns, ([r.get(c) for c in run_columns] for r in runs))]

    def per_method(key: str) -> List[Optional[float]]:
        return [_mean([r.get(key) for r in runs if r["method"] == m]) for m in methods]

    error_rows = [["rmse", *per_method("rmse_normalized")], ["mae", *per_method("mae_normalized")]]
    bias_rows = [["avg_mlu_bias", *per_method("avg_mlu_bias")]]
    if reference:
        error_rows += [[f"{metric}_reference", *[reference.get((m, metric)) for m in methods]]
                       for metric in ("rmse", "mae")]
        bias_rows.append(["avg_mlu_bias_reference", *[reference.get((m, "bias")) for m in methods]])
    files += [write_rows(out / "table_errors.csv", ["metric", *methods], error_rows),
              write_rows(out / "table_bias.csv", ["metric", *methods], bias_rows)]

    for row in error_rows + bias_rows:
        logger.info(f"{row[0]:<24}" + "".join(f"{m}={'-' if v is None else f'{v:.4g}'}  "
                                              for m, v in zip(methods, row[1:])))
    return _stage_result("report", out, files, {"runs": len(runs), "methods": methods})


# --- synthetic data ------------------------------------------------------------------------------


async def synth(output_dir: Union[str, Path], node_count: int, steps: int, regimes: int, seed: int,
                interval_seconds: int) -> StageResultType:
    out = Path(output_dir)
    tm, labels = planted_regimes(node_count, steps, regimes, seed, interval_seconds)
    files = [
        write_canonical(tm, out / "synthetic.csv"),
        write_rows(out / "regimes.csv", ["flow_id", "src", "dst", "regime", "regime_name"],
                   ((f, f // node_count, f % node_count, int(r), REGIME_NAMES[r]) for f, r in enumerate(labels))),
        write_topology(ring_topology(node_count), out / "ring.topo"),
    ]
    logger.info(f"Generated {steps} steps for {tm.flow_count} flows in {regimes} regime(s)")
    return _stage_result("synth", out, files, {"flow_count": tm.flow_count})

import asyncio
import math
from collections import Counter
from pathlib import Path

import pytest
from dotenv import dotenv_values

from app import pipeline
from app.config.settings import RunConfig
from app.constants import DEFAULT_BIN_COUNT, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC_OF_TRAIN, Linkage
from app.lib.analysis import flow_histograms, jsd_distance_matrix
from app.lib.clusters import agglomerate, cut_tree, largest_gap_threshold, load_assignment
from app.lib.synthetic import planted_regimes
from app.lib.tmdata import chronological_split, fit_normalization, normalize_columns
from app.utils.csvio import read_rows

NODES = 6
STEPS = 2000
METHODS = ("histogram", "entire_matrix", "local")
BUNDLED_CONFIG = Path(__file__).resolve().parents[1] / "data" / "configs" / "synthetic.cfg"
TRAINING_KEYS = ("window_length", "bin_count", "hidden_dim", "epochs", "batch_size", "learning_rate", "patience")


def _purity(clusters, labels) -> float:
    majority = sum(Counter(int(labels[f]) for f in c).most_common(1)[0][1] for c in clusters)
    return majority / len(labels)


def test_largest_gap_recovers_planted_regimes():
    tm, labels = planted_regimes(NODES, STEPS, regimes=3, seed=7)
    train_s, _, _ = chronological_split(tm, DEFAULT_TRAIN_FRAC, DEFAULT_VAL_FRAC_OF_TRAIN)
    flow_ids = list(range(tm.flow_count))
    normalized = normalize_columns(train_s.flow_matrix(), fit_normalization(train_s), flow_ids)
    tree = agglomerate(jsd_distance_matrix(flow_histograms(normalized, DEFAULT_BIN_COUNT, flow_ids)),
                       Linkage.AVERAGE)

    clusters = cut_tree(tree, largest_gap_threshold(tree)).clusters
    assert len(clusters) == 3
    assert _purity(clusters, labels) >= 0.95


def _run_methods(data_dir, methods, **settings):
    """Ingest, cluster, train and evaluate each method on the synthesized dataset; returns the summaries."""
    summaries = {}
    for method in methods:
        cfg = RunConfig.build({
            "dataset": data_dir / "synthetic.csv",
            "node_count": NODES,
            "method": method,
            "seed": 7,
            "jobs": 4,
            "topology": data_dir / "ring.topo",
            "output_dir": data_dir / method,
            **settings,
        })
        for stage in (pipeline.ingest, pipeline.cluster, pipeline.train):
            asyncio.run(stage(cfg))
        summaries[method] = asyncio.run(pipeline.evaluate(cfg))["summary"]
    return summaries


@pytest.mark.slow
def test_end_to_end_on_planted_regimes(tmp_path):
    asyncio.run(pipeline.synth(tmp_path, node_count=NODES, steps=STEPS, regimes=3, seed=7, interval_seconds=300))
    _, regime_rows = read_rows(tmp_path / "regimes.csv")
    labels = [int(row[3]) for row in regime_rows]

    summaries = _run_methods(tmp_path, METHODS, hidden_dim=8, epochs=5)
    for summary in summaries.values():
        assert math.isfinite(summary["rmse"]) and summary["rmse"] >= summary["mae"]
        assert summary["avg_mlu_bias"] is not None and summary["avg_mlu_bias"] > 0

    assignment = load_assignment(tmp_path / "histogram" / pipeline.ASSIGNMENT_FILE)
    assert len(assignment) == 3
    assert _purity(assignment.clusters, labels) >= 0.95

    result = asyncio.run(pipeline.report([tmp_path / m for m in METHODS], tmp_path / "report"))
    assert result["summary"]["methods"] == list(METHODS)
    header, rows = read_rows(tmp_path / "report" / "table_errors.csv")
    assert header == ["metric", *METHODS]
    assert all(float(v) > 0 for v in rows[0][1:])


@pytest.mark.slow
def test_histogram_clusters_beat_one_model_for_the_whole_matrix(tmp_path):
    asyncio.run(pipeline.synth(tmp_path, node_count=NODES, steps=STEPS, regimes=3, seed=7, interval_seconds=300))
    settings = dotenv_values(BUNDLED_CONFIG)
    summaries = _run_methods(tmp_path, METHODS, **{key: settings[key] for key in TRAINING_KEYS})
    histogram, whole, local = (summaries[m] for m in METHODS)

    assert histogram["rmse"] <= 0.9 * whole["rmse"]
    assert local["rmse"] < histogram["rmse"]
    assert abs(histogram["avg_mlu_bias"] - 1.0) < abs(whole["avg_mlu_bias"] - 1.0)

import os

# keep test output quiet and stop the file sink from writing into the repo
os.environ.setdefault("DISABLE_LOG", "true")

from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.lib.tmdata import TmSeries  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parent.parent
TOPOLOGY_DIR = REPO_ROOT / "data" / "topologies"


def make_series(matrices, interval_seconds: int = 300, start: int = 0) -> TmSeries:
    matrices = np.asarray(matrices, dtype=np.float64)
    steps, n, _ = matrices.shape
    return TmSeries(
        node_count=n,
        timestamps=start + np.arange(steps, dtype=np.int64) * interval_seconds,
        matrices=matrices,
        interval_seconds=interval_seconds,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def series_factory():
    return make_series


@pytest.fixture
def random_series(rng):
    """3 nodes, 40 steps of strictly positive traffic."""
    return make_series(rng.uniform(1.0, 100.0, size=(40, 3, 3)))


@pytest.fixture
def write_text(tmp_path):
    def _write(name: str, text: str) -> Path:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path
    return _write

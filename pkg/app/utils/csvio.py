import csv
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import numpy as np


def format_cell(value: Any) -> str:
    """Render one CSV cell. Floats use the shortest round-tripping repr so files are byte-stable."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_rows(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def write_square(path: Union[str, Path], matrix: np.ndarray, labels: Sequence[int], corner: str = "flow_id") -> Path:
    """Square matrix with a label header row and a label first column."""
    matrix = np.asarray(matrix)
    return write_rows(
        path,
        [corner, *[str(label) for label in labels]],
        ([label, *matrix[i].tolist()] for i, label in enumerate(labels)),
    )


def write_key_values(path: Union[str, Path], values: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={format_cell(v)}\n" for k, v in values.items()), encoding="utf-8")
    return path


def read_rows(path: Union[str, Path]) -> tuple[list[str], list[list[str]]]:
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, [])
        return header, [row for row in reader]

from pathlib import Path
from typing import Union

import numpy as np

from app.constants import CHECKPOINT_FORMAT_VERSION
from app.constants.status import Status
from app.lib.exception import TmException
from app.lib.forecast.gru import PARAM_NAMES, GruForecaster

_META_KEYS = ("format_version", "input_dim", "hidden_dim", "seed")


def save_checkpoint(m: GruForecaster, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: m.params[name] for name in PARAM_NAMES}
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_FORMAT_VERSION),
        input_dim=np.int64(m.input_dim),
        hidden_dim=np.int64(m.hidden_dim),
        seed=np.int64(m.seed),
        **arrays,
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> GruForecaster:
    path = Path(path)
    if not path.exists():
        raise TmException(Status.MISSING_ARTIFACT, f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            missing = [k for k in (*_META_KEYS, *PARAM_NAMES) if k not in data.files]
            if missing:
                raise TmException(Status.CHECKPOINT_ERROR, f"{path}: missing entries {missing}")
            version = int(data["format_version"])
            if version != CHECKPOINT_FORMAT_VERSION:
                raise TmException(Status.CHECKPOINT_ERROR,
                                  f"{path}: format_version {version}, expected {CHECKPOINT_FORMAT_VERSION}")
            return GruForecaster(
                input_dim=int(data["input_dim"]),
                hidden_dim=int(data["hidden_dim"]),
                seed=int(data["seed"]),
                params={name: np.array(data[name], dtype=np.float64) for name in PARAM_NAMES},
            )
    except TmException:
        raise
    except (OSError, ValueError) as e:
        raise TmException(Status.CHECKPOINT_ERROR, f"{path}: unreadable checkpoint: {e}") from e

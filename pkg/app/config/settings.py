import hashlib
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.constants import (
    ABILENE_INTERVAL_SECONDS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BIN_COUNT,
    DEFAULT_EPOCHS,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MIN_DELTA,
    DEFAULT_PATIENCE,
    DEFAULT_TRAIN_FRAC,
    DEFAULT_VAL_FRAC_OF_TRAIN,
    DEFAULT_WINDOW_LENGTH,
    ClusterMethod,
    InputFormat,
    Linkage,
)
from app.constants.status import Status
from app.lib.exception import TmException

dotenv_path = os.path.join("app/../.env")
load_dotenv(dotenv_path)


def boolean_parser(input_string):
    if input_string is not None:
        input_string = input_string.lower()
        if input_string == "true":
            return True
        elif input_string == "false":
            return False
    return False


class BaseConfig:
    SERVICE_NAME = os.environ.get("SERVICE_NAME", "tm-cluster-forecast")
    ENV = os.environ.get("ENV", "production")
    DEBUG = boolean_parser(os.environ.get("DEBUG", "false"))
    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
    DISABLE_LOG = boolean_parser(os.environ.get("DISABLE_LOG", "false"))
    DATA_DIR = os.environ.get("DATA_DIR", "data")
    OUTPUT_DIR = os.environ.get("OUTPUT_DIR", "runs")
    DEFAULT_SEED = int(os.environ.get("DEFAULT_SEED", 42))
    JOBS = int(os.environ.get("JOBS", 1))


# Keys whose flat-file value is a comma separated list
LIST_FIELDS = ("sweep_thresholds", "trace_flows", "heatmap_windows")


class RunConfig(BaseModel):
    """One pipeline run. Loaded from a flat key=value file, overridable from CLI flags.

    The manifest written by every stage is the same flat format, so a run
    can be replayed with `--config <out>/manifest.txt`.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: Path
    node_count: int = Field(gt=0)
    interval_seconds: int = Field(default=ABILENE_INTERVAL_SECONDS, gt=0)
    input_format: InputFormat = InputFormat.CANONICAL

    train_frac: float = DEFAULT_TRAIN_FRAC
    val_frac_of_train: float = DEFAULT_VAL_FRAC_OF_TRAIN
    window_length: int = DEFAULT_WINDOW_LENGTH

    method: ClusterMethod = ClusterMethod.HISTOGRAM
    bin_count: int = Field(default=DEFAULT_BIN_COUNT, ge=1)
    linkage: Linkage = Linkage.AVERAGE
    cut_threshold: Union[float, Literal["auto"]] = "auto"
    sweep_thresholds: List[float] = Field(default_factory=list)
    reference_cluster_count: Optional[int] = None

    hidden_dim: int = Field(default=DEFAULT_HIDDEN_DIM, ge=1)
    epochs: int = Field(default=DEFAULT_EPOCHS, ge=1)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    learning_rate: float = Field(default=DEFAULT_LEARNING_RATE, gt=0)
    patience: int = Field(default=DEFAULT_PATIENCE, ge=1)
    min_delta: float = Field(default=DEFAULT_MIN_DELTA, ge=0)

    topology: Optional[Path] = None
    reference_table: Optional[Path] = None
    output_dir: Path = Path(BaseConfig.OUTPUT_DIR)
    seed: int = BaseConfig.DEFAULT_SEED
    jobs: int = Field(default=BaseConfig.JOBS, ge=1)

    trace_flows: List[int] = Field(default_factory=list)
    heatmap_windows: List[int] = Field(default_factory=list)

    @field_validator("cut_threshold")
    @classmethod
    def validate_threshold(cls, value):
        if value != "auto" and value < 0:
            raise ValueError("cut_threshold must be >= 0 or 'auto'")
        return value

    @model_validator(mode="after")
    def validate_run(self):
        if self.window_length < 2:
            raise ValueError("window_length must be >= 2")
        if not 0 < self.train_frac < 1:
            raise ValueError("train_frac must lie in (0, 1)")
        if not 0 <= self.val_frac_of_train < 1:
            raise ValueError("val_frac_of_train must lie in [0, 1)")
        for name in ("dataset", "topology", "reference_table"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ValueError(f"{name} file does not exist: {path}")
        return self

    @classmethod
    def build(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise TmException(Status.CONFIG_ERROR, f"invalid run config: {e}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise TmException(Status.CONFIG_ERROR, f"config file not found: {path}")

        values: Dict[str, Any] = {}
        for key, value in dotenv_values(path, encoding="utf-8").items():
            if value is None:
                raise TmException(Status.CONFIG_ERROR, f"{path}: expected key=value, got bare key {key!r}")
            if key in LIST_FIELDS:
                values[key] = [item.strip() for item in value.split(",") if item.strip()]
            else:
                values[key] = value
        return cls.build(values)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        updates = {k: v for k, v in overrides.items() if v is not None}
        if not updates:
            return self
        return self.build({**self.model_dump(), **updates})

    def to_manifest_text(self) -> str:
        lines = []
        for key, value in sorted(self.model_dump(mode="json").items()):
            # parallelism never changes outputs, so it stays out of the manifest
            if value is None or key == "jobs":
                continue
            if isinstance(value, list):
                value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_manifest_text().encode("utf-8")).hexdigest()

from enum import Enum


class ClusterMethod(str, Enum):
    SOURCE = "source"
    HISTOGRAM = "histogram"
    ENTIRE_MATRIX = "entire_matrix"
    LOCAL = "local"

    @classmethod
    def from_cli(cls, name: str) -> "ClusterMethod":
        # the CLI spells the baselines `em` and `local`
        aliases = {"em": cls.ENTIRE_MATRIX}
        return aliases.get(name, None) or cls(name)


class Linkage(str, Enum):
    AVERAGE = "average"
    COMPLETE = "complete"
    SINGLE = "single"


class Grouping(str, Enum):
    SOURCE = "source"
    SOURCE_OR_DESTINATION = "source_or_destination"


class ErrorScope(str, Enum):
    NORMALIZED = "normalized"
    DENORMALIZED = "denormalized"


class MluStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE_DEMAND_UNROUTABLE = "infeasible_demand_unroutable"


class InputFormat(str, Enum):
    CANONICAL = "canonical"
    DENSE = "dense"


SERVICE_DESCRIPTION = "Clustered traffic matrix prediction with routing-level evaluation"

CANONICAL_HEADER = ("timestamp", "src", "dst", "bytes")

ABILENE_INTERVAL_SECONDS = 300

DEFAULT_WINDOW_LENGTH = 11
DEFAULT_TRAIN_FRAC = 0.8
DEFAULT_VAL_FRAC_OF_TRAIN = 0.1
DEFAULT_BIN_COUNT = 50
DEFAULT_HIDDEN_DIM = 30
DEFAULT_EPOCHS = 100
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 0.001
DEFAULT_PATIENCE = 5
DEFAULT_MIN_DELTA = 1e-5
STRONG_CORRELATION = 0.6

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

CHECKPOINT_FORMAT_VERSION = 1

# link capacity of the ring written next to synthetic datasets, bytes per interval
RING_CAPACITY = 1e9

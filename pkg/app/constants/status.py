from enum import Enum


class Status(Enum):
    ERROR = 0
    SUCCESS = 1
    UNKNOWN = 1000

    PARSE_ERROR = 2001
    ORDERING_ERROR = 2002
    BOUNDS_ERROR = 2003
    NO_RECORDS = 2004
    SPLIT_ERROR = 2005
    INSUFFICIENT_DATA = 2006
    DIMENSION_ERROR = 2007
    EMPTY_INPUT = 2008
    DOMAIN_ERROR = 2009
    CONFIG_ERROR = 2010
    MISSING_ARTIFACT = 2011
    TOPOLOGY_ERROR = 2012

    NUMERIC_ERROR = 3001
    SOLVER_ERROR = 3002
    CHECKPOINT_ERROR = 3003
    UNDEFINED_BIAS = 3004

    @property
    def is_validation(self) -> bool:
        return 2000 < self.value < 3000

"""
Custom exceptions for the small-value toolkit
"""


from typing import List, Optional

EXIT_INTERNAL = 1
EXIT_INVALID = 2
EXIT_DEGENERATE = 3
EXIT_RESOURCE = 4


class SmallValueError(Exception):
    """Base exception for toolkit errors"""

    exit_code = EXIT_INTERNAL


class ValidationError(SmallValueError):
    """Raised when an argument violates an operation's preconditions"""

    exit_code = EXIT_INVALID


class DegenerateInputError(ValidationError):
    """Raised when regression input carries no information (all abscissae equal)"""


class InvalidRegimeError(ValidationError):
    """Raised when an operation is called for the wrong branching regime"""


class LevelMismatchError(ValidationError):
    """Raised when local-time fields live on different dyadic levels"""


class OutOfRangeError(ValidationError):
    """Raised when a query falls outside the density grid coverage"""


class DegenerateDistributionError(SmallValueError):
    """Raised for offspring laws unsuitable for tail experiments"""

    exit_code = EXIT_DEGENERATE


class BoettcherDegenerateError(DegenerateDistributionError):
    """Raised when nu equals mu so that W is deterministic"""


class ResourceLimitError(SmallValueError):
    """Raised when a simulation would exceed its size or step cap"""

    exit_code = EXIT_RESOURCE

    def __init__(self, message: str, limit: Optional[float] = None) -> None:
        super().__init__(message)
        self.limit = limit


class NoConvergenceError(SmallValueError):
    """Raised when a fixed-point iteration hits its iteration cap"""


class NoFeasibleTauError(SmallValueError):
    """Raised when no tau on the search grid gives phi below one"""


class InsufficientDataError(SmallValueError):
    """Raised when fewer than three usable tail points remain"""


class ConfigError(ValidationError):
    """Raised when an experiment configuration cannot be parsed"""

    def __init__(self, message: str, problems: Optional[List[str]] = None) -> None:
        super().__init__(message)
        self.problems = problems or []

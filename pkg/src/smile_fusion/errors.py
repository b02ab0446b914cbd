"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SmileError(Exception):
    exit_code = 1


class ShapeError(SmileError, ValueError):
    exit_code = 2


class ConfigError(SmileError, ValueError):
    exit_code = 2


class NumericError(SmileError, ArithmeticError):
    exit_code = 4


class DomainError(NumericError):
    """Non-finite input where finite values are required."""


class ConvergenceError(NumericError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class RankDeficiencyError(NumericError):
    pass


class DegenerateError(NumericError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class StoreError(SmileError, OSError):
    """Base for container format problems; `code` distinguishes the failure."""

    exit_code = 3
    code = "store"


class TruncatedStoreError(StoreError):
    code = "truncated"


class OverlappingOffsetsError(StoreError):
    code = "overlap"


class UnknownDtypeError(StoreError):
    code = "dtype"


class MalformedHeaderError(StoreError):
    code = "header"


class StoreMismatchError(SmileError, ValueError):
    """Source stores disagree on names or shapes; `problems` is itemized."""

    exit_code = 2

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("store mismatch:\n" + "\n".join(f"  - {p}" for p in self.problems))

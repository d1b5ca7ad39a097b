"""Exception hierarchy shared across the package.

Each class carries a short ``kind`` tag; the command line prints it as the
machine-parsable prefix of its one-line error report.
"""


class TreeformerError(Exception):
    kind = "error"


class ContractError(TreeformerError):
    kind = "contract"


class DimensionError(ContractError, ValueError):
    kind = "dimension"


class EmptyInputError(ContractError, ValueError):
    kind = "empty-input"


class GradientStateError(TreeformerError, RuntimeError):
    kind = "gradient-state"


class NumericError(TreeformerError, FloatingPointError):
    kind = "numeric"


class CheckpointError(TreeformerError):
    kind = "checkpoint"


class ConfigError(TreeformerError, ValueError):
    kind = "config"


class CounterMismatch(TreeformerError, AssertionError):
    """Instrumented counters disagreed with a closed-form cost."""

    kind = "counter-mismatch"

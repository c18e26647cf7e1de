"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
ValueError from rejected inputs) -> 3, NumericFault and its subclasses -> 4.
"""


class ConfigError(Exception):
    """Invalid configuration: bad schema, impossible hyperparameters."""


class DataError(Exception):
    """Invalid or inconsistent data on disk or in memory."""


class NumericFault(Exception):
    """Non-finite values produced inside the model."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"{message} (flow layer {layer})")
        self.layer = layer


class InfeasibleConstraintError(NumericFault):
    """Rejection sampling exhausted its attempt budget for a constrained draw."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (target step {step})")
        self.step = step


class UnstableDenominatorError(NumericFault):
    """Monte Carlo ratio denominator is indistinguishable from zero."""

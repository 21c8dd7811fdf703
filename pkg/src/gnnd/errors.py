"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are legal."""


class OracleError(RuntimeError):
    """A test oracle could not be applied (e.g. non-deterministic function)."""


class ValidationError(ValueError):
    """Graph or dataset fields are inconsistent."""


class OversizeError(ValidationError):
    """A single graph exceeds a batching limit."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given input (wrong size, all-zero rows)."""


class FitError(ValueError):
    """A regression fit could not be computed (e.g. rank-deficient design)."""


class CheckpointError(IOError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class GenerationError(RuntimeError):
    """Synthetic data generation failed (e.g. relaxation did not converge)."""


class ConfigError(ValueError):
    """Experiment config is invalid; carries the full list of problems."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class ComparisonError(ValueError):
    """Run directories cannot be compared (disjoint metrics, missing files)."""

"""Exception hierarchy.

Every error carries a machine-readable ``code`` so that the CLI can map it to
an exit status and result bundles can log it.
"""


class ShuttleError(Exception):
    code = "error"


class ValidationError(ShuttleError, ValueError):
    """Input rejected before any model code runs (CLI exit code 2)."""

    code = "validation"


class ModelError(ShuttleError, RuntimeError):
    """Failure inside a model computation (CLI exit code 3)."""

    code = "model"


class InvalidConfig(ValidationError):
    code = "invalid_config"


class InvalidParams(ValidationError):
    code = "invalid_params"


class OutOfBounds(ValidationError):
    code = "out_of_bounds"


class DegenerateSamples(ValidationError):
    code = "degenerate_samples"


class ZeroVariance(ValidationError):
    code = "zero_variance"


class ZeroDistance(ValidationError):
    code = "zero_distance"


class ZeroField(ValidationError):
    code = "zero_field"


class NonUniformSampling(ValidationError):
    code = "non_uniform_sampling"


class MismatchedAxes(ValidationError):
    code = "mismatched_axes"


class NegativeWeight(ValidationError):
    code = "negative_weight"


class Underdetermined(ValidationError):
    code = "underdetermined"


class MissingRuns(ValidationError):
    code = "missing_runs"


class NonConvergence(ModelError):
    code = "non_convergence"


class IllConditioned(ModelError):
    code = "ill_conditioned"


class StepTooLarge(ModelError):
    code = "step_too_large"


class ZeroSweepRate(ModelError):
    code = "zero_sweep_rate"


class NoRidgeFound(ModelError):
    code = "no_ridge_found"


class NoPath(ModelError):
    code = "no_path"

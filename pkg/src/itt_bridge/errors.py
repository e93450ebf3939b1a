"""Exception hierarchy with stable error codes and CLI exit statuses."""


class IttBridgeError(Exception):
    """Base class. ``code`` is a stable machine-readable identifier."""

    code = "error"
    exit_status = 4

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class UsageError(IttBridgeError):
    code = "usage_error"
    exit_status = 2


class ConfigError(UsageError):
    code = "config_error"


class InvalidBounds(UsageError):
    code = "invalid_bounds"


class MissingRole(UsageError):
    code = "missing_role"


class DataError(IttBridgeError):
    code = "data_error"
    exit_status = 3


class MalformedRow(DataError):
    code = "malformed_row"


class MissingRequiredColumn(DataError):
    code = "missing_required_column"


class EmptyRole(DataError):
    code = "empty_role"


class UnknownLabel(DataError):
    code = "unknown_label"


class MissingArm(DataError):
    code = "missing_arm"


class SingleLabel(DataError):
    code = "single_label"


class DimensionMismatch(DataError):
    code = "dimension_mismatch"


class EmptyCellInFold(DataError):
    code = "empty_cell_in_fold"


class InvalidDistribution(DataError):
    code = "invalid_distribution"


class NumericalError(IttBridgeError):
    code = "numerical_error"
    exit_status = 4


class NoConvergence(NumericalError):
    code = "no_convergence"


class DenominatorNearZero(NumericalError):
    code = "denominator_near_zero"


class AllStrataDegenerate(NumericalError):
    code = "all_strata_degenerate"


class SingularSystem(NumericalError):
    code = "singular_system"


class NonFinite(NumericalError):
    code = "non_finite"


class DegenerateVariance(NumericalError):
    code = "degenerate_variance"


class TooManyFailures(NumericalError):
    code = "too_many_failures"


class InsufficientReplicates(UsageError):
    code = "insufficient_replicates"


class SeparationDetected(UserWarning):
    """Issued when a logistic fit diverges and the ridge fallback is used."""


class NonOverlap(UserWarning):
    """Participation probabilities sit at the floor for most of a trial's rows."""


class NegativeIncidence(UserWarning):
    """Counterfactual placebo incidence came out negative."""

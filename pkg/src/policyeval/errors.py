"""Exception hierarchy.

Validation errors are problems with inputs (files, column names, shapes);
estimation errors arise while fitting a model to otherwise valid data.  The
CLI maps the two families to exit codes 1 and 2.
"""


class PolicyEvalError(Exception):
    pass


class ValidationError(PolicyEvalError, ValueError):
    pass


class EstimationError(PolicyEvalError, ArithmeticError):
    pass


# ingestion / panel
class DuplicateCell(ValidationError):
    pass


class NonNumericValue(ValidationError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class RaggedHeader(ValidationError):
    pass


class UnknownVariable(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TargetCollision(ValidationError):
    pass


class ZeroDenominator(EstimationError, ZeroDivisionError):
    pass


class EmptySubset(ValidationError):
    pass


class UnknownEntity(ValidationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class SelfLoop(ValidationError):
    pass


# estimation
class EmptySample(EstimationError):
    pass


class AllColumnsCollinear(EstimationError):
    pass


class DegenerateSample(EstimationError):
    pass


class NoVariation(EstimationError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingleCluster(EstimationError):
    pass


class PerfectSeparation(EstimationError):
    pass


class NonBinaryOutcome(ValidationError):
    pass


class UnbalancedPanel(EstimationError):
    pass


class SingleCohortNoControlGroup(EstimationError):
    pass


class NonNormalizedWeights(ValidationError):
    pass


class RhoAtBoundary(EstimationError):
    def __init__(self, message, rho=None):
        super().__init__(message)
        self.rho = rho


class InvalidSpec(ValidationError):
    pass


class SingularSystem(EstimationError):
    pass


class TooLarge(ValidationError):
    pass

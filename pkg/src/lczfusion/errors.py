"""Exception hierarchy shared by all modules."""


class LczError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(LczError):
    """Operand shapes do not conform."""


class DataError(LczError):
    """Invalid data contents (bad labels, empty inputs, length mismatches)."""


class FormatError(LczError):
    """Malformed on-disk container or manifest."""


class DomainError(LczError):
    """Argument outside its documented domain."""


class ConsistencyError(LczError):
    """Internal state contract violated (missing gradient, model mismatch)."""


class NumericError(LczError):
    """Non-finite value produced where the contract requires finite output."""


class DegenerateBatchError(DataError):
    """Batch statistics requested on a batch too small to define them."""


class SingularDegreeError(DataError):
    """Adjacency row with zero degree cannot be normalized."""

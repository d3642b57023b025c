"""Custom exceptions for the multimodal knowledge-graph engine."""


class MMKGError(Exception):
    """Base exception for all engine errors."""
    pass


class ConfigurationError(MMKGError):
    """Raised when there's a configuration-related error."""
    pass


class ValidationError(MMKGError):
    """Raised when an input violates an operation's preconditions."""
    pass


class FormatError(MMKGError):
    """Raised when an on-disk artifact has a malformed header or line."""
    pass


class TruncationError(FormatError):
    """Raised when a binary payload does not match its header-declared size."""
    pass


class DuplicateIdError(MMKGError):
    """Raised when an identifier map contains the same identifier twice."""
    pass


class CatalogMismatchError(MMKGError):
    """Raised when a referenced item is not part of the feature catalog."""
    pass


class EmptyDataError(MMKGError):
    """Raised when an input file holds no usable records."""
    pass


class ContractViolationError(MMKGError):
    """Raised when a matrix breaks a structural contract (symmetry, diagonal)."""
    pass


class NumericalError(MMKGError):
    """Raised when a gradient or parameter becomes non-finite."""
    pass


class ArtifactMismatchError(MMKGError):
    """Raised when a checkpoint and a graph disagree on the graph fingerprint."""
    pass

"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition or schema."""


class NumericError(ValidationError):
    """Raised when numeric inputs are non-finite or otherwise unusable."""


class CapabilityError(RuntimeError):
    """Raised when an external component cannot satisfy a required contract."""


class PolicyError(RuntimeError):
    """Raised when an operation is disallowed by the dataset/annotation policy."""

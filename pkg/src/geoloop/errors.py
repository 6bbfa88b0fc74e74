"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition (bad values, not bad shapes)."""


class DimensionMismatchError(ValueError):
    """Operands have incompatible shapes or supports."""


class UnsupportedInstanceError(ValueError):
    """Instance is outside the range an exact/brute-force routine accepts."""

"""Exception hierarchy shared across the package."""


class SplatError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SplatError):
    """An input value violates a documented precondition or invariant."""


class FormatError(SplatError):
    """A file does not conform to the expected on-disk format."""


class DegenerateEditError(SplatError):
    """A mesh edit collapsed a splat so its Gaussian cannot be recovered."""

    def __init__(self, splat_index: int, message: str):
        super().__init__(f"splat {splat_index}: {message}")
        self.splat_index = splat_index


class ContractError(SplatError):
    """Mismatched arguments that violate an API contract (e.g. stale records)."""


class FitDivergenceError(SplatError):
    """Optimization loss exceeded the divergence guard."""

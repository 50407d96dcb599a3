"""Exception types shared across the package."""


class CsemriError(Exception):
    """Base class for all package errors."""


class DimensionError(CsemriError, ValueError):
    """Array or model dimensions are incompatible."""


class InvalidSpecies(CsemriError, ValueError):
    """Species definition violates the spectrum invariants."""


class CombinatorialLimit(CsemriError, RuntimeError):
    """An enumeration would exceed the configured guard."""


class PolynomialDegreeLimit(CsemriError, RuntimeError):
    """A determinant polynomial exceeds the configured degree guard."""


class RankDeficient(CsemriError, RuntimeError):
    """A matrix required to be full-rank is numerically rank-deficient."""


class OverflowRisk(CsemriError, FloatingPointError):
    """Evaluating exp(2*pi*i*xi*t) would overflow IEEE doubles."""


class DomainError(CsemriError, ValueError):
    """Scalar argument outside the mathematical domain of the function."""


class DegenerateCurvature(CsemriError, RuntimeError):
    """The residual has no curvature at the requested point."""


class NonBracketed(CsemriError, RuntimeError):
    """A scalar root search found no sign change inside the search cap."""


class NonConvergence(CsemriError, RuntimeError):
    """An iterative projection failed to reach its tolerance."""


class SpecError(CsemriError, ValueError):
    """Malformed phantom or configuration specification."""

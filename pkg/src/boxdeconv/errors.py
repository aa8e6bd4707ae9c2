"""Exception taxonomy shared across the package."""

from __future__ import annotations


class DeconvError(Exception):
    """Base class for all errors raised by this package."""


class StaircaseViolation(DeconvError):
    """Rectangle chain is ordered neither strictly up-right nor strictly up-left.

    Carries the index of the first offending consecutive pair and the
    coordinate chain that breaks both orderings.
    """

    def __init__(self, index: int, field: str, lo: float, hi: float):
        self.index = index
        self.field = field
        self.lo = lo
        self.hi = hi
        super().__init__(
            f"{field}_{index + 1} vs {field}_{index + 2}: values {lo} and {hi} "
            f"violate both strict orderings"
        )


class NonFiniteSlab(DeconvError):
    """A lattice direction advances too slowly (or not at all) against the
    query direction, so a slab would contain infinitely many atoms."""


class ZeroMeasure(DeconvError):
    """The coalesced extremal atom weight vanishes or the measure is empty."""


class ConeVerificationFailed(DeconvError):
    """A sampled support atom escapes the constructed cone or its half-plane
    margin by more than the geometric tolerance."""


class NestingTooDeep(DeconvError):
    """Convolution of measure terms would exceed the supported nesting depth
    (one level of lattice-by-lattice products)."""


class NonPositiveAdvance(DeconvError):
    """The perturbation measure has no positive advance margin, so the
    recursion depth is unbounded."""


class DepthExceeded(DeconvError):
    """Recursion depth bound passed the configured safety cap, signaling a
    support/advance misconfiguration."""


class SupportMismatch(DeconvError):
    """The pairing of function support side and measure direction makes the
    convolution slab unbounded."""


class ResidualTooLarge(DeconvError):
    """Verification residual exceeded the configured tolerance."""

    def __init__(self, max_abs: float, tolerance: float):
        self.max_abs = max_abs
        self.tolerance = tolerance
        super().__init__(f"residual max {max_abs:.3e} exceeds tolerance {tolerance:.3e}")


class CacheLimitExceeded(DeconvError):
    """An evaluation cache hit its configured entry cap; results would no
    longer be deterministic if entries were evicted silently."""

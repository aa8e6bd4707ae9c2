"""Rectangles, directions, half-planes, cones, and blur configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import StaircaseViolation

__all__ = [
    "EPS_GEOM",
    "EPS_WEIGHT",
    "EPS_ADVANCE",
    "pos_tol",
    "Rect",
    "rect_params",
    "Direction",
    "HalfPlane",
    "ConvexCone",
    "BlurConfig",
    "validate_staircase",
    "reflect_config_x",
    "config_hull",
]

# Geometric comparisons treat values closer than this (scaled) as ties.
EPS_GEOM = 1e-9
# Coalesced atom weights at or below this magnitude count as zero.
EPS_WEIGHT = 1e-12
# Lattice steps must advance at least this much along a query direction.
EPS_ADVANCE = 1e-12


def pos_tol(scale: float) -> float:
    """Position tolerance used when merging atoms, scaled to the data."""
    return EPS_GEOM * (1.0 + abs(scale))


@dataclass(frozen=True)
class Rect:
    """Closed axis-aligned rectangle [a, b] x [c, d] with positive area."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self) -> None:
        if not (self.a < self.b and self.c < self.d):
            raise ValueError(f"degenerate rectangle [{self.a},{self.b}]x[{self.c},{self.d}]")

    @property
    def area(self) -> float:
        return (self.b - self.a) * (self.d - self.c)


def rect_params(r: Rect) -> tuple[float, float, float, float]:
    """Center/half-width form (M, N, S, T) of a rectangle.

    M, N are the center coordinates; S, T the half-widths along x and y.
    """
    return (
        0.5 * (r.a + r.b),
        0.5 * (r.c + r.d),
        0.5 * (r.b - r.a),
        0.5 * (r.d - r.c),
    )


@dataclass(frozen=True)
class Direction:
    """Unit vector in the plane; inputs are normalized on construction."""

    v1: float
    v2: float

    def __post_init__(self) -> None:
        n = math.hypot(self.v1, self.v2)
        if n == 0.0 or not math.isfinite(n):
            raise ValueError("direction requires a finite nonzero vector")
        if abs(n - 1.0) > 1e-15:
            object.__setattr__(self, "v1", self.v1 / n)
            object.__setattr__(self, "v2", self.v2 / n)

    def dot(self, x, y):
        """v . (x, y); accepts scalars or numpy arrays."""
        return self.v1 * x + self.v2 * y


@dataclass(frozen=True)
class HalfPlane:
    """Half-plane bounded by the line v . p = alpha.

    side "right" is {p : v . p >= alpha}; side "left" is {p : v . p <= alpha}.
    """

    v: Direction
    alpha: float
    side: str

    def __post_init__(self) -> None:
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")

    def contains(self, x: float, y: float, tol: float = 0.0) -> bool:
        s = self.v.dot(x, y)
        if self.side == "right":
            return s >= self.alpha - tol
        return s <= self.alpha + tol


@dataclass(frozen=True)
class ConvexCone:
    """Closed convex cone spanned by two linearly independent unit vectors."""

    u1: Direction
    u2: Direction

    def __post_init__(self) -> None:
        if abs(self._det()) <= EPS_GEOM:
            raise ValueError("cone generators are (nearly) parallel")

    def _det(self) -> float:
        return self.u1.v1 * self.u2.v2 - self.u2.v1 * self.u1.v2

    def coefficients(self, x: float, y: float) -> tuple[float, float]:
        """Coordinates (s, t) with (x, y) = s*u1 + t*u2."""
        det = self._det()
        s = (x * self.u2.v2 - self.u2.v1 * y) / det
        t = (self.u1.v1 * y - x * self.u1.v2) / det
        return s, t

    def contains(self, x: float, y: float, tol: float = 0.0) -> bool:
        s, t = self.coefficients(x, y)
        return s >= -tol and t >= -tol

    def negated(self) -> "ConvexCone":
        return ConvexCone(
            Direction(-self.u1.v1, -self.u1.v2),
            Direction(-self.u2.v1, -self.u2.v2),
        )


@dataclass(frozen=True)
class BlurConfig:
    """Finite weighted family of rectangles defining the averaging kernel.

    Weights may be any nonzero finite complex scalars; the pipeline is
    field-agnostic in the weights.
    """

    rects: tuple[Rect, ...]
    weights: tuple[complex, ...]

    def __post_init__(self) -> None:
        if len(self.rects) == 0:
            raise ValueError("config requires at least one rectangle")
        if len(self.rects) != len(self.weights):
            raise ValueError("rects and weights must have equal length")
        for i, w in enumerate(self.weights):
            wc = complex(w)
            if not (math.isfinite(wc.real) and math.isfinite(wc.imag)) or wc == 0:
                raise ValueError(f"weight {i + 1} must be finite and nonzero, got {w!r}")

    @property
    def n(self) -> int:
        return len(self.rects)


def scalar_weight(w) -> complex | float:
    """Normalize a weight: real float when the imaginary part is zero."""
    wc = complex(w)
    return wc.real if wc.imag == 0.0 else wc


def _scale_of(cfg: BlurConfig) -> float:
    return max(max(abs(r.a), abs(r.b), abs(r.c), abs(r.d)) for r in cfg.rects)


def validate_staircase(cfg: BlurConfig) -> str:
    """Classify the rectangle chain ordering.

    Returns "Cond1" when all four coordinate chains increase strictly with
    the rectangle index (steps ascend up-right), "Cond2" when the x-chains
    decrease strictly while the y-chains increase (steps ascend up-left).
    A single rectangle counts as "Cond1".  Any other arrangement raises
    StaircaseViolation at the first offending consecutive pair.
    """
    n = cfg.n
    if n == 1:
        return "Cond1"
    tol = pos_tol(_scale_of(cfg))
    chains = {
        "a": [r.a for r in cfg.rects],
        "b": [r.b for r in cfg.rects],
        "c": [r.c for r in cfg.rects],
        "d": [r.d for r in cfg.rects],
    }
    a = chains["a"]
    if a[1] > a[0] + tol:
        x_sign = 1.0
    elif a[1] < a[0] - tol:
        x_sign = -1.0
    else:
        raise StaircaseViolation(0, "a", a[0], a[1])
    # y-chains must increase under both orderings; x-chains follow x_sign.
    signs = {"a": x_sign, "b": x_sign, "c": 1.0, "d": 1.0}
    for i in range(n - 1):
        for field in ("a", "b", "c", "d"):
            lo, hi = chains[field][i], chains[field][i + 1]
            if signs[field] * (hi - lo) <= tol:
                raise StaircaseViolation(i, field, lo, hi)
    return "Cond1" if x_sign > 0 else "Cond2"


def reflect_config_x(cfg: BlurConfig) -> BlurConfig:
    """Mirror every rectangle across the y-axis, keeping weights and order.

    [a, b] x [c, d] maps to [-b, -a] x [c, d]; an up-left chain becomes an
    up-right chain, and solving the mirrored problem for the mirrored data
    recovers the original unknown via x-reflection.
    """
    return BlurConfig(
        rects=tuple(Rect(-r.b, -r.a, r.c, r.d) for r in cfg.rects),
        weights=cfg.weights,
    )


def config_hull(cfg: BlurConfig) -> tuple[float, float, float, float]:
    """Bounding box (x0, x1, y0, y1) of the rectangle family."""
    return (
        min(r.a for r in cfg.rects),
        max(r.b for r in cfg.rects),
        min(r.c for r in cfg.rects),
        max(r.d for r in cfg.rects),
    )

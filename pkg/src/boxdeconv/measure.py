"""Formal discrete measures: atoms, quadrant lattices, and their convolutions.

A measure expression is a finite sum of terms.  Each term is a weighted point
mass, a quadrant lattice (all points base + (j*ex*sx, k*ey*sy) for j, k >= 0
with one shared weight), or a one-level convolution of two lattices.  The
module enumerates the atoms of such expressions inside slabs and boxes,
coalesces duplicates, locates lexicographic extremal atoms, and builds the
separating cone/direction for an up-right / down-left pair of measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ConeVerificationFailed, NestingTooDeep, NonFiniteSlab, SupportMismatch, ZeroMeasure
from .geometry import EPS_ADVANCE, EPS_GEOM, EPS_WEIGHT, ConvexCone, Direction, pos_tol

__all__ = [
    "Atom",
    "QuadLattice",
    "Conv",
    "MeasureExpr",
    "AtomArray",
    "ConeData",
    "measure",
    "translate",
    "scale",
    "convolve",
    "atoms_in_slab",
    "atoms_in_box",
    "extremal_atom",
    "v_advance_sup",
    "v_advance_inf",
    "cone_for_pair",
    "coalesce_atoms",
]


@dataclass(frozen=True)
class Atom:
    """Weighted point mass w * delta_(x, y)."""

    x: float
    y: float
    w: float


@dataclass(frozen=True)
class QuadLattice:
    """Equal-weight point masses on a quadrant lattice.

    Atoms sit at (x0 + ex*sx*j, y0 + ey*sy*k) for all integers j, k >= 0.
    Steps sx, sy are positive; ex, ey in {-1, +1} orient the quadrant.
    """

    x0: float
    y0: float
    sx: float
    sy: float
    ex: int
    ey: int
    w: float

    def __post_init__(self) -> None:
        if not (self.sx > 0.0 and self.sy > 0.0):
            raise ValueError("lattice steps must be positive")
        if self.ex not in (-1, 1) or self.ey not in (-1, 1):
            raise ValueError("lattice directions must be -1 or +1")


@dataclass(frozen=True)
class Conv:
    """Convolution of two lattice terms with matching quadrant directions."""

    left: QuadLattice
    right: QuadLattice

    def __post_init__(self) -> None:
        if not isinstance(self.left, QuadLattice) or not isinstance(self.right, QuadLattice):
            raise NestingTooDeep("convolution terms must be plain lattices")
        if self.left.ex != self.right.ex or self.left.ey != self.right.ey:
            raise NonFiniteSlab("convolution of opposed lattices is not locally finite")


Term = Union[Atom, QuadLattice, Conv]


@dataclass(frozen=True)
class MeasureExpr:
    """Finite formal sum of atom / lattice / convolution terms."""

    terms: tuple[Term, ...]


def measure(*terms: Term) -> MeasureExpr:
    return MeasureExpr(tuple(terms))


@dataclass
class AtomArray:
    """Columnar batch of atoms (positions and weights as numpy arrays)."""

    xs: np.ndarray
    ys: np.ndarray
    ws: np.ndarray

    def __len__(self) -> int:
        return self.xs.shape[0]

    @staticmethod
    def empty() -> "AtomArray":
        z = np.empty(0, dtype=float)
        return AtomArray(z.copy(), z.copy(), z.copy())

    def advance(self, v: Direction) -> np.ndarray:
        return v.dot(self.xs, self.ys)


# ---------------------------------------------------------------------------
# structural transforms


def translate(m: MeasureExpr, t: tuple[float, float]) -> MeasureExpr:
    """Shift every atom of the measure by the vector t."""
    dx, dy = t
    out: list[Term] = []
    for term in m.terms:
        if isinstance(term, Atom):
            out.append(Atom(term.x + dx, term.y + dy, term.w))
        elif isinstance(term, QuadLattice):
            out.append(_shift_lattice(term, dx, dy))
        else:
            out.append(Conv(_shift_lattice(term.left, dx, dy), term.right))
    return MeasureExpr(tuple(out))


def _shift_lattice(lat: QuadLattice, dx: float, dy: float) -> QuadLattice:
    return QuadLattice(lat.x0 + dx, lat.y0 + dy, lat.sx, lat.sy, lat.ex, lat.ey, lat.w)


def scale(m: MeasureExpr, factor: float) -> MeasureExpr:
    """Multiply every weight by a scalar."""
    out: list[Term] = []
    for term in m.terms:
        if isinstance(term, Atom):
            out.append(Atom(term.x, term.y, term.w * factor))
        elif isinstance(term, QuadLattice):
            out.append(_scale_lattice(term, factor))
        else:
            out.append(Conv(_scale_lattice(term.left, factor), term.right))
    return MeasureExpr(tuple(out))


def _scale_lattice(lat: QuadLattice, factor: float) -> QuadLattice:
    return QuadLattice(lat.x0, lat.y0, lat.sx, lat.sy, lat.ex, lat.ey, lat.w * factor)


def convolve(m1: MeasureExpr, m2: MeasureExpr) -> MeasureExpr:
    """Convolution of two measures, distributing over their term sums.

    Atom factors fold into the other term directly; lattice-by-lattice
    products become one-level Conv terms.  Convolving anything that already
    contains a Conv raises NestingTooDeep.
    """
    out: list[Term] = []
    for t1 in m1.terms:
        for t2 in m2.terms:
            out.append(_conv_pair(t1, t2))
    return MeasureExpr(tuple(out))


def _conv_pair(t1: Term, t2: Term) -> Term:
    if isinstance(t1, Conv) or isinstance(t2, Conv):
        raise NestingTooDeep("only one level of lattice convolution is supported")
    if isinstance(t1, Atom) and isinstance(t2, Atom):
        return Atom(t1.x + t2.x, t1.y + t2.y, t1.w * t2.w)
    if isinstance(t1, Atom):
        lat = _shift_lattice(t2, t1.x, t1.y)  # type: ignore[arg-type]
        return _scale_lattice(lat, t1.w)
    if isinstance(t2, Atom):
        lat = _shift_lattice(t1, t2.x, t2.y)
        return _scale_lattice(lat, t2.w)
    return Conv(t1, t2)


# ---------------------------------------------------------------------------
# enumeration


def _ragged_ranges(klo: np.ndarray, khi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Expand per-row inclusive integer ranges into (row_index, value) pairs."""
    counts = np.clip(khi - klo + 1, 0, None)
    total = int(counts.sum())
    if total == 0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy()
    rows = np.repeat(np.arange(klo.shape[0]), counts)
    cum = np.concatenate(([0], np.cumsum(counts)[:-1]))
    offs = np.arange(total) - np.repeat(cum, counts)
    return rows, np.repeat(klo, counts) + offs


def _lattice_steps(lat: QuadLattice, v: Direction) -> tuple[float, float]:
    """Advance of one x-step and one y-step along v."""
    return lat.ex * lat.sx * v.v1, lat.ey * lat.sy * v.v2


def _lattice_sign(lat: QuadLattice, v: Direction) -> int:
    """+1 if both steps strictly advance along v, -1 if both recede."""
    px, py = _lattice_steps(lat, v)
    if px >= EPS_ADVANCE and py >= EPS_ADVANCE:
        return 1
    if px <= -EPS_ADVANCE and py <= -EPS_ADVANCE:
        return -1
    raise NonFiniteSlab(
        f"lattice steps advance by ({px:.3e}, {py:.3e}) along ({v.v1:.6f}, {v.v2:.6f}); "
        "a slab would hold infinitely many atoms"
    )


def _lattice_slab_jk(
    lat: QuadLattice, v: Direction, lo: float, hi: float, tol: float
) -> tuple[np.ndarray, np.ndarray]:
    """Indices (j, k) of lattice atoms whose advance lies in [lo-tol, hi+tol]."""
    sign = _lattice_sign(lat, v)
    px, py = _lattice_steps(lat, v)
    a0 = v.dot(lat.x0, lat.y0)
    if sign < 0:
        px, py, a0, lo, hi = -px, -py, -a0, -hi, -lo
    lo -= tol
    hi += tol
    if hi < a0:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy()
    jmax = int(math.floor((hi - a0) / px))
    j = np.arange(jmax + 1, dtype=np.int64)
    rem_hi = hi - a0 - j * px
    rem_lo = lo - a0 - j * px
    khi = np.floor(rem_hi / py).astype(np.int64)
    klo = np.maximum(np.ceil(rem_lo / py).astype(np.int64), 0)
    rows, k = _ragged_ranges(klo, khi)
    return j[rows], k


def _lattice_axis_range(base: float, step: float, e: int, lo: float, hi: float, tol: float) -> tuple[int, int]:
    """Inclusive index range hitting [lo-tol, hi+tol] on one axis (may be empty).

    The interval may be unbounded on the side where the lattice itself is
    bounded; an unbounded interval on the lattice's open side cannot be
    enumerated and raises NonFiniteSlab.
    """
    lo -= tol
    hi += tol
    if e > 0:
        if hi < base:
            return 0, -1
        if math.isinf(hi):
            raise NonFiniteSlab("box is unbounded along an open lattice direction")
        imin = 0 if math.isinf(lo) else max(0, int(math.ceil((lo - base) / step)))
        imax = int(math.floor((hi - base) / step))
    else:
        if lo > base:
            return 0, -1
        if math.isinf(lo):
            raise NonFiniteSlab("box is unbounded along an open lattice direction")
        imin = 0 if math.isinf(hi) else max(0, int(math.ceil((base - hi) / step)))
        imax = int(math.floor((base - lo) / step))
    return imin, imax


def _lattice_box_jk(
    lat: QuadLattice, box: tuple[float, float, float, float], tol: float
) -> tuple[np.ndarray, np.ndarray]:
    x0, x1, y0, y1 = box
    jmin, jmax = _lattice_axis_range(lat.x0, lat.sx, lat.ex, x0, x1, tol)
    kmin, kmax = _lattice_axis_range(lat.y0, lat.sy, lat.ey, y0, y1, tol)
    if jmax < jmin or kmax < kmin:
        e = np.empty(0, dtype=np.int64)
        return e, e.copy()
    j = np.arange(jmin, jmax + 1, dtype=np.int64)
    k = np.arange(kmin, kmax + 1, dtype=np.int64)
    jj, kk = np.meshgrid(j, k, indexing="ij")
    return jj.ravel(), kk.ravel()


def _lattice_positions(lat: QuadLattice, j: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return lat.x0 + lat.ex * lat.sx * j, lat.y0 + lat.ey * lat.sy * k


def _lattice_reach(lat: QuadLattice) -> tuple[float, float, float, float]:
    """Support bounds (xmin, xmax, ymin, ymax); unbounded sides are +-inf."""
    xmin = lat.x0 if lat.ex > 0 else -math.inf
    xmax = lat.x0 if lat.ex < 0 else math.inf
    ymin = lat.y0 if lat.ey > 0 else -math.inf
    ymax = lat.y0 if lat.ey < 0 else math.inf
    return xmin, xmax, ymin, ymax


def _conv_gather(
    term: Conv,
    inner_query,
    outer_lo: float,
    outer_hi: float,
    v: Direction,
    tol: float,
    out: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> None:
    """Enumerate atoms of a Conv term by looping the left factor.

    inner_query(a_x, a_y) must return the right-factor (j, k) index arrays
    matching one left atom; outer_lo/outer_hi bound the left atoms' advance
    along v.
    """
    left, right = term.left, term.right
    jl, kl = _lattice_slab_jk(left, v, outer_lo, outer_hi, tol)
    ax, ay = _lattice_positions(left, jl, kl)
    wl = left.w * right.w
    for i in range(ax.shape[0]):
        jr, kr = inner_query(float(ax[i]), float(ay[i]))
        if jr.shape[0] == 0:
            continue
        bx, by = _lattice_positions(right, jr, kr)
        out.append((ax[i] + bx, ay[i] + by, np.full(bx.shape[0], wl)))


def coalesce_atoms(xs: np.ndarray, ys: np.ndarray, ws: np.ndarray, tol: float) -> AtomArray:
    """Merge atoms closer than tol in both coordinates; drop near-zero weights.

    Deterministic: clusters along x first, then along y inside each x-cluster;
    the representative position is the first (lowest-y) member of a cluster.
    """
    n = xs.shape[0]
    if n == 0:
        return AtomArray.empty()
    order = np.argsort(xs, kind="stable")
    x_sorted = xs[order]
    bx = np.empty(n, dtype=bool)
    bx[0] = True
    np.greater(np.diff(x_sorted), tol, out=bx[1:])
    cid = np.cumsum(bx) - 1
    order2 = np.lexsort((ys[order], cid))
    rows = order[order2]
    cid2 = cid[order2]
    y2 = ys[rows]
    bg = np.empty(n, dtype=bool)
    bg[0] = True
    bg[1:] = (np.diff(cid2) > 0) | (np.diff(y2) > tol)
    starts = np.flatnonzero(bg)
    w_sum = np.add.reduceat(ws[rows], starts)
    keep = np.abs(w_sum) > EPS_WEIGHT
    return AtomArray(xs[rows][starts][keep], y2[starts][keep], w_sum[keep])


def _finalize(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> AtomArray:
    if not parts:
        return AtomArray.empty()
    xs = np.concatenate([p[0] for p in parts])
    ys = np.concatenate([p[1] for p in parts])
    ws = np.concatenate([p[2] for p in parts])
    if xs.shape[0] == 0:
        return AtomArray.empty()
    scale_ = max(np.max(np.abs(xs)), np.max(np.abs(ys)), 1.0)
    return coalesce_atoms(xs, ys, ws, EPS_GEOM * scale_)


def atoms_in_slab(m: MeasureExpr, v: Direction, lo: float, hi: float) -> AtomArray:
    """All atoms t of the measure with lo <= v . t <= hi, coalesced.

    Raises NonFiniteSlab when a lattice term fails to advance strictly along
    v in both of its step directions (infinitely many atoms would qualify).
    """
    tol = EPS_GEOM * (1.0 + max(abs(lo), abs(hi)))
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for term in m.terms:
        if isinstance(term, Atom):
            a = v.dot(term.x, term.y)
            if lo - tol <= a <= hi + tol:
                parts.append((np.array([term.x]), np.array([term.y]), np.array([term.w])))
        elif isinstance(term, QuadLattice):
            j, k = _lattice_slab_jk(term, v, lo, hi, tol)
            x, y = _lattice_positions(term, j, k)
            parts.append((x, y, np.full(x.shape[0], term.w)))
        else:
            sgn_l = _lattice_sign(term.left, v)
            sgn_r = _lattice_sign(term.right, v)
            if sgn_l != sgn_r:
                raise NonFiniteSlab("convolution factors advance in opposite senses along v")
            inf_l = _term_advance_bound(term.left, v, want_sup=False)
            sup_l = _term_advance_bound(term.left, v, want_sup=True)
            inf_r = _term_advance_bound(term.right, v, want_sup=False)
            sup_r = _term_advance_bound(term.right, v, want_sup=True)
            # left atoms can only pair into [lo, hi] if their own advance fits
            lo_l = max(inf_l, lo - sup_r) if math.isfinite(sup_r) else inf_l
            hi_l = min(sup_l, hi - inf_r) if math.isfinite(inf_r) else sup_l
            if not (math.isfinite(lo_l) and math.isfinite(hi_l)):
                raise NonFiniteSlab("convolution term has no finite advance window")

            def inner(ax: float, ay: float, _t=term, _v=v, _lo=lo, _hi=hi, _tol=tol):
                a = _v.dot(ax, ay)
                return _lattice_slab_jk(_t.right, _v, _lo - a, _hi - a, _tol)

            _conv_gather(term, inner, lo_l, hi_l, v, tol, parts)
    return _finalize(parts)


def atoms_in_box(m: MeasureExpr, box: tuple[float, float, float, float]) -> AtomArray:
    """All atoms inside the closed box (x0, x1, y0, y1), coalesced.

    Sides may be infinite only where every term is itself bounded.
    """
    x0, x1, y0, y1 = box
    finite = [abs(b) for b in box if math.isfinite(b)]
    tol = EPS_GEOM * (1.0 + (max(finite) if finite else 0.0))
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for term in m.terms:
        if isinstance(term, Atom):
            if x0 - tol <= term.x <= x1 + tol and y0 - tol <= term.y <= y1 + tol:
                parts.append((np.array([term.x]), np.array([term.y]), np.array([term.w])))
        elif isinstance(term, QuadLattice):
            j, k = _lattice_box_jk(term, box, tol)
            x, y = _lattice_positions(term, j, k)
            parts.append((x, y, np.full(x.shape[0], term.w)))
        else:
            rxmin, rxmax, rymin, rymax = _lattice_reach(term.right)
            lbox = (x0 - rxmax, x1 - rxmin, y0 - rymax, y1 - rymin)
            lxmin, lxmax, lymin, lymax = _lattice_reach(term.left)
            lbox = (
                max(lbox[0], lxmin),
                min(lbox[1], lxmax),
                max(lbox[2], lymin),
                min(lbox[3], lymax),
            )
            if lbox[0] > lbox[1] or lbox[2] > lbox[3]:
                continue

            def inner(ax: float, ay: float, _t=term, _b=box, _tol=tol):
                bx0, bx1, by0, by1 = _b
                return _lattice_box_jk(_t.right, (bx0 - ax, bx1 - ax, by0 - ay, by1 - ay), _tol)

            jl, kl = _lattice_box_jk(term.left, lbox, tol)
            ax, ay = _lattice_positions(term.left, jl, kl)
            wl = term.left.w * term.right.w
            for i in range(ax.shape[0]):
                jr, kr = inner(float(ax[i]), float(ay[i]))
                if jr.shape[0] == 0:
                    continue
                bx, by = _lattice_positions(term.right, jr, kr)
                parts.append((ax[i] + bx, ay[i] + by, np.full(bx.shape[0], wl)))
    return _finalize(parts)


# ---------------------------------------------------------------------------
# formal advance bounds


def _term_advance_bound(term: Term, v: Direction, want_sup: bool) -> float:
    if isinstance(term, Atom):
        return v.dot(term.x, term.y)
    if isinstance(term, QuadLattice):
        px, py = _lattice_steps(term, v)
        a0 = v.dot(term.x0, term.y0)
        if want_sup:
            return a0 if px <= 0 and py <= 0 else math.inf
        return a0 if px >= 0 and py >= 0 else -math.inf
    left = _term_advance_bound(term.left, v, want_sup)
    right = _term_advance_bound(term.right, v, want_sup)
    return left + right


def v_advance_sup(m: MeasureExpr, v: Direction) -> float:
    """Formal supremum of v . t over atoms, term by term (no cancellation)."""
    return max(_term_advance_bound(t, v, want_sup=True) for t in m.terms)


def v_advance_inf(m: MeasureExpr, v: Direction) -> float:
    """Formal infimum of v . t over atoms, term by term (no cancellation)."""
    return min(_term_advance_bound(t, v, want_sup=False) for t in m.terms)


# ---------------------------------------------------------------------------
# extremal atoms


def _term_extreme_pos(term: Term, sgn: float) -> tuple[float, float]:
    """Lexicographic extreme position of one term (sgn=+1 min, -1 max)."""
    if isinstance(term, Atom):
        return term.x, term.y
    if isinstance(term, QuadLattice):
        if term.ex * sgn < 0 or term.ey * sgn < 0:
            raise SupportMismatch(
                "lattice is unbounded in the requested lexicographic direction"
            )
        return term.x0, term.y0
    lx, ly = _term_extreme_pos(term.left, sgn)
    rx, ry = _term_extreme_pos(term.right, sgn)
    return lx + rx, ly + ry


def _lattice_weight_at(lat: QuadLattice, px: float, py: float, tol: float) -> float:
    j = round((px - lat.x0) / (lat.ex * lat.sx))
    k = round((py - lat.y0) / (lat.ey * lat.sy))
    if j < 0 or k < 0:
        return 0.0
    qx, qy = _lattice_positions(lat, np.array([j]), np.array([k]))
    if abs(qx[0] - px) <= tol and abs(qy[0] - py) <= tol:
        return lat.w
    return 0.0


def _weight_at(m: MeasureExpr, px: float, py: float, tol: float) -> float:
    total = 0.0
    for term in m.terms:
        if isinstance(term, Atom):
            if abs(term.x - px) <= tol and abs(term.y - py) <= tol:
                total += term.w
        elif isinstance(term, QuadLattice):
            total += _lattice_weight_at(term, px, py, tol)
        else:
            left, right = term.left, term.right
            rxmin, rxmax, rymin, rymax = _lattice_reach(right)
            lbox = (px - rxmax, px - rxmin, py - rymax, py - rymin)
            lxmin, lxmax, lymin, lymax = _lattice_reach(left)
            lbox = (
                max(lbox[0], lxmin),
                min(lbox[1], lxmax),
                max(lbox[2], lymin),
                min(lbox[3], lymax),
            )
            if lbox[0] > lbox[1] or lbox[2] > lbox[3]:
                continue
            jl, kl = _lattice_box_jk(left, lbox, tol)
            ax, ay = _lattice_positions(left, jl, kl)
            for i in range(ax.shape[0]):
                w = _lattice_weight_at(right, px - float(ax[i]), py - float(ay[i]), tol)
                if w != 0.0:
                    total += left.w * w
    return total


def extremal_atom(m: MeasureExpr, mode: str) -> Atom:
    """Lexicographic extremal atom with its coalesced weight.

    mode "min-xy" takes the smallest x, breaking ties by smallest y;
    "max-xy" the largest x then largest y.  Every term must be bounded in
    the requested direction (SupportMismatch otherwise).  A vanishing
    coalesced weight at the extremal position raises ZeroMeasure.
    """
    if mode not in ("min-xy", "max-xy"):
        raise ValueError(f"unknown mode {mode!r}")
    sgn = 1.0 if mode == "min-xy" else -1.0
    if not m.terms:
        raise ZeroMeasure("measure has no terms")
    cands = [_term_extreme_pos(t, sgn) for t in m.terms]
    coord = max(max(abs(cx), abs(cy)) for cx, cy in cands)
    tol = pos_tol(coord)
    best = cands[0]
    for c in cands[1:]:
        if sgn * (c[0] - best[0]) < -tol:
            best = c
        elif sgn * (c[0] - best[0]) <= tol and sgn * (c[1] - best[1]) < -tol:
            best = c
    w = _weight_at(m, best[0], best[1], tol)
    if abs(w) <= EPS_WEIGHT:
        raise ZeroMeasure(
            f"coalesced weight at extremal position ({best[0]}, {best[1]}) vanishes"
        )
    return Atom(best[0], best[1], w)


# ---------------------------------------------------------------------------
# separating cone


@dataclass(frozen=True)
class ConeData:
    """Separating cone for an up-right / down-left measure pair.

    cone contains supp(up) - lead_up; its negation contains
    supp(down) - lead_down; v advances strictly on both shifted supports.
    """

    cone: ConvexCone
    v: Direction
    lead_up: Atom
    lead_down: Atom
    s: float
    r: float


def _formal_axis_extreme(m: MeasureExpr, axis: str, sgn: float) -> float:
    vals: list[float] = []
    for term in m.terms:
        vals.append(_term_axis_extreme(term, axis, sgn))
    return min(vals) if sgn > 0 else max(vals)


def _term_axis_extreme(term: Term, axis: str, sgn: float) -> float:
    if isinstance(term, Atom):
        return term.x if axis == "x" else term.y
    if isinstance(term, QuadLattice):
        e = term.ex if axis == "x" else term.ey
        base = term.x0 if axis == "x" else term.y0
        if e * sgn < 0:
            raise SupportMismatch("measure is unbounded toward the cone apex")
        return base
    return _term_axis_extreme(term.left, axis, sgn) + _term_axis_extreme(term.right, axis, sgn)


def _max_slope(arr: AtomArray, lead: Atom, r: float, want_dx_positive: bool, tol: float) -> float:
    dx = arr.xs - lead.x
    dy = arr.ys - lead.y
    inside = dx * dx + dy * dy <= r * r * (1.0 + 4.0 * EPS_GEOM)
    if want_dx_positive:
        sel = inside & (dx > tol)
    else:
        sel = inside & (dx < -tol)
    if not np.any(sel):
        return 0.0
    return float(np.max(np.abs(dy[sel]) / np.abs(dx[sel])))


def cone_for_pair(m_up: MeasureExpr, m_down: MeasureExpr, sample_count: int = 100) -> ConeData:
    """Construct a convex cone and direction separating a measure pair.

    m_up must live in an up-right quadrant, m_down in a down-left quadrant.
    The cone C satisfies supp(m_up) - lead_up inside C and
    supp(m_down) - lead_down inside -C, with v . t >= 0 on the former and
    <= 0 on the latter; up to sample_count atoms nearest each lead are
    checked, and any escape raises ConeVerificationFailed.
    """
    lead_up = extremal_atom(m_up, "min-xy")
    lead_down = extremal_atom(m_down, "max-xy")
    beta1 = _formal_axis_extreme(m_up, "y", 1.0)
    beta2 = _formal_axis_extreme(m_down, "y", -1.0)
    dy1 = abs(lead_up.y - beta1)
    dy2 = abs(lead_down.y - beta2)
    r = 2.000001 * max(dy1, dy2) + 1.0
    coord = max(abs(lead_up.x), abs(lead_up.y), abs(lead_down.x), abs(lead_down.y), r)
    tol = pos_tol(coord)

    up_near = atoms_in_box(m_up, (lead_up.x - r, lead_up.x + r, lead_up.y - r, lead_up.y + r))
    down_near = atoms_in_box(
        m_down, (lead_down.x - r, lead_down.x + r, lead_down.y - r, lead_down.y + r)
    )
    s1 = max(_max_slope(up_near, lead_up, r, True, tol), dy1 / math.sqrt(r * r - dy1 * dy1))
    s2 = max(_max_slope(down_near, lead_down, r, False, tol), dy2 / math.sqrt(r * r - dy2 * dy2))
    s = max(0.0, s1, s2)

    if s <= 0.0:
        cone = ConvexCone(Direction(1.0, 0.0), Direction(0.0, 1.0))
        v = Direction(1.0, 1.0)
    else:
        rt = math.sqrt(1.0 + s * s)
        cone = ConvexCone(Direction(0.0, 1.0), Direction(1.0 / rt, -s / rt))
        v = Direction(1.0 / (2.0 * rt), (rt - s) / (2.0 * rt))

    _verify_side(m_up, lead_up, cone, v, +1, sample_count, tol)
    _verify_side(m_down, lead_down, cone, v, -1, sample_count, tol)
    return ConeData(cone=cone, v=v, lead_up=lead_up, lead_down=lead_down, s=s, r=r)


def _verify_side(
    m: MeasureExpr,
    lead: Atom,
    cone: ConvexCone,
    v: Direction,
    orient: int,
    sample_count: int,
    tol: float,
) -> None:
    lo = v_advance_inf(m, v) if orient > 0 else None
    hi = v_advance_sup(m, v) if orient < 0 else None
    window = 1.0
    atoms = AtomArray.empty()
    for _ in range(60):
        if orient > 0:
            atoms = atoms_in_slab(m, v, lo, lo + window)  # type: ignore[arg-type]
        else:
            atoms = atoms_in_slab(m, v, hi - window, hi)  # type: ignore[arg-type]
        if len(atoms) >= sample_count:
            break
        window *= 2.0
    adv = atoms.advance(v)
    order = np.argsort(orient * adv, kind="stable")[:sample_count]
    for i in order:
        dx = float(atoms.xs[i]) - lead.x
        dy = float(atoms.ys[i]) - lead.y
        if orient > 0:
            ok = cone.contains(dx, dy, tol) and v.dot(dx, dy) >= -tol
        else:
            ok = cone.contains(-dx, -dy, tol) and v.dot(dx, dy) <= tol
        if not ok:
            raise ConeVerificationFailed(
                f"atom at ({atoms.xs[i]:.9g}, {atoms.ys[i]:.9g}) escapes the "
                f"{'cone' if orient > 0 else 'reflected cone'} anchored at "
                f"({lead.x:.9g}, {lead.y:.9g})"
            )

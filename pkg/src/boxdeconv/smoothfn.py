"""Twice-differentiable functions with channel evaluation and kink metadata.

Every function here exposes up to four vectorized channels -- val, dx, dy,
and the mixed second derivative dxy -- plus conservative support descriptors
and the locations where higher derivatives jump (axis-aligned kink lines and
diagonal band lines).  The kink metadata lets the quadrature in the forward
operator split integration panels so each piece is smooth.

conv_measure turns a function and a discrete measure into the atom-weighted
sum of shifted copies; compositions of such sums flatten into a single sum
driven by a composed window provider, so deeply chained convolutions cost
one windowed pass instead of nested recursion.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CacheLimitExceeded, SupportMismatch
from .geometry import EPS_GEOM, Direction, HalfPlane
from .measure import AtomArray, MeasureExpr, atoms_in_box, atoms_in_slab, coalesce_atoms, v_advance_inf, v_advance_sup

__all__ = [
    "KinkInfo",
    "C2Fn",
    "PolyBump",
    "PolyFn",
    "constant",
    "RampC2",
    "RampFn",
    "add",
    "scale_fn",
    "translate_fn",
    "reflect_x_fn",
    "mul",
    "split_halfplane",
    "conv_measure",
    "AtomSumFn",
    "MeasureBoxProvider",
    "MeasureSlabProvider",
    "TransformProvider",
    "ComposedProvider",
    "CACHE_CAP",
]

# Hard cap on materialized window atoms per provider (eviction would break
# determinism, so overflowing the cap is an error instead).
CACHE_CAP = 1 << 22
# Element budget per dense (queries x atoms) evaluation block.
_BLOCK = 1 << 21

Box = tuple[float, float, float, float]
_FULL: Box = (-math.inf, math.inf, -math.inf, math.inf)


@dataclass(frozen=True)
class KinkInfo:
    """Lines across which some derivative of a function jumps.

    xs / ys are abscissae / ordinates of axis-aligned lines; bands are
    (direction, offsets) pairs describing lines direction . p = offset.
    """

    xs: tuple[float, ...] = ()
    ys: tuple[float, ...] = ()
    bands: tuple[tuple[Direction, tuple[float, ...]], ...] = ()


def _merge_bands(
    a: tuple[tuple[Direction, tuple[float, ...]], ...],
    b: tuple[tuple[Direction, tuple[float, ...]], ...],
) -> tuple[tuple[Direction, tuple[float, ...]], ...]:
    out: list[tuple[Direction, tuple[float, ...]]] = list(a)
    for v, offs in b:
        for i, (u, uoffs) in enumerate(out):
            if abs(u.v1 - v.v1) <= 1e-15 and abs(u.v2 - v.v2) <= 1e-15:
                out[i] = (u, tuple(sorted(set(uoffs) | set(offs))))
                break
        else:
            out.append((v, offs))
    return tuple(out)


def _merge_kinks(a: KinkInfo, b: KinkInfo) -> KinkInfo:
    return KinkInfo(
        xs=tuple(sorted(set(a.xs) | set(b.xs))),
        ys=tuple(sorted(set(a.ys) | set(b.ys))),
        bands=_merge_bands(a.bands, b.bands),
    )


def _filter_kinks(k: KinkInfo, box: Box) -> KinkInfo:
    x0, x1, y0, y1 = box
    return KinkInfo(
        xs=tuple(v for v in k.xs if x0 - 1e-9 <= v <= x1 + 1e-9),
        ys=tuple(v for v in k.ys if y0 - 1e-9 <= v <= y1 + 1e-9),
        bands=k.bands,
    )


def _box_intersect(a: Box | None, b: Box | None) -> Box | None:
    if a is None:
        return b
    if b is None:
        return a
    return (max(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), min(a[3], b[3]))


def _box_union(a: Box | None, b: Box | None) -> Box | None:
    if a is None or b is None:
        return None
    return (min(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), max(a[3], b[3]))


class C2Fn:
    """Base class: vectorized channels, support metadata, kink metadata.

    support_box is a conservative bounding box of the support (None if the
    function is not compactly supported); support_halfplanes lists closed
    half-planes known to contain the support.
    """

    support_box: Box | None = None
    support_halfplanes: tuple[HalfPlane, ...] = ()

    def val(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def dx(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def dy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def dxy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def channels(self) -> tuple[str, ...]:
        return ("val", "dx", "dy", "dxy")

    def kinks_in_box(self, box: Box) -> KinkInfo:
        return _filter_kinks(self._static_kinks(), box)

    def _static_kinks(self) -> KinkInfo:
        return KinkInfo()


def _as_arrays(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    return np.broadcast_arrays(xa, ya)


class PolyBump(C2Fn):
    """Compactly supported C2 bump: cubed parabola profile on each axis.

    value(x, y) = amp * (rx^2 - (x-x0)^2)_+^3 (ry^2 - (y-y0)^2)_+^3
                  / (rx^6 ry^6),
    so the peak value at the center is amp and the third derivatives jump
    only on the support edges.
    """

    def __init__(self, x0: float, y0: float, rx: float, ry: float, amp: float = 1.0):
        if not (rx > 0 and ry > 0):
            raise ValueError("bump radii must be positive")
        self.x0, self.y0, self.rx, self.ry, self.amp = x0, y0, rx, ry, amp
        self.support_box = (x0 - rx, x0 + rx, y0 - ry, y0 + ry)

    def _u(self, x):
        t = x - self.x0
        return np.maximum(self.rx * self.rx - t * t, 0.0), t

    def _v(self, y):
        t = y - self.y0
        return np.maximum(self.ry * self.ry - t * t, 0.0), t

    def val(self, x, y):
        x, y = _as_arrays(x, y)
        u, _ = self._u(x)
        v, _ = self._v(y)
        return self.amp * (u ** 3) * (v ** 3) / (self.rx ** 6 * self.ry ** 6)

    def dx(self, x, y):
        x, y = _as_arrays(x, y)
        u, t = self._u(x)
        v, _ = self._v(y)
        return self.amp * (-6.0 * t * u * u) * (v ** 3) / (self.rx ** 6 * self.ry ** 6)

    def dy(self, x, y):
        x, y = _as_arrays(x, y)
        u, _ = self._u(x)
        v, s = self._v(y)
        return self.amp * (u ** 3) * (-6.0 * s * v * v) / (self.rx ** 6 * self.ry ** 6)

    def dxy(self, x, y):
        x, y = _as_arrays(x, y)
        u, t = self._u(x)
        v, s = self._v(y)
        return self.amp * (36.0 * t * s) * (u * u) * (v * v) / (self.rx ** 6 * self.ry ** 6)

    def _static_kinks(self) -> KinkInfo:
        return KinkInfo(
            xs=(self.x0 - self.rx, self.x0 + self.rx),
            ys=(self.y0 - self.ry, self.y0 + self.ry),
        )


class PolyFn(C2Fn):
    """Bivariate polynomial sum c[i, j] x^i y^j over the whole plane."""

    def __init__(self, coeffs: Sequence[Sequence[float]]):
        c = np.atleast_2d(np.asarray(coeffs, dtype=float))
        self._c = c
        P = np.polynomial.polynomial
        self._cx = P.polyder(c, axis=0) if c.shape[0] > 1 else np.zeros((1, 1))
        self._cy = P.polyder(c, axis=1) if c.shape[1] > 1 else np.zeros((1, 1))
        if c.shape[0] > 1 and c.shape[1] > 1:
            self._cxy = P.polyder(P.polyder(c, axis=0), axis=1)
        else:
            self._cxy = np.zeros((1, 1))

    def _eval(self, c, x, y):
        x, y = _as_arrays(x, y)
        return np.polynomial.polynomial.polyval2d(x, y, c)

    def val(self, x, y):
        return self._eval(self._c, x, y)

    def dx(self, x, y):
        return self._eval(self._cx, x, y)

    def dy(self, x, y):
        return self._eval(self._cy, x, y)

    def dxy(self, x, y):
        return self._eval(self._cxy, x, y)


def constant(c: float) -> PolyFn:
    return PolyFn([[c]])


class RampC2(C2Fn):
    """C2 ramp profile along a direction: 0 below the band, 1 above.

    The scalar profile is R(s) = 0 for s <= -n, 1 for s >= n, and the
    quintic smoothstep S5(u) = 6u^5 - 15u^4 + 10u^3 with u = (s+n)/(2n)
    inside the band, so R' and R'' vanish at both band edges.  As a plane
    function the channels read the profile at s = v . p.
    """

    def __init__(self, v: Direction, n: float):
        if not n > 0:
            raise ValueError("band half-width must be positive")
        self.v = v
        self.n = n

    # -- scalar profile -------------------------------------------------
    def profile(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s + self.n) / (2.0 * self.n), 0.0, 1.0)
        return ((6.0 * u - 15.0) * u + 10.0) * u ** 3

    def profile_d1(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s + self.n) / (2.0 * self.n), 0.0, 1.0)
        return 30.0 * (u * (1.0 - u)) ** 2 / (2.0 * self.n)

    def profile_d2(self, s):
        s = np.asarray(s, dtype=float)
        u = np.clip((s + self.n) / (2.0 * self.n), 0.0, 1.0)
        return 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (2.0 * self.n) ** 2

    # -- plane channels ---------------------------------------------------
    def val(self, x, y):
        x, y = _as_arrays(x, y)
        return self.profile(self.v.dot(x, y))

    def dx(self, x, y):
        x, y = _as_arrays(x, y)
        return self.v.v1 * self.profile_d1(self.v.dot(x, y))

    def dy(self, x, y):
        x, y = _as_arrays(x, y)
        return self.v.v2 * self.profile_d1(self.v.dot(x, y))

    def dxy(self, x, y):
        x, y = _as_arrays(x, y)
        return self.v.v1 * self.v.v2 * self.profile_d2(self.v.dot(x, y))

    def _static_kinks(self) -> KinkInfo:
        return KinkInfo(bands=((self.v, (-self.n, self.n)),))


RampFn = RampC2


class _Add(C2Fn):
    def __init__(self, f: C2Fn, g: C2Fn):
        self.f, self.g = f, g
        self.support_box = _box_union(f.support_box, g.support_box)

    def channels(self):
        return tuple(c for c in self.f.channels() if c in self.g.channels())

    def val(self, x, y):
        return self.f.val(x, y) + self.g.val(x, y)

    def dx(self, x, y):
        return self.f.dx(x, y) + self.g.dx(x, y)

    def dy(self, x, y):
        return self.f.dy(x, y) + self.g.dy(x, y)

    def dxy(self, x, y):
        return self.f.dxy(x, y) + self.g.dxy(x, y)

    def kinks_in_box(self, box: Box) -> KinkInfo:
        return _merge_kinks(self.f.kinks_in_box(box), self.g.kinks_in_box(box))


class _Scale(C2Fn):
    def __init__(self, f: C2Fn, c: float):
        self.f, self.c = f, c
        self.support_box = f.support_box
        self.support_halfplanes = f.support_halfplanes

    def channels(self):
        return self.f.channels()

    def val(self, x, y):
        return self.c * self.f.val(x, y)

    def dx(self, x, y):
        return self.c * self.f.dx(x, y)

    def dy(self, x, y):
        return self.c * self.f.dy(x, y)

    def dxy(self, x, y):
        return self.c * self.f.dxy(x, y)

    def kinks_in_box(self, box: Box) -> KinkInfo:
        return self.f.kinks_in_box(box)


class _Translate(C2Fn):
    """Graph shifted by t: result(p) = f(p - t)."""

    def __init__(self, f: C2Fn, t: tuple[float, float]):
        self.f = f
        self.tx, self.ty = t
        if f.support_box is not None:
            x0, x1, y0, y1 = f.support_box
            self.support_box = (x0 + self.tx, x1 + self.tx, y0 + self.ty, y1 + self.ty)
        self.support_halfplanes = tuple(
            HalfPlane(h.v, h.alpha + h.v.dot(self.tx, self.ty), h.side)
            for h in f.support_halfplanes
        )

    def channels(self):
        return self.f.channels()

    def val(self, x, y):
        return self.f.val(x - self.tx, y - self.ty)

    def dx(self, x, y):
        return self.f.dx(x - self.tx, y - self.ty)

    def dy(self, x, y):
        return self.f.dy(x - self.tx, y - self.ty)

    def dxy(self, x, y):
        return self.f.dxy(x - self.tx, y - self.ty)

    def kinks_in_box(self, box: Box) -> KinkInfo:
        x0, x1, y0, y1 = box
        inner = self.f.kinks_in_box((x0 - self.tx, x1 - self.tx, y0 - self.ty, y1 - self.ty))
        return KinkInfo(
            xs=tuple(v + self.tx for v in inner.xs),
            ys=tuple(v + self.ty for v in inner.ys),
            bands=tuple(
                (v, tuple(o + v.dot(self.tx, self.ty) for o in offs)) for v, offs in inner.bands
            ),
        )


class _ReflectX(C2Fn):
    """Mirror across the y-axis: result(x, y) = f(-x, y)."""

    def __init__(self, f: C2Fn):
        self.f = f
        if f.support_box is not None:
            x0, x1, y0, y1 = f.support_box
            self.support_box = (-x1, -x0, y0, y1)
        self.support_halfplanes = tuple(
            HalfPlane(Direction(-h.v.v1, h.v.v2), h.alpha, h.side) for h in f.support_halfplanes
        )

    def channels(self):
        return self.f.channels()

    def val(self, x, y):
        x, y = _as_arrays(x, y)
        return self.f.val(-x, y)

    def dx(self, x, y):
        x, y = _as_arrays(x, y)
        return -self.f.dx(-x, y)

    def dy(self, x, y):
        x, y = _as_arrays(x, y)
        return self.f.dy(-x, y)

    def dxy(self, x, y):
        x, y = _as_arrays(x, y)
        return -self.f.dxy(-x, y)

    def kinks_in_box(self, box: Box) -> KinkInfo:
        x0, x1, y0, y1 = box
        inner = self.f.kinks_in_box((-x1, -x0, y0, y1))
        return KinkInfo(
            xs=tuple(sorted(-v for v in inner.xs)),
            ys=inner.ys,
            bands=tuple((Direction(-v.v1, v.v2), offs) for v, offs in inner.bands),
        )


class _Mul(C2Fn):
    def __init__(self, f: C2Fn, g: C2Fn, halfplanes: tuple[HalfPlane, ...] = ()):
        self.f, self.g = f, g
        self.support_box = _box_intersect(f.support_box, g.support_box)
        self.support_halfplanes = f.support_halfplanes + g.support_halfplanes + halfplanes

    def channels(self):
        both = tuple(c for c in self.f.channels() if c in self.g.channels())
        return both if set(both) == {"val", "dx", "dy", "dxy"} else ("val",)

    def val(self, x, y):
        return self.f.val(x, y) * self.g.val(x, y)

    def dx(self, x, y):
        return self.f.dx(x, y) * self.g.val(x, y) + self.f.val(x, y) * self.g.dx(x, y)

    def dy(self, x, y):
        return self.f.dy(x, y) * self.g.val(x, y) + self.f.val(x, y) * self.g.dy(x, y)

    def dxy(self, x, y):
        return (
            self.f.dxy(x, y) * self.g.val(x, y)
            + self.f.dx(x, y) * self.g.dy(x, y)
            + self.f.dy(x, y) * self.g.dx(x, y)
            + self.f.val(x, y) * self.g.dxy(x, y)
        )

    def kinks_in_box(self, box: Box) -> KinkInfo:
        return _merge_kinks(self.f.kinks_in_box(box), self.g.kinks_in_box(box))


def add(f: C2Fn, g: C2Fn) -> C2Fn:
    return _Add(f, g)


def scale_fn(f: C2Fn, c: float) -> C2Fn:
    if isinstance(f, AtomSumFn) and not isinstance(f.provider, MeasureSlabProvider):
        out = AtomSumFn(f.inner, TransformProvider(f.provider, (0.0, 0.0), c), f.inner_channel)
        out.support_halfplanes = f.support_halfplanes
        return out
    return _Scale(f, c)


def translate_fn(f: C2Fn, t: tuple[float, float]) -> C2Fn:
    if isinstance(f, AtomSumFn) and not isinstance(f.provider, MeasureSlabProvider):
        out = AtomSumFn(f.inner, TransformProvider(f.provider, t, 1.0), f.inner_channel)
        out.support_halfplanes = tuple(
            HalfPlane(h.v, h.alpha + h.v.dot(t[0], t[1]), h.side)
            for h in f.support_halfplanes
        )
        return out
    return _Translate(f, t)


def reflect_x_fn(f: C2Fn) -> C2Fn:
    return _ReflectX(f)


def mul(f: C2Fn, g: C2Fn) -> C2Fn:
    return _Mul(f, g)


def split_halfplane(g: C2Fn, v: Direction, n: float) -> tuple[C2Fn, C2Fn]:
    """Split g = g_left + g_right with a C2 ramp across the line v . p = 0.

    g_right = g * R(v . p) is supported in the half-plane v . p >= -n and
    g_left = g * (1 - R(v . p)) in v . p <= n; the two add back to g exactly
    (up to one rounding of the ramp complement).
    """
    ramp = RampC2(v, n)
    comp = add(constant(1.0), scale_fn(ramp, -1.0))
    right = _Mul(g, ramp, halfplanes=(HalfPlane(v, -n, "right"),))
    left = _Mul(g, comp, halfplanes=(HalfPlane(v, n, "left"),))
    # the complement carries the same band kinks as the ramp itself
    return left, right


# ---------------------------------------------------------------------------
# window providers


class WindowProvider:
    """Supplies the coalesced atoms of a (possibly derived) measure window."""

    def atoms_for_box(self, box: Box) -> AtomArray:
        raise NotImplementedError

    def reach_box(self) -> Box:
        """Conservative support bounds of the whole measure (inf allowed)."""
        raise NotImplementedError


def _check_cap(n: int) -> None:
    if n > CACHE_CAP:
        raise CacheLimitExceeded(f"window would hold {n} atoms (cap {CACHE_CAP})")


def _pad_box(box: Box, pad: float) -> Box:
    return (box[0] - pad, box[1] + pad, box[2] - pad, box[3] + pad)


def _box_contains(outer: Box, inner: Box) -> bool:
    return (
        outer[0] <= inner[0]
        and outer[1] >= inner[1]
        and outer[2] <= inner[2]
        and outer[3] >= inner[3]
    )


def _filter_box(atoms: AtomArray, box: Box, tol: float) -> AtomArray:
    sel = (
        (atoms.xs >= box[0] - tol)
        & (atoms.xs <= box[1] + tol)
        & (atoms.ys >= box[2] - tol)
        & (atoms.ys <= box[3] + tol)
    )
    return AtomArray(atoms.xs[sel], atoms.ys[sel], atoms.ws[sel])


class MeasureBoxProvider(WindowProvider):
    """Windows a formal measure expression through box enumeration."""

    def __init__(self, m: MeasureExpr, pad: float = 1.0):
        self.m = m
        self.pad = pad
        self._box: Box | None = None
        self._atoms = AtomArray.empty()
        self._lock = threading.RLock()

    def reach_box(self) -> Box:
        from .measure import _lattice_reach  # local: shares the term walk

        xmin = math.inf
        xmax = -math.inf
        ymin = math.inf
        ymax = -math.inf
        for t in self.m.terms:
            if hasattr(t, "x"):  # Atom
                b = (t.x, t.x, t.y, t.y)
            elif hasattr(t, "x0"):  # QuadLattice
                b = _lattice_reach(t)
            else:  # Conv
                lb = _lattice_reach(t.left)
                rb = _lattice_reach(t.right)
                b = (lb[0] + rb[0], lb[1] + rb[1], lb[2] + rb[2], lb[3] + rb[3])
            xmin, xmax = min(xmin, b[0]), max(xmax, b[1])
            ymin, ymax = min(ymin, b[2]), max(ymax, b[3])
        return (xmin, xmax, ymin, ymax)

    def atoms_for_box(self, box: Box) -> AtomArray:
        reach = self.reach_box()
        eff = _box_intersect(box, reach)
        if eff[0] > eff[1] or eff[2] > eff[3]:
            return AtomArray.empty()
        with self._lock:
            if self._box is None or not _box_contains(self._box, eff):
                grown = _pad_box(_box_union(self._box, eff) or eff, self.pad)
                grown = _box_intersect(grown, reach)
                self._atoms = atoms_in_box(self.m, grown)
                _check_cap(len(self._atoms))
                self._box = grown
            atoms = self._atoms
        finite = [abs(b) for b in box if math.isfinite(b)]
        tol = EPS_GEOM * (1.0 + (max(finite) if finite else 0.0))
        return _filter_box(atoms, box, tol)


class MeasureSlabProvider(WindowProvider):
    """Windows a measure by advance slabs along a fixed direction."""

    def __init__(self, m: MeasureExpr, v: Direction, lo: float | None = None):
        self.m = m
        self.v = v
        self.lo = v_advance_inf(m, v) if lo is None else lo
        if not math.isfinite(self.lo):
            raise SupportMismatch("measure has no finite advance infimum along v")
        self._hi: float | None = None
        self._atoms = AtomArray.empty()
        self._lock = threading.RLock()

    def reach_box(self) -> Box:
        return _FULL

    def atoms_for_slab(self, hi: float) -> AtomArray:
        with self._lock:
            if self._hi is None or hi > self._hi:
                grown = max(hi, (self._hi if self._hi is not None else self.lo) + 1.0)
                self._atoms = atoms_in_slab(self.m, self.v, self.lo, grown)
                _check_cap(len(self._atoms))
                self._hi = grown
            atoms = self._atoms
        adv = atoms.advance(self.v)
        sel = adv <= hi + EPS_GEOM * (1.0 + abs(hi))
        return AtomArray(atoms.xs[sel], atoms.ys[sel], atoms.ws[sel])

    def atoms_for_box(self, box: Box) -> AtomArray:
        raise SupportMismatch("slab provider cannot answer box queries")


class TransformProvider(WindowProvider):
    """Shift every atom by a vector and scale every weight by a factor."""

    def __init__(self, inner: WindowProvider, shift: tuple[float, float], factor: float):
        self.inner = inner
        self.shift = shift
        self.factor = factor

    def reach_box(self) -> Box:
        b = self.inner.reach_box()
        dx, dy = self.shift
        return (b[0] + dx, b[1] + dx, b[2] + dy, b[3] + dy)

    def atoms_for_box(self, box: Box) -> AtomArray:
        dx, dy = self.shift
        a = self.inner.atoms_for_box((box[0] - dx, box[1] - dx, box[2] - dy, box[3] - dy))
        return AtomArray(a.xs + dx, a.ys + dy, a.ws * self.factor)


class ComposedProvider(WindowProvider):
    """Minkowski product of two providers' windows (measure convolution)."""

    def __init__(self, outer: WindowProvider, inner: WindowProvider):
        self.outer = outer
        self.inner = inner
        self._box: Box | None = None
        self._atoms = AtomArray.empty()
        self._lock = threading.RLock()

    def reach_box(self) -> Box:
        a = self.outer.reach_box()
        b = self.inner.reach_box()
        return (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])

    def atoms_for_box(self, box: Box) -> AtomArray:
        reach = self.reach_box()
        eff = _box_intersect(box, reach)
        if eff[0] > eff[1] or eff[2] > eff[3]:
            return AtomArray.empty()
        with self._lock:
            if self._box is None or not _box_contains(self._box, eff):
                target = _box_union(self._box, eff) or eff
                ib = self.inner.reach_box()
                ob = (target[0] - ib[1], target[1] - ib[0], target[2] - ib[3], target[3] - ib[2])
                outer_atoms = self.outer.atoms_for_box(_box_intersect(ob, self.outer.reach_box()))
                parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
                for i in range(len(outer_atoms)):
                    ax, ay, aw = (
                        float(outer_atoms.xs[i]),
                        float(outer_atoms.ys[i]),
                        outer_atoms.ws[i].item(),
                    )
                    sub = self.inner.atoms_for_box(
                        (target[0] - ax, target[1] - ax, target[2] - ay, target[3] - ay)
                    )
                    if len(sub):
                        parts.append((sub.xs + ax, sub.ys + ay, sub.ws * aw))
                if parts:
                    xs = np.concatenate([p[0] for p in parts])
                    ys = np.concatenate([p[1] for p in parts])
                    ws = np.concatenate([p[2] for p in parts])
                    scale_ = max(np.max(np.abs(xs)), np.max(np.abs(ys)), 1.0)
                    self._atoms = coalesce_atoms(xs, ys, ws, EPS_GEOM * scale_)
                else:
                    self._atoms = AtomArray.empty()
                _check_cap(len(self._atoms))
                self._box = target
            atoms = self._atoms
        finite = [abs(b) for b in eff if math.isfinite(b)]
        tol = EPS_GEOM * (1.0 + (max(finite) if finite else 0.0))
        return _filter_box(atoms, box, tol)


# ---------------------------------------------------------------------------
# atom-weighted sums of shifted copies


class AtomSumFn(C2Fn):
    """(f * m)(p) = sum over atoms t of m of w_t f(p - t).

    inner_channel selects which channel of the inner function the sum's
    *value* reads; with "val" all four channels pass through, with "dxy"
    only the value channel is available (the sum of mixed derivatives).
    """

    def __init__(self, inner: C2Fn, provider: WindowProvider, inner_channel: str = "val"):
        if inner.support_box is None and not isinstance(provider, MeasureSlabProvider):
            raise SupportMismatch(
                "atom sums need a box-supported inner function for box windows"
            )
        self.inner = inner
        self.provider = provider
        self.inner_channel = inner_channel
        self.support_box = self._support()
        self.support_halfplanes = ()

    def _support(self) -> Box | None:
        ib = self.inner.support_box
        if ib is None:
            return None
        rb = self.provider.reach_box()
        out = (ib[0] + rb[0], ib[1] + rb[1], ib[2] + rb[2], ib[3] + rb[3])
        return out

    def channels(self):
        if self.inner_channel == "val":
            return self.inner.channels()
        return ("val",)

    def _slab_alpha(self, u: Direction) -> float:
        """Infimum of u . p over the inner support (for slab windows)."""
        for h in self.inner.support_halfplanes:
            if h.side == "right" and abs(h.v.v1 - u.v1) <= 1e-12 and abs(h.v.v2 - u.v2) <= 1e-12:
                return h.alpha
            if h.side == "left" and abs(h.v.v1 + u.v1) <= 1e-12 and abs(h.v.v2 + u.v2) <= 1e-12:
                return -h.alpha
        ib = self.inner.support_box
        if ib is not None and all(math.isfinite(b) for b in ib):
            return _box_support_alpha(ib, u)
        raise SupportMismatch("no usable support bound along the slab direction")

    def _window(self, x: np.ndarray, y: np.ndarray) -> AtomArray:
        ib = self.inner.support_box
        if isinstance(self.provider, MeasureSlabProvider):
            u = self.provider.v
            alpha = self._slab_alpha(u)
            hi = float(np.max(u.dot(x, y))) - alpha
            return self.provider.atoms_for_slab(hi)
        assert ib is not None
        box = (
            float(np.min(x)) - ib[1],
            float(np.max(x)) - ib[0],
            float(np.min(y)) - ib[3],
            float(np.max(y)) - ib[2],
        )
        return self.provider.atoms_for_box(box)

    def _sum(self, x, y, chan: str) -> np.ndarray:
        x, y = _as_arrays(x, y)
        shape = x.shape
        xf = np.ascontiguousarray(x, dtype=float).ravel()
        yf = np.ascontiguousarray(y, dtype=float).ravel()
        out = np.zeros(xf.shape[0])
        if xf.shape[0] == 0:
            return out.reshape(shape)
        atoms = self._window(xf, yf)
        n = len(atoms)
        if n == 0:
            return out.reshape(shape)
        fn = getattr(self.inner, chan)
        block = max(1, _BLOCK // max(1, xf.shape[0]))
        for s in range(0, n, block):
            tx = atoms.xs[s : s + block]
            ty = atoms.ys[s : s + block]
            tw = atoms.ws[s : s + block]
            vals = fn(xf[:, None] - tx[None, :], yf[:, None] - ty[None, :])
            out = out + vals @ tw  # rebinding, not +=: promotes dtype for complex weights
        return out.reshape(shape)

    def val(self, x, y):
        return self._sum(x, y, self.inner_channel)

    def dx(self, x, y):
        if self.inner_channel != "val":
            raise NotImplementedError("only the value channel is available")
        return self._sum(x, y, "dx")

    def dy(self, x, y):
        if self.inner_channel != "val":
            raise NotImplementedError("only the value channel is available")
        return self._sum(x, y, "dy")

    def dxy(self, x, y):
        if self.inner_channel != "val":
            raise NotImplementedError("only the value channel is available")
        return self._sum(x, y, "dxy")

    def kinks_in_box(self, box: Box) -> KinkInfo:
        ib = self.inner.support_box
        if ib is None or not all(math.isfinite(b) for b in box):
            return KinkInfo()
        if not all(math.isfinite(b) for b in ib):
            return KinkInfo()  # unbounded support: no enumerable kink lines
        inner_k = self.inner.kinks_in_box(ib)
        tbox = (box[0] - ib[1], box[1] - ib[0], box[2] - ib[3], box[3] - ib[2])
        if isinstance(self.provider, MeasureSlabProvider):
            u = self.provider.v
            corners = [u.dot(bx, by) for bx in box[:2] for by in box[2:]]
            atoms = self.provider.atoms_for_slab(max(corners) - self._slab_alpha(u))
        else:
            atoms = self.provider.atoms_for_box(tbox)
        if len(atoms) == 0:
            return KinkInfo()
        tol = EPS_GEOM * (1.0 + max(abs(b) for b in box if math.isfinite(b)))
        xs = _unique_sorted(
            (atoms.xs[None, :] + np.asarray(inner_k.xs)[:, None]).ravel(), tol
        ) if inner_k.xs else ()
        ys = _unique_sorted(
            (atoms.ys[None, :] + np.asarray(inner_k.ys)[:, None]).ravel(), tol
        ) if inner_k.ys else ()
        bands = []
        for v, offs in inner_k.bands:
            shift = v.dot(atoms.xs, atoms.ys)
            newoffs = _unique_sorted(
                (shift[None, :] + np.asarray(offs)[:, None]).ravel(), tol
            )
            bands.append((v, newoffs))
        xs = tuple(t for t in xs if box[0] - tol <= t <= box[1] + tol)
        ys = tuple(t for t in ys if box[2] - tol <= t <= box[3] + tol)
        return KinkInfo(xs=xs, ys=ys, bands=tuple(bands))


def _unique_sorted(vals: np.ndarray, tol: float) -> tuple[float, ...]:
    if vals.shape[0] == 0:
        return ()
    v = np.sort(vals)
    keep = np.empty(v.shape[0], dtype=bool)
    keep[0] = True
    np.greater(np.diff(v), tol, out=keep[1:])
    return tuple(v[keep].tolist())


def _box_support_alpha(box: Box, v: Direction) -> float:
    """Infimum of v . p over the box (the tight right-half-plane bound)."""
    xs = (box[0], box[1])
    ys = (box[2], box[3])
    return min(v.dot(x, y) for x in xs for y in ys)


def conv_measure(f: C2Fn, m: MeasureExpr, v: Direction, inner_channel: str = "val") -> C2Fn:
    """Convolve a function with a discrete measure: sum of shifted copies.

    With a box-supported f the atoms are windowed by box queries (and an
    existing atom-sum f flattens into one composed window).  Otherwise f
    must be supported in a half-plane along v and the measure must advance
    along v so slab windows stay finite.  inner_channel selects which
    channel of f the sum reads; with "dxy" the result exposes only val.
    """
    if isinstance(f, AtomSumFn) and f.inner_channel == "val" and not isinstance(
        f.provider, MeasureSlabProvider
    ):
        return AtomSumFn(
            f.inner, ComposedProvider(MeasureBoxProvider(m), f.provider), inner_channel
        )
    if f.support_box is not None:
        return AtomSumFn(f, MeasureBoxProvider(m), inner_channel)
    right = [h for h in f.support_halfplanes if h.side == "right"
             and abs(h.v.v1 - v.v1) <= 1e-12 and abs(h.v.v2 - v.v2) <= 1e-12]
    if right:
        return AtomSumFn(f, MeasureSlabProvider(m, v), inner_channel)
    left = [h for h in f.support_halfplanes if h.side == "left"
            and abs(h.v.v1 - v.v1) <= 1e-12 and abs(h.v.v2 - v.v2) <= 1e-12]
    if left:
        sup = v_advance_sup(m, v)
        if not math.isfinite(sup):
            raise SupportMismatch(
                "left-supported function against a measure with unbounded advance"
            )
        neg = Direction(-v.v1, -v.v2)
        return AtomSumFn(f, MeasureSlabProvider(m, neg), inner_channel)
    raise SupportMismatch(
        "function support is unbounded: need a box or a half-plane along v"
    )

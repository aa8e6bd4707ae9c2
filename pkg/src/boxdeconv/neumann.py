"""Inversion of perturbed-identity convolutions by locally finite series.

The equation (delta_0 + eta) * f = h, with every atom of eta advancing
strictly along a direction v away from the support of h, inverts as the
alternating series f = sum_k (-1)^k h * eta^(*k).  At any evaluation point
only finitely many series atoms can reach back into supp(h), so the sum is
exact, not truncated.

Two independent evaluators are provided: a windowed materialization of the
series measure (fast, vectorized, used by the pipeline) and a memoized
recursion f(q) = h(q) - sum_a w_a f(q - a) (slow, used as a cross-check).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DepthExceeded, NonPositiveAdvance, SupportMismatch
from .geometry import EPS_GEOM, Direction, HalfPlane, pos_tol
from .measure import (
    Atom,
    AtomArray,
    Conv,
    MeasureExpr,
    atoms_in_slab,
    coalesce_atoms,
    extremal_atom,
    scale as scale_measure,
    translate as translate_measure,
)
from .smoothfn import (
    AtomSumFn,
    C2Fn,
    ComposedProvider,
    MeasureSlabProvider,
    WindowProvider,
    _check_cap,
    scale_fn,
    translate_fn,
)

__all__ = [
    "PerturbedIdentityProblem",
    "SolveInfo",
    "SeriesThetaProvider",
    "solve_perturbed_identity",
    "solve_general",
    "reference_solve_at",
    "find_min_advance",
]

# Advances below this are treated as non-advancing (unbounded recursion).
MIN_ADVANCE = 1e-9
DEFAULT_DEPTH_CAP = 10_000


def _safe_dot(c: float, x: float) -> float:
    """c * x with the convention 0 * inf = 0 (box corners may be infinite)."""
    return 0.0 if c == 0.0 else c * x


@dataclass
class PerturbedIdentityProblem:
    """Data of (delta_0 + eta) * f = h with strict advance along v.

    side "right": supp(h) lies in a right half-plane of v and eta advances
    forward (v . a > 0 on its atoms); side "left": supp(h) in a left
    half-plane and eta advances backward.
    """

    h: C2Fn
    eta: MeasureExpr
    v: Direction
    side: str = "right"
    beta: float | None = None
    depth_cap: int = DEFAULT_DEPTH_CAP

    def __post_init__(self) -> None:
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")

    @property
    def sigma(self) -> int:
        return 1 if self.side == "right" else -1


@dataclass(frozen=True)
class SolveInfo:
    """Diagnostics attached to a solved function."""

    beta: float
    sigma: int
    lead: Atom | None = None


def find_min_advance(eta: MeasureExpr, v: Direction, sigma: int) -> float:
    """Smallest coalesced-atom advance of eta along sigma*v.

    Doubles a symmetric search window until a surviving atom appears, and
    raises NonPositiveAdvance if any atom fails to advance strictly (below
    MIN_ADVANCE, at zero, or on the wrong side).  An eta with no atoms at
    all returns +inf (the perturbation vanishes).
    """
    if not eta.terms:
        return math.inf
    window = 1.0
    for _ in range(80):
        atoms = atoms_in_slab(eta, v, -window, window)
        if len(atoms):
            adv = sigma * atoms.advance(v)
            bad = adv < MIN_ADVANCE
            if np.any(bad):
                worst = float(np.min(adv))
                raise NonPositiveAdvance(
                    f"perturbation atom advances by {worst:.3e} along the "
                    f"{'forward' if sigma > 0 else 'backward'} direction "
                    f"(minimum {MIN_ADVANCE:.0e})"
                )
            return float(np.min(adv))
        window *= 2.0
    return math.inf


class SeriesThetaProvider(WindowProvider):
    """Windowed atoms of the inverse-series measure sum_k (-1)^k eta^(*k).

    Materialized lazily out to an advance depth D along sigma*v; powers of
    eta are folded pairwise with coalescing and pruned at depth D, which is
    exact because every atom advance is at least beta > 0.
    """

    def __init__(
        self,
        eta: MeasureExpr,
        v: Direction,
        sigma: int,
        beta: float,
        depth_cap: int = DEFAULT_DEPTH_CAP,
    ):
        self.eta = eta
        self.v = v
        self.sigma = sigma
        self.beta = beta
        self.depth_cap = depth_cap
        self._depth = 0.0
        self._theta = AtomArray(np.zeros(1), np.zeros(1), np.ones(1))
        self._reach = self._formal_reach()
        self._lock = threading.RLock()

    def _formal_reach(self) -> tuple[float, float, float, float]:
        from .measure import _formal_axis_extreme

        if not self.eta.terms:
            return (0.0, 0.0, 0.0, 0.0)

        def bound(axis: str, sgn: float) -> float:
            try:
                return _formal_axis_extreme(self.eta, axis, sgn)
            except SupportMismatch:
                return -math.inf if sgn > 0 else math.inf

        xlo, xhi = bound("x", 1.0), bound("x", -1.0)
        ylo, yhi = bound("y", 1.0), bound("y", -1.0)
        # k-fold sums only accumulate; a signed bound stays only when the
        # one-step bound does not cross zero.
        return (
            0.0 if xlo >= 0 else -math.inf,
            0.0 if xhi <= 0 else math.inf,
            0.0 if ylo >= 0 else -math.inf,
            0.0 if yhi <= 0 else math.inf,
        )

    def reach_box(self):
        return self._reach

    @property
    def atom_count(self) -> int:
        """Series atoms materialized so far."""
        with self._lock:
            return len(self._theta)

    def _ensure_depth(self, depth: float) -> None:
        if depth <= self._depth and len(self._theta):
            return
        depth = max(depth, 1.0)
        if math.isinf(self.beta):
            self._depth = depth
            return
        kmax = int(math.ceil(depth / self.beta)) + 1
        if kmax > self.depth_cap:
            raise DepthExceeded(
                f"series depth {kmax} exceeds cap {self.depth_cap} "
                f"(window {depth:.3g}, step {self.beta:.3g})"
            )
        lo, hi = (self.beta * 0.5, depth) if self.sigma > 0 else (-depth, -self.beta * 0.5)
        eta_atoms = atoms_in_slab(self.eta, self.v, lo, hi)
        parts_x = [np.zeros(1)]
        parts_y = [np.zeros(1)]
        parts_w = [np.ones(1)]
        px, py, pw = np.zeros(1), np.zeros(1), np.ones(1)
        sign = 1.0
        for _ in range(kmax):
            if len(eta_atoms) == 0 or px.shape[0] == 0:
                break
            sign = -sign
            nx = (px[:, None] + eta_atoms.xs[None, :]).ravel()
            ny = (py[:, None] + eta_atoms.ys[None, :]).ravel()
            nw = (pw[:, None] * eta_atoms.ws[None, :]).ravel()
            scale_ = max(np.max(np.abs(nx)), np.max(np.abs(ny)), 1.0)
            merged = coalesce_atoms(nx, ny, nw, EPS_GEOM * scale_)
            adv = self.sigma * merged.advance(self.v)
            keep = adv <= depth + EPS_GEOM * (1.0 + depth)
            px, py, pw = merged.xs[keep], merged.ys[keep], merged.ws[keep]
            if px.shape[0] == 0:
                break
            parts_x.append(px)
            parts_y.append(py)
            parts_w.append(sign * pw)
            _check_cap(sum(p.shape[0] for p in parts_x))
        else:
            if px.shape[0]:
                raise DepthExceeded(
                    f"series failed to terminate within {kmax} folds"
                )
        xs = np.concatenate(parts_x)
        ys = np.concatenate(parts_y)
        ws = np.concatenate(parts_w)
        scale_ = max(np.max(np.abs(xs)), np.max(np.abs(ys)), 1.0)
        self._theta = coalesce_atoms(xs, ys, ws, EPS_GEOM * scale_)
        _check_cap(len(self._theta))
        self._depth = depth

    def atoms_for_box(self, box) -> AtomArray:
        depth = max(
            _safe_dot(self.sigma * self.v.v1, cx) + _safe_dot(self.sigma * self.v.v2, cy)
            for cx in box[:2]
            for cy in box[2:]
        )
        if math.isinf(depth):
            raise SupportMismatch(
                "series window needs finite box corners along its advance"
            )
        if depth < 0.0:
            return AtomArray.empty()
        with self._lock:
            self._ensure_depth(depth)
            a = self._theta
        tol = EPS_GEOM * (1.0 + max(abs(b) for b in box if math.isfinite(b)))
        sel = (
            (a.xs >= box[0] - tol)
            & (a.xs <= box[1] + tol)
            & (a.ys >= box[2] - tol)
            & (a.ys <= box[3] + tol)
        )
        return AtomArray(a.xs[sel], a.ys[sel], a.ws[sel])


def solve_perturbed_identity(problem: PerturbedIdentityProblem) -> C2Fn:
    """Invert (delta_0 + eta) * f = h; returns f with all channels of h.

    The result is an atom-weighted sum of shifted copies of h driven by the
    windowed series measure; it carries a .solve_info diagnostic record.
    """
    sigma = problem.sigma
    beta = problem.beta if problem.beta is not None else find_min_advance(
        problem.eta, problem.v, sigma
    )
    prov = SeriesThetaProvider(problem.eta, problem.v, sigma, beta, problem.depth_cap)
    h = problem.h
    if isinstance(h, AtomSumFn) and h.inner_channel == "val" and not isinstance(
        h.provider, MeasureSlabProvider
    ):
        fn = AtomSumFn(h.inner, ComposedProvider(prov, h.provider), "val")
    else:
        fn = AtomSumFn(h, prov, "val")
    fn.support_halfplanes = tuple(
        hp
        for hp in h.support_halfplanes
        if hp.side == problem.side and _aligned(hp, problem.v)
    )
    fn.solve_info = SolveInfo(beta=beta, sigma=sigma)
    return fn


def _aligned(hp: HalfPlane, v: Direction) -> bool:
    return abs(hp.v.v1 - v.v1) <= 1e-12 and abs(hp.v.v2 - v.v2) <= 1e-12


def solve_general(h: C2Fn, nu: MeasureExpr, v: Direction, side: str,
                  depth_cap: int = DEFAULT_DEPTH_CAP) -> C2Fn:
    """Invert nu * g1 = h for a measure with an extremal corner atom.

    Factoring nu = c delta_z * (delta_0 + eta) at its lexicographic corner
    (maximal for side "left", minimal for side "right") reduces to the
    perturbed identity for F(q) = h(q + z)/c.
    """
    mode = "max-xy" if side == "left" else "min-xy"
    lead = extremal_atom(nu, mode)
    c = lead.w
    shifted = translate_measure(scale_measure(nu, 1.0 / c), (-lead.x, -lead.y))
    eta = MeasureExpr(shifted.terms + (Atom(0.0, 0.0, -1.0),))
    big_f = scale_fn(translate_fn(h, (-lead.x, -lead.y)), 1.0 / c)
    g1 = solve_perturbed_identity(
        PerturbedIdentityProblem(big_f, eta, v, side=side, depth_cap=depth_cap)
    )
    g1.solve_info = SolveInfo(beta=g1.solve_info.beta, sigma=g1.solve_info.sigma, lead=lead)
    return g1


# ---------------------------------------------------------------------------
# memoized-recursion reference evaluator


def _support_bound(h: C2Fn, v: Direction, side: str) -> float:
    """alpha with supp(h) in H_right(v, alpha) (side right) or H_left."""
    for hp in h.support_halfplanes:
        if hp.side == side and _aligned(hp, v):
            return hp.alpha
    box = h.support_box
    if box is not None:
        corners = [
            _safe_dot(v.v1, x) + _safe_dot(v.v2, y) for x in box[:2] for y in box[2:]
        ]
        bound = min(corners) if side == "right" else max(corners)
        if math.isfinite(bound):
            return bound
    raise SupportMismatch(f"no finite {side} support bound along v")


def reference_solve_at(problem: PerturbedIdentityProblem, x: float, y: float) -> complex:
    """Evaluate the inverse at one point by the direct recursion.

    f(q) = h(q) - sum over eta atoms a reaching supp(h) of w_a f(q - a),
    with nodes discovered breadth-first, merged within position tolerance,
    and evaluated in order of advance.  Independent of the series provider.
    """
    v = problem.v
    sigma = problem.sigma
    beta = problem.beta if problem.beta is not None else find_min_advance(
        problem.eta, problem.v, sigma
    )
    alpha = _support_bound(problem.h, v, problem.side)

    def slab_atoms(q_adv: float) -> AtomArray:
        # atoms a with q - a still on the support side of the data
        if sigma > 0:
            lo, hi = beta * 0.5, q_adv - alpha
        else:
            lo, hi = q_adv - alpha, -beta * 0.5
        if hi < lo:
            return AtomArray.empty()
        return atoms_in_slab(problem.eta, v, lo, hi)

    if math.isinf(beta):
        return np.asarray(problem.h.val(x, y)).item()

    # breadth-first node discovery with per-level merging
    levels: list[AtomArray] = [AtomArray(np.array([x]), np.array([y]), np.ones(1))]
    seen_x = [np.array([x])]
    seen_y = [np.array([y])]
    for depth in range(problem.depth_cap + 1):
        cur = levels[-1]
        parts_x, parts_y = [], []
        for i in range(len(cur)):
            qx, qy = float(cur.xs[i]), float(cur.ys[i])
            atoms = slab_atoms(v.dot(qx, qy))
            if len(atoms):
                parts_x.append(qx - atoms.xs)
                parts_y.append(qy - atoms.ys)
        if not parts_x:
            break
        nx = np.concatenate(parts_x)
        ny = np.concatenate(parts_y)
        scale_ = max(np.max(np.abs(nx)), np.max(np.abs(ny)), 1.0)
        merged = coalesce_atoms(nx, ny, np.ones(nx.shape[0]), EPS_GEOM * scale_)
        levels.append(merged)
        seen_x.append(merged.xs)
        seen_y.append(merged.ys)
        _check_cap(sum(a.shape[0] for a in seen_x))
    else:
        raise DepthExceeded(f"recursion deeper than cap {problem.depth_cap}")

    all_x = np.concatenate(seen_x)
    all_y = np.concatenate(seen_y)
    tol = pos_tol(float(max(np.max(np.abs(all_x)), np.max(np.abs(all_y)))))
    nodes = coalesce_atoms(all_x, all_y, np.ones(all_x.shape[0]), tol)

    # evaluate bottom-up in advance order
    order = np.argsort(sigma * nodes.advance(v), kind="stable")
    qkey: dict[tuple[int, int], list[int]] = {}
    hvals = np.atleast_1d(problem.h.val(nodes.xs, nodes.ys))
    term_ws = [
        t.left.w * t.right.w if isinstance(t, Conv) else t.w
        for t in problem.eta.terms
    ]
    values = np.zeros(len(nodes), dtype=np.result_type(hvals, np.asarray(term_ws + [0.0]), float))

    def key(px: float, py: float) -> tuple[int, int]:
        return (int(round(px / tol / 4.0)), int(round(py / tol / 4.0)))

    def lookup(px: float, py: float) -> complex:
        k0, k1 = key(px, py)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for idx in qkey.get((k0 + dx, k1 + dy), ()):
                    if abs(nodes.xs[idx] - px) <= 2 * tol and abs(
                        nodes.ys[idx] - py
                    ) <= 2 * tol:
                        return values[idx].item()
        raise KeyError(f"unresolved recursion node ({px}, {py})")

    for i in order:
        qx, qy = float(nodes.xs[i]), float(nodes.ys[i])
        acc = hvals[i].item()
        atoms = slab_atoms(v.dot(qx, qy))
        for j in range(len(atoms)):
            acc -= atoms.ws[j].item() * lookup(qx - float(atoms.xs[j]), qy - float(atoms.ys[j]))
        values[i] = acc
        qkey.setdefault(key(qx, qy), []).append(i)

    return lookup(x, y)

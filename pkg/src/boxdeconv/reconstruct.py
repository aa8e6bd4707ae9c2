"""End-to-end inversion of the rectangle-average blur.

Validates the rectangle chain, builds lattice measure families for both
support sides, splits the data across the separating direction, runs the
windowed-series solve on each half, and assembles the unknown from mixed
partial derivatives.  Results carry a residual certificate computed with
the independent forward quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ResidualTooLarge
from .forward import QuadratureRule, ResidualStats, default_region, residual_grid
from .geometry import (
    BlurConfig,
    Direction,
    Rect,
    rect_params,
    reflect_config_x,
    scalar_weight,
    validate_staircase,
)
from .measure import (
    Atom,
    ConeData,
    Conv,
    MeasureExpr,
    QuadLattice,
    cone_for_pair,
    measure,
)
from .neumann import DEFAULT_DEPTH_CAP, SeriesThetaProvider, solve_general
from .smoothfn import (
    Box,
    C2Fn,
    add,
    conv_measure,
    reflect_x_fn,
    split_halfplane,
)

__all__ = [
    "CornerFamily",
    "CaseMeasures",
    "ReconstructOptions",
    "ReconstructionResult",
    "SideSolution",
    "SplitSolve",
    "assemble_f",
    "build_case_measures",
    "reconstruct",
    "rectangle_share_measures",
    "split_solve",
]


@dataclass(frozen=True)
class CornerFamily:
    """Corner lattices of one carried rectangle, stepped by the lead cell.

    zeta/eta/xi/psi sit at the rectangle's four corners (low-low, low-high,
    high-low, high-high relative to the anchor); with signs (+, -, -, +)
    they carry the lead solution to that rectangle's share of the data.
    """

    zeta: QuadLattice
    eta: QuadLattice
    xi: QuadLattice
    psi: QuadLattice

    def combined(self) -> MeasureExpr:
        """Signed sum  zeta - eta - xi + psi  as a four-term measure."""
        return measure(self.zeta, _negated(self.eta), _negated(self.xi), self.psi)


@dataclass(frozen=True)
class CaseMeasures:
    """Solver measures for one support side of an ascending chain.

    nu drives the lead solve, psi prepares the data, mu1 assembles the
    unknown; families holds the corner lattices of the rectangles strictly
    between the first and the last (empty when n <= 2).
    """

    nu: MeasureExpr
    psi: MeasureExpr
    mu1: MeasureExpr
    families: tuple[CornerFamily, ...]
    side: str


def _negated(lat: QuadLattice) -> QuadLattice:
    return replace(lat, w=scalar_weight(-complex(lat.w)))


def _anchor(rect: Rect, e: int) -> tuple[float, float]:
    """Reflected far corner: upper-right for e = -1, lower-left for e = +1."""
    return (-rect.b, -rect.d) if e < 0 else (-rect.a, -rect.c)


def _base_lattice(rect: Rect, e: int, w: complex | float) -> QuadLattice:
    """Quadrant lattice anchored at the rectangle's reflected far corner."""
    _, _, s, t = rect_params(rect)
    x0, y0 = _anchor(rect, e)
    return QuadLattice(x0, y0, 2.0 * s, 2.0 * t, e, e, w)


def _corner_family(first: Rect, rect: Rect, e: int, w: complex | float) -> CornerFamily:
    """Corner lattices of rect, anchored and stepped by the first rectangle."""
    _, _, s1, t1 = rect_params(first)
    bx, by = _anchor(first, e)

    def lat(cx: float, cy: float) -> QuadLattice:
        return QuadLattice(bx + cx, by + cy, 2.0 * s1, 2.0 * t1, e, e, w)

    return CornerFamily(
        zeta=lat(rect.a, rect.c),
        eta=lat(rect.a, rect.d),
        xi=lat(rect.b, rect.c),
        psi=lat(rect.b, rect.d),
    )


def _side_sign(side: str) -> int:
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return -1 if side == "left" else 1


def build_case_measures(
    cfg: BlurConfig, side: str, force_general: bool = False
) -> CaseMeasures:
    """Measure family of one side: lead lattice, data preparer, solver measure.

    Side "left" anchors every lattice at the reflected upper-right corners
    and points them down-left; side "right" mirrors both choices.  With a
    single rectangle nu = psi = mu1, so the solve inverts exactly what psi
    applied and passes the data through.  Two rectangles use the dedicated
    two-lattice measure; three or more add the corner families of every
    intermediate rectangle convolved with psi, signed (+zeta, -eta, -xi,
    +psi_k).  force_general runs the general construction at n = 2 as well
    (the two coincide there; kept as a cross-check path).
    """
    e = _side_sign(side)
    rects = cfg.rects
    n = cfg.n
    w1 = complex(cfg.weights[0])
    mu1_lat = _base_lattice(rects[0], e, scalar_weight(1.0 / w1))
    if n == 1:
        lat = measure(mu1_lat)
        return CaseMeasures(nu=lat, psi=lat, mu1=lat, families=(), side=side)
    psi_lat = _base_lattice(rects[-1], e, scalar_weight(1.0 / complex(cfg.weights[-1])))
    mu1 = measure(mu1_lat)
    psi = measure(psi_lat)
    if n == 2 and not force_general:
        return CaseMeasures(
            nu=measure(mu1_lat, psi_lat), psi=psi, mu1=mu1, families=(), side=side
        )
    families = tuple(
        _corner_family(rects[0], rects[k], e, scalar_weight(complex(cfg.weights[k]) / w1))
        for k in range(1, n - 1)
    )
    terms: list[QuadLattice | Conv] = [mu1_lat, psi_lat]
    for fam in families:
        terms.append(Conv(fam.zeta, psi_lat))
        terms.append(Conv(_negated(fam.eta), psi_lat))
        terms.append(Conv(_negated(fam.xi), psi_lat))
        terms.append(Conv(fam.psi, psi_lat))
    return CaseMeasures(
        nu=MeasureExpr(tuple(terms)), psi=psi, mu1=mu1, families=families, side=side
    )


def rectangle_share_measures(cfg: BlurConfig, side: str) -> tuple[MeasureExpr, ...]:
    """Carrier measures of the per-rectangle data shares.

    Convolving the lead solution with the k-th entry yields the k-th
    rectangle's share of the one-sided data: an identity atom for the
    first rectangle, the signed corner family for every later one, so the
    shares sum back to the data.
    """
    e = _side_sign(side)
    w1 = complex(cfg.weights[0])
    shares: list[MeasureExpr] = [measure(Atom(0.0, 0.0, 1.0))]
    for k in range(1, cfg.n):
        fam = _corner_family(
            cfg.rects[0], cfg.rects[k], e, scalar_weight(complex(cfg.weights[k]) / w1)
        )
        shares.append(fam.combined())
    return tuple(shares)


@dataclass(frozen=True)
class ReconstructOptions:
    """Tuning for the reconstruction pipeline and its verification grid.

    region defaults to the kernel hull inflated by twice the largest
    rectangle half-side; the residual is certified on an nx-by-ny grid
    over that region against the given tolerance.
    """

    tolerance: float = 1e-6
    region: Box | None = None
    nx: int = 21
    ny: int = 21
    split_width: float = 1.0
    quad_order: int = 8
    depth_cap: int = DEFAULT_DEPTH_CAP
    threads: int = 1
    force_general: bool = False


@dataclass(frozen=True, eq=False)
class SideSolution:
    """One half-plane's solve: prepared data, lead solution, assembled piece."""

    side: str
    measures: CaseMeasures
    g_side: C2Fn
    h: C2Fn
    g1: C2Fn
    f_side: C2Fn
    beta: float


@dataclass(frozen=True, eq=False)
class SplitSolve:
    """Both one-sided solves plus their sum and the separating cone."""

    cone: ConeData
    left: SideSolution
    right: SideSolution
    f: C2Fn
    beta: float


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    """Reconstructed function with the certificate of its defining identity."""

    f: C2Fn
    cone: ConeData
    beta: float
    split_width: float
    residual_stats: ResidualStats
    atom_counts: dict[str, int]
    orientation: str


def assemble_f(g1: C2Fn, mu1: MeasureExpr, v: Direction) -> C2Fn:
    """Lattice sum of mixed partials: f(p) = sum over atoms w * g1.dxy(p - a).

    Averaging f over the lead rectangle telescopes the lattice back to the
    lead solution, which is the assembly's defining property.
    """
    return conv_measure(g1, mu1, v, inner_channel="dxy")


def split_solve(
    cfg: BlurConfig, g: C2Fn, opts: ReconstructOptions | None = None
) -> SplitSolve:
    """Solve an ascending chain: split the data and invert each half.

    cfg must already satisfy the ascending ordering (callers reflect
    descending chains first).  Each side prepares h = g_side * psi, solves
    the lead equation against nu, and assembles its piece from mu1; the
    two pieces add to the full solution.
    """
    opts = opts or ReconstructOptions()
    left_measures = build_case_measures(cfg, "left", opts.force_general)
    right_measures = build_case_measures(cfg, "right", opts.force_general)
    cone = cone_for_pair(right_measures.nu, left_measures.nu)
    g_left, g_right = split_halfplane(g, cone.v, opts.split_width)
    sides = []
    for cm, g_side in ((left_measures, g_left), (right_measures, g_right)):
        h = conv_measure(g_side, cm.psi, cone.v)
        g1 = solve_general(h, cm.nu, cone.v, cm.side, depth_cap=opts.depth_cap)
        f_side = assemble_f(g1, cm.mu1, cone.v)
        sides.append(
            SideSolution(
                side=cm.side,
                measures=cm,
                g_side=g_side,
                h=h,
                g1=g1,
                f_side=f_side,
                beta=g1.solve_info.beta,
            )
        )
    left_sol, right_sol = sides
    return SplitSolve(
        cone=cone,
        left=left_sol,
        right=right_sol,
        f=add(left_sol.f_side, right_sol.f_side),
        beta=min(left_sol.beta, right_sol.beta),
    )


def reconstruct(
    cfg: BlurConfig, g: C2Fn, opts: ReconstructOptions | None = None
) -> ReconstructionResult:
    """Construct f with blur(f) = g and certify the identity on a grid.

    Descending chains are mirrored across the y-axis, solved there, and
    mirrored back.  The residual of the certified identity is measured by
    the forward quadrature against the original kernel and data; a grid
    maximum above opts.tolerance raises ResidualTooLarge (the partial
    result stays available on the exception's .result attribute).
    """
    opts = opts or ReconstructOptions()
    orientation = validate_staircase(cfg)
    if orientation == "Cond2":
        work = split_solve(reflect_config_x(cfg), reflect_x_fn(g), opts)
        f = reflect_x_fn(work.f)
    else:
        work = split_solve(cfg, g, opts)
        f = work.f
    region = opts.region if opts.region is not None else default_region(cfg)
    stats = residual_grid(
        f,
        g,
        cfg,
        region,
        opts.nx,
        opts.ny,
        rule=QuadratureRule(order=opts.quad_order),
        threads=opts.threads,
    )
    result = ReconstructionResult(
        f=f,
        cone=work.cone,
        beta=work.beta,
        split_width=opts.split_width,
        residual_stats=stats,
        atom_counts=_atom_counts(work),
        orientation=orientation,
    )
    if stats.max_abs > opts.tolerance:
        err = ResidualTooLarge(stats.max_abs, opts.tolerance)
        err.result = result
        raise err
    return result


def _atom_counts(work: SplitSolve) -> dict[str, int]:
    counts: dict[str, int] = {}
    for sol in (work.left, work.right):
        series = _series_provider(sol.g1)
        counts[f"series_{sol.side}"] = series.atom_count if series is not None else 0
        counts[f"nu_terms_{sol.side}"] = len(sol.measures.nu.terms)
    return counts


def _series_provider(fn: C2Fn) -> SeriesThetaProvider | None:
    stack = [getattr(fn, "provider", None)]
    while stack:
        prov = stack.pop()
        if prov is None:
            continue
        if isinstance(prov, SeriesThetaProvider):
            return prov
        stack.append(getattr(prov, "outer", None))
        stack.append(getattr(prov, "inner", None))
    return None

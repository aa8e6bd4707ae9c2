"""Tests for measure-family construction and end-to-end reconstruction."""

from __future__ import annotations

import numpy as np
import pytest

from boxdeconv.errors import ResidualTooLarge, StaircaseViolation
from boxdeconv.forward import BlurredFn, blur, default_region
from boxdeconv.geometry import BlurConfig, Direction, Rect, reflect_config_x
from boxdeconv.measure import Atom, Conv, QuadLattice, atoms_in_slab, extremal_atom
from boxdeconv.reconstruct import (
    ReconstructOptions,
    assemble_f,
    build_case_measures,
    reconstruct,
    rectangle_share_measures,
    split_solve,
)
from boxdeconv.smoothfn import PolyBump, add, conv_measure

CFG1 = BlurConfig(rects=(Rect(-1.0, 1.0, -1.0, 1.0),), weights=(1.0,))
CFG2 = BlurConfig(
    rects=(Rect(-1.0, 1.0, -1.0, 1.0), Rect(0.5, 2.5, 0.5, 2.5)),
    weights=(1.0, 0.5),
)
CFG3 = BlurConfig(
    rects=(
        Rect(-1.0, 1.0, -1.0, 1.0),
        Rect(0.5, 2.5, 0.5, 2.5),
        Rect(2.0, 4.0, 2.0, 4.0),
    ),
    weights=(1.0, 0.5, 0.25),
)

V11 = Direction(1.0, 1.0)


def brute_slab_atoms(nu, v, lo, hi, jmax=40):
    """Enumerate coalesced slab atoms of a measure by direct expansion."""
    sums: dict[tuple[float, float], complex] = {}

    def lattice_points(lat):
        j = np.arange(jmax, dtype=float)
        xs = lat.x0 + lat.ex * lat.sx * j
        ys = lat.y0 + lat.ey * lat.sy * j
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return gx.ravel(), gy.ravel()

    def record(xs, ys, ws):
        adv = v.v1 * xs + v.v2 * ys
        keep = (adv >= lo) & (adv <= hi)
        for x, y, w in zip(xs[keep], ys[keep], np.broadcast_to(ws, xs.shape)[keep]):
            key = (round(float(x), 9), round(float(y), 9))
            sums[key] = sums.get(key, 0.0) + complex(w)

    for term in nu.terms:
        if isinstance(term, Atom):
            record(np.array([term.x]), np.array([term.y]), np.array([term.w]))
        elif isinstance(term, QuadLattice):
            xs, ys = lattice_points(term)
            record(xs, ys, np.full(xs.shape, complex(term.w)))
        elif isinstance(term, Conv):
            lx, ly = lattice_points(term.left)
            rx, ry = lattice_points(term.right)
            xs = (lx[:, None] + rx[None, :]).ravel()
            ys = (ly[:, None] + ry[None, :]).ravel()
            w = complex(term.left.w) * complex(term.right.w)
            record(xs, ys, np.full(xs.shape, w))
    return {k: w for k, w in sums.items() if abs(w) > 1e-12}


class TestCaseMeasures:
    def test_single_rect_mu1_lattice(self):
        cm = build_case_measures(CFG1, "left")
        (lat,) = cm.mu1.terms
        assert lat == QuadLattice(-1.0, -1.0, 2.0, 2.0, -1, -1, 1.0)

    def test_single_rect_family_passes_through(self):
        cm = build_case_measures(CFG1, "left")
        assert cm.nu == cm.psi == cm.mu1
        assert cm.families == ()

    def test_single_rect_right_side_mirrors(self):
        cm = build_case_measures(CFG1, "right")
        (lat,) = cm.mu1.terms
        assert lat == QuadLattice(1.0, 1.0, 2.0, 2.0, 1, 1, 1.0)

    def test_two_rect_nu_has_both_lattices(self):
        cm = build_case_measures(CFG2, "left")
        first, second = cm.nu.terms
        assert first == QuadLattice(-1.0, -1.0, 2.0, 2.0, -1, -1, 1.0)
        assert second == QuadLattice(-2.5, -2.5, 2.0, 2.0, -1, -1, 2.0)
        assert cm.psi.terms == (second,)
        assert cm.mu1.terms == (first,)
        assert cm.families == ()

    def test_two_rect_right_side_bases(self):
        cm = build_case_measures(CFG2, "right")
        first, second = cm.nu.terms
        assert first == QuadLattice(1.0, 1.0, 2.0, 2.0, 1, 1, 1.0)
        assert second == QuadLattice(-0.5, -0.5, 2.0, 2.0, 1, 1, 2.0)

    def test_three_rect_nu_shape(self):
        cm = build_case_measures(CFG3, "left")
        assert len(cm.families) == 1
        fam = cm.families[0]
        # middle rectangle [0.5, 2.5]^2 anchored at (-1, -1), weight ratio 0.5
        assert fam.zeta == QuadLattice(-0.5, -0.5, 2.0, 2.0, -1, -1, 0.5)
        assert fam.eta == QuadLattice(-0.5, 1.5, 2.0, 2.0, -1, -1, 0.5)
        assert fam.xi == QuadLattice(1.5, -0.5, 2.0, 2.0, -1, -1, 0.5)
        assert fam.psi == QuadLattice(1.5, 1.5, 2.0, 2.0, -1, -1, 0.5)
        convs = [t for t in cm.nu.terms if isinstance(t, Conv)]
        assert len(convs) == 4
        assert all(t.right == cm.psi.terms[0] for t in convs)
        # signs (+zeta, -eta, -xi, +psi) are folded into the conv left factors
        assert [t.left.w for t in convs] == [0.5, -0.5, -0.5, 0.5]
        assert [(t.left.x0, t.left.y0) for t in convs] == [
            (-0.5, -0.5),
            (-0.5, 1.5),
            (1.5, -0.5),
            (1.5, 1.5),
        ]

    def test_three_rect_slab_atoms_match_brute_force(self):
        cm = build_case_measures(CFG3, "left")
        lo, hi = -8.3, -0.31
        got = atoms_in_slab(cm.nu, V11, lo, hi)
        want = brute_slab_atoms(cm.nu, V11, lo, hi)
        assert len(got) == len(want)
        for x, y, w in zip(got.xs, got.ys, got.ws):
            key = (round(float(x), 9), round(float(y), 9))
            assert key in want
            assert abs(complex(w) - want[key]) <= 1e-10

    def test_extremal_lead_weights(self):
        # the down-left family leads at the first rectangle's lattice base;
        # the up-right family leads at the last rectangle's.
        for cfg in (CFG1, CFG2, CFG3):
            left = build_case_measures(cfg, "left")
            right = build_case_measures(cfg, "right")
            w1 = complex(cfg.weights[0])
            wn = complex(cfg.weights[-1])
            assert abs(extremal_atom(left.nu, "max-xy").w - 1.0 / w1) <= 1e-12
            assert abs(extremal_atom(right.nu, "min-xy").w - 1.0 / wn) <= 1e-12

    def test_complex_weights_invert(self):
        cfg = BlurConfig(rects=CFG2.rects, weights=(2.0j, 0.5))
        cm = build_case_measures(cfg, "left")
        assert cm.mu1.terms[0].w == -0.5j
        assert cm.psi.terms[0].w == 2.0

    def test_force_general_matches_dedicated_at_two_rects(self):
        assert build_case_measures(CFG2, "left", force_general=True) == build_case_measures(
            CFG2, "left"
        )

    def test_invalid_side_rejected(self):
        with pytest.raises(ValueError):
            build_case_measures(CFG1, "up")


class TestShareMeasures:
    def test_first_share_is_identity_atom(self):
        shares = rectangle_share_measures(CFG3, "left")
        assert len(shares) == 3
        assert shares[0].terms == (Atom(0.0, 0.0, 1.0),)

    def test_later_shares_are_signed_corner_quadruples(self):
        shares = rectangle_share_measures(CFG3, "left")
        for share in shares[1:]:
            assert len(share.terms) == 4
            signs = [1.0 if complex(t.w).real > 0 else -1.0 for t in share.terms]
            assert signs == [1.0, -1.0, -1.0, 1.0]

    def test_last_share_uses_first_rect_steps(self):
        shares = rectangle_share_measures(CFG3, "left")
        for lat in shares[2].terms:
            assert (lat.sx, lat.sy) == (2.0, 2.0)
        assert shares[2].terms[0].x0 == -1.0 + 2.0  # anchor -b1 plus corner a3


class TestAssembleF:
    def test_zero_input_gives_zero(self):
        cm = build_case_measures(CFG1, "left")
        f = assemble_f(PolyBump(0.0, 0.0, 2.0, 2.0, 0.0), cm.mu1, V11)
        xs = np.linspace(-3.0, 3.0, 7)
        assert np.all(f.val(xs, xs) == 0.0)

    def test_average_over_rect_recovers_input(self):
        cm = build_case_measures(CFG1, "left")
        g1 = PolyBump(0.0, 0.0, 2.0, 2.0)
        f = assemble_f(g1, cm.mu1, V11)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-2.5, 2.5, size=(50, 2))
        for x, y in pts:
            got = blur(f, CFG1, float(x), float(y))
            assert abs(got - complex(g1.val(x, y))) <= 1e-8

    def test_vanishes_on_empty_side(self):
        cm = build_case_measures(CFG1, "left")
        f = assemble_f(PolyBump(0.0, 0.0, 2.0, 2.0), cm.mu1, V11)
        assert f.val(np.array([5.0]), np.array([5.0]))[0] == 0.0
        assert f.val(np.array([40.0]), np.array([40.0]))[0] == 0.0


class TestSplitSolve:
    def test_each_side_reproduces_its_half(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        work = split_solve(CFG2, g)
        rng = np.random.default_rng(11)
        pts = rng.uniform(-2.0, 3.0, size=(10, 2))
        for sol in (work.left, work.right):
            for x, y in pts:
                got = blur(sol.f_side, CFG2, float(x), float(y))
                want = complex(np.asarray(sol.g_side.val(x, y)).item())
                assert abs(got - want) <= 1e-6

    def test_shares_decompose_each_half(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        work = split_solve(CFG3, g)
        rng = np.random.default_rng(13)
        xs = rng.uniform(-6.0, 6.0, size=100)
        ys = rng.uniform(-6.0, 6.0, size=100)
        for sol in (work.left, work.right):
            shares = rectangle_share_measures(CFG3, sol.side)
            total = np.zeros(xs.shape, dtype=complex)
            for share in shares:
                gk = conv_measure(sol.g1, share, work.cone.v)
                total = total + np.asarray(gk.val(xs, ys), dtype=complex)
            want = np.asarray(sol.g_side.val(xs, ys), dtype=complex)
            assert np.max(np.abs(total - want)) <= 1e-9

    def test_per_rectangle_averages_match_shares(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        work = split_solve(CFG2, g)
        rng = np.random.default_rng(17)
        pts = rng.uniform(-1.5, 2.5, size=(6, 2))
        for i in range(CFG2.n):
            single = BlurConfig(rects=(CFG2.rects[i],), weights=(CFG2.weights[i],))
            for x, y in pts:
                got = blur(work.f, single, float(x), float(y))
                want = 0.0 + 0.0j
                for sol in (work.left, work.right):
                    share = rectangle_share_measures(CFG2, sol.side)[i]
                    gk = conv_measure(sol.g1, share, work.cone.v)
                    want += complex(np.asarray(gk.val(x, y)).item())
                assert abs(got - want) <= 1e-7

    def test_general_path_agrees_with_dedicated(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        f_ded = split_solve(CFG2, g).f
        f_gen = split_solve(CFG2, g, ReconstructOptions(force_general=True)).f
        rng = np.random.default_rng(19)
        xs = rng.uniform(-4.0, 4.0, size=50)
        ys = rng.uniform(-4.0, 4.0, size=50)
        diff = np.asarray(f_ded.val(xs, ys)) - np.asarray(f_gen.val(xs, ys))
        assert np.max(np.abs(diff)) <= 1e-9

    def test_linearity_in_the_data(self):
        ga = PolyBump(0.0, 0.0, 2.0, 2.0)
        gb = PolyBump(0.7, -0.3, 1.5, 1.8, 0.6)
        fa = split_solve(CFG2, ga).f
        fb = split_solve(CFG2, gb).f
        fs = split_solve(CFG2, add(ga, gb)).f
        rng = np.random.default_rng(23)
        xs = rng.uniform(-4.0, 4.0, size=30)
        ys = rng.uniform(-4.0, 4.0, size=30)
        diff = np.asarray(fs.val(xs, ys)) - (
            np.asarray(fa.val(xs, ys)) + np.asarray(fb.val(xs, ys))
        )
        assert np.max(np.abs(diff)) <= 1e-7

    def test_lead_atom_and_beta(self):
        work = split_solve(CFG2, PolyBump(0.0, 0.0, 2.0, 2.0))
        lead = work.left.g1.solve_info.lead
        assert (lead.x, lead.y) == (-1.0, -1.0)
        assert abs(lead.w - 1.0) <= 1e-12
        lead_r = work.right.g1.solve_info.lead
        assert (lead_r.x, lead_r.y) == (-0.5, -0.5)
        assert abs(lead_r.w - 2.0) <= 1e-12
        assert 0.0 < work.beta < np.inf
        assert work.cone.v.v1 > 0.0 and work.cone.v.v2 > 0.0


class TestReconstruct:
    def test_single_rect_bump(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        opts = ReconstructOptions(region=(-4.0, 4.0, -4.0, 4.0), tolerance=1e-8)
        res = reconstruct(CFG1, g, opts)
        assert res.residual_stats.max_abs <= 1e-8
        assert res.orientation == "Cond1"
        assert res.residual_stats.nx == res.residual_stats.ny == 21

    def test_zero_data_gives_zero_residual(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0, 0.0)
        res = reconstruct(CFG1, g, ReconstructOptions(nx=5, ny=5))
        assert res.residual_stats.max_abs == 0.0
        xs = np.linspace(-3.0, 3.0, 5)
        assert np.all(res.f.val(xs, xs) == 0.0)

    def test_blurred_data_round_trip(self):
        f_true = PolyBump(0.5, 0.5, 1.5, 1.5)
        g = BlurredFn(f_true, CFG2)
        res = reconstruct(CFG2, g, ReconstructOptions(nx=7, ny=7, tolerance=1e-6))
        assert res.residual_stats.max_abs <= 1e-10

    def test_descending_chain_certified_unmirrored(self):
        cfg = reflect_config_x(CFG2)
        f_true = PolyBump(-0.5, 0.5, 1.5, 1.5)
        g = BlurredFn(f_true, cfg)
        res = reconstruct(cfg, g, ReconstructOptions(nx=7, ny=7, tolerance=1e-6))
        assert res.orientation == "Cond2"
        assert res.residual_stats.max_abs <= 1e-10

    def test_complex_weights_round_trip(self):
        cfg = BlurConfig(rects=CFG2.rects, weights=(1.0, 0.5j))
        g = BlurredFn(PolyBump(0.5, 0.5, 1.5, 1.5), cfg)
        res = reconstruct(cfg, g, ReconstructOptions(nx=5, ny=5, tolerance=1e-8))
        assert res.residual_stats.max_abs <= 1e-10

    def test_default_region_used(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        res = reconstruct(CFG1, g, ReconstructOptions(nx=5, ny=5))
        assert res.residual_stats.region == default_region(CFG1)

    def test_atom_counts_reported(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        res = reconstruct(CFG1, g, ReconstructOptions(nx=5, ny=5))
        assert res.atom_counts["series_left"] >= 1
        assert res.atom_counts["series_right"] >= 1
        assert res.atom_counts["nu_terms_left"] == 1

    def test_non_staircase_rejected(self):
        square = Rect(-1.0, 1.0, -1.0, 1.0)
        cfg = BlurConfig(rects=(square, square), weights=(1.0, 1.0))
        with pytest.raises(StaircaseViolation):
            reconstruct(cfg, PolyBump(0.0, 0.0, 2.0, 2.0))

    def test_unattainable_tolerance_raises_with_result(self):
        g = PolyBump(0.0, 0.0, 2.0, 2.0)
        with pytest.raises(ResidualTooLarge) as info:
            reconstruct(CFG1, g, ReconstructOptions(nx=5, ny=5, tolerance=0.0))
        err = info.value
        assert err.tolerance == 0.0
        assert err.max_abs > 0.0
        assert err.result.residual_stats.max_abs == err.max_abs

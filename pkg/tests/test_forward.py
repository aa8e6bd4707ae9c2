"""Forward blur operator: exactness, consistency, and residual stats."""

from __future__ import annotations

import numpy as np
import pytest
from scipy.integrate import dblquad

from boxdeconv.forward import (
    BlurredFn,
    QuadratureRule,
    _blur_chan,
    blur,
    default_region,
    grid_axes,
    residual_grid,
)
from boxdeconv.geometry import BlurConfig, Direction, Rect
from boxdeconv.smoothfn import (
    PolyBump,
    PolyFn,
    add,
    constant,
    scale_fn,
    split_halfplane,
    translate_fn,
)

RNG = np.random.default_rng(20260818)

CFG_UNIT = BlurConfig((Rect(-1.0, 1.0, -1.0, 1.0),), (1.0,))
CFG_SHIFT = BlurConfig((Rect(0.0, 2.0, 0.0, 2.0),), (1.0,))
CFG_PAIR = BlurConfig(
    (Rect(-1.0, 1.0, -1.0, 1.0), Rect(0.5, 2.5, 0.5, 2.5)), (1.0, 0.5)
)


def blur_monomial(cfg: BlurConfig, m: int, n: int, x: float, y: float) -> complex:
    """Closed-form blur of x^m y^n: iterated power-rule integration."""
    total = 0.0
    for r, w in zip(cfg.rects, cfg.weights):
        ix = ((x - r.a) ** (m + 1) - (x - r.b) ** (m + 1)) / (m + 1)
        iy = ((y - r.c) ** (n + 1) - (y - r.d) ** (n + 1)) / (n + 1)
        total = total + complex(w) * ix * iy
    return total


def blur_adaptive(f, cfg: BlurConfig, x: float, y: float) -> complex:
    """Independent oracle: adaptive quadrature per rectangle."""
    total = 0.0
    for r, w in zip(cfg.rects, cfg.weights):
        val, _ = dblquad(
            lambda t, s: float(f.val(x - s, y - t)),
            r.a,
            r.b,
            r.c,
            r.d,
            epsabs=1e-12,
            epsrel=1e-12,
        )
        total = total + complex(w) * val
    return total


def monomial(m: int, n: int) -> PolyFn:
    c = np.zeros((m + 1, n + 1))
    c[m, n] = 1.0
    return PolyFn(c)


class TestQuadratureRule:
    def test_default_order(self):
        assert QuadratureRule().order == 8

    def test_rejects_order_below_two(self):
        with pytest.raises(ValueError):
            QuadratureRule(order=1)

    def test_gauss_weights_sum_to_two(self):
        _, w = QuadratureRule(order=5).gauss()
        assert abs(w.sum() - 2.0) < 1e-14


class TestBlurClosedForms:
    def test_constant_times_area_unit(self):
        for _ in range(5):
            x, y = RNG.uniform(-3, 3, 2)
            assert abs(blur(constant(1.0), CFG_UNIT, x, y) - 4.0) <= 1e-12

    def test_constant_times_area_weighted(self):
        cfg = BlurConfig((Rect(0.0, 1.0, 0.0, 3.0), Rect(2.0, 5.0, 4.0, 5.0)), (2.0, -0.5))
        expected = 2.0 * 3.0 - 0.5 * 3.0
        assert abs(blur(constant(1.0), cfg, 0.3, -0.7) - expected) <= 1e-12

    def test_xy_unit_square(self):
        f = monomial(1, 1)
        for _ in range(10):
            x, y = RNG.uniform(-3, 3, 2)
            got = blur(f, CFG_UNIT, x, y)
            assert abs(got - 4.0 * x * y) <= 1e-12 * max(1.0, abs(4.0 * x * y))

    def test_xy_shifted_square(self):
        f = monomial(1, 1)
        for _ in range(10):
            x, y = RNG.uniform(-3, 3, 2)
            want = 4.0 * (x - 1.0) * (y - 1.0)
            assert abs(blur(f, CFG_SHIFT, x, y) - want) <= 1e-12 * max(1.0, abs(want))

    def test_monomial_exactness_low_order(self):
        rule = QuadratureRule(order=4)
        for m, n in ((2, 3), (0, 5), (4, 1)):
            f = monomial(m, n)
            for _ in range(5):
                x, y = RNG.uniform(-2, 2, 2)
                want = blur_monomial(CFG_PAIR, m, n, x, y)
                got = blur(f, CFG_PAIR, x, y, rule)
                assert abs(got - want) <= 1e-11 * max(1.0, abs(want))

    def test_minimum_order_exact_for_xy(self):
        got = blur(monomial(1, 1), CFG_UNIT, 1.3, -0.4, QuadratureRule(order=2))
        assert abs(got - 4.0 * 1.3 * -0.4) <= 1e-12 * max(1.0, abs(4.0 * 1.3 * 0.4))

    def test_complex_weights(self):
        cfg = BlurConfig((Rect(-1.0, 1.0, -1.0, 1.0), Rect(0.0, 1.0, 0.0, 1.0)), (1.0, 0.5j))
        got = blur(constant(1.0), cfg, 0.0, 0.0)
        assert abs(got - (4.0 + 0.5j)) <= 1e-12


class TestBlurProperties:
    def test_linearity(self):
        f1 = PolyBump(0.0, 0.0, 2.0, 2.0)
        f2 = monomial(1, 1)
        combo = add(scale_fn(f1, 2.0), f2)
        for _ in range(5):
            x, y = RNG.uniform(-2, 2, 2)
            lhs = blur(combo, CFG_PAIR, x, y)
            rhs = 2.0 * blur(f1, CFG_PAIR, x, y) + blur(f2, CFG_PAIR, x, y)
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))

    def test_translation_equivariance(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        shifted = translate_fn(f, (0.7, -0.3))
        for _ in range(5):
            x, y = RNG.uniform(-2, 2, 2)
            lhs = blur(shifted, CFG_UNIT, x, y)
            rhs = blur(f, CFG_UNIT, x - 0.7, y + 0.3)
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))

    def test_refinement_consistency_on_bump(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        lo = QuadratureRule(order=8)
        hi = QuadratureRule(order=16)
        for x, y in ((1.5, 0.2), (2.6, 2.6), (0.0, 0.0), (-1.9, 1.1)):
            a = blur(f, CFG_PAIR, x, y, lo)
            b = blur(f, CFG_PAIR, x, y, hi)
            assert abs(a - b) <= 1e-8

    def test_bump_against_adaptive_quadrature(self):
        f = PolyBump(0.3, -0.2, 2.0, 1.5)
        for x, y in ((1.5, 0.2), (-0.4, 1.0)):
            got = blur(f, CFG_UNIT, x, y)
            want = blur_adaptive(f, CFG_UNIT, x, y)
            assert abs(got - want) <= 1e-9

    def test_slanted_kinks_against_adaptive_quadrature(self):
        bump = PolyBump(0.0, 0.0, 2.0, 2.0)
        _, right = split_halfplane(bump, Direction(1.0, 1.0), 0.5)
        for x, y in ((0.4, 0.6), (1.2, -0.3)):
            got = blur(right, CFG_UNIT, x, y)
            want = blur_adaptive(right, CFG_UNIT, x, y)
            assert abs(got - want) <= 1e-9

    def test_far_outside_support_is_zero(self):
        f = PolyBump(0.0, 0.0, 1.0, 1.0)
        assert blur(f, CFG_UNIT, 50.0, 50.0) == 0.0


class TestBlurredFn:
    def test_exact_path_matches_pointwise_quadrature(self):
        f = PolyBump(0.2, -0.1, 2.0, 2.0)
        bf = BlurredFn(f, CFG_PAIR)
        assert bf._exact
        rule = QuadratureRule()
        for chan in ("val", "dx", "dy", "dxy"):
            for _ in range(4):
                x, y = RNG.uniform(-2, 4, 2)
                got = float(getattr(bf, chan)(x, y))
                want = _blur_chan(f, CFG_PAIR, x, y, rule, chan)
                assert abs(got - want) <= 1e-12 * max(1.0, abs(want))

    def test_sum_of_bumps_exact(self):
        f = add(PolyBump(0.0, 0.0, 2.0, 2.0), PolyBump(1.0, 1.0, 1.0, 1.0))
        bf = BlurredFn(f, CFG_UNIT)
        assert bf._exact
        for _ in range(4):
            x, y = RNG.uniform(-2, 3, 2)
            want = blur(f, CFG_UNIT, x, y)
            assert abs(complex(bf.val(x, y)) - want) <= 1e-12 * max(1.0, abs(want))

    def test_polynomial_exact(self):
        f = monomial(2, 1)
        bf = BlurredFn(f, CFG_PAIR)
        assert bf._exact
        for _ in range(4):
            x, y = RNG.uniform(-2, 2, 2)
            want = blur_monomial(CFG_PAIR, 2, 1, x, y)
            assert abs(complex(bf.val(x, y)) - want) <= 1e-11 * max(1.0, abs(want))

    def test_derivative_channels_match_finite_differences(self):
        bf = BlurredFn(PolyBump(0.0, 0.0, 2.0, 2.0), CFG_UNIT)
        h = 1e-5
        for _ in range(4):
            x, y = RNG.uniform(-1.5, 1.5, 2)
            fd_x = (float(bf.val(x + h, y)) - float(bf.val(x - h, y))) / (2 * h)
            fd_y = (float(bf.val(x, y + h)) - float(bf.val(x, y - h))) / (2 * h)
            assert abs(float(bf.dx(x, y)) - fd_x) <= 1e-7 * max(1.0, abs(fd_x))
            assert abs(float(bf.dy(x, y)) - fd_y) <= 1e-7 * max(1.0, abs(fd_y))

    def test_support_box_is_inflated_hull(self):
        bf = BlurredFn(PolyBump(0.0, 0.0, 2.0, 2.0), CFG_PAIR)
        assert bf.support_box == (-3.0, 4.5, -3.0, 4.5)

    def test_vanishes_outside_support(self):
        bf = BlurredFn(PolyBump(0.0, 0.0, 2.0, 2.0), CFG_PAIR)
        x0, x1, y0, y1 = bf.support_box
        assert float(bf.val(x0 - 0.1, 0.0)) == 0.0
        assert float(bf.val(x1 + 0.1, 0.0)) == 0.0
        assert float(bf.val(0.0, y1 + 0.1)) == 0.0

    def test_static_kinks_cover_piece_boundaries(self):
        bf = BlurredFn(PolyBump(0.0, 0.0, 2.0, 2.0), CFG_UNIT)
        k = bf.kinks_in_box(bf.support_box)
        assert set(k.xs) == {-3.0, -1.0, 1.0, 3.0}
        assert set(k.ys) == {-3.0, -1.0, 1.0, 3.0}

    def test_fallback_path_for_exotic_inputs(self):
        bump = PolyBump(0.0, 0.0, 2.0, 2.0)
        _, right = split_halfplane(bump, Direction(1.0, 1.0), 0.5)
        bf = BlurredFn(right, CFG_UNIT, QuadratureRule())
        assert not bf._exact
        x, y = 0.4, 0.6
        want = blur(right, CFG_UNIT, x, y)
        assert abs(complex(bf.val(x, y)) - want) <= 1e-12

    def test_complex_weights_give_complex_values(self):
        bump = PolyBump(0.0, 0.0, 2.0, 2.0)
        cfg_c = BlurConfig((Rect(-1.0, 1.0, -1.0, 1.0),), (1.0 + 1.0j,))
        bf_c = BlurredFn(bump, cfg_c)
        bf_r = BlurredFn(bump, CFG_UNIT)
        vc = bf_c.val(0.3, -0.4)
        assert np.iscomplexobj(vc)
        want = (1.0 + 1.0j) * complex(bf_r.val(0.3, -0.4))
        assert abs(complex(vc) - want) <= 1e-12


class TestResidualGrid:
    def test_exact_candidate_has_tiny_residual(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        stats = residual_grid(f, g, CFG_UNIT, (-4.0, 4.0, -4.0, 4.0), 9, 9)
        assert stats.max_abs <= 1e-12

    def test_zero_candidate_residual_is_grid_max(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        stats = residual_grid(constant(0.0), g, CFG_UNIT, (-4.0, 4.0, -4.0, 4.0), 9, 9)
        gx, gy = np.meshgrid(stats.xs, stats.ys)
        assert abs(stats.max_abs - float(np.max(np.abs(g.val(gx, gy))))) <= 1e-13

    def test_constant_shift_moves_residual_uniformly(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        eps = 1e-3
        stats = residual_grid(
            add(f, constant(eps)), g, CFG_UNIT, (-4.0, 4.0, -4.0, 4.0), 5, 5
        )
        shift = eps * 4.0
        assert np.all(np.abs(stats.residuals - shift) <= 1e-12)

    def test_max_abs_at_least_rms(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        stats = residual_grid(constant(0.0), g, CFG_UNIT, (-4.0, 4.0, -4.0, 4.0), 7, 7)
        assert stats.max_abs >= stats.rms >= 0.0

    def test_rejects_degenerate_grid(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        with pytest.raises(ValueError):
            residual_grid(f, g, CFG_UNIT, (-4.0, 4.0, -4.0, 4.0), 1, 9)

    def test_rows_are_row_major(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_UNIT)
        stats = residual_grid(f, g, CFG_UNIT, (0.0, 1.0, 10.0, 11.0), 3, 2)
        rows = stats.rows()
        assert rows.shape == (6, 4)
        assert np.allclose(rows[:3, 1], 10.0)
        assert np.allclose(rows[:3, 0], [0.0, 0.5, 1.0])
        assert np.allclose(rows[3:, 1], 11.0)

    def test_threads_give_identical_values(self):
        f = PolyBump(0.0, 0.0, 2.0, 2.0)
        g = BlurredFn(f, CFG_PAIR)
        region = default_region(CFG_PAIR)
        a = residual_grid(f, g, CFG_PAIR, region, 5, 5, threads=1)
        b = residual_grid(f, g, CFG_PAIR, region, 5, 5, threads=4)
        assert np.array_equal(a.residuals, b.residuals)


class TestRegionHelpers:
    def test_default_region_inflates_hull(self):
        assert default_region(CFG_UNIT) == (-3.0, 3.0, -3.0, 3.0)
        assert default_region(CFG_PAIR) == (-3.0, 4.5, -3.0, 4.5)

    def test_grid_axes_closed_endpoints(self):
        xs, ys = grid_axes((-1.0, 1.0, 0.0, 4.0), 5, 3)
        assert xs[0] == -1.0 and xs[-1] == 1.0
        assert ys[0] == 0.0 and ys[-1] == 4.0

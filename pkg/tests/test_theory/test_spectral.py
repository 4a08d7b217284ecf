"""Tests for the phase-transition map and the companion Stieltjes transform."""

import math

import numpy as np
import pytest

from src.errors import DomainError, InvalidParameterError, RootFindingError, SingularityError
from src.population.model import BulkMeasure
from src.theory.spectral import (
    Regime,
    StieltjesContext,
    alpha_from_lambda,
    branches,
    fixed_point_residual,
    m_underline_2,
    mp_m,
    mp_m_underline,
    phi,
    phi_n,
    phi_prime,
    rho,
    support_edges,
)

SQRT_HALF = math.sqrt(0.5)


def _random_bulk(rng: np.random.Generator) -> BulkMeasure:
    k = int(rng.integers(1, 5))
    t = np.sort(rng.uniform(0.5, 3.0, size=k))
    w = rng.dirichlet(np.ones(k))
    w[-1] = 1.0 - w[:-1].sum()
    return BulkMeasure(tuple((float(a), float(b)) for a, b in zip(t, w)))


class TestPhi:
    @pytest.mark.parametrize("alpha, expected", [
        (4.0, 4.6667), (3.0, 3.75), (0.2, 0.075), (0.1, 0.04444),
    ])
    def test_reference_values(self, unit_ctx, alpha, expected):
        assert phi(alpha, unit_ctx) == pytest.approx(expected, abs=1e-3)

    def test_zero_ratio_is_identity(self, unit_bulk):
        ctx = StieltjesContext(c=0.0, bulk=unit_bulk)
        for alpha in (0.3, 2.0, 17.0):
            assert phi(alpha, ctx) == alpha

    def test_on_atom(self, unit_ctx):
        with pytest.raises(SingularityError):
            phi(1.0, unit_ctx)

    def test_non_positive_alpha(self, unit_ctx):
        with pytest.raises(InvalidParameterError):
            phi(0.0, unit_ctx)

    def test_negative_ratio_rejected(self, unit_bulk):
        with pytest.raises(InvalidParameterError):
            StieltjesContext(c=-0.1, bulk=unit_bulk)

    def test_increasing_above_threshold(self, unit_ctx):
        grid = np.linspace(1.0 + SQRT_HALF + 1e-3, 20.0, 200)
        values = [phi(a, unit_ctx) for a in grid]
        assert all(b > a for a, b in zip(values, values[1:]))


class TestPhiN:
    def test_finite_sample_values(self, unit_bulk):
        assert phi_n(0.2, 0.5, unit_bulk) == pytest.approx(0.075, abs=1e-12)
        assert phi_n(4.0, 0.2, unit_bulk) == pytest.approx(4.0 * (1 + 0.2 / 3), abs=1e-12)

    def test_empirical_ones_match_point_mass(self, unit_bulk):
        ones = BulkMeasure.from_values(np.ones(494))
        assert phi_n(4.0, 0.5, ones) == pytest.approx(phi_n(4.0, 0.5, unit_bulk), abs=1e-12)

    def test_negative_ratio(self, unit_bulk):
        with pytest.raises(InvalidParameterError):
            phi_n(4.0, -1.0, unit_bulk)


class TestPhiPrime:
    def test_hand_value(self, unit_ctx):
        assert phi_prime(4.0, unit_ctx) == pytest.approx(1 - 0.5 / 9, rel=1e-12)

    def test_zero_ratio(self, unit_bulk):
        assert phi_prime(2.5, StieltjesContext(c=0.0, bulk=unit_bulk)) == 1.0

    def test_vanishes_at_threshold(self, unit_ctx):
        assert abs(phi_prime(1.0 + SQRT_HALF, unit_ctx)) < 1e-9

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            bulk = _random_bulk(rng)
            ctx = StieltjesContext(c=float(rng.uniform(0.05, 0.9)), bulk=bulk)
            alpha = bulk.highest * float(rng.uniform(3.0, 6.0))
            h = 1e-6 * alpha
            fd = (phi(alpha + h, ctx) - phi(alpha - h, ctx)) / (2 * h)
            assert phi_prime(alpha, ctx) == pytest.approx(fd, rel=1e-5)


class TestRho:
    def test_distant(self, unit_ctx):
        value = rho(4.0, unit_ctx)
        assert value.regime == Regime.DISTANT
        assert value.rho == value.phi == pytest.approx(4.6667, abs=1e-4)

    def test_right_threshold(self, unit_ctx):
        value = rho(1.5, unit_ctx)
        assert value.regime == Regime.RIGHT_THRESHOLD
        assert value.rho == pytest.approx((1 + SQRT_HALF) ** 2, abs=1e-8)
        assert value.critical == pytest.approx(1 + SQRT_HALF, abs=1e-8)

    def test_left_threshold(self, unit_ctx):
        value = rho(0.5, unit_ctx)
        assert value.regime == Regime.LEFT_THRESHOLD
        assert value.rho == pytest.approx((1 - SQRT_HALF) ** 2, abs=1e-8)

    def test_regime_flag_tracks_slope(self, unit_ctx):
        for alpha in (0.05, 0.2, 0.5, 1.2, 1.5, 2.0, 4.0):
            value = rho(alpha, unit_ctx)
            assert (value.regime == Regime.DISTANT) == (value.phi_prime > 0)

    def test_absorbed_between_close_atoms(self):
        ctx = StieltjesContext(c=0.5, bulk=BulkMeasure(((1.0, 0.5), (1.1, 0.5))))
        with pytest.raises(RootFindingError) as info:
            rho(1.05, ctx)
        assert info.value.bracket == (1.0, 1.1)


class TestSupportEdges:
    def test_point_mass_closed_form(self, unit_ctx):
        edges = support_edges(unit_ctx)
        assert edges[0] == pytest.approx((0.0, (1 - SQRT_HALF) ** 2))
        assert edges[1][0] == pytest.approx((1 + SQRT_HALF) ** 2)
        assert edges[1][1] == math.inf

    def test_no_left_interval_above_one(self, unit_bulk):
        edges = support_edges(StieltjesContext(c=2.0, bulk=unit_bulk))
        assert len(edges) == 1

    def test_two_atoms_open_a_gap(self):
        ctx = StieltjesContext(c=0.05, bulk=BulkMeasure(((1.0, 0.5), (10.0, 0.5))))
        layout = branches(ctx)
        assert len(layout) == 3
        assert 1.0 < layout[1].alpha_lo < layout[1].alpha_hi < 10.0
        edges = support_edges(ctx)
        assert all(lo < hi for lo, hi in edges)
        assert all(a[1] < b[0] for a, b in zip(edges, edges[1:]))

    def test_branch_matches_closed_form(self, unit_ctx):
        top = branches(unit_ctx)[-1]
        assert top.alpha_lo == pytest.approx(1 + SQRT_HALF, abs=1e-9)
        assert top.lam_lo == pytest.approx((1 + SQRT_HALF) ** 2, abs=1e-9)


class TestCompanionTransform:
    def test_inverse_identity_above(self, unit_ctx):
        assert mp_m_underline(phi(4.0, unit_ctx), unit_ctx) == pytest.approx(-0.25, abs=1e-12)

    def test_inverse_identity_below(self, unit_ctx):
        assert mp_m_underline(phi(0.1, unit_ctx), unit_ctx) == pytest.approx(-10.0, rel=1e-10)

    def test_decay_at_infinity(self, unit_ctx):
        assert abs(mp_m_underline(1e6, unit_ctx) + 1e-6) < 1e-9

    def test_inside_support(self, unit_ctx):
        with pytest.raises(DomainError):
            mp_m_underline(1.0, unit_ctx)

    def test_at_edge(self, unit_ctx):
        with pytest.raises(DomainError):
            mp_m_underline((1 + SQRT_HALF) ** 2, unit_ctx)

    def test_non_positive_lambda(self, unit_ctx):
        with pytest.raises(DomainError):
            mp_m_underline(-1.0, unit_ctx)

    def test_zero_ratio(self, unit_bulk):
        ctx = StieltjesContext(c=0.0, bulk=unit_bulk)
        assert mp_m_underline(2.0, ctx) == -0.5

    def test_ordinary_transform(self, unit_ctx):
        lam = phi(4.0, unit_ctx)
        m = mp_m(lam, unit_ctx)
        assert -(1 - 0.5) / lam + 0.5 * m == pytest.approx(-0.25, abs=1e-12)

    @pytest.mark.parametrize("c", [0.1, 0.5, 0.9])
    @pytest.mark.parametrize("alpha", [0.05, 0.1, 0.2, 3.0, 4.0, 10.0])
    def test_inversion_grid(self, c, alpha, unit_bulk):
        ctx = StieltjesContext(c=c, bulk=unit_bulk)
        if phi_prime(alpha, ctx) <= 0:
            pytest.skip("not a distant spike at this ratio")
        assert abs(1 + alpha * mp_m_underline(phi(alpha, ctx), ctx)) <= 1e-9

    def test_fixed_point_residual(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            bulk = _random_bulk(rng)
            ctx = StieltjesContext(c=float(rng.uniform(0.05, 0.9)), bulk=bulk)
            lam = phi(bulk.highest * float(rng.uniform(3.0, 6.0)), ctx)
            m = mp_m_underline(lam, ctx)
            assert abs(fixed_point_residual(lam, m, ctx)) <= 1e-10 * max(1.0, lam)


class TestDerivative:
    def test_closed_form_at_three(self, unit_ctx):
        assert m_underline_2(phi(3.0, unit_ctx), unit_ctx) == pytest.approx(0.12698, abs=1e-5)

    def test_closed_form_at_point_two(self, unit_ctx):
        assert m_underline_2(phi(0.2, unit_ctx), unit_ctx) == pytest.approx(114.29, abs=1e-2)

    def test_zero_ratio(self, unit_bulk):
        ctx = StieltjesContext(c=0.0, bulk=unit_bulk)
        lam, h = 2.0, 1e-6
        fd = (mp_m_underline(lam + h, ctx) - mp_m_underline(lam - h, ctx)) / (2 * h)
        assert m_underline_2(lam, ctx) == pytest.approx(fd, rel=1e-6)
        assert m_underline_2(lam, ctx) == 0.25

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            bulk = _random_bulk(rng)
            ctx = StieltjesContext(c=float(rng.uniform(0.05, 0.9)), bulk=bulk)
            lam = phi(bulk.highest * float(rng.uniform(3.0, 6.0)), ctx)
            h = 1e-6 * lam
            fd = (mp_m_underline(lam + h, ctx) - mp_m_underline(lam - h, ctx)) / (2 * h)
            assert m_underline_2(lam, ctx) == pytest.approx(fd, rel=1e-5)


class TestAlphaFromLambda:
    def test_reference_pairs(self, unit_ctx):
        assert alpha_from_lambda(phi(4.0, unit_ctx), unit_ctx) == pytest.approx(4.0, rel=1e-10)
        assert alpha_from_lambda(0.075, unit_ctx) == pytest.approx(0.2, rel=1e-10)

    def test_zero_ratio_identity(self, unit_bulk):
        ctx = StieltjesContext(c=0.0, bulk=unit_bulk)
        assert alpha_from_lambda(3.3, ctx) == pytest.approx(3.3)

    def test_round_trip_random(self, unit_ctx):
        rng = np.random.default_rng(5)
        margin = 0.05
        low = rng.uniform(0.01, 1 - SQRT_HALF - margin, size=100)
        high = rng.uniform(1 + SQRT_HALF + margin, 20.0, size=100)
        for alpha in np.concatenate([low, high]):
            back = alpha_from_lambda(phi(float(alpha), unit_ctx), unit_ctx)
            assert abs(back - alpha) <= 1e-8 * alpha

    def test_round_trip_in_gap(self):
        ctx = StieltjesContext(c=0.05, bulk=BulkMeasure(((1.0, 0.5), (10.0, 0.5))))
        assert phi_prime(3.0, ctx) > 0
        assert alpha_from_lambda(phi(3.0, ctx), ctx) == pytest.approx(3.0, rel=1e-9)

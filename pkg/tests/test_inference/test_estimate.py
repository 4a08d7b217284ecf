"""Tests for the plug-in spike detector."""

import numpy as np
import pytest

from src.errors import EstimationDegenerateError, InvalidParameterError
from src.inference.estimate import (
    Z_LOWER,
    Z_UPPER,
    BulkFit,
    DetectionConfig,
    RankTest,
    SpikeReport,
    acceptance_interval,
    alpha_hat,
    detect_from_data,
    detect_spikes,
    empirical_m,
    empirical_m2,
    fit_bulk,
    group_detections,
    interval,
    plugin_sigma2,
    rank_test,
    underline2_from_m2,
    underline_from_m,
)
from src.population.model import BulkMeasure, build_custom
from src.population.sampler import Distribution, draw_matrix, eigvals_desc, sample_cov
from src.theory.clt import CltRegime
from src.theory.spectral import StieltjesContext, phi


@pytest.fixture(scope="module")
def strong_spike_eigs() -> np.ndarray:
    """One spike alpha = 10 over a unit bulk, p = 100, n = 2000."""
    model = build_custom(100, [(1.0, 99)], [(10.0, 1)])
    X = draw_matrix(Distribution(), 100, 2000, seed=31)
    return eigvals_desc(sample_cov(model, X))


class TestPluginSums:
    def test_reference_example(self):
        config = DetectionConfig(c=0.5)
        assert empirical_m(4.0, np.array([4.0, 1.0, 1.0, 1.0]), config) == pytest.approx(-0.25)

    def test_threshold_is_inclusive(self):
        config = DetectionConfig(c=0.5, ratio_threshold=0.2)
        # |4 - 5| / 5 = 0.2 stays in
        assert empirical_m(5.0, np.array([5.0, 4.0]), config) == pytest.approx(-0.5)

    def test_close_neighbours_dropped(self):
        config = DetectionConfig(c=0.5, ratio_threshold=0.2)
        eigs = np.array([5.0, 4.5, 1.0])
        assert empirical_m(5.0, eigs, config) == pytest.approx((1 / (1.0 - 5.0)) / 3)

    def test_nothing_kept(self):
        with pytest.raises(EstimationDegenerateError):
            empirical_m(1.0, np.array([1.0, 1.0, 1.0]), DetectionConfig(c=0.5))

    def test_second_moment(self):
        config = DetectionConfig(c=0.5)
        eigs = np.array([4.0, 1.0, 1.0, 1.0])
        assert empirical_m2(4.0, eigs, config) == pytest.approx(3 / 9 / 4)
        assert empirical_m2(2.0, eigs, config, filtered=False) == pytest.approx((0.25 + 3.0) / 4)

    def test_companion_conversion(self):
        assert underline_from_m(-0.25, 4.0, 0.5) == pytest.approx(-0.25)
        assert underline2_from_m2(0.1, 2.0, 0.5) == pytest.approx(0.125 + 0.05)

    def test_alpha_hat(self):
        config = DetectionConfig(c=0.5)
        # companion transform -0.25 inverts to alpha 4
        assert alpha_hat(4.0, np.array([4.0, 1.0, 1.0, 1.0]), config) == pytest.approx(4.0)


@pytest.fixture(scope="module")
def null_eigs() -> np.ndarray:
    """Unit bulk with no spikes, p = 200, n = 1000."""
    model = build_custom(200, [(1.0, 200)], [])
    X = draw_matrix(Distribution(), 200, 1000, seed=47)
    return eigvals_desc(sample_cov(model, X))


class TestBulkFit:
    def test_band_of_a_known_point_bulk(self):
        fit = fit_bulk(np.full(200, 1.0), DetectionConfig(c=0.2, bulk=BulkMeasure.point(1.0)))
        ((lo, hi),) = fit.bands
        # (1 -+ sqrt(0.2))^2 widened by 2.02 Tracy-Widom scales at n = 1000
        assert lo == pytest.approx(0.30557 - 0.01199, abs=1e-4)
        assert hi == pytest.approx(2.09443 + 0.04324, abs=1e-4)
        assert fit.size == 200

    def test_level_of_a_pure_bulk(self, null_eigs):
        fit = fit_bulk(null_eigs, DetectionConfig(c=0.2))
        assert fit.level == pytest.approx(1.0, abs=0.02)
        assert fit.size >= 196

    def test_level_scales_with_the_spectrum(self, null_eigs):
        config = DetectionConfig(c=0.2)
        assert fit_bulk(2.5 * null_eigs, config).level == pytest.approx(2.5 * fit_bulk(null_eigs, config).level)

    def test_spikes_left_out_of_the_level(self, strong_spike_eigs):
        fit = fit_bulk(strong_spike_eigs, DetectionConfig(c=0.05))
        assert not fit.contains(strong_spike_eigs[0])
        assert fit.level == pytest.approx(1.0, abs=0.03)

    def test_zero_eigenvalues_inside_when_p_exceeds_n(self):
        X = draw_matrix(Distribution(), 100, 50, seed=5)
        eigs = eigvals_desc(X @ X.T / 50)
        fit = fit_bulk(eigs, DetectionConfig(c=2.0))
        assert fit.bands[0][0] == 0.0
        assert fit.mask(eigs[50:]).all()
        assert fit.contains(-1e-15)

    def test_configured_bulk_is_used_as_given(self, null_eigs):
        bulk = BulkMeasure.point(2.0)
        assert fit_bulk(null_eigs, DetectionConfig(c=0.2, bulk=bulk)).measure == bulk

    def test_separated_atoms_give_two_bands(self):
        bulk = BulkMeasure(((1.0, 0.5), (10.0, 0.5)))
        fit = fit_bulk(np.array([10.0, 1.0]), DetectionConfig(c=0.01, bulk=bulk))
        assert len(fit.bands) == 2
        assert fit.bands[0][1] < fit.bands[1][0]
        assert not fit.contains(4.0)

    def test_empty_spectrum(self):
        with pytest.raises(InvalidParameterError):
            fit_bulk(np.array([]), DetectionConfig(c=0.5))

    def test_mask_matches_contains(self):
        fit = BulkFit(BulkMeasure.point(1.0), ((0.5, 1.5),))
        values = np.array([0.4, 0.5, 1.0, 1.5, 1.6])
        assert fit.mask(values).tolist() == [fit.contains(v) for v in values]
        assert fit.mask(values).tolist() == [False, True, True, True, False]


class TestPluginSigma2:
    def test_eigenvalue_at_phi_hat_gives_zero(self):
        eigs = np.array([4.5, 1.2, 1.0, 0.8])
        config = DetectionConfig(c=0.5)
        assert plugin_sigma2(4.0, 4.5, eigs, config, BulkMeasure.point(1.0)) == 0.0

    def test_filtered_variant_stays_finite(self):
        eigs = np.array([4.5, 1.2, 1.0, 0.8])
        config = DetectionConfig(c=0.5, filter_plugin_sums=True)
        assert plugin_sigma2(4.0, 4.5, eigs, config, BulkMeasure.point(1.0)) > 0

    def test_default_sums_every_eigenvalue(self):
        assert not DetectionConfig(c=0.5).filter_plugin_sums


class TestDetectionConfig:
    def test_quantiles(self):
        assert Z_LOWER == pytest.approx(-1.6449, abs=1e-4)
        assert Z_UPPER == pytest.approx(1.6449, abs=1e-4)

    @pytest.mark.parametrize("c", [0.0, -1.0, float("inf")])
    def test_bad_ratio(self, c):
        with pytest.raises(InvalidParameterError):
            DetectionConfig(c=c)

    @pytest.mark.parametrize("thr", [0.0, 1.0])
    def test_bad_threshold(self, thr):
        with pytest.raises(InvalidParameterError):
            DetectionConfig(c=0.5, ratio_threshold=thr)

    def test_unusual_threshold_warns(self, caplog):
        DetectionConfig(c=0.5, ratio_threshold=0.5)
        assert "outside the usual range" in caplog.text

    def test_diagonal_needs_fourth_moment(self):
        with pytest.raises(InvalidParameterError):
            DetectionConfig(c=0.5, regime=CltRegime.DIAGONAL)

    def test_quantile_order(self):
        with pytest.raises(InvalidParameterError):
            DetectionConfig(c=0.5, lower_q=1.0, upper_q=2.0)


class TestAcceptanceInterval:
    def test_zero_sigma_collapses(self):
        assert acceptance_interval(3.0, 0.0, 400, DetectionConfig(c=0.5)) == (3.0, 3.0)

    def test_width(self):
        lo, hi = acceptance_interval(2.0, 1.0, 100, DetectionConfig(c=0.5))
        assert lo == pytest.approx(2.0 * (1 - 0.16449), abs=1e-4)
        assert hi == pytest.approx(2.0 * (1 + 0.16449), abs=1e-4)

    def test_undetectable_raises(self):
        with pytest.raises(EstimationDegenerateError):
            interval(1.0, np.array([1.0, 1.0, 1.0]), DetectionConfig(c=0.5))


class TestRankTest:
    def test_strong_spike_accepted(self, strong_spike_eigs):
        result = rank_test(1, strong_spike_eigs, DetectionConfig(c=0.05))
        assert result.detectable
        assert result.accepted
        assert result.alpha_hat == pytest.approx(10.0, abs=1.0)
        assert result.lower < result.phi_hat < result.upper

    def test_interval_agrees_with_rank_test(self, strong_spike_eigs):
        config = DetectionConfig(c=0.05)
        result = rank_test(1, strong_spike_eigs, config)
        assert interval(strong_spike_eigs[0], strong_spike_eigs, config) == pytest.approx(
            (result.lower, result.upper)
        )

    def test_scale_equivariance(self, strong_spike_eigs):
        config = DetectionConfig(c=0.05)
        base = rank_test(1, strong_spike_eigs, config)
        scaled = rank_test(1, 3.0 * strong_spike_eigs, config)
        assert scaled.alpha_hat == pytest.approx(3.0 * base.alpha_hat, rel=1e-9)
        assert scaled.phi_hat == pytest.approx(3.0 * base.phi_hat, rel=1e-9)
        assert scaled.sigma2 == pytest.approx(base.sigma2, rel=1e-9)
        assert scaled.accepted == base.accepted

    def test_filtered_sums_variant(self, strong_spike_eigs):
        filtered = rank_test(1, strong_spike_eigs, DetectionConfig(c=0.05, filter_plugin_sums=True))
        result = rank_test(1, strong_spike_eigs, DetectionConfig(c=0.05))
        assert filtered.detectable
        assert result.detectable
        assert result.alpha_hat == filtered.alpha_hat
        assert result.sigma2 != filtered.sigma2

    def test_diagonal_regime_uses_fourth_moment(self, strong_spike_eigs):
        deloc = rank_test(1, strong_spike_eigs, DetectionConfig(c=0.05))
        diag = rank_test(
            1, strong_spike_eigs,
            DetectionConfig(c=0.05, regime=CltRegime.DIAGONAL, fourth_moment=9.0),
        )
        assert diag.sigma2 > deloc.sigma2

    def test_edge_eigenvalue_inside_the_fitted_bulk(self):
        eigs = np.array([4.0, 2.1, 1.0, 0.5])
        result = rank_test(2, eigs, DetectionConfig(c=0.2, bulk=BulkMeasure.point(1.0)))
        assert not result.detectable
        assert "inside the fitted bulk" in result.note

    def test_undetectable_rank_is_reported(self):
        result = rank_test(2, np.array([2.0, 1.0, 1.0, 1.0]), DetectionConfig(c=0.5))
        assert not result.detectable
        assert not result.accepted
        assert result.alpha_hat is None


class TestDetectSpikes:
    def test_finds_strong_spike(self, strong_spike_eigs):
        report = detect_spikes(strong_spike_eigs, DetectionConfig(c=0.05))
        assert 1 in report.locations
        assert report.m_hat == len(report.detections)
        assert len(report.intervals_all) == 100

    def test_deterministic(self, strong_spike_eigs):
        config = DetectionConfig(c=0.05)
        assert detect_spikes(strong_spike_eigs, config) == detect_spikes(strong_spike_eigs, config)

    def test_ascending_input_rejected(self):
        with pytest.raises(InvalidParameterError):
            detect_spikes(np.array([1.0, 2.0, 3.0]), DetectionConfig(c=0.5))

    def test_empty_input_rejected(self):
        with pytest.raises(InvalidParameterError):
            detect_spikes(np.array([]), DetectionConfig(c=0.5))

    def test_from_data_uses_shape_ratio(self):
        model = build_custom(100, [(1.0, 99)], [(10.0, 1)])
        Y = model.root @ draw_matrix(Distribution(), 100, 2000, seed=31)
        report = detect_from_data(Y, DetectionConfig(c=0.9))
        expected = detect_spikes(eigvals_desc(Y @ Y.T / 2000), DetectionConfig(c=0.05))
        assert report.locations == expected.locations

    def test_planted_limits_are_detected(self):
        # Case I spikes placed exactly at phi(alpha); c = 0.01 so p = 7 means n = 700
        ctx = StieltjesContext(c=0.01, bulk=BulkMeasure.point(1.0))
        eigs = np.array([phi(4.0, ctx), phi(3.0, ctx), phi(3.0, ctx), 1.0,
                         phi(0.2, ctx), phi(0.2, ctx), phi(0.1, ctx)])
        report = detect_spikes(eigs, DetectionConfig(c=0.01, bulk=BulkMeasure.point(1.0)))
        assert report.locations == (1, 2, 3, 5, 6, 7)
        assert not report.intervals_all[3].detectable
        groups = group_detections(report)
        assert [g.ranks for g in groups] == [(1, 2, 3), (5, 6, 7)]
        alphas = [d.alpha_hat for d in report.detections]
        assert alphas == pytest.approx([4.0, 3.0, 3.0, 0.2, 0.2, 0.1], rel=0.02)

    def test_pure_bulk_gives_few_detections(self, null_eigs):
        report = detect_spikes(null_eigs, DetectionConfig(c=0.2))
        assert report.m_hat <= 20
        assert report.bulk_fit is not None
        assert report.bulk_fit.size >= 196


class TestGroupDetections:
    def test_runs_of_adjacent_ranks(self):
        dets = tuple(RankTest(rank=r, l=1.0, alpha_hat=a, accepted=True)
                     for r, a in [(1, 4.0), (2, 3.0), (3, 3.2), (7, 0.2)])
        groups = group_detections(SpikeReport(m_hat=4, detections=dets))
        assert [g.ranks for g in groups] == [(1, 2, 3), (7,)]
        assert groups[0].multiplicity == 3
        assert groups[0].mean_alpha_hat == pytest.approx((4.0 + 3.0 + 3.2) / 3)
        assert groups[1].mean_alpha_hat == 0.2

    def test_empty(self):
        assert group_detections(SpikeReport(m_hat=0, detections=())) == []

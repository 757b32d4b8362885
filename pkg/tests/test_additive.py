from dataclasses import replace

import numpy as np
import pytest

from attkit.additive import (CoefficientPaths, FallbackPolicy, bias_pad_matrix,
                             cumulative_effects, empirical_risk, fit,
                             fit_debiased, max_horizon, solve_interval)
from attkit.errors import ConfigError, DataError, NumericalError
from attkit.panel import CovariateSource, PanelDataset, TimeGrid, source_matrix
from attkit.simulate import simulate_cohort
from attkit.varmodel import (ErrorCovariance, error_covariance, fit_var,
                             forecast_all)


def tiny_panel(dn, x=None, treat=None, n=None, k_end=1, d_x=1, d_z=0):
    dn = np.atleast_2d(np.asarray(dn, dtype=int))
    n = dn.shape[0] if n is None else n
    k_end = dn.shape[1]
    if x is None:
        x = np.ones((n, k_end + 1, d_x))
    return PanelDataset(
        TimeGrid.integers(k_end), np.arange(n), np.zeros((n, d_z)), x,
        np.full(n, -1) if treat is None else np.asarray(treat),
        dn, np.full(n, k_end))


class TestEmpiricalRisk:
    def test_zero_coefficients_zero_risk(self, small_panel):
        coef = np.zeros((small_panel.grid.n_intervals, small_panel.p))
        assert empirical_risk(small_panel, coef, CovariateSource.observed()) == 0.0

    def test_hand_computed_value(self):
        # one subject, one interval, width 1, W = (1, x=1, D=0), count 2
        panel = tiny_panel([[2]])
        coef = np.array([[3.0, 0.0, 0.0]])
        # A'W = 3: quadratic 9, linear -2*3*2 = -12
        assert empirical_risk(panel, coef, CovariateSource.observed()) == pytest.approx(-3.0)

    def test_exact_risk_difference_decomposition(self, small_panel):
        """The difference between the true-trajectory risk and the
        forecast risk decomposes exactly into the forecast-error quadratic
        plus the two cross terms (verified to floating-point accuracy)."""
        panel = small_panel
        model = fit_var(panel)
        paths = forecast_all(model, panel)
        src_true = CovariateSource.true_counterfactual()
        src_fc = CovariateSource.forecast(paths)
        xs_true = source_matrix(panel, src_true)
        xs_fc = source_matrix(panel, src_fc)
        widths = panel.grid.widths
        xo = panel.x_block_offset
        rng = np.random.default_rng(10)
        for _ in range(10):
            coef = rng.normal(size=(panel.grid.n_intervals, panel.p))
            r_true = empirical_risk(panel, coef, src_true)
            r_fc = empirical_risk(panel, coef, src_fc)
            rhs = 0.0
            for k in range(panel.grid.n_intervals):
                mask = panel.at_risk(k)
                a = coef[k]
                ax = a[xo:xo + panel.d_x]
                eps = xs_fc[mask, k, :] - xs_true[mask, k, :]
                a_eps = eps @ ax
                w_true = np.column_stack([
                    np.ones(mask.sum()), panel.z[mask], xs_true[mask, k, :],
                    panel.treated_at(k)[mask].astype(float)])
                a_w = w_true @ a
                rhs += float(
                    (-2.0 * a_eps * a_w * widths[k]
                     - a_eps ** 2 * widths[k]
                     + 2.0 * a_eps * panel.dn[mask, k]).sum())
            rhs /= panel.n_subjects
            diff = r_true - r_fc
            denom = max(abs(r_true), abs(r_fc), 1e-12)
            assert abs(diff - rhs) / denom < 1e-10

    def test_dimension_mismatch(self, small_panel):
        with pytest.raises(DataError):
            empirical_risk(small_panel, np.zeros((3, 2)), CovariateSource.observed())


class TestSolveInterval:
    def test_identity_system(self):
        m = np.array([2.0, -1.0, 0.5])
        assert np.allclose(solve_interval(np.eye(3), m, 1.0), m)

    def test_scalar_solve(self):
        out = solve_interval(np.array([[4.0]]), np.array([6.0]), 0.5)
        assert out[0] == pytest.approx(3.0)

    def test_residual_small(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(6, 6))
        gram = a @ a.T + 6 * np.eye(6)
        moment = rng.normal(size=6)
        delta = 0.7
        sol = solve_interval(gram, moment, delta)
        resid = gram @ sol * delta - moment
        assert np.abs(resid).max() < 1e-9 * max(1.0, np.abs(moment).max())

    def test_singular_rejected_with_condition(self):
        gram = np.ones((2, 2))
        with pytest.raises(NumericalError, match="condition estimate"):
            solve_interval(gram, np.ones(2), 1.0)

    def test_ridge_semantics(self):
        gram = np.array([[2.0]])
        out = solve_interval(gram, np.array([3.0]), 2.0, ridge=1.0)
        # (2*2 + 1) a = 3
        assert out[0] == pytest.approx(0.6)

    def test_asymmetric_rejected(self):
        gram = np.array([[1.0, 5.0], [0.0, 1.0]])
        with pytest.raises(DataError, match="symmetric"):
            solve_interval(gram, np.ones(2), 1.0)


class TestBiasPad:
    def test_structure(self):
        block = np.array([[2.0, 0.5], [0.5, 1.0]])
        pad = bias_pad_matrix(6, 2, block)
        assert pad.shape == (6, 6)
        assert np.allclose(pad[2:4, 2:4], block)
        pad[2:4, 2:4] = 0.0
        assert np.all(pad == 0.0)

    def test_block_must_fit(self):
        with pytest.raises(DataError):
            bias_pad_matrix(4, 2, np.eye(2))


class TestFit:
    def test_intercept_only_mean_rate(self):
        # two untreated subjects, one unit interval, counts 2 and 4
        panel = tiny_panel([[2], [4]], x=np.zeros((2, 2, 0)))
        paths = fit(panel, CovariateSource.observed())
        assert paths.coef[0, 0] == pytest.approx(3.0)
        assert np.isnan(paths.coef[0, -1])
        assert paths.flags[0] == "no-treated"
        assert paths.risk_set_size[0] == 2

    def test_att_defined_only_with_treated(self, small_panel):
        paths = fit(small_panel, CovariateSource.observed())
        assert np.isnan(paths.att[0])
        assert paths.flags[0] == "no-treated"
        assert np.isfinite(paths.att[1:]).all()

    def test_normal_equations_per_interval(self, small_panel):
        src = CovariateSource.true_counterfactual()
        paths = fit(small_panel, src)
        xs = source_matrix(small_panel, src)
        for k in range(small_panel.grid.n_intervals):
            mask = small_panel.at_risk(k)
            w = np.column_stack([
                np.ones(mask.sum()), small_panel.z[mask], xs[mask, k, :],
                small_panel.treated_at(k)[mask].astype(float)])
            gram = w.T @ w
            moment = w.T @ small_panel.dn[mask, k]
            a = np.nan_to_num(paths.coef[k])
            cols = np.abs(w).sum(axis=0) > 0
            resid = (gram @ a * small_panel.grid.widths[k] - moment)[cols]
            assert np.abs(resid).max() < 1e-9 * max(1.0, np.abs(moment).max())

    def test_fitted_paths_minimize_risk(self, small_panel):
        src = CovariateSource.true_counterfactual()
        paths = fit(small_panel, src)
        base = empirical_risk(small_panel, paths, src)
        rng = np.random.default_rng(12)
        defined = np.isfinite(paths.coef)
        for _ in range(100):
            perturbed = np.array(paths.coef)
            perturbed[defined] += rng.normal(scale=0.05, size=int(defined.sum()))
            assert empirical_risk(small_panel, perturbed, src) >= base

    def test_noiseless_sources_coincide(self, small_params):
        params = replace(small_params, noise_cov=np.zeros((1, 1)))
        panel = simulate_cohort(params)
        model = fit_var(panel)
        forecasts = forecast_all(model, panel)
        oracle = fit(panel, CovariateSource.true_counterfactual())
        unc = fit(panel, CovariateSource.forecast(forecasts))
        deb = fit_debiased(panel, model, forecasts=forecasts)
        for a, b in ((oracle, unc), (oracle, deb)):
            mask = np.isfinite(a.coef) | np.isfinite(b.coef)
            assert np.allclose(np.nan_to_num(a.coef)[mask.any(axis=1)],
                               np.nan_to_num(b.coef)[mask.any(axis=1)],
                               atol=1e-9)

    def test_labels_follow_source(self, small_panel):
        assert fit(small_panel, CovariateSource.observed()).label == "naive"
        assert fit(small_panel, CovariateSource.true_counterfactual()).label == "oracle"


class TestFitDebiased:
    def test_zero_correction_equals_uncorrected(self, small_panel):
        model = fit_var(small_panel)
        forecasts = forecast_all(model, small_panel)
        zero_cov = ErrorCovariance([np.zeros((1, 1))] * max_horizon(small_panel))
        unc = fit(small_panel, CovariateSource.forecast(forecasts))
        deb = fit_debiased(small_panel, model, forecasts=forecasts,
                           error_cov=zero_cov)
        assert np.array_equal(np.nan_to_num(unc.coef), np.nan_to_num(deb.coef))

    def test_untreated_intervals_coincide(self, small_panel):
        model = fit_var(small_panel)
        forecasts = forecast_all(model, small_panel)
        unc = fit(small_panel, CovariateSource.forecast(forecasts))
        deb = fit_debiased(small_panel, model, forecasts=forecasts)
        # interval 0 carries no treated person-time: identical solves
        assert np.allclose(np.nan_to_num(unc.coef[0]), np.nan_to_num(deb.coef[0]))
        # later intervals genuinely differ
        assert not np.allclose(np.nan_to_num(unc.coef[5]), np.nan_to_num(deb.coef[5]))

    def test_large_sample_tracks_reference_effect(self, paper_params):
        from attkit.benchmark import monte_carlo_truth
        truth = monte_carlo_truth(paper_params, reps=50, seed=77)
        big = simulate_cohort(replace(paper_params, n=20000, seed=3000))
        oracle = fit(big, CovariateSource.true_counterfactual())
        mask = np.isfinite(truth.att) & np.isfinite(oracle.att)
        gap = abs(oracle.att[mask].mean() - truth.att[mask].mean())
        assert gap < 0.12  # 4x the observed spread over 20k-subject runs

    def test_correction_moment_gap_shrinks_with_n(self, paper_params):
        """Estimated forecast-error moments converge to the generator's:
        the bias quadratic evaluated with fitted (Pi, Sigma) approaches the
        one evaluated with the true dynamics as cohorts grow."""
        from attkit.varmodel import error_covariance_from
        rng = np.random.default_rng(13)
        a_x = np.array([0.3])
        gaps = []
        for n in (500, 2000, 8000):
            vals = []
            for s in range(3):
                panel = simulate_cohort(replace(paper_params, n=n, seed=600 + s))
                model = fit_var(panel)
                lmax = max_horizon(panel)
                est = error_covariance(model, lmax)
                true = error_covariance_from(np.diag(paper_params.kappa_untreated) + 1.0,
                                             paper_params.noise_cov, lmax)
                total = 0.0
                for k in range(panel.grid.n_intervals):
                    alive = panel.at_risk(k) & panel.treated_at(k)
                    horizons = k - panel.treat_start[alive] + 1
                    for l in horizons:
                        diff = est.horizon(int(l)) - true.horizon(int(l))
                        total += float(a_x @ diff @ a_x)
                vals.append(abs(total) / n)
            gaps.append(np.mean(vals))
        assert gaps[2] < gaps[0]
        assert gaps[2] < gaps[1] * 2  # allow noise, require broad decrease


class TestFallbacks:
    def collinear_panel(self):
        rng = np.random.default_rng(14)
        n, k_end = 30, 3
        z = rng.normal(size=(n, 1))
        z = np.column_stack([z, z])  # Z2 duplicates Z1: singular every interval
        x = rng.normal(size=(n, k_end + 1, 1))
        dn = rng.poisson(3.0, size=(n, k_end))
        treat = np.full(n, -1)
        treat[:10] = 1
        return PanelDataset(TimeGrid.integers(k_end), np.arange(n), z, x,
                            treat, dn, np.full(n, k_end))

    def test_fail_policy_raises_with_context(self):
        panel = self.collinear_panel()
        with pytest.raises(NumericalError, match=r"interval 0 \(risk set 30\)"):
            fit(panel, CovariateSource.observed(), FallbackPolicy("fail"))

    def test_psd_floor_flags_and_solves(self):
        panel = self.collinear_panel()
        paths = fit(panel, CovariateSource.observed(), FallbackPolicy("psd-floor"))
        assert all(f and "psd-floor" in f for f in paths.flags)
        assert np.isfinite(np.nan_to_num(paths.coef)).all()

    def test_ridge_policy_flags(self):
        panel = self.collinear_panel()
        paths = fit(panel, CovariateSource.observed(),
                    FallbackPolicy("ridge", ridge=0.5))
        assert all(f and "ridge" in f for f in paths.flags)

    def test_policy_parsing(self):
        assert FallbackPolicy.parse("ridge:0.25").ridge == 0.25
        assert FallbackPolicy.parse("fail").mode == "fail"
        with pytest.raises(ConfigError):
            FallbackPolicy.parse("nonsense")
        with pytest.raises(ConfigError):
            FallbackPolicy.parse("ridge:zero")


class TestCumulative:
    def make_paths(self, att, widths=None):
        k = len(att)
        grid = TimeGrid.integers(k) if widths is None else TimeGrid(
            np.concatenate(([0.0], np.cumsum(widths))))
        coef = np.column_stack([np.ones(k), att])
        return CoefficientPaths(grid=grid, label="test", coef=coef,
                                flags=[None] * k, risk_set_size=np.ones(k, int),
                                d_z=0, d_x=0)

    def test_constant_integrand(self):
        paths = self.make_paths([2.5] * 4)
        cum = paths.cumulative()
        assert np.allclose(cum[:, 1], [0.0, 2.5, 5.0, 7.5, 10.0])

    def test_alternating_integrand(self):
        paths = self.make_paths([1.0, -1.0, 1.0, -1.0])
        assert np.allclose(paths.cumulative()[:, 1], [0, 1, 0, 1, 0])

    def test_matches_independent_riemann_sum(self):
        rng = np.random.default_rng(15)
        att = rng.normal(size=6)
        widths = rng.uniform(0.5, 2.0, size=6)
        paths = self.make_paths(att, widths)
        total = paths.cumulative()[-1, 1]
        assert total == pytest.approx(float(np.sum(att * widths)), rel=1e-12)

    def test_rows_carry_value_and_cumulative(self, small_panel):
        paths = fit(small_panel, CovariateSource.observed())
        rows = cumulative_effects(paths)
        assert len(rows) == small_panel.grid.n_intervals * small_panel.p
        d_rows = [r for r in rows if r["coef_name"] == "D"]
        cum = paths.cumulative()
        assert d_rows[-1]["cumulative"] == pytest.approx(cum[-1, -1])
        assert d_rows[0]["flag_fallback"] == "no-treated"

    def test_time_average(self):
        paths = self.make_paths([1.0, 2.0, 3.0, 6.0])
        assert paths.time_average("D") == pytest.approx(3.0)
        assert paths.coef_names == ["intercept", "D"]

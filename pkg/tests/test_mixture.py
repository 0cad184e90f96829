import math

import numpy as np
import pytest
from scipy import stats

from avb.core import ElboBreakdown, ModelCollection, combine_posteriors
from avb.errors import NumericalBreakdown, OutOfSupport, ShapeError
from avb.mixture import (
    CaviResult,
    MixtureModelSpec,
    MixtureVariationalState,
    cavi_fit,
    cavi_fit_restarts,
    component_count_log_prior,
    evaluate_objective,
    initial_state,
    kl_dirichlet,
    kl_gaussian,
    kl_wishart,
    plug_in_density,
    predictive_density,
    sample_truth,
    update_parameter_factors,
    update_responsibilities,
)

MONOTONE_SLACK = 1e-8
PERMUTATION_TOL = 1e-10


def _blob_data(seed, n_per=30, centers=((-3.0, 0.0), (3.0, 1.0))):
    rng = np.random.default_rng(seed)
    parts = [c + rng.standard_normal((n_per, 2)) for c in np.asarray(centers)]
    return np.concatenate(parts)


class TestSpecValidation:
    def test_default_priors(self):
        spec = MixtureModelSpec.default(3)
        assert spec.component_count == 3 and spec.dim == 2
        np.testing.assert_array_equal(spec.mean_prior_cov, 100.0 * np.eye(2))
        np.testing.assert_array_equal(spec.wishart_scale, 0.1 * np.eye(2))
        assert spec.wishart_dof == 10.0
        assert spec.dirichlet_concentration == 1.0
        # prior expected precision is the identity
        np.testing.assert_allclose(
            spec.wishart_dof * spec.wishart_scale, np.eye(2), rtol=1e-15
        )

    def test_invalid_specs(self):
        with pytest.raises(ShapeError):
            MixtureModelSpec.default(0)
        with pytest.raises(OutOfSupport):
            MixtureModelSpec(
                component_count=1,
                dim=3,
                mean_prior_mean=np.zeros(3),
                mean_prior_cov=np.eye(3),
                wishart_dof=1.5,
                wishart_scale=np.eye(3),
            )
        with pytest.raises(OutOfSupport):
            MixtureModelSpec(
                component_count=1,
                dim=2,
                mean_prior_mean=np.zeros(2),
                mean_prior_cov=np.array([[1.0, 2.0], [2.0, 1.0]]),  # indefinite
                wishart_dof=10.0,
                wishart_scale=np.eye(2),
            )


class TestStateValidation:
    def _factors(self, m, d):
        return dict(
            weight_concentration=np.ones(m),
            mean_locations=np.zeros((m, d)),
            mean_covariances=np.tile(np.eye(d), (m, 1, 1)),
            wishart_dofs=np.full(m, d + 2.0),
            wishart_scales=np.tile(np.eye(d), (m, 1, 1)),
        )

    def test_row_sums_enforced(self):
        bad = np.array([[0.6, 0.3], [0.5, 0.5]])
        with pytest.raises(ShapeError):
            MixtureVariationalState(responsibilities=bad, **self._factors(2, 2))

    def test_positive_definite_enforced(self):
        factors = self._factors(2, 2)
        factors["wishart_scales"] = np.tile(
            np.array([[1.0, 2.0], [2.0, 1.0]]), (2, 1, 1)
        )
        resp = np.full((3, 2), 0.5)
        with pytest.raises(OutOfSupport):
            MixtureVariationalState(responsibilities=resp, **factors)

    def test_dof_bound_enforced(self):
        factors = self._factors(2, 2)
        factors["wishart_dofs"] = np.array([3.0, 0.5])
        resp = np.full((3, 2), 0.5)
        with pytest.raises(OutOfSupport):
            MixtureVariationalState(responsibilities=resp, **factors)


class TestKlOracles:
    def test_identical_factors_are_zero(self):
        assert kl_dirichlet(np.ones(4), 1.0) == pytest.approx(0.0, abs=1e-14)
        assert kl_gaussian(
            np.zeros(2), 100.0 * np.eye(2), np.zeros(2), 100.0 * np.eye(2)
        ) == pytest.approx(0.0, abs=1e-14)
        assert kl_wishart(10.0, 0.1 * np.eye(2), 10.0, 0.1 * np.eye(2)) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_gaussian_one_dimensional_closed_form(self):
        # KL(N(mu, s^2) || N(0, t^2)) = ((s^2 + mu^2)/t^2 - 1 + log(t^2/s^2))/2
        mu, s2, t2 = 1.5, 0.7, 2.0
        expected = 0.5 * ((s2 + mu * mu) / t2 - 1.0 + math.log(t2 / s2))
        got = kl_gaussian(
            np.array([mu]), np.array([[s2]]), np.array([0.0]), np.array([[t2]])
        )
        assert got == pytest.approx(expected, rel=1e-14)

    def test_dirichlet_monte_carlo(self):
        rng = np.random.default_rng(101)
        conc = np.array([3.0, 1.0, 2.0])
        draws = rng.dirichlet(conc, size=200_000)
        logq = stats.dirichlet.logpdf(draws.T, conc)
        logp = stats.dirichlet.logpdf(draws.T, np.ones(3))
        diffs = logq - logp
        estimate, se = diffs.mean(), diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(kl_dirichlet(conc, 1.0) - estimate) <= 3 * se

    def test_gaussian_monte_carlo(self):
        rng = np.random.default_rng(103)
        mean = np.array([1.0, -0.5])
        cov = np.array([[0.8, 0.3], [0.3, 1.2]])
        prior_mean = np.zeros(2)
        prior_cov = 100.0 * np.eye(2)
        draws = rng.multivariate_normal(mean, cov, size=200_000)
        diffs = stats.multivariate_normal.logpdf(
            draws, mean, cov
        ) - stats.multivariate_normal.logpdf(draws, prior_mean, prior_cov)
        estimate, se = diffs.mean(), diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(kl_gaussian(mean, cov, prior_mean, prior_cov) - estimate) <= 3 * se

    def test_wishart_monte_carlo(self):
        rng = np.random.default_rng(107)
        dof, scale = 14.0, np.array([[0.2, 0.05], [0.05, 0.15]])
        prior_dof, prior_scale = 10.0, 0.1 * np.eye(2)
        q = stats.wishart(df=dof, scale=scale)
        p = stats.wishart(df=prior_dof, scale=prior_scale)
        draws = q.rvs(size=40_000, random_state=rng)
        diffs = q.logpdf(draws.transpose(1, 2, 0)) - p.logpdf(
            draws.transpose(1, 2, 0)
        )
        estimate, se = diffs.mean(), diffs.std(ddof=1) / math.sqrt(len(diffs))
        assert abs(
            kl_wishart(dof, scale, prior_dof, prior_scale) - estimate
        ) <= 3 * se


class TestSingleComponent:
    def test_responsibilities_are_exactly_one(self):
        spec = MixtureModelSpec.default(1)
        x = _blob_data(7, n_per=10)
        state = initial_state(spec, x, np.random.default_rng(1))
        updated = update_responsibilities(spec, x, state)
        np.testing.assert_array_equal(
            updated.responsibilities, np.ones((len(x), 1))
        )

    def test_mean_factor_matches_conjugate_update(self):
        spec = MixtureModelSpec.default(1)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(6, 2))
        base = MixtureVariationalState(
            responsibilities=np.ones((6, 1)),
            weight_concentration=np.array([1.0]),
            mean_locations=np.zeros((1, 2)),
            mean_covariances=np.tile(100.0 * np.eye(2), (1, 1, 1)),
            wishart_dofs=np.array([10.0]),
            wishart_scales=np.tile(0.1 * np.eye(2), (1, 1, 1)),
        )
        updated = update_parameter_factors(spec, x, base)
        # with E[Lambda] = I the conjugate update is
        # C = (V0^{-1} + n I)^{-1}, m = C (sum_i x_i)
        expected_cov = np.linalg.inv(0.01 * np.eye(2) + 6.0 * np.eye(2))
        expected_mean = expected_cov @ x.sum(axis=0)
        np.testing.assert_allclose(updated.mean_covariances[0], expected_cov, rtol=1e-13)
        np.testing.assert_allclose(updated.mean_locations[0], expected_mean, rtol=1e-13)
        assert updated.weight_concentration[0] == pytest.approx(7.0)
        assert updated.wishart_dofs[0] == pytest.approx(16.0)
        # precision factor built from the updated mean factor
        diff = x - expected_mean
        scatter = diff.T @ diff + 6.0 * expected_cov
        expected_scale = np.linalg.inv(10.0 * np.eye(2) + scatter)
        np.testing.assert_allclose(updated.wishart_scales[0], expected_scale, rtol=1e-12)

    def test_parameter_update_is_fixed_point_at_convergence(self):
        spec = MixtureModelSpec.default(1)
        x = _blob_data(13, n_per=20, centers=((0.5, -0.2),))
        result = cavi_fit(
            spec, x, initial_state(spec, x, np.random.default_rng(3)), tol=1e-13
        )
        again = update_parameter_factors(spec, x, result.state)
        np.testing.assert_allclose(
            again.mean_locations, result.state.mean_locations, rtol=1e-6
        )
        np.testing.assert_allclose(
            again.wishart_scales, result.state.wishart_scales, rtol=1e-6
        )


class TestCaviFit:
    def test_objective_monotone_along_trace(self):
        for seed in range(10):
            x = _blob_data(seed, n_per=20)
            spec = MixtureModelSpec.default(3)
            result = cavi_fit(
                spec, x, initial_state(spec, x, np.random.default_rng(seed + 50))
            )
            steps = np.diff(result.objective_trace)
            assert np.all(steps <= MONOTONE_SLACK), f"seed {seed}: rise {steps.max()}"

    def test_breakdown_is_exact_closed_form(self):
        x = _blob_data(3)
        spec = MixtureModelSpec.default(2)
        result = cavi_fit(spec, x, initial_state(spec, x, np.random.default_rng(5)))
        assert result.breakdown.mc_samples_used == 0
        fresh = evaluate_objective(spec, x, result.state)
        assert fresh.total == pytest.approx(result.breakdown.total, rel=1e-14)

    def test_two_separated_clusters_recovered(self):
        rng = np.random.default_rng(17)
        labels = np.repeat([0, 1], 50)
        x = np.array([[10.0, 10.0], [-10.0, -10.0]])[labels] + rng.standard_normal(
            (100, 2)
        )
        spec = MixtureModelSpec.default(2)
        result = cavi_fit_restarts(spec, x, seed=23)
        max_prob = result.state.responsibilities.max(axis=1)
        assert max_prob.mean() >= 0.99
        hard = result.state.responsibilities.argmax(axis=1)
        agreement = max((hard == labels).mean(), (hard == 1 - labels).mean())
        assert agreement == 1.0

    def test_duplicated_data_doubles_expected_nll_only(self):
        x = _blob_data(29, n_per=25)
        spec = MixtureModelSpec.default(2)
        result = cavi_fit_restarts(spec, x, seed=31)
        doubled = np.concatenate([x, x])
        dup_state = result.state.with_responsibilities(
            np.concatenate([result.state.responsibilities] * 2)
        )
        single = evaluate_objective(spec, x, result.state)
        dup = evaluate_objective(spec, doubled, dup_state)
        assert dup.expected_nll == pytest.approx(2.0 * single.expected_nll, rel=1e-12)
        assert dup.kl_to_prior == pytest.approx(single.kl_to_prior, rel=1e-14)
        refit = cavi_fit(spec, doubled, dup_state)
        assert np.all(np.diff(refit.objective_trace) <= MONOTONE_SLACK)

    def test_restarts_deterministic_and_no_worse(self):
        x = _blob_data(37, n_per=15)
        spec = MixtureModelSpec.default(3)
        a = cavi_fit_restarts(spec, x, seed=41, restarts=5)
        b = cavi_fit_restarts(spec, x, seed=41, restarts=5)
        assert a.breakdown.total == b.breakdown.total
        np.testing.assert_array_equal(a.state.responsibilities, b.state.responsibilities)
        single = cavi_fit_restarts(spec, x, seed=41, restarts=1)
        assert a.breakdown.total <= single.breakdown.total + 1e-12

    def test_label_permutation_leaves_objective_unchanged(self):
        rng = np.random.default_rng(43)
        x = _blob_data(43, n_per=20)
        spec = MixtureModelSpec.default(4)
        result = cavi_fit(spec, x, initial_state(spec, x, rng))
        base = result.breakdown.total
        for _ in range(10):
            perm = rng.permutation(4)
            permuted = result.state.permute_components(perm)
            total = evaluate_objective(spec, x, permuted).total
            assert abs(total - base) <= PERMUTATION_TOL

    def test_numerical_breakdown_on_overflowing_data(self):
        spec = MixtureModelSpec.default(2)
        x = np.array([[1e200, 0.0], [0.0, 1e200], [1e200, 1e200], [0.0, 0.0]])
        resp = np.full((4, 2), 0.5)
        state = MixtureVariationalState(
            responsibilities=resp,
            weight_concentration=np.ones(2),
            mean_locations=np.zeros((2, 2)),
            mean_covariances=np.tile(np.eye(2), (2, 1, 1)),
            wishart_dofs=np.full(2, 10.0),
            wishart_scales=np.tile(0.1 * np.eye(2), (2, 1, 1)),
        )
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericalBreakdown):
                update_parameter_factors(spec, x, state, iteration=4)
            with pytest.raises(NumericalBreakdown):
                initial_state(spec, x, np.random.default_rng(0))

    def test_non_finite_data_rejected(self):
        spec = MixtureModelSpec.default(2)
        x = np.array([[0.0, 0.0], [np.nan, 1.0]])
        with pytest.raises(ShapeError):
            initial_state(spec, x, np.random.default_rng(0))


class TestSampleTruth:
    def test_deterministic(self):
        np.testing.assert_array_equal(sample_truth(200, 7), sample_truth(200, 7))

    def test_component_proportions(self):
        _, labels = sample_truth(100_000, 11, return_labels=True)
        props = np.bincount(labels, minlength=4) / 100_000
        np.testing.assert_allclose(props, [0.3, 0.3, 0.2, 0.2], atol=0.01)

    def test_first_component_centered_at_origin(self):
        x, labels = sample_truth(100_000, 13, return_labels=True)
        center = x[labels == 0].mean(axis=0)
        assert np.all(np.abs(center) < 0.1)


class TestPredictiveDensity:
    def _fit_combined(self, counts, data, seed=3):
        specs = {m: MixtureModelSpec.default(m) for m in counts}
        models = tuple((f"mix{m}", specs[m], float(m)) for m in counts)
        collection = ModelCollection.from_log_weights(
            models, component_count_log_prior(max(counts))[np.array(counts) - 1]
        )
        fits = {}
        for m in counts:
            result = cavi_fit_restarts(specs[m], data, seed=seed + m, restarts=2)
            fits[f"mix{m}"] = (result.state, result.breakdown)
        return combine_posteriors(collection, fits)

    def test_single_gaussian_case(self):
        x = _blob_data(47, n_per=25, centers=((1.0, -1.0),))
        combined = self._fit_combined([1], x)
        state = combined.components["mix1"]
        grid = np.array([[0.0, 0.0], [1.0, -1.0], [2.5, 0.5]])
        precision = state.wishart_dofs[0] * state.wishart_scales[0]
        expected = stats.multivariate_normal.pdf(
            grid, mean=state.mean_locations[0], cov=np.linalg.inv(precision)
        )
        np.testing.assert_allclose(plug_in_density(state, grid), expected, rtol=1e-10)
        np.testing.assert_allclose(
            predictive_density(combined, grid), expected, rtol=1e-10
        )

    def test_density_nonnegative_and_integrates_to_one(self):
        x = sample_truth(200, 19)
        combined = self._fit_combined([1, 2, 3], x)
        step = 0.1
        axis = np.arange(-15.0, 15.0 + step, step)
        gx, gy = np.meshgrid(axis, axis)
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        dens = predictive_density(combined, grid)
        assert np.all(dens >= 0)
        integral = dens.sum() * step * step
        assert integral == pytest.approx(1.0, abs=0.02)

    def test_combined_density_is_convex_combination(self):
        x = sample_truth(120, 23)
        combined = self._fit_combined([1, 2], x)
        grid = np.random.default_rng(5).uniform(-8, 8, size=(40, 2))
        parts = sum(
            combined.weight(mid) * plug_in_density(combined.components[mid], grid)
            for mid in combined.model_ids
        )
        np.testing.assert_allclose(predictive_density(combined, grid), parts, rtol=1e-14)


class TestComponentCountPrior:
    def test_log_weights_follow_m_log_m(self):
        lw = component_count_log_prior(6)
        counts = np.arange(1, 7)
        np.testing.assert_allclose(lw, -counts * np.log(counts), rtol=1e-15)
        # normalized ratios are m^{-m}
        alpha = np.exp(lw - lw.max())
        alpha /= alpha.sum()
        np.testing.assert_allclose(
            alpha / alpha[0], [1.0, 0.25, 27.0**-1, 256.0**-1, 3125.0**-1, 46656.0**-1],
            rtol=1e-12,
        )

"""Tests for model selection and the averaging-vs-selection instruments."""

import math

import numpy as np
import pytest

from avb.compare import (
    expected_risk,
    objective_dominance,
    risk_bound_functional,
    select_model,
    tv_combined_vs_selected,
)
from avb.core import ElboBreakdown, ModelCollection, combine_posteriors
from avb.particles import (
    DiscretizedSpace,
    ParticleTarget,
    run_algorithm2,
    state_atom_log_masses,
)


def _setup(alpha, totals, zetas=None, ids=None):
    k = len(alpha)
    ids = ids if ids is not None else list(range(k))
    zetas = zetas if zetas is not None else [0.0] * k
    coll = ModelCollection.from_weights(
        [(m, None, z) for m, z in zip(ids, zetas)], alpha
    )
    fits = {m: (None, ElboBreakdown.of(t, 0.0)) for m, t in zip(ids, totals)}
    combined = combine_posteriors(coll, fits)
    return coll, combined


class TestSelectModel:
    def test_picks_argmax_weight(self):
        coll, combined = _setup([0.5, 0.5], [0.0, 2.0])
        sel = select_model(combined, coll)
        assert sel.selected_model == 0
        assert sel.selected_weight > 0.5

    def test_exact_tie_equal_complexity_lower_id(self):
        coll, combined = _setup([0.5, 0.5], [1.0, 1.0], ids=[7, 3])
        np.testing.assert_allclose(combined.gamma, [0.5, 0.5])
        sel = select_model(combined, coll)
        assert sel.selected_model == 3

    def test_exact_tie_prefers_lower_complexity(self):
        coll, combined = _setup([0.5, 0.5], [1.0, 1.0], zetas=[2.0, 1.0])
        sel = select_model(combined, coll)
        assert sel.selected_model == 1

    def test_argmax_gamma_is_argmin_score(self):
        rng = np.random.default_rng(42)
        for i in range(500):
            k = int(rng.integers(2, 8))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 10, size=k)
            coll, combined = _setup(alpha, totals)
            sel = select_model(combined, coll)
            scores = [sel.selection_scores[m] for m in coll.model_ids]
            assert sel.selected_model == coll.model_ids[int(np.argmin(scores))], (
                f"instance {i}: argmax gamma disagrees with argmin score"
            )

    def test_scale_invariance(self):
        rng = np.random.default_rng(43)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 5, size=k)
            shift = rng.normal(0, 50)
            coll1, c1 = _setup(alpha, totals)
            coll2, c2 = _setup(alpha, totals + shift)
            assert (
                select_model(c1, coll1).selected_model
                == select_model(c2, coll2).selected_model
            )


class TestObjectiveDominance:
    def test_single_model_equality(self):
        coll, combined = _setup([1.0], [4.0])
        sel = select_model(combined, coll)
        res = objective_dominance(combined, sel, coll)
        assert res.avb_objective == pytest.approx(res.msvb_objective, abs=1e-12)
        assert res.holds

    def test_symmetric_two_model_gap_is_log2(self):
        coll, combined = _setup([0.5, 0.5], [0.0, 0.0])
        sel = select_model(combined, coll)
        res = objective_dominance(combined, sel, coll)
        assert res.avb_objective == pytest.approx(0.0, abs=1e-12)
        assert res.msvb_objective == pytest.approx(math.log(2), rel=1e-12)
        assert res.holds

    def test_holds_on_random_instances(self):
        rng = np.random.default_rng(44)
        for i in range(1000):
            k = int(rng.integers(1, 9))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 20, size=k)
            coll, combined = _setup(alpha, totals)
            sel = select_model(combined, coll)
            res = objective_dominance(combined, sel, coll)
            assert res.holds, f"instance {i}: {res}"


class TestTvCombinedVsSelected:
    def test_degenerate(self):
        coll, combined = _setup([0.5, 0.5], [0.0, 1e6])
        assert tv_combined_vs_selected(combined) == pytest.approx(0.0, abs=1e-15)

    def test_seventy_thirty(self):
        # choose totals so gamma is exactly (0.7, 0.3)
        coll, combined = _setup([0.5, 0.5], [-math.log(0.7), -math.log(0.3)])
        np.testing.assert_allclose(combined.gamma, [0.7, 0.3], atol=1e-14)
        sel = select_model(combined, coll)
        assert tv_combined_vs_selected(combined, sel) == pytest.approx(0.3, abs=1e-12)

    def test_matches_brute_force_on_particle_components(self):
        rng = np.random.default_rng(45)
        for _ in range(20):
            n_models = int(rng.integers(2, 4))
            alpha = rng.dirichlet(np.ones(n_models))
            fits = {}
            models = []
            atom_masses = {}
            for m in range(n_models):
                n = int(rng.integers(3, 40))
                space = DiscretizedSpace.from_atoms(
                    np.arange(n, dtype=float)[:, None] + 100.0 * m
                )
                vals = rng.normal(0, 2, size=n)
                res = run_algorithm2(
                    space,
                    ParticleTarget(
                        loglik=lambda p, v=vals, s=space: v[s.atom_index(p)]
                    ),
                    q=n,
                    iterations=1,
                    rng=rng,
                    schedule=lambda t: 0.0,
                )
                fits[m] = (res.state, res.breakdown)
                models.append((m, None, 0.0))
                atom_masses[m] = state_atom_log_masses(res.state)
            coll = ModelCollection.from_weights(models, alpha)
            combined = combine_posteriors(coll, fits)
            sel = select_model(combined, coll)

            # brute-force TV between sum_m gamma_m Xi_m and Xi_{selected}
            tv = 0.0
            for m in range(n_models):
                g = combined.gamma[m]
                for _, lm in atom_masses[m].items():
                    mass = g * math.exp(lm)
                    if m == sel.selected_model:
                        tv += abs(mass - math.exp(lm))
                    else:
                        tv += mass
            tv *= 0.5
            assert tv == pytest.approx(
                tv_combined_vs_selected(combined, sel), abs=1e-12
            )


class TestRiskBoundFunctional:
    def test_two_atom_value(self):
        val = risk_bound_functional([0.5, 0.5], [1.0, 0.0], [0.0, 1.0])
        # (1/u)(log2 + log((1+e^u)/2)) decreases toward 1; the grid's largest
        # point u=1e3 attains 1 + e^{-1000}/1000, i.e. exactly 1.0 in doubles
        assert val == pytest.approx(1.0, rel=1e-12)
        assert val >= expected_risk([1.0, 0.0], [0.0, 1.0])

    def test_xi_equal_posterior_jensen(self):
        rng = np.random.default_rng(46)
        for _ in range(200):
            k = int(rng.integers(2, 20))
            post = rng.dirichlet(np.ones(k))
            d = rng.uniform(0, 3, size=k)
            val = risk_bound_functional(post, post, d)
            assert val >= expected_risk(post, d) - 1e-9

    def test_bound_dominates_exact_risk(self):
        rng = np.random.default_rng(47)
        for i in range(1000):
            k = int(rng.integers(2, 50))
            post = rng.dirichlet(np.ones(k))
            xi = rng.dirichlet(np.ones(k))
            d = rng.uniform(0, 5, size=k)
            val = risk_bound_functional(post, xi, d)
            risk = expected_risk(xi, d)
            assert val >= risk - 1e-9, f"instance {i}: {val} < {risk}"

    def test_shared_grid_monotone_in_kl(self):
        # lower KL to the posterior at matched grids => no larger bound
        rng = np.random.default_rng(48)
        for _ in range(100):
            k = int(rng.integers(2, 10))
            post = rng.dirichlet(np.ones(k))
            d = rng.uniform(0, 2, size=k)
            xi_far = rng.dirichlet(np.ones(k) * 0.5)
            # mix toward the posterior lowers the KL
            lam = rng.uniform(0.5, 1.0)
            xi_near = lam * post + (1 - lam) * xi_far
            from avb.core import kl_categorical

            if kl_categorical(xi_near, post) <= kl_categorical(xi_far, post):
                near = risk_bound_functional(post, xi_near, d)
                far_kl = kl_categorical(xi_far, post)
                near_kl = kl_categorical(xi_near, post)
                # compare the functional's KL-dependent part at each grid point
                grid = np.logspace(-3, 3, 41)
                from scipy.special import logsumexp

                lp = np.log(post)
                far_vals = [(far_kl + logsumexp(lp + u * d)) / u for u in grid]
                near_vals = [(near_kl + logsumexp(lp + u * d)) / u for u in grid]
                assert min(near_vals) <= min(far_vals) + 1e-12
                assert near == pytest.approx(min(near_vals), rel=1e-12)

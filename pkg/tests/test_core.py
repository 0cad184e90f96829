"""Tests for the objective arithmetic and closed-form model combination."""

import math

import numpy as np
import pytest

from avb.core import (
    CombinedPosterior,
    ElboBreakdown,
    ModelCollection,
    change_of_measure_check,
    combine_posteriors,
    elbo_of_combination,
    kl_categorical,
    kl_uniform_box,
    model_probability_gap_bound,
)
from avb.errors import (
    AbsoluteContinuityError,
    DegenerateBox,
    MissingModelFit,
    NonFiniteObjective,
    OutOfSupport,
    ShapeError,
)


def _collection(alpha, ids=None):
    ids = ids if ids is not None else list(range(len(alpha)))
    models = [(m, None, 0.0) for m in ids]
    return ModelCollection.from_weights(models, alpha)


def _fits(totals, ids=None):
    ids = ids if ids is not None else list(range(len(totals)))
    return {m: (f"state-{m}", ElboBreakdown.of(t, 0.0)) for m, t in zip(ids, totals)}


class TestCombinePosteriors:
    def test_equal_weights_equal_objectives(self):
        out = combine_posteriors(_collection([0.5, 0.5]), _fits([3.0, 3.0]))
        np.testing.assert_allclose(out.gamma, [0.5, 0.5], atol=1e-15)

    def test_two_model_closed_form(self):
        # 0.7 e^{-1} / (0.7 e^{-1} + 0.3 e^{-2}), evaluated at 40 digits
        out = combine_posteriors(_collection([0.7, 0.3]), _fits([1.0, 2.0]))
        np.testing.assert_allclose(
            out.gamma, [0.8638095285778118, 0.1361904714221882], rtol=1e-13
        )

    def test_extreme_spread_stays_in_log_domain(self):
        out = combine_posteriors(_collection([0.5, 0.5]), _fits([0.0, 1e6]))
        assert out.log_gamma[1] == pytest.approx(-1e6, rel=1e-12)
        assert out.gamma[0] == pytest.approx(1.0, abs=1e-15)
        assert np.all(np.isfinite(out.log_gamma))

    def test_missing_fit_raises(self):
        with pytest.raises(MissingModelFit):
            combine_posteriors(_collection([0.5, 0.5]), _fits([1.0], ids=[0]))

    def test_unknown_fit_id_raises(self):
        fits = _fits([1.0, 2.0, 3.0], ids=[0, 1, 99])
        with pytest.raises(MissingModelFit):
            combine_posteriors(_collection([0.5, 0.5]), fits)

    def test_non_finite_objective_raises(self):
        with pytest.raises(NonFiniteObjective):
            combine_posteriors(_collection([0.5, 0.5]), _fits([1.0, math.nan]))
        with pytest.raises(NonFiniteObjective):
            combine_posteriors(_collection([0.5, 0.5]), _fits([1.0, math.inf]))

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            k = int(rng.integers(2, 7))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 10, size=k)
            shift = rng.normal(0, 100)
            base = combine_posteriors(_collection(alpha), _fits(totals))
            moved = combine_posteriors(_collection(alpha), _fits(totals + shift))
            np.testing.assert_allclose(moved.gamma, base.gamma, atol=1e-12)

    def test_pairwise_log_weight_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(2, 8))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 50, size=k)
            out = combine_posteriors(_collection(alpha), _fits(totals))
            la = np.log(alpha)
            for i in range(k):
                for j in range(k):
                    if out.gamma[i] < 1e-300 or out.gamma[j] < 1e-300:
                        continue
                    lhs = out.log_gamma[i] - out.log_gamma[j]
                    rhs = (la[i] - totals[i]) - (la[j] - totals[j])
                    assert lhs == pytest.approx(rhs, abs=1e-9), f"pair ({i},{j})"

    def test_weight_ordering_follows_scores(self):
        # gamma must be nonincreasing in (total - log alpha)
        rng = np.random.default_rng(11)
        for _ in range(100):
            k = int(rng.integers(2, 6))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 5, size=k)
            out = combine_posteriors(_collection(alpha), _fits(totals))
            score = totals - np.log(alpha)
            order = np.argsort(score)
            sorted_gamma = out.gamma[order]
            assert np.all(np.diff(sorted_gamma) <= 1e-15)

    def test_mc_settings_flag(self):
        coll = _collection([0.5, 0.5])
        exact = ElboBreakdown.of(1.0, 0.0)
        mc = ElboBreakdown.of(1.0, 0.0, mc_samples_used=64, mc_seed=3)
        out = combine_posteriors(coll, {0: (None, exact), 1: (None, mc)})
        assert out.unequal_mc_settings
        out2 = combine_posteriors(coll, {0: (None, exact), 1: (None, exact)})
        assert not out2.unequal_mc_settings


class TestKlUniformBox:
    def test_full_box_is_zero(self):
        assert kl_uniform_box([-3.0] * 3, [3.0] * 3, 3.0) == pytest.approx(0.0)

    def test_half_width(self):
        assert kl_uniform_box([0.0], [1.0], 1.0) == pytest.approx(math.log(2))

    def test_two_coordinate_sum(self):
        val = kl_uniform_box([-1.0, 0.0], [1.0, 2.0], 2.0)
        assert val == pytest.approx(1.3862943611198906, rel=1e-14)

    def test_degenerate_interval(self):
        with pytest.raises(DegenerateBox):
            kl_uniform_box([0.0, 0.5], [1.0, 0.5], 1.0)
        with pytest.raises(DegenerateBox):
            kl_uniform_box([0.6], [0.4], 1.0)

    def test_out_of_support(self):
        with pytest.raises(OutOfSupport):
            kl_uniform_box([-1.5], [0.0], 1.0)
        with pytest.raises(OutOfSupport):
            kl_uniform_box([0.0], [1.1], 1.0)

    def test_permutation_invariance_and_block_additivity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = int(rng.integers(1, 9))
            bound = float(rng.uniform(0.5, 10))
            lo = rng.uniform(-bound, bound, size=p)
            hi = lo + rng.uniform(1e-3, bound - np.abs(lo).max() + bound, size=p)
            hi = np.minimum(hi, bound)
            keep = hi > lo
            lo, hi = lo[keep], hi[keep]
            if len(lo) == 0:
                continue
            perm = rng.permutation(len(lo))
            a = kl_uniform_box(lo, hi, bound)
            b = kl_uniform_box(lo[perm], hi[perm], bound)
            assert a == pytest.approx(b, rel=1e-12)
            # additivity across a split into two blocks
            cut = len(lo) // 2
            if 0 < cut < len(lo):
                part = kl_uniform_box(lo[:cut], hi[:cut], bound) + kl_uniform_box(
                    lo[cut:], hi[cut:], bound
                )
                assert a == pytest.approx(part, rel=1e-12)


class TestKlCategorical:
    def test_identical_is_zero(self):
        assert kl_categorical([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]) == pytest.approx(0.0)

    def test_uniform_vs_skewed(self):
        val = kl_categorical([0.5, 0.5], [0.9, 0.1])
        assert val == pytest.approx(0.5108256237659907, rel=1e-14)

    def test_point_mass_vs_uniform(self):
        assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))

    def test_support_violation(self):
        with pytest.raises(AbsoluteContinuityError):
            kl_categorical([0.5, 0.5], [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            kl_categorical([0.5, 0.5], [1.0])

    def test_nonnegative_on_random_instances(self):
        rng = np.random.default_rng(21)
        for _ in range(1000):
            k = int(rng.integers(2, 11))
            g = rng.dirichlet(np.ones(k))
            a = rng.dirichlet(np.ones(k))
            assert kl_categorical(g, a) >= 0.0


class TestElboOfCombination:
    def test_point_mass_decomposition(self):
        coll = _collection([0.25, 0.75])
        elbos = {0: ElboBreakdown.of(2.0, 0.0), 1: ElboBreakdown.of(5.0, 0.0)}
        val = elbo_of_combination(coll, [1.0, 0.0], elbos)
        assert val == pytest.approx(2.0 - math.log(0.25), rel=1e-12)

    def test_known_two_model_value(self):
        coll = _collection([0.5, 0.5])
        elbos = {0: 0.0, 1: 0.0}
        val = elbo_of_combination(coll, [0.25, 0.75], elbos)
        assert val == pytest.approx(0.13081203594113696, rel=1e-13)

    def test_combined_weights_minimize(self):
        rng = np.random.default_rng(33)
        for _ in range(200):
            k = int(rng.integers(2, 7))
            alpha = rng.dirichlet(np.ones(k))
            totals = rng.normal(0, 5, size=k)
            coll = _collection(alpha)
            fits = _fits(totals)
            out = combine_posteriors(coll, fits)
            elbos = {m: fits[m][1] for m in coll.model_ids}
            at_opt = elbo_of_combination(coll, out.gamma, elbos)
            # minimizer beats every point mass ...
            for m in range(k):
                delta = np.zeros(k)
                delta[m] = 1.0
                assert at_opt <= elbo_of_combination(coll, delta, elbos) + 1e-10
            # ... and a handful of random mixtures
            for _ in range(5):
                g = rng.dirichlet(np.ones(k))
                assert at_opt <= elbo_of_combination(coll, g, elbos) + 1e-10


class TestModelProbabilityGapBound:
    def test_zero_gap(self):
        res = model_probability_gap_bound([0.4, 0.6], [0.4, 0.6], 0.0)
        assert res.gap == pytest.approx(0.0)
        assert res.holds

    def test_point_mass_instance(self):
        res = model_probability_gap_bound([1.0, 0.0], [0.5, 0.5], math.log(2))
        assert res.gap == pytest.approx(1.0)
        assert res.bound == pytest.approx(2 * math.log(2))
        assert res.holds

    def test_inconsistent_pair_flags_false(self):
        res = model_probability_gap_bound([1.0, 0.0], [0.5, 0.5], 0.1)
        assert not res.holds

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            model_probability_gap_bound([1.0], [0.5, 0.5], 0.0)

    def test_negative_kl_rejected(self):
        with pytest.raises(ShapeError):
            model_probability_gap_bound([1.0, 0.0], [0.5, 0.5], -0.5)


class TestChangeOfMeasure:
    def test_equality_case(self):
        res = change_of_measure_check([0.3, 0.7], [0.3, 0.7], [2.5, 2.5])
        assert res.lhs == pytest.approx(2.5)
        assert res.rhs == pytest.approx(2.5)
        assert res.holds

    def test_point_mass_instance(self):
        res = change_of_measure_check([1.0, 0.0], [0.5, 0.5], [1.0, 0.0])
        assert res.lhs == pytest.approx(1.0)
        assert res.rhs == pytest.approx(1.3132616875182228, rel=1e-13)
        assert res.holds

    def test_support_violation(self):
        with pytest.raises(AbsoluteContinuityError):
            change_of_measure_check([0.5, 0.5], [1.0, 0.0], [0.0, 0.0])

    def test_holds_on_random_instances(self):
        rng = np.random.default_rng(99)
        for i in range(10_000):
            k = int(rng.integers(2, 11))
            xi1 = rng.dirichlet(np.ones(k))
            xi2 = rng.dirichlet(np.ones(k))
            g = rng.uniform(-5, 5, size=k)
            res = change_of_measure_check(xi1, xi2, g)
            assert res.holds, f"instance {i}: lhs={res.lhs} rhs={res.rhs}"


class TestModelCollection:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ShapeError):
            ModelCollection.from_weights([(0, None, 0.0), (0, None, 0.0)], [0.5, 0.5])

    def test_negative_complexity_rejected(self):
        with pytest.raises(ShapeError):
            ModelCollection.from_weights([(0, None, -1.0)], [1.0])

    def test_from_complexity_log_exact(self):
        models = [((2, 25), None, 50.0), ((2, 50), None, 100.0)]
        coll = ModelCollection.from_complexity(
            models, scale=math.log(100), b0=1e-5
        )
        gap = coll.log_alpha[0] - coll.log_alpha[1]
        assert gap == pytest.approx(0.34538776394910685, rel=1e-12)
        assert coll.alpha[0] / coll.alpha[1] == pytest.approx(
            1.4125375446227543, rel=1e-12
        )

    def test_alpha_sums_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            k = int(rng.integers(1, 12))
            w = rng.uniform(0.1, 10, size=k)
            coll = ModelCollection.from_weights([(i, None, 0.0) for i in range(k)], w)
            assert abs(coll.alpha.sum() - 1.0) <= 1e-12

    def test_from_log_weights_handles_huge_spread(self):
        coll = ModelCollection.from_log_weights(
            [(0, None, 0.0), (1, None, 0.0)], [0.0, -1e6]
        )
        assert coll.log_alpha[1] == pytest.approx(-1e6, rel=1e-12)
        assert coll.alpha.sum() == pytest.approx(1.0, abs=1e-15)


class TestElboBreakdown:
    def test_total_identity_enforced(self):
        with pytest.raises(ValueError):
            ElboBreakdown(expected_nll=1.0, kl_to_prior=1.0, total=3.0)

    def test_negative_kl_rejected(self):
        with pytest.raises(ValueError):
            ElboBreakdown.of(1.0, -0.5)

    def test_tiny_negative_kl_clipped(self):
        b = ElboBreakdown.of(1.0, -1e-12)
        assert b.kl_to_prior == 0.0
        assert b.total == pytest.approx(1.0)


class TestCombinedPosteriorValidation:
    def test_gamma_must_sum_to_one(self):
        with pytest.raises(ShapeError):
            CombinedPosterior(
                model_ids=(0, 1),
                gamma=np.array([0.6, 0.6]),
                log_gamma=np.log(np.array([0.6, 0.6])),
                components={},
                per_model_elbo={},
            )

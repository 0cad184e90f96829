"""Variational objective arithmetic and closed-form model combination.

Conventions used throughout the package:

* The per-model variational objective ("total") is a quantity to *minimize*:
  ``total = expected_nll + kl_to_prior`` where ``expected_nll`` is the
  variational expectation of the negative log-likelihood and ``kl_to_prior``
  the KL divergence from the variational state to the model's prior. The ELBO
  proper is ``-total``.
* Model weights are always computed in log domain with a single
  log-sum-exp normalization, because objective totals routinely differ by
  1e3 - 1e6 across model sizes. :class:`CombinedPosterior` therefore carries
  ``log_gamma`` alongside ``gamma``; ``gamma`` may underflow to exactly 0.0
  for hopeless models while ``log_gamma`` stays informative.

Given per-model fits, the optimal weights over models have the closed form

    gamma_m = alpha_m * exp(-total_m) / sum_m' alpha_m' * exp(-total_m')

which :func:`combine_posteriors` evaluates. The remaining helpers are the
KL computations and the two inequality checks used as test utilities
(:func:`model_probability_gap_bound`, :func:`change_of_measure_check`).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    AbsoluteContinuityError,
    DegenerateBox,
    MissingModelFit,
    NonFiniteObjective,
    OutOfSupport,
    ShapeError,
)

logger = logging.getLogger(__name__)

# Default tolerances; every check that uses one accepts an override.
PROBABILITY_SUM_TOL = 1e-12
IDENTITY_TOL = 1e-10
GAP_BOUND_SLACK = 1e-12

ModelId = Any


def _as_1d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


def _check_probability_vector(p: np.ndarray, name: str, tol: float = 1e-9) -> None:
    if np.any(p < 0):
        raise ShapeError(f"{name} has negative entries")
    s = float(p.sum())
    if not math.isfinite(s) or abs(s - 1.0) > tol:
        raise ShapeError(f"{name} must sum to 1 (got {s!r})")


@dataclass(frozen=True)
class ModelCollection:
    """An indexed family of candidate models with prior model weights.

    ``models`` holds ``(model_id, prior_spec, complexity_score)`` triples;
    ``prior_spec`` is opaque to this module (each model family interprets its
    own), and ``complexity_score`` is a caller-supplied nonnegative scalar
    used only by :meth:`from_complexity`.
    """

    models: tuple
    alpha: np.ndarray
    log_alpha: np.ndarray
    prior_exponent: float = 1.0
    b0: float = 1.0

    def __post_init__(self):
        models = tuple((mid, spec, float(z)) for mid, spec, z in self.models)
        object.__setattr__(self, "models", models)
        ids = [m[0] for m in models]
        if len(set(ids)) != len(ids):
            raise ShapeError("model_ids must be unique")
        for mid, _, z in models:
            if z < 0:
                raise ShapeError(f"complexity score for model {mid!r} is negative")
        alpha = _as_1d(self.alpha, "alpha")
        log_alpha = _as_1d(self.log_alpha, "log_alpha")
        if len(alpha) != len(models) or len(log_alpha) != len(models):
            raise ShapeError("alpha length must match number of models")
        if np.any(alpha < 0):
            raise ShapeError("alpha entries must be nonnegative")
        if abs(float(alpha.sum()) - 1.0) > PROBABILITY_SUM_TOL:
            raise ShapeError(f"alpha must sum to 1 within {PROBABILITY_SUM_TOL}")
        if self.prior_exponent <= 0 or self.b0 <= 0:
            raise ShapeError("prior_exponent and b0 must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "log_alpha", log_alpha)

    # -- constructors ------------------------------------------------------

    @classmethod
    def from_log_weights(
        cls,
        models: Sequence[tuple],
        log_weights: Sequence[float],
        *,
        b0: float = 1.0,
        prior_exponent: float = 1.0,
    ) -> "ModelCollection":
        """Normalize unnormalized log weights into alpha (log domain)."""
        lw = _as_1d(log_weights, "log_weights")
        if len(lw) != len(models):
            raise ShapeError("log_weights length must match number of models")
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise NonFiniteObjective("log_weights must not contain NaN or +inf")
        log_alpha = lw - logsumexp(lw)
        return cls(
            models=tuple(models),
            alpha=np.exp(log_alpha),
            log_alpha=log_alpha,
            prior_exponent=prior_exponent,
            b0=b0,
        )

    @classmethod
    def from_weights(
        cls,
        models: Sequence[tuple],
        weights: Sequence[float],
        *,
        b0: float = 1.0,
        prior_exponent: float = 1.0,
    ) -> "ModelCollection":
        w = _as_1d(weights, "weights")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() == 0:
            raise ShapeError("weights must be finite, nonnegative, not all zero")
        with np.errstate(divide="ignore"):
            lw = np.log(w)
        return cls.from_log_weights(models, lw, b0=b0, prior_exponent=prior_exponent)

    @classmethod
    def from_complexity(
        cls,
        models: Sequence[tuple],
        *,
        scale: float,
        b0: float,
        prior_exponent: float = 1.0,
    ) -> "ModelCollection":
        """alpha_m proportional to exp(-b0 * prior_exponent * scale * zeta_m^2).

        ``scale`` is the caller's sample-size factor (e.g. log n); each model's
        ``complexity_score`` zeta enters squared.
        """
        zetas = _as_1d([m[2] for m in models], "complexity scores")
        lw = -b0 * prior_exponent * scale * zetas**2
        return cls.from_log_weights(models, lw, b0=b0, prior_exponent=prior_exponent)

    # -- views -------------------------------------------------------------

    @property
    def model_ids(self) -> tuple:
        return tuple(m[0] for m in self.models)

    def prior_spec(self, model_id) -> Any:
        for mid, spec, _ in self.models:
            if mid == model_id:
                return spec
        raise KeyError(model_id)

    def complexity(self, model_id) -> float:
        for mid, _, z in self.models:
            if mid == model_id:
                return z
        raise KeyError(model_id)

    def __len__(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class ElboBreakdown:
    """Value of the per-model variational objective, split into its two terms.

    ``total`` is the quantity minimized during fitting (negative ELBO);
    ``mc_samples_used`` is 0 when both terms are exact/closed-form, else the
    Monte Carlo sample count, with ``mc_seed`` recording the stream so that
    two breakdowns are comparable only at equal settings.
    """

    expected_nll: float
    kl_to_prior: float
    total: float
    mc_samples_used: int = 0
    mc_seed: int | None = None

    def __post_init__(self):
        kl = float(self.kl_to_prior)
        if math.isnan(kl) or kl < -1e-9:
            raise ValueError(f"kl_to_prior must be >= 0, got {kl!r}")
        if -1e-9 <= kl < 0:
            object.__setattr__(self, "kl_to_prior", 0.0)
            kl = 0.0
        object.__setattr__(self, "expected_nll", float(self.expected_nll))
        object.__setattr__(self, "total", float(self.total))
        if math.isfinite(self.total) or math.isfinite(self.expected_nll):
            if abs(self.total - (self.expected_nll + kl)) > IDENTITY_TOL * max(
                1.0, abs(self.total)
            ):
                raise ValueError(
                    "total must equal expected_nll + kl_to_prior "
                    f"({self.total!r} vs {self.expected_nll + kl!r})"
                )
        if self.mc_samples_used < 0:
            raise ValueError("mc_samples_used must be nonnegative")

    @classmethod
    def of(
        cls,
        expected_nll: float,
        kl_to_prior: float,
        mc_samples_used: int = 0,
        mc_seed: int | None = None,
    ) -> "ElboBreakdown":
        """Build with ``total`` computed as the exact sum of the two terms."""
        kl = float(kl_to_prior)
        if -1e-9 <= kl < 0:
            kl = 0.0
        return cls(
            expected_nll=float(expected_nll),
            kl_to_prior=kl,
            total=float(expected_nll) + kl,
            mc_samples_used=mc_samples_used,
            mc_seed=mc_seed,
        )

    @property
    def mc_settings(self) -> tuple:
        return (self.mc_samples_used, self.mc_seed)


@dataclass(frozen=True)
class CombinedPosterior:
    """Weights over models plus the fitted per-model states.

    ``gamma[i]`` corresponds to ``model_ids[i]``. ``components`` and
    ``per_model_elbo`` are keyed by model id. ``unequal_mc_settings`` flags
    that the per-model objectives were estimated at different Monte Carlo
    settings, so their comparison carries extra noise.
    """

    model_ids: tuple
    gamma: np.ndarray
    log_gamma: np.ndarray
    components: Mapping[ModelId, Any]
    per_model_elbo: Mapping[ModelId, ElboBreakdown]
    unequal_mc_settings: bool = False

    def __post_init__(self):
        gamma = _as_1d(self.gamma, "gamma")
        log_gamma = _as_1d(self.log_gamma, "log_gamma")
        if len(gamma) != len(self.model_ids) or len(log_gamma) != len(self.model_ids):
            raise ShapeError("gamma length must match model_ids")
        if np.any(gamma < 0) or np.any(gamma > 1):
            raise ShapeError("gamma entries must lie in [0, 1]")
        if abs(float(gamma.sum()) - 1.0) > PROBABILITY_SUM_TOL:
            raise ShapeError(f"gamma must sum to 1 within {PROBABILITY_SUM_TOL}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "log_gamma", log_gamma)

    def weight(self, model_id) -> float:
        return float(self.gamma[self.model_ids.index(model_id)])

    def log_weight(self, model_id) -> float:
        return float(self.log_gamma[self.model_ids.index(model_id)])


def combine_posteriors(
    collection: ModelCollection,
    fits: Mapping[ModelId, tuple],
) -> CombinedPosterior:
    """Closed-form optimal weights over independently fitted models.

    ``fits`` maps every model id in ``collection`` to a ``(state, breakdown)``
    pair. Weights are ``alpha_m * exp(-total_m)`` normalized in log domain;
    the fitted states are stored unchanged.
    """
    ids = collection.model_ids
    missing = [m for m in ids if m not in fits]
    if missing:
        raise MissingModelFit(f"no fit supplied for model(s) {missing!r}")
    unknown = [m for m in fits if m not in ids]
    if unknown:
        raise MissingModelFit(f"fits supplied for unknown model(s) {unknown!r}")

    breakdowns = {m: fits[m][1] for m in ids}
    totals = np.array([breakdowns[m].total for m in ids], dtype=float)
    if not np.all(np.isfinite(totals)):
        bad = [m for m, t in zip(ids, totals) if not math.isfinite(t)]
        raise NonFiniteObjective(f"non-finite objective total for model(s) {bad!r}")

    scores = collection.log_alpha - totals  # -inf allowed where alpha is 0
    norm = logsumexp(scores)
    log_gamma = scores - norm
    gamma = np.exp(log_gamma)

    settings = {breakdowns[m].mc_settings for m in ids}
    unequal = len(settings) > 1
    if unequal:
        logger.debug(
            "combining objectives estimated at unequal MC settings: %s", settings
        )

    return CombinedPosterior(
        model_ids=ids,
        gamma=gamma,
        log_gamma=log_gamma,
        components={m: fits[m][0] for m in ids},
        per_model_elbo=breakdowns,
        unequal_mc_settings=unequal,
    )


def kl_uniform_box(lower, upper, bound: float) -> float:
    """KL from a product of uniforms on [lower_j, upper_j] to Uniform[-B, B]^p.

    Equals ``sum_j log(2B / (upper_j - lower_j))``; nonnegative because every
    interval is contained in [-B, B].
    """
    lo = _as_1d(lower, "lower")
    hi = _as_1d(upper, "upper")
    if lo.shape != hi.shape:
        raise ShapeError(f"endpoint shapes differ: {lo.shape} vs {hi.shape}")
    if not bound > 0:
        raise OutOfSupport(f"bound must be positive, got {bound!r}")
    widths = hi - lo
    if np.any(widths <= 0):
        j = int(np.argmax(widths <= 0))
        raise DegenerateBox(
            f"interval {j} is degenerate: ({lo[j]!r}, {hi[j]!r})"
        )
    if np.any(lo < -bound) or np.any(hi > bound):
        raise OutOfSupport(f"intervals must lie inside [-{bound}, {bound}]")
    return float(np.sum(np.log((2.0 * bound) / widths)))


def kl_categorical(gamma, alpha, *, sum_tol: float = 1e-9) -> float:
    """KL between two categorical distributions, with 0*log(0) = 0."""
    g = _as_1d(gamma, "gamma")
    a = _as_1d(alpha, "alpha")
    if g.shape != a.shape:
        raise ShapeError(f"length mismatch: {g.shape} vs {a.shape}")
    _check_probability_vector(g, "gamma", tol=sum_tol)
    _check_probability_vector(a, "alpha", tol=sum_tol)
    support = g > 0
    if np.any(support & (a == 0)):
        raise AbsoluteContinuityError(
            "gamma puts mass where alpha is zero"
        )
    val = float(np.sum(g[support] * (np.log(g[support]) - np.log(a[support]))))
    return max(val, 0.0)


def elbo_of_combination(
    collection: ModelCollection,
    gamma,
    per_model_elbo: Mapping[ModelId, ElboBreakdown | float],
) -> float:
    """Objective of the gamma-mixture of fitted states over disjoint supports.

    Equals ``KL(gamma, alpha) + sum_m gamma_m * total_m``; at the weights from
    :func:`combine_posteriors` this is the minimum over all gamma.
    """
    g = _as_1d(gamma, "gamma")
    if len(g) != len(collection):
        raise ShapeError("gamma length must match the collection")
    totals = np.array(
        [
            b.total if isinstance(b, ElboBreakdown) else float(b)
            for b in (per_model_elbo[m] for m in collection.model_ids)
        ],
        dtype=float,
    )
    kl = kl_categorical(g, collection.alpha)
    support = g > 0
    return kl + float(np.sum(g[support] * totals[support]))


class GapBoundResult(NamedTuple):
    gap: float
    bound: float
    holds: bool


def model_probability_gap_bound(
    gamma, alpha_hat, kl_to_posterior: float, *, slack: float = GAP_BOUND_SLACK
) -> GapBoundResult:
    """Squared L1 gap between model-weight vectors vs. twice a KL value.

    ``gap = (sum_m |gamma_m - alpha_hat_m|)^2``, ``bound = 2 * kl_to_posterior``;
    ``holds`` reports ``gap <= bound + slack``. A ``holds=False`` result flags
    an inconsistent input pair rather than raising.
    """
    g = _as_1d(gamma, "gamma")
    a = _as_1d(alpha_hat, "alpha_hat")
    if g.shape != a.shape:
        raise ShapeError(f"length mismatch: {g.shape} vs {a.shape}")
    kl = float(kl_to_posterior)
    if math.isnan(kl) or kl < 0:
        raise ShapeError(f"kl_to_posterior must be >= 0, got {kl!r}")
    gap = float(np.abs(g - a).sum()) ** 2
    bound = 2.0 * kl
    return GapBoundResult(gap=gap, bound=bound, holds=bool(gap <= bound + slack))


class ChangeOfMeasureResult(NamedTuple):
    lhs: float
    rhs: float
    holds: bool


def change_of_measure_check(
    xi1, xi2, g, *, slack: float = IDENTITY_TOL
) -> ChangeOfMeasureResult:
    """Check ``E_xi1[g] <= KL(xi1, xi2) + log E_xi2[e^g]`` on a finite support.

    The right-hand side's log expectation is evaluated with log-sum-exp.
    Used as a property-test utility over random finite instances.
    """
    p = _as_1d(xi1, "xi1")
    q = _as_1d(xi2, "xi2")
    gv = _as_1d(g, "g")
    if not (p.shape == q.shape == gv.shape):
        raise ShapeError("xi1, xi2, g must have equal lengths")
    kl = kl_categorical(p, q)  # raises AbsoluteContinuityError if xi1 not << xi2
    lhs = float(np.dot(p, gv))
    support = q > 0
    with np.errstate(divide="ignore"):
        rhs = kl + float(logsumexp(np.log(q[support]) + gv[support]))
    return ChangeOfMeasureResult(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + slack))

"""Single-model selection and selection-vs-averaging comparison instruments.

Selecting the argmax-weight model from a :class:`~avb.core.CombinedPosterior`
gives the "model selection" variant of the procedure. The helpers here report
the selection, check that the averaged objective never exceeds the selected
one (it cannot, since the combined weights minimize the mixture objective),
give the exact total-variation distance between the averaged and selected
posteriors (components live on disjoint spaces, so it is one minus the
selected weight), and evaluate a finite-atom risk-bound functional

    min_upsilon (1/upsilon) * ( KL(xi, posterior) + log E_posterior[exp(upsilon * n * d^2)] )

which dominates the expected scaled squared distance to the truth
``E_xi[n d^2]`` for every positive upsilon (change of measure plus division
by upsilon), hence also after minimizing over the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np
from scipy.special import logsumexp

from .core import (
    CombinedPosterior,
    ModelCollection,
    elbo_of_combination,
    kl_categorical,
)
from .errors import ShapeError

DOMINANCE_SLACK = 1e-10
DEFAULT_UPSILON_GRID = np.logspace(-3.0, 3.0, 41)


@dataclass(frozen=True)
class SelectionResult:
    """Argmax-weight model with the per-model selection scores.

    ``selection_scores[m] = total_m - log(alpha_m)``; the selected model
    minimizes this score, equivalently maximizes the combined weight. Exact
    weight ties are broken toward the lowest complexity score, then the
    lowest model id.
    """

    selected_model: object
    selection_scores: Mapping[object, float]
    gamma: np.ndarray
    model_ids: tuple

    @property
    def selected_weight(self) -> float:
        return float(self.gamma[self.model_ids.index(self.selected_model)])


def select_model(
    combined: CombinedPosterior, collection: ModelCollection
) -> SelectionResult:
    """Pick the argmax-weight model, with a deterministic tie rule."""
    ids = combined.model_ids
    if ids != collection.model_ids:
        raise ShapeError("combined posterior and collection disagree on models")
    scores = {
        m: float(combined.per_model_elbo[m].total - collection.log_alpha[i])
        for i, m in enumerate(ids)
    }
    gmax = float(np.max(combined.gamma))
    tied = [i for i, g in enumerate(combined.gamma) if g == gmax]
    if len(tied) > 1:
        tied.sort(key=lambda i: (collection.complexity(ids[i]), ids[i]))
    selected = ids[tied[0]]
    return SelectionResult(
        selected_model=selected,
        selection_scores=scores,
        gamma=combined.gamma.copy(),
        model_ids=ids,
    )


class DominanceResult(NamedTuple):
    avb_objective: float
    msvb_objective: float
    holds: bool


def objective_dominance(
    combined: CombinedPosterior,
    selection: SelectionResult,
    collection: ModelCollection,
    *,
    slack: float = DOMINANCE_SLACK,
) -> DominanceResult:
    """Averaged objective vs. selected-model objective.

    ``avb`` is the mixture objective at the combined weights; ``msvb`` is the
    selected model's score ``total - log(alpha)``. The combined weights
    minimize the mixture objective, so ``avb <= msvb`` always; ``holds``
    reports that with a small slack and is asserted on every experiment run.
    """
    avb = elbo_of_combination(collection, combined.gamma, combined.per_model_elbo)
    msvb = selection.selection_scores[selection.selected_model]
    return DominanceResult(
        avb_objective=float(avb),
        msvb_objective=float(msvb),
        holds=bool(avb <= msvb + slack),
    )


def tv_combined_vs_selected(
    combined: CombinedPosterior, selection: SelectionResult | None = None
) -> float:
    """Total variation between the averaged posterior and the selected one.

    Component states live on pairwise disjoint parameter spaces, so the
    distance is exactly ``1 - gamma[selected]``.
    """
    if selection is not None:
        return 1.0 - selection.selected_weight
    return float(1.0 - np.max(combined.gamma))


def expected_risk(xi_weights, n_d2) -> float:
    """Exact expectation of the scaled squared distance under atom weights xi."""
    xi = np.asarray(xi_weights, dtype=float)
    d = np.asarray(n_d2, dtype=float)
    if xi.shape != d.shape:
        raise ShapeError("xi_weights and n_d2 must have equal lengths")
    return float(np.dot(xi, d))


def risk_bound_functional(
    posterior_weights,
    xi_weights,
    n_d2,
    upsilon_grid=None,
) -> float:
    """Finite-atom risk bound: minimize over the upsilon grid.

    All three vectors live on the same atom set; ``n_d2`` holds the scaled
    squared distance of each atom to the truth. The exponential moment is
    evaluated in log domain, so large ``upsilon * n_d2`` products cannot
    overflow. Exact on finite atoms; not defined for continuous fits (those
    report the bound as unavailable instead of a noisy estimate).
    """
    post = np.asarray(posterior_weights, dtype=float)
    xi = np.asarray(xi_weights, dtype=float)
    d = np.asarray(n_d2, dtype=float)
    if not (post.shape == xi.shape == d.shape):
        raise ShapeError("posterior, xi, and n_d2 must have equal lengths")
    grid = (
        np.asarray(upsilon_grid, dtype=float)
        if upsilon_grid is not None
        else DEFAULT_UPSILON_GRID
    )
    if np.any(grid <= 0):
        raise ShapeError("upsilon grid must be positive")
    kl = kl_categorical(xi, post)
    support = post > 0
    log_post = np.log(post[support])
    best = np.inf
    for upsilon in grid:
        log_moment = float(logsumexp(log_post + upsilon * d[support]))
        best = min(best, (kl + log_moment) / upsilon)
    return float(best)

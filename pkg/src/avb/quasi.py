"""Quasi-posterior support: Gaussian quasi-likelihoods and their checkers.

Two settings share the module. For stochastic block models the quasi
log-likelihood is ``-sum_{i>j} (Y_ij - z_i' U z_j)^2`` over the
lower-triangular edge array; the variational family pairs a uniform interval
per community-pair connectivity with a categorical per node label, and every
expectation in the objective is closed form (first and second moments of
uniforms), so the block-coordinate fit needs no sampling. For regression the
quasi log-likelihood is ``-(kappa/2) sum_i (y_i - f(x_i))^2`` with a learning
rate ``kappa``, reusing the box-variational network machinery.

The module also ships exact finite-sample verifiers for the two
quasi-likelihood inequalities: the Bernoulli-edge expectation of the
likelihood ratio (computed as a product of two-point expectations) against
``exp(-nbar d^2 / 2)``, and the sub-Gaussian regression ratio against
``exp(-kappa (1 - kappa sigma^2) n ||f - f*||^2 / 2)`` — in closed form for
exactly Gaussian noise, by Monte Carlo otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp, xlogy

from .core import CombinedPosterior, ElboBreakdown, ModelCollection, combine_posteriors
from .deep import (
    FitConfig,
    NetArchitecture,
    _backprop,
    _forward_with_cache,
    fit_model,
    forward,
)
from .errors import NonFiniteObjective, NumericalBreakdown, OutOfSupport, ShapeError

MIN_INTERVAL_GAP = 1e-6
ROW_SUM_TOL = 1e-10
MONOTONE_SLACK = 1e-8
INEQUALITY_SLACK = 1e-12


# ---------------------------------------------------------------------------
# SBM data and model containers


@dataclass(frozen=True)
class SbmData:
    """Binary lower-triangular edge observations on ``node_count`` nodes.

    ``edges`` is flat over the pairs (i, j) with i > j, ordered (1,0), (2,0),
    (2,1), (3,0), ...
    """

    node_count: int
    edges: np.ndarray

    def __post_init__(self):
        if self.node_count < 2:
            raise ShapeError("node_count must be >= 2")
        flat = np.asarray(self.edges, dtype=float).ravel()
        if flat.shape != (self.edge_count,):
            raise ShapeError(
                f"edges must have length n(n-1)/2 = {self.edge_count}, "
                f"got {flat.shape[0]}"
            )
        if not np.all((flat == 0) | (flat == 1)):
            raise ShapeError("edges must be binary")
        object.__setattr__(self, "edges", flat)

    @property
    def edge_count(self) -> int:
        return self.node_count * (self.node_count - 1) // 2

    @classmethod
    def from_dense(cls, adjacency) -> "SbmData":
        adj = np.asarray(adjacency, dtype=float)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ShapeError("adjacency must be square")
        if not np.allclose(adj, adj.T):
            raise ShapeError("adjacency must be symmetric")
        n = adj.shape[0]
        rows, cols = np.tril_indices(n, k=-1)
        return cls(node_count=n, edges=adj[rows, cols])

    @classmethod
    def from_edge_list(cls, node_count: int, pairs) -> "SbmData":
        dense = np.zeros((node_count, node_count))
        for i, j in pairs:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < node_count and 0 <= j < node_count):
                raise ShapeError(f"invalid edge ({i}, {j}) for {node_count} nodes")
            dense[i, j] = dense[j, i] = 1.0
        return cls.from_dense(dense)

    def to_dense(self) -> np.ndarray:
        n = self.node_count
        dense = np.zeros((n, n))
        rows, cols = np.tril_indices(n, k=-1)
        dense[rows, cols] = self.edges
        return dense + dense.T

    @property
    def density(self) -> float:
        return float(self.edges.mean())


@dataclass(frozen=True)
class SbmModelSpec:
    """One candidate block model: a fixed community count."""

    community_count: int

    def __post_init__(self):
        if self.community_count < 1:
            raise ShapeError("community_count must be >= 1")


def sbm_log_prior_weights(
    community_counts: Sequence[int], node_count: int, b0: float = 1.0
) -> np.ndarray:
    """Unnormalized log model weights -b0 (m^2 log n + n log m)."""
    if node_count < 2:
        raise ShapeError("node_count must be >= 2")
    ms = np.asarray(community_counts, dtype=float)
    if np.any(ms < 1):
        raise ShapeError("community counts must be >= 1")
    return -b0 * (ms**2 * math.log(node_count) + node_count * np.log(ms))


@dataclass(frozen=True)
class SbmVariationalState:
    """Uniform intervals on the connectivity entries, categorical labels."""

    interval_lower: np.ndarray  # (m, m), symmetric
    interval_upper: np.ndarray  # (m, m), symmetric
    label_probs: np.ndarray  # (n, m), rows in the simplex

    def __post_init__(self):
        lo = np.asarray(self.interval_lower, dtype=float)
        hi = np.asarray(self.interval_upper, dtype=float)
        nu = np.asarray(self.label_probs, dtype=float)
        if lo.ndim != 2 or lo.shape[0] != lo.shape[1] or lo.shape != hi.shape:
            raise ShapeError("interval endpoint matrices must be square and matching")
        m = lo.shape[0]
        if not (np.allclose(lo, lo.T, atol=1e-12) and np.allclose(hi, hi.T, atol=1e-12)):
            raise ShapeError("interval endpoints must be symmetric matrices")
        if np.any(lo < -1e-12) or np.any(hi > 1 + 1e-12):
            raise OutOfSupport("intervals must lie inside [0, 1]")
        if np.any(hi - lo < MIN_INTERVAL_GAP * (1 - 1e-9)):
            raise OutOfSupport(
                f"interval widths must be at least {MIN_INTERVAL_GAP}"
            )
        if nu.ndim != 2 or nu.shape[1] != m:
            raise ShapeError("label_probs must have shape (n, m)")
        if np.any(nu < 0) or np.max(np.abs(nu.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ShapeError("label rows must be probabilities summing to 1")
        object.__setattr__(self, "interval_lower", 0.5 * (lo + lo.T))
        object.__setattr__(self, "interval_upper", 0.5 * (hi + hi.T))
        object.__setattr__(self, "label_probs", nu)

    @property
    def community_count(self) -> int:
        return self.interval_lower.shape[0]

    @property
    def node_count(self) -> int:
        return self.label_probs.shape[0]

    def interval_moments(self) -> tuple:
        """Entrywise E[U] and E[U^2] of the uniform intervals."""
        lo, hi = self.interval_lower, self.interval_upper
        return 0.5 * (lo + hi), (lo * lo + lo * hi + hi * hi) / 3.0

    def expected_connectivity(self) -> np.ndarray:
        first, _ = self.interval_moments()
        return self.label_probs @ first @ self.label_probs.T

    def hard_labels(self) -> np.ndarray:
        return self.label_probs.argmax(axis=1)

    def permute_communities(self, order) -> "SbmVariationalState":
        idx = np.asarray(order)
        return SbmVariationalState(
            interval_lower=self.interval_lower[np.ix_(idx, idx)],
            interval_upper=self.interval_upper[np.ix_(idx, idx)],
            label_probs=self.label_probs[:, idx],
        )

    def permute_nodes(self, order) -> "SbmVariationalState":
        return SbmVariationalState(
            interval_lower=self.interval_lower,
            interval_upper=self.interval_upper,
            label_probs=self.label_probs[np.asarray(order)],
        )


# ---------------------------------------------------------------------------
# quasi log-likelihood and exact objective


def sbm_quasi_loglik(data: SbmData, connectivity, labels_onehot) -> float:
    """Plug-in quasi log-likelihood -sum_{i>j} (Y_ij - z_i' U z_j)^2."""
    u = np.asarray(connectivity, dtype=float)
    z = np.asarray(labels_onehot, dtype=float)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise ShapeError("connectivity must be square")
    if not np.allclose(u, u.T, atol=1e-12):
        raise ShapeError("connectivity must be symmetric")
    if z.ndim != 2 or z.shape != (data.node_count, u.shape[0]):
        raise ShapeError(
            f"labels must have shape ({data.node_count}, {u.shape[0]})"
        )
    if not np.all((z == 0) | (z == 1)) or not np.all(z.sum(axis=1) == 1):
        raise ShapeError("labels must be one-hot rows")
    omega = z @ u @ z.T
    rows, cols = np.tril_indices(data.node_count, k=-1)
    resid = data.edges - omega[rows, cols]
    return -float(resid @ resid)


def _pair_weight_matrices(data: SbmData, nu: np.ndarray) -> tuple:
    """Aggregate responsibilities over unordered node pairs.

    Returns (A, B) where, for k != h, A[k,h] multiplies the second moment of
    U_{kh} in the expected loss and B[k,h] multiplies its first moment (the
    A/B entries already include both label orders); the diagonals count each
    unordered pair once.
    """
    y = data.to_dense()
    col_sums = nu.sum(axis=0)
    cross = col_sums[:, None] * col_sums[None, :] - nu.T @ nu
    a = cross.copy()
    np.fill_diagonal(a, 0.5 * np.diag(cross))
    yq = nu.T @ y @ nu
    b = yq.copy()
    np.fill_diagonal(b, 0.5 * np.diag(yq))
    return a, b


def sbm_expected_quasi_nll(data: SbmData, state: SbmVariationalState) -> float:
    """Exact E_q[sum_{i>j} (Y_ij - z_i' U z_j)^2]."""
    first, second = state.interval_moments()
    a, b = _pair_weight_matrices(data, state.label_probs)
    upper = np.triu(np.ones_like(first, dtype=bool))
    y_sq = float(np.sum(data.edges**2))
    return y_sq - 2.0 * float(np.sum((b * first)[upper])) + float(
        np.sum((a * second)[upper])
    )


def sbm_kl_to_prior(state: SbmVariationalState) -> float:
    """Exact KL of intervals to Unif(0,1) plus labels to Cat(1/m)."""
    widths = state.interval_upper - state.interval_lower
    upper = np.triu(np.ones_like(widths, dtype=bool))
    interval_kl = float(-np.sum(np.log(widths[upper])))
    nu = state.label_probs
    label_kl = state.node_count * math.log(state.community_count) + float(
        np.sum(xlogy(nu, nu))
    )
    return interval_kl + label_kl


def sbm_evaluate_objective(
    data: SbmData, state: SbmVariationalState
) -> ElboBreakdown:
    return ElboBreakdown.of(
        expected_nll=sbm_expected_quasi_nll(data, state),
        kl_to_prior=sbm_kl_to_prior(state),
    )


# ---------------------------------------------------------------------------
# block-coordinate fit


def _label_sweep(data: SbmData, state: SbmVariationalState) -> SbmVariationalState:
    """Sequential exact categorical updates (one pass over the nodes)."""
    first, second = state.interval_moments()
    y = data.to_dense()
    nu = state.label_probs.copy()
    col_sums = nu.sum(axis=0)
    weighted = y @ nu  # row i: sum_j Y_ij nu_j
    for i in range(data.node_count):
        cost = -2.0 * (first @ weighted[i]) + second @ (col_sums - nu[i])
        log_new = -cost - logsumexp(-cost)
        new_row = np.exp(log_new)
        delta = new_row - nu[i]
        if np.any(np.abs(delta) > 0):
            col_sums += delta
            weighted += np.outer(y[:, i], delta)
            nu[i] = new_row
    return SbmVariationalState(
        interval_lower=state.interval_lower,
        interval_upper=state.interval_upper,
        label_probs=nu,
    )


def _project_intervals(lo, hi):
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(hi, 0.0, 1.0)
    narrow = hi - lo < MIN_INTERVAL_GAP
    if np.any(narrow):
        center = np.clip(
            0.5 * (lo + hi), MIN_INTERVAL_GAP / 2, 1.0 - MIN_INTERVAL_GAP / 2
        )
        lo = np.where(narrow, center - MIN_INTERVAL_GAP / 2, lo)
        hi = np.where(narrow, center + MIN_INTERVAL_GAP / 2, hi)
    lo = 0.5 * (lo + lo.T)
    hi = 0.5 * (hi + hi.T)
    return lo, hi


def _interval_gradients(data: SbmData, state: SbmVariationalState) -> tuple:
    lo, hi = state.interval_lower, state.interval_upper
    a, b = _pair_weight_matrices(data, state.label_probs)
    widths = hi - lo
    # d/dpsi of  -2 B M1 + A M2 + KL  per symmetric entry
    g_lo = -b + a * (2.0 * lo + hi) / 3.0 + 1.0 / widths
    g_hi = -b + a * (lo + 2.0 * hi) / 3.0 - 1.0 / widths
    g_lo = 0.5 * (g_lo + g_lo.T)
    g_hi = 0.5 * (g_hi + g_hi.T)
    return g_lo, g_hi


def _interval_step(
    data: SbmData,
    state: SbmVariationalState,
    current_objective: float,
    step: float,
    max_backtracks: int = 30,
) -> tuple:
    """Projected-gradient endpoint update with backtracking line search.

    Returns (state, objective, step); falls back to the input state when no
    trial step improves the objective, so the sweep never increases it.
    """
    g_lo, g_hi = _interval_gradients(data, state)
    if not (np.all(np.isfinite(g_lo)) and np.all(np.isfinite(g_hi))):
        raise NumericalBreakdown("non-finite interval gradient")
    trial = step
    for _ in range(max_backtracks):
        lo, hi = _project_intervals(
            state.interval_lower - trial * g_lo,
            state.interval_upper - trial * g_hi,
        )
        candidate = SbmVariationalState(
            interval_lower=lo, interval_upper=hi, label_probs=state.label_probs
        )
        value = sbm_evaluate_objective(data, candidate).total
        if value <= current_objective:
            return candidate, value, min(trial * 1.5, 1.0)
        trial *= 0.5
    return state, current_objective, trial


def _intervals_from_labels(
    data: SbmData, labels: np.ndarray, m: int, halfwidth: float = 0.15
) -> tuple:
    """Center each interval at the smoothed block-pair edge density."""
    onehot = np.zeros((data.node_count, m))
    onehot[np.arange(data.node_count), labels] = 1.0
    counts = onehot.sum(axis=0)
    pair_counts = np.outer(counts, counts) - np.diag(counts)
    np.fill_diagonal(pair_counts, np.diag(pair_counts) / 2)
    edge_sums = onehot.T @ data.to_dense() @ onehot
    np.fill_diagonal(edge_sums, np.diag(edge_sums) / 2)
    centers = (edge_sums + 0.5) / (pair_counts + 1.0)
    return _project_intervals(centers - halfwidth, centers + halfwidth)


def sbm_initial_state(
    data: SbmData, spec: SbmModelSpec, rng: np.random.Generator
) -> SbmVariationalState:
    """Random hard labels; intervals centered at the implied block densities."""
    m = spec.community_count
    labels = rng.integers(m, size=data.node_count)
    nu = np.full((data.node_count, m), 0.1 / m)
    nu[np.arange(data.node_count), labels] += 0.9
    lo, hi = _intervals_from_labels(data, labels, m)
    return SbmVariationalState(interval_lower=lo, interval_upper=hi, label_probs=nu)


def sbm_spectral_state(
    data: SbmData, spec: SbmModelSpec, rng: np.random.Generator
) -> SbmVariationalState:
    """Labels from k-means on the leading adjacency eigenvectors."""
    m = spec.community_count
    if m == 1:
        labels = np.zeros(data.node_count, dtype=int)
    else:
        vals, vecs = np.linalg.eigh(data.to_dense())
        top = np.argsort(-np.abs(vals))[:m]
        embedding = vecs[:, top]
        _, labels = kmeans2(embedding, m, seed=rng, minit="++")
    nu = np.full((data.node_count, m), 0.1 / m)
    nu[np.arange(data.node_count), labels] += 0.9
    lo, hi = _intervals_from_labels(data, labels, m)
    return SbmVariationalState(interval_lower=lo, interval_upper=hi, label_probs=nu)


def canonicalize_communities(state: SbmVariationalState) -> SbmVariationalState:
    """Relabel communities in decreasing order of estimated size."""
    sizes = state.label_probs.sum(axis=0)
    order = np.argsort(-sizes, kind="stable")
    return state.permute_communities(order)


@dataclass(frozen=True)
class SbmFitResult:
    state: SbmVariationalState
    breakdown: ElboBreakdown
    objective_trace: np.ndarray
    converged: bool
    iterations: int


def sbm_fit(
    data: SbmData,
    spec: SbmModelSpec,
    init: SbmVariationalState | None = None,
    iters: int = 100,
    rng: np.random.Generator | None = None,
    tol: float = 1e-9,
) -> SbmFitResult:
    """Block-coordinate descent; the objective trace is nonincreasing."""
    if init is None:
        if rng is None:
            rng = np.random.default_rng(0)
        init = sbm_initial_state(data, spec, rng)
    if init.node_count != data.node_count:
        raise ShapeError("initial state node count does not match the data")
    if init.community_count != spec.community_count:
        raise ShapeError(
            "initial state community count does not match the requested model"
        )
    state = init
    objective = sbm_evaluate_objective(data, state).total
    if not math.isfinite(objective):
        raise NumericalBreakdown("initial objective is not finite")
    trace = [objective]
    step = 0.05
    converged = False
    iteration = 0
    for iteration in range(1, iters + 1):
        state = _label_sweep(data, state)
        after_labels = sbm_evaluate_objective(data, state).total
        state, objective, step = _interval_step(data, state, after_labels, step)
        trace.append(objective)
        if abs(trace[-2] - trace[-1]) < tol * (1.0 + abs(trace[-1])):
            converged = True
            break
    state = canonicalize_communities(state)
    return SbmFitResult(
        state=state,
        breakdown=sbm_evaluate_objective(data, state),
        objective_trace=np.asarray(trace),
        converged=converged,
        iterations=iteration,
    )


def sbm_fit_restarts(
    data: SbmData,
    spec: SbmModelSpec,
    seed=0,
    restarts: int = 3,
    iters: int = 100,
    tol: float = 1e-9,
) -> SbmFitResult:
    """Best of several seeded fits, compared on the final objective.

    ``seed`` may be an int or a sequence of ints; restart r draws from the
    substream keyed by (seed..., r).
    """
    if restarts < 1:
        raise ShapeError("restarts must be >= 1")
    key = [int(s) for s in np.atleast_1d(seed)]
    best: SbmFitResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng(key + [r])
        init = (
            sbm_spectral_state(data, spec, rng)
            if r == 0
            else sbm_initial_state(data, spec, rng)
        )
        result = sbm_fit(data, spec, init=init, iters=iters, tol=tol)
        if best is None or result.breakdown.total < best.breakdown.total:
            best = result
    return best


def sbm_model_collection(
    community_counts: Sequence[int], node_count: int, b0: float = 1.0
) -> ModelCollection:
    """Candidate block models weighted by exp(-b0 (m^2 log n + n log m))."""
    counts = [int(m) for m in community_counts]
    if len(set(counts)) != len(counts):
        raise ShapeError("community counts must be distinct")
    log_w = sbm_log_prior_weights(counts, node_count, b0=b0)
    models = tuple((m, SbmModelSpec(community_count=m), float(m)) for m in counts)
    return ModelCollection.from_log_weights(models, log_w, b0=b0)


def _flat_seed_key(seed, *extra) -> list:
    """Flatten an int-or-sequence seed plus extra stream tags into one key."""
    return [int(s) for s in np.atleast_1d(seed)] + [int(e) for e in extra]


def sbm_fit_adaptive(
    data: SbmData,
    community_counts: Sequence[int],
    seed=0,
    b0: float = 1.0,
    restarts: int = 3,
    iters: int = 100,
) -> CombinedPosterior:
    """Fit every candidate community count and combine the quasi-posteriors.

    ``seed`` may be an int or a sequence of ints; model index idx fits on the
    substream keyed by (seed..., idx).
    """
    collection = sbm_model_collection(community_counts, data.node_count, b0=b0)
    fits = {}
    for idx, m in enumerate(collection.model_ids):
        result = sbm_fit_restarts(
            data,
            SbmModelSpec(community_count=m),
            seed=_flat_seed_key(seed, idx),
            restarts=restarts,
            iters=iters,
        )
        fits[m] = (result.state, result.breakdown)
    return combine_posteriors(collection, fits)


def sample_planted_partition(
    node_count: int,
    within: float,
    between: float,
    seed: int,
    communities: int = 2,
):
    """Balanced planted-partition graph; returns (SbmData, true labels)."""
    if not (0 <= between <= 1 and 0 <= within <= 1):
        raise OutOfSupport("edge probabilities must lie in [0, 1]")
    if communities < 1 or node_count < communities:
        raise ShapeError("need at least one node per community")
    rng = np.random.default_rng(seed)
    labels = np.arange(node_count) % communities
    rows, cols = np.tril_indices(node_count, k=-1)
    probs = np.where(labels[rows] == labels[cols], within, between)
    edges = (rng.random(len(probs)) < probs).astype(float)
    return SbmData(node_count=node_count, edges=edges), labels


def label_accuracy(predicted, truth, communities: int) -> float:
    """Best agreement over community relabelings (exhaustive, small m)."""
    from itertools import permutations

    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    best = 0.0
    for perm in permutations(range(communities)):
        mapped = np.asarray(perm)[predicted]
        best = max(best, float((mapped == truth).mean()))
    return best


# ---------------------------------------------------------------------------
# exact inequality checkers


@dataclass(frozen=True)
class InequalityCheck:
    lhs: float
    rhs: float
    holds: bool


def _validate_connectivity_pair(omega0, omega1) -> tuple:
    a = np.asarray(omega0, dtype=float).ravel()
    b = np.asarray(omega1, dtype=float).ravel()
    if a.shape != b.shape or len(a) == 0:
        raise ShapeError("connectivity arrays must be nonempty and matching")
    if np.any((a < 0) | (a > 1) | (b < 0) | (b > 1)):
        raise OutOfSupport("connectivity entries must lie in [0, 1]")
    return a, b


def sbm_learning_inequality_check(omega0, omega1) -> InequalityCheck:
    """Exact edge-product expectation of the quasi-likelihood ratio.

    lhs = prod_e E_{Y~Bern(omega0_e)} exp(-(Y-omega1_e)^2 + (Y-omega0_e)^2),
    rhs = exp(-sum_e (omega0_e - omega1_e)^2 / 2).
    """
    a, b = _validate_connectivity_pair(omega0, omega1)
    with_edge = np.exp(-((1 - b) ** 2) + (1 - a) ** 2)
    without_edge = np.exp(-(b**2) + a**2)
    log_lhs = float(np.sum(np.log(a * with_edge + (1 - a) * without_edge)))
    log_rhs = -0.5 * float(np.sum((a - b) ** 2))
    lhs, rhs = math.exp(log_lhs), math.exp(log_rhs)
    return InequalityCheck(lhs=lhs, rhs=rhs, holds=lhs <= rhs * (1 + INEQUALITY_SLACK))


def sbm_moment_inequality_check(omega0, omega1, rho: float) -> InequalityCheck:
    """Exact rho-th moment of the inverted ratio vs exp(rho(rho+2) nbar d^2/2)."""
    if not rho > 0:
        raise OutOfSupport("rho must be positive")
    a, b = _validate_connectivity_pair(omega0, omega1)
    with_edge = np.exp(rho * (-((1 - a) ** 2) + (1 - b) ** 2))
    without_edge = np.exp(rho * (-(a**2) + b**2))
    log_lhs = float(np.sum(np.log(a * with_edge + (1 - a) * without_edge)))
    log_rhs = 0.5 * rho * (rho + 2.0) * float(np.sum((a - b) ** 2))
    lhs, rhs = math.exp(log_lhs), math.exp(log_rhs)
    return InequalityCheck(lhs=lhs, rhs=rhs, holds=lhs <= rhs * (1 + INEQUALITY_SLACK))


@dataclass(frozen=True)
class SubGaussCheck:
    lhs_estimate: float
    rhs: float
    margin: float
    standard_error: float
    exact: bool

    @property
    def holds(self) -> bool:
        if self.exact:
            return self.lhs_estimate <= self.rhs * (1 + INEQUALITY_SLACK)
        return self.lhs_estimate <= self.rhs + 3 * self.standard_error


def subgauss_inequality_check(
    f,
    f_star,
    kappa: float,
    sigma: float,
    noise_sampler: Callable | None = None,
    mc: int = 10_000,
    rng: np.random.Generator | None = None,
) -> SubGaussCheck:
    """Quasi-likelihood ratio expectation vs the tempered-rate bound.

    ``f`` and ``f_star`` are fitted and true values on the n design points.
    With ``noise_sampler`` omitted the noise is exactly N(0, sigma^2) and the
    expectation is closed form (a lognormal moment) — for that case lhs and
    rhs agree exactly. Otherwise ``noise_sampler(rng, size)`` draws the
    noise and the expectation is estimated from ``mc`` samples.
    """
    if not kappa > 0:
        raise OutOfSupport("kappa must be positive")
    if not sigma > 0:
        raise OutOfSupport("sigma must be positive")
    fv = np.asarray(f, dtype=float).ravel()
    gv = np.asarray(f_star, dtype=float).ravel()
    if fv.shape != gv.shape or len(fv) == 0:
        raise ShapeError("f and f_star must be nonempty matching arrays")
    delta = gv - fv
    sq = float(delta @ delta)
    rhs = math.exp(-0.5 * kappa * (1.0 - kappa * sigma**2) * sq)
    if noise_sampler is None:
        # E exp(-kappa sum_i eps_i delta_i) = exp(kappa^2 sigma^2 sq / 2)
        lhs = math.exp(-0.5 * kappa * sq + 0.5 * kappa**2 * sigma**2 * sq)
        return SubGaussCheck(
            lhs_estimate=lhs, rhs=rhs, margin=0.0, standard_error=0.0, exact=True
        )
    if mc < 10_000:
        raise ShapeError("mc must be at least 10_000")
    if rng is None:
        rng = np.random.default_rng(0)
    eps = np.asarray(noise_sampler(rng, (mc, len(fv))), dtype=float)
    if eps.shape != (mc, len(fv)):
        raise ShapeError("noise_sampler must return an array of shape (mc, n)")
    ratios = np.exp(-0.5 * kappa * sq - kappa * (eps @ delta))
    estimate = float(ratios.mean())
    se = float(ratios.std(ddof=1) / math.sqrt(mc))
    margin = (rhs - estimate) / se if se > 0 else math.inf
    return SubGaussCheck(
        lhs_estimate=estimate,
        rhs=rhs,
        margin=margin,
        standard_error=se,
        exact=False,
    )


# ---------------------------------------------------------------------------
# tempered regression over network grids


@dataclass(frozen=True)
class QuasiRegressionAdapter:
    """Tempered quadratic loss -(kappa/2) sum (y - f(x))^2."""

    x: np.ndarray
    y: np.ndarray
    learning_rate: float
    variance_proxy: float | None = None
    tag: str = "quasi_regression"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise OutOfSupport("learning_rate must be positive")
        if self.variance_proxy is not None and not self.variance_proxy > 0:
            raise OutOfSupport("variance_proxy must be positive when supplied")
        xb = np.asarray(self.x, dtype=float)
        if xb.ndim == 1:
            xb = xb[:, None]
        yb = np.asarray(self.y, dtype=float).ravel()
        if len(xb) == 0 or len(xb) != len(yb):
            raise ShapeError("x and y must be nonempty with matching lengths")
        object.__setattr__(self, "x", xb)
        object.__setattr__(self, "y", yb)

    @property
    def sample_size(self) -> int:
        return len(self.y)

    def subset(self, indices) -> "QuasiRegressionAdapter":
        idx = np.asarray(indices)
        return QuasiRegressionAdapter(
            x=self.x[idx],
            y=self.y[idx],
            learning_rate=self.learning_rate,
            variance_proxy=self.variance_proxy,
            tag=self.tag,
        )

    @property
    def rate_is_valid(self) -> bool | None:
        """kappa < 1/sigma^2 check, when a variance proxy was supplied."""
        if self.variance_proxy is None:
            return None
        return self.learning_rate < 1.0 / self.variance_proxy

    def log_likelihood(self, arch, theta) -> float:
        resid = self.y - forward(arch, theta, self.x)
        val = -0.5 * self.learning_rate * float(resid @ resid)
        if not math.isfinite(val):
            raise NonFiniteObjective("quasi log-likelihood is not finite")
        return val

    def loglik_and_grad(self, arch, theta):
        layers, acts, masks, fh = _forward_with_cache(arch, theta, self.x)
        resid = self.y - fh
        val = -0.5 * self.learning_rate * float(resid @ resid)
        if not math.isfinite(val):
            raise NonFiniteObjective("quasi log-likelihood is not finite")
        grad = _backprop(arch, layers, acts, masks, self.learning_rate * resid)
        return val, grad


def network_grid_collection(
    architectures: Mapping[str, NetArchitecture],
    sample_size: int,
    b0: float = 1e-5,
) -> ModelCollection:
    """Model collection over a (depth, width) grid with complexity K*M."""
    models = tuple(
        (mid, arch, float(arch.depth * arch.width))
        for mid, arch in architectures.items()
    )
    return ModelCollection.from_complexity(
        models, scale=math.log(sample_size), b0=b0
    )


def quasi_fit_deep(
    architectures: Mapping[str, NetArchitecture],
    adapter: QuasiRegressionAdapter,
    config: FitConfig,
    b0: float = 1e-5,
) -> CombinedPosterior:
    """Fit every architecture with the tempered loss and combine the fits.

    Each architecture trains on the substream keyed by (config.seed..., idx),
    so ``config.seed`` may itself be an int or a sequence of ints.
    """
    collection = network_grid_collection(architectures, adapter.sample_size, b0=b0)
    fits = {}
    for idx, (mid, arch) in enumerate(architectures.items()):
        model_config = replace(config, seed=tuple(_flat_seed_key(config.seed, idx)))
        result = fit_model(arch, adapter, model_config)
        fits[mid] = (result.state, result.breakdown)
    return combine_posteriors(collection, fits)

"""Mean-field variational Bayes for Gaussian location-scale mixtures.

Each candidate model fixes a component count ``m``; the priors are independent
per component: a wide Gaussian on each mean, a Wishart on each precision, and
a symmetric Dirichlet on the mixing weights. Coordinate ascent alternates an
exact responsibility update with exact conjugate updates for the weight,
mean, and precision factors; because the mean prior does not couple to the
precision, the mean factor's precision is ``prior_cov^{-1} + N_k E[Lambda_k]``
rather than a scaled copy of the component precision.

The reported objective splits as ``expected_nll + kl_to_prior`` where the
first term is the expected complete-data negative log-likelihood plus the
label-factor entropy and the second is the exact KL of the parameter factors
to their priors — their sum is the negative ELBO, and every piece is closed
form (no Monte Carlo).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp, multigammaln, xlogy

from .core import CombinedPosterior, ElboBreakdown
from .errors import NumericalBreakdown, OutOfSupport, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
ROW_SUM_TOL = 1e-10
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 500
DEFAULT_RESTARTS = 5


def _as_spd(name: str, mat, dim: int) -> np.ndarray:
    arr = np.asarray(mat, dtype=float)
    if arr.shape != (dim, dim):
        raise ShapeError(f"{name} must have shape ({dim}, {dim}), got {arr.shape}")
    if not np.allclose(arr, arr.T, atol=1e-10):
        raise OutOfSupport(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(arr)
    except np.linalg.LinAlgError:
        raise OutOfSupport(f"{name} must be positive definite") from None
    return 0.5 * (arr + arr.T)


def _spd_logdet(mat: np.ndarray, context: str, iteration: int | None = None) -> float:
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NumericalBreakdown(
            f"covariance update lost positive definiteness in {context}",
            iteration=iteration,
        ) from None
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


@dataclass(frozen=True)
class MixtureModelSpec:
    """Priors for one candidate mixture model with a fixed component count."""

    component_count: int
    dim: int
    mean_prior_mean: np.ndarray
    mean_prior_cov: np.ndarray
    wishart_dof: float
    wishart_scale: np.ndarray
    dirichlet_concentration: float = 1.0

    def __post_init__(self):
        if self.component_count < 1:
            raise ShapeError("component_count must be >= 1")
        if self.dim < 1:
            raise ShapeError("dim must be >= 1")
        if not self.wishart_dof > self.dim - 1:
            raise OutOfSupport("wishart_dof must exceed dim - 1")
        if not self.dirichlet_concentration > 0:
            raise OutOfSupport("dirichlet_concentration must be positive")
        mean = np.asarray(self.mean_prior_mean, dtype=float).ravel()
        if mean.shape != (self.dim,):
            raise ShapeError("mean_prior_mean must have length dim")
        object.__setattr__(self, "mean_prior_mean", mean)
        object.__setattr__(
            self, "mean_prior_cov", _as_spd("mean_prior_cov", self.mean_prior_cov, self.dim)
        )
        object.__setattr__(
            self, "wishart_scale", _as_spd("wishart_scale", self.wishart_scale, self.dim)
        )

    @classmethod
    def default(cls, component_count: int, dim: int = 2) -> "MixtureModelSpec":
        """Wide-mean / unit-mean-precision priors used by the 2-d experiment."""
        return cls(
            component_count=component_count,
            dim=dim,
            mean_prior_mean=np.zeros(dim),
            mean_prior_cov=100.0 * np.eye(dim),
            wishart_dof=10.0,
            wishart_scale=0.1 * np.eye(dim),
            dirichlet_concentration=1.0,
        )


@dataclass(frozen=True)
class MixtureVariationalState:
    """Mean-field factors: labels, weights, means, precisions."""

    responsibilities: np.ndarray  # (n, m), row-stochastic
    weight_concentration: np.ndarray  # (m,)
    mean_locations: np.ndarray  # (m, d)
    mean_covariances: np.ndarray  # (m, d, d)
    wishart_dofs: np.ndarray  # (m,)
    wishart_scales: np.ndarray  # (m, d, d)

    def __post_init__(self):
        resp = np.asarray(self.responsibilities, dtype=float)
        if resp.ndim != 2:
            raise ShapeError("responsibilities must be an (n, m) matrix")
        n, m = resp.shape
        if np.any(resp < 0) or np.max(np.abs(resp.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ShapeError(
                f"responsibility rows must be probabilities summing to 1 "
                f"within {ROW_SUM_TOL}"
            )
        conc = np.asarray(self.weight_concentration, dtype=float).ravel()
        locs = np.asarray(self.mean_locations, dtype=float)
        covs = np.asarray(self.mean_covariances, dtype=float)
        dofs = np.asarray(self.wishart_dofs, dtype=float).ravel()
        scales = np.asarray(self.wishart_scales, dtype=float)
        if locs.ndim != 2 or locs.shape[0] != m:
            raise ShapeError("mean_locations must have shape (m, d)")
        d = locs.shape[1]
        if conc.shape != (m,) or dofs.shape != (m,):
            raise ShapeError("weight_concentration and wishart_dofs must have length m")
        if covs.shape != (m, d, d) or scales.shape != (m, d, d):
            raise ShapeError("covariance stacks must have shape (m, d, d)")
        if np.any(conc <= 0):
            raise OutOfSupport("weight_concentration entries must be positive")
        if np.any(dofs <= d - 1):
            raise OutOfSupport("wishart_dofs must exceed d - 1")
        for k in range(m):
            _as_spd(f"mean_covariances[{k}]", covs[k], d)
            _as_spd(f"wishart_scales[{k}]", scales[k], d)
        object.__setattr__(self, "responsibilities", resp)
        object.__setattr__(self, "weight_concentration", conc)
        object.__setattr__(self, "mean_locations", locs)
        object.__setattr__(self, "mean_covariances", covs)
        object.__setattr__(self, "wishart_dofs", dofs)
        object.__setattr__(self, "wishart_scales", scales)

    @property
    def sample_size(self) -> int:
        return self.responsibilities.shape[0]

    @property
    def component_count(self) -> int:
        return self.responsibilities.shape[1]

    @property
    def dim(self) -> int:
        return self.mean_locations.shape[1]

    def expected_precisions(self) -> np.ndarray:
        return self.wishart_dofs[:, None, None] * self.wishart_scales

    def posterior_mixture_weights(self) -> np.ndarray:
        return self.weight_concentration / self.weight_concentration.sum()

    def permute_components(self, order) -> "MixtureVariationalState":
        idx = np.asarray(order)
        return MixtureVariationalState(
            responsibilities=self.responsibilities[:, idx],
            weight_concentration=self.weight_concentration[idx],
            mean_locations=self.mean_locations[idx],
            mean_covariances=self.mean_covariances[idx],
            wishart_dofs=self.wishart_dofs[idx],
            wishart_scales=self.wishart_scales[idx],
        )

    def with_responsibilities(self, resp) -> "MixtureVariationalState":
        return MixtureVariationalState(
            responsibilities=resp,
            weight_concentration=self.weight_concentration,
            mean_locations=self.mean_locations,
            mean_covariances=self.mean_covariances,
            wishart_dofs=self.wishart_dofs,
            wishart_scales=self.wishart_scales,
        )


# ---------------------------------------------------------------------------
# expectations and exact KL terms


def _expected_log_weights(conc: np.ndarray) -> np.ndarray:
    return digamma(conc) - digamma(conc.sum())


def _expected_log_det_precision(dof: float, scale: np.ndarray) -> float:
    d = scale.shape[0]
    terms = sum(digamma(0.5 * (dof + 1 - j)) for j in range(1, d + 1))
    return terms + d * math.log(2.0) + _spd_logdet(scale, "wishart scale")


def kl_dirichlet(conc: np.ndarray, prior_conc: float) -> float:
    m = len(conc)
    if m == 1:
        return 0.0
    a0 = conc.sum()
    b = np.full(m, prior_conc)
    b0 = b.sum()
    return float(
        gammaln(a0)
        - np.sum(gammaln(conc))
        - gammaln(b0)
        + np.sum(gammaln(b))
        + np.sum((conc - b) * (digamma(conc) - digamma(a0)))
    )


def kl_gaussian(mean, cov, prior_mean, prior_cov) -> float:
    d = len(mean)
    prior_chol = np.linalg.cholesky(prior_cov)
    solve = np.linalg.solve
    diff = mean - prior_mean
    white = solve(prior_chol, diff)
    trace_term = float(np.trace(solve(prior_cov, cov)))
    return 0.5 * (
        trace_term
        + float(white @ white)
        - d
        + _spd_logdet(prior_cov, "gaussian prior covariance")
        - _spd_logdet(cov, "gaussian factor covariance")
    )


def kl_wishart(dof, scale, prior_dof, prior_scale) -> float:
    d = scale.shape[0]
    e_logdet = _expected_log_det_precision(dof, scale)
    trace_term = float(np.trace(np.linalg.solve(prior_scale, scale)))
    return float(
        0.5 * (dof - prior_dof) * e_logdet
        + 0.5 * dof * (trace_term - d)
        - 0.5 * dof * d * math.log(2.0)
        - 0.5 * dof * _spd_logdet(scale, "wishart factor scale")
        + 0.5 * prior_dof * d * math.log(2.0)
        + 0.5 * prior_dof * _spd_logdet(prior_scale, "wishart prior scale")
        + multigammaln(0.5 * prior_dof, d)
        - multigammaln(0.5 * dof, d)
    )


def evaluate_objective(
    spec: MixtureModelSpec, data: np.ndarray, state: MixtureVariationalState
) -> ElboBreakdown:
    """Exact negative-ELBO split for a state on a dataset (closed form)."""
    x = _check_data(spec, data)
    if state.component_count != spec.component_count or state.dim != spec.dim:
        raise ShapeError("state does not match the model spec")
    if state.sample_size != len(x):
        raise ShapeError(
            f"state carries {state.sample_size} responsibility rows "
            f"for {len(x)} data points"
        )
    resp = state.responsibilities
    e_log_w = _expected_log_weights(state.weight_concentration)
    complete_data = 0.0
    for k in range(spec.component_count):
        e_prec = state.wishart_dofs[k] * state.wishart_scales[k]
        e_logdet = _expected_log_det_precision(
            state.wishart_dofs[k], state.wishart_scales[k]
        )
        diff = x - state.mean_locations[k]
        quad = np.einsum("ni,ij,nj->n", diff, e_prec, diff) + float(
            np.trace(e_prec @ state.mean_covariances[k])
        )
        per_point = e_log_w[k] + 0.5 * e_logdet - 0.5 * spec.dim * LOG_2PI - 0.5 * quad
        complete_data += float(resp[:, k] @ per_point)
    label_entropy = float(np.sum(xlogy(resp, resp)))
    expected_nll = -complete_data + label_entropy

    kl = kl_dirichlet(state.weight_concentration, spec.dirichlet_concentration)
    for k in range(spec.component_count):
        kl += kl_gaussian(
            state.mean_locations[k],
            state.mean_covariances[k],
            spec.mean_prior_mean,
            spec.mean_prior_cov,
        )
        kl += kl_wishart(
            state.wishart_dofs[k],
            state.wishart_scales[k],
            spec.wishart_dof,
            spec.wishart_scale,
        )
    return ElboBreakdown.of(expected_nll=expected_nll, kl_to_prior=kl)


# ---------------------------------------------------------------------------
# coordinate updates


def _check_data(spec: MixtureModelSpec, data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise ShapeError(f"data must have shape (n, {spec.dim})")
    if len(x) == 0:
        raise ShapeError("data must be nonempty")
    if not np.all(np.isfinite(x)):
        raise ShapeError("data must be finite")
    return x


def update_responsibilities(
    spec: MixtureModelSpec, data, state: MixtureVariationalState
) -> MixtureVariationalState:
    """Exact label-factor update given the current parameter factors."""
    x = _check_data(spec, data)
    m = spec.component_count
    e_log_w = _expected_log_weights(state.weight_concentration)
    scores = np.empty((len(x), m))
    for k in range(m):
        e_prec = state.wishart_dofs[k] * state.wishart_scales[k]
        e_logdet = _expected_log_det_precision(
            state.wishart_dofs[k], state.wishart_scales[k]
        )
        diff = x - state.mean_locations[k]
        quad = np.einsum("ni,ij,nj->n", diff, e_prec, diff) + float(
            np.trace(e_prec @ state.mean_covariances[k])
        )
        scores[:, k] = e_log_w[k] + 0.5 * e_logdet - 0.5 * quad
    log_resp = scores - logsumexp(scores, axis=1, keepdims=True)
    return state.with_responsibilities(np.exp(log_resp))


def update_parameter_factors(
    spec: MixtureModelSpec,
    data,
    state: MixtureVariationalState,
    iteration: int | None = None,
) -> MixtureVariationalState:
    """Exact weight/mean/precision factor updates given responsibilities.

    The mean factor uses the input state's expected precisions; the precision
    factor then uses the freshly updated mean factor.
    """
    x = _check_data(spec, data)
    m, d = spec.component_count, spec.dim
    resp = state.responsibilities
    counts = resp.sum(axis=0)

    conc = spec.dirichlet_concentration + counts

    prior_prec = np.linalg.inv(spec.mean_prior_cov)
    prior_shift = prior_prec @ spec.mean_prior_mean
    locs = np.empty((m, d))
    covs = np.empty((m, d, d))
    for k in range(m):
        e_prec = state.wishart_dofs[k] * state.wishart_scales[k]
        weighted_sum = resp[:, k] @ x
        factor_prec = prior_prec + counts[k] * e_prec
        if not np.all(np.isfinite(factor_prec)):
            raise NumericalBreakdown(
                f"non-finite mean-factor precision for component {k}",
                iteration=iteration,
            )
        covs[k] = np.linalg.inv(factor_prec)
        locs[k] = covs[k] @ (prior_shift + e_prec @ weighted_sum)

    dofs = spec.wishart_dof + counts
    scale_prior_inv = np.linalg.inv(spec.wishart_scale)
    scales = np.empty((m, d, d))
    for k in range(m):
        diff = x - locs[k]
        scatter = (resp[:, k][:, None] * diff).T @ diff + counts[k] * covs[k]
        inv_scale = scale_prior_inv + scatter
        if not np.all(np.isfinite(inv_scale)):
            raise NumericalBreakdown(
                f"non-finite precision-factor scatter for component {k}",
                iteration=iteration,
            )
        try:
            scales[k] = np.linalg.inv(inv_scale)
        except np.linalg.LinAlgError:
            raise NumericalBreakdown(
                f"singular precision-factor update for component {k}",
                iteration=iteration,
            ) from None
        scales[k] = 0.5 * (scales[k] + scales[k].T)

    return MixtureVariationalState(
        responsibilities=resp,
        weight_concentration=conc,
        mean_locations=locs,
        mean_covariances=0.5 * (covs + np.transpose(covs, (0, 2, 1))),
        wishart_dofs=dofs,
        wishart_scales=scales,
    )


# ---------------------------------------------------------------------------
# initialization and the CAVI driver


def _kmeans_pp_centers(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, m):
        dist2 = np.min(
            [np.sum((x - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = dist2.sum()
        if not np.isfinite(total):
            raise NumericalBreakdown(
                "squared distances overflowed during center seeding"
            )
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=dist2 / total)])
    return np.array(centers)


def initial_state(
    spec: MixtureModelSpec, data, rng: np.random.Generator
) -> MixtureVariationalState:
    """Seed responsibilities by nearest kmeans++ center, then set factors."""
    x = _check_data(spec, data)
    m = spec.component_count
    centers = _kmeans_pp_centers(x, m, rng)
    dist2 = np.stack([np.sum((x - c) ** 2, axis=1) for c in centers], axis=1)
    resp = np.zeros((len(x), m))
    resp[np.arange(len(x)), np.argmin(dist2, axis=1)] = 1.0
    base = MixtureVariationalState(
        responsibilities=resp,
        weight_concentration=np.full(m, spec.dirichlet_concentration),
        mean_locations=np.tile(spec.mean_prior_mean, (m, 1)),
        mean_covariances=np.tile(spec.mean_prior_cov, (m, 1, 1)),
        wishart_dofs=np.full(m, spec.wishart_dof),
        wishart_scales=np.tile(spec.wishart_scale, (m, 1, 1)),
    )
    return update_parameter_factors(spec, x, base)


@dataclass(frozen=True)
class CaviResult:
    state: MixtureVariationalState
    breakdown: ElboBreakdown
    objective_trace: np.ndarray
    converged: bool
    iterations: int


def cavi_fit(
    spec: MixtureModelSpec,
    data,
    init: MixtureVariationalState,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> CaviResult:
    """Coordinate ascent to a local objective minimum; trace is nonincreasing."""
    x = _check_data(spec, data)
    state = init
    breakdown = evaluate_objective(spec, x, state)
    trace = [breakdown.total]
    converged = False
    iteration = 0
    for iteration in range(1, max_iters + 1):
        state = update_responsibilities(spec, x, state)
        state = update_parameter_factors(spec, x, state, iteration=iteration)
        breakdown = evaluate_objective(spec, x, state)
        trace.append(breakdown.total)
        if abs(trace[-2] - trace[-1]) < tol * (1.0 + abs(trace[-1])):
            converged = True
            break
    return CaviResult(
        state=state,
        breakdown=breakdown,
        objective_trace=np.asarray(trace),
        converged=converged,
        iterations=iteration,
    )


def cavi_fit_restarts(
    spec: MixtureModelSpec,
    data,
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> CaviResult:
    """Best of several seeded fits, compared on the final objective."""
    if restarts < 1:
        raise ShapeError("restarts must be >= 1")
    best: CaviResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        init = initial_state(spec, data, rng)
        result = cavi_fit(spec, data, init, max_iters=max_iters, tol=tol)
        if best is None or result.breakdown.total < best.breakdown.total:
            best = result
    return best


# ---------------------------------------------------------------------------
# the 2-d benchmark generator and predictive densities

TRUTH_WEIGHTS = np.array([0.3, 0.3, 0.2, 0.2])
TRUTH_MEANS = np.array([[0.0, 0.0], [-4.0, -4.0], [4.0, 4.0], [0.0, 4.0]])


def sample_truth(n: int, seed: int, return_labels: bool = False):
    """Draw from the four-component benchmark mixture (identity covariances)."""
    if n < 1:
        raise ShapeError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(len(TRUTH_WEIGHTS), size=n, p=TRUTH_WEIGHTS)
    x = TRUTH_MEANS[labels] + rng.standard_normal((n, 2))
    if return_labels:
        return x, labels
    return x


def plug_in_density(state: MixtureVariationalState, grid) -> np.ndarray:
    """Mixture density at the posterior-mean parameters of one fitted model."""
    pts = np.asarray(grid, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != state.dim:
        raise ShapeError(f"grid points must have dimension {state.dim}")
    weights = state.posterior_mixture_weights()
    total = np.zeros(len(pts))
    for k in range(state.component_count):
        precision = state.wishart_dofs[k] * state.wishart_scales[k]
        logdet_prec = _spd_logdet(precision, "plug-in precision")
        diff = pts - state.mean_locations[k]
        quad = np.einsum("ni,ij,nj->n", diff, precision, diff)
        log_pdf = 0.5 * (logdet_prec - state.dim * LOG_2PI) - 0.5 * quad
        total += weights[k] * np.exp(log_pdf)
    return total


def predictive_density(combined: CombinedPosterior, grid) -> np.ndarray:
    """Model-averaged plug-in density: the gamma-weighted pointwise mixture."""
    pts = np.asarray(grid, dtype=float)
    total = None
    for mid in combined.model_ids:
        part = combined.weight(mid) * plug_in_density(combined.components[mid], pts)
        total = part if total is None else total + part
    return total


def component_count_log_prior(max_components: int) -> np.ndarray:
    """Log prior weights proportional to exp(-m log m) for m = 1..max."""
    if max_components < 1:
        raise ShapeError("max_components must be >= 1")
    counts = np.arange(1, max_components + 1, dtype=float)
    return -counts * np.log(counts)

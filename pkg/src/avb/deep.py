"""ReLU networks with bounded weights and uniform-box variational posteriors.

The variational family over a network's flat parameter vector is a product of
per-coordinate uniforms ``Uniform(psi1_j, psi2_j)`` inside ``[-B, B]``; its KL
to the flat ``Uniform[-B, B]^p`` prior is ``sum_j log(2B / (psi2_j - psi1_j))``
with analytic gradient ``+1/(psi2_j - psi1_j)`` w.r.t. the lower endpoint and
``-1/(psi2_j - psi1_j)`` w.r.t. the upper one (both verified against central
finite differences in the tests). The expected negative log-likelihood is
estimated by the reparameterization ``theta_v = psi1 + z_v * (psi2 - psi1)``
with ``z_v ~ Uniform(0,1)^p``, backpropagating through a hand-rolled MLP.

Three likelihood adapters are provided: unit-variance Gaussian regression,
Bernoulli classification with the network output clamped into
``[kappa, 1-kappa]`` (straight-through clamp gradients), and Poisson point
process intensity on ``[0,1]^d`` with the integral term evaluated by a
midpoint tensor-grid quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import CombinedPosterior, ElboBreakdown, kl_uniform_box
from .errors import DegenerateBox, NonFiniteObjective, OutOfSupport, ShapeError

GAP_FRACTION = 1e-6  # minimum interval width, as a fraction of the bound


# ---------------------------------------------------------------------------
# architecture and forward/backward passes


@dataclass(frozen=True)
class NetArchitecture:
    """Fully connected ReLU net: depth K affine maps, hidden width M.

    ``parameter_count`` is ``(d+1)M + (K-2)(M^2+M) + (M+1)``: an input layer
    ``d -> M``, ``K-2`` hidden layers ``M -> M``, and an output layer
    ``M -> 1``, each with a bias.
    """

    depth: int
    width: int
    input_dim: int
    magnitude_bound: float

    def __post_init__(self):
        if self.depth < 2:
            raise ShapeError("depth must be >= 2 (input and output layers)")
        if self.width < 1 or self.input_dim < 1:
            raise ShapeError("width and input_dim must be >= 1")
        if not self.magnitude_bound > 0:
            raise ShapeError("magnitude_bound must be positive")

    @property
    def parameter_count(self) -> int:
        k, m, d = self.depth, self.width, self.input_dim
        count = (d + 1) * m + (k - 2) * (m * m + m) + (m + 1)
        assert count <= (d + 1) * k * m * m
        return count

    @property
    def layer_shapes(self) -> list:
        k, m, d = self.depth, self.width, self.input_dim
        shapes = [((m, d), (m,))]
        shapes += [((m, m), (m,))] * (k - 2)
        shapes += [((1, m), (1,))]
        return shapes

    def unpack(self, theta: np.ndarray) -> list:
        """Split a flat parameter vector into (W, b) pairs per layer."""
        th = np.asarray(theta, dtype=float)
        if th.shape != (self.parameter_count,):
            raise ShapeError(
                f"theta has shape {th.shape}, expected ({self.parameter_count},)"
            )
        out = []
        pos = 0
        for (wshape, bshape) in self.layer_shapes:
            wn = wshape[0] * wshape[1]
            out.append(
                (
                    th[pos : pos + wn].reshape(wshape),
                    th[pos + wn : pos + wn + bshape[0]],
                )
            )
            pos += wn + bshape[0]
        return out

    @property
    def lipschitz_bound(self) -> float:
        """Coordinatewise Lipschitz bound K(B(M+1))^K for the parameter map."""
        k, m, b = self.depth, self.width, self.magnitude_bound
        return k * (b * (m + 1)) ** k


def check_parameter_support(arch: NetArchitecture, theta) -> np.ndarray:
    """Validate a flat parameter vector against the coordinate bound."""
    th = np.asarray(theta, dtype=float)
    if th.shape != (arch.parameter_count,):
        raise ShapeError(
            f"theta has shape {th.shape}, expected ({arch.parameter_count},)"
        )
    if np.any(np.abs(th) > arch.magnitude_bound + 1e-12):
        raise OutOfSupport(
            f"parameter coordinates must lie in [-{arch.magnitude_bound}, "
            f"{arch.magnitude_bound}]"
        )
    return th


def forward(arch: NetArchitecture, theta, x) -> np.ndarray:
    """Network output for a batch of inputs; returns shape (n,)."""
    xb = np.asarray(x, dtype=float)
    if xb.ndim == 1:
        xb = xb[:, None]
    if xb.shape[1] != arch.input_dim:
        raise ShapeError(
            f"inputs have dimension {xb.shape[1]}, expected {arch.input_dim}"
        )
    a = xb
    layers = arch.unpack(theta)
    for w, b in layers[:-1]:
        a = np.maximum(a @ w.T + b, 0.0)
    w, b = layers[-1]
    return (a @ w.T + b).ravel()


def _forward_with_cache(arch, theta, xb):
    layers = arch.unpack(theta)
    activations = [xb]
    masks = []
    a = xb
    for w, b in layers[:-1]:
        z = a @ w.T + b
        mask = z > 0
        a = np.where(mask, z, 0.0)
        activations.append(a)
        masks.append(mask)
    w, b = layers[-1]
    out = (a @ w.T + b).ravel()
    return layers, activations, masks, out


def _backprop(arch, layers, activations, masks, d_out) -> np.ndarray:
    """Gradient of ``sum_i d_out[i] * net(x_i)`` w.r.t. the flat parameters."""
    grads = [None] * len(layers)
    delta = np.asarray(d_out, dtype=float)[:, None]  # (n, 1)
    w_last, _ = layers[-1]
    grads[-1] = (delta.T @ activations[-1], delta.sum(axis=0))
    back = delta @ w_last  # (n, M)
    for k in range(len(layers) - 2, -1, -1):
        delta = back * masks[k]
        w_k, _ = layers[k]
        grads[k] = (delta.T @ activations[k], delta.sum(axis=0))
        if k > 0:
            back = delta @ w_k
    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    return flat


# ---------------------------------------------------------------------------
# likelihood adapters

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianRegressionAdapter:
    """Unit-variance Gaussian regression likelihood."""

    x: np.ndarray
    y: np.ndarray
    tag: str = "gaussian_regression"

    def __post_init__(self):
        xb = np.asarray(self.x, dtype=float)
        if xb.ndim == 1:
            xb = xb[:, None]
        yb = np.asarray(self.y, dtype=float).ravel()
        if len(xb) == 0:
            raise ShapeError("empty dataset")
        if len(xb) != len(yb):
            raise ShapeError("x and y lengths differ")
        object.__setattr__(self, "x", xb)
        object.__setattr__(self, "y", yb)

    @property
    def sample_size(self) -> int:
        return len(self.y)

    def subset(self, indices) -> "GaussianRegressionAdapter":
        idx = np.asarray(indices)
        return GaussianRegressionAdapter(x=self.x[idx], y=self.y[idx], tag=self.tag)

    def _constant(self) -> float:
        return -0.5 * len(self.y) * LOG_2PI

    def log_likelihood(self, arch, theta) -> float:
        f = forward(arch, theta, self.x)
        val = self._constant() - 0.5 * float(np.sum((self.y - f) ** 2))
        if not math.isfinite(val):
            raise NonFiniteObjective("gaussian log-likelihood is not finite")
        return val

    def loglik_and_grad(self, arch, theta):
        layers, acts, masks, f = _forward_with_cache(arch, theta, self.x)
        resid = self.y - f
        val = self._constant() - 0.5 * float(np.sum(resid**2))
        if not math.isfinite(val):
            raise NonFiniteObjective("gaussian log-likelihood is not finite")
        grad = _backprop(arch, layers, acts, masks, resid)
        return val, grad


@dataclass(frozen=True)
class BernoulliClassificationAdapter:
    """Binary classification; the net output is clamped into [kappa, 1-kappa]
    before being read as a success probability."""

    x: np.ndarray
    labels: np.ndarray
    kappa_trunc: float = 1e-3
    tag: str = "bernoulli_classification"

    def __post_init__(self):
        xb = np.asarray(self.x, dtype=float)
        if xb.ndim == 1:
            xb = xb[:, None]
        lab = np.asarray(self.labels, dtype=float).ravel()
        if len(xb) == 0:
            raise ShapeError("empty dataset")
        if len(xb) != len(lab):
            raise ShapeError("x and labels lengths differ")
        if not np.all((lab == 0) | (lab == 1)):
            raise ShapeError("labels must be 0/1")
        if not 0 < self.kappa_trunc < 0.5:
            raise ShapeError("kappa_trunc must lie in (0, 1/2)")
        object.__setattr__(self, "x", xb)
        object.__setattr__(self, "labels", lab)

    @property
    def sample_size(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "BernoulliClassificationAdapter":
        idx = np.asarray(indices)
        return BernoulliClassificationAdapter(
            x=self.x[idx],
            labels=self.labels[idx],
            kappa_trunc=self.kappa_trunc,
            tag=self.tag,
        )

    def _prob(self, f):
        return np.clip(f, self.kappa_trunc, 1.0 - self.kappa_trunc)

    def log_likelihood(self, arch, theta) -> float:
        w = self._prob(forward(arch, theta, self.x))
        val = float(
            np.sum(self.labels * np.log(w) + (1 - self.labels) * np.log1p(-w))
        )
        if not math.isfinite(val):
            raise NonFiniteObjective("bernoulli log-likelihood is not finite")
        return val

    def loglik_and_grad(self, arch, theta):
        layers, acts, masks, f = _forward_with_cache(arch, theta, self.x)
        w = self._prob(f)
        val = float(
            np.sum(self.labels * np.log(w) + (1 - self.labels) * np.log1p(-w))
        )
        if not math.isfinite(val):
            raise NonFiniteObjective("bernoulli log-likelihood is not finite")
        inside = (f > self.kappa_trunc) & (f < 1.0 - self.kappa_trunc)
        d_out = np.where(inside, self.labels / w - (1 - self.labels) / (1 - w), 0.0)
        return val, _backprop(arch, layers, acts, masks, d_out)


def _midpoint_grid(dim: int, resolution: int) -> np.ndarray:
    axis = (np.arange(resolution) + 0.5) / resolution
    if dim == 1:
        return axis[:, None]
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True)
class PoissonProcessAdapter:
    """Poisson point process on [0,1]^d with clamped network intensity.

    ``realizations`` is a list of point arrays, one per observed pattern; the
    integral of the intensity is approximated by a midpoint tensor grid with
    ``quadrature_resolution`` nodes per axis.
    """

    realizations: tuple
    kappa_min: float
    kappa_max: float
    quadrature_resolution: int = 64
    tag: str = "poisson_process"

    def __post_init__(self):
        if not 0 < self.kappa_min < self.kappa_max:
            raise ShapeError("need 0 < kappa_min < kappa_max")
        if self.quadrature_resolution < 2:
            raise ShapeError("quadrature_resolution must be >= 2 per axis")
        if len(self.realizations) == 0:
            raise ShapeError("need at least one realization")
        cleaned = []
        dim = None
        for r in self.realizations:
            arr = np.asarray(r, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if dim is None:
                dim = arr.shape[1] if arr.size else 1
            if arr.size and arr.shape[1] != dim:
                raise ShapeError("realizations have inconsistent dimensions")
            cleaned.append(arr.reshape(-1, dim))
        object.__setattr__(self, "realizations", tuple(cleaned))
        object.__setattr__(self, "_dim", dim)
        object.__setattr__(
            self, "_grid", _midpoint_grid(dim, self.quadrature_resolution)
        )

    @property
    def sample_size(self) -> int:
        return len(self.realizations)

    def _clamped(self, f):
        return np.clip(f, self.kappa_min, self.kappa_max)

    def log_likelihood(self, arch, theta) -> float:
        points = np.concatenate(
            [r for r in self.realizations if len(r)] or [np.empty((0, self._dim))]
        )
        stacked = np.concatenate([points, self._grid])
        lam = self._clamped(forward(arch, theta, stacked))
        n_pts = len(points)
        point_term = float(np.sum(np.log(lam[:n_pts])))
        quad = float(np.mean(lam[n_pts:]))
        val = point_term - len(self.realizations) * (quad - 1.0)
        if not math.isfinite(val):
            raise NonFiniteObjective("point-process log-likelihood is not finite")
        return val

    def loglik_and_grad(self, arch, theta):
        points = np.concatenate(
            [r for r in self.realizations if len(r)] or [np.empty((0, self._dim))]
        )
        stacked = np.concatenate([points, self._grid])
        layers, acts, masks, f = _forward_with_cache(arch, theta, stacked)
        lam = self._clamped(f)
        n_pts = len(points)
        point_term = float(np.sum(np.log(lam[:n_pts])))
        quad = float(np.mean(lam[n_pts:]))
        val = point_term - len(self.realizations) * (quad - 1.0)
        if not math.isfinite(val):
            raise NonFiniteObjective("point-process log-likelihood is not finite")
        inside = (f > self.kappa_min) & (f < self.kappa_max)
        d_out = np.empty_like(f)
        d_out[:n_pts] = np.where(inside[:n_pts], 1.0 / lam[:n_pts], 0.0)
        d_out[n_pts:] = np.where(
            inside[n_pts:],
            -len(self.realizations) / len(self._grid),
            0.0,
        )
        return val, _backprop(arch, layers, acts, masks, d_out)


# ---------------------------------------------------------------------------
# box states and optimization


@dataclass(frozen=True)
class BoxVariationalState:
    """Per-coordinate uniform intervals inside [-B, B]."""

    psi1: np.ndarray
    psi2: np.ndarray
    bound: float

    def __post_init__(self):
        lo = np.asarray(self.psi1, dtype=float)
        hi = np.asarray(self.psi2, dtype=float)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise ShapeError("psi1 and psi2 must be equal-length 1-d arrays")
        if not self.bound > 0:
            raise OutOfSupport("bound must be positive")
        b = self.bound
        if np.any(lo < -b - 1e-12) or np.any(hi > b + 1e-12):
            raise OutOfSupport("intervals must lie inside [-B, B]")
        gap = self.min_gap
        if np.any(hi - lo < gap * (1 - 1e-9)):
            raise DegenerateBox(
                f"interval width below the minimum gap {gap!r}"
            )
        object.__setattr__(self, "psi1", lo)
        object.__setattr__(self, "psi2", hi)

    @property
    def min_gap(self) -> float:
        return GAP_FRACTION * self.bound

    @property
    def dim(self) -> int:
        return len(self.psi1)

    @property
    def widths(self) -> np.ndarray:
        return self.psi2 - self.psi1

    def kl_to_prior(self) -> float:
        return kl_uniform_box(self.psi1, self.psi2, self.bound)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        z = rng.random((size or 1, self.dim))
        draws = self.psi1 + z * self.widths
        return draws if size is not None else draws[0]


def project_box(psi1, psi2, bound: float, min_gap: float) -> tuple:
    """Clip endpoints into [-B, B] and restore the minimum interval gap.

    Feasible states pass through unchanged (idempotent); collapsed or
    inverted intervals are re-centered at width ``min_gap``.
    """
    lo = np.clip(np.asarray(psi1, dtype=float), -bound, bound)
    hi = np.clip(np.asarray(psi2, dtype=float), -bound, bound)
    narrow = hi - lo < min_gap
    if np.any(narrow):
        center = 0.5 * (lo[narrow] + hi[narrow])
        center = np.clip(center, -bound + min_gap / 2, bound - min_gap / 2)
        lo = lo.copy()
        hi = hi.copy()
        lo[narrow] = center - min_gap / 2
        hi[narrow] = center + min_gap / 2
    return lo, hi


def box_kl_gradient(state: BoxVariationalState) -> tuple:
    """Analytic gradient of the box KL: (+1/width, -1/width)."""
    inv = 1.0 / state.widths
    return inv, -inv


@dataclass(frozen=True)
class AdamState:
    """Adam accumulator over the stacked (psi1, psi2) vector."""

    learning_rate: float
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, dim: int, learning_rate: float) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m=np.zeros(2 * dim),
            v=np.zeros(2 * dim),
        )

    def apply(self, grad: np.ndarray) -> tuple:
        t = self.t + 1
        m = self.beta1 * self.m + (1 - self.beta1) * grad
        v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = m / (1 - self.beta1**t)
        v_hat = v / (1 - self.beta2**t)
        update = -self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return update, replace(self, m=m, v=v, t=t)


@dataclass(frozen=True)
class SgdState:
    """Plain (projected) gradient descent."""

    learning_rate: float

    @classmethod
    def fresh(cls, dim: int, learning_rate: float) -> "SgdState":
        return cls(learning_rate=learning_rate)

    def apply(self, grad: np.ndarray) -> tuple:
        return -self.learning_rate * grad, self


def crn_objective_and_grad(
    arch: NetArchitecture,
    state: BoxVariationalState,
    adapter,
    z: np.ndarray,
    nll_scale: float = 1.0,
) -> tuple:
    """Objective and exact gradient for fixed reparameterization draws.

    For fixed ``z`` the map ``(psi1, psi2) -> nll_scale * mean_v[-loglik(psi1
    + z_v * (psi2-psi1))] + KL`` is an ordinary deterministic function; this
    returns its value and gradient, the common-random-numbers estimator used
    by :func:`elbo_gradient_step` and checked against finite differences.
    ``nll_scale`` rescales the likelihood term only — mini-batch steps pass
    n/batch so the estimate stays on the full-data scale.
    """
    if z.ndim != 2 or z.shape[1] != state.dim:
        raise ShapeError("z must have shape (V, p)")
    widths = state.widths
    v_count = z.shape[0]
    g1 = np.zeros(state.dim)
    g2 = np.zeros(state.dim)
    nll = 0.0
    for v in range(v_count):
        theta = state.psi1 + z[v] * widths
        ll, grad_theta = adapter.loglik_and_grad(arch, theta)
        if not np.all(np.isfinite(grad_theta)):
            raise NonFiniteObjective(
                f"non-finite likelihood gradient at MC sample {v}"
            )
        nll -= ll
        g1 -= grad_theta * (1.0 - z[v])
        g2 -= grad_theta * z[v]
    scale = nll_scale / v_count
    nll *= scale
    g1 *= scale
    g2 *= scale
    kl1, kl2 = box_kl_gradient(state)
    objective = nll + state.kl_to_prior()
    return objective, g1 + kl1, g2 + kl2


def elbo_gradient_step(
    arch: NetArchitecture,
    state: BoxVariationalState,
    adapter,
    mc_samples: int,
    optimizer_state,
    rng: np.random.Generator,
    nll_scale: float = 1.0,
) -> tuple:
    """One reparameterized stochastic step on the box endpoints.

    Draws ``mc_samples`` uniform reparameterization vectors, forms the
    common-random-numbers gradient, applies the optimizer update to the
    stacked endpoints, and projects back onto the feasible box set. Returns
    ``(new_state, new_optimizer_state, objective_estimate)`` with the
    estimate taken at the pre-step state.
    """
    if mc_samples < 1:
        raise ShapeError("mc_samples must be >= 1")
    z = rng.random((mc_samples, state.dim))
    objective, g1, g2 = crn_objective_and_grad(
        arch, state, adapter, z, nll_scale=nll_scale
    )
    update, new_opt = optimizer_state.apply(np.concatenate([g1, g2]))
    lo = state.psi1 + update[: state.dim]
    hi = state.psi2 + update[state.dim :]
    lo, hi = project_box(lo, hi, state.bound, state.min_gap)
    return (
        BoxVariationalState(psi1=lo, psi2=hi, bound=state.bound),
        new_opt,
        objective,
    )


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    mc_samples: int = 8
    optimizer: str = "adam"
    seed: int = 0
    eval_samples: int = 256
    init_center_scale: float = 0.1
    init_halfwidth_fraction: float = 0.05
    batch_size: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.mc_samples < 1 or self.eval_samples < 1:
            raise ShapeError("epochs >= 0, mc_samples >= 1, eval_samples >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ShapeError(f"unknown optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ShapeError("learning_rate must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ShapeError("batch_size must be >= 1 when given")


@dataclass(frozen=True)
class FitResult:
    state: BoxVariationalState
    breakdown: ElboBreakdown
    objective_trace: np.ndarray


def initial_box_state(
    arch: NetArchitecture, rng: np.random.Generator, config: FitConfig
) -> BoxVariationalState:
    p = arch.parameter_count
    b = arch.magnitude_bound
    center = rng.uniform(-config.init_center_scale, config.init_center_scale, size=p)
    half = config.init_halfwidth_fraction * b
    lo, hi = project_box(center - half, center + half, b, GAP_FRACTION * b)
    return BoxVariationalState(psi1=lo, psi2=hi, bound=b)


def _evaluate_breakdown(
    arch, state, adapter, eval_samples: int, rng, seed: int
) -> ElboBreakdown:
    draws = state.sample(rng, size=eval_samples)
    lls = np.array(
        [adapter.log_likelihood(arch, draws[v]) for v in range(eval_samples)]
    )
    return ElboBreakdown.of(
        expected_nll=float(-np.mean(lls)),
        kl_to_prior=state.kl_to_prior(),
        mc_samples_used=eval_samples,
        mc_seed=seed,
    )


def fit_model(arch: NetArchitecture, adapter, config: FitConfig) -> FitResult:
    """Run the stochastic box fit; deterministic given ``config.seed``.

    With ``batch_size`` set (and smaller than the dataset) each epoch is one
    shuffled pass of mini-batch steps, the likelihood term rescaled by
    n/batch so every step targets the full-data objective; otherwise one
    full-batch step per epoch.
    """
    rng = np.random.default_rng(config.seed)
    state = initial_box_state(arch, rng, config)
    opt_cls = AdamState if config.optimizer == "adam" else SgdState
    opt = opt_cls.fresh(arch.parameter_count, config.learning_rate)
    n = adapter.sample_size
    batching = config.batch_size is not None and config.batch_size < n
    if batching and not hasattr(adapter, "subset"):
        raise ShapeError(
            f"adapter {getattr(adapter, 'tag', type(adapter).__name__)!r} "
            "does not support mini-batching"
        )
    trace = []
    for _ in range(config.epochs):
        if not batching:
            state, opt, objective = elbo_gradient_step(
                arch, state, adapter, config.mc_samples, opt, rng
            )
            trace.append(objective)
            continue
        order = rng.permutation(n)
        batch_objectives = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = adapter.subset(idx)
            state, opt, objective = elbo_gradient_step(
                arch,
                state,
                batch,
                config.mc_samples,
                opt,
                rng,
                nll_scale=n / len(idx),
            )
            batch_objectives.append(objective)
        trace.append(float(np.mean(batch_objectives)))
    breakdown = _evaluate_breakdown(
        arch, state, adapter, config.eval_samples, rng, config.seed
    )
    if config.epochs == 0:
        trace.append(breakdown.total)
    return FitResult(
        state=state, breakdown=breakdown, objective_trace=np.asarray(trace)
    )


def posterior_mean_predict(
    combined: CombinedPosterior,
    architectures: Mapping,
    inputs,
    draws: int = 100,
    rng: np.random.Generator | None = None,
    model: object | None = None,
) -> np.ndarray:
    """Average network outputs over posterior draws.

    Each draw samples a model index from the combined weights (or uses the
    fixed ``model`` if given), then a parameter vector from that model's box.
    The per-draw parameter does not depend on the inputs, so predictions are
    permutation-equivariant in the input list.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    xb = np.asarray(inputs, dtype=float)
    n = len(xb)
    acc = np.zeros(n)
    ids = combined.model_ids
    for _ in range(draws):
        mid = (
            model
            if model is not None
            else ids[rng.choice(len(ids), p=combined.gamma)]
        )
        state = combined.components[mid]
        theta = state.sample(rng)
        acc += forward(architectures[mid], theta, xb)
    return acc / draws

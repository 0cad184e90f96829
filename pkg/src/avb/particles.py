"""Dirac-mixture (particle) variational families on discretized parameter spaces.

A :class:`DiscretizedSpace` is a finite set of atoms — either a lattice
(coordinate multiples of a spacing ``s`` clamped to ``[-B, B]^p``, addressed
lazily so huge grids never materialize) or an explicit atom list. The
variational family over such a space is a mixture of point masses at ``Q``
distinct atoms with simplex weights; the reference prior is uniform over all
``N`` atoms, so the objective for a particle state is

    sum_q w_q * ( -loglik(psi_q) + log(w_q * N) )

i.e. expected negative log-likelihood plus the KL of the weight vector to the
uniform atom prior. :func:`run_algorithm2` minimizes this by alternating a
continuous-space gradient step on the centers, projection back onto the grid
with tie-breaking (coinciding centers keep the heaviest member and resample
the rest), and the closed-form weight update ``w_q ∝ exp(loglik_q)``.

Degenerate particle counts are meaningful: ``Q = 1`` searches for the best
single atom (a maximum-likelihood point over the grid), while ``Q = N`` with
all atoms as centers reproduces the exact posterior of the discretized model
after a single weight update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import ElboBreakdown
from .errors import CapacityError, NonFiniteObjective, ShapeError

# Grids beyond this many atoms can be addressed but never materialized.
MATERIALIZE_LIMIT = 1_000_000
# Hard cap on addressable atom counts (fits comfortably in int64 arithmetic).
ADDRESSABLE_LIMIT = 2**62

OBJECTIVE_SLACK = 1e-10


@dataclass(frozen=True)
class DiscretizedSpace:
    """Finite atom set: a lattice over ``[-B, B]^p`` or an explicit list.

    Grid mode: per-coordinate atoms are ``{k*s : |k| <= floor(B/s)}`` and the
    full space is their ``p``-fold product, ``N = (2*floor(B/s)+1)^p``. Atoms
    are addressed by integer index (mixed-radix over coordinates, axis 0 least
    significant) without materializing the product.
    """

    dim: int
    atom_count: int
    spacing: float | None = None
    bound: float | None = None
    _atoms: np.ndarray | None = None  # explicit mode only
    _axis_radius: int | None = None  # grid mode: floor(B/s)

    # -- constructors ------------------------------------------------------

    @classmethod
    def grid(cls, spacing: float, bound: float, dim: int) -> "DiscretizedSpace":
        if spacing <= 0 or bound <= 0:
            raise ShapeError("spacing and bound must be positive")
        if dim < 1:
            raise ShapeError("dim must be >= 1")
        # tiny relative slop so that e.g. B=1, s=0.1 counts the endpoint atoms
        radius = int(math.floor(bound / spacing + 1e-9))
        per_axis = 2 * radius + 1
        count = per_axis**dim  # exact big-int arithmetic
        if count > ADDRESSABLE_LIMIT:
            raise CapacityError(
                f"grid would hold {count} atoms; max addressable is {ADDRESSABLE_LIMIT}"
            )
        return cls(
            dim=dim,
            atom_count=int(count),
            spacing=float(spacing),
            bound=float(bound),
            _axis_radius=radius,
        )

    @classmethod
    def for_architecture(cls, arch, spacing: float) -> "DiscretizedSpace":
        """Grid over a network's flat parameter space (its own coordinate bound)."""
        return cls.grid(spacing, arch.magnitude_bound, arch.parameter_count)

    @classmethod
    def from_atoms(cls, atoms) -> "DiscretizedSpace":
        arr = np.asarray(atoms, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ShapeError("atoms must be a nonempty (N, p) array")
        if len(np.unique(arr, axis=0)) != arr.shape[0]:
            raise ShapeError("atoms must be distinct")
        return cls(dim=arr.shape[1], atom_count=arr.shape[0], _atoms=arr)

    # -- addressing --------------------------------------------------------

    @property
    def is_grid(self) -> bool:
        return self._atoms is None

    @property
    def per_axis_count(self) -> int:
        if not self.is_grid:
            raise ShapeError("per_axis_count is defined for grid spaces only")
        return 2 * self._axis_radius + 1

    def atom(self, index) -> np.ndarray:
        """Coordinates of the atom(s) with the given integer index/indices."""
        idx = np.asarray(index, dtype=np.int64)
        if np.any(idx < 0) or np.any(idx >= self.atom_count):
            raise ShapeError(f"atom index out of range [0, {self.atom_count})")
        if not self.is_grid:
            return self._atoms[idx]
        base = self.per_axis_count
        digits = np.empty(idx.shape + (self.dim,), dtype=np.int64)
        rem = idx.copy()
        for j in range(self.dim):
            digits[..., j] = rem % base
            rem //= base
        return (digits - self._axis_radius) * self.spacing

    def atom_index(self, point) -> np.ndarray:
        """Integer index of grid atom(s); the point must be an atom."""
        pts = np.asarray(point, dtype=float)
        if not self.is_grid:
            # explicit mode: exact row match
            flat = pts.reshape(-1, self.dim)
            out = np.empty(flat.shape[0], dtype=np.int64)
            for i, row in enumerate(flat):
                hits = np.where(np.all(self._atoms == row, axis=1))[0]
                if len(hits) == 0:
                    raise ShapeError(f"point {row!r} is not an atom")
                out[i] = hits[0]
            return out.reshape(pts.shape[:-1]) if pts.ndim > 1 else out[0]
        k = np.rint(pts / self.spacing).astype(np.int64)
        if np.any(np.abs(k * self.spacing - pts) > 1e-9 * max(self.spacing, 1.0)):
            raise ShapeError("point is not on the grid")
        if np.any(np.abs(k) > self._axis_radius):
            raise ShapeError("point lies outside the grid")
        digits = k + self._axis_radius
        base = self.per_axis_count
        weights = base ** np.arange(self.dim, dtype=np.int64)
        return np.asarray(digits @ weights, dtype=np.int64)

    def materialize(self) -> np.ndarray:
        """All atom coordinates as an (N, p) array; guarded by a size cap."""
        if self.atom_count > MATERIALIZE_LIMIT:
            raise CapacityError(
                f"refusing to materialize {self.atom_count} atoms "
                f"(limit {MATERIALIZE_LIMIT})"
            )
        if not self.is_grid:
            return self._atoms.copy()
        return self.atom(np.arange(self.atom_count, dtype=np.int64))


def project_to_grid(space: DiscretizedSpace, point) -> np.ndarray:
    """Nearest atom: per-coordinate round to a multiple of s (midpoints round
    toward +inf), then clamp to the grid's bounding box."""
    pts = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(pts)):
        raise NonFiniteObjective("cannot project a non-finite point")
    if not space.is_grid:
        flat = np.atleast_2d(pts)
        atoms = space.materialize()
        d2 = ((flat[:, None, :] - atoms[None, :, :]) ** 2).sum(axis=2)
        best = atoms[np.argmin(d2, axis=1)]
        return best.reshape(pts.shape) if pts.ndim > 1 else best[0]
    s = space.spacing
    k = np.floor(pts / s + 0.5).astype(np.int64)  # round half up (toward +inf)
    k = np.clip(k, -space._axis_radius, space._axis_radius)
    return k * s


@dataclass(frozen=True)
class ParticleState:
    """Q distinct atoms (by index into the space) with simplex weights."""

    space: DiscretizedSpace
    center_indices: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.center_indices, dtype=np.int64)
        w = np.asarray(self.weights, dtype=float)
        if idx.ndim != 1 or w.shape != idx.shape:
            raise ShapeError("center_indices and weights must be equal-length 1-d")
        q = len(idx)
        if not 1 <= q <= self.space.atom_count:
            raise CapacityError(
                f"particle count {q} outside [1, {self.space.atom_count}]"
            )
        if len(np.unique(idx)) != q:
            raise ShapeError("particle centers must be distinct")
        if np.any(idx < 0) or np.any(idx >= self.space.atom_count):
            raise ShapeError("center index out of range")
        if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ShapeError("weights must be a probability vector (tol 1e-12)")
        lw = self.log_weights
        if lw is None:
            with np.errstate(divide="ignore"):
                lw = np.log(w)
        else:
            lw = np.asarray(lw, dtype=float)
            if lw.shape != w.shape:
                raise ShapeError("log_weights shape mismatch")
        object.__setattr__(self, "center_indices", idx)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "log_weights", lw)

    @property
    def particle_count(self) -> int:
        return len(self.center_indices)

    @property
    def centers(self) -> np.ndarray:
        return self.space.atom(self.center_indices)

    @classmethod
    def uniform(cls, space: DiscretizedSpace, center_indices) -> "ParticleState":
        idx = np.asarray(center_indices, dtype=np.int64)
        q = len(idx)
        return cls(
            space=space,
            center_indices=idx,
            weights=np.full(q, 1.0 / q),
            log_weights=np.full(q, -math.log(q)),
        )


def particle_objective(
    space: DiscretizedSpace, state: ParticleState, loglik_at_atoms
) -> float:
    """Exact objective of a particle state against the uniform atom prior:
    ``sum_q w_q * (-loglik_q + log(w_q N))`` with ``0*log(0) = 0``."""
    ll = np.asarray(loglik_at_atoms, dtype=float)
    if ll.shape != state.weights.shape:
        raise ShapeError("need one log-likelihood per particle center")
    w = state.weights
    logn = math.log(space.atom_count)
    live = w > 0
    return float(
        np.sum(w[live] * (-ll[live] + state.log_weights[live] + logn))
    )


def weight_update(state: ParticleState, loglik_at_centers) -> ParticleState:
    """Closed-form optimal weights for fixed centers: ``w_q ∝ exp(loglik_q)``."""
    ll = np.asarray(loglik_at_centers, dtype=float)
    if ll.shape != state.weights.shape:
        raise ShapeError("need one log-likelihood per particle center")
    if not np.all(np.isfinite(ll)):
        raise NonFiniteObjective("log-likelihoods at centers must be finite")
    log_w = ll - logsumexp(ll)
    return ParticleState(
        space=state.space,
        center_indices=state.center_indices,
        weights=np.exp(log_w),
        log_weights=log_w,
    )


def sample_distinct_indices(
    space: DiscretizedSpace, q: int, rng: np.random.Generator
) -> np.ndarray:
    """q distinct atom indices, uniform over the space."""
    n = space.atom_count
    if q > n:
        raise CapacityError(f"cannot place {q} distinct particles on {n} atoms")
    if n <= MATERIALIZE_LIMIT or q > n // 2:
        return np.asarray(rng.permutation(n)[:q], dtype=np.int64)
    chosen: set[int] = set()
    out = np.empty(q, dtype=np.int64)
    k = 0
    while k < q:
        cand = int(rng.integers(0, n))
        if cand not in chosen:
            chosen.add(cand)
            out[k] = cand
            k += 1
    return out


def _default_proposal(rng: np.random.Generator, occupied: set, space: DiscretizedSpace):
    """Uniform sample over unoccupied atoms: rejection with a scan fallback."""
    n = space.atom_count
    for _ in range(200 + 20 * len(occupied)):
        cand = int(rng.integers(0, n))
        if cand not in occupied:
            return cand
    start = int(rng.integers(0, n))
    for step in range(n):
        cand = (start + step) % n
        if cand not in occupied:
            return cand
    raise CapacityError("no unoccupied atom available")


def tie_break(
    space: DiscretizedSpace,
    proposed_indices,
    weights,
    rng: np.random.Generator,
    proposal: Callable | None = None,
) -> np.ndarray:
    """Resolve coinciding centers.

    Within each group of identical proposed centers the member with maximal
    weight keeps the atom (lowest position wins exact weight ties); every
    other member draws a fresh atom, distinct from all centers currently held,
    from ``proposal(rng, occupied, space)`` (default: uniform over unoccupied
    atoms). The result never contains duplicates.
    """
    idx = np.asarray(proposed_indices, dtype=np.int64)
    w = np.asarray(weights, dtype=float)
    if idx.ndim != 1 or w.shape != idx.shape:
        raise ShapeError("proposed_indices and weights must be equal-length 1-d")
    q = len(idx)
    if q > space.atom_count:
        raise CapacityError(
            f"{q} particles cannot occupy {space.atom_count} distinct atoms"
        )
    draw = proposal if proposal is not None else _default_proposal

    keeper: dict[int, int] = {}  # atom index -> position that keeps it
    for pos in range(q):
        a = int(idx[pos])
        if a not in keeper or w[pos] > w[keeper[a]]:
            keeper[a] = pos

    out = idx.copy()
    occupied = set(keeper.keys())
    for pos in range(q):
        a = int(idx[pos])
        if keeper[a] == pos:
            continue
        fresh = int(draw(rng, occupied, space))
        if fresh in occupied or not 0 <= fresh < space.atom_count:
            raise CapacityError(
                f"proposal returned an occupied or invalid atom {fresh}"
            )
        out[pos] = fresh
        occupied.add(fresh)
    return out


@dataclass(frozen=True)
class ParticleTarget:
    """Model hooks for the particle loop.

    ``loglik`` maps an (k, p) array of points to (k,) log-likelihood values;
    ``neg_loglik_grad`` maps (k, p) points to the (k, p) gradient of the
    negative log-likelihood in continuous space (only needed when the
    learning rate is nonzero).
    """

    loglik: Callable[[np.ndarray], np.ndarray]
    neg_loglik_grad: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass(frozen=True)
class ParticleRunResult:
    state: ParticleState
    objective_trace: np.ndarray  # trace[0] = initial state, trace[t] = after iter t
    breakdown: ElboBreakdown


def _breakdown_for(space, state, loglik_values) -> ElboBreakdown:
    w = state.weights
    live = w > 0
    expected_nll = float(np.sum(w[live] * (-np.asarray(loglik_values)[live])))
    kl = float(
        np.sum(w[live] * (state.log_weights[live] + math.log(space.atom_count)))
    )
    return ElboBreakdown.of(expected_nll, kl)


def run_algorithm2(
    space: DiscretizedSpace,
    target: ParticleTarget,
    q: int,
    iterations: int,
    rng: np.random.Generator,
    *,
    learning_rate: float = 0.1,
    schedule: Callable[[int], float] | None = None,
    proposal: Callable | None = None,
    init_indices=None,
) -> ParticleRunResult:
    """Projected-gradient particle fit.

    Each iteration t = 1..T moves every center by ``-r_t * grad(-loglik)`` in
    continuous space, projects back onto the grid, breaks ties, and applies
    the closed-form weight update. ``schedule(t)`` overrides the default
    ``learning_rate / sqrt(t)``. Returns the final state, the objective value
    of the initial state followed by one value per iteration, and the exact
    objective breakdown of the final state.
    """
    if not 1 <= q <= space.atom_count:
        raise CapacityError(f"particle count {q} outside [1, {space.atom_count}]")
    if init_indices is not None:
        idx = np.asarray(init_indices, dtype=np.int64)
        if len(idx) != q:
            raise ShapeError("init_indices length must equal q")
    else:
        idx = sample_distinct_indices(space, q, rng)
    state = ParticleState.uniform(space, idx)
    sched = schedule if schedule is not None else (
        lambda t: learning_rate / math.sqrt(t)
    )

    ll = np.asarray(target.loglik(state.centers), dtype=float)
    trace = [particle_objective(space, state, ll)]

    for t in range(1, iterations + 1):
        r_t = float(sched(t))
        if r_t != 0.0:
            if target.neg_loglik_grad is None:
                raise ShapeError(
                    "a nonzero learning rate requires neg_loglik_grad"
                )
            moved = state.centers - r_t * np.asarray(
                target.neg_loglik_grad(state.centers), dtype=float
            )
            projected = project_to_grid(space, moved)
            new_idx = space.atom_index(projected)
        else:
            new_idx = state.center_indices
        new_idx = tie_break(space, new_idx, state.weights, rng, proposal)
        interim = ParticleState(
            space=space,
            center_indices=new_idx,
            weights=state.weights,
            log_weights=state.log_weights,
        )
        ll = np.asarray(target.loglik(interim.centers), dtype=float)
        state = weight_update(interim, ll)
        trace.append(particle_objective(space, state, ll))

    return ParticleRunResult(
        state=state,
        objective_trace=np.asarray(trace),
        breakdown=_breakdown_for(space, state, ll),
    )


def exact_discrete_posterior(
    space: DiscretizedSpace, loglik_at_all_atoms
) -> np.ndarray:
    """Log posterior over all atoms under the uniform atom prior (brute force)."""
    ll = np.asarray(loglik_at_all_atoms, dtype=float)
    if ll.shape != (space.atom_count,):
        raise ShapeError("need one log-likelihood per atom")
    return ll - logsumexp(ll)


def state_atom_log_masses(state: ParticleState) -> dict:
    """Map atom index -> log mass for a particle state (omits zero-weight atoms)."""
    out = {}
    for i, a in enumerate(state.center_indices):
        if state.weights[i] > 0:
            out[int(a)] = float(state.log_weights[i])
    return out

"""Monte Carlo ensembles and moment ODEs for SDE Parareal.

The micro state is an ensemble of particles evolved with Euler-Maruyama
(Ito interpretation, increments evaluated at the left endpoint) over
pre-drawn Brownian increments; the macro state is a (mean, covariance)
pair evolved by the moment closure ODEs obtained from a Taylor expansion
of drift and diffusion around the mean.  The two are coupled by moment
restriction and an ensemble-transform matching operator built on Cholesky
factors, with a resampling fallback for rank-deficient ensembles and an
eigenvalue-clipping repair for covariance targets that leave the PSD cone
after the Parareal macro combination.

Mean-field dependence enters the coefficients through the observable
average Lambda = E[psi(X)], estimated by the ensemble mean inside the
particle propagator and by psi(M) inside the moment equations.

Determinism: all randomness is drawn from counter-based Philox streams
keyed by (seed, purpose, indices), so runs are reproducible bitwise for a
fixed seed regardless of how the Parareal fine sweep is scheduled.
Reductions over particles use numpy's fixed pairwise order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import engine, smallmat

__all__ = [
    "SdeModel",
    "Ensemble",
    "MomentState",
    "BrownianTable",
    "MatchInfo",
    "MomentsCoupling",
    "ParaSetup",
    "MOMENT_ALGEBRA",
    "NonFinite",
    "EmptyEnsemble",
    "UnrepairableCovariance",
    "DegenerateEnsemble",
    "em_propagate",
    "moment_rhs",
    "moment_propagate",
    "moment_history",
    "mc_moment_history",
    "restrict",
    "match",
    "roberts_model",
    "make_parareal_setup",
    "philox_stream",
]

# Purpose tags for the Philox stream keys.
_BROWNIAN_TAG = 0
_RESAMPLE_TAG = 1
_INITIAL_TAG = 2

# Tolerance (relative to the largest entry) below which a covariance
# eigenvalue counts as negative for the psd_flag diagnostic.
_PSD_FLAG_RTOL = 1e-12

_EMPTY_OBSERVABLE = np.zeros(0)


class NonFinite(FloatingPointError):
    """A propagated state left the finite floats."""


class EmptyEnsemble(ValueError):
    """Matching called with no particles."""


class UnrepairableCovariance(ValueError):
    """Non-PSD covariance target under the 'strict' repair policy."""


class DegenerateEnsemble(ValueError):
    """Ensemble covariance still rank deficient after resampling."""


def philox_stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for stream (seed, *key); no shared state."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=key))
    )


@dataclass(frozen=True)
class SdeModel:
    """Coefficients of d-dimensional SDE dX = a(X, L, t) dt + b(X, L, t) dW.

    ``drift`` maps a (P, d) particle block to (P, d); ``diffusion`` to
    (P, d, n_w), or to a constant (d, n_w) for state-independent noise.
    ``psi`` maps (P, d) to (P, m) observables whose average L = E[psi(X)]
    feeds back into the coefficients; None means no mean-field term.

    For the moment closure: ``drift_jac(m, L, t)`` is the (d, d) Jacobian
    of the drift at the mean, ``diffusion_jac(m, L, t)`` a (n_w, d, d)
    stack of diffusion Jacobians (one per Brownian direction, None for
    additive noise), and ``drift_hessians(m)`` a (d, d, d) stack whose
    j-th slice is the Hessian of the j-th drift component (None when the
    drift is affine).

    ``initial_sampler(P, rng)`` draws the (P, d) initial particle block.
    """

    dim: int
    n_w: int
    drift: Callable
    diffusion: Callable
    initial_sampler: Callable
    drift_jac: Callable
    diffusion_jac: Optional[Callable] = None
    drift_hessians: Optional[Callable] = None
    psi: Optional[Callable] = None


@dataclass(frozen=True)
class Ensemble:
    """Particle block of shape (P, d) with sampling provenance.

    States are treated as immutable; operations return new ensembles.
    """

    states: np.ndarray
    provenance: tuple = ()

    def __post_init__(self):
        if self.states.ndim != 2:
            raise ValueError("states must have shape (P, d)")
        if self.states.shape[0] < 2:
            raise ValueError("need at least 2 particles for a sample covariance")
        if not np.isfinite(self.states).all():
            raise NonFinite("ensemble contains non-finite states")

    @property
    def particles(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class MomentState:
    """Mean vector and exactly symmetric covariance matrix.

    ``psd_flag`` records whether the covariance is PSD up to roundoff; it
    can transiently be False after the Parareal three-term combination,
    which the matching operator repairs.
    """

    mean: np.ndarray
    cov: np.ndarray
    psd_flag: bool = field(init=False)

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov shape does not match mean")
        cov = 0.5 * (cov + cov.T)
        scale = max(1.0, float(np.abs(cov).max()))
        flag = bool(np.linalg.eigvalsh(cov)[0] >= -_PSD_FLAG_RTOL * scale)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "psd_flag", flag)

    @property
    def dim(self) -> int:
        return self.mean.size


def _mom_add(a: MomentState, b: MomentState) -> MomentState:
    return MomentState(a.mean + b.mean, a.cov + b.cov)


def _mom_sub(a: MomentState, b: MomentState) -> MomentState:
    return MomentState(a.mean - b.mean, a.cov - b.cov)


MOMENT_ALGEBRA = engine.MacroAlgebra(add=_mom_add, sub=_mom_sub)


@dataclass(frozen=True)
class BrownianTable:
    """Pre-drawn Wiener increments, one stream per subinterval.

    ``increments(n)`` regenerates the (steps, P, n_w) block for
    subinterval n, already scaled by sqrt(inner_dt), identically on every
    call.  Keeping the table fixed across Parareal iterations makes the
    stochastic fine solver deterministic, which is what gives the
    iteration its finite-termination property.
    """

    seed: int
    n_slabs: int
    steps: int
    particles: int
    n_w: int
    inner_dt: float

    def increments(self, n: int) -> np.ndarray:
        if not 0 <= n < self.n_slabs:
            raise IndexError(f"subinterval {n} outside 0..{self.n_slabs - 1}")
        rng = philox_stream(self.seed, _BROWNIAN_TAG, n)
        dw = rng.standard_normal((self.steps, self.particles, self.n_w))
        return dw * math.sqrt(self.inner_dt)


def _mean_field(model: SdeModel, states: np.ndarray) -> np.ndarray:
    if model.psi is None:
        return _EMPTY_OBSERVABLE
    return np.mean(model.psi(states), axis=0)


def _noise_increment(bmat: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """Contract diffusion output with one step of increments, shape (P, d)."""
    particles = dw.shape[0]
    if bmat.ndim == 2:  # constant (d, n_w)
        dim = bmat.shape[0]
        out = np.zeros((particles, dim))
        for i in range(dim):
            for w in range(bmat.shape[1]):
                if bmat[i, w] != 0.0:
                    out[:, i] += bmat[i, w] * dw[:, w]
        return out
    out = np.zeros((particles, bmat.shape[1]))
    for i in range(bmat.shape[1]):
        for w in range(bmat.shape[2]):
            out[:, i] += bmat[:, i, w] * dw[:, w]
    return out


def em_propagate(ens: Ensemble, model: SdeModel, dw_table: np.ndarray,
                 inner_dt: float, t0: float = 0.0) -> Ensemble:
    """Euler-Maruyama over a subinterval with the given increment block.

    One step per leading entry of ``dw_table`` (shape (steps, P, n_w),
    increments already scaled by sqrt(inner_dt)).  Coefficients are
    evaluated at the left endpoint (Ito); the mean-field observable is
    re-estimated from the ensemble before every step.  Particle updates
    are vectorized; reductions keep numpy's fixed pairwise order.
    """
    if inner_dt <= 0.0:
        raise ValueError("inner_dt must be > 0")
    if dw_table.shape[1:] != (ens.particles, model.n_w):
        raise ValueError(
            f"increment block shape {dw_table.shape} does not match "
            f"(steps, {ens.particles}, {model.n_w})"
        )
    states = ens.states
    t = t0
    for s in range(dw_table.shape[0]):
        lam = _mean_field(model, states)
        a = model.drift(states, lam, t)
        bmat = np.asarray(model.diffusion(states, lam, t), dtype=float)
        states = states + a * inner_dt + _noise_increment(bmat, dw_table[s])
        bad = ~np.isfinite(states)
        if bad.any():
            p = int(np.nonzero(bad.any(axis=1))[0][0])
            raise NonFinite(f"non-finite state at step {s}, particle {p}")
        t = t0 + (s + 1) * inner_dt
    return Ensemble(states, provenance=ens.provenance)


def _point_coeffs(model: SdeModel, m: np.ndarray, t: float):
    lam = _EMPTY_OBSERVABLE if model.psi is None else model.psi(m[None, :])[0]
    a0 = np.asarray(model.drift(m[None, :], lam, t), dtype=float)[0]
    b0 = np.asarray(model.diffusion(m[None, :], lam, t), dtype=float)
    if b0.ndim == 3:
        b0 = b0[0]
    return lam, a0, b0


def moment_rhs(s: MomentState, model: SdeModel, t: float = 0.0):
    """Right-hand side of the moment closure ODEs.

    dM/dt = a(M, psi(M), t) + 1/2 * (Hessian stack : Sigma)
    dSigma/dt = A1 Sigma + Sigma A1^T + sum_w B1_w Sigma B1_w^T + b b^T

    evaluated at the mean.  Returns (dmean, dcov) with dcov exactly
    symmetric.
    """
    m, cov = s.mean, s.cov
    lam, a0, b0 = _point_coeffs(model, m, t)
    dmean = a0.copy()
    if model.drift_hessians is not None:
        hess = np.asarray(model.drift_hessians(m), dtype=float)
        dmean += 0.5 * np.einsum("jab,ab->j", hess, cov)
    a1 = np.asarray(model.drift_jac(m, lam, t), dtype=float)
    dcov = a1 @ cov + cov @ a1.T + b0 @ b0.T
    if model.diffusion_jac is not None:
        for b1 in np.asarray(model.diffusion_jac(m, lam, t), dtype=float):
            dcov += b1 @ cov @ b1.T
    dcov = 0.5 * (dcov + dcov.T)
    return dmean, dcov


def _resolve_steps(length: float, inner_dt: float) -> int:
    steps = round(length / inner_dt)
    if steps < 1 or abs(steps * inner_dt - length) > 1e-9 * max(1.0, abs(length)):
        raise ValueError(f"inner_dt {inner_dt} does not divide interval {length}")
    return steps


def moment_propagate(s: MomentState, model: SdeModel, length: float,
                     inner_dt: float, t0: float = 0.0) -> MomentState:
    """Forward Euler on the moment ODEs over one subinterval."""
    steps = _resolve_steps(length, inner_dt)
    m, cov = s.mean, s.cov
    for i in range(steps):
        dmean, dcov = moment_rhs(MomentState(m, cov), model, t0 + i * inner_dt)
        m = m + inner_dt * dmean
        cov = cov + inner_dt * dcov
        cov = 0.5 * (cov + cov.T)
        if not (np.isfinite(m).all() and np.isfinite(cov).all()):
            raise NonFinite(f"moment blow-up at step {i}")
    return MomentState(m, cov)


def moment_history(model: SdeModel, s0: MomentState, t_final: float,
                   inner_dt: float, t0: float = 0.0):
    """Moment ODE trajectory on the inner time grid.

    Returns (t, means, covs) with shapes (S+1,), (S+1, d), (S+1, d, d).
    """
    steps = _resolve_steps(t_final - t0, inner_dt)
    t = t0 + inner_dt * np.arange(steps + 1)
    means = np.empty((steps + 1, s0.dim))
    covs = np.empty((steps + 1, s0.dim, s0.dim))
    state = s0
    means[0], covs[0] = state.mean, state.cov
    for i in range(steps):
        state = moment_propagate(state, model, inner_dt, inner_dt, t0=t[i])
        means[i + 1], covs[i + 1] = state.mean, state.cov
    return t, means, covs


def mc_moment_history(model: SdeModel, particles: int, t_final: float,
                      inner_dt: float, seed: int):
    """Sample-moment trajectory of one Euler-Maruyama ensemble run.

    Same return convention as :func:`moment_history`.
    """
    steps = _resolve_steps(t_final, inner_dt)
    ens = Ensemble(
        np.asarray(model.initial_sampler(particles, philox_stream(seed, _INITIAL_TAG)),
                   dtype=float),
        provenance=("seed", seed),
    )
    table = BrownianTable(seed, n_slabs=steps, steps=1, particles=particles,
                          n_w=model.n_w, inner_dt=inner_dt)
    t = inner_dt * np.arange(steps + 1)
    means = np.empty((steps + 1, model.dim))
    covs = np.empty((steps + 1, model.dim, model.dim))
    s = restrict(ens)
    means[0], covs[0] = s.mean, s.cov
    for i in range(steps):
        ens = em_propagate(ens, model, table.increments(i), inner_dt, t0=t[i])
        s = restrict(ens)
        means[i + 1], covs[i + 1] = s.mean, s.cov
    return t, means, covs


def _sample_moments(states: np.ndarray):
    """Sample mean and population (1/P) covariance, exactly symmetric."""
    dim = states.shape[1]
    mean = states.mean(axis=0)
    centered = states - mean
    cov = np.empty((dim, dim))
    for i in range(dim):
        for j in range(i + 1):
            cov[i, j] = cov[j, i] = np.mean(centered[:, i] * centered[:, j])
    return mean, cov


def restrict(ens: Ensemble) -> MomentState:
    """Sample mean and population covariance of the ensemble."""
    mean, cov = _sample_moments(ens.states)
    return MomentState(mean, cov)


@dataclass(frozen=True)
class MatchInfo:
    """What the matching operator actually did."""

    target_used: MomentState
    psd_repaired: bool
    resampled_dims: tuple[int, ...]


def _affine_transform(states, prior_mean, A, target_mean):
    """target_mean + A @ (states - prior_mean), row-wise, fixed eval order.

    Written so that an exact-identity A and equal means reproduce the
    input up to one rounding per entry (no matrix-multiply reordering).
    """
    particles, dim = states.shape
    out = np.empty_like(states)
    for i in range(dim):
        acc = np.full(particles, target_mean[i])
        for j in range(i + 1):  # A is lower triangular
            if A[i, j] != 0.0:
                acc = acc + A[i, j] * (states[:, j] - prior_mean[j])
        out[:, i] = acc
    return out


def match(target: MomentState, ens: Ensemble,
          rng: Optional[np.random.Generator] = None,
          repair: str = "clip") -> tuple[Ensemble, MatchInfo]:
    """Transform the ensemble so its sample moments equal the target.

    Factor target covariance = U U^T and ensemble covariance = Q Q^T, then
    map particles through X -> U Q^{-1} (X - E[X]) + M (triangular solve,
    never an explicit inverse).  Coordinates whose ensemble pivot is
    degenerate are first resampled from a standard normal using ``rng``
    and the factorization redone.  A non-PSD target covariance is repaired
    by eigenvalue clipping at zero under the default ``repair='clip'``
    policy and rejected under ``'strict'``; the repaired target is
    reported in the returned :class:`MatchInfo` and is what the output
    moments reproduce.
    """
    if repair not in ("clip", "strict"):
        raise ValueError(f"unknown repair policy {repair!r}")
    if ens.particles < 2:
        raise EmptyEnsemble("matching needs at least 2 particles")

    target_used = target
    psd_repaired = False
    try:
        u_factor, _ = smallmat.cholesky(target.cov)
    except smallmat.NotPSD as exc:
        if repair == "strict":
            raise UnrepairableCovariance(str(exc)) from exc
        repaired = smallmat.nearest_psd(target.cov, 0.0).entries
        target_used = MomentState(target.mean, repaired)
        u_factor, _ = smallmat.cholesky(target_used.cov)
        psd_repaired = True

    states = ens.states
    prior_mean, prior_cov = _sample_moments(states)
    q_factor, degenerate = smallmat.cholesky(prior_cov)
    resampled: tuple[int, ...] = ()
    if degenerate:
        if rng is None:
            raise ValueError("ensemble covariance is rank deficient and no "
                             "resampling rng stream was provided")
        states = states.copy()
        for j in degenerate:
            states[:, j] = rng.standard_normal(ens.particles)
        resampled = tuple(degenerate)
        prior_mean, prior_cov = _sample_moments(states)
        q_factor, degenerate = smallmat.cholesky(prior_cov)
        if degenerate:
            raise DegenerateEnsemble(
                f"covariance still rank deficient in dims {degenerate} after resampling"
            )

    A = smallmat.solve_right_lower(u_factor.entries, q_factor.entries)
    out = _affine_transform(states, prior_mean, A, target_used.mean)
    info = MatchInfo(target_used=target_used, psd_repaired=psd_repaired,
                     resampled_dims=resampled)
    return Ensemble(out, provenance=ens.provenance), info


class MomentsCoupling(engine.Coupling):
    """Moment restriction plus Cholesky matching, with per-(k, n) rng streams.

    Lifting matches against the initial ensemble (drawn once per run), so
    repeated lifts are deterministic.  Resampling streams are keyed by
    (seed, k, n) to stay independent of scheduling.
    """

    def __init__(self, seed: int, initial: Ensemble, repair: str = "clip"):
        self.seed = seed
        self.initial = initial
        self.repair = repair

    def restrict(self, micro: Ensemble) -> MomentState:
        return restrict(micro)

    def match(self, macro: MomentState, prior: Ensemble, k: int, n: int):
        rng = philox_stream(self.seed, _RESAMPLE_TAG, k, n)
        ens, info = match(macro, prior, rng=rng, repair=self.repair)
        events: tuple = ()
        if info.psd_repaired or info.resampled_dims:
            events = (engine.DiagnosticEvent(k=k, n=n,
                                             psd_repaired=info.psd_repaired,
                                             resampled_dims=info.resampled_dims),)
        return ens, info.target_used, events

    def lift(self, macro: MomentState, n: int):
        return self.match(macro, self.initial, 0, n)


@dataclass(frozen=True)
class ParaSetup:
    """Everything the Parareal driver needs for one SDE run."""

    propagators: engine.Propagators
    coupling: MomentsCoupling
    algebra: engine.MacroAlgebra
    u0: Ensemble
    table: BrownianTable


def make_parareal_setup(model: SdeModel, particles: int, t_final: float,
                        n_slabs: int, inner_dt: float, seed: int,
                        repair: str = "clip") -> ParaSetup:
    """Wire the SDE fine/coarse propagators and coupling for the driver.

    The fine propagator is Euler-Maruyama over the subinterval's fixed
    Brownian block; the coarse propagator is forward Euler on the moment
    ODEs with the same inner step.
    """
    slab = t_final / n_slabs
    steps = _resolve_steps(slab, inner_dt)
    table = BrownianTable(seed, n_slabs=n_slabs, steps=steps,
                          particles=particles, n_w=model.n_w, inner_dt=inner_dt)
    u0 = Ensemble(
        np.asarray(model.initial_sampler(particles, philox_stream(seed, _INITIAL_TAG)),
                   dtype=float),
        provenance=("seed", seed),
    )

    def fine(ens: Ensemble, n: int) -> Ensemble:
        return em_propagate(ens, model, table.increments(n), inner_dt, t0=n * slab)

    def coarse(s: MomentState, n: int) -> MomentState:
        return moment_propagate(s, model, slab, inner_dt, t0=n * slab)

    return ParaSetup(
        propagators=engine.Propagators(fine=fine, coarse=coarse),
        coupling=MomentsCoupling(seed=seed, initial=u0, repair=repair),
        algebra=MOMENT_ALGEBRA,
        u0=u0,
        table=table,
    )


def roberts_model(alpha: float = 1.0, sigma: float = 1.0) -> SdeModel:
    """Planar test SDE dx = (alpha*x - x*y) dt, dy = (x^2 - y) dt + sigma dW.

    Additive noise on the second component only (so the Ito and
    Stratonovich readings coincide and the diffusion Jacobian vanishes),
    pointwise initial condition (1, 1).  The drift Hessians feed the
    second-order term of the moment closure; there is no mean-field
    dependence.
    """

    def drift(states, lam, t):
        x, y = states[:, 0], states[:, 1]
        return np.column_stack((alpha * x - x * y, x * x - y))

    def diffusion(states, lam, t):
        return np.array([[0.0], [sigma]])

    def drift_jac(m, lam, t):
        return np.array([[alpha - m[1], -m[0]], [2.0 * m[0], -1.0]])

    def drift_hessians(m):
        return np.array([[[0.0, -1.0], [-1.0, 0.0]],
                         [[2.0, 0.0], [0.0, 0.0]]])

    def initial_sampler(particles, rng):
        return np.ones((particles, 2))

    return SdeModel(dim=2, n_w=1, drift=drift, diffusion=diffusion,
                    initial_sampler=initial_sampler, drift_jac=drift_jac,
                    drift_hessians=drift_hessians)

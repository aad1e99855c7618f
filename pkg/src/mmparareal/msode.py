"""Two-scale linear ODE testbed with computable Parareal convergence bounds.

The full model is the upper-triangular linear system

    dx/dt = alpha*x + beta*y
    dy/dt = delta*y

whose slow variable is approximated by the reduced model dX/dt =
alpha_bar*X.  The fine propagator is the exact matrix exponential over one
subinterval, the coarse propagator the exact exponential of the reduced
rate.  Coupling operators: restrict (x, y) -> x, match (X, (x, y)) ->
(X, y), lift X -> (X, 0).

Besides the propagators this module evaluates three a-priori error bounds
for the slow variable (linear, superlinear, and a non-tight operator-norm
recursion) and the exact error recursion used as an independent oracle on
the driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import engine, smallmat

__all__ = [
    "TwoScaleParams",
    "PropagatorMatrices",
    "BoundInputs",
    "DegenerateBound",
    "fine_prop",
    "coarse_prop",
    "restrict",
    "match",
    "lift",
    "make_propagators",
    "make_coupling",
    "run",
    "slow_errors",
    "error_recursion_oracle",
    "gamma_coefficient",
    "linear_bound",
    "superlinear_bound",
    "nontight_bound",
    "fast_error_bound",
    "bound_inputs_from_grid",
]


class DegenerateBound(ZeroDivisionError):
    """Linear bound undefined because the coarse multiplier G equals 1."""


@dataclass(frozen=True)
class TwoScaleParams:
    """Parameters of the two-scale model, its reduction, and the time grid.

    ``delta`` may be specified directly or derived as a timescale ratio
    over a small parameter via :meth:`with_timescale`.  The linear and
    superlinear bounds assume ``alpha < 0`` and ``delta < 0``
    (see :attr:`bounds_valid`).
    """

    alpha: float
    beta: float
    delta: float
    alpha_bar: float
    dt: float = 1.0
    n_slabs: int = 10
    x0: float = 1.0
    y0: float = 1.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be > 0")
        if self.n_slabs < 1:
            raise ValueError("n_slabs must be >= 1")

    @classmethod
    def with_timescale(cls, alpha, beta, zeta_timescale, eps, alpha_bar, **kw):
        """Derive the fast rate as delta = zeta_timescale / eps."""
        return cls(alpha=alpha, beta=beta, delta=zeta_timescale / eps,
                   alpha_bar=alpha_bar, **kw)

    @property
    def bounds_valid(self) -> bool:
        return self.alpha < 0.0 and self.delta < 0.0


def perturbed_reduced_rate(alpha: float, zeta_perturb: float) -> float:
    """Reduced decay rate alpha*(1 + zeta_perturb)."""
    return alpha * (1.0 + zeta_perturb)


@dataclass(frozen=True)
class PropagatorMatrices:
    """Fine matrix A = exp(K*dt) and coarse multiplier G = exp(alpha_bar*dt)."""

    A: smallmat.UpperTri2x2Exp
    G: float

    @classmethod
    def from_params(cls, p: TwoScaleParams) -> "PropagatorMatrices":
        return cls(A=smallmat.expm_2x2_upper(p.alpha, p.beta, p.delta, p.dt),
                   G=math.exp(p.alpha_bar * p.dt))


@lru_cache(maxsize=None)
def _matrices(p: TwoScaleParams) -> PropagatorMatrices:
    return PropagatorMatrices.from_params(p)


def fine_prop(u, p: TwoScaleParams) -> np.ndarray:
    """Exact propagation of the full 2-vector over one subinterval."""
    return _matrices(p).A.apply(u)


def coarse_prop(X: float, p: TwoScaleParams) -> float:
    """Exact propagation of the reduced slow variable over one subinterval."""
    return _matrices(p).G * X


def restrict(u) -> float:
    return float(u[0])


def match(X: float, u) -> np.ndarray:
    """Replace the slow component, keep the fast one."""
    return np.array([X, u[1]], dtype=float)


def lift(X: float) -> np.ndarray:
    """Zero-fill the fast component."""
    return np.array([X, 0.0])


class _SlowVariableCoupling(engine.Coupling):
    def restrict(self, micro):
        return restrict(micro)

    def match(self, macro, prior, k, n):
        return match(macro, prior), macro, ()

    def lift(self, macro, n):
        return lift(macro), macro, ()


def make_propagators(p: TwoScaleParams) -> engine.Propagators:
    return engine.Propagators(fine=lambda u, n: fine_prop(u, p),
                              coarse=lambda X, n: coarse_prop(X, p))


def make_coupling() -> engine.Coupling:
    return _SlowVariableCoupling()


def run(p: TwoScaleParams, iters: int | None = None, workers: int = 1) -> engine.IterateGrid:
    """Micro-macro Parareal on the two-scale model; iters defaults to n_slabs."""
    if iters is None:
        iters = p.n_slabs
    u0 = np.array([p.x0, p.y0])
    return engine.run_micro_macro(make_propagators(p), make_coupling(),
                                  engine.NUMERIC_ALGEBRA, u0, p.n_slabs,
                                  iters, workers=workers)


def slow_errors(grid: engine.IterateGrid) -> engine.ErrorTable:
    return engine.error_table(grid, lambda u: u[0])


def fast_errors(grid: engine.IterateGrid) -> engine.ErrorTable:
    return engine.error_table(grid, lambda u: u[1])


def error_recursion_oracle(p: TwoScaleParams, e0: np.ndarray, iters: int) -> np.ndarray:
    """Exact error recursion e[k+1][n+1] = (A - B) e[k][n] + B e[k+1][n].

    ``e0`` holds the measured micro-state errors of the zeroth iterate,
    shape (N+1, 2).  Returns all iterates' errors, shape (K+1, N+1, 2),
    with e[k][0] = 0 for k >= 1.  Independent of the Parareal driver; the
    driver's measured errors must reproduce it to roundoff.
    """
    m = _matrices(p)
    A_minus_B = np.array([[m.A.F - m.G, m.A.b], [0.0, m.A.d_fast]])
    B = np.array([[m.G, 0.0], [0.0, 0.0]])
    e0 = np.asarray(e0, dtype=float)
    n_slabs = e0.shape[0] - 1
    e = np.zeros((iters + 1, n_slabs + 1, 2))
    e[0] = e0
    for k in range(iters):
        for n in range(n_slabs):
            e[k + 1, n + 1] = A_minus_B @ e[k, n] + B @ e[k + 1, n]
    return e


def gamma_coefficient(p: TwoScaleParams) -> float:
    """Coupling coefficient gamma of the linear/superlinear bounds.

    Equals |b| of the fine propagator matrix: beta*dt*exp(delta*dt) in the
    equal-rates limit, beta/(delta-alpha)*(exp(delta*dt)-exp(alpha*dt))
    otherwise (same branch tolerance as the matrix exponential).
    """
    if p.beta == 0.0:
        return 0.0
    if abs(p.delta - p.alpha) < smallmat.EQUAL_RATE_RTOL * max(1.0, abs(p.alpha), abs(p.delta)):
        return p.beta * p.dt * math.exp(p.delta * p.dt)
    return p.beta / (p.delta - p.alpha) * (math.exp(p.delta * p.dt) - math.exp(p.alpha * p.dt))


@dataclass(frozen=True)
class BoundInputs:
    """Measured ingredients of the slow-variable bounds.

    ``e_x0_max`` and ``e_y0_max`` are the max-over-n errors of the actual
    zeroth iterate (what the bounds are anchored to), not a-priori guesses.
    ``bound_amplification(k)`` is the geometric amplification factor of the
    superlinear bound's forcing term.
    """

    F: float
    G: float
    d_fast: float
    gamma: float
    e_x0_max: float
    e_y0_max: float
    n_slabs: int

    def bound_amplification(self, k: int) -> float:
        if abs(self.G) < 1.0:
            return (1.0 - abs(self.G) ** self.n_slabs) / (1.0 - abs(self.G))
        return abs(self.G) ** self.n_slabs * math.comb(self.n_slabs - 1, k)


def bound_inputs_from_grid(p: TwoScaleParams, grid: engine.IterateGrid) -> BoundInputs:
    m = _matrices(p)
    return BoundInputs(
        F=m.A.F,
        G=m.G,
        d_fast=m.A.d_fast,
        gamma=gamma_coefficient(p),
        e_x0_max=float(slow_errors(grid).e_max[0]),
        e_y0_max=float(fast_errors(grid).e_max[0]),
        n_slabs=grid.n_slabs,
    )


def linear_bound(inp: BoundInputs, k: int) -> float:
    """Linear-in-k bound on max_n |x[k][n] - x_n|.

    ((F-G)/(1-G))^k e_x0 + gamma/(1-G) * sum_i ((F-G)/(1-G))^i
    d^{k-1-i} e_y0.
    """
    if inp.G == 1.0:
        raise DegenerateBound("coarse multiplier G == 1")
    r = (inp.F - inp.G) / (1.0 - inp.G)
    acc = r ** k * inp.e_x0_max
    forcing = sum(r ** i * inp.d_fast ** (k - 1 - i) for i in range(k))
    return acc + inp.gamma / (1.0 - inp.G) * forcing * inp.e_y0_max


def superlinear_bound(inp: BoundInputs, k: int) -> float:
    """Superlinear bound on max_n |x[k][n] - x_n|; requires 0 <= k <= N.

    (F-G)^k binom(N-1, k) e_x0 + gamma*Q(k) * sum_i (F-G)^i binom(N-1, i)
    d^{k-1-i} e_y0, with Q the geometric amplification factor.  The first
    term vanishes at k == N (the bound reflects finite termination).
    """
    if not 0 <= k <= inp.n_slabs:
        raise ValueError("superlinear bound requires 0 <= k <= n_slabs")
    dF = inp.F - inp.G
    n = inp.n_slabs
    acc = dF ** k * math.comb(n - 1, k) * inp.e_x0_max
    forcing = sum(dF ** i * math.comb(n - 1, i) * inp.d_fast ** (k - 1 - i)
                  for i in range(k))
    return acc + inp.gamma * inp.bound_amplification(k) * forcing * inp.e_y0_max


def nontight_bound(p: TwoScaleParams, e0_norms: np.ndarray, iters: int) -> np.ndarray:
    """Generating-function style bound iterated with equality.

    Runs the scalar recursion E[k+1][n+1] = |A - B| E[k][n] + |B| E[k+1][n]
    in the infinity operator norm, seeded with the measured vector norms of
    the zeroth iterate.  Returns the max over n >= 1 for each k.
    """
    m = _matrices(p)
    norm_amb = max(abs(m.A.F - m.G) + abs(m.A.b), abs(m.A.d_fast))
    norm_b = abs(m.G)
    e0_norms = np.asarray(e0_norms, dtype=float)
    n_slabs = e0_norms.shape[0] - 1
    E = np.zeros((iters + 1, n_slabs + 1))
    E[0] = e0_norms
    for k in range(iters):
        for n in range(n_slabs):
            E[k + 1, n + 1] = norm_amb * E[k, n] + norm_b * E[k + 1, n]
    return E[:, 1:].max(axis=1)


def fast_error_bound(p: TwoScaleParams, e_y0_max: float, k: int) -> float:
    """exp(delta*dt)^k * e_y0_max; an equality for the linear fast recursion."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return math.exp(p.delta * p.dt) ** k * e_y0_max

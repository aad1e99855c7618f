"""Dense linear-algebra kernels for small matrices (d <= ~10).

Everything here is sized for the macro states of the solvers in this
package: covariance matrices of a handful of state dimensions and the
2x2 upper-triangular generator of the two-scale linear test problem.
The Cholesky routine reports (rather than hides) rank deficiency, since
degenerate pivots drive the ensemble resampling rule downstream.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Relative tolerance deciding when two decay rates count as equal; below it
# the closed-form coupling entry beta/(delta-alpha)*(e^{dt}-e^{at}) would
# cancel catastrophically, so the limit formula is used instead.
EQUAL_RATE_RTOL = 1e-8

# Default Cholesky pivot tolerance is this factor times the largest diagonal
# entry (scale-invariant rank detection).
PIVOT_RTOL = 1e-12


class NotPSD(ValueError):
    """A matrix required to be positive semidefinite has a pivot below -tol."""


class SingularMatrix(ValueError):
    """A matrix required to be invertible is numerically singular."""


def _as_square_array(entries, name: str) -> np.ndarray:
    a = np.array(entries, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"{name} must be a square 2-d array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class SymMatrix:
    """Exactly symmetric real matrix.

    Construction symmetrizes via (S + S^T)/2, so ``entries[i, j] ==
    entries[j, i]`` holds bitwise afterwards.
    """

    entries: np.ndarray

    def __init__(self, entries):
        a = _as_square_array(entries, "SymMatrix")
        object.__setattr__(self, "entries", 0.5 * (a + a.T))

    @property
    def d(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class LowerTriangular:
    """Lower-triangular factor with nonnegative diagonal."""

    entries: np.ndarray

    def __init__(self, entries):
        a = _as_square_array(entries, "LowerTriangular")
        if np.any(np.triu(a, 1) != 0.0):
            raise ValueError("nonzero entry above the diagonal")
        if np.any(np.diag(a) < 0.0):
            raise ValueError("negative diagonal entry")
        object.__setattr__(self, "entries", a)

    @property
    def d(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class UpperTri2x2Exp:
    """exp(K*t) for an upper-triangular 2x2 generator K = [[a, b], [0, d]].

    ``F`` is the slow-decay entry exp(alpha*t), ``d_fast`` the fast-decay
    entry exp(delta*t) and ``b`` the coupling entry.
    """

    F: float
    b: float
    d_fast: float

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.F, self.b], [0.0, self.d_fast]])

    def apply(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.array([self.F * u[0] + self.b * u[1], self.d_fast * u[1]])

    def compose(self, other: "UpperTri2x2Exp") -> "UpperTri2x2Exp":
        """Triangular product self @ other (semigroup composition)."""
        return UpperTri2x2Exp(
            F=self.F * other.F,
            b=self.F * other.b + self.b * other.d_fast,
            d_fast=self.d_fast * other.d_fast,
        )


def cholesky(S, pivot_tol: float | None = None) -> tuple[LowerTriangular, list[int]]:
    """Cholesky factor of a PSD matrix, with degenerate-pivot reporting.

    Pivots with value <= ``pivot_tol`` are set to zero (together with their
    column) and their indices returned; these mark coordinates the caller may
    need to resample.  ``pivot_tol`` defaults to ``PIVOT_RTOL * max(diag)``.

    Parameters
    ----------
    S : SymMatrix or array_like
        Matrix to factor; plain arrays are symmetrized on the way in.
    pivot_tol : float, optional
        Nonnegative absolute pivot tolerance.

    Returns
    -------
    (L, degenerate) where ``L @ L.T`` reconstructs the non-degenerate part
    of S and ``degenerate`` lists the zeroed pivot indices.

    Raises
    ------
    NotPSD
        If any pivot falls below ``-pivot_tol``.
    """
    if not isinstance(S, SymMatrix):
        S = SymMatrix(S)
    a = S.entries
    d = S.d
    if pivot_tol is None:
        pivot_tol = PIVOT_RTOL * max(1e-300, float(np.max(np.diag(a))))
    if pivot_tol < 0.0:
        raise ValueError("pivot_tol must be >= 0")

    L = np.zeros((d, d))
    degenerate: list[int] = []
    for j in range(d):
        pivot = a[j, j] - sum(L[j, k] * L[j, k] for k in range(j))
        if pivot < -pivot_tol:
            raise NotPSD(f"pivot {pivot!r} at index {j} below -{pivot_tol!r}")
        if pivot <= pivot_tol:
            degenerate.append(j)
            continue  # L[j, j] and the column below stay zero
        L[j, j] = math.sqrt(pivot)
        for i in range(j + 1, d):
            off = a[i, j] - sum(L[i, k] * L[j, k] for k in range(j))
            L[i, j] = off / L[j, j]
    return LowerTriangular(L), degenerate


def solve_right_lower(U: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solve A @ Q = U for A, with Q lower triangular and invertible.

    Plain back-substitution.  When U and Q are bitwise-identical the result
    is exactly the identity, a property the matching operator relies on for
    finite termination of the Parareal iteration.
    """
    U = np.asarray(U, dtype=float)
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    if np.any(np.diag(Q) == 0.0):
        raise SingularMatrix("lower-triangular factor has a zero diagonal entry")
    A = np.zeros((d, d))
    for r in range(d):
        for c in range(d - 1, -1, -1):
            s = U[r, c] - sum(A[r, j] * Q[j, c] for j in range(c + 1, d))
            A[r, c] = s / Q[c, c]
    return A


def nearest_psd(S, eig_floor: float = 0.0) -> SymMatrix:
    """Clip the eigenvalues of a symmetric matrix up to ``eig_floor``.

    Returns ``S`` unchanged when its spectrum already satisfies the floor;
    otherwise the symmetric eigendecomposition is recomposed with clipped
    eigenvalues (the Frobenius-nearest PSD repair).
    """
    if eig_floor < 0.0:
        raise ValueError("eig_floor must be >= 0")
    if not isinstance(S, SymMatrix):
        S = SymMatrix(S)
    w, v = np.linalg.eigh(S.entries)
    if w[0] >= eig_floor:
        return S
    w = np.maximum(w, eig_floor)
    return SymMatrix((v * w) @ v.T)


def expm_2x2_upper(alpha: float, beta: float, delta: float, t: float) -> UpperTri2x2Exp:
    """exp(t * [[alpha, beta], [0, delta]]) in closed form.

    The coupling entry follows the convention obtained by direct
    substitution into the variation-of-constants solution,
    ``b = beta/(delta - alpha) * (exp(delta t) - exp(alpha t))``, switching
    to the limit ``beta * t * exp(alpha t)`` when the rates are equal to
    within EQUAL_RATE_RTOL.
    """
    if t < 0.0:
        raise ValueError("t must be >= 0")
    F = math.exp(alpha * t)
    d_fast = math.exp(delta * t)
    if beta == 0.0:
        b = 0.0
    elif abs(delta - alpha) < EQUAL_RATE_RTOL * max(1.0, abs(alpha), abs(delta)):
        b = beta * t * F
    else:
        b = beta / (delta - alpha) * (d_fast - F)
    return UpperTri2x2Exp(F=F, b=b, d_fast=d_fast)


def solve_linear_recursion(A, B, b, eps: float, eps0, e0, k: int) -> np.ndarray:
    """Closed-form value of the forced linear recursion at step k.

    Solves ``A e(j) = B e(j-1) + b * eps**(j-1) * eps0`` for ``e(k)``:

        e(k) = (A^-1 B)^k e(0)
             + sum_{i=0}^{k-1} (A^-1 B)^i A^-1 (b * eps0) eps^(k-1-i)

    ``b`` may be a scalar or a vector (multiplied elementwise into
    ``eps0``).  Must agree with direct forward iteration; used as the
    independent oracle in the convergence-bound tests.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    e0 = np.atleast_1d(np.asarray(e0, dtype=float))
    forcing = np.atleast_1d(np.asarray(b, dtype=float) * np.asarray(eps0, dtype=float))
    try:
        AinvB = np.linalg.solve(A, B)
        Ainvf = np.linalg.solve(A, forcing)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    if k == 0:
        return e0.copy()
    out = np.linalg.matrix_power(AinvB, k) @ e0
    term = Ainvf.copy()
    for i in range(k):
        out = out + term * eps ** (k - 1 - i)
        term = AinvB @ term
    return out

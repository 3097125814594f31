"""B-spline and NURBS curves: knot vectors, basis evaluation, curve geometry,
Greville abscissae and least-squares graph fitting.

Only open (clamped) knot vectors are supported. Basis evaluation follows the
Cox-de Boor recursion; derivative evaluation uses the standard triangular-table
algorithm. Rational (weighted) evaluation happens at the curve level, the basis
routines return plain B-spline values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FitError, SingularityError


# ---------------------------------------------------------------------------
# knot vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open knot vector of a given polynomial degree."""

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "knots", np.asarray(self.knots, dtype=float))
        p, U = self.degree, self.knots
        if p < 1:
            raise DomainError(f"degree must be >= 1, got {p}")
        if U.ndim != 1 or U.size < 2 * (p + 1):
            raise DomainError("knot vector too short for its degree")
        if np.any(np.diff(U) < 0.0):
            raise DomainError("knots must be non-decreasing")
        # open form: first and last knot repeated exactly p+1 times
        if not (np.all(U[: p + 1] == U[0]) and U[p + 1] > U[0]):
            raise DomainError("knot vector is not open at the start")
        if not (np.all(U[-(p + 1):] == U[-1]) and U[-(p + 2)] < U[-1]):
            raise DomainError("knot vector is not open at the end")
        if self.n_basis < p + 1:
            raise DomainError("fewer basis functions than degree + 1")

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def start(self) -> float:
        return float(self.knots[0])

    @property
    def end(self) -> float:
        return float(self.knots[-1])

    def find_span(self, theta: float) -> int:
        """Index i with knots[i] <= theta < knots[i+1] (right-limit rule;
        the last knot maps to the final nonempty span)."""
        p, U, n = self.degree, self.knots, self.n_basis
        if theta < self.start or theta > self.end:
            raise DomainError(
                f"parameter {theta} outside knot range [{self.start}, {self.end}]")
        if theta >= U[n]:
            return n - 1
        span = int(np.searchsorted(U, theta, side="right")) - 1
        return min(max(span, p), n - 1)

    def spans(self) -> list[tuple[int, float, float]]:
        """Nonempty spans as (index, left, right) triples."""
        U = self.knots
        return [(i, float(U[i]), float(U[i + 1]))
                for i in range(self.degree, self.n_basis)
                if U[i + 1] > U[i]]


def open_uniform_knots(degree: int, n_basis: int,
                       start: float = 0.0, end: float = 1.0) -> KnotVector:
    """Open knot vector with uniformly spaced interior knots."""
    if n_basis < degree + 1:
        raise DomainError("need at least degree+1 basis functions")
    n_spans = n_basis - degree
    interior = np.linspace(start, end, n_spans + 1)[1:-1]
    knots = np.concatenate([
        np.full(degree + 1, start), interior, np.full(degree + 1, end)])
    return KnotVector(degree, knots)


# ---------------------------------------------------------------------------
# basis evaluation
# ---------------------------------------------------------------------------

def basis_eval(kv: KnotVector, theta: float) -> tuple[int, np.ndarray]:
    """Nonzero B-spline basis values at theta.

    Returns (span, values) where values[j] is the value of basis function
    span - degree + j. The values sum to one.
    """
    p, U = kv.degree, kv.knots
    span = kv.find_span(theta)
    N = np.empty(p + 1)
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    N[0] = 1.0
    for j in range(1, p + 1):
        left[j] = theta - U[span + 1 - j]
        right[j] = U[span + j] - theta
        saved = 0.0
        for r in range(j):
            tmp = N[r] / (right[r + 1] + left[j - r])
            N[r] = saved + right[r + 1] * tmp
            saved = left[j - r] * tmp
        N[j] = saved
    return span, N


def basis_derivatives(kv: KnotVector, theta: float,
                      order: int) -> tuple[int, np.ndarray]:
    """Basis values and derivatives up to the requested order.

    Returns (span, ders) with ders of shape (order+1, degree+1); row 0 equals
    basis_eval, row k the k-th derivatives. Rows beyond the degree are zero.
    """
    p, U = kv.degree, kv.knots
    span = kv.find_span(theta)
    ndu = np.empty((p + 1, p + 1))
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = theta - U[span + 1 - j]
        right[j] = U[span + j] - theta
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            tmp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * tmp
            saved = left[j - r] * tmp
        ndu[j, j] = saved

    ders = np.zeros((order + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[0, 0] = 1.0
        for k in range(1, min(order, p) + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1

    fac = float(p)
    for k in range(1, min(order, p) + 1):
        ders[k, :] *= fac
        fac *= p - k
    return span, ders


def basis_matrix(kv: KnotVector, thetas: np.ndarray, der: int = 0) -> np.ndarray:
    """Dense collocation matrix: row j holds all n basis (or derivative)
    values at thetas[j]."""
    thetas = np.asarray(thetas, dtype=float)
    B = np.zeros((thetas.size, kv.n_basis))
    p = kv.degree
    for j, th in enumerate(thetas):
        if der == 0:
            span, vals = basis_eval(kv, th)
        else:
            span, ders = basis_derivatives(kv, th, der)
            vals = ders[der]
        B[j, span - p: span + 1] = vals
    return B


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Greville abscissa of each basis function: the mean of its p
    interior-relevant knots."""
    p, U = kv.degree, kv.knots
    return np.array([U[i + 1: i + p + 1].mean() for i in range(kv.n_basis)])


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NurbsCurve:
    """NURBS curve in the plane; all-ones weights give a plain B-spline."""

    kv: KnotVector
    ctrl: np.ndarray      # (n, 2)
    weights: np.ndarray   # (n,)

    def __post_init__(self):
        object.__setattr__(self, "ctrl", np.asarray(self.ctrl, dtype=float))
        object.__setattr__(self, "weights",
                           np.asarray(self.weights, dtype=float))
        if self.ctrl.shape != (self.kv.n_basis, 2):
            raise DomainError("control point count must match the knot vector")
        if self.weights.shape != (self.kv.n_basis,):
            raise DomainError("one weight per control point required")
        if np.any(self.weights <= 0.0):
            raise DomainError("weights must be strictly positive")

    def point(self, theta: float) -> np.ndarray:
        span, N = basis_eval(self.kv, theta)
        sl = slice(span - self.kv.degree, span + 1)
        wN = N * self.weights[sl]
        return wN @ self.ctrl[sl] / wN.sum()

    def points(self, thetas: np.ndarray) -> np.ndarray:
        return np.array([self.point(t) for t in np.asarray(thetas, dtype=float)])

    def derivative(self, theta: float) -> tuple[np.ndarray, np.ndarray]:
        """Curve point and first derivative (quotient rule over the
        weighted form)."""
        span, ders = basis_derivatives(self.kv, theta, 1)
        sl = slice(span - self.kv.degree, span + 1)
        w = self.weights[sl]
        P = self.ctrl[sl]
        W = ders[0] @ w
        Wp = ders[1] @ w
        A = (ders[0] * w) @ P
        Ap = (ders[1] * w) @ P
        C = A / W
        return C, (Ap - Wp * C) / W

    def tangent_normal(self, theta: float) -> tuple[np.ndarray, np.ndarray]:
        """Unit tangent t = C'/|C'| and unit normal n = (-t_y, t_x)."""
        _, Cp = self.derivative(theta)
        scale = max(1.0, float(np.abs(self.ctrl).max()))
        norm = float(np.hypot(Cp[0], Cp[1]))
        if norm < 1e-14 * scale:
            raise SingularityError(f"degenerate tangent at theta={theta}")
        t = Cp / norm
        return t, np.array([-t[1], t[0]])

    def greville_points(self) -> np.ndarray:
        return self.points(greville_abscissae(self.kv))


def fit_least_squares(samples: np.ndarray, kv: KnotVector,
                      fixed_ends: bool = False) -> NurbsCurve:
    """Least-squares graph fit of (x, y) samples by a unit-weight curve.

    Parameters are assigned by normalized sample x-coordinate (the chord
    length of a graph is its x-coordinate). With fixed_ends the first and
    last control points interpolate the first and last samples exactly.
    """
    Q = np.asarray(samples, dtype=float)
    n = kv.n_basis
    if Q.ndim != 2 or Q.shape[1] != 2:
        raise DomainError("samples must be an (m, 2) array")
    if Q.shape[0] < n:
        raise DomainError("need at least as many samples as control points")
    x = Q[:, 0]
    xmin, xmax = float(x.min()), float(x.max())
    if xmax <= xmin:
        raise DomainError("sample x-coordinates must span a nonzero interval")
    thetas = kv.start + (x - xmin) / (xmax - xmin) * (kv.end - kv.start)
    B = basis_matrix(kv, thetas)

    ctrl = np.empty((n, 2))
    if fixed_ends:
        rhs = Q - np.outer(B[:, 0], Q[0]) - np.outer(B[:, -1], Q[-1])
        Bf = B[:, 1:-1]
        sol, _, rank, _ = np.linalg.lstsq(Bf, rhs, rcond=None)
        if rank < n - 2:
            raise FitError("rank-deficient fit system")
        ctrl[0] = Q[0]
        ctrl[-1] = Q[-1]
        ctrl[1:-1] = sol
    else:
        sol, _, rank, _ = np.linalg.lstsq(B, Q, rcond=None)
        if rank < n:
            raise FitError("rank-deficient fit system")
        ctrl[:] = sol
    return NurbsCurve(kv, ctrl, np.ones(n))

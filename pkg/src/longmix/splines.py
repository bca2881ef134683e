"""Spline bases for time effects.

* Cubic B-splines (Cox-de Boor recursion) on clamped knot vectors.
* Natural cubic splines: B-splines projected onto the subspace with zero
  second derivative at both boundary knots, dropping the constant column
  (the construction used by R's ``splines::ns``), linear beyond the boundary.
* The curvature penalty matrix of a B-spline basis and its eigen-transform
  into an unpenalized (1, t) part and a curvature-orthonormal remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

Placement = Literal["quantile", "equally-spaced", "given"]


class SplineError(ValueError):
    pass


@dataclass(frozen=True)
class KnotSequence:
    interior: np.ndarray
    boundary: tuple[float, float]
    placement: Placement = "given"

    def __post_init__(self):
        interior = np.sort(np.asarray(self.interior, dtype=float).ravel())
        if not np.array_equal(interior, np.asarray(self.interior, dtype=float).ravel()):
            raise SplineError("interior knots must be sorted")
        lo, hi = float(self.boundary[0]), float(self.boundary[1])
        if not lo < hi:
            raise SplineError(f"boundary must satisfy lo < hi, got {self.boundary}")
        if interior.size and not (lo < interior[0] and interior[-1] < hi):
            raise SplineError("interior knots must lie strictly inside the boundary")
        interior.flags.writeable = False
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "boundary", (lo, hi))

    @property
    def n_interior(self) -> int:
        return int(self.interior.size)

    def full(self, degree: int) -> np.ndarray:
        """Clamped knot vector with boundary knots repeated ``degree + 1`` times."""
        lo, hi = self.boundary
        return np.concatenate([np.full(degree + 1, lo), self.interior, np.full(degree + 1, hi)])

    def shifted(self, delta: float) -> "KnotSequence":
        lo, hi = self.boundary
        return KnotSequence(self.interior + delta, (lo + delta, hi + delta), self.placement)

    def to_dict(self) -> dict:
        return {"interior": self.interior.tolist(), "boundary": list(self.boundary), "placement": self.placement}

    @classmethod
    def from_dict(cls, d) -> "KnotSequence":
        return cls(np.asarray(d["interior"], dtype=float), tuple(d["boundary"]), d.get("placement", "given"))


def quantile_knots(times, K: int) -> KnotSequence:
    """Interior knots at the k/(K+1) sample quantiles, boundary at the data range."""
    times = np.asarray(times, dtype=float).ravel()
    if K < 1:
        raise SplineError("K must be >= 1")
    if np.unique(times).size < K + 2:
        raise SplineError(f"need at least {K + 2} distinct time values for {K} interior knots")
    probs = np.arange(1, K + 1) / (K + 1)
    interior = np.quantile(times, probs)
    return KnotSequence(interior, (float(times.min()), float(times.max())), "quantile")


def equal_knots(lo: float, hi: float, K: int) -> KnotSequence:
    """K equally spaced interior knots on (lo, hi)."""
    if K < 0:
        raise SplineError("K must be >= 0")
    interior = np.linspace(lo, hi, K + 2)[1:-1]
    return KnotSequence(interior, (float(lo), float(hi)), "equally-spaced")


def _bspline_values(x: np.ndarray, t: np.ndarray, degree: int) -> np.ndarray:
    """All degree-``degree`` B-splines on knot vector ``t`` at points ``x``.

    Half-open intervals [t_j, t_{j+1}), except that the right end of the last
    non-degenerate interval is closed so the basis is a partition of unity on
    the whole closed domain.
    """
    n_basis0 = t.size - 1
    B = ((x[:, None] >= t[None, :-1]) & (x[:, None] < t[None, 1:])).astype(float)
    last = np.nonzero(t[1:] > t[:-1])[0][-1]
    B[x == t[last + 1], last] = 1.0
    for d in range(1, degree + 1):
        nb = n_basis0 - d
        left_den = t[d : d + nb] - t[:nb]
        right_den = t[d + 1 : d + 1 + nb] - t[1 : 1 + nb]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (x[:, None] - t[None, :nb]) / left_den, 0.0)
            right = np.where(right_den > 0, (t[None, d + 1 : d + 1 + nb] - x[:, None]) / right_den, 0.0)
        B = left * B[:, :nb] + right * B[:, 1 : nb + 1]
    return B


def bspline_design(x, t: np.ndarray, degree: int, deriv: int = 0) -> np.ndarray:
    """B-spline design matrix (or its ``deriv``-th derivative) on knot vector t."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if deriv > degree:
        return np.zeros((x.size, t.size - degree - 1))
    if deriv == 0:
        return _bspline_values(x, t, degree)
    lower = bspline_design(x, t, degree - 1, deriv - 1)
    nb = t.size - degree - 1
    left_den = t[degree : degree + nb] - t[:nb]
    right_den = t[degree + 1 : degree + 1 + nb] - t[1 : 1 + nb]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(left_den > 0, degree / left_den, 0.0)
        b = np.where(right_den > 0, degree / right_den, 0.0)
    return lower[:, :nb] * a - lower[:, 1 : nb + 1] * b


@dataclass(frozen=True)
class BasisMatrix:
    values: np.ndarray
    kind: Literal["natural-cubic", "b-spline"]
    knots: KnotSequence
    degree: int = 3
    times: np.ndarray | None = None

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def at(self, times, deriv: int = 0) -> np.ndarray:
        """Evaluate the same basis at new times."""
        if self.kind == "natural-cubic":
            return _natural_values(np.asarray(times, dtype=float), self.knots, deriv)
        return _bspline_checked(np.asarray(times, dtype=float), self.knots, self.degree, deriv)


def _bspline_checked(times, knots: KnotSequence, degree: int, deriv: int = 0) -> np.ndarray:
    times = np.atleast_1d(times)
    lo, hi = knots.boundary
    span = hi - lo
    tol = 1e-12 * span
    if np.any(times < lo - tol) or np.any(times > hi + tol):
        raise SplineError(f"time outside the basis domain [{lo}, {hi}]")
    return bspline_design(np.clip(times, lo, hi), knots.full(degree), degree, deriv)


def bspline_basis(times, knots: KnotSequence, degree: int = 3) -> BasisMatrix:
    """Clamped B-spline basis with Z = K + degree + 1 columns."""
    if degree < 0:
        raise SplineError("degree must be >= 0")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    values = _bspline_checked(times, knots, degree)
    return BasisMatrix(values, "b-spline", knots, degree, times)


def _natural_projection(knots: KnotSequence) -> np.ndarray:
    """(K+3) x (K+1) map from B-splines (first column dropped) to the natural basis."""
    t = knots.full(3)
    const = bspline_design(np.array(knots.boundary), t, 3, deriv=2)[:, 1:]
    Q, _ = np.linalg.qr(const.T, mode="complete")
    return Q[:, 2:]


def _natural_values(times: np.ndarray, knots: KnotSequence, deriv: int = 0) -> np.ndarray:
    times = np.atleast_1d(times)
    t = knots.full(3)
    proj = _natural_projection(knots)
    lo, hi = knots.boundary
    inside = (times >= lo) & (times <= hi)
    out = np.empty((times.size, proj.shape[1]))
    if np.any(inside):
        out[inside] = bspline_design(times[inside], t, 3, deriv)[:, 1:] @ proj
    for edge, mask in ((lo, times < lo), (hi, times > hi)):
        if not np.any(mask):
            continue
        # linear continuation from the boundary value and slope
        v0 = bspline_design(np.array([edge]), t, 3, 0)[:, 1:] @ proj
        v1 = bspline_design(np.array([edge]), t, 3, 1)[:, 1:] @ proj
        if deriv == 0:
            out[mask] = v0 + (times[mask] - edge)[:, None] * v1
        elif deriv == 1:
            out[mask] = v1
        else:
            out[mask] = 0.0
    return out


def natural_cubic_basis(times, knots: KnotSequence) -> BasisMatrix:
    """Natural cubic spline basis without intercept: K + 1 columns."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return BasisMatrix(_natural_values(times, knots), "natural-cubic", knots, 3, times)


def _gauss_legendre_intervals(knots: KnotSequence, n_points: int):
    """Quadrature nodes and weights covering the domain interval by interval."""
    edges = np.unique(np.concatenate([[knots.boundary[0]], knots.interior, [knots.boundary[1]]]))
    z, w = np.polynomial.legendre.leggauss(n_points)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = 0.5 * (b - a) * z[None, :] + 0.5 * (a + b)
    weights = 0.5 * (b - a) * w[None, :]
    return nodes.ravel(), weights.ravel()


def penalty_matrix(knots: KnotSequence, degree: int = 3) -> np.ndarray:
    """W = integral over the domain of B''(t) B''(t)^T.

    Per-interval Gauss-Legendre with ``degree`` points is exact, since the
    integrand is a polynomial of degree 2(degree - 2) on each interval.
    """
    if degree < 2:
        raise SplineError("penalty needs degree >= 2")
    nodes, weights = _gauss_legendre_intervals(knots, max(degree, 2))
    D2 = bspline_design(nodes, knots.full(degree), degree, deriv=2)
    W = (D2 * weights[:, None]).T @ D2
    return 0.5 * (W + W.T)


@dataclass(frozen=True)
class TransformedBasis:
    """(1, t, B~2(t)) reparameterization of a B-spline basis.

    ``eigen_linear`` spans the null space of the penalty (the coefficient
    vectors of constant and linear functions); ``eigen_nonlinear`` holds the
    remaining eigenvectors with eigenvalues ``eigenvalues``.
    """

    knots: KnotSequence
    degree: int
    penalty: np.ndarray
    eigen_linear: np.ndarray
    eigen_nonlinear: np.ndarray
    eigenvalues: np.ndarray
    columns: np.ndarray | None = None

    @property
    def raw_dim(self) -> int:
        return self.penalty.shape[0]

    @property
    def domain(self) -> tuple[float, float]:
        return self.knots.boundary

    @property
    def n_nonlinear(self) -> int:
        return self.eigen_nonlinear.shape[1]

    def nonlinear(self, times, deriv: int = 0) -> np.ndarray:
        """B~2(t) = B(t)^T V2 Delta^{-1/2} (or its derivative)."""
        B = _bspline_checked(np.asarray(times, dtype=float), self.knots, self.degree, deriv)
        return (B @ self.eigen_nonlinear) / np.sqrt(self.eigenvalues)

    def evaluate(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.column_stack([np.ones_like(times), times, self.nonlinear(times)])


def transform_basis(basis: BasisMatrix, W: np.ndarray, rank_tol: float = 1e-9) -> TransformedBasis:
    """Split a B-spline basis into (1, t) and curvature-orthonormal parts."""
    if basis.kind != "b-spline":
        raise SplineError("transform_basis needs a B-spline basis")
    Z = basis.n_columns
    if W.shape != (Z, Z):
        raise SplineError("penalty does not match the basis dimension")
    evals, evecs = np.linalg.eigh(W)
    scale = max(abs(evals[-1]), 1e-300)
    n_zero = int(np.sum(evals < rank_tol * scale))
    if n_zero != 2:
        raise SplineError(f"penalty has {n_zero} null directions, expected 2 (degenerate knots?)")
    V1, V2, delta = evecs[:, :2], evecs[:, 2:], evals[2:]
    tb = TransformedBasis(basis.knots, basis.degree, W, V1, V2, delta)
    if basis.times is not None:
        cols = np.column_stack([np.ones_like(basis.times), basis.times, (basis.values @ V2) / np.sqrt(delta)])
        tb = TransformedBasis(basis.knots, basis.degree, W, V1, V2, delta, cols)
    return tb


def fmm_basis(times, knots: KnotSequence, degree: int = 3) -> TransformedBasis:
    """Convenience: B-spline basis, penalty and transform in one call."""
    basis = bspline_basis(times, knots, degree)
    return transform_basis(basis, penalty_matrix(knots, degree))

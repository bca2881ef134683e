"""Nonlinear mixed models on the retrospective time scale.

Two families:

* ``pmm-polynomial``: two linear phases joined by a cubic transition of
  fixed length nu starting at the (random) changepoint. Parameters are
  level at the event, pre-transition slope, terminal slope, changepoint.
* ``smm``: four-parameter sigmoid with final level, initial level,
  midpoint (negative, years before the event) and hill slope.

Estimation is by SAEM with a random-walk Metropolis-Hastings simulation
step; the marginal likelihood is evaluated by adaptive Gauss-Hermite
quadrature.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .dataset import DatasetError, LongitudinalDataset, Subject
from .results import CovarianceStruct, FitResult, Trajectory, bic_value

log = logging.getLogger(__name__)

SMM_PARAMS = ("final", "initial", "midpoint", "hill")
PMM_PARAMS = ("level", "slope1", "slope2", "changepoint")
LOG2PI = float(np.log(2.0 * np.pi))
_DOMAIN_EPS = 1e-2


class SaemDomainError(RuntimeError):
    """A parameter stayed outside its domain for too many iterations."""


class AgqError(RuntimeError):
    """Mode search failed for a subject during adaptive quadrature."""


# ---------------------------------------------------------------------------
# parameter containers and mean functions


@dataclass(frozen=True)
class SmmParams:
    final: float
    initial: float
    midpoint: float
    hill: float

    def __post_init__(self):
        if not self.midpoint < 0:
            raise ValueError("midpoint must be negative (years before the event)")
        if not self.hill > 0:
            raise ValueError("hill slope must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.final, self.initial, self.midpoint, self.hill], dtype=float)


@dataclass(frozen=True)
class PmmParams:
    level: float
    slope1: float
    slope2: float
    changepoint: float
    nu: float = 2.0

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError("transition length must be non-negative")
        if self.changepoint + self.nu > 1e-12:
            raise ValueError("transition must end before the event (changepoint + nu <= 0)")

    @property
    def pre_intercept(self) -> float:
        return self.level + (self.slope2 - self.slope1) * (self.changepoint + 0.5 * self.nu)

    def as_array(self) -> np.ndarray:
        return np.array([self.level, self.slope1, self.slope2, self.changepoint], dtype=float)


@dataclass(frozen=True)
class TransitionCubic:
    """g(t) = sum_k coef[k] (t - origin)^k on [origin, origin + length]."""

    coef: np.ndarray
    origin: float
    length: float

    def __call__(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) - self.origin
        c = self.coef
        return c[0] + s * (c[1] + s * (c[2] + s * c[3]))

    def derivative(self, t) -> np.ndarray:
        s = np.asarray(t, dtype=float) - self.origin
        c = self.coef
        return c[1] + s * (2.0 * c[2] + 3.0 * s * c[3])

    def global_coefficients(self) -> np.ndarray:
        """Monomial coefficients in t (ascending powers)."""
        a = self.origin
        c = self.coef
        return np.array([
            c[0] - c[1] * a + c[2] * a * a - c[3] * a ** 3,
            c[1] - 2.0 * c[2] * a + 3.0 * c[3] * a * a,
            c[2] - 3.0 * c[3] * a,
            c[3],
        ])


def cubic_bridge(x0: float, x1: float, v0: float, d0: float, v1: float, d1: float) -> TransitionCubic:
    """Cubic with value/slope (v0, d0) at x0 and (v1, d1) at x1, from the 4x4 system."""
    h = x1 - x0
    if not h > 0:
        raise ValueError("transition interval must have positive length")
    A = np.array([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [1.0, h, h * h, h ** 3],
        [0.0, 1.0, 2.0 * h, 3.0 * h * h],
    ])
    coef = np.linalg.solve(A, np.array([v0, d0, v1, d1], dtype=float))
    return TransitionCubic(coef, float(x0), float(h))


def solve_transition(p: PmmParams) -> TransitionCubic:
    """Cubic joining the pre-transition and terminal lines with C1 continuity."""
    if p.nu == 0:
        raise ValueError("nu = 0 has no transition; use the abrupt two-line formula")
    x0, x1 = p.changepoint, p.changepoint + p.nu
    lam = p.pre_intercept
    return cubic_bridge(x0, x1, lam + p.slope1 * x0, p.slope1, p.level + p.slope2 * x1, p.slope2)


def pmm_curve(t, psi, nu: float) -> np.ndarray:
    """Vectorized PMM mean; ``psi[..., k]`` broadcasts against ``t`` after a trailing axis."""
    t = np.asarray(t, dtype=float)
    psi = np.asarray(psi, dtype=float)
    lvl, s1, s2, cp = (psi[..., k, None] if psi.ndim > 1 else psi[k] for k in range(4))
    lam = lvl + (s2 - s1) * (cp + 0.5 * nu)
    pre = lam + s1 * t
    post = lvl + s2 * t
    if nu == 0:
        return np.where(t < cp, pre, post)
    u = (t - cp) / nu
    a = lam + s1 * cp
    b = lvl + s2 * (cp + nu)
    u2 = u * u
    u3 = u2 * u
    mid = (2 * u3 - 3 * u2 + 1) * a + (u3 - 2 * u2 + u) * nu * s1 + (-2 * u3 + 3 * u2) * b + (u3 - u2) * nu * s2
    return np.where(t < cp, pre, np.where(t > cp + nu, post, mid))


def pmm_mean(t, p: PmmParams) -> np.ndarray:
    return pmm_curve(t, p.as_array(), p.nu)


def _smm_parts(t, psi):
    t = np.asarray(t, dtype=float)
    psi = np.asarray(psi, dtype=float)
    f0, f1, mid, hill = (psi[..., k, None] if psi.ndim > 1 else psi[k] for k in range(4))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = t / mid
        r = np.where(ratio > 0, np.power(np.where(ratio > 0, ratio, 1.0), hill), 0.0)
    p = 1.0 / (1.0 + r)
    q = 1.0 - p
    return t, f0, f1, mid, hill, ratio, r, p, q


def smm_curve(t, psi) -> np.ndarray:
    """Vectorized sigmoid mean; exact at t = 0 (returns the final level)."""
    _, f0, f1, _, _, _, _, _, q = _smm_parts(t, psi)
    return f0 + (f1 - f0) * q


def smm_jacobian(t, psi) -> np.ndarray:
    """d mean / d(final, initial, midpoint, hill), stacked on a trailing axis."""
    t, f0, f1, mid, hill, ratio, r, p, q = _smm_parts(t, psi)
    d = f1 - f0
    dq = p * p
    with np.errstate(invalid="ignore", divide="ignore"):
        logratio = np.where(r > 0, np.log(np.where(ratio > 0, ratio, 1.0)), 0.0)
    dmid = d * dq * (-hill * r / mid)
    dhill = d * dq * r * logratio
    shape = np.broadcast_shapes(np.shape(t), np.shape(f0), np.shape(mid))
    return np.stack([np.broadcast_to(p, shape), np.broadcast_to(q, shape),
                     np.broadcast_to(dmid, shape), np.broadcast_to(dhill, shape)], axis=-1)


def smm_mean(t, p: SmmParams) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if np.any(t > 0):
        raise ValueError("sigmoid mean is defined for t <= 0")
    return smm_curve(t, p.as_array())


# ---------------------------------------------------------------------------
# model definition


@dataclass(frozen=True)
class NlmmSpec:
    family: Literal["smm", "pmm-polynomial"] = "smm"
    covariates: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    random: tuple[str, ...] | None = None
    correlated: tuple[tuple[str, str], ...] | None = None
    transition_length: float = 2.0

    def __post_init__(self):
        if self.family not in ("smm", "pmm-polynomial"):
            raise ValueError(f"unknown nonlinear family {self.family!r}")
        names = self.param_names
        cov = {k: tuple(v) for k, v in dict(self.covariates).items()}
        bad = [k for k in cov if k not in names]
        if bad:
            raise ValueError(f"unknown parameters in covariate map: {bad}")
        object.__setattr__(self, "covariates", cov)
        random = self.random if self.random is not None else (
            ("final", "initial") if self.family == "smm" else PMM_PARAMS)
        random = tuple(random)
        if not random:
            raise ValueError("at least one parameter must carry a random effect")
        if any(r not in names for r in random):
            raise ValueError(f"unknown random parameters {random}")
        if self.family == "smm" and any(r in ("midpoint", "hill") for r in random):
            raise ValueError("midpoint and hill carry no random effects")
        object.__setattr__(self, "random", tuple(n for n in names if n in random))
        corr = self.correlated if self.correlated is not None else (
            (("final", "initial"),) if self.family == "smm" else (("slope1", "slope2"),))
        corr = tuple(tuple(pair) for pair in corr)
        for a, b in corr:
            if a not in self.random or b not in self.random:
                raise ValueError(f"correlation {a}-{b} needs both parameters random")
        object.__setattr__(self, "correlated", corr)
        if self.family == "pmm-polynomial" and self.transition_length < 0:
            raise ValueError("transition length must be non-negative")

    @property
    def param_names(self) -> tuple[str, ...]:
        return SMM_PARAMS if self.family == "smm" else PMM_PARAMS

    @property
    def fixed_names(self) -> tuple[str, ...]:
        out = []
        for k in self.param_names:
            out.append(k)
            out.extend(f"{k}:{c}" for c in self.covariates.get(k, ()))
        return tuple(out)

    @property
    def fixed_only(self) -> tuple[str, ...]:
        return tuple(k for k in self.param_names if k not in self.random)

    @property
    def cov_mask(self) -> np.ndarray:
        d = len(self.random)
        M = np.eye(d, dtype=bool)
        for a, b in self.correlated:
            i, j = self.random.index(a), self.random.index(b)
            M[i, j] = M[j, i] = True
        return M

    def curve(self, t, psi) -> np.ndarray:
        if self.family == "smm":
            return smm_curve(t, psi)
        return pmm_curve(t, psi, self.transition_length)

    def jacobian(self, t, psi) -> np.ndarray:
        if self.family == "smm":
            return smm_jacobian(t, psi)
        psi = np.asarray(psi, dtype=float)
        cols = []
        for k in range(4):
            h = 1e-6 * max(1.0, float(np.max(np.abs(psi[..., k]))))
            e = np.zeros(4)
            e[k] = h
            cols.append((self.curve(t, psi + e) - self.curve(t, psi - e)) / (2.0 * h))
        return np.stack(cols, axis=-1)

    def domain_ok(self, psi: np.ndarray) -> np.ndarray:
        if self.family == "smm":
            return (psi[..., 2] < 0) & (psi[..., 3] > 0)
        return psi[..., 3] + self.transition_length <= 0


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class _Data:
    ids: tuple[str, ...]
    T: np.ndarray
    Y: np.ndarray
    M: np.ndarray
    n_i: np.ndarray
    X: dict[str, np.ndarray]
    slices: dict[str, slice]
    n_tot: int
    follow_up: np.ndarray
    first_y: np.ndarray
    last_y: np.ndarray


def _prepare(ds: LongitudinalDataset, spec: NlmmSpec) -> _Data:
    known = set(ds.covariate_names)
    needed = sorted({c for v in spec.covariates.values() for c in v})
    missing = [c for c in needed if c not in known]
    if missing:
        raise DatasetError(f"covariates not in dataset: {', '.join(missing)}")
    N = ds.n_subjects
    n_max = max(s.n_obs for s in ds.subjects)
    T = np.zeros((N, n_max))
    Y = np.zeros((N, n_max))
    M = np.zeros((N, n_max))
    for i, s in enumerate(ds.subjects):
        k = s.n_obs
        T[i, :k] = s.times
        T[i, k:] = s.times[-1]
        Y[i, :k] = s.outcomes
        M[i, :k] = 1.0
    X, slices = {}, {}
    pos = 0
    for k in spec.param_names:
        covs = spec.covariates.get(k, ())
        cm = ds.covariate_matrix(covs) if covs else np.zeros((N, 0))
        X[k] = np.hstack([np.ones((N, 1)), cm])
        slices[k] = slice(pos, pos + X[k].shape[1])
        pos += X[k].shape[1]
    return _Data(
        ids=tuple(s.id for s in ds.subjects), T=T, Y=Y, M=M,
        n_i=np.array([s.n_obs for s in ds.subjects]), X=X, slices=slices, n_tot=ds.n_obs,
        follow_up=np.array([s.follow_up for s in ds.subjects]),
        first_y=np.array([s.outcomes[0] for s in ds.subjects]),
        last_y=np.array([s.outcomes[-1] for s in ds.subjects]),
    )


def _population_psi(spec: NlmmSpec, data: _Data, beta: np.ndarray) -> np.ndarray:
    return np.column_stack([data.X[k] @ beta[data.slices[k]] for k in spec.param_names])


# ---------------------------------------------------------------------------
# starting values


def _start_values(spec: NlmmSpec, data: _Data):
    P = sum(x.shape[1] for x in data.X.values())
    beta = np.zeros(P)
    T, Y, M = data.T, data.Y, data.M
    if spec.family == "smm":
        start = {"final": data.last_y.mean(), "initial": data.first_y.mean(),
                 "midpoint": -0.5 * float(np.median(data.follow_up)), "hill": 1.0}
        if start["midpoint"] >= -_DOMAIN_EPS:
            start["midpoint"] = -1.0
        var = {"final": 0.5 * data.last_y.var(), "initial": 0.5 * data.first_y.var()}
    else:
        nu = spec.transition_length
        t = T[M > 0]
        y = Y[M > 0]
        best = None
        lo = int(np.floor(t.min())) + 1
        for cp in np.arange(-1.0, lo - 1, -1.0):
            if cp > -0.5 * nu:
                continue
            Xd = np.column_stack([np.ones_like(t), t, np.minimum(t - cp, 0.0)])
            coef, *_ = np.linalg.lstsq(Xd, y, rcond=None)
            rss = float(np.sum((y - Xd @ coef) ** 2))
            if best is None or rss < best[0]:
                best = (rss, cp, coef)
        if best is None:
            cp, coef = -0.5 * nu - 1.0, np.array([y.mean(), 0.0, 0.0])
        else:
            _, cp, coef = best
        onset = min(cp - 0.5 * nu, -nu - _DOMAIN_EPS)
        start = {"level": coef[0], "slope1": coef[1] + coef[2], "slope2": coef[1], "changepoint": onset}
        var = {"level": 0.5 * data.last_y.var(), "slope1": 0.01, "slope2": 0.05, "changepoint": 1.0}
    for k, v in start.items():
        beta[data.slices[k].start] = float(v)
    omega = np.diag([max(var[k], 1e-2) for k in spec.random])
    psi = _population_psi(spec, data, beta)
    resid = (Y - spec.curve(T, psi)) * M
    sigma2 = float(max(np.sum(resid ** 2) / data.n_tot, 1e-6))
    return beta, omega, sigma2


# ---------------------------------------------------------------------------
# SAEM


@dataclass(frozen=True)
class SaemControls:
    K1: int = 300
    K2: int = 150
    step_exponent: float = 0.7
    chains: int = 1
    mh_moves: int = 5
    target_accept: float = 0.35
    anneal: float = 0.95
    seed: int = 0
    domain_patience: int = 50
    gn_steps: int = 2
    compute_loglik: bool = True
    agq_nodes: int = 9

    def __post_init__(self):
        if self.K1 < 1 or self.K2 < 1:
            raise ValueError("K1 and K2 must be >= 1")
        if not 0 < self.target_accept < 1:
            raise ValueError("acceptance target must lie in (0, 1)")
        if self.chains < 1 or self.mh_moves < 1:
            raise ValueError("chains and mh_moves must be >= 1")
        if not 0 < self.step_exponent <= 1:
            raise ValueError("step exponent must lie in (0, 1]")


def _psd_project(S: np.ndarray, mask: np.ndarray) -> np.ndarray:
    S = np.where(mask, 0.5 * (S + S.T), 0.0)
    w, V = np.linalg.eigh(S)
    floor = 1e-10 * max(1.0, float(np.max(np.abs(w))))
    w = np.maximum(w, floor)
    out = (V * w) @ V.T
    return np.where(mask, 0.5 * (out + out.T), 0.0)


def _safe_inverse(S: np.ndarray):
    L = np.linalg.cholesky(S)
    Li = np.linalg.inv(L)
    return Li.T @ Li, L


class _Saem:
    def __init__(self, spec: NlmmSpec, data: _Data, controls: SaemControls, beta, omega, sigma2):
        self.spec, self.data, self.c = spec, data, controls
        self.beta = beta.astype(float).copy()
        self.omega = omega.copy()
        self.sigma2 = float(sigma2)
        self.rand_idx = [spec.param_names.index(k) for k in spec.random]
        self.fixed_idx = [spec.param_names.index(k) for k in spec.fixed_only]
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(controls.seed)))
        self.mask = spec.cov_mask
        self.violations = 0

    # -- helpers --
    def mu(self) -> np.ndarray:
        return _population_psi(self.spec, self.data, self.beta)

    def psi_from(self, phi: np.ndarray, pop: np.ndarray) -> np.ndarray:
        psi = pop.copy()
        psi[..., self.rand_idx] = phi
        return psi

    def cond_ll(self, psi: np.ndarray) -> np.ndarray:
        r = (self.data.Y - self.spec.curve(self.data.T, psi)) * self.data.M
        return -0.5 * np.sum(r * r, axis=-1) / self.sigma2

    def project(self, it: int) -> None:
        """Shift intercepts so that every subject's population parameters are in the domain."""
        spec, data = self.spec, self.data
        moved = False
        if spec.family == "smm":
            for k, sign in (("midpoint", -1.0), ("hill", 1.0)):
                vals = data.X[k] @ self.beta[data.slices[k]]
                if sign < 0 and vals.max() > -_DOMAIN_EPS:
                    self.beta[data.slices[k].start] -= vals.max() + _DOMAIN_EPS
                    moved = True
                if sign > 0 and vals.min() < _DOMAIN_EPS:
                    self.beta[data.slices[k].start] += _DOMAIN_EPS - vals.min()
                    moved = True
        else:
            k = "changepoint"
            vals = data.X[k] @ self.beta[data.slices[k]] + spec.transition_length
            if vals.max() > -_DOMAIN_EPS:
                self.beta[data.slices[k].start] -= vals.max() + _DOMAIN_EPS
                moved = True
        if moved:
            if self.violations == 0:
                log.warning("SAEM iteration %d: parameter left its domain, projected back", it)
            self.violations += 1
            if self.violations > self.c.domain_patience:
                raise SaemDomainError(f"parameters outside their domain for more than {self.c.domain_patience} iterations")
        else:
            self.violations = 0

    # -- simulation step --
    def simulate(self, phi, scale, pop, adapt: bool):
        mu = pop[:, self.rand_idx]
        Oinv, L = _safe_inverse(self.omega)
        N, d = phi.shape

        linear = self.spec.family == "smm" and set(self.spec.random) <= {"final", "initial"}
        if linear:
            # the sigmoid is linear in the levels: precompute its weights once
            _, _, _, _, _, _, _, pw, qw = _smm_parts(self.data.T, pop)

        def target(ph):
            psi = self.psi_from(ph, pop)
            diff = ph - mu
            if linear:
                f = psi[:, 0, None] * pw + psi[:, 1, None] * qw
                r = (self.data.Y - f) * self.data.M
                ll = -0.5 * np.sum(r * r, axis=-1) / self.sigma2
            else:
                ll = self.cond_ll(psi)
            val = ll - 0.5 * np.einsum("ia,ab,ib->i", diff, Oinv, diff)
            return np.where(self.spec.domain_ok(psi), val, -np.inf)

        cur = target(phi)
        acc = np.zeros(N)
        for _ in range(self.c.mh_moves):
            prop = phi + scale[:, None] * (self.rng.standard_normal((N, d)) @ L.T)
            new = target(prop)
            logu = np.log(self.rng.random(N))
            with np.errstate(invalid="ignore"):
                ok = logu < new - cur
            phi = np.where(ok[:, None], prop, phi)
            cur = np.where(ok, new, cur)
            acc += ok
        acc /= self.c.mh_moves
        if adapt:
            scale = np.clip(scale * np.exp(acc - self.c.target_accept), 1e-3, 10.0)
        return phi, scale, acc

    # -- fixed-only parameters: Gauss-Newton on the conditional sum of squares --
    def _fixed_jac(self, psi):
        data = self.data
        J = self.spec.jacobian(data.T, psi) * data.M[..., None]
        cols = [J[..., k][..., None] * data.X[name][:, None, :]
                for k, name in zip(self.fixed_idx, self.spec.fixed_only)]
        return np.concatenate(cols, axis=-1)

    def _set_fixed(self, beta, vec):
        beta = beta.copy()
        pos = 0
        for name in self.spec.fixed_only:
            sl = self.data.slices[name]
            w = sl.stop - sl.start
            beta[sl] = vec[pos : pos + w]
            pos += w
        return beta

    def _get_fixed(self, beta):
        return np.concatenate([beta[self.data.slices[n]] for n in self.spec.fixed_only])

    def gauss_newton(self, phi, samples=None):
        samples = [phi] if samples is None else samples
        beta = self.beta
        vec = self._get_fixed(beta)

        def rss_of(b):
            pop = _population_psi(self.spec, self.data, b)
            tot = 0.0
            for ph in samples:
                psi = self.psi_from(ph, pop)
                if not np.all(self.spec.domain_ok(psi)):
                    return np.inf
                r = (self.data.Y - self.spec.curve(self.data.T, psi)) * self.data.M
                tot += float(np.sum(r * r))
            return tot

        cur = rss_of(beta)
        for _ in range(self.c.gn_steps):
            pop = _population_psi(self.spec, self.data, beta)
            JtJ = 0.0
            Jtr = 0.0
            for ph in samples:
                psi = self.psi_from(ph, pop)
                J = self._fixed_jac(psi).reshape(-1, vec.size)
                r = ((self.data.Y - self.spec.curve(self.data.T, psi)) * self.data.M).reshape(-1)
                JtJ = JtJ + J.T @ J
                Jtr = Jtr + J.T @ r
            damp = 1e-8 * np.diag(JtJ).max() + 1e-12
            try:
                step = np.linalg.solve(JtJ + damp * np.eye(vec.size), Jtr)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-4:
                cand = self._set_fixed(beta, vec + t * step)
                val = rss_of(cand)
                if val <= cur:
                    break
                t *= 0.5
            else:
                break
            beta, vec, cur = cand, vec + t * step, val
        return vec

    # -- M-step for random-carrying parameters --
    def gls_beta(self, S1, Oinv):
        data, names = self.data, self.spec.random
        sl = [data.X[k] for k in names]
        sizes = [x.shape[1] for x in sl]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        P = offs[-1]
        lhs = np.zeros((P, P))
        rhs = np.zeros(P)
        for a, Xa in enumerate(sl):
            for b, Xb in enumerate(sl):
                if Oinv[a, b] != 0:
                    lhs[offs[a] : offs[a + 1], offs[b] : offs[b + 1]] = Oinv[a, b] * (Xa.T @ Xb)
            rhs[offs[a] : offs[a + 1]] = Xa.T @ (S1 @ Oinv[a])
        sol = np.linalg.solve(lhs, rhs)
        beta = self.beta.copy()
        for a, k in enumerate(names):
            beta[data.slices[k]] = sol[offs[a] : offs[a + 1]]
        return beta, lhs

    # -- Louis identity pieces --
    def subject_scores(self, phi, Oinv):
        """Complete-data per-subject scores and summed Hessian w.r.t. all fixed effects."""
        spec, data = self.spec, self.data
        P = self.beta.size
        N = phi.shape[0]
        pop = self.mu()
        mu = pop[:, self.rand_idx]
        z = (phi - mu) @ Oinv
        S = np.zeros((N, P))
        H = np.zeros((P, P))
        for a, k in enumerate(spec.random):
            S[:, data.slices[k]] = data.X[k] * z[:, a : a + 1]
        for a, ka in enumerate(spec.random):
            for b, kb in enumerate(spec.random):
                H[data.slices[ka], data.slices[kb]] -= Oinv[a, b] * (data.X[ka].T @ data.X[kb])
        if self.fixed_idx:
            psi = self.psi_from(phi, pop)
            r = (data.Y - spec.curve(data.T, psi)) * data.M
            Jb = self._fixed_jac(psi)
            idx = np.concatenate([np.arange(P)[data.slices[n]] for n in spec.fixed_only])
            S[:, idx] = np.einsum("inp,in->ip", Jb, r) / self.sigma2
            Hf = -np.einsum("inp,inq->pq", Jb, Jb)
            # curvature term via central differences of the analytic jacobian
            for a, (ka, name_a) in enumerate(zip(self.fixed_idx, spec.fixed_only)):
                h = 1e-5 * max(1.0, float(np.max(np.abs(psi[:, ka]))))
                e = np.zeros(4)
                e[ka] = h
                dJ = (spec.jacobian(data.T, psi + e) - spec.jacobian(data.T, psi - e)) / (2.0 * h)
                for b, (kb, name_b) in enumerate(zip(self.fixed_idx, spec.fixed_only)):
                    w = np.sum(r * dJ[..., kb], axis=1)
                    blk = (data.X[name_a] * w[:, None]).T @ data.X[name_b]
                    sa = slice(sum(data.X[n].shape[1] for n in spec.fixed_only[:a]),
                               sum(data.X[n].shape[1] for n in spec.fixed_only[: a + 1]))
                    sb = slice(sum(data.X[n].shape[1] for n in spec.fixed_only[:b]),
                               sum(data.X[n].shape[1] for n in spec.fixed_only[: b + 1]))
                    Hf[sa, sb] += blk
            H[np.ix_(idx, idx)] += Hf / self.sigma2
        return S, H

    def run(self):
        spec, data, c = self.spec, self.data, self.c
        N = len(data.ids)
        self.project(0)
        pop = self.mu()
        chains = [pop[:, self.rand_idx].copy() for _ in range(c.chains)]
        scales = [np.full(N, 0.5) for _ in range(c.chains)]
        S1 = chains[0].copy()
        S2 = S1.T @ S1
        S3 = float(self.sigma2 * data.n_tot)
        P = self.beta.size
        Sbar = np.zeros((N, P))
        SS = np.zeros((P, P))
        HH = np.zeros((P, P))
        trace = []
        n_iter = c.K1 + c.K2
        for k in range(1, n_iter + 1):
            gamma = 1.0 if k <= c.K1 else float((k - c.K1) ** (-c.step_exponent))
            burn = k <= c.K1
            pop = self.mu()
            accs = []
            for j in range(c.chains):
                chains[j], scales[j], acc = self.simulate(chains[j], scales[j], pop, adapt=burn)
                accs.append(acc.mean())
            if self.fixed_idx:
                target = self.gauss_newton(chains[0], chains)
                cur = self._get_fixed(self.beta)
                self.beta = self._set_fixed(self.beta, cur + gamma * (target - cur))
                self.project(k)
                pop = self.mu()
            rss = 0.0
            s1 = np.zeros_like(S1)
            s2 = np.zeros_like(S2)
            for ph in chains:
                psi = self.psi_from(ph, pop)
                r = (data.Y - spec.curve(data.T, psi)) * data.M
                rss += float(np.sum(r * r))
                s1 += ph
                s2 += ph.T @ ph
            m = c.chains
            S1 += gamma * (s1 / m - S1)
            S2 += gamma * (s2 / m - S2)
            S3 += gamma * (rss / m - S3)
            # M-step
            Oinv, _ = _safe_inverse(self.omega)
            self.beta, _ = self.gls_beta(S1, Oinv)
            self.project(k)
            mu = self.mu()[:, self.rand_idx]
            omega = (S2 - S1.T @ mu - mu.T @ S1 + mu.T @ mu) / N
            sigma2 = S3 / data.n_tot
            if burn:
                old = np.diag(self.omega)
                new = np.diag(omega).copy()
                floor = c.anneal * old
                if np.any(new < floor):
                    sd_new = np.sqrt(np.maximum(new, 1e-300))
                    corr = omega / np.outer(sd_new, sd_new)
                    sd = np.sqrt(np.maximum(new, floor))
                    omega = corr * np.outer(sd, sd)
                sigma2 = max(sigma2, c.anneal * self.sigma2)
            self.omega = _psd_project(omega, self.mask)
            self.sigma2 = float(max(sigma2, 1e-12))
            if not burn:
                Oinv, _ = _safe_inverse(self.omega)
                s_sum = np.zeros((N, P))
                ss = np.zeros((P, P))
                hh = np.zeros((P, P))
                for ph in chains:
                    S, H = self.subject_scores(ph, Oinv)
                    s_sum += S
                    ss += S.T @ S
                    hh += H
                g = 1.0 if k == c.K1 + 1 else gamma
                Sbar += g * (s_sum / m - Sbar)
                SS += g * (ss / m - SS)
                HH += g * (hh / m - HH)
            trace.append((k, *self.beta, *self._omega_free(), self.sigma2, float(np.mean(accs))))
        info = -HH - SS + Sbar.T @ Sbar
        info = 0.5 * (info + info.T)
        self.eta_mean = S1 - self.mu()[:, self.rand_idx]
        return info, trace

    def _omega_free(self):
        iu = np.triu_indices(self.omega.shape[0])
        keep = self.mask[iu]
        return self.omega[iu][keep]


def omega_free_names(spec: NlmmSpec) -> list[str]:
    iu = np.triu_indices(len(spec.random))
    mask = spec.cov_mask
    out = []
    for i, j in zip(*iu):
        if not mask[i, j]:
            continue
        a, b = spec.random[i], spec.random[j]
        out.append(f"var({a})" if i == j else f"cov({a},{b})")
    return out


@dataclass(frozen=True)
class NlmmEstimate:
    """Population parameters of a nonlinear mixed model."""

    spec: NlmmSpec
    beta: np.ndarray
    omega: np.ndarray
    sigma2: float

    def fixed(self) -> dict[str, float]:
        return dict(zip(self.spec.fixed_names, map(float, self.beta)))

    @classmethod
    def from_fixed(cls, spec: NlmmSpec, fixed: Mapping[str, float], omega, sigma2: float) -> "NlmmEstimate":
        beta = np.array([float(fixed.get(n, 0.0)) for n in spec.fixed_names])
        return cls(spec, beta, np.asarray(omega, dtype=float), float(sigma2))


def _initial(spec, data, start):
    beta, omega, sigma2 = _start_values(spec, data)
    if start is None:
        return beta, omega, sigma2
    if isinstance(start, FitResult):
        start = start.model.estimate
    if isinstance(start, NlmmEstimate):
        return start.beta.copy(), start.omega.copy(), start.sigma2
    for name, val in dict(start).items():
        if name not in spec.fixed_names:
            raise KeyError(f"unknown parameter in start values: {name}")
        beta[spec.fixed_names.index(name)] = float(val)
    return beta, omega, sigma2


def fit_saem(ds: LongitudinalDataset, spec: NlmmSpec, controls: SaemControls = SaemControls(),
             start=None) -> FitResult:
    """SAEM estimation; standard errors from the stochastic-approximation Louis identity."""
    data = _prepare(ds, spec)
    beta, omega, sigma2 = _initial(spec, data, start)
    engine = _Saem(spec, data, controls, beta, omega, sigma2)
    info, trace = engine.run()
    est = NlmmEstimate(spec, engine.beta.copy(), engine.omega.copy(), engine.sigma2)
    converged = bool(np.all(np.isfinite(engine.beta)) and np.isfinite(engine.sigma2))
    try:
        np.linalg.cholesky(info)
        fixed_cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        converged = False
        fixed_cov = np.linalg.pinv(info)
    fixed_cov = 0.5 * (fixed_cov + fixed_cov.T)
    se = np.sqrt(np.maximum(np.diag(fixed_cov), 0.0))
    loglik = float("nan")
    if controls.compute_loglik:
        loglik = _agq_loglik(spec, data, est.beta, est.omega, est.sigma2, controls.agq_nodes)
    return _make_result(est, data, ds, fixed_cov, se, info, loglik, converged, len(trace), trace,
                        "SAEM", {"acceptance": float(trace[-1][-1])})


def _make_result(est, data, ds, fixed_cov, se, info, loglik, converged, iterations, trace, method, extra):
    spec = est.spec
    names = spec.fixed_names
    k = len(names) + int(spec.cov_mask[np.triu_indices(len(spec.random))].sum()) + 1
    fixed = est.fixed()
    extra = dict(extra)
    extra["trace_columns"] = ["iteration", *names, *omega_free_names(spec), "sigma2", "acceptance"] if method == "SAEM" else []
    if spec.family == "smm":
        extra["midpoint_years_before_event"] = -fixed["midpoint"]
    if spec.family == "pmm-polynomial":
        extra["transition_length"] = spec.transition_length
    return FitResult(
        family="smm" if spec.family == "smm" else "pmm",
        method=method,
        fixed=fixed,
        fixed_se=dict(zip(names, map(float, se))),
        fixed_cov=fixed_cov,
        cov=CovarianceStruct(est.omega, est.sigma2, spec.random),
        loglik=loglik,
        n_params=k,
        n_subjects=ds.n_subjects,
        n_obs=ds.n_obs,
        bic=bic_value(loglik, k, ds.n_subjects) if np.isfinite(loglik) else float("nan"),
        converged=converged,
        iterations=iterations,
        info_matrix=info,
        trace=tuple(trace),
        extra=extra,
        model=_NlmmModel(est),
    )


def trace_csv(fit: FitResult) -> str:
    """Convergence trace as CSV: iteration, parameters, acceptance rate."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = fit.extra.get("trace_columns") or ["iteration"] + [f"v{j}" for j in range(len(fit.trace[0]) - 1)]
    w.writerow(cols)
    for row in fit.trace:
        w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# adaptive Gauss-Hermite quadrature


def _factor_omega(omega: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (omega + omega.T))
    keep = w > 1e-12 * max(1.0, float(np.max(np.abs(w)))) if w.size else np.zeros(0, dtype=bool)
    return V[:, keep] * np.sqrt(w[keep])


class _Posterior:
    """Per-subject log posterior kernel in standardized u-space: phi = mu + C u."""

    def __init__(self, spec, T, Y, Mk, pop, C, sigma2, rand_idx):
        self.spec, self.T, self.Y, self.Mk = spec, T, Y, Mk
        self.pop, self.C, self.sigma2, self.rand_idx = pop, C, sigma2, rand_idx

    def psi(self, u):
        psi = np.array(self.pop, dtype=float, copy=True)
        if u.ndim == 3:
            psi = np.repeat(psi[:, None, :], u.shape[1], axis=1)
        psi[..., self.rand_idx] += u @ self.C.T
        return psi

    def cond(self, u):
        psi = self.psi(u)
        T = self.T if u.ndim == 2 else self.T[:, None, :]
        Y = self.Y if u.ndim == 2 else self.Y[:, None, :]
        Mk = self.Mk if u.ndim == 2 else self.Mk[:, None, :]
        r = (Y - self.spec.curve(T, psi)) * Mk
        return -0.5 * np.sum(r * r, axis=-1) / self.sigma2

    def objective(self, u):
        return self.cond(u) - 0.5 * np.sum(u * u, axis=-1)

    def grad_gn(self, u):
        psi = self.psi(u)
        r = (self.Y - self.spec.curve(self.T, psi)) * self.Mk
        J = (self.spec.jacobian(self.T, psi)[..., self.rand_idx] @ self.C) * self.Mk[..., None]
        g = np.einsum("ind,in->id", J, r) / self.sigma2 - u
        H = np.einsum("ind,ine->ide", J, J) / self.sigma2 + np.eye(u.shape[1])
        return g, H


def _modes(post: _Posterior, d: int, ids, tol: float = 1e-8, max_iter: int = 200):
    N = post.T.shape[0]
    u = np.zeros((N, d))
    f = post.objective(u)
    done = np.zeros(N, dtype=bool)
    for _ in range(max_iter):
        g, H = post.grad_gn(u)
        gn = np.max(np.abs(g), axis=1)
        done = gn < tol
        if np.all(done):
            break
        step = np.linalg.solve(H, g[..., None])[..., 0]
        step[done] = 0.0
        t = np.ones(N)
        active = ~done
        for _ in range(40):
            cand = u + t[:, None] * step
            fc = post.objective(cand)
            bad = active & ~(fc >= f - 1e-12 * np.abs(f))
            if not np.any(bad):
                break
            t = np.where(bad, 0.5 * t, t)
        u = np.where(active[:, None], cand, u)
        f = np.where(active, fc, f)
    g, H = post.grad_gn(u)
    bad = np.max(np.abs(g), axis=1) >= max(tol, 1e-6)
    if np.any(bad):
        raise AgqError(f"mode search failed for subject {ids[int(np.flatnonzero(bad)[0])]}")
    return u


def _hessian(post: _Posterior, u: np.ndarray) -> np.ndarray:
    N, d = u.shape
    H = np.empty((N, d, d))
    h = 1e-5
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        gp, _ = post.grad_gn(u + e)
        gm, _ = post.grad_gn(u - e)
        H[:, :, k] = -(gp - gm) / (2 * h)
    H = 0.5 * (H + H.transpose(0, 2, 1))
    _, Hgn = post.grad_gn(u)
    ok = np.all(np.linalg.eigvalsh(H) > 1e-8, axis=1)
    return np.where(ok[:, None, None], H, Hgn)


def _agq_loglik(spec: NlmmSpec, data: _Data, beta, omega, sigma2, nodes: int) -> float:
    if nodes < 1:
        raise ValueError("nodes must be >= 1")
    if len(spec.random) > 4:
        raise ValueError("adaptive quadrature supports at most 4 random effects")
    pop = _population_psi(spec, data, np.asarray(beta, dtype=float))
    rand_idx = [spec.param_names.index(k) for k in spec.random]
    C = _factor_omega(np.asarray(omega, dtype=float)) if rand_idx else np.zeros((0, 0))
    d = C.shape[1]
    const = -0.5 * data.n_i * np.log(2 * np.pi * sigma2)
    post = _Posterior(spec, data.T, data.Y, data.M, pop, C, sigma2, rand_idx)
    if d == 0:
        return float(np.sum(const + post.cond(np.zeros((len(data.ids), 0)))))
    u_hat = _modes(post, d, data.ids)
    H = _hessian(post, u_hat)
    L = np.linalg.cholesky(H)
    R = np.linalg.inv(L).transpose(0, 2, 1)
    logdetR = -np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    z, w = np.polynomial.hermite.hermgauss(nodes)
    grid = np.array(list(itertools.product(z, repeat=d)))
    logw = np.sum(np.log(np.array(list(itertools.product(w, repeat=d)))), axis=1) + np.sum(grid ** 2, axis=1)
    K = grid.shape[0]
    n_max = data.T.shape[1]
    chunk = max(1, int(4e6 // (K * n_max)))
    total = 0.0
    N = len(data.ids)
    for lo in range(0, N, chunk):
        sl = slice(lo, min(N, lo + chunk))
        sub = _Posterior(spec, data.T[sl], data.Y[sl], data.M[sl], pop[sl], C, sigma2, rand_idx)
        U = u_hat[sl, None, :] + np.sqrt(2.0) * np.einsum("kd,ied->ike", grid, R[sl])
        val = sub.cond(U) - 0.5 * np.sum(U * U, axis=-1) - 0.5 * d * LOG2PI
        lse = logsumexp(val + logw, axis=1)
        total += float(np.sum(lse + 0.5 * d * np.log(2.0) + logdetR[sl] + const[sl]))
    return total


def loglik_agq(fit_or_params, ds: LongitudinalDataset, nodes: int = 9) -> float:
    """Marginal log-likelihood by adaptive Gauss-Hermite quadrature."""
    est = fit_or_params.model.estimate if isinstance(fit_or_params, FitResult) else fit_or_params
    if nodes < 5:
        raise ValueError("use at least 5 quadrature nodes")
    data = _prepare(ds, est.spec)
    return _agq_loglik(est.spec, data, est.beta, est.omega, est.sigma2, nodes)


def _pack(spec: NlmmSpec, beta, omega, sigma2) -> np.ndarray:
    groups = _groups(spec)
    vec = list(beta)
    for g in groups:
        sub = omega[np.ix_(g, g)]
        L = np.linalg.cholesky(sub + 1e-12 * np.eye(len(g)))
        L[np.diag_indices(len(g))] = np.log(np.diag(L))
        vec.extend(L[np.tril_indices(len(g))])
    vec.append(np.log(sigma2))
    return np.array(vec)


def _unpack(spec: NlmmSpec, x, P):
    beta = x[:P]
    d = len(spec.random)
    omega = np.zeros((d, d))
    pos = P
    for g in _groups(spec):
        k = len(g)
        L = np.zeros((k, k))
        L[np.tril_indices(k)] = x[pos : pos + k * (k + 1) // 2]
        L[np.diag_indices(k)] = np.exp(np.diag(L))
        omega[np.ix_(g, g)] = L @ L.T
        pos += k * (k + 1) // 2
    return beta, omega, float(np.exp(x[pos]))


def _groups(spec: NlmmSpec) -> list[list[int]]:
    d = len(spec.random)
    parent = list(range(d))

    def find(a):
        while parent[a] != a:
            a = parent[a]
        return a

    for a, b in spec.correlated:
        i, j = find(spec.random.index(a)), find(spec.random.index(b))
        parent[max(i, j)] = min(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(d):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def fit_agq(ds: LongitudinalDataset, spec: NlmmSpec, start=None, nodes: int = 9, max_iter: int = 500) -> FitResult:
    """Direct maximization of the quadrature log-likelihood (validation path)."""
    data = _prepare(ds, spec)
    beta, omega, sigma2 = _initial(spec, data, start)
    P = beta.size
    x0 = _pack(spec, beta, omega, sigma2)

    def nll(x):
        b, om, s2 = _unpack(spec, x, P)
        psi = _population_psi(spec, data, b)
        if not np.all(spec.domain_ok(psi)):
            return 1e300
        try:
            return -_agq_loglik(spec, data, b, om, s2, nodes)
        except (AgqError, np.linalg.LinAlgError, FloatingPointError):
            return 1e300

    res = optimize.minimize(nll, x0, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-5})
    b, om, s2 = _unpack(spec, res.x, P)
    from ._optim import fd_jacobian

    def grad(x):
        return optimize.approx_fprime(x, nll, 1e-6)

    H = fd_jacobian(grad, res.x, h=1e-4)
    info = H[:P, :P]
    try:
        cov = np.linalg.inv(H)[:P, :P]
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)[:P, :P]
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    est = NlmmEstimate(spec, b, om, s2)
    return _make_result(est, data, ds, cov, se, info, -float(res.fun), bool(res.success), int(res.nit), (),
                        "AGQ", {"nodes": nodes})


# ---------------------------------------------------------------------------
# prediction


@dataclass
class _NlmmModel:
    estimate: NlmmEstimate

    def _pop(self, profile) -> np.ndarray:
        spec = self.estimate.spec
        profile = {} if profile is None else dict(profile)
        out = []
        for k in spec.param_names:
            sl_names = [k] + [f"{k}:{c}" for c in spec.covariates.get(k, ())]
            covs = spec.covariates.get(k, ())
            missing = [c for c in covs if c not in profile]
            if missing:
                raise KeyError(f"profile lacks covariates: {', '.join(missing)}")
            x = np.concatenate([[1.0], [float(profile[c]) for c in covs]])
            coef = np.array([self.estimate.beta[spec.fixed_names.index(n)] for n in sl_names])
            out.append(float(x @ coef))
        return np.array(out)

    def marginal(self, profile, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        spec = self.estimate.spec
        psi = self._pop(profile)
        return Trajectory(grid, spec.curve(grid, psi), extrapolated=grid > 0)

    def random_effects(self, subject: Subject) -> np.ndarray:
        est = self.estimate
        spec = est.spec
        pop = self._pop(subject.covariates)[None, :]
        rand_idx = [spec.param_names.index(k) for k in spec.random]
        C = _factor_omega(est.omega)
        if C.shape[1] == 0:
            return np.zeros(len(rand_idx))
        T = np.asarray(subject.times, dtype=float)[None, :]
        Y = np.asarray(subject.outcomes, dtype=float)[None, :]
        post = _Posterior(spec, T, Y, np.ones_like(T), pop, C, est.sigma2, rand_idx)
        u = _modes(post, C.shape[1], [subject.id])
        return (u @ C.T)[0]

    def subject_curve(self, subject: Subject, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        spec = self.estimate.spec
        psi = self._pop(subject.covariates)
        rand_idx = [spec.param_names.index(k) for k in spec.random]
        psi[rand_idx] += self.random_effects(subject)
        return Trajectory(grid, spec.curve(grid, psi), extrapolated=grid > 0)


def predict_marginal(fit: FitResult, profile, grid) -> Trajectory:
    return fit.model.marginal(profile, grid)


def predict_subject(fit: FitResult, subject: Subject, grid) -> Trajectory:
    return fit.model.subject_curve(subject, grid)


__all__ = [
    "SmmParams", "PmmParams", "TransitionCubic", "cubic_bridge", "solve_transition", "pmm_curve",
    "pmm_mean", "smm_curve", "smm_jacobian", "smm_mean", "NlmmSpec", "SaemControls", "NlmmEstimate",
    "fit_saem", "fit_agq", "loglik_agq", "trace_csv", "predict_marginal", "predict_subject",
    "SaemDomainError", "AgqError", "omega_free_names",
]

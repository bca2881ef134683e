"""Linear mixed models: quadratic and natural-spline time functions, and the
penalized functional mixed model (FMM) in its variance-component form.

Fixed-design column order is intercept, covariate main effects, time
columns, then covariate-by-time interactions grouped by covariate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from ._mixed import CovBlock, MixedEngine, NotPositiveDefinite
from ._optim import OptResult, fd_jacobian, maximize, remaining_ascent
from .dataset import DatasetError, LongitudinalDataset, Subject
from .results import CovarianceStruct, FitResult, Trajectory, bic_value
from .splines import KnotSequence, SplineError, TransformedBasis, equal_knots, fmm_basis, natural_cubic_basis

log = logging.getLogger(__name__)

TimeFunction = Literal["linear", "quadratic", "natural-spline"]


@dataclass(frozen=True)
class LmmSpec:
    time_function: TimeFunction = "quadratic"
    knots: KnotSequence | None = None
    covariates: tuple[str, ...] = ()
    random: tuple[str, ...] | None = None
    method: Literal["ML", "REML"] = "ML"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if self.time_function not in ("linear", "quadratic", "natural-spline"):
            raise ValueError(f"unknown time function {self.time_function!r}")
        if self.time_function == "natural-spline" and self.knots is None:
            raise ValueError("natural-spline time function needs knots")
        if self.method not in ("ML", "REML"):
            raise ValueError(f"unknown method {self.method!r}")
        if len(set(self.covariates)) != len(self.covariates):
            raise ValueError("duplicate covariate names")
        if self.random is not None:
            object.__setattr__(self, "random", tuple(self.random))
            allowed = ("intercept",) + self.time_names
            bad = [r for r in self.random if r not in allowed]
            if bad:
                raise ValueError(f"random effects {bad} are not intercept/time columns")

    @property
    def time_names(self) -> tuple[str, ...]:
        if self.time_function == "linear":
            return ("t",)
        if self.time_function == "quadratic":
            return ("t", "t^2")
        return tuple(f"ns{k + 1}" for k in range(self.knots.n_interior + 1))

    @property
    def fixed_names(self) -> tuple[str, ...]:
        inter = tuple(f"{c}:{t}" for c in self.covariates for t in self.time_names)
        return ("intercept",) + self.covariates + self.time_names + inter

    @property
    def random_names(self) -> tuple[str, ...]:
        return ("intercept",) + self.time_names if self.random is None else self.random


def _check_covariates(ds: LongitudinalDataset, names: Sequence[str]) -> np.ndarray:
    known = set(ds.covariate_names)
    missing = [n for n in names if n not in known]
    if missing:
        raise DatasetError(f"covariates not in dataset: {', '.join(missing)}")
    return ds.covariate_matrix(names)


@dataclass(frozen=True)
class LmmDesign:
    """Row builder for a fitted LMM; evaluates design rows at arbitrary times."""

    spec: LmmSpec

    def time_columns(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        tf = self.spec.time_function
        if tf == "linear":
            return t[:, None]
        if tf == "quadratic":
            return np.column_stack([t, t * t])
        return natural_cubic_basis(t, self.spec.knots).values

    def fixed_rows(self, t, x: np.ndarray) -> np.ndarray:
        T = self.time_columns(t)
        n = T.shape[0]
        x = np.asarray(x, dtype=float).reshape(-1)
        parts = [np.ones((n, 1)), np.tile(x, (n, 1)), T]
        parts.extend(T * xc for xc in x)
        return np.hstack(parts)

    def random_rows(self, t) -> np.ndarray:
        T = self.time_columns(t)
        full = np.hstack([np.ones((T.shape[0], 1)), T])
        cols = ("intercept",) + self.spec.time_names
        return full[:, [cols.index(r) for r in self.spec.random_names]]

    def extrapolated(self, t, domain: tuple[float, float]) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return (t < domain[0]) | (t > domain[1])


def assemble_design(ds: LongitudinalDataset, spec: LmmSpec):
    """Return per-subject lists (X_i, Z_i, y_i) in dataset order."""
    xs = _check_covariates(ds, spec.covariates)
    design = LmmDesign(spec)
    X, Z, y = [], [], []
    for s, x in zip(ds.subjects, xs):
        X.append(design.fixed_rows(s.times, x))
        Z.append(design.random_rows(s.times))
        y.append(np.asarray(s.outcomes, dtype=float))
    return X, Z, y


def stack_design(X, Z, y):
    """Concatenate per-subject design blocks into (X, Z, y, groups)."""
    groups = np.concatenate([np.full(len(v), i) for i, v in enumerate(y)])
    return np.vstack(X), np.vstack(Z), np.concatenate(y), groups


def _split(X, Z, y, groups):
    groups = np.asarray(groups)
    order = np.unique(groups)
    idx = [np.flatnonzero(groups == g) for g in order]
    return [X[i] for i in idx], [Z[i] for i in idx], [y[i] for i in idx]


def marginal_loglik(theta, X, Z, y, groups, method: Literal["ML", "REML"] = "ML", gradient: bool = False):
    """Profiled marginal log-likelihood of stacked data.

    ``theta`` is the log-Cholesky vector of the unstructured random-effects
    covariance followed by log residual variance. Raises
    ``NotPositiveDefinite`` for a theta giving a singular marginal covariance.
    With ``gradient=True`` returns ``(loglik, d loglik / d theta)``.
    """
    Xs, Zs, ys = _split(np.asarray(X, float), np.asarray(Z, float), np.asarray(y, float), groups)
    q = Zs[0].shape[1]
    blocks = [CovBlock("unstructured", q)] if q else []
    eng = MixedEngine(ys, Xs, Zs, blocks, method=method)
    if gradient:
        ev = eng.evaluate(np.asarray(theta, dtype=float), grad=True)
        return ev["loglik"], ev["grad_theta"]
    return eng.loglik(np.asarray(theta, dtype=float))


# ---------------------------------------------------------------------------
# fitting


def _ols_start(X, y):
    Xa = np.vstack(X)
    ya = np.concatenate(y)
    beta, *_ = np.linalg.lstsq(Xa, ya, rcond=None)
    resid = ya - Xa @ beta
    return beta, float(max(resid.var(), 1e-8)), Xa


def _start_cov(Z, r2: float) -> np.ndarray:
    Za = np.vstack(Z)
    q = Za.shape[1]
    d = np.empty(q)
    for j in range(q):
        v = Za[:, j].var()
        d[j] = 0.5 * r2 if v < 1e-12 else 0.1 * r2 / v
    return np.diag(d)


def _fit_engine(eng: MixedEngine, theta0: np.ndarray, seed: int, max_iter: int):
    def fg(th):
        ev = eng.evaluate(th)
        return ev["loglik"], ev["grad_theta"]

    rng = np.random.default_rng(seed)
    opt = maximize(fg, theta0, gtol=1e-6, max_iter=max_iter, rng=rng)
    if opt.converged or not _singular(eng, opt.x):
        return opt
    # a singular covariance leaves flat, unidentified log-Cholesky directions where the
    # gradient cannot reach gtol; accept the optimum when no ascent is left
    x, v, g, gain = remaining_ascent(fg, opt.x)
    if gain < 1e-6 and np.max(np.abs(g)) < 1e-3:
        log.info("boundary fit: singular covariance, remaining ascent %.1e", gain)
        return OptResult(x, v, g, True, opt.iterations, opt.trace, boundary=True)
    return opt


def _singular(eng: MixedEngine, theta: np.ndarray, tol: float = 1e-8) -> bool:
    try:
        B, tau2, s2, _, _ = eng.decode(theta)
    except np.linalg.LinAlgError:
        return False
    if B.size and np.linalg.eigvalsh(B).min() <= tol * max(np.abs(B).max(), s2):
        return True
    return bool(tau2.size and tau2.min() <= tol * s2)


def _information(eng: MixedEngine, theta: np.ndarray, beta: np.ndarray):
    """Observed information over (beta, theta) and the fixed-effect covariance."""
    p = beta.size
    if eng.method == "REML":
        A = eng.evaluate(theta, grad=False)["A"]
        H = fd_jacobian(lambda th: eng.evaluate(th)["grad_theta"], theta)
        info = np.zeros((p + theta.size,) * 2)
        info[:p, :p] = A
        info[p:, p:] = -H
        return 0.5 * (info + info.T), np.linalg.inv(A)

    def full_grad(x):
        ev = eng.evaluate(x[p:], x[:p])
        return np.concatenate([ev["grad_beta"], ev["grad_theta"]])

    info = -fd_jacobian(full_grad, np.concatenate([beta, theta]))
    Ibb, Ibt, Itt = info[:p, :p], info[:p, p:], info[p:, p:]
    schur = Ibb - Ibt @ np.linalg.pinv(Itt) @ Ibt.T
    return info, np.linalg.inv(0.5 * (schur + schur.T))


def fit_lmm(ds: LongitudinalDataset, spec: LmmSpec, seed: int = 0, max_iter: int = 1000) -> FitResult:
    """Maximum-likelihood (or REML) fit with GLS-profiled fixed effects."""
    X, Z, y = assemble_design(ds, spec)
    p, q = X[0].shape[1], Z[0].shape[1]
    n_theta = q * (q + 1) // 2 + 1
    if ds.n_obs < p + n_theta:
        raise ValueError(f"{ds.n_obs} observations cannot identify {p + n_theta} parameters")
    beta0, r2, Xa = _ols_start(X, y)
    if np.linalg.matrix_rank(Xa) < p:
        raise np.linalg.LinAlgError("fixed-effect design is rank deficient")
    blocks = [CovBlock("unstructured", q)] if q else []
    eng = MixedEngine(y, X, Z, blocks, method=spec.method)
    theta0 = eng.encode(_start_cov(Z, r2), [], 0.5 * r2 if q else r2)
    opt = _fit_engine(eng, theta0, seed, max_iter)
    if not opt.converged:
        log.warning("LMM fit did not converge (max |grad| %.2e)", np.max(np.abs(opt.grad)))
    ev = eng.evaluate(opt.x)
    beta = ev["beta"]
    info, fixed_cov = _information(eng, opt.x, beta)
    names = spec.fixed_names
    se = np.sqrt(np.maximum(np.diag(fixed_cov), 0.0))
    k = p + eng.n_theta
    loglik = ev["loglik"]
    cov = CovarianceStruct(ev["B"], ev["sigma2"], spec.random_names)
    model = _LmmModel(LmmDesign(spec), beta, ev["B"], ev["sigma2"], (float(ds.all_times.min()), float(ds.all_times.max())))
    return FitResult(
        family="lmm-" + ("splines" if spec.time_function == "natural-spline" else spec.time_function),
        method=spec.method,
        fixed=dict(zip(names, map(float, beta))),
        fixed_se=dict(zip(names, map(float, se))),
        fixed_cov=fixed_cov,
        cov=cov,
        loglik=loglik,
        n_params=k,
        n_subjects=ds.n_subjects,
        n_obs=ds.n_obs,
        bic=bic_value(loglik, k, ds.n_subjects),
        converged=opt.converged,
        iterations=opt.iterations,
        info_matrix=info,
        trace=tuple(opt.trace),
        extra={"theta": opt.x, "grad_inf_norm": float(np.max(np.abs(opt.grad))), "boundary": opt.boundary,
               "knots": None if spec.knots is None else spec.knots.to_dict()},
        model=model,
    )


# ---------------------------------------------------------------------------
# functional mixed model


@dataclass(frozen=True)
class FmmDesign:
    basis: TransformedBasis
    covariates: tuple[str, ...]
    fixed_nonlinear: bool = True
    subject_nonlinear: bool = True

    @property
    def functions(self) -> tuple[str, ...]:
        return ("intercept",) + self.covariates

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return ("intercept",) + self.covariates + ("t",) + tuple(f"{c}:t" for c in self.covariates)

    @property
    def random_names(self) -> tuple[str, ...]:
        nl = tuple(f"s{k + 1}" for k in range(self.basis.n_nonlinear)) if self.subject_nonlinear else ()
        return ("intercept", "t") + nl

    def _f(self, x):
        return np.concatenate([[1.0], np.asarray(x, dtype=float).reshape(-1)])

    def fixed_rows(self, t, x) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        f = self._f(x)
        return np.hstack([np.tile(f, (t.size, 1)), t[:, None] * f])

    def pop_rows(self, t, x) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.fixed_nonlinear:
            return np.zeros((t.size, 0))
        B2 = self.basis.nonlinear(t)
        return np.hstack([B2 * fj for fj in self._f(x)])

    def random_rows(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        cols = [np.ones_like(t)[:, None], t[:, None]]
        if self.subject_nonlinear:
            cols.append(self.basis.nonlinear(t))
        return np.hstack(cols)


def default_fmm_knots(ds: LongitudinalDataset) -> KnotSequence:
    """Equally spaced interior knots, count floor(mean n_i), on the observed time range."""
    times = ds.all_times
    K = max(1, int(np.floor(ds.mean_n_obs)))
    return equal_knots(float(times.min()), float(times.max()), K)


def fit_fmm(
    ds: LongitudinalDataset,
    covariates: Sequence[str] = (),
    knots: KnotSequence | None = None,
    *,
    degree: int = 3,
    subject_nonlinear: bool = True,
    fixed_nonlinear: bool = True,
    method: Literal["ML", "REML"] = "REML",
    seed: int = 0,
    max_iter: int = 1000,
) -> FitResult:
    """Penalized-spline functional mixed model; penalties estimated as variance components."""
    covariates = tuple(covariates)
    xs = _check_covariates(ds, covariates)
    knots = default_fmm_knots(ds) if knots is None else knots
    lo, hi = knots.boundary
    times = ds.all_times
    if times.min() < lo - 1e-9 or times.max() > hi + 1e-9:
        raise SplineError(f"observed times exceed the basis domain [{lo}, {hi}]")
    tb = fmm_basis(np.array([lo, hi]), knots, degree)
    design = FmmDesign(tb, covariates, fixed_nonlinear, subject_nonlinear)
    X, Z, U, y = [], [], [], []
    for s, x in zip(ds.subjects, xs):
        X.append(design.fixed_rows(s.times, x))
        Z.append(design.random_rows(s.times))
        U.append(design.pop_rows(s.times, x))
        y.append(np.asarray(s.outcomes, dtype=float))
    r = tb.n_nonlinear
    blocks = [CovBlock("unstructured", 2)] + ([CovBlock("identity", r)] if subject_nonlinear else [])
    pop = [r] * len(design.functions) if fixed_nonlinear else []
    eng = MixedEngine(y, X, Z, blocks, U if pop else None, pop, method)
    p = X[0].shape[1]
    if ds.n_obs < p + eng.n_theta:
        raise ValueError(f"{ds.n_obs} observations cannot identify {p + eng.n_theta} parameters")
    beta0, r2, Xa = _ols_start(X, y)
    if np.linalg.matrix_rank(Xa) < p:
        raise np.linalg.LinAlgError("fixed-effect design is rank deficient")
    B0 = _start_cov([z[:, :2] for z in Z], r2)
    if subject_nonlinear:
        B0 = np.block([[B0, np.zeros((2, r))], [np.zeros((r, 2)), 0.01 * r2 * np.eye(r)]])
    theta0 = eng.encode(B0, [1.0] * len(pop), 0.5 * r2)
    opt = _fit_engine(eng, theta0, seed, max_iter)
    if not opt.converged:
        log.warning("FMM fit did not converge (max |grad| %.2e)", np.max(np.abs(opt.grad)))
    eta, b_hat, ev = eng.blups(opt.x)
    beta = ev["beta"]
    info, fixed_cov = _information(eng, opt.x, beta)
    joint_cov = eng.fixed_pop_covariance(opt.x)
    se = np.sqrt(np.maximum(np.diag(fixed_cov), 0.0))
    names = design.fixed_names
    tau2 = [float(ev["tau2"][j * r]) for j in range(len(pop))]
    k = p + eng.n_theta
    loglik = ev["loglik"]
    model = _FmmModel(design, beta, b_hat, ev["B"], ev["sigma2"], joint_cov)
    return FitResult(
        family="fmm",
        method=method,
        fixed=dict(zip(names, map(float, beta))),
        fixed_se=dict(zip(names, map(float, se))),
        fixed_cov=fixed_cov,
        cov=CovarianceStruct(ev["B"], ev["sigma2"], design.random_names),
        loglik=loglik,
        n_params=k,
        n_subjects=ds.n_subjects,
        n_obs=ds.n_obs,
        bic=bic_value(loglik, k, ds.n_subjects),
        converged=opt.converged,
        iterations=opt.iterations,
        info_matrix=info,
        trace=tuple(opt.trace),
        extra={"theta": opt.x, "grad_inf_norm": float(np.max(np.abs(opt.grad))), "boundary": opt.boundary,
               "penalty_variances": dict(zip(design.functions, tau2)) if pop else {},
               "nonlinear_coefficients": b_hat, "knots": knots.to_dict()},
        model=model,
    )


# ---------------------------------------------------------------------------
# prediction


def _profile_vector(names: Sequence[str], profile: Mapping[str, float] | None) -> np.ndarray:
    profile = {} if profile is None else dict(profile)
    missing = [n for n in names if n not in profile]
    if missing:
        raise KeyError(f"profile lacks covariates: {', '.join(missing)}")
    return np.array([float(profile[n]) for n in names])


@dataclass
class _LmmModel:
    design: LmmDesign
    beta: np.ndarray
    B: np.ndarray
    sigma2: float
    domain: tuple[float, float]

    def marginal(self, profile, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        x = _profile_vector(self.design.spec.covariates, profile)
        vals = self.design.fixed_rows(grid, x) @ self.beta
        return Trajectory(grid, vals, extrapolated=self.design.extrapolated(grid, self.domain))

    def random_effects(self, subject: Subject) -> np.ndarray:
        x = _profile_vector(self.design.spec.covariates, subject.covariates)
        X = self.design.fixed_rows(subject.times, x)
        Zs = self.design.random_rows(subject.times)
        return _blup(X @ self.beta, Zs, self.B, self.sigma2, subject.outcomes)

    def subject_curve(self, subject: Subject, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        eta = self.random_effects(subject)
        base = self.marginal(subject.covariates, grid)
        vals = base.values + self.design.random_rows(grid) @ eta
        return Trajectory(grid, vals, extrapolated=base.extrapolated)


def _blup(mean: np.ndarray, Z: np.ndarray, B: np.ndarray, sigma2: float, y) -> np.ndarray:
    V = Z @ B @ Z.T + sigma2 * np.eye(len(mean))
    return B @ Z.T @ np.linalg.solve(V, np.asarray(y, dtype=float) - mean)


@dataclass
class _FmmModel:
    design: FmmDesign
    beta: np.ndarray
    b_hat: np.ndarray
    B: np.ndarray
    sigma2: float
    joint_cov: np.ndarray

    def _mean(self, grid, x):
        val = self.design.fixed_rows(grid, x) @ self.beta
        if self.design.fixed_nonlinear:
            val = val + self.design.pop_rows(grid, x) @ self.b_hat
        return val

    def marginal(self, profile, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        x = _profile_vector(self.design.covariates, profile)
        return Trajectory(grid, self._mean(grid, x), extrapolated=np.zeros(grid.size, dtype=bool))

    def random_effects(self, subject: Subject) -> np.ndarray:
        x = _profile_vector(self.design.covariates, subject.covariates)
        Zs = self.design.random_rows(subject.times)
        return _blup(self._mean(subject.times, x), Zs, self.B, self.sigma2, subject.outcomes)

    def subject_curve(self, subject: Subject, grid) -> Trajectory:
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        eta = self.random_effects(subject)
        base = self.marginal(subject.covariates, grid)
        return Trajectory(grid, base.values + self.design.random_rows(grid) @ eta, extrapolated=base.extrapolated)

    def coefficient_curve(self, covariate: str, grid) -> Trajectory:
        funcs = self.design.functions
        if covariate not in funcs:
            raise KeyError(f"covariate {covariate!r} not in the model")
        j = funcs.index(covariate)
        nf = len(funcs)
        grid = np.atleast_1d(np.asarray(grid, dtype=float))
        p = self.beta.size
        r = self.design.basis.n_nonlinear
        C = np.zeros((grid.size, self.joint_cov.shape[0]))
        C[:, j] = 1.0
        C[:, nf + j] = grid
        if self.design.fixed_nonlinear:
            C[:, p + j * r : p + (j + 1) * r] = self.design.basis.nonlinear(grid)
        coef = np.concatenate([self.beta, self.b_hat])
        vals = C @ coef
        se = np.sqrt(np.maximum(np.einsum("ga,ab,gb->g", C, self.joint_cov, C), 0.0))
        return Trajectory(grid, vals, vals - 1.96 * se, vals + 1.96 * se, np.zeros(grid.size, dtype=bool))


def predict_marginal(fit: FitResult, profile: Mapping[str, float] | None, grid) -> Trajectory:
    """Population mean curve for a covariate profile (centered units)."""
    if fit.model is None:
        raise ValueError("fit carries no prediction model")
    return fit.model.marginal(profile, grid)


def predict_subject(fit: FitResult, subject: Subject, grid) -> Trajectory:
    """Empirical-Bayes subject curve: marginal part plus predicted random effects."""
    if fit.model is None:
        raise ValueError("fit carries no prediction model")
    if subject.n_obs < 1:
        raise ValueError("subject has no observations")
    return fit.model.subject_curve(subject, grid)


def coefficient_curve(fit: FitResult, covariate: str, grid) -> Trajectory:
    """Fixed function of one covariate (or "intercept") with a pointwise 95% band."""
    if not isinstance(fit.model, _FmmModel):
        raise ValueError("coefficient curves are defined for FMM fits only")
    return fit.model.coefficient_curve(covariate, grid)


__all__ = [
    "LmmSpec", "LmmDesign", "FmmDesign", "assemble_design", "stack_design", "marginal_loglik",
    "fit_lmm", "fit_fmm", "default_fmm_knots", "predict_marginal", "predict_subject",
    "coefficient_curve", "NotPositiveDefinite",
]

"""Monte Carlo comparison of the five model families on sigmoidal cohorts.

Each replicate draws its own generator from ``SeedSequence([seed, r])``, so
results do not depend on the number of worker processes or their
scheduling. BLAS is pinned to one thread inside every replicate.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from .dataset import LongitudinalDataset, Subject
from .lmm import LmmSpec, fit_fmm, fit_lmm, predict_marginal
from .nlmm import NlmmSpec, SaemControls, fit_saem, smm_curve
from .splines import quantile_knots

log = logging.getLogger(__name__)

MODELS = ("lmm-quadratic", "lmm-splines", "fmm", "pmm-polynomial", "smm")
CHALLENGES = ("none", "terminal-missing-30pct", "half-short-series-4", "triennial-visits", "small-n-150")
GRID = np.arange(-15.0, 1.0)


class StudyError(RuntimeError):
    """Every replicate failed for at least one model."""


@dataclass(frozen=True)
class Scenario:
    name: str
    beta: tuple[float, float, float, float]
    var_b0: float = 2.13
    var_b1: float = 0.26
    corr: float = 0.0
    error_var: float = 0.08
    horizon: float = 24.0
    follow_up_mean: float = 10.0
    follow_up_sd: float = 5.0
    follow_up_min: float = 4.0
    visit_jitter: float = 2.0 / 12.0
    missing_rate: float = 0.05
    missing_includes_final: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != 4:
            raise ValueError("beta needs four entries")
        if min(self.var_b0, self.var_b1, self.error_var) <= 0:
            raise ValueError("variances must be positive")
        if abs(self.corr) > 1:
            raise ValueError("|corr| must be <= 1")
        if not (self.beta[2] < 0 and self.beta[3] > 0):
            raise ValueError("midpoint must be negative and hill positive")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing rate must lie in [0, 1)")

    def truth(self, grid=GRID) -> np.ndarray:
        return smm_curve(np.asarray(grid, dtype=float), np.array(self.beta))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


SCENARIOS = {
    "A": Scenario("A", (-1.03, 0.37, -4.0, 1.69)),
    "B": Scenario("B", (-1.03, 0.37, -2.5, 2.5)),
}


@dataclass(frozen=True)
class Challenge:
    kind: str = "none"

    def __post_init__(self):
        if self.kind not in CHALLENGES:
            raise ValueError(f"unknown challenge {self.kind!r}; expected one of {', '.join(CHALLENGES)}")


@dataclass(frozen=True)
class SimDataset:
    """Simulated cohort plus planned visit times and the generating truth."""

    dataset: LongitudinalDataset
    planned: Mapping[str, np.ndarray]
    scenario: Scenario
    seed: int
    grid: np.ndarray = field(default_factory=lambda: GRID.copy())

    @property
    def truth(self) -> np.ndarray:
        return self.scenario.truth(self.grid)

    def truth_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "truth"])
        for t, v in zip(self.grid, self.truth):
            w.writerow([repr(float(t)), repr(float(v))])
        return buf.getvalue()


def _generator(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def generate_dataset(s: Scenario, N: int, seed: int) -> SimDataset:
    """Draw N subjects from the sigmoidal generating model."""
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = _generator(int(seed), 0)
    # Normal(mean, sd) truncated to [min, horizon]; the truncated moments differ slightly
    mu, sd = s.follow_up_mean, s.follow_up_sd
    a, b = (s.follow_up_min - mu) / sd, (s.horizon - mu) / sd
    fu = stats.truncnorm.rvs(a, b, loc=mu, scale=sd, size=N, random_state=rng)
    F = np.clip(np.rint(fu), s.follow_up_min, s.horizon).astype(int)
    cov = np.array([[s.var_b0, s.corr * np.sqrt(s.var_b0 * s.var_b1)],
                    [s.corr * np.sqrt(s.var_b0 * s.var_b1), s.var_b1]])
    L = np.linalg.cholesky(cov)
    b_all = rng.standard_normal((N, 2)) @ L.T
    beta = np.array(s.beta)
    subjects, planned = [], {}
    width = len(str(N))
    for i in range(N):
        plan = np.arange(-F[i], 1, dtype=float)
        jitter = rng.uniform(-s.visit_jitter, s.visit_jitter, plan.size)
        drop = rng.random(plan.size) < s.missing_rate
        noise = rng.standard_normal(plan.size) * np.sqrt(s.error_var)
        t = np.clip(plan + jitter, -s.horizon, 0.0)
        keep = ~drop
        if not s.missing_includes_final:
            keep[-1] = True
        elif not keep.any():
            keep[-1] = True
        psi = beta.copy()
        psi[:2] += b_all[i]
        y = smm_curve(t, psi) + noise
        sid = f"s{i + 1:0{width}d}"
        subjects.append(Subject(sid, t[keep], y[keep]))
        planned[sid] = plan[keep]
    return SimDataset(LongitudinalDataset(tuple(subjects)), planned, s, int(seed))


def apply_challenge(sim: SimDataset, c: Challenge, seed: int) -> SimDataset:
    """Degrade a simulated cohort according to the challenge."""
    kind = c.kind if isinstance(c, Challenge) else Challenge(c).kind
    if kind == "none":
        return sim
    if kind == "small-n-150":
        if sim.dataset.n_subjects == 150:
            return sim
        return generate_dataset(sim.scenario, 150, sim.seed)
    rng = _generator(int(seed), 1)
    subs = list(sim.dataset.subjects)
    planned = dict(sim.planned)
    N = len(subs)
    if kind == "terminal-missing-30pct":
        chosen = set(rng.choice(N, size=int(round(0.3 * N)), replace=False).tolist())
        for i in sorted(chosen):
            s = subs[i]
            keep = s.times <= -1.0
            if keep.any():
                subs[i] = s.with_observations(keep)
                planned[s.id] = planned[s.id][keep]
    elif kind == "half-short-series-4":
        chosen = rng.choice(N, size=N // 2, replace=False)
        for i in sorted(chosen.tolist()):
            s = subs[i]
            if s.n_obs > 4:
                keep = np.arange(s.n_obs) >= s.n_obs - 4
                subs[i] = s.with_observations(keep)
                planned[s.id] = planned[s.id][keep]
    elif kind == "triennial-visits":
        for i, s in enumerate(subs):
            plan = planned[s.id]
            keep = np.mod(-plan, 3.0) == 0
            subs[i] = s.with_observations(keep)
            planned[s.id] = plan[keep]
    return SimDataset(sim.dataset.replace_subjects(subs), planned, sim.scenario, sim.seed, sim.grid)


@dataclass(frozen=True)
class Cells:
    bias: np.ndarray
    mse: np.ndarray
    var: np.ndarray
    R: int


def mse_bias(fitted_curves, truth, grid=GRID) -> Cells:
    """Per-grid bias, MSE and replicate variance; MSE is bias^2 + variance."""
    Yhat = np.atleast_2d(np.asarray(fitted_curves, dtype=float))
    truth = np.asarray(truth, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if Yhat.shape[0] < 1:
        raise ValueError("need at least one replicate")
    if Yhat.shape[1] != truth.size or truth.size != grid.size:
        raise ValueError("curves, truth and grid lengths differ")
    # work with errors so that exact curves give exactly zero
    err = Yhat - truth
    bias = err.mean(axis=0)
    var = np.mean((err - bias) ** 2, axis=0)
    return Cells(bias, bias * bias + var, var, int(Yhat.shape[0]))


# ---------------------------------------------------------------------------
# study runner


def _saem_controls(seed: int) -> SaemControls:
    return SaemControls(seed=seed, compute_loglik=False)


def fit_model(model: str, ds: LongitudinalDataset, seed: int, jitter: np.random.Generator | None = None):
    """Fit one family with the covariate-free setup used in studies."""
    if model == "lmm-quadratic":
        return fit_lmm(ds, LmmSpec("quadratic"), seed=seed)
    if model == "lmm-splines":
        return fit_lmm(ds, LmmSpec("natural-spline", quantile_knots(ds.all_times, 3)), seed=seed)
    if model == "fmm":
        return fit_fmm(ds, seed=seed)
    if model in ("pmm-polynomial", "smm"):
        spec = NlmmSpec("smm" if model == "smm" else "pmm-polynomial")
        start = None
        if jitter is not None:
            from .nlmm import _prepare, _start_values
            beta, _, _ = _start_values(spec, _prepare(ds, spec))
            beta = beta * (1.0 + 0.1 * jitter.standard_normal(beta.size))
            start = dict(zip(spec.fixed_names, beta))
        return fit_saem(ds, spec, _saem_controls(seed), start=start)
    raise ValueError(f"unknown model {model!r}")


def _replicate(args):
    scenario, challenge, models, N, seed, r, grid = args
    ss = np.random.SeedSequence([int(seed), int(r)])
    data_seed, ch_seed, fit_seed, jit_seed = (int(x) for x in ss.generate_state(4))
    out = {}
    with threadpool_limits(1):
        sim = generate_dataset(scenario, 150 if challenge.kind == "small-n-150" else N, data_seed)
        sim = apply_challenge(sim, challenge, ch_seed)
        ds = sim.dataset
        for m in models:
            t0 = time.perf_counter()
            curve, status = None, "failed"
            for attempt in range(2):
                jitter = _generator(jit_seed, attempt) if attempt else None
                try:
                    fit = fit_model(m, ds, fit_seed + attempt, jitter)
                except Exception as exc:  # noqa: BLE001 - any fit failure counts as non-convergence
                    log.info("replicate %d %s attempt %d failed: %s", r, m, attempt, exc)
                    continue
                if fit.converged:
                    curve = predict_marginal(fit, None, grid).values
                    status = "ok" if attempt == 0 else "retried"
                    break
            out[m] = (curve, status, time.perf_counter() - t0)
    return r, out


@dataclass(frozen=True)
class StudyReport:
    scenario: str
    challenge: str
    models: tuple[str, ...]
    grid: np.ndarray
    cells: Mapping[str, Cells]
    R: int
    N: int
    seed: int
    failures: Mapping[str, int]
    retries: Mapping[str, int]
    curves: Mapping[str, np.ndarray] = field(default_factory=dict, compare=False, repr=False)
    runtime: Mapping[str, float] = field(default_factory=dict, compare=False, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "challenge", "model", "t", "bias", "mse", "var", "R_effective"])
        for m in self.models:
            c = self.cells[m]
            for j, t in enumerate(self.grid):
                w.writerow([self.scenario, self.challenge, m, repr(float(t)), repr(float(c.bias[j])),
                            repr(float(c.mse[j])), repr(float(c.var[j])), c.R])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "challenge": self.challenge,
            "R": self.R,
            "N": self.N,
            "seed": self.seed,
            "grid": self.grid.tolist(),
            "models": {
                m: {
                    "bias": self.cells[m].bias.tolist(),
                    "mse": self.cells[m].mse.tolist(),
                    "var": self.cells[m].var.tolist(),
                    "R_effective": self.cells[m].R,
                    "failures": int(self.failures[m]),
                    "retries": int(self.retries[m]),
                }
                for m in self.models
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "replicate", "t", "value"])
        for m in self.models:
            for r, row in enumerate(self.curves.get(m, [])):
                for t, v in zip(self.grid, row):
                    w.writerow([m, r, repr(float(t)), repr(float(v))])
        return buf.getvalue()


def run_study(s: Scenario, c: Challenge, models: Iterable[str] = MODELS, R: int = 100, N: int = 500,
              seed: int = 0, workers: int = 1, grid=GRID) -> StudyReport:
    """Replicate, fit and aggregate. Output is identical for any ``workers``."""
    models = tuple(models)
    bad = [m for m in models if m not in MODELS]
    if bad:
        raise ValueError(f"unknown models {bad}")
    c = c if isinstance(c, Challenge) else Challenge(c)
    if R < 1:
        raise ValueError("R must be >= 1")
    grid = np.asarray(grid, dtype=float)
    N_eff = 150 if c.kind == "small-n-150" else N
    tasks = [(s, c, models, N_eff, seed, r, grid) for r in range(R)]
    t0 = time.perf_counter()
    if workers <= 1:
        results = [_replicate(a) for a in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, tasks))
    results.sort(key=lambda kv: kv[0])
    truth = s.truth(grid)
    cells, failures, retries, curves, runtime = {}, {}, {}, {}, {}
    for m in models:
        rows = [out[m][0] for _, out in results if out[m][0] is not None]
        failures[m] = sum(1 for _, out in results if out[m][0] is None)
        retries[m] = sum(1 for _, out in results if out[m][1] == "retried")
        runtime[m] = float(sum(out[m][2] for _, out in results))
        if failures[m]:
            log.warning("%s: %d of %d replicates failed and were excluded", m, failures[m], R)
        if not rows:
            raise StudyError(f"all replicates failed for model {m}")
        curves[m] = np.array(rows)
        cells[m] = mse_bias(curves[m], truth, grid)
    runtime["total"] = time.perf_counter() - t0
    return StudyReport(s.name, c.kind, models, grid, cells, R, N_eff, int(seed), failures, retries, curves, runtime)

"""Fitted-model containers shared by all model families."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np


def bic_value(loglik: float, n_params: int, n_subjects: int, n_obs: int | None = None,
              sample_size: Literal["subjects", "observations"] = "subjects") -> float:
    if sample_size == "subjects":
        n = n_subjects
    elif sample_size == "observations":
        if n_obs is None:
            raise ValueError("observation count required")
        n = n_obs
    else:
        raise ValueError(f"unknown BIC sample size convention {sample_size!r}")
    return -2.0 * loglik + n_params * float(np.log(n))


@dataclass(frozen=True)
class CovarianceStruct:
    """Random-effects covariance, residual variance and the log-Cholesky vector."""

    random_cov: np.ndarray
    residual_var: float
    names: tuple[str, ...] = ()
    parameterization: np.ndarray | None = None

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.random_cov, dtype=float))
        if B.size == 0:
            B = np.zeros((0, 0))
        if B.shape[0] != B.shape[1] or not np.allclose(B, B.T, atol=1e-10 * max(1.0, np.abs(B).max(initial=0.0))):
            raise ValueError("random_cov must be square symmetric")
        if not self.residual_var > 0:
            raise ValueError("residual_var must be positive")
        object.__setattr__(self, "random_cov", B)
        if self.names and len(self.names) != B.shape[0]:
            raise ValueError("names do not match random_cov")
        if self.parameterization is None and B.shape[0]:
            try:
                L = np.linalg.cholesky(B)
            except np.linalg.LinAlgError:
                L = None
            if L is not None:
                L = L.copy()
                L[np.diag_indices_from(L)] = np.log(np.diag(L))
                vec = np.append(L[np.tril_indices_from(L)], np.log(self.residual_var))
                object.__setattr__(self, "parameterization", vec)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.random_cov))

    @property
    def corr(self) -> np.ndarray:
        s = self.sd
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.random_cov / np.outer(s, s)
        out[~np.isfinite(out)] = 0.0
        np.fill_diagonal(out, 1.0)
        return out

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "random_cov": self.random_cov.tolist(),
            "residual_var": float(self.residual_var),
            "parameterization": None if self.parameterization is None else np.asarray(self.parameterization).tolist(),
        }


@dataclass(frozen=True)
class FitResult:
    family: str
    method: str
    fixed: dict[str, float]
    fixed_se: dict[str, float]
    fixed_cov: np.ndarray
    cov: CovarianceStruct
    loglik: float
    n_params: int
    n_subjects: int
    n_obs: int
    bic: float
    converged: bool
    iterations: int
    info_matrix: np.ndarray
    trace: tuple = ()
    extra: dict[str, Any] = field(default_factory=dict)
    model: Any = field(default=None, repr=False, compare=False)

    @property
    def names(self) -> list[str]:
        return list(self.fixed)

    @property
    def beta(self) -> np.ndarray:
        return np.array(list(self.fixed.values()))

    def bic_with(self, sample_size: Literal["subjects", "observations"]) -> float:
        return bic_value(self.loglik, self.n_params, self.n_subjects, self.n_obs, sample_size)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "method": self.method,
            "fixed": {k: float(v) for k, v in self.fixed.items()},
            "fixed_se": {k: float(v) for k, v in self.fixed_se.items()},
            "fixed_cov": np.asarray(self.fixed_cov).tolist(),
            "cov": self.cov.to_dict(),
            "loglik": float(self.loglik),
            "n_params": int(self.n_params),
            "n_subjects": int(self.n_subjects),
            "n_obs": int(self.n_obs),
            "bic": float(self.bic),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "info_matrix": np.asarray(self.info_matrix).tolist(),
            "trace": [list(map(float, row)) for row in self.trace],
            "extra": _jsonable(self.extra),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", "estimate", "se"])
        for k, v in self.fixed.items():
            w.writerow([k, repr(float(v)), repr(float(self.fixed_se.get(k, float("nan"))))])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass(frozen=True)
class Trajectory:
    """Curve on a time grid, optionally with a pointwise band and extrapolation flags."""

    times: np.ndarray
    values: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    extrapolated: np.ndarray | None = None

    def to_rows(self) -> list[tuple]:
        rows = []
        for k, (t, v) in enumerate(zip(self.times, self.values)):
            lo = None if self.lower is None else float(self.lower[k])
            hi = None if self.upper is None else float(self.upper[k])
            rows.append((float(t), float(v), lo, hi))
        return rows

"""BIC and Wald tests on fitted models."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .results import FitResult


class ContrastError(ValueError):
    pass


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float
    contrast: np.ndarray
    names: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value,
                "contrast": np.asarray(self.contrast).tolist(), "names": list(self.names)}


def bic(loglik: float, n_params: int, n_subjects: int) -> float:
    """-2 loglik + n_params log(n_subjects); smaller is better."""
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    return -2.0 * float(loglik) + int(n_params) * float(np.log(n_subjects))


def rank_by_bic(fits: Mapping[str, FitResult]) -> list[tuple[str, float]]:
    """(label, BIC) pairs, best (smallest) first; fits without a finite BIC go last."""
    rows = [(k, float(f.bic)) for k, f in fits.items()]
    return sorted(rows, key=lambda kv: (not np.isfinite(kv[1]), kv[1]))


def wald_univariate(fit: FitResult, param: str) -> WaldResult:
    if param not in fit.fixed:
        raise KeyError(f"unknown parameter {param!r}")
    se = float(fit.fixed_se[param])
    if not se > 0:
        raise ValueError(f"standard error of {param!r} is zero")
    z = float(fit.fixed[param]) / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    C = np.zeros((1, len(fit.fixed)))
    C[0, list(fit.fixed).index(param)] = 1.0
    return WaldResult(z * z, 1, min(1.0, p), C, tuple(fit.fixed))


def wald_from_arrays(beta, V, C, rhs=None) -> WaldResult:
    """W = (C b - r)^T (C V C^T)^-1 (C b - r), chi-square with rank(C) df."""
    beta = np.asarray(beta, dtype=float)
    V = np.asarray(V, dtype=float)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != beta.size:
        raise ContrastError("contrast width does not match the parameter vector")
    r = int(np.linalg.matrix_rank(C)) if C.size else 0
    if r == 0:
        raise ContrastError("contrast has rank 0")
    rhs = np.zeros(C.shape[0]) if rhs is None else np.asarray(rhs, dtype=float)
    CVC = C @ V @ C.T
    CVC = 0.5 * (CVC + CVC.T)
    if r < C.shape[0] or np.linalg.cond(CVC) > 1e12:
        raise ContrastError("C V C^T is singular")
    d = C @ beta - rhs
    W = float(d @ np.linalg.solve(CVC, d))
    W = max(W, 0.0)
    return WaldResult(W, r, float(stats.chi2.sf(W, r)), C)


def wald_multivariate(fit: FitResult, contrast) -> WaldResult:
    """Multivariate Wald test; ``contrast`` is an r x p matrix or a contrast string."""
    names = tuple(fit.fixed)
    rhs = None
    if isinstance(contrast, str):
        C, rhs = parse_contrast(contrast, names)
    else:
        C = np.atleast_2d(np.asarray(contrast, dtype=float))
    res = wald_from_arrays(fit.beta, fit.fixed_cov, C, rhs)
    return WaldResult(res.statistic, res.df, res.p_value, res.contrast, names)


_TERM = re.compile(r"\s*([+-]?)\s*(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)\s*\*\s*)?([A-Za-z_][\w:^.()]*)\s*")


def parse_contrast(text: str, names: Sequence[str]):
    """Parse ``"a:t; a:t^2 - 2*b = 1"`` into (C, rhs).

    Rows are separated by ';'. Each row is a signed sum of optionally
    scaled parameter names, optionally followed by '= value' (default 0).
    """
    names = list(names)
    rows, rhs = [], []
    for raw in text.split(";"):
        raw = raw.strip()
        if not raw:
            continue
        if "=" in raw:
            lhs, val = raw.split("=", 1)
            try:
                value = float(val)
            except ValueError:
                raise ContrastError(f"bad right-hand side in {raw!r}") from None
        else:
            lhs, value = raw, 0.0
        row = np.zeros(len(names))
        pos = 0
        lhs = lhs.strip()
        first = True
        while pos < len(lhs):
            m = _TERM.match(lhs, pos)
            if not m or m.end() == pos or (not first and not m.group(1)):
                raise ContrastError(f"cannot parse contrast term in {raw!r}")
            sign = -1.0 if m.group(1) == "-" else 1.0
            coef = float(m.group(2)) if m.group(2) else 1.0
            name = m.group(3)
            if name not in names:
                raise ContrastError(f"unknown parameter {name!r}")
            row[names.index(name)] += sign * coef
            pos = m.end()
            first = False
        rows.append(row)
        rhs.append(value)
    if not rows:
        raise ContrastError("empty contrast")
    return np.array(rows), np.array(rhs)

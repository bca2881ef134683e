"""Quasi-Newton maximization with a Newton polish and one perturbed restart."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

log = logging.getLogger(__name__)

FunGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class OptResult:
    x: np.ndarray
    value: float
    grad: np.ndarray
    converged: bool
    iterations: int
    trace: list
    boundary: bool = False


def fd_jacobian(grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a gradient, symmetrized."""
    k = x.size
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h * max(1.0, abs(x[j]))
        H[:, j] = (grad(x + e) - grad(x - e)) / (2.0 * e[j])
    return 0.5 * (H + H.T)


def _safe(fg: FunGrad):
    def f(x):
        try:
            v, g = fg(x)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros_like(x)
        if not np.isfinite(v):
            return np.inf, np.zeros_like(x)
        return -v, -g
    return f


def _polish(fg: FunGrad, x: np.ndarray, gtol: float, max_steps: int = 15):
    v, g = fg(x)
    steps = 0
    for _ in range(max_steps):
        if np.max(np.abs(g)) < 0.1 * gtol:
            break
        try:
            H = fd_jacobian(lambda z: fg(z)[1], x)
            step = np.linalg.solve(-H, g)
            np.linalg.cholesky(-H)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        improved = False
        while t > 1e-4:
            xn = x + t * step
            try:
                vn, gn = fg(xn)
            except np.linalg.LinAlgError:
                t *= 0.5
                continue
            if np.isfinite(vn) and (vn >= v - 1e-12 * abs(v) or np.max(np.abs(gn)) < np.max(np.abs(g))):
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        x, v, g = xn, vn, gn
        steps += 1
    return x, v, g, steps


def _run(fg: FunGrad, x0: np.ndarray, gtol: float, max_iter: int):
    trace: list = []
    neg = _safe(fg)

    def cb(xk):
        val, gk = neg(xk)
        trace.append((len(trace) + 1, -val, float(np.max(np.abs(gk)))))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = optimize.minimize(neg, x0, jac=True, method="BFGS", callback=cb,
                                options={"gtol": 0.1 * gtol, "maxiter": max_iter})
    x = np.asarray(res.x, dtype=float)
    try:
        x, v, g, steps = _polish(fg, x, gtol)
    except np.linalg.LinAlgError:
        v, g = -res.fun, -res.jac
        steps = 0
    if steps:
        trace.append((len(trace) + 1, v, float(np.max(np.abs(g)))))
    return OptResult(x, float(v), np.asarray(g), bool(np.max(np.abs(g)) < gtol), int(res.nit) + steps, trace)


def maximize(fg: FunGrad, x0: np.ndarray, *, gtol: float = 1e-6, max_iter: int = 1000,
             rng: np.random.Generator | None = None, restart: bool = True) -> OptResult:
    """Maximize ``fg`` (returning value and gradient); converged means max |grad| < gtol."""
    best = _run(fg, np.asarray(x0, dtype=float), gtol, max_iter)
    if best.converged or not restart:
        return best
    rng = rng if rng is not None else np.random.default_rng(0)
    x1 = best.x + rng.normal(scale=0.1, size=best.x.size)
    log.info("restarting optimizer from a perturbed start (grad %.2e)", np.max(np.abs(best.grad)))
    second = _run(fg, x1, gtol, max_iter)
    second.iterations += best.iterations
    second.trace = best.trace + second.trace
    if second.converged or second.value > best.value:
        return second
    best.iterations = second.iterations
    return best


def remaining_ascent(fg: FunGrad, x: np.ndarray, max_iter: int = 200):
    """Tight L-BFGS run from ``x``; returns (x, value, grad, gain over the value at x)."""
    neg = _safe(fg)
    v0, g0 = fg(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = optimize.minimize(neg, x, jac=True, method="L-BFGS-B",
                                options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-15})
    if np.isfinite(res.fun) and -res.fun > v0:
        return np.asarray(res.x, dtype=float), float(-res.fun), -np.asarray(res.jac), float(-res.fun - v0)
    return x, float(v0), np.asarray(g0), 0.0

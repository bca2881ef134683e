"""Gaussian linear mixed-model likelihood engine.

Marginal model for subject i:

    y_i ~ N(X_i beta, V_i),   V = blockdiag(D_i) + U Sigma_b U^T,
    D_i = Z_i B Z_i^T + sigma2 I.

B is block diagonal (unstructured log-Cholesky blocks or identity blocks),
Sigma_b is diagonal with one variance per population block (penalized
spline coefficients shared by all subjects).

Everything is computed from per-subject Gram matrices of W_i = [Z X U y].
With B = L L^T and K_i = L (sigma2 I + L^T Z_i^T Z_i L)^{-1} L^T,

    D_i^{-1} = (I - Z_i K_i Z_i^T) / sigma2,

so bilinear forms a^T D^{-1} b and a^T D^{-2} b between design columns
only need q x q work per subject, whatever the number of visits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

LOG2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class CovBlock:
    kind: Literal["unstructured", "identity"]
    size: int

    @property
    def n_params(self) -> int:
        return self.size * (self.size + 1) // 2 if self.kind == "unstructured" else 1


def _sandwich_sum(F: np.ndarray, S: np.ndarray) -> np.ndarray:
    """sum_i F_i S F_i^T for a stack F of shape (N, q, a)."""
    N, q, a = F.shape
    left = (F @ S).transpose(1, 0, 2).reshape(q, N * a)
    return left @ F.transpose(1, 0, 2).reshape(q, N * a).T


class MixedEngine:
    def __init__(
        self,
        y: Sequence[np.ndarray],
        X: Sequence[np.ndarray],
        Z: Sequence[np.ndarray],
        blocks: Sequence[CovBlock],
        U: Sequence[np.ndarray] | None = None,
        pop_blocks: Sequence[int] = (),
        method: Literal["ML", "REML"] = "ML",
    ):
        self.N = len(y)
        self.n_i = np.array([len(v) for v in y], dtype=float)
        self.n_tot = int(self.n_i.sum())
        self.p = X[0].shape[1]
        self.q = Z[0].shape[1]
        self.blocks = tuple(blocks)
        if sum(b.size for b in self.blocks) != self.q:
            raise ValueError("covariance blocks do not cover the random design")
        self.pop_blocks = tuple(int(k) for k in pop_blocks)
        self.m = sum(self.pop_blocks)
        if U is None and self.m:
            raise ValueError("population blocks need a U design")
        self.method = method
        q, p, m = self.q, self.p, self.m
        self.iz = slice(0, q)
        self.ix = slice(q, q + p)
        self.iu = slice(q + p, q + p + m)
        self.iy = q + p + m
        self.c = q + p + m + 1
        G = np.empty((self.N, self.c, self.c))
        for i in range(self.N):
            parts = [np.asarray(Z[i], float), np.asarray(X[i], float)]
            if m:
                parts.append(np.asarray(U[i], float))
            parts.append(np.asarray(y[i], float)[:, None])
            W = np.hstack(parts)
            G[i] = W.T @ W
        self.G = G
        self.Gsum = G.sum(0)
        self.R = G[:, self.iz, :]
        self.ZtZ = G[:, self.iz, self.iz]
        self.n_theta = sum(b.n_params for b in self.blocks) + len(self.pop_blocks) + 1

    # ---- parameterization -------------------------------------------------

    def decode(self, theta: np.ndarray):
        """theta -> (B, per-column population variances, residual variance, block factors)."""
        theta = np.asarray(theta, dtype=float)
        Lb = np.zeros((self.q, self.q))
        factors = []
        pos = col = 0
        for blk in self.blocks:
            k = blk.size
            if blk.kind == "unstructured":
                L = np.zeros((k, k))
                L[np.tril_indices(k)] = theta[pos : pos + blk.n_params]
                with np.errstate(over="ignore"):
                    L[np.diag_indices(k)] = np.exp(np.diag(L))
                factors.append(L)
            else:
                with np.errstate(over="ignore"):
                    L = np.exp(0.5 * theta[pos]) * np.eye(k)
                factors.append(None)
            Lb[col : col + k, col : col + k] = L
            pos += blk.n_params
            col += k
        with np.errstate(over="ignore"):
            tau2 = (np.concatenate([np.full(k, np.exp(theta[pos + j])) for j, k in enumerate(self.pop_blocks)])
                    if self.m else np.zeros(0))
            s2 = float(np.exp(theta[pos + len(self.pop_blocks)]))
        if not (np.all(np.isfinite(Lb)) and np.all(np.isfinite(tau2)) and np.isfinite(s2)):
            raise NotPositiveDefinite("variance parameters overflow")
        if s2 <= 0 or (self.m and np.any(tau2 <= 0)):
            raise NotPositiveDefinite("variance underflow")
        return Lb @ Lb.T, tau2, s2, factors, Lb

    def encode(self, B: np.ndarray, tau2: Sequence[float], sigma2: float) -> np.ndarray:
        out = []
        col = 0
        for blk in self.blocks:
            k = blk.size
            sub = B[col : col + k, col : col + k]
            if blk.kind == "unstructured":
                L = np.linalg.cholesky(sub)
                L[np.diag_indices(k)] = np.log(np.diag(L))
                out.extend(L[np.tril_indices(k)])
            else:
                out.append(np.log(np.mean(np.diag(sub))))
            col += k
        out.extend(np.log(np.asarray(tau2, dtype=float)))
        out.append(np.log(sigma2))
        return np.array(out, dtype=float)

    # ---- core evaluation --------------------------------------------------

    def _forms(self, theta):
        """Summed D^-1 and D^-2 Gram forms plus per-subject Z-rows of D^-1 W."""
        B, tau2, s2, factors, Lb = self.decode(theta)
        q = self.q
        if q:
            LtZtZL = Lb.T @ self.ZtZ @ Lb
            M = LtZtZL + s2 * np.eye(q)
            try:
                LM = np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite("marginal covariance not positive definite") from None
            logdetD = float((self.n_i - q).sum() * np.log(s2) + 2.0 * np.log(np.diagonal(LM, axis1=1, axis2=2)).sum())
            Minv = np.linalg.inv(M)
            K = Lb @ Minv @ Lb.T
            K = 0.5 * (K + K.transpose(0, 2, 1))
            KR = K @ self.R
            c = self.c
            KRf = KR.reshape(-1, c)
            RKR = self.R.reshape(-1, c).T @ KRf
            KRZZKR = KRf.T @ (self.ZtZ @ KR).reshape(-1, c)
            P1 = (self.Gsum - RKR) / s2
            P2 = (self.Gsum - 2.0 * RKR + KRZZKR) / s2 ** 2
            ZDW = (self.R - self.ZtZ @ KR) / s2
            trD = float((self.n_i - np.einsum("iqr,irq->i", K, self.ZtZ)).sum() / s2)
        else:
            logdetD = self.n_tot * np.log(s2)
            P1 = self.Gsum / s2
            P2 = self.Gsum / s2 ** 2
            ZDW = np.zeros((self.N, 0, self.c))
            trD = self.n_tot / s2
        P1 = 0.5 * (P1 + P1.T)
        P2 = 0.5 * (P2 + P2.T)
        return B, tau2, s2, factors, logdetD, P1, P2, ZDW, trD

    def evaluate(self, theta: np.ndarray, beta: np.ndarray | None = None, grad: bool = True, reml: bool | None = None):
        """Log-likelihood (profiled over beta when ``beta`` is None) and its gradient.

        Returns a dict with ``loglik``, ``beta``, ``A`` (X^T V^-1 X) and, if
        requested, ``grad_theta`` and ``grad_beta``.
        """
        reml = (self.method == "REML") if reml is None else reml
        B, tau2, s2, factors, logdetD, P1, P2, ZDW, trD = self._forms(theta)
        ix, iu, iy, iz = self.ix, self.iu, self.iy, self.iz
        XtDX, XtDy, ytDy = P1[ix, ix], P1[ix, iy], P1[iy, iy]
        if self.m:
            UtDU, UtDX, UtDy = P1[iu, iu], P1[iu, ix], P1[iu, iy]
            S = UtDU + np.diag(1.0 / tau2)
            try:
                Ls = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise NotPositiveDefinite("penalized block not positive definite") from None
            Sinv = np.linalg.inv(S)
            Sinv = 0.5 * (Sinv + Sinv.T)
            logdetV = logdetD + np.log(tau2).sum() + 2.0 * np.log(np.diag(Ls)).sum()
            E = Sinv @ UtDX
            A = XtDX - UtDX.T @ E
            b = XtDy - UtDX.T @ Sinv @ UtDy
            yVy = ytDy - UtDy @ Sinv @ UtDy
        else:
            logdetV = logdetD
            A, b, yVy = XtDX, XtDy, ytDy
        A = 0.5 * (A + A.T)
        try:
            LA = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("fixed-effect design is rank deficient") from None
        if beta is None:
            beta = np.linalg.solve(A, b)
        beta = np.asarray(beta, dtype=float)
        quad = yVy - 2.0 * beta @ b + beta @ A @ beta
        ll = -0.5 * (self.n_tot * LOG2PI + logdetV + quad)
        if reml:
            ll += -np.log(np.diag(LA)).sum() + 0.5 * self.p * LOG2PI
        out = {"loglik": float(ll), "beta": beta, "A": A, "B": B, "tau2": tau2, "sigma2": s2}
        if not grad:
            return out
        # v maps W-columns to the residual V^-1 r = D^-1 W v
        v = np.zeros(self.c)
        v[ix] = -beta
        v[iy] = 1.0
        if self.m:
            c_pop = Sinv @ (UtDy - UtDX @ beta)
            v[iu] = -c_pop
        Zw = ZDW @ v
        ZVZ = ZDW[:, :, iz].sum(0)
        trV = trD
        if self.m:
            ZDU = ZDW[:, :, iu]
            ZVZ = ZVZ - _sandwich_sum(ZDU, Sinv)
            trV -= float(np.sum(Sinv * P2[iu, iu]))
        ZMZ = ZVZ - Zw.T @ Zw
        trM = trV - float(v @ P2 @ v)
        if reml:
            Ainv = np.linalg.inv(A)
            Sx = np.zeros((self.c, self.p))
            Sx[ix] = np.eye(self.p)
            if self.m:
                Sx[iu] = -E
            ZG = ZDW @ Sx
            ZMZ = ZMZ - _sandwich_sum(ZG, Ainv)
            trM -= float(np.sum(Ainv * (Sx.T @ P2 @ Sx)))
        gB = -0.5 * ZMZ
        gs2 = -0.5 * trM
        grads = []
        col = 0
        for blk, L in zip(self.blocks, factors):
            k = blk.size
            sub = gB[col : col + k, col : col + k]
            if blk.kind == "unstructured":
                gL = 2.0 * (0.5 * (sub + sub.T)) @ L
                gL[np.diag_indices(k)] *= np.diag(L)
                grads.extend(gL[np.tril_indices(k)])
            else:
                grads.append(float(np.trace(sub)) * B[col, col])
            col += k
        if self.m:
            P = UtDU
            Uw = P1[iu, :] @ v
            UMU_diag = np.diag(P - P @ Sinv @ P) - Uw ** 2
            if reml:
                UG = P1[iu, :] @ Sx
                UMU_diag = UMU_diag - np.einsum("ka,ab,kb->k", UG, Ainv, UG)
            gtau = -0.5 * UMU_diag * tau2
            pos = 0
            for k in self.pop_blocks:
                grads.append(float(gtau[pos : pos + k].sum()))
                pos += k
            out["pop_resid"] = Uw
        grads.append(gs2 * s2)
        out["grad_theta"] = np.array(grads)
        out["grad_beta"] = b - A @ beta
        out["Zw"] = Zw
        return out

    def loglik(self, theta, beta=None, reml=None) -> float:
        return self.evaluate(theta, beta, grad=False, reml=reml)["loglik"]

    # ---- empirical Bayes --------------------------------------------------

    def blups(self, theta: np.ndarray, beta: np.ndarray | None = None):
        """Posterior means of the per-subject random effects and population coefficients."""
        ev = self.evaluate(theta, beta, grad=True)
        eta = ev["Zw"] @ ev["B"]
        pop = ev["tau2"] * ev["pop_resid"] if self.m else np.zeros(0)
        return eta, pop, ev

    def fixed_pop_covariance(self, theta: np.ndarray) -> np.ndarray:
        """Covariance of (beta_hat, b_hat - b) from the penalized normal equations."""
        B, tau2, s2, factors, logdetD, P1, P2, ZDW, trD = self._forms(theta)
        ix, iu = self.ix, self.iu
        if not self.m:
            return np.linalg.inv(P1[ix, ix])
        C = np.block([[P1[ix, ix], P1[ix, iu]], [P1[iu, ix], P1[iu, iu] + np.diag(1.0 / tau2)]])
        C = np.linalg.inv(0.5 * (C + C.T))
        return 0.5 * (C + C.T)

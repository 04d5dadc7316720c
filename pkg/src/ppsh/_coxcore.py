"""Weighted Breslow partial likelihood shared by every Cox-type fit here.

Risk sets are stored once per distinct event time as a dense weight
matrix (zero outside the risk set). Each observed event contributes its
own term (Breslow ties), scaled by a per-event weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCORE_TOL = 1e-8
STEP_TOL = 1e-9
MAX_ITER = 50
MAX_HALVINGS = 30
FLAT_TOL = 1e-8
PENDING_STEP_TOL = 1e-4


class SingularInformationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NewtonResult:
    beta: np.ndarray
    loglik: float
    score: np.ndarray
    information: np.ndarray
    iterations: int
    converged: bool


class WeightedBreslow:
    """Objective sum_k w_k [beta'x_(k) - log sum_i p_ik exp(beta'x_i)].

    Parameters
    ----------
    X : (n, p) design matrix.
    risk_weights : (m_d, n) risk-set weights, one row per distinct time.
    event_subject : (m,) subject index of every event term.
    event_row : (m,) row of ``risk_weights`` used by each event term.
    term_weights : (m,) leading weight of each event term.
    """

    def __init__(self, X, risk_weights, event_subject, event_row, term_weights):
        self.X = np.asarray(X, dtype=float)
        self.risk_weights = np.asarray(risk_weights, dtype=float)
        self.event_subject = np.asarray(event_subject, dtype=np.int64)
        self.event_row = np.asarray(event_row, dtype=np.int64)
        self.term_weights = np.asarray(term_weights, dtype=float)
        n, p = self.X.shape
        self.p = p
        m_d = self.risk_weights.shape[0]
        # total leading weight attached to each risk-set row
        self.row_weight = np.bincount(self.event_row, weights=self.term_weights, minlength=m_d)
        self.weighted_x = self.term_weights @ self.X[self.event_subject] if len(self.event_subject) else np.zeros(p)
        self._xx = (self.X[:, :, None] * self.X[:, None, :]).reshape(n, p * p)

    def _moments(self, beta, second=True):
        eta = self.X @ beta
        shift = eta.max() if eta.size else 0.0
        r = np.exp(eta - shift)
        s0 = self.risk_weights @ r
        s1 = self.risk_weights @ (r[:, None] * self.X)
        s2 = (self.risk_weights @ (r[:, None] * self._xx)).reshape(-1, self.p, self.p) if second else None
        return shift, s0, s1, s2

    def evaluate(self, beta, second=True):
        """Return (loglik, score, information) at ``beta``."""
        beta = np.asarray(beta, dtype=float).reshape(self.p)
        shift, s0, s1, s2 = self._moments(beta, second)
        active = self.row_weight != 0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_s0 = np.where(active, np.log(np.where(active, s0, 1.0)) + shift, 0.0)
            xbar = np.where(active[:, None], s1 / np.where(active, s0, 1.0)[:, None], 0.0)
        loglik = float(self.weighted_x @ beta - self.row_weight @ log_s0)
        score = self.weighted_x - self.row_weight @ xbar
        info = None
        if second:
            safe = np.where(active, s0, 1.0)[:, None, None]
            var = s2 / safe - xbar[:, :, None] * xbar[:, None, :]
            var[~active] = 0.0
            info = np.einsum("j,jab->ab", self.row_weight, var)
            info = 0.5 * (info + info.T)
        return loglik, score, info

    def event_terms(self, beta):
        """Per-event weighted covariate mean and weighted variance V(t_j; beta)."""
        beta = np.asarray(beta, dtype=float).reshape(self.p)
        _, s0, s1, s2 = self._moments(beta, True)
        with np.errstate(divide="ignore", invalid="ignore"):
            xbar = s1 / s0[:, None]
            var = s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :]
        rows = self.event_row
        xbar_k = xbar[rows]
        v_k = self.term_weights[:, None, None] * var[rows]
        return xbar_k, v_k

    def fit(self, init=None, max_iter=MAX_ITER) -> NewtonResult:
        """Newton-Raphson from ``init`` (zero by default) with step halving."""
        beta = np.zeros(self.p) if init is None else np.asarray(init, dtype=float).reshape(self.p).copy()
        ll, score, info = self.evaluate(beta)
        scale = float(np.trace(info))
        if self.p and not (np.linalg.eigvalsh(info).min() > FLAT_TOL * scale > 0):
            raise SingularInformationError("information matrix is singular at the starting value")
        converged = bool(np.max(np.abs(score), initial=0.0) < SCORE_TOL)
        it = 0
        while not converged and it < max_iter:
            it += 1
            try:
                step = np.linalg.solve(info, score)
            except np.linalg.LinAlgError:
                if it == 1:
                    raise SingularInformationError(
                        "information matrix is singular at the starting value") from None
                break
            if not np.all(np.isfinite(step)):
                if it == 1:
                    raise SingularInformationError(
                        "information matrix is singular at the starting value")
                break
            new = beta + step
            new_ll, new_score, new_info = self.evaluate(new)
            halvings = 0
            while (not np.isfinite(new_ll) or new_ll < ll - 1e-12 * max(1.0, abs(ll))) \
                    and halvings < MAX_HALVINGS:
                step = step / 2
                new = beta + step
                new_ll, new_score, new_info = self.evaluate(new)
                halvings += 1
            beta, ll, score, info = new, new_ll, new_score, new_info
            if np.max(np.abs(score), initial=0.0) < SCORE_TOL:
                converged = True
            elif np.max(np.abs(step), initial=0.0) < STEP_TOL:
                break
        converged = converged and bool(np.all(np.isfinite(beta)))
        # a vanishing score with a still-large Newton step means beta is running off to infinity
        if converged and self.p:
            try:
                pending = np.linalg.solve(info, score)
                converged = bool(np.max(np.abs(pending)) < PENDING_STEP_TOL)
            except np.linalg.LinAlgError:
                converged = False
        return NewtonResult(beta, ll, score, info, it, converged)

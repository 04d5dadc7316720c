"""Marginal survival estimation: Cox death model, event-free survival, KM."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._coxcore import WeightedBreslow
from .survdata import DataError, Dataset

__all__ = [
    "StepFunction",
    "CoxDeathFit",
    "fit_cox_death",
    "event_free_survival",
    "km_survival",
]


class StepFunction:
    """Right-continuous piecewise-constant function on [0, inf).

    ``values[k]`` holds on ``[knots[k], knots[k+1])``; ``before`` holds on
    ``[0, knots[0])``.
    """

    __slots__ = ("knots", "values", "before")

    def __init__(self, knots, values, before=0.0):
        knots = np.asarray(knots, dtype=float).ravel()
        values = np.asarray(values, dtype=float).ravel()
        if knots.shape != values.shape:
            raise ValueError("knots and values must have the same length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        self.knots = knots
        self.values = values
        self.before = float(before)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.knots, t, side="right") - 1
        out = np.where(k >= 0, self.values[np.clip(k, 0, None)] if self.values.size else self.before,
                       self.before)
        return out if out.ndim else float(out)

    def left_limit(self, t):
        """Value just before ``t``."""
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.knots, t, side="left") - 1
        out = np.where(k >= 0, self.values[np.clip(k, 0, None)] if self.values.size else self.before,
                       self.before)
        return out if out.ndim else float(out)

    def map(self, fn) -> "StepFunction":
        return StepFunction(self.knots, fn(self.values), fn(np.array(self.before)))

    def __repr__(self) -> str:
        return f"StepFunction({self.knots.size} knots, before={self.before})"

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knot", "value"])
            w.writerow([0.0, self.before])
            for k, v in zip(self.knots, self.values):
                w.writerow([repr(float(k)), repr(float(v))])


@dataclass(frozen=True)
class CoxDeathFit:
    beta_death: np.ndarray
    baseline_cumhaz: StepFunction
    converged: bool
    iterations: int
    information: np.ndarray
    score: np.ndarray

    def survival(self, t, z, x=None):
        """S_Y(t | Z=z, X=x) = exp(-exp(beta'(z, x)) Lambda0(t))."""
        covs = np.zeros(len(self.beta_death) - 1) if x is None else np.asarray(x, dtype=float)
        lin = self.beta_death @ np.concatenate([[float(z)], covs])
        return np.exp(-np.exp(lin) * self.baseline_cumhaz(t))

    def survival_curve(self, z, x=None) -> StepFunction:
        covs = np.zeros(len(self.beta_death) - 1) if x is None else np.asarray(x, dtype=float)
        mult = np.exp(self.beta_death @ np.concatenate([[float(z)], covs]))
        return self.baseline_cumhaz.map(lambda h: np.exp(-mult * h))


def fit_cox_death(ds: Dataset, use_covariates: bool = True) -> CoxDeathFit:
    """Cox model for death with Breslow ties and the Breslow baseline.

    Death is the outcome; follow-up ending without death is censoring. The
    non-fatal event plays no role here.
    """
    ds.require_both_arms()
    if not ds.died.any():
        raise DataError("no death events")
    X = ds.design if use_covariates else ds.design[:, :1]
    death_idx = np.flatnonzero(ds.died)
    times = ds.followup[death_idx]
    uniq, row = np.unique(times, return_inverse=True)
    risk = (ds.followup[None, :] >= uniq[:, None]).astype(float)
    model = WeightedBreslow(X, risk, death_idx, row, np.ones(death_idx.size))
    res = model.fit()
    # Breslow baseline: sum over deaths of 1 / sum_{at risk} exp(beta'x)
    eta = X @ res.beta
    s0 = risk @ np.exp(eta)
    counts = np.bincount(row, minlength=uniq.size)
    cumhaz = np.cumsum(counts / s0)
    return CoxDeathFit(res.beta, StepFunction(uniq, cumhaz, 0.0),
                       res.converged, res.iterations, res.information, res.score)


def event_free_survival(ds: Dataset, z: int) -> StepFunction:
    """Nonparametric S_T(t | Y > t, Z = z).

    At time t the curve is the fraction of arm-z subjects still under
    observation (D_i > t) who have not had a non-fatal event by t. Once
    nobody remains under observation the curve keeps its last value.
    """
    sel = ds.arm == z
    if not sel.any():
        raise DataError(f"arm {z} is empty")
    fu = ds.followup[sel]
    ev = ds.event_time[sel]
    has = ~np.isnan(ev)
    knots = np.unique(np.concatenate([fu, ev[has]]))
    fu_sorted = np.sort(fu)
    # denominators: #{D_i > t}
    denom = fu.size - np.searchsorted(fu_sorted, knots, side="right")
    # subjects under observation with an event at or before t
    ev_obs = ev[has]
    fu_ev = fu[has]
    gone = (ev_obs[None, :] <= knots[:, None]) & (fu_ev[None, :] > knots[:, None])
    num = denom - gone.sum(axis=1)
    ok = denom > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(ok, num / np.where(ok, denom, 1), np.nan)
    # freeze at the last computable value
    last = np.maximum.accumulate(np.where(ok, np.arange(knots.size), -1))
    values = np.where(last >= 0, ratio[np.clip(last, 0, None)], 1.0)
    return StepFunction(knots, values, 1.0)


def km_survival(times, status=None) -> StepFunction:
    """Kaplan-Meier product-limit estimate.

    ``times`` is either a sequence of (time, status) pairs or an array of
    times with ``status`` given separately.
    """
    if status is None:
        arr = np.asarray(times, dtype=float)
        if arr.size == 0:
            raise ValueError("empty input")
        arr = arr.reshape(-1, 2)
        t, d = arr[:, 0], arr[:, 1]
    else:
        t = np.asarray(times, dtype=float).ravel()
        d = np.asarray(status, dtype=float).ravel()
    if t.size == 0:
        raise ValueError("empty input")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValueError("times must be finite and >= 0")
    d = d != 0
    uniq = np.unique(t[d])
    if uniq.size == 0:
        return StepFunction([], [], 1.0)
    t_sorted = np.sort(t)
    at_risk = t.size - np.searchsorted(t_sorted, uniq, side="left")
    deaths = np.bincount(np.searchsorted(uniq, t[d]), minlength=uniq.size)
    surv = np.cumprod(1.0 - deaths / at_risk)
    return StepFunction(uniq, surv, 1.0)

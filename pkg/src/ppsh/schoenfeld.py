"""Proportionality diagnostics: weighted Schoenfeld residuals and a 1-df test.

Under beta(t) = beta + xi * g(t) the scaled residual s_j / V_j has mean
about xi * g(t_j) and variance about 1 / V_j, so a weighted least-squares
slope of scaled residuals on g(t_j) estimates xi and a score-type
statistic tests xi = 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .estimators import km_survival
from .frailty import PsWeightTable
from .model import PpshFit, _model
from .survdata import Dataset

__all__ = ["PropTestResult", "schoenfeld_residuals", "prop_test", "time_transform"]

TRANSFORMS = ("t", "log", "rank", "km")


@dataclass(frozen=True)
class PropTestResult:
    xi_hat: float
    chi_sq: float
    p_value: float
    transform: str
    times: np.ndarray = field(repr=False)
    residuals: np.ndarray = field(repr=False)
    scaled: np.ndarray = field(repr=False)
    g: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"xi_hat": self.xi_hat, "chi_sq": self.chi_sq, "p_value": self.p_value,
                "transform": self.transform, "events": int(self.times.size)}

    def write_residuals(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_j", "s_j", "s_scaled_j", "g_t_j"])
            for row in zip(self.times, self.residuals, self.scaled, self.g):
                w.writerow([repr(float(x)) for x in row])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _terms(ds: Dataset, weights: PsWeightTable, beta):
    model = _model(ds, weights)
    xbar, v = model.event_terms(np.asarray(beta, dtype=float))
    z = ds.design[weights.event_subject]
    p = weights.event_weights
    s = p[:, None] * (z - xbar)
    return weights.times[weights.event_row], s, v


def schoenfeld_residuals(ds: Dataset, weights: PsWeightTable, beta_hat):
    """One residual per observed event, tied events included separately.

    Returns ``(times, residuals)`` with residuals of shape (m, p).
    """
    t, s, _ = _terms(ds, weights, beta_hat)
    return t, s


def time_transform(name, times, ds: Dataset | None = None) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if callable(name):
        return np.asarray(name(times), dtype=float)
    if name == "t":
        return times.copy()
    if name == "log":
        return np.log(times)
    if name == "rank":
        from scipy.stats import rankdata
        return rankdata(times)
    if name == "km":
        if ds is None:
            raise ValueError("the km transform needs the dataset")
        has = ds.has_event
        obs = np.where(has, ds.event_time, ds.followup)
        return 1.0 - km_survival(obs, has).left_limit(times)
    raise ValueError(f"unknown time transform {name!r}; use one of {TRANSFORMS}")


def prop_test(ds: Dataset, weights: PsWeightTable, fit: PpshFit, g="t") -> PropTestResult:
    """Test of a time-varying treatment effect along ``g``.

    Other coefficients are held at their fitted values. ``g`` is centered
    by its V-weighted mean and the -L^{-1} correction to the residual
    variance is dropped.
    """
    t, s, v = _terms(ds, weights, fit.beta)
    s0 = s[:, 0]
    v0 = v[:, 0, 0]
    gt = time_transform(g, t, ds)
    if not np.all(np.isfinite(gt)):
        raise ValueError("time transform produced non-finite values")
    total_v = v0.sum()
    if total_v <= 0:
        raise ArithmeticError("sum of V(t_j) is zero; the test is undefined")
    gc = gt - (v0 @ gt) / total_v
    denom = float(gc**2 @ v0)
    if not denom > 1e-14 * max(1.0, float(gt**2 @ v0)):
        raise ArithmeticError("sum g V g is singular (g is constant over the event times)")
    num = float(gc @ s0)
    xi = num / denom
    stat = num * num / denom
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(v0 > 0, s0 / v0, np.nan)
    name = g if isinstance(g, str) else getattr(g, "__name__", "custom")
    return PropTestResult(xi, stat, float(chi2.sf(stat, 1)), name, t, s0, scaled, gt)

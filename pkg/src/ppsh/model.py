"""Proportional principal stratum hazards fit and bootstrap inference.

The model is a Cox regression on the first non-fatal event in which every
risk-set member, and every event term, is weighted by its principal
stratum probability. The treatment coefficient is always ``beta[0]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from ._coxcore import SingularInformationError, WeightedBreslow
from ._parallel import run_indexed, stream
from .frailty import PsWeightTable, build_ps_weights
from .survdata import DataError, Dataset

__all__ = [
    "FitError",
    "PpshFit",
    "BootstrapResult",
    "weighted_score",
    "information",
    "log_partial_likelihood",
    "fit_ppsh",
    "fit_cause_specific",
    "percentile_interval",
    "bootstrap_ci",
]


class FitError(ArithmeticError):
    """The weighted partial likelihood cannot be maximized."""


@dataclass(frozen=True)
class PpshFit:
    beta: np.ndarray
    information: np.ndarray
    log_pl: float
    iterations: int
    converged: bool
    score: np.ndarray = field(repr=False)

    @property
    def hr(self) -> float:
        return math.exp(self.beta[0])

    def wald_ci(self, level: float = 0.95) -> tuple[float, float]:
        """Model-based interval for the treatment log-HR.

        Only meaningful when all weights are 1 (plain Cox); principal
        stratum fits should use :func:`bootstrap_ci`.
        """
        from scipy.stats import norm
        se = math.sqrt(np.linalg.inv(self.information)[0, 0])
        q = norm.ppf(0.5 + level / 2)
        return self.beta[0] - q * se, self.beta[0] + q * se

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "hr": self.hr,
            "log_pl": self.log_pl,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _model(ds: Dataset, weights: PsWeightTable) -> WeightedBreslow:
    if weights.ids != ds.ids:
        raise DataError("weight table was built for a different dataset")
    expected = np.flatnonzero(ds.has_event)
    if np.setdiff1d(expected, weights.event_subject).size:
        raise DataError("event time missing from weight table")
    return WeightedBreslow(ds.design, weights.weights, weights.event_subject,
                           weights.event_row, weights.event_weights)


def weighted_score(ds: Dataset, weights: PsWeightTable, beta) -> np.ndarray:
    """Modified score: sum over events of p_(j)j (Z_(j) - weighted mean)."""
    return _model(ds, weights).evaluate(beta, second=False)[1]


def information(ds: Dataset, weights: PsWeightTable, beta) -> np.ndarray:
    """Sum over events of p_(j)j times the weighted risk-set covariance."""
    return _model(ds, weights).evaluate(beta)[2]


def log_partial_likelihood(ds: Dataset, weights: PsWeightTable, beta) -> float:
    """Weighted log partial likelihood whose gradient is the modified score.

    Equals sum_j p_(j)j [beta'Z_(j) - log sum_i p_ij exp(beta'Z_i)]; the
    constant sum_j p_(j)j log p_(j)j is omitted.
    """
    return _model(ds, weights).evaluate(beta, second=False)[0]


def fit_ppsh(ds: Dataset, weights: PsWeightTable, init=None) -> PpshFit:
    """Solve the modified score equation by Newton-Raphson from ``init`` (default 0)."""
    model = _model(ds, weights)
    try:
        res = model.fit(init)
    except SingularInformationError as exc:
        raise FitError(str(exc)) from None
    return PpshFit(res.beta, res.information, res.loglik, res.iterations,
                   res.converged, res.score)


def fit_cause_specific(ds: Dataset) -> PpshFit:
    """Cox fit for the first non-fatal event with death treated as censoring."""
    return fit_ppsh(ds, PsWeightTable.uniform(ds))


# bootstrap ---------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    estimates: np.ndarray
    ci_low: float
    ci_high: float
    level: float
    dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "hr_ci_low": math.exp(self.ci_low),
            "hr_ci_high": math.exp(self.ci_high),
            "level": self.level,
            "replicates": int(self.estimates.size),
            "dropped": self.dropped,
        }


def percentile_interval(estimates, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval with linear interpolation between order statistics."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    est = np.sort(np.asarray(estimates, dtype=float))
    alpha = 1 - level
    lo, hi = np.quantile(est, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def gamma_frailty_estimate(ds: Dataset, gamma: float) -> PpshFit:
    """Full pipeline: death Cox, event-free survival, weights, PPSH fit."""
    return fit_ppsh(ds, build_ps_weights(ds, gamma))


def _resample(ds: Dataset, rng: np.random.Generator) -> Dataset:
    idx = rng.integers(0, len(ds), size=len(ds))
    return ds.subset(idx, ids=[f"b{k}" for k in range(len(ds))])


def _bootstrap_one(r, ds, seed, estimator):
    rng = stream(seed, r)
    sample = _resample(ds, rng)
    try:
        fit = estimator(sample)
    except (FitError, DataError, ValueError, ArithmeticError):
        return None
    if not fit.converged:
        return None
    return float(fit.beta[0])


def bootstrap_ci(ds: Dataset, gamma: float | None = None, B: int = 1000, level: float = 0.95,
                 seed: int = 0, workers: int = 1, estimator=None) -> BootstrapResult:
    """Percentile bootstrap interval for the treatment log-HR.

    Each replicate resamples subjects with replacement, gives every drawn
    record a fresh id and reruns the whole estimation pipeline
    (``estimator``, by default the gamma-frailty PPSH fit at ``gamma``).
    Replicate r draws from its own stream keyed by (seed, r), so results do
    not depend on ``workers``. Failed or non-converged replicates are
    dropped and counted.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if estimator is None:
        if gamma is None:
            raise ValueError("either gamma or estimator is required")
        estimator = partial(gamma_frailty_estimate, gamma=gamma)
    job = partial(_bootstrap_one, ds=ds, seed=seed, estimator=estimator)
    out = run_indexed(job, list(range(B)), workers)
    est = np.array([b for b in out if b is not None])
    dropped = B - est.size
    if est.size < math.ceil(0.5 * B):
        raise FitError(f"only {est.size} of {B} bootstrap replicates converged")
    lo, hi = percentile_interval(est, level)
    return BootstrapResult(est, lo, hi, level, dropped)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")

"""Archimedean copulas for the (first event, death, counterfactual death) triple.

Bivariate Clayton, Gumbel and Frank survival copulas with analytic first
and mixed second partials, their Kendall's tau maps, a censored
pseudo-likelihood fit of the event/death dependence, nested trivariate
copulas C(u1, C(u2, u3; s1); s0) and the resulting principal stratum
probabilities.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import integrate, optimize

from ._parallel import run_indexed, stream
from .estimators import km_survival
from .frailty import PsWeightTable
from .survdata import DataError, Dataset

__all__ = [
    "KINDS",
    "CopulaFamily",
    "NestedCopula",
    "NestedClayton",
    "CopulaValue",
    "copula_eval",
    "kendall_tau",
    "tau_to_varsigma",
    "pseudo_observations",
    "pseudo_loglik",
    "fit_mple_pairs",
    "fit_mple",
    "MpleResult",
    "nested_eval",
    "nested_clayton_eval",
    "copula_ps_weights",
    "fit_assessment",
    "FitAssessment",
]

KINDS = ("clayton", "gumbel", "frank")
INDEPENDENCE = {"clayton": 0.0, "gumbel": 1.0, "frank": 0.0}


class CopulaValue(NamedTuple):
    value: np.ndarray
    d_u1: np.ndarray
    d_u2: np.ndarray
    density: np.ndarray


@dataclass(frozen=True)
class CopulaFamily:
    kind: str
    varsigma: float

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown copula {self.kind!r}; use one of {KINDS}")
        s = self.varsigma
        if not math.isfinite(s):
            raise ValueError("copula parameter must be finite")
        if kind == "clayton" and s < 0:
            raise ValueError("Clayton parameter must be >= 0 (0 is independence)")
        if kind == "gumbel" and s < 1:
            raise ValueError("Gumbel parameter must be >= 1 (1 is independence)")

    @property
    def is_independence(self) -> bool:
        return self.varsigma == INDEPENDENCE[self.kind]


def _check_unit(*us):
    for u in us:
        u = np.asarray(u)
        if np.any(~(u > 0)) or np.any(u > 1):
            raise ValueError("copula arguments must lie in (0, 1]")


def _independence(u1, u2):
    return CopulaValue(u1 * u2, u2 * np.ones_like(u1), u1 * np.ones_like(u2),
                       np.ones_like(u1 * u2))


def _clayton(u1, u2, s):
    l1 = np.log(u1)
    l2 = np.log(u2)
    a1 = -s * l1
    a2 = -s * l2
    # lb = log(u1^-s + u2^-s - 1), kept finite for strong dependence
    with np.errstate(over="ignore"):
        m = np.logaddexp(a1, a2)
        lb = np.where(m > 1.0, m + np.log1p(-np.exp(-m)),
                      np.log1p(np.expm1(np.minimum(a1, 1.0)) + np.expm1(np.minimum(a2, 1.0))))
    value = np.exp(-lb / s)
    d1 = np.exp((-s - 1) * l1 - (1 / s + 1) * lb)
    d2 = np.exp((-s - 1) * l2 - (1 / s + 1) * lb)
    dens = (1 + s) * np.exp((-s - 1) * (l1 + l2) - (1 / s + 2) * lb)
    return CopulaValue(value, d1, d2, dens)


def _gumbel(u1, u2, s):
    x = -np.log(u1)
    y = -np.log(u2)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (x**s + y**s) ** (1 / s)
        value = np.exp(-a)
        xs = np.where(x > 0, x ** (s - 1), 1.0 if s == 1 else 0.0)
        ys = np.where(y > 0, y ** (s - 1), 1.0 if s == 1 else 0.0)
        a_pow = np.where(a > 0, a ** (1 - s), 1.0 if s == 1 else 0.0)
        d1 = value * xs * a_pow / u1
        d2 = value * ys * a_pow / u2
        a_pow2 = np.where(a > 0, a ** (1 - 2 * s), 1.0 if s == 1 else np.inf)
        dens = value * xs * ys * a_pow2 * (a + s - 1) / (u1 * u2)
    dens = np.where(np.isfinite(dens), dens, 0.0)
    return CopulaValue(value, d1, d2, dens)


def _frank(u1, u2, s):
    e1 = np.exp(-s * u1)
    e2 = np.exp(-s * u2)
    b = np.expm1(-s * u2)
    k = np.expm1(-s)
    # -(k + ab) written as two same-signed terms, so no cancellation
    d = -e1 * b - e2 * np.expm1(-s * (1 - u2))
    value = -(np.log(d / -k)) / s
    d1 = -e1 * b / d
    d2 = -e2 * np.expm1(-s * u1) / d
    dens = -s * k * e1 * e2 / d**2
    return CopulaValue(value, d1, d2, dens)


_IMPL = {"clayton": _clayton, "gumbel": _gumbel, "frank": _frank}


def copula_eval(fam: CopulaFamily, u1, u2, check: bool = True) -> CopulaValue:
    """C(u1, u2) with dC/du1, dC/du2 and the density d2C/du1du2."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    if check:
        _check_unit(u1, u2)
    if fam.is_independence:
        out = _independence(u1, u2)
    else:
        out = _IMPL[fam.kind](u1, u2, fam.varsigma)
    if out.value.ndim == 0:
        return CopulaValue(*(float(x) for x in out))
    return out


# Kendall's tau -------------------------------------------------------------

def _debye1(s: float) -> float:
    if s == 0:
        return 1.0
    integrand = lambda t: t / math.expm1(t) if t != 0 else 1.0
    val, _ = integrate.quad(integrand, 0.0, s, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val / s


def kendall_tau(fam: CopulaFamily) -> float:
    s = fam.varsigma
    if fam.kind == "clayton":
        return s / (2 + s)
    if fam.kind == "gumbel":
        return 1 - 1 / s
    if s == 0:
        return 0.0
    return 1 + 4 * (_debye1(s) - 1) / s


def tau_to_varsigma(kind: str, tau: float) -> float:
    kind = kind.lower()
    if kind == "clayton":
        if not 0 <= tau < 1:
            raise ValueError("Clayton reaches tau in [0, 1)")
        return 2 * tau / (1 - tau)
    if kind == "gumbel":
        if not 0 <= tau < 1:
            raise ValueError("Gumbel reaches tau in [0, 1)")
        return 1 / (1 - tau)
    if kind == "frank":
        if not -1 < tau < 1:
            raise ValueError("Frank reaches tau in (-1, 1)")
        if tau == 0:
            return 0.0
        f = lambda s: kendall_tau(CopulaFamily("frank", s)) - tau
        hi = 1.0
        while f(math.copysign(hi, tau)) * math.copysign(1, tau) < 0:
            hi *= 2
            if hi > 1e6:
                raise ValueError("tau too close to +-1 for Frank")
        lo_b, hi_b = (1e-12, hi) if tau > 0 else (-hi, -1e-12)
        return optimize.brentq(f, lo_b, hi_b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    raise ValueError(f"unknown copula {kind!r}")


# pseudo-likelihood -----------------------------------------------------------

def pseudo_observations(e, delta1, y, delta2, groups=None):
    """Survival-scale pseudo-observations from Kaplan-Meier marginals.

    Values are clamped to [1/(2n), 1]. ``groups`` (e.g. arm) fits separate
    marginals within each group.
    """
    e = np.asarray(e, dtype=float)
    y = np.asarray(y, dtype=float)
    d1 = np.asarray(delta1, dtype=bool)
    d2 = np.asarray(delta2, dtype=bool)
    n = e.size
    if np.any(d2 & ~d1):
        raise DataError("death observed while the first event is censored")
    u1 = np.empty(n)
    u2 = np.empty(n)
    labels = np.zeros(n, dtype=int) if groups is None else np.asarray(groups)
    for g in np.unique(labels):
        sel = labels == g
        u1[sel] = km_survival(e[sel], d1[sel])(e[sel])
        u2[sel] = km_survival(y[sel], d2[sel])(y[sel])
    eps = 1.0 / (2 * n)
    return np.clip(u1, eps, 1.0), np.clip(u2, eps, 1.0), d1, d2


def pseudo_loglik(fam: CopulaFamily, u1, u2, d1, d2) -> float:
    """Censored pseudo-log-likelihood: density, partials or C by censoring pattern."""
    cv = copula_eval(fam, u1, u2, check=False)
    both = d1 & d2
    only1 = d1 & ~d2
    only2 = ~d1 & d2
    none = ~d1 & ~d2
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = (np.log(cv.density[both]).sum() + np.log(cv.d_u1[only1]).sum()
                 + np.log(cv.d_u2[only2]).sum() + np.log(cv.value[none]).sum())
    return float(terms) if np.isfinite(terms) else -np.inf


@dataclass(frozen=True)
class MpleResult:
    kind: str
    varsigma: float
    loglik: float
    at_boundary: bool
    se: float | None = None
    bootstrap: int = 0
    diagnostic: str = ""

    @property
    def family(self) -> CopulaFamily:
        return CopulaFamily(self.kind, self.varsigma)

    @property
    def tau(self) -> float:
        return kendall_tau(self.family)

    def to_dict(self) -> dict:
        return {"family": self.kind, "varsigma0": self.varsigma, "kendall_tau": self.tau,
                "log_pl": self.loglik, "se": self.se, "bootstrap": self.bootstrap,
                "at_boundary": self.at_boundary, "diagnostic": self.diagnostic}


# search ranges on the optimization scale
_LOG_LO, _LOG_HI = math.log(1e-6), math.log(100.0)
_FRANK_BOUND = 100.0


def _to_param(kind, x):
    if kind == "clayton":
        return math.exp(x)
    if kind == "gumbel":
        return 1.0 + math.exp(x)
    return x


def fit_mple_pairs(kind: str, u1, u2, d1, d2, xtol: float = 1e-8) -> MpleResult:
    """Maximize the pseudo-likelihood over the admissible parameter range."""
    kind = kind.lower()
    if kind not in KINDS:
        raise ValueError(f"unknown copula {kind!r}")
    u1 = np.asarray(u1, float)
    u2 = np.asarray(u2, float)
    d1 = np.asarray(d1, bool)
    d2 = np.asarray(d2, bool)
    if u1.size < 2:
        raise DataError("at least two subjects are needed")
    if not (d1 | d2).any():
        raise DataError("no observed event or death: the likelihood carries no dependence information")

    def nll(x):
        return -pseudo_loglik(CopulaFamily(kind, _to_param(kind, x)), u1, u2, d1, d2)

    lo, hi = (-_FRANK_BOUND, _FRANK_BOUND) if kind == "frank" else (_LOG_LO, _LOG_HI)
    if kind == "frank":
        # split at independence so the bounded search sees a smooth objective on each side
        cands = [optimize.minimize_scalar(nll, bounds=b, method="bounded",
                                          options={"xatol": xtol, "maxiter": 500})
                 for b in ((lo, -1e-9), (1e-9, hi))]
        res = min(cands, key=lambda r: r.fun)
    else:
        res = optimize.minimize_scalar(nll, bounds=(lo, hi), method="bounded",
                                       options={"xatol": xtol, "maxiter": 500})
    x = float(res.x)
    width = hi - lo
    boundary = (x - lo) < 1e-4 * width or (hi - x) < 1e-4 * width
    diag = ""
    if boundary:
        diag = ("optimum on the boundary of the search range; the pseudo-likelihood is flat "
                "or the dependence is not identified")
    param = _to_param(kind, x)
    if kind != "frank" and (x - lo) < 1e-4 * width:
        # the lower edge is the independence limit
        param = INDEPENDENCE[kind] if nll(lo) >= nll(x) - 1e-12 else param
    return MpleResult(kind, param, -float(res.fun), boundary, diagnostic=diag)


def _dataset_pairs(ds: Dataset):
    has = ds.has_event
    e = np.where(has, ds.event_time, ds.followup)
    d1 = has | ds.died
    return e, d1, ds.followup.copy(), ds.died.copy()


def _mple_boot_one(r, ds, kind, seed, per_arm):
    rng = stream(seed, r)
    idx = rng.integers(0, len(ds), size=len(ds))
    sample = ds.subset(idx, ids=[f"b{k}" for k in range(len(ds))])
    try:
        return fit_mple(sample, kind, per_arm=per_arm).varsigma
    except (DataError, ValueError, ArithmeticError):
        return None


def fit_mple(ds: Dataset, kind: str, per_arm: bool = False, bootstrap: int = 0,
             seed: int = 0, workers: int = 1) -> MpleResult:
    """Pseudo-likelihood fit of the first-event/death copula on a trial dataset.

    The first event is E = min(T, Y): observed when either the non-fatal
    event or death is observed. Marginals are Kaplan-Meier, pooled over arms
    unless ``per_arm``. ``bootstrap`` > 0 adds a resampling standard error.
    """
    e, d1, y, d2 = _dataset_pairs(ds)
    u1, u2, d1, d2 = pseudo_observations(e, d1, y, d2, ds.arm if per_arm else None)
    res = fit_mple_pairs(kind, u1, u2, d1, d2)
    if bootstrap:
        from functools import partial
        job = partial(_mple_boot_one, ds=ds, kind=kind, seed=seed, per_arm=per_arm)
        vals = [v for v in run_indexed(job, list(range(bootstrap)), workers) if v is not None]
        se = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
        res = MpleResult(res.kind, res.varsigma, res.loglik, res.at_boundary, se, len(vals),
                         res.diagnostic)
    return res


# nested copulas ------------------------------------------------------------

@dataclass(frozen=True)
class NestedCopula:
    """C(u1, C(u2, u3; s1); s0) within one Archimedean family, s0 <= s1."""
    varsigma0: float
    varsigma1: float
    kind: str = "clayton"

    def __post_init__(self):
        CopulaFamily(self.kind, self.varsigma0)
        CopulaFamily(self.kind, self.varsigma1)
        if self.kind.lower() == "frank" and (self.varsigma0 < 0 or self.varsigma1 < 0):
            raise ValueError("nested Frank requires non-negative parameters")
        if self.varsigma0 > self.varsigma1:
            raise ValueError("nesting requires varsigma0 <= varsigma1")

    @property
    def outer(self) -> CopulaFamily:
        return CopulaFamily(self.kind, self.varsigma0)

    @property
    def inner(self) -> CopulaFamily:
        return CopulaFamily(self.kind, self.varsigma1)


def NestedClayton(varsigma0: float, varsigma1: float) -> NestedCopula:
    return NestedCopula(varsigma0, varsigma1, "clayton")


class NestedValue(NamedTuple):
    value: np.ndarray
    d_u1: np.ndarray
    d_u2: np.ndarray
    d_u1u2: np.ndarray


def nested_eval(nc: NestedCopula, u1, u2, u3, check: bool = True) -> NestedValue:
    """Trivariate value with partials in u1, u2 and the mixed u1-u2 partial."""
    u1, u2, u3 = (np.asarray(u, dtype=float) for u in (u1, u2, u3))
    if check:
        _check_unit(u1, u2, u3)
    inner = copula_eval(nc.inner, u2, u3, check=False)
    v = np.asarray(inner.value)
    outer = copula_eval(nc.outer, u1, v, check=False)
    out = NestedValue(outer.value, outer.d_u1, np.asarray(outer.d_u2) * inner.d_u1,
                      np.asarray(outer.density) * inner.d_u1)
    if np.ndim(out.value) == 0:
        return NestedValue(*(float(x) for x in out))
    return out


def nested_clayton_eval(nc: NestedCopula, u1, u2, u3, check: bool = True) -> NestedValue:
    if nc.kind != "clayton":
        raise ValueError("expected a nested Clayton copula")
    return nested_eval(nc, u1, u2, u3, check)


# principal stratum probabilities --------------------------------------------

def copula_ps_weights(ds: Dataset, nc: NestedCopula, per_arm: bool = False,
                      evaluation: str = "left") -> PsWeightTable:
    """Principal stratum probabilities from a nested copula.

    For subject i at risk at t_j with arm z: u1 = S_E(t_j), u2 = S_Y(d_i),
    u3 = S_Y^{1-z}(t_j). The probability is the ratio of the trivariate to
    the bivariate quantity matching the subject's pattern: died/censored at
    d_i crossed with event at t_j / no event by t_j.
    """
    if evaluation not in ("left", "right"):
        raise ValueError("evaluation must be 'left' or 'right'")
    ds.require_both_arms()
    times, at_risk, case, order, row = PsWeightTable.skeleton(ds)
    e, d1, y, d2 = _dataset_pairs(ds)
    n = len(ds)
    eps = 1.0 / (2 * n)
    read = (lambda f, t: f.left_limit(t)) if evaluation == "left" else (lambda f, t: f(t))

    groups = ds.arm if per_arm else np.zeros(n, dtype=int)
    u1 = np.empty((times.size, n))
    u2 = np.empty(n)
    for g in np.unique(groups):
        sel = groups == g
        se_curve = km_survival(e[sel], d1[sel])
        sy_curve = km_survival(y[sel], d2[sel])
        u1[:, sel] = read(se_curve, times)[:, None]
        u2[sel] = sy_curve(y[sel])
    death_arm = [km_survival(y[ds.arm == z], d2[ds.arm == z]) for z in (0, 1)]
    u3_arm = np.stack([read(death_arm[z], times) for z in (0, 1)])   # (2, m_d)
    u3 = u3_arm[1 - ds.arm].T
    # u1 = 1 leaves d/du1 as 0/0 for generators flat at 1 (gumbel)
    u1 = np.clip(u1, eps, 1.0 - eps)
    u2 = np.broadcast_to(np.clip(u2, eps, 1.0), u1.shape)
    u3 = np.clip(u3, eps, 1.0)

    tri = nested_eval(nc, u1, u2, u3, check=False)
    bi = copula_eval(nc.outer, u1, u2, check=False)
    died = np.broadcast_to(ds.died, u1.shape)
    ev_now = case == 1
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.select(
            [died & ev_now, died & ~ev_now, ~died & ev_now],
            [tri.d_u1u2 / bi.density, tri.d_u2 / bi.d_u2, tri.d_u1 / bi.d_u1],
            tri.value / bi.value)
    bad = at_risk & ~np.isfinite(ratio)
    if bad.any():
        raise ArithmeticError("copula ratio is undefined for some at-risk subjects")
    weights = np.where(at_risk, np.clip(ratio, 0.0, 1.0), 0.0)
    return PsWeightTable(ds.ids, times, weights, at_risk, case, order, row)


# fit assessment ------------------------------------------------------------

@dataclass(frozen=True)
class FitAssessment:
    family: CopulaFamily
    ids: tuple
    e: np.ndarray
    y: np.ndarray
    empirical: np.ndarray
    implied: np.ndarray = field(repr=False)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "e_i", "y_i", "empirical_joint", "copula_joint"])
            for row in zip(self.ids, self.e, self.y, self.empirical, self.implied):
                w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.implied - self.empirical)))


def fit_assessment(ds: Dataset, fam: CopulaFamily) -> FitAssessment:
    """Empirical versus copula-implied joint survival P(E > e_i, Y > y_i)
    for subjects with both the non-fatal event and death observed."""
    sub = np.flatnonzero(ds.has_event & ds.died)
    if sub.size == 0:
        raise DataError("no subject has both a non-fatal event and death observed")
    e_all, _, y_all, _ = _dataset_pairs(ds)
    n = len(ds)
    e_i = e_all[sub]
    y_i = y_all[sub]
    gt_e = e_all[None, :] > e_i[:, None]
    gt_y = y_all[None, :] > y_i[:, None]
    emp = (gt_e & gt_y).mean(axis=1)
    eps = 1.0 / (2 * n)
    ue = np.clip(gt_e.mean(axis=1), eps, 1.0)
    uy = np.clip(gt_y.mean(axis=1), eps, 1.0)
    implied = np.asarray(copula_eval(fam, ue, uy).value)
    return FitAssessment(fam, tuple(ds.ids[k] for k in sub), e_i, y_i, emp, implied)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")

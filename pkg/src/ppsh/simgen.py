"""Monte Carlo generator with a known marginal principal stratum hazard ratio.

Each subject gets a frailty theta. Death under arm z is exponential with
rate theta * lambda_z, loss to follow-up is exponential with rate
lambda_c, and follow-up stops at tau. The first non-fatal event solves
theta * eta_z(T) = -log U, with eta_0(t) = phi * t and eta_1 chosen so the
marginal principal stratum hazards are proportional with ratio r_ps
(exactly so for gamma frailty).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from ._parallel import run_indexed, stream
from .frailty import build_ps_weights
from .model import FitError, fit_cause_specific, fit_ppsh
from .estimators import fit_cox_death
from .survdata import DataError, Dataset

__all__ = [
    "SimConfig",
    "ConfigError",
    "ReplicationReport",
    "sample_frailty",
    "eta1_T",
    "eta_T",
    "invert_eta",
    "simulate_trial",
    "arm_summary",
    "replicate",
]

FRAILTY_FAMILIES = ("gamma", "inverse-gaussian")
BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    lambda0: float = 0.25
    lambda1: float = 0.2
    lambda_c: float = 0.03
    tau: float = 2.0
    phi: float = 2.0
    r_ps: float = 0.5
    gamma: float = 0.5
    frailty_family: str = "gamma"
    n: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.frailty_family in ("ig", "invgauss", "inverse_gaussian"):
            object.__setattr__(self, "frailty_family", "inverse-gaussian")
        for name in ("lambda0", "lambda1", "lambda_c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("tau", "phi", "r_ps", "gamma"):
            v = getattr(self, name)
            if not (v > 0) or math.isnan(v):
                raise ConfigError(f"{name} must be > 0, got {v!r}")
        if self.frailty_family not in FRAILTY_FAMILIES:
            raise ConfigError(f"frailty_family must be one of {FRAILTY_FAMILIES}")
        if int(self.n) != self.n or self.n < 2 or self.n % 2:
            raise ConfigError(f"n must be an even integer >= 2, got {self.n!r}")
        if self.r_ps != 1 and abs(self.lambda_Y - self.phi * (self.r_ps - 1)) <= 1e-12 * max(self.lambda_Y, self.phi * abs(self.r_ps - 1)):
            raise ConfigError(
                "r_ps must differ from 1 + (lambda0 + lambda1) / phi: "
                "lambda0 + lambda1 - phi * (r_ps - 1) vanishes")

    @property
    def lambda_Y(self) -> float:
        return self.lambda0 + self.lambda1

    def hypothetical(self) -> "SimConfig":
        """Same design with no mortality."""
        return replace(self, lambda0=0.0, lambda1=0.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# frailty -----------------------------------------------------------------

def sample_frailty(family: str, gamma: float, rng: np.random.Generator, size=None):
    """Positive frailty with mean 1 and variance 1/gamma."""
    if not gamma > 0:
        raise ConfigError("gamma must be > 0")
    if family == "gamma":
        return rng.gamma(gamma, 1.0 / gamma, size)
    if family in ("inverse-gaussian", "ig"):
        # Michael-Schucany-Haas with mean 1 and shape gamma
        y = rng.standard_normal(size) ** 2
        u = rng.random(size)
        x = 1.0 + y / (2 * gamma) - np.sqrt(4 * gamma * y + y * y) / (2 * gamma)
        # guard the cancellation for very large shape
        x = np.maximum(x, np.finfo(float).tiny)
        out = np.where(u <= 1.0 / (1.0 + x), x, 1.0 / x)
        return out if np.ndim(out) else float(out)
    raise ConfigError(f"unknown frailty family {family!r}")


# cumulative hazards --------------------------------------------------------

def eta1_T(t, config: SimConfig):
    """Treatment-arm conditional cumulative event hazard at unit frailty."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    phi, r, g, lam = config.phi, config.r_ps, config.gamma, config.lambda_Y
    if r == 1:
        out = phi * t
        return out if out.ndim else float(out)
    den = lam - phi * (r - 1)
    if den == 0:
        raise ConfigError("lambda0 + lambda1 - phi * (r_ps - 1) must be non-zero")
    a = r * phi / (phi + lam)
    grow = np.expm1(a * np.log1p((phi + lam) * t / g))
    out = phi / den * ((1 - r) * g * grow + lam * r * t)
    return out if out.ndim else float(out)


def eta_T(arm: int, t, config: SimConfig):
    if arm == 0:
        out = config.phi * np.asarray(t, dtype=float)
        return out if out.ndim else float(out)
    return eta1_T(t, config)


def _invert_eta1(target: np.ndarray, config: SimConfig, hi=None) -> np.ndarray:
    target = np.asarray(target, dtype=float)
    lo = np.zeros_like(target)
    if hi is None:
        hi = np.maximum(target / config.phi, 1e-12)
        for _ in range(2000):
            short = eta1_T(hi, config) < target
            if not short.any():
                break
            hi = np.where(short, hi * 2, hi)
    else:
        hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    for _ in range(BISECT_MAX_ITER):
        if np.all(hi - lo <= BISECT_TOL):
            break
        mid = 0.5 * (lo + hi)
        below = eta1_T(mid, config) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return np.where(target <= 0, 0.0, 0.5 * (lo + hi))


def invert_eta(arm: int, target, config: SimConfig):
    """Time t with eta_arm(t) = target (bisection on a doubling bracket for arm 1)."""
    target = np.asarray(target, dtype=float)
    if np.any(target < 0):
        raise ValueError("target must be >= 0")
    if arm == 0:
        out = target / config.phi
    else:
        out = _invert_eta1(target, config)
    return out if out.ndim else float(out)


# simulation ----------------------------------------------------------------

def simulate_trial(config: SimConfig, rng: np.random.Generator | None = None) -> Dataset:
    """One simulated trial; the first n/2 subjects are placebo.

    Without ``rng`` the draws come from the stream keyed by ``config.seed``.
    """
    if rng is None:
        rng = stream(config.seed, 0)
    n = int(config.n)
    arm = np.repeat([0, 1], n // 2)
    theta = sample_frailty(config.frailty_family, config.gamma, rng, n)
    e_death = rng.standard_exponential(n)
    e_cens = rng.standard_exponential(n)
    u = rng.random(n)
    rate = theta * np.where(arm == 0, config.lambda0, config.lambda1)
    with np.errstate(divide="ignore"):
        y = np.where(rate > 0, e_death / np.where(rate > 0, rate, 1.0), np.inf)
        c = e_cens / config.lambda_c if config.lambda_c > 0 else np.full(n, np.inf)
    d = np.minimum(np.minimum(y, c), config.tau)
    died = y <= np.minimum(c, config.tau)
    target = -np.log(u) / theta
    event = np.full(n, np.nan)
    # event iff eta_z(T) <= eta_z(D), i.e. T <= D
    p0 = (arm == 0) & (target <= config.phi * d)
    event[p0] = target[p0] / config.phi
    a1 = np.flatnonzero(arm == 1)
    reach = eta1_T(d[a1], config) >= target[a1]
    k = a1[reach]
    if k.size:
        event[k] = np.minimum(_invert_eta1(target[k], config, hi=d[k]), d[k])
    return Dataset([str(i + 1) for i in range(n)], arm, d, event, died, check=False)


def arm_summary(ds: Dataset, tau: float) -> dict:
    """Per-arm percentages of death, administrative censoring, loss to
    follow-up and non-fatal events, plus mean follow-up."""
    out = {}
    for z, name in ((0, "placebo"), (1, "treatment")):
        sel = ds.arm == z
        died = ds.died[sel]
        fu = ds.followup[sel]
        admin = ~died & (fu >= tau)
        out[name] = {
            "dead": 100.0 * died.mean(),
            "censored": 100.0 * admin.mean(),
            "lof": 100.0 * (~died & ~admin).mean(),
            "mean_followup": float(fu.mean()),
            "event": 100.0 * ds.has_event[sel].mean(),
        }
    return out


# replication harness -------------------------------------------------------

@dataclass
class ReplicationReport:
    config: SimConfig
    replicates: int
    gamma_tilde: tuple[float, ...]
    reference: float
    reference_kind: str
    arms: dict
    methods: list[dict]
    estimates: dict = field(default_factory=dict, repr=False)

    def method(self, name: str, gamma_tilde: float | None = None) -> dict:
        for row in self.methods:
            if row["method"] == name and (gamma_tilde is None or row["gamma_tilde"] == gamma_tilde):
                return row
        raise KeyError((name, gamma_tilde))

    def to_dict(self, include_estimates: bool = False) -> dict:
        d = {
            "config": self.config.to_dict(),
            "replicates": self.replicates,
            "gamma_tilde": list(self.gamma_tilde),
            "reference": self.reference,
            "reference_kind": self.reference_kind,
            "arms": self.arms,
            "methods": self.methods,
        }
        if include_estimates:
            d["estimates"] = {k: [None if math.isnan(x) else x for x in v.tolist()]
                              for k, v in self.estimates.items()}
        return d

    def write_json(self, path, include_estimates: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_estimates), indent=2) + "\n")

    CSV_COLUMNS = ("gamma", "lambda0", "frailty", "method", "gamma_tilde",
                   "estimate", "bias", "se", "hr", "converged", "failed")

    def csv_rows(self) -> list[dict]:
        rows = []
        for m in self.methods:
            rows.append({
                "gamma": self.config.gamma,
                "lambda0": self.config.lambda0,
                "frailty": self.config.frailty_family,
                "method": m["method"],
                "gamma_tilde": "" if m["gamma_tilde"] is None else m["gamma_tilde"],
                "estimate": m["mean"],
                "bias": m["bias"],
                "se": m["se"],
                "hr": m["hr"],
                "converged": m["converged"],
                "failed": m["failed"],
            })
        return rows

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.csv_rows():
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _safe_beta(fn):
    try:
        fit = fn()
    except (FitError, DataError, ValueError, ArithmeticError):
        return math.nan
    return float(fit.beta[0]) if fit.converged else math.nan


def _one_replicate(r: int, config: SimConfig, gamma_tilde, seed: int):
    ds = simulate_trial(config, stream(seed, r, 0))
    hyp = simulate_trial(config.hypothetical(), stream(seed, r, 1))
    est = {"hypothetical": _safe_beta(lambda: fit_cause_specific(hyp)),
           "cause-specific": _safe_beta(lambda: fit_cause_specific(ds))}
    try:
        death = fit_cox_death(ds, use_covariates=False) if ds.died.any() else None
    except (DataError, ArithmeticError):
        death = None
    for g in gamma_tilde:
        est[f"ppsh:{g!r}"] = _safe_beta(lambda: fit_ppsh(ds, build_ps_weights(ds, g, death_fit=death)))
    return est, arm_summary(ds, config.tau)


def _summarize(values: np.ndarray, reference: float) -> dict:
    ok = values[~np.isnan(values)]
    mean = float(ok.mean()) if ok.size else math.nan
    sd = float(ok.std(ddof=1)) if ok.size > 1 else math.nan
    return {
        "mean": mean,
        "sd": sd,
        "se": sd / math.sqrt(ok.size) if ok.size > 1 else math.nan,
        "bias": mean - reference,
        "hr": math.exp(mean) if ok.size else math.nan,
        "converged": int(ok.size),
        "failed": int(values.size - ok.size),
    }


def replicate(config: SimConfig, R: int, gamma_tilde=(0.5, 2.0, 5.0), seed: int | None = None,
              workers: int = 1) -> ReplicationReport:
    """Run R independent simulated trials and summarize each estimator.

    Methods: Cox on a separately generated no-mortality trial
    ("hypothetical"), cause-specific Cox, and the PPSH fit at every
    ``gamma_tilde``. Bias is measured against log r_ps under gamma frailty
    and against the mean hypothetical estimate otherwise.
    """
    if R < 2:
        raise ValueError("R must be >= 2")
    seed = config.seed if seed is None else seed
    gamma_tilde = tuple(float(g) for g in gamma_tilde)
    job = partial(_one_replicate, config=config, gamma_tilde=gamma_tilde, seed=seed)
    results = run_indexed(job, list(range(R)), workers)

    keys = ["hypothetical", "cause-specific"] + [f"ppsh:{g!r}" for g in gamma_tilde]
    est = {k: np.array([res[0][k] for res in results]) for k in keys}
    arms = {}
    for name in ("placebo", "treatment"):
        fields_ = results[0][1][name].keys()
        arms[name] = {f: float(np.mean([res[1][name][f] for res in results])) for f in fields_}

    log_r = math.log(config.r_ps)
    if config.frailty_family == "gamma":
        reference, kind = log_r, "log_r_ps"
    else:
        hyp = est["hypothetical"]
        reference, kind = float(np.nanmean(hyp)), "hypothetical_mean"

    methods = []
    row = _summarize(est["hypothetical"], log_r)
    methods.append({"method": "hypothetical", "gamma_tilde": None, **row})
    row = _summarize(est["cause-specific"], reference)
    methods.append({"method": "cause-specific", "gamma_tilde": None, **row})
    for g in gamma_tilde:
        row = _summarize(est[f"ppsh:{g!r}"], reference)
        methods.append({"method": "ppsh", "gamma_tilde": g, **row})
    return ReplicationReport(config, R, gamma_tilde, reference, kind, arms, methods, est)

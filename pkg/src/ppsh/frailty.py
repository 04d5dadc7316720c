"""Gamma-frailty principal stratum probabilities.

Marginal survival curves are mapped to conditional cumulative hazards at
unit frailty, and those give each at-risk subject's probability of
belonging to the always-survivor stratum at every event time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimators import StepFunction, event_free_survival, fit_cox_death
from .survdata import Dataset, at_risk_matrix

__all__ = [
    "DEFAULT_GAMMA_GRID",
    "FrailtyGamma",
    "ConditionalHazards",
    "PsWeightTable",
    "eta_death",
    "eta_event",
    "ps_probability",
    "conditional_hazards",
    "build_ps_weights",
]

DEFAULT_GAMMA_GRID = (0.25, 0.5, 1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class FrailtyGamma:
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma!r}")


def _check_gamma(gamma):
    FrailtyGamma(float(gamma))


def _survival_to_eta(S, scale, gamma):
    S = np.asarray(S, dtype=float)
    if np.any(S > 1):
        raise ValueError("survival value exceeds 1")
    with np.errstate(divide="ignore", invalid="ignore"):
        # gamma * (S^(-1/gamma) - 1) without cancellation for large gamma
        out = scale * np.expm1(-np.log(S) / gamma)
    out = np.where(S <= 0, np.inf, out)
    return out if out.ndim else float(out)


def eta_death(S, gamma):
    """Conditional cumulative death hazard at unit frailty from S_Y."""
    _check_gamma(gamma)
    return _survival_to_eta(S, gamma, gamma)


def eta_event(S_cond, eta_Y_same_arm, gamma):
    """Conditional cumulative event hazard at unit frailty.

    ``S_cond`` is the event-free survival among those alive at t and
    ``eta_Y_same_arm`` the same arm's conditional death hazard.
    """
    _check_gamma(gamma)
    eta_Y = np.asarray(eta_Y_same_arm, dtype=float)
    if np.any(eta_Y < 0):
        raise ValueError("eta_Y must be >= 0")
    return _survival_to_eta(S_cond, gamma + eta_Y, gamma)


def ps_probability(case, eta_T_own_arm, eta_Y_counterfactual, gamma):
    """Probability of surviving past t_j under the other arm.

    Case 1 (event at t_j) uses exponent gamma + 1, case 2 (no event by t_j)
    exponent gamma.
    """
    _check_gamma(gamma)
    case = np.asarray(case)
    if not np.all(np.isin(case, (1, 2))):
        raise ValueError("case must be 1 or 2")
    eT = np.asarray(eta_T_own_arm, dtype=float)
    eY = np.asarray(eta_Y_counterfactual, dtype=float)
    if np.any(eT < 0) or np.any(eY < 0):
        raise ValueError("cumulative hazards must be >= 0")
    power = np.where(case == 1, gamma + 1.0, gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = eY / (gamma + eY + eT)
        p = np.exp(power * np.log1p(-ratio))
    p = np.where(np.isinf(eY), 0.0, np.where(np.isinf(eT), 1.0, p))
    p = np.where(eY == 0, 1.0, p)
    p = np.clip(p, 0.0, 1.0)
    return p if p.ndim else float(p)


@dataclass(frozen=True)
class ConditionalHazards:
    eta_Y: tuple[StepFunction, StepFunction]
    eta_T: tuple[StepFunction, StepFunction]
    gamma: float


def _on_common_knots(f: StepFunction, g: StepFunction):
    knots = np.union1d(f.knots, g.knots)
    return knots, f(knots), g(knots)


def conditional_hazards(ds: Dataset, gamma: float, death_fit=None) -> ConditionalHazards:
    """Steps 1-2: marginal curves per arm mapped to unit-frailty hazards."""
    _check_gamma(gamma)
    ds.require_both_arms()
    if death_fit is None and ds.died.any():
        death_fit = fit_cox_death(ds, use_covariates=False)
    eta_Y, eta_T = [], []
    for z in (0, 1):
        sy = death_fit.survival_curve(z) if death_fit is not None else StepFunction([], [], 1.0)
        st = event_free_survival(ds, z)
        ey = sy.map(lambda s: eta_death(s, gamma))
        knots, ey_vals, st_vals = _on_common_knots(ey, st)
        eta_Y.append(ey)
        eta_T.append(StepFunction(knots, eta_event(st_vals, ey_vals, gamma), 0.0))
    return ConditionalHazards(tuple(eta_Y), tuple(eta_T), float(gamma))


class PsWeightTable:
    """Principal stratum probabilities p_ij on every risk set.

    Attributes
    ----------
    times : (m_d,) distinct event times t_j.
    weights : (m_d, n) p_ij, zero for subjects outside the risk set.
    at_risk : (m_d, n) risk-set membership.
    case : (m_d, n) int, 1 for T_i = t_j, 2 for later or no event, 0 outside.
    event_subject : (m,) subject index of each observed event (sorted by time).
    event_row : (m,) index into ``times`` for each event.
    """

    def __init__(self, ids, times, weights, at_risk, case, event_subject, event_row):
        self.ids = tuple(ids)
        self.times = np.asarray(times, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.at_risk = np.asarray(at_risk, dtype=bool)
        self.case = np.asarray(case, dtype=np.int8)
        self.event_subject = np.asarray(event_subject, dtype=np.int64)
        self.event_row = np.asarray(event_row, dtype=np.int64)
        if np.any((self.weights < 0) | (self.weights > 1)):
            raise ValueError("principal stratum probabilities must lie in [0, 1]")

    def __len__(self) -> int:
        return self.event_subject.size

    @property
    def event_weights(self) -> np.ndarray:
        """p_(j)j for each event term."""
        return self.weights[self.event_row, self.event_subject]

    def for_event(self, k: int) -> dict[str, float]:
        """Subject id -> p_ij over the risk set of event term ``k``."""
        row = self.event_row[k]
        idx = np.flatnonzero(self.at_risk[row])
        return {self.ids[i]: float(self.weights[row, i]) for i in idx}

    def scaled(self, factor) -> "PsWeightTable":
        """Copy with row j multiplied by ``factor[j]``."""
        w = self.weights * np.asarray(factor, dtype=float).reshape(-1, 1)
        return PsWeightTable(self.ids, self.times, w, self.at_risk, self.case,
                             self.event_subject, self.event_row)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_index", "t_j", "subject_id", "case", "p_ij"])
            for k in range(len(self)):
                row = self.event_row[k]
                for i in np.flatnonzero(self.at_risk[row]):
                    w.writerow([k + 1, repr(float(self.times[row])), self.ids[i],
                                int(self.case[row, i]), repr(float(self.weights[row, i]))])

    @classmethod
    def skeleton(cls, ds: Dataset):
        """Risk sets, cases and event indexing shared by every weighting scheme."""
        has = ds.has_event
        ev_idx = np.flatnonzero(has)
        if ev_idx.size == 0:
            raise ValueError("no events to fit")
        order = ev_idx[np.argsort(ds.event_time[ev_idx], kind="stable")]
        times, row = np.unique(ds.event_time[order], return_inverse=True)
        at_risk = at_risk_matrix(ds, times)
        with np.errstate(invalid="ignore"):
            is_case1 = ds.event_time[None, :] == times[:, None]
        case = np.where(at_risk, np.where(is_case1, 1, 2), 0).astype(np.int8)
        return times, at_risk, case, order, row

    @classmethod
    def uniform(cls, ds: Dataset) -> "PsWeightTable":
        """All p_ij = 1: the cause-specific (plain Cox) weighting."""
        times, at_risk, case, order, row = cls.skeleton(ds)
        return cls(ds.ids, times, at_risk.astype(float), at_risk, case, order, row)


def build_ps_weights(ds: Dataset, gamma: float, evaluation: str = "left",
                     death_fit=None) -> PsWeightTable:
    """Gamma-frailty principal stratum probabilities at every event time.

    ``evaluation="left"`` reads the marginal curves just before t_j so the
    events at t_j do not enter their own weights; ``"right"`` reads them at
    t_j.
    """
    if evaluation not in ("left", "right"):
        raise ValueError("evaluation must be 'left' or 'right'")
    times, at_risk, case, order, row = PsWeightTable.skeleton(ds)
    haz = conditional_hazards(ds, gamma, death_fit)
    read = (lambda f, t: f.left_limit(t)) if evaluation == "left" else (lambda f, t: f(t))
    eT = np.stack([read(haz.eta_T[z], times) for z in (0, 1)])   # (2, m_d)
    eY = np.stack([read(haz.eta_Y[z], times) for z in (0, 1)])
    arm = ds.arm
    own_T = eT[arm].T              # (m_d, n)
    cf_Y = eY[1 - arm].T
    p = ps_probability(np.where(case == 1, 1, 2), own_T, cf_Y, gamma)
    weights = np.where(at_risk, p, 0.0)
    return PsWeightTable(ds.ids, times, weights, at_risk, case, order, row)

import math

import numpy as np
import pytest

from ppsh import Dataset


def random_dataset(rng, n=20, p=0, tie_grid=None, death_rate=0.3):
    """Small random trial; ``tie_grid`` rounds times to force ties."""
    arm = np.zeros(n, dtype=int)
    arm[n // 2:] = 1
    rng.shuffle(arm)
    if arm.min() == arm.max():
        arm[0] = 1 - arm[0]
    t_event = rng.exponential(1.0, n) * np.where(arm == 1, 1.5, 1.0)
    t_death = rng.exponential(1 / death_rate, n)
    t_cens = rng.exponential(2.0, n)
    if tie_grid:
        t_event, t_death, t_cens = (np.ceil(x / tie_grid) * tie_grid for x in (t_event, t_death, t_cens))
    follow = np.minimum(t_death, t_cens)
    died = t_death <= t_cens
    event = np.where(t_event <= follow, t_event, np.nan)
    cov = rng.normal(size=(n, p)) if p else None
    if np.isnan(event).all():
        event[0] = follow[0] / 2
    return Dataset([f"s{i}" for i in range(n)], arm, follow, event, died, cov)


def loop_cox(ds, beta, weights=None):
    """Weighted Breslow log-PL, score and information by explicit loops.

    ``weights`` maps (event_time, subject index) to p; default all ones.
    Risk set: followup > t and (no event or event >= t), event subject always in.
    """
    X = ds.design
    beta = np.asarray(beta, dtype=float)
    p = X.shape[1]
    ll, U, L = 0.0, np.zeros(p), np.zeros((p, p))
    for k in range(len(ds)):
        if np.isnan(ds.event_time[k]):
            continue
        t = ds.event_time[k]
        members = [i for i in range(len(ds))
                   if (ds.followup[i] > t and (np.isnan(ds.event_time[i]) or ds.event_time[i] >= t))
                   or ds.event_time[i] == t]
        w = {i: (1.0 if weights is None else weights(t, i)) for i in members}
        pk = w[k]
        s0 = sum(w[i] * math.exp(X[i] @ beta) for i in members)
        s1 = sum(w[i] * math.exp(X[i] @ beta) * X[i] for i in members)
        s2 = sum(w[i] * math.exp(X[i] @ beta) * np.outer(X[i], X[i]) for i in members)
        xbar = s1 / s0
        ll += pk * (X[k] @ beta - math.log(s0))
        U += pk * (X[k] - xbar)
        L += pk * (s2 / s0 - np.outer(xbar, xbar))
    return ll, U, L


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_weights(ds, rng, low=0.05):
    """Weight table with independent uniform p_ij on every risk set."""
    from ppsh.frailty import PsWeightTable
    times, at_risk, case, order, row = PsWeightTable.skeleton(ds)
    w = np.where(at_risk, rng.uniform(low, 1.0, at_risk.shape), 0.0)
    return PsWeightTable(ds.ids, times, w, at_risk, case, order, row)


def weight_lookup(table, ds):
    index = {t: j for j, t in enumerate(table.times)}
    return lambda t, i: table.weights[index[t], i]


def pytest_terminal_summary(terminalreporter):
    import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)

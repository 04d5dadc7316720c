import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppsh import Dataset, StepFunction, build_ps_weights, eta_death, eta_event, ps_probability
from ppsh.estimators import CoxDeathFit
from ppsh.frailty import PsWeightTable

from conftest import random_dataset


def test_eta_death_values():
    assert eta_death(1.0, 2) == 0
    assert eta_death(0.5, 1) == pytest.approx(1.0)
    assert eta_death(math.exp(-2), 1e6) == pytest.approx(2, abs=1e-4)
    assert eta_death(0.0, 1) == math.inf
    with pytest.raises(ValueError):
        eta_death(1.2, 1)


def test_eta_event_values():
    assert eta_event(1.0, 3.0, 2) == 0
    assert eta_event(0.5, 1.0, 1) == pytest.approx(2.0)
    assert eta_event(0.25, 0.0, 0.5) == pytest.approx(7.5)


def test_ps_probability_values():
    assert ps_probability(1, 0.3, 0.0, 2) == 1.0
    assert ps_probability(1, 1.0, 2.0, 1) == pytest.approx(0.25)
    assert ps_probability(2, 1.0, 2.0, 1) == pytest.approx(0.5)
    assert ps_probability(2, 1.0, 0.7, 1e6) == pytest.approx(math.exp(-0.7), abs=1e-4)
    assert ps_probability(2, 1.0, math.inf, 1) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1), st.floats(0.05, 50))
def test_marginalization_round_trip(S, g):
    eta = eta_death(S, g)
    assert (g / (g + eta)) ** g == pytest.approx(S, rel=1e-12, abs=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.05, 20), st.floats(0, 5))
def test_eta_decreasing_in_S(s1, s2, g, ey):
    lo, hi = sorted((s1, s2))
    if hi - lo < 1e-9:
        return
    assert eta_death(lo, g) > eta_death(hi, g)
    assert eta_event(lo, ey, g) > eta_event(hi, ey, g)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0.05, 20))
def test_ps_probability_orderings(eT, y1, y2, g):
    a, b = sorted((y1, y2))
    for case in (1, 2):
        assert ps_probability(case, eT, b, g) <= ps_probability(case, eT, a, g) + 1e-15
    assert ps_probability(1, eT, a, g) <= ps_probability(2, eT, a, g) + 1e-15


def hand_dataset():
    # a dies at 0.5 before any event; arm 0: a, b, f; arm 1: c, d, e
    return Dataset(list("abcdef"), [0, 0, 1, 1, 1, 0], [0.5, 3, 3, 3, 3, 3],
                   [np.nan, 1.0, 2.0, np.nan, 1.5, np.nan], [1, 0, 0, 0, 0, 0])


def test_hand_oracle_weights():
    ds = hand_dataset()
    death = CoxDeathFit(np.array([math.log(0.5)]), StepFunction([0.5], [0.4], 0.0), True, 0,
                        np.eye(1), np.zeros(1))
    w = build_ps_weights(ds, 1.0, death_fit=death)
    e = math.exp
    pf = (1 + e(0.4)) / (e(0.2) + e(0.4))
    pd = (1 + 0.5 * e(0.2)) / (e(0.4) + 0.5 * e(0.2))
    expected = [
        {"b": e(-0.4), "f": e(-0.2), "c": e(-0.4), "d": e(-0.4), "e": e(-0.4)},   # t = 1
        {"f": pf, "c": e(-0.4), "d": e(-0.4), "e": e(-0.8)},                     # t = 1.5
        {"f": pf, "c": pd ** 2, "d": pd},                                         # t = 2
    ]
    assert w.times.tolist() == [1.0, 1.5, 2.0]
    for j, exp in enumerate(expected):
        got = {ds.ids[i]: w.weights[j, i] for i in np.flatnonzero(w.at_risk[j])}
        assert got.keys() == exp.keys()
        for k in exp:
            assert got[k] == pytest.approx(exp[k], rel=1e-12)


def test_weight_can_rise_when_own_event_hazard_grows():
    # subject f: the counterfactual death hazard is flat after 0.5 while its own
    # arm's event hazard grows, so its weight rises from t=1 to t=1.5
    ds = hand_dataset()
    death = CoxDeathFit(np.array([math.log(0.5)]), StepFunction([0.5], [0.4], 0.0), True, 0,
                        np.eye(1), np.zeros(1))
    w = build_ps_weights(ds, 1.0, death_fit=death)
    f = ds.ids.index("f")
    assert w.weights[1, f] > w.weights[0, f]


def test_no_deaths_gives_unit_weights(rng):
    ds = random_dataset(rng, 20, death_rate=1e-9)
    ds = Dataset(ds.ids, ds.arm, ds.followup, ds.event_time, np.zeros(len(ds), bool))
    w = build_ps_weights(ds, 0.5)
    assert np.all(w.weights[w.at_risk] == 1.0)


def test_large_gamma_limit(rng):
    ds = random_dataset(rng, 40)
    w = build_ps_weights(ds, 1e6)
    from ppsh import fit_cox_death
    fit = fit_cox_death(ds, use_covariates=False)
    for j, t in enumerate(w.times):
        for i in np.flatnonzero(w.at_risk[j]):
            cf = fit.survival_curve(1 - ds.arm[i]).left_limit(t)
            assert w.weights[j, i] == pytest.approx(cf, abs=1e-4)


def test_weights_table_properties(rng, tmp_path):
    ds = random_dataset(rng, 30, tie_grid=0.25)
    w = build_ps_weights(ds, 2.0)
    assert np.all((w.weights >= 0) & (w.weights <= 1))
    assert np.all(w.weights[~w.at_risk] == 0)
    assert w.event_weights.size == int(ds.has_event.sum())
    path = tmp_path / "w.csv"
    w.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "event_index,t_j,subject_id,case,p_ij"
    assert len(lines) - 1 == int(w.at_risk[w.event_row].sum())


def test_uniform_and_errors():
    ds = Dataset(["a", "b"], [0, 1], [1.0, 2.0], [np.nan, np.nan], [0, 0])
    with pytest.raises(ValueError, match="no events to fit"):
        PsWeightTable.uniform(ds)
    with pytest.raises(ValueError):
        build_ps_weights(hand_dataset(), 0.0)
    with pytest.raises(ValueError):
        build_ps_weights(hand_dataset(), 1.0, evaluation="middle")

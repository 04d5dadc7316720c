"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line to RESULTS; conftest prints them in the
terminal summary. ``python3 tests/test_acceptance.py`` runs them standalone.
"""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ppsh import (CopulaFamily, PsWeightTable, SimConfig, copula_eval, eta1_T, fit_cause_specific,
                  fit_ppsh, invert_eta, kendall_tau, prop_test, replicate, simulate_trial,
                  tau_to_varsigma)
from ppsh._parallel import stream
from ppsh.copula import NestedCopula, copula_ps_weights, fit_mple_pairs, pseudo_observations
from ppsh.model import information, log_partial_likelihood, weighted_score

from conftest import loop_cox, random_dataset, random_weights, weight_lookup

RESULTS = []
SEED = 2024
R_TABLE = 1000


def report(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def within(got, target, tol):
    return abs(got - target) <= tol


def bias_line(rep, label, method, gamma_tilde, target, tol):
    got = rep.method(method, gamma_tilde)["bias"]
    return within(got, target, tol), f"{label} bias {got:+.4f} (target {target:+.3f} +- {tol})"


def check_rows(number, rows):
    ok = all(r[0] for r in rows)
    report(number, ok, "; ".join(r[1] for r in rows))


_cache = {}


def table_run(**kw):
    key = tuple(sorted(kw.items()))
    if key not in _cache:
        gt = kw.pop("gamma_tilde")
        _cache[key] = replicate(SimConfig(**kw), R_TABLE, gamma_tilde=gt, seed=SEED)
        kw["gamma_tilde"] = gt
    return _cache[key]


@pytest.mark.slow
def test_criterion_1_table1_homogeneous():
    rep = table_run(gamma=2.0, lambda0=0.25, gamma_tilde=(0.5, 2.0))
    tol = 0.015
    check_rows(1, [
        bias_line(rep, "hypothetical", "hypothetical", None, -0.003, tol),
        bias_line(rep, "CS", "cause-specific", None, 0.008, tol),
        bias_line(rep, "PPSH(2)", "ppsh", 2.0, -0.010, tol),
        bias_line(rep, "PPSH(0.5)", "ppsh", 0.5, -0.044, tol),
    ])


@pytest.mark.slow
def test_criterion_2_table1_heterogeneous():
    rep = table_run(gamma=0.5, lambda0=0.4, gamma_tilde=(0.5,))
    cs = rep.method("cause-specific")
    ps = rep.method("ppsh", 0.5)
    tol = 0.015
    rows = [
        bias_line(rep, "CS", "cause-specific", None, 0.107, tol),
        bias_line(rep, "PPSH(0.5)", "ppsh", 0.5, 0.002, tol),
        (abs(ps["bias"]) < abs(cs["bias"]), f"|bias_PS| < |bias_CS|; HR CS {cs['hr']:.3f} PS {ps['hr']:.3f}"),
    ]
    check_rows(2, rows)


@pytest.mark.slow
def test_criterion_3_summary_statistics():
    rep = table_run(gamma=0.5, lambda0=0.25, gamma_tilde=(0.5,))
    targets = {("placebo", "dead"): 29, ("placebo", "event"): 60,
               ("treatment", "dead"): 25, ("treatment", "event"): 39}
    rows = []
    for (arm, field), target in targets.items():
        got = rep.arms[arm][field]
        rows.append((within(got, target, 2.0), f"{arm} {field} {got:.1f}% (target {target}% +- 2)"))
    check_rows(3, rows)


@pytest.mark.slow
def test_criterion_4_inverse_gaussian():
    rep = table_run(gamma=0.5, lambda0=0.25, frailty_family="inverse-gaussian", gamma_tilde=(0.5,))
    tol = 0.015
    hyp = rep.method("hypothetical")
    rows = [
        (within(hyp["mean"], -0.887, tol), f"hypothetical Est {hyp['mean']:+.4f} HR {hyp['hr']:.3f} "
                                           f"(target -0.887 +- {tol})"),
        bias_line(rep, "CS", "cause-specific", None, 0.078, tol),
        bias_line(rep, "PPSH(0.5)", "ppsh", 0.5, 0.016, tol),
    ]
    check_rows(4, rows)


def non_rejection(cfg, reps, seed):
    keep = 0
    for r in range(reps):
        ds = simulate_trial(cfg, stream(seed, r))
        w = PsWeightTable.uniform(ds)
        keep += prop_test(ds, w, fit_ppsh(ds, w), "t").p_value > 0.05
    return keep / reps


@pytest.mark.slow
def test_criterion_5_proportionality_calibration():
    # no mortality: the event hazards are the proportional quantity under test
    cases = [("gamma 2", SimConfig(gamma=2.0), 0.95, 0.02),
             ("inverse-gaussian 0.5", SimConfig(gamma=0.5, frailty_family="inverse-gaussian"), 0.84, 0.03),
             ("inverse-gaussian 2", SimConfig(gamma=2.0, frailty_family="inverse-gaussian"), 0.93, 0.03)]
    rows = []
    for k, (label, cfg, target, tol) in enumerate(cases):
        rate = non_rejection(cfg.hypothetical(), 2000, SEED + k)
        rows.append((within(rate, target, tol), f"{label}: {100 * rate:.1f}% (target {100 * target:.0f} +- {100 * tol:.0f})"))
    check_rows(5, rows)


def _loop_newton(ds):
    beta = np.zeros(ds.design.shape[1])
    for _ in range(100):
        _, U, L = loop_cox(ds, beta)
        step = np.linalg.solve(L, U)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return beta


def test_criterion_6_oracle_equivalence():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    done = 0
    while done < 50:
        ds = random_dataset(rng, int(rng.integers(8, 31)), p=int(rng.integers(0, 3)),
                            tie_grid=0.2 if done % 3 == 0 else None)
        w = PsWeightTable.uniform(ds)
        beta0 = rng.normal(scale=0.5, size=ds.design.shape[1])
        _, U, L = loop_cox(ds, beta0)
        worst = max(worst, np.max(np.abs(weighted_score(ds, w, beta0) - U)),
                    np.max(np.abs(information(ds, w, beta0) - L)))
        fit = fit_ppsh(ds, w)
        if not fit.converged:
            continue  # monotone likelihood: no finite estimate to compare
        ref = _loop_newton(ds)
        worst = max(worst, np.max(np.abs(fit.beta - ref)))
        done += 1
    report(6, worst < 1e-8, f"max abs difference {worst:.2e} over 50 datasets (tol 1e-8)")


def _grid_argmax(f, lo=-8.0, hi=8.0):
    for _ in range(12):
        xs = np.linspace(lo, hi, 41)
        vals = [f(x) for x in xs]
        k = int(np.argmax(vals))
        if k in (0, len(xs) - 1):
            return None
        step = xs[1] - xs[0]
        lo, hi = xs[k] - 2 * step, xs[k] + 2 * step
    return xs[k]


def test_criterion_7_brute_force():
    rng = np.random.default_rng(SEED + 7)
    worst = 0.0
    done = 0
    while done < 20:
        ds = random_dataset(rng, int(rng.integers(6, 11)))
        w = random_weights(ds, rng)
        lookup = weight_lookup(w, ds)
        best = _grid_argmax(lambda b: loop_cox(ds, [b], lookup)[0])
        if best is None:
            continue  # the maximum is not interior
        fit = fit_ppsh(ds, w)
        worst = max(worst, abs(fit.beta[0] - best))
        done += 1
    report(7, worst < 1e-6, f"max |fit - grid argmax| {worst:.2e} over 20 datasets (tol 1e-6)")


def _fd(f, x, h=1e-4):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def test_criterion_8_numeric_consistency():
    rng = np.random.default_rng(SEED + 8)
    rows = []

    worst = 0.0
    for _ in range(10):
        ds = random_dataset(rng, 25, p=1)
        w = random_weights(ds, rng)
        b = rng.normal(scale=0.3, size=2)
        num = np.column_stack([-_fd(lambda x: weighted_score(ds, w, np.where(np.arange(2) == k, x, b)), b[k], 1e-3)
                               for k in range(2)])
        info = information(ds, w, b)
        worst = max(worst, np.max(np.abs(info - num)) / np.max(np.abs(info)))
        lp = lambda x: log_partial_likelihood(ds, w, np.array([x, b[1]]))
        worst = max(worst, abs(_fd(lp, b[0], 1e-3) - weighted_score(ds, w, b)[0]) / np.max(np.abs(info)))
    rows.append((worst < 1e-5, f"information vs FD rel {worst:.1e}"))

    worst_ode = worst_inv = 0.0
    for _ in range(200):
        cfg = SimConfig(lambda0=rng.uniform(0, 1), lambda1=rng.uniform(0, 1), phi=rng.uniform(0.2, 5),
                        r_ps=rng.uniform(0.1, 3), gamma=rng.uniform(0.1, 20))
        if abs(cfg.lambda_Y - cfg.phi * (cfg.r_ps - 1)) < 1e-3:
            continue
        t = rng.uniform(0.01, 5)
        lam = cfg.lambda_Y
        h = 1e-6 * max(1.0, t)
        y = eta1_T(t, cfg)
        dy = (eta1_T(t + h, cfg) - eta1_T(t - h, cfg)) / (2 * h)
        den = cfg.gamma + (cfg.phi + lam) * t
        P = -cfg.r_ps * cfg.phi / den
        Q = cfg.r_ps * cfg.phi * (cfg.gamma + lam * t) / den
        worst_ode = max(worst_ode, abs(dy + P * y - Q) / max(1.0, abs(Q), abs(P * y)))
        target = rng.uniform(0, 30)
        worst_inv = max(worst_inv, abs(eta1_T(invert_eta(1, target, cfg), cfg) - target))
    rows.append((worst_ode < 1e-6, f"ODE residual {worst_ode:.1e}"))
    rows.append((worst_inv < 1e-9, f"invert_eta round trip {worst_inv:.1e}"))

    worst = 0.0
    for kind, s in [("clayton", 0.5), ("clayton", 4.0), ("gumbel", 1.5), ("gumbel", 4.0),
                    ("frank", -3.0), ("frank", 5.0)]:
        fam = CopulaFamily(kind, s)
        for u1, u2 in rng.uniform(0.05, 0.95, (20, 2)):
            cv = copula_eval(fam, u1, u2)
            pairs = [(cv.d_u1, _fd(lambda x: copula_eval(fam, x, u2).value, u1)),
                     (cv.d_u2, _fd(lambda x: copula_eval(fam, u1, x).value, u2)),
                     (cv.density, _fd(lambda x: copula_eval(fam, u1, x).d_u1, u2))]
            worst = max(worst, max(abs(a - b) / max(abs(a), 1e-4) for a, b in pairs))
    rows.append((worst < 1e-6, f"copula partials vs FD rel {worst:.1e}"))

    worst = 0.0
    for kind in ("clayton", "gumbel", "frank"):
        for tau in rng.uniform(0.001, 0.95, 30):
            worst = max(worst, abs(kendall_tau(CopulaFamily(kind, tau_to_varsigma(kind, tau))) - tau))
    rows.append((worst < 1e-10, f"Kendall tau round trip {worst:.1e}"))
    check_rows(8, rows)


LIMIT_REPS = 200


@pytest.mark.slow
def test_criterion_9_large_gamma_limit():
    # HR = exp(mean log HR) over replicates, the summary used for the simulation tables
    rows = []
    for g in (0.5, 2.0, 5.0):
        rep = replicate(SimConfig(gamma=g), LIMIT_REPS, gamma_tilde=(1e6,), seed=SEED)
        diff = rep.method("ppsh", 1e6)["hr"] - rep.method("cause-specific")["hr"]
        rows.append((abs(diff) < 0.005, f"gamma {g}: PS - CS HR {diff:+.4f}"))
    check_rows(9, rows)


@pytest.mark.slow
def test_criterion_10_copula_independence():
    nc = NestedCopula(0.0, 0.0, "clayton")
    rows = []
    for g in (0.5, 2.0, 5.0):
        cs, ps = [], []
        for r in range(LIMIT_REPS):
            ds = simulate_trial(SimConfig(gamma=g), stream(SEED, r, 0))
            cs.append(fit_cause_specific(ds).beta[0])
            ps.append(fit_ppsh(ds, copula_ps_weights(ds, nc)).beta[0])
        diff = math.exp(np.mean(ps)) - math.exp(np.mean(cs))
        rows.append((abs(diff) < 0.01, f"gamma {g}: PS - CS HR {diff:+.4f}"))
    check_rows(10, rows)


def clayton_pairs(rng, s, n):
    v1 = rng.uniform(size=n)
    w = rng.uniform(size=n)
    v2 = ((w ** (-s / (1 + s)) - 1) * v1 ** -s + 1) ** (-1 / s)
    return -np.log(v1), -np.log(v2)


@pytest.mark.slow
def test_criterion_11_mple_recovery():
    hits = 0
    for r in range(100):
        e, y = clayton_pairs(stream(SEED, r), 2.0, 2000)
        ones = np.ones_like(e)
        est = fit_mple_pairs("clayton", *pseudo_observations(e, ones, y, ones)).varsigma
        hits += 1.8 <= est <= 2.2
    report(11, hits >= 90, f"{hits}/100 estimates in [1.8, 2.2] (need >= 90)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

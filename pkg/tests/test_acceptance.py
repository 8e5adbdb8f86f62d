"""End-to-end checks of the headline numbers, one PASS/FAIL line each.

Run with ``pytest -m acceptance -s`` to see only these lines, or as part of
the full suite. Tolerances are fixed here, not tuned to the outcome.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from probe_release import theory
from probe_release.config import load_scenario
from probe_release.controller import compute_schedule
from probe_release.estimator import EstimatorConfig, Estimates, critical_value
from probe_release.harness import (
    error_trajectory,
    estimate_trajectory,
    run_monte_carlo,
    run_scenario,
    simulate_probe_samples,
)

pytestmark = pytest.mark.acceptance

# reference values and tolerances
T_CLEAN = (2, 4, 7, 51)
T_RELEASE_OK = (326, 327)
XC_REF, XC_TOL = 16.7, 0.4
R_TILDE_REF, R_TILDE_TOL = 10.77, 0.3
RHS_REF, RHS_TOL = 1.21, 0.05
E2_EARLY, EARLY_ROUNDS = 0.01, 15
TAIL_ROUNDS = (50, 200)
BOUND_SLACK = 1.10
BASELINE_SLOPE, SLOPE_REL = 0.1, 0.5
PREFIX_RATIO_MAX = 2.0
RECONVERGE_REL, RECONVERGE_ROUNDS = 0.10, 10


def _report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")


def test_criterion_1_schedule(capsys):
    t0 = time.perf_counter()
    sc = load_scenario("stationary")
    sched = compute_schedule(sc.prior, sc.estimator.k)
    dt = time.perf_counter() - t0
    ok = sched.T_clean == T_CLEAN and sched.T_release in T_RELEASE_OK and dt < 1.0
    _report(capsys, 1, ok, f"T_clean={sched.T_clean} T_release={sched.T_release} ({dt:.3f}s)")
    assert ok


def test_criterion_2_critical_value(capsys):
    xc = critical_value(Estimates(0.67, 16.0, 10.4, 2.0), 9.0)
    ok = abs(xc - XC_REF) <= XC_TOL
    _report(capsys, 2, ok, f"x0c_hat={xc:.4f} vs {XC_REF} +/- {XC_TOL}")
    assert ok


def test_criterion_3_theorem_witnesses(capsys):
    sc = load_scenario("stationary")
    t0 = time.perf_counter()
    rep = theory.check_theorem_conditions(sc, gamma=0.04, n_rollouts=100_000)
    dt = time.perf_counter() - t0
    parts = {
        "mean demand < R~": rep.demand_mean < rep.R_tilde,
        "R~ in band": abs(rep.R_tilde - R_TILDE_REF) <= R_TILDE_TOL,
        "A_max < 8.5": rep.A_max < rep.cond_ii_threshold and rep.cond_ii_threshold == 8.5,
        "rhs(0.04) in band": abs(rep.rhs_iii - RHS_REF) <= RHS_TOL,
        "runtime": dt < 120,
    }
    ok = all(parts.values())
    _report(
        capsys, 3, ok,
        f"mean demand {rep.demand_mean:.2f}, R~ {rep.R_tilde:.4f} +/- {rep.R_tilde_ci:.4f}, "
        f"A_max {rep.A_max}, rhs {rep.rhs_iii:.4f} (ref {RHS_REF}), {dt:.1f}s; "
        + ", ".join(f"{k}: {v}" for k, v in parts.items()),
    )
    assert ok


def test_criterion_4_estimation_convergence(capsys):
    sc = load_scenario("stationary")
    t0 = time.perf_counter()
    rep = run_monte_carlo(sc, n_reps=5)
    dt = time.perf_counter() - t0
    lo, hi = TAIL_ROUNDS
    E = np.array([[r["e2norm"] for r in res.estimates[:hi]] for res in rep["results"]])
    med = np.median(E, axis=0)
    early = med[:EARLY_ROUNDS]
    tail = float(E[:, lo - 1 : hi].mean())
    Y = theory.error_bound_Y(sc.estimator.lam, sc.noise.sigma2, sc.flow.R, sc.flow.alpha, sc.flow.gap)
    ok_early = bool(np.any(early <= E2_EARLY))
    ok_tail = tail <= Y
    ok = ok_early and ok_tail and dt < 60
    _report(
        capsys, 4, ok,
        f"min median |e|^2 in first {EARLY_ROUNDS} rounds {early.min():.4f} (<= {E2_EARLY}: {ok_early}); "
        f"tail mean rounds {lo}-{hi} {tail:.5f} vs Y {Y:.5f} ({ok_tail}); {dt:.1f}s",
    )
    assert ok


def test_criterion_5_error_bound_law(capsys):
    sc = load_scenario("stationary")
    plant, prior = sc.plant, sc.prior
    f, nz = plant.flow, plant.noise
    t0 = time.perf_counter()
    chains, rounds, burn = 200, 1500, 500
    rows = []
    bounds = []
    ok = True
    for lam in (0.02, 0.05, 0.08):
        bR, bA = theory.error_bound_parts(lam, nz.sigma2, f.R, f.alpha, f.gap)
        bounds.append((bR, bA))
        eR, eA = [], []
        for c in range(chains):
            rng = np.random.default_rng([int(lam * 100), c])
            samples = simulate_probe_samples(plant, prior, sc.estimator.k, rounds, rng, sc.gap_fraction)
            e = error_trajectory(estimate_trajectory(samples, lam, Estimates.exact(f, nz)), plant)
            eR.append(np.mean(e["e_R"][burn:] ** 2))
            eA.append(np.mean(e["e_alpha"][burn:] ** 2))
        mR, mA = float(np.mean(eR)), float(np.mean(eA))
        ok &= mR <= BOUND_SLACK * bR and mA <= BOUND_SLACK * bA
        rows.append(f"lam {lam}: e_R^2 {mR:.3e}/{bR:.3e}, e_a^2 {mA:.3e}/{bA:.3e}")
    b = np.array(bounds)
    monotone = bool(np.all(np.diff(b, axis=0) > 0))
    dt = time.perf_counter() - t0
    ok = ok and monotone and dt < 120
    _report(capsys, 5, ok, "; ".join(rows) + f"; bounds monotone {monotone}; {dt:.1f}s")
    assert ok


def test_criterion_6_above_breakdown(capsys):
    sc = load_scenario("above_breakdown")
    t0 = time.perf_counter()
    base = run_scenario(sc.with_(controller="no-coordination"), seed=sc.seed)
    slope = float(np.polyfit(base.metrics["t"], base.metrics["l1"], 1)[0])
    ok_slope = abs(slope - BASELINE_SLOPE) <= SLOPE_REL * BASELINE_SLOPE
    rep = run_monte_carlo(sc)
    ratios = [r["time_avg_l1"] / r["prefix_avg_l1_quarter"] for r in rep["replications"]]
    ok_bounded = max(ratios) <= PREFIX_RATIO_MAX
    dt = time.perf_counter() - t0
    ok = ok_slope and ok_bounded and dt < 180 and sc.flow.R < sc.demand.total_mean
    _report(
        capsys, 6, ok,
        f"mean demand {sc.demand.total_mean:.2f}; baseline slope {slope:.4f} "
        f"(target {BASELINE_SLOPE} +/- {int(SLOPE_REL * 100)}%); probe-release prefix ratios "
        + ", ".join(f"{v:.3f}" for v in ratios) + f"; {dt:.1f}s",
    )
    assert ok


def _p_chi_mc(chi, f, nz, prior, k, n, rng):
    x0 = rng.uniform(prior.x0_min, prior.x0_max, (n, k))
    eps = nz.sample(rng, n * k).reshape(n, k)
    peak = np.where(x0 <= f.x0_c, f.Q - f.alpha * (f.x0_c - x0), f.R)
    hit = (peak + eps > f.Q + nz.eps_max - 0.75 * chi).any(axis=1)
    return hit.mean(), hit.std() / math.sqrt(n)


def _p_prime_mc(psi, nz, k, n, rng):
    eps = nz.sample(rng, n * k).reshape(n, k)
    hit = ((eps > nz.eps_max - psi / 2) | (eps < -nz.eps_max + psi / 2)).any(axis=1)
    return hit.mean(), hit.std() / math.sqrt(n)


def test_criterion_7_property_suites(capsys, tmp_path):
    sc = load_scenario("stationary")
    checks = {}

    # mass conservation per step in a closed-loop run
    res = run_scenario(sc.with_(horizon=20_000), seed=1)
    m = res.metrics
    d = np.diff(m["l1"]) - (m["A"] + m["B"] - m["F"])[:-1]
    checks["mass"] = bool(np.all(np.abs(d) <= 1e-9 * np.maximum(1.0, m["l1"][:-1])))

    checks["ewma weights"] = all(
        abs(EstimatorConfig(lam, k).weights.sum() + EstimatorConfig(lam, k).carry - 1) < 1e-12
        for lam in np.linspace(0.01, 1, 25)
        for k in range(1, 11)
    )

    # clean guarantee and sample placement over 110 rounds (round 0 excluded)
    sched = compute_schedule(sc.prior, sc.estimator.k)
    res = run_scenario(sc.with_(horizon=sched.T_round * 111), seed=2)
    m, s = res.metrics, sc.prior.s
    iv = sc.prior.intervals()
    ok_clean = ok_place = True
    n_rounds = len(res.round_starts) - 1
    for t, ph in enumerate(m["phase"]):
        if not ph.endswith("Steer") or t < res.round_starts[1]:
            continue
        ep = int(ph[2])
        j = t + s + 1
        if j + sched.T_clean[ep - 1] >= m["x0"].size:
            break
        lo, hi = iv[ep]
        ok_place &= abs(m["x0"][j] - m["x0_set"][t]) < 1e-9 and lo <= m["x0"][j] <= hi
        ok_clean &= m["x0"][j + sched.T_clean[ep - 1]] <= sc.prior.x0_clean + 1e-9
    checks[f"clean guarantee ({n_rounds} rounds)"] = bool(ok_clean) and n_rounds >= 100
    checks["sample placement"] = bool(ok_place)

    f, nz, pr, k = sc.flow, sc.noise, sc.prior, sc.estimator.k
    chi = math.sqrt(0.04) * (f.Q + nz.eps_max)
    mc, se = _p_chi_mc(chi, f, nz, pr, k, 1_000_000, np.random.default_rng(71))
    checks["p vs MC"] = abs(theory.p_chi(chi, f, nz, pr, k) - mc) < 3 * se
    psi = math.sqrt(0.04) * nz.eps_max
    mc, se = _p_prime_mc(psi, nz, k, 1_000_000, np.random.default_rng(72))
    checks["p' vs MC"] = abs(theory.p_prime(psi, nz, k) - mc) < 3 * se

    cd = load_scenario("capacity_drop")
    res = run_scenario(cd, seed=cd.seed)
    Fm = res.metrics["Fmax_hat"]
    resets = set(range(int(cd.estimator.reset_period), cd.horizon, int(cd.estimator.reset_period)))
    drops = [t for t in range(1, Fm.size) if Fm[t] < Fm[t - 1]]
    checks["F_max monotone between resets"] = set(drops) <= resets

    run_monte_carlo(sc.with_(horizon=3000), n_reps=2, seed=3, out_dir=tmp_path / "a")
    run_monte_carlo(sc.with_(horizon=3000), n_reps=2, seed=3, out_dir=tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    checks["byte-identical reruns"] = all(
        (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in files
    )

    ok = all(checks.values())
    _report(capsys, 7, ok, ", ".join(f"{k}: {v}" for k, v in checks.items()))
    assert ok


def test_criterion_8_capacity_drop_tracking(capsys):
    sc = load_scenario("capacity_drop")
    patch = sc.schedule[0]
    new_xc = None
    from probe_release.config import apply_schedule_patch

    new_xc = apply_schedule_patch(sc.plant, patch.changes).flow.x0_c
    t0 = time.perf_counter()
    rep = run_monte_carlo(sc)
    after, before = [], []
    for res in rep["results"]:
        rows = res.estimates
        pre = [r for r in rows if r["t"] < patch.step]
        post = [r for r in rows if r["t"] >= patch.step]
        before.append(pre[-1]["x0c_hat"])
        after.append(post[RECONVERGE_ROUNDS - 1]["x0c_hat"] if len(post) >= RECONVERGE_ROUNDS else math.nan)
    med_after = float(np.median(after))
    med_before = float(np.median(before))
    band = (1 - RECONVERGE_REL) * new_xc, (1 + RECONVERGE_REL) * new_xc
    inside = band[0] <= med_after <= band[1]
    moved = not band[0] <= med_before <= band[1]
    dt = time.perf_counter() - t0
    ok = inside and moved
    frac = np.mean([band[0] <= v <= band[1] for v in after])
    _report(
        capsys, 8, ok,
        f"new x0_c {new_xc:.3f}, band [{band[0]:.2f}, {band[1]:.2f}]; median x0c_hat before drop "
        f"{med_before:.2f}, after {RECONVERGE_ROUNDS} updates {med_after:.2f} "
        f"({frac:.0%} of seeds in band); {dt:.1f}s",
    )
    assert ok

"""Simulation loop, replications, non-stationary schedules and outputs."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .config import Plant, Scenario, apply_schedule_patch
from .controller import ProbeReleaseController, UncoordinatedController, compute_schedule
from .estimator import (
    Estimates,
    critical_value,
    normalized_errors,
    reset_due,
    reset_max_estimates,
    update_round,
)
from .model import InvariantViolation

METRIC_COLUMNS = (
    "t", "x0", "l1", "q", "F", "A", "B", "b_s", "b_qs", "b_Bq", "x0_set",
    "phase", "round", "e2norm", "alpha_hat", "R_hat", "Fmax_hat", "epsmax_hat",
)
ESTIMATE_COLUMNS = ("n", "t", "alpha_hat", "Fmax_hat", "R_hat", "epsmax_hat", "x0c_hat", "e2norm")


class SimulationError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


def replication_seed(master: int, replication: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(replication,))


def streams(seed: np.random.SeedSequence) -> dict[str, np.random.Generator]:
    names = ("demand", "noise", "controller", "init")
    return {n: np.random.default_rng(ss) for n, ss in zip(names, seed.spawn(len(names)))}


def _segments(scenario: Scenario) -> list[tuple[int, int, Plant]]:
    """(start, stop, plant) pieces of the horizon between patches."""
    out = []
    plant = scenario.plant
    start = 0
    for patch in scenario.schedule:
        if patch.step >= scenario.horizon:
            break
        if patch.step > start:
            out.append((start, patch.step, plant))
            start = patch.step
        plant = apply_schedule_patch(plant, patch.changes)
    out.append((start, scenario.horizon, plant))
    return out


def draw_exogenous(scenario: Scenario, rngs: dict[str, np.random.Generator]):
    """Demand and noise for every step.

    Uniforms are drawn up front per stream and mapped through the inverse
    cdf of whichever distribution is active at that step, so a patch does not
    shift the random sequence of later steps.
    """
    T = scenario.horizon
    uA = rngs["demand"].random(T)
    uB = rngs["demand"].random(T)
    uE = rngs["noise"].random(T)
    A = np.empty(T)
    B = np.empty(T)
    eps = np.empty(T)
    segs = _segments(scenario)
    for a, b, plant in segs:
        A[a:b] = plant.demand.A.ppf(uA[a:b])
        B[a:b] = plant.demand.B.ppf(uB[a:b])
        eps[a:b] = plant.noise.dist.ppf(uE[a:b])
    return A, B, eps, segs


def initial_estimates(scenario: Scenario, rng: np.random.Generator) -> Estimates:
    if scenario.initial_estimates is not None:
        return scenario.initial_estimates
    Fmax0, eps0 = scenario.estimator.reset_defaults
    guess = scenario.R0_guess if scenario.R0_guess is not None else scenario.prior.x0_min
    return Estimates.random_initial(rng, float(guess), Fmax0, eps0)


@dataclass
class SimulationResult:
    metrics: dict[str, np.ndarray]
    estimates: list[dict]
    summary: dict
    round_starts: list[int] = field(default_factory=list)

    def write(self, out_dir: Path, prefix: str = "") -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(self.metrics, out_dir / f"{prefix}metrics.csv")
        with open(out_dir / f"{prefix}estimates.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ESTIMATE_COLUMNS)
            for row in self.estimates:
                w.writerow([_fmt(row[c]) for c in ESTIMATE_COLUMNS])
        with open(out_dir / f"{prefix}summary.json", "w") as fh:
            json.dump(self.summary, fh, indent=2, sort_keys=True)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer, str)):
        return str(v)
    return repr(float(v))


def write_metrics_csv(metrics: dict[str, np.ndarray], path: Path) -> None:
    cols = [metrics[c] for c in METRIC_COLUMNS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for i in range(len(cols[0])):
            w.writerow([_fmt(c[i]) for c in cols])


def run_scenario(scenario: Scenario, seed: int | None = None, replication: int = 0) -> SimulationResult:
    """Simulate one replication; deterministic in (scenario, seed, replication)."""
    seed = scenario.seed if seed is None else seed
    rngs = streams(replication_seed(seed, replication))
    A_all, B_all, eps_all, segs = draw_exogenous(scenario, rngs)
    patch_at = {a: plant for a, _, plant in segs}

    T = scenario.horizon
    prior = scenario.prior
    s = prior.s
    cfg = scenario.estimator
    x0_clean = prior.x0_clean
    if scenario.controller == "probe-release":
        schedule = compute_schedule(prior, cfg.k)
        ctrl = ProbeReleaseController(prior, schedule, rngs["controller"], scenario.gap_fraction)
    else:
        schedule = None
        ctrl = UncoordinatedController()
    est = initial_estimates(scenario, rngs["init"])

    plant = scenario.plant
    ptrue = plant.flow.as_tuple()
    evaluate = scenario.evaluate

    def err2(e: Estimates) -> float:
        return normalized_errors(e, plant.flow, plant.noise).norm2 if evaluate else math.nan

    e2 = err2(est)
    x = np.zeros(s + 2)
    x[0] = scenario.x0_initial

    cols = {c: np.empty(T) for c in METRIC_COLUMNS if c not in ("t", "phase", "round")}
    cols["t"] = np.arange(T)
    rounds = np.empty(T, dtype=np.int64)
    phases: list[str] = []
    est_rows: list[dict] = []
    outflow_clamps = 0

    for t in range(T):
        if t in patch_at and t > 0:
            plant = patch_at[t]
            ptrue = plant.flow.as_tuple()
            e2 = err2(est)
        if reset_due(t, cfg):
            est = reset_max_estimates(est, cfg)
            e2 = err2(est)
        A = A_all[t]
        B = B_all[t]
        q = x[s + 1]
        rounds[t] = ctrl.round
        try:
            b = ctrl.act(t, x, A, B, est)
        except Exception as exc:  # abort with the offending step
            raise SimulationError(t, exc) from exc
        b_qs = b if b < q else q
        b_Bs = b - q if b > q else 0.0
        b_Bq = B - b_Bs
        F, clamped = kernels.outflow(x[0], eps_all[t], *ptrue)
        if clamped:
            outflow_clamps += 1
        x0_now = x[0]
        l1 = x.sum()
        samples = ctrl.observe(t, x0_now, F)
        if samples is not None:
            est = update_round(est, samples, cfg)
            e2 = err2(est)
            est_rows.append(
                est.to_dict() | {"t": t, "x0c_hat": _safe_xc(est, x0_clean), "e2norm": e2}
            )

        cols["x0"][t] = x0_now
        cols["l1"][t] = l1
        cols["q"][t] = q
        cols["F"][t] = F
        cols["A"][t] = A
        cols["B"][t] = B
        cols["b_s"][t] = b
        cols["b_qs"][t] = b_qs
        cols["b_Bq"][t] = b_Bq
        cols["x0_set"][t] = getattr(ctrl, "x0_set", math.nan)
        cols["e2norm"][t] = e2
        cols["alpha_hat"][t] = est.alpha_hat
        cols["R_hat"][t] = est.R_hat
        cols["Fmax_hat"][t] = est.Fmax_hat
        cols["epsmax_hat"][t] = est.epsmax_hat
        phases.append(ctrl.label.value if hasattr(ctrl.label, "value") else ctrl.label)

        x0_next = x0_now + x[1] - F
        if x0_next < -1e-9:
            raise SimulationError(t, InvariantViolation(f"x0 would become {x0_next}"))
        x[1:s] = x[2 : s + 1]
        x[s] = A + b
        x[s + 1] = q - b_qs + b_Bq
        x[0] = x0_next if x0_next > 0.0 else 0.0

    cols["phase"] = np.array(phases, dtype=object)
    cols["round"] = rounds
    round_starts = list(getattr(ctrl, "round_starts", []))
    summary = summarize(scenario, cols, est, est_rows, round_starts, schedule, ctrl, x)
    summary["outflow_clamps"] = outflow_clamps
    summary["seed"] = seed
    summary["replication"] = replication
    return SimulationResult(cols, est_rows, summary, round_starts)


def _safe_xc(est: Estimates, x0_clean: float) -> float:
    try:
        return critical_value(est, x0_clean)
    except ValueError:
        return math.nan


def summarize(scenario, cols, est, est_rows, round_starts, schedule, ctrl, x_final) -> dict:
    from .theory import check_baseline_conditions

    T = scenario.horizon
    l1 = cols["l1"]
    prefix = np.cumsum(l1) / np.arange(1, T + 1)
    F_sum = float(cols["F"].sum())
    out = {
        "scenario": scenario.name,
        "controller": scenario.controller,
        "horizon": T,
        "time_avg_l1": float(prefix[-1]),
        "prefix_avg_l1_quarter": float(prefix[max(T // 4 - 1, 0)]),
        "final_l1": float(x_final.sum()),
        "throughput": F_sum / T,
        "delay_proxy_s": scenario.dt * float(l1.sum()) / F_sum if F_sum > 0 else math.inf,
        "baseline_conditions": check_baseline_conditions(scenario, scenario.x0_initial),
    }
    if schedule is not None:
        lengths = np.diff(round_starts).tolist()
        e2 = np.array([r["e2norm"] for r in est_rows])
        tail = e2[len(e2) // 2 :] if e2.size else e2
        out |= {
            "schedule": {
                "T_clean": list(schedule.T_clean),
                "T_release": schedule.T_release,
                "T_round": schedule.T_round,
            },
            "rounds_completed": ctrl.round,
            "round_lengths": sorted(set(int(v) for v in lengths)),
            "tail_avg_e2norm": float(tail.mean()) if tail.size else math.nan,
            "final_estimates": est.to_dict() | {"x0c_hat": _safe_xc(est, scenario.prior.x0_clean)},
            "controller_stats": dict(ctrl.stats.__dict__),
        }
    return out


def _run_rep(args):
    scenario, seed, i = args
    return run_scenario(scenario, seed, i)


_AGG_KEYS = ("time_avg_l1", "final_l1", "throughput", "delay_proxy_s", "tail_avg_e2norm")


def run_monte_carlo(
    scenario: Scenario,
    n_reps: int | None = None,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> dict:
    """Replications ``0..n_reps-1``; writes per-rep CSVs and an aggregate summary."""
    n_reps = scenario.replications if n_reps is None else n_reps
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    seed = scenario.seed if seed is None else seed
    jobs = [(scenario, seed, i) for i in range(n_reps)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_run_rep, jobs))
    else:
        results = [_run_rep(j) for j in jobs]
    reps = [r.summary for r in results]
    agg = {}
    for key in _AGG_KEYS:
        vals = np.array([r.get(key, math.nan) for r in reps], dtype=float)
        agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals, ddof=1)) if n_reps > 1 else 0.0}
    report = {"scenario": scenario.name, "seed": seed, "n_reps": n_reps, "aggregate": agg, "replications": reps}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(results):
            r.write(out, prefix=f"rep{i:03d}_")
        with open(out / "aggregate.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("replication",) + _AGG_KEYS)
            for i, r in enumerate(reps):
                w.writerow([i] + [_fmt(r.get(k, math.nan)) for k in _AGG_KEYS])
        with open(out / "summary.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    report["results"] = results
    return report


# --- probe-level simulation ---------------------------------------------------


def simulate_probe_samples(
    plant: Plant, prior, k: int, n_rounds: int, rng: np.random.Generator, gap_fraction: float = 0.05
) -> dict[str, np.ndarray]:
    """Probe samples of ``n_rounds`` rounds without the queue dynamics.

    Valid whenever the clean guarantee holds: each sample then lands exactly
    on its uniformly drawn set point and sees a fresh noise draw.
    """
    iv = prior.intervals()
    gap = gap_fraction * (prior.x0_min - prior.x0_clean)
    out = {}
    ptrue = plant.flow
    for ep, name in ((1, "theta_alpha"), (2, "theta_Fmax"), (3, "theta_R")):
        lo, hi = iv[ep]
        if ep == 1:
            lo += gap
        x0 = rng.uniform(lo, hi, size=(n_rounds, k))
        eps = plant.noise.dist.ppf(rng.random((n_rounds, k)))
        f = kernels._flow_vec(x0, *ptrue.as_tuple())
        F = np.clip(f + kernels._gain_vec(x0, ptrue.x0_clean, ptrue.x0_c) * eps, 0.0, x0)
        out[name] = (F - prior.x0_clean) / (x0 - prior.x0_clean) if ep == 1 else F
    return out


def estimate_trajectory(samples: dict[str, np.ndarray], lam: float, init: Estimates) -> dict[str, np.ndarray]:
    """Per-round estimates from batched probe samples (no resets)."""
    th_r = samples["theta_R"]
    return {
        "alpha_hat": kernels.ewma_rounds(samples["theta_alpha"], lam, init.alpha_hat),
        "R_hat": kernels.ewma_rounds(th_r, lam, init.R_hat),
        "Fmax_hat": np.maximum.accumulate(
            np.maximum(samples["theta_Fmax"].max(axis=1), init.Fmax_hat)
        ),
        "epsmax_hat": np.maximum.accumulate(
            np.maximum(0.5 * (th_r.max(axis=1) - th_r.min(axis=1)), init.epsmax_hat)
        ),
    }


def error_trajectory(traj: dict[str, np.ndarray], plant: Plant) -> dict[str, np.ndarray]:
    f, n = plant.flow, plant.noise
    e = {
        "e_alpha": traj["alpha_hat"] / f.alpha - 1,
        "e_Fmax": traj["Fmax_hat"] / (f.Q + n.eps_max) - 1,
        "e_R": traj["R_hat"] / f.R - 1,
        "e_epsmax": traj["epsmax_hat"] / n.eps_max - 1,
    }
    e["e2norm"] = e["e_alpha"] ** 2 + e["e_Fmax"] ** 2 + e["e_R"] ** 2 + e["e_epsmax"] ** 2
    return e

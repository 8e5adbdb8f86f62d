"""Command-line entry point: ``probe-release <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import theory
from .config import load_scenario
from .controller import compute_schedule
from .estimator import Estimates
from .harness import run_monte_carlo
from .model import ControlDecomposition, decompose
from .translator import SegmentGeometry, Translator

EXIT_OK = 0
EXIT_CONDITION_FAILED = 2


def _cmd_simulate(args) -> int:
    sc = load_scenario(args.config)
    if args.horizon is not None:
        sc = sc.with_(horizon=args.horizon)
    report = run_monte_carlo(sc, n_reps=args.reps, seed=args.seed, out_dir=args.out_dir, workers=args.workers)
    agg = report["aggregate"]
    print(f"scenario {sc.name}: {report['n_reps']} replication(s), seed {report['seed']}")
    for key, v in agg.items():
        print(f"  {key:16s} mean {v['mean']:.6g}  std {v['std']:.6g}")
    if args.out_dir:
        print(f"outputs written to {args.out_dir}")
    return EXIT_OK


def _cmd_check(args) -> int:
    sc = load_scenario(args.config)
    rollouts = sc.theory.n_rollouts if args.rollouts is None else args.rollouts
    rep = theory.check_theorem_conditions(sc, gamma=args.gamma, n_rollouts=rollouts)
    base = theory.check_baseline_conditions(sc)
    if args.json:
        print(json.dumps({"theorem": rep.to_dict(), "baseline": base}, indent=2))
    else:
        print("probe-and-release stability conditions")
        print(rep.format())
        print(f"stable: {rep.stable}")
        print("no-coordination conditions")
        print(f"(1) mean demand {sc.demand.total_mean:.4g} < R {sc.flow.R:.4g}: {base['cond_1']}")
        print(
            f"(2) x0(0) {sc.x0_initial:.4g} <= x0_c {sc.flow.x0_c:.4g} and A_max+B_max"
            f" {sc.demand.A_max + sc.demand.B_max:.4g} <= Q-eps_max"
            f" {sc.flow.Q - sc.noise.eps_max:.4g}: {base['cond_2']}"
        )
        print(f"stable: {base['stable']}")
    if args.strict and not rep.stable:
        return EXIT_CONDITION_FAILED
    return EXIT_OK


def _cmd_theory(args) -> int:
    sc = load_scenario(args.config)
    g = args.gamma if args.gamma is not None else sc.theory.gamma
    if g is None:
        raise SystemExit("no gamma given on the command line or in the config")
    p, nz, pr, cfg = sc.flow, sc.noise, sc.prior, sc.estimator
    rollouts = sc.theory.n_rollouts if args.rollouts is None else args.rollouts
    rng = np.random.default_rng(np.random.SeedSequence(sc.seed, spawn_key=(10_000,)))
    rt, ci = theory.r_tilde(p, sc.demand, nz, pr, g, rollouts, rng, sc.theory.rollout_estimates)
    out = {
        "gamma": g,
        "Y": theory.error_bound_Y(cfg.lam, nz.sigma2, p.R, p.alpha, p.gap),
        "kappa": theory.kappa(g, cfg.lam, cfg.k, p, nz, pr),
        "p": theory.p_chi(np.sqrt(g) * (p.Q + nz.eps_max), p, nz, pr, cfg.k),
        "p_prime": theory.p_prime(np.sqrt(g) * nz.eps_max, nz, cfg.k),
        "rhs_iii": theory.noise_variance_rhs(g, p, nz, pr, cfg.lam, cfg.k),
        "R_tilde": rt,
        "R_tilde_ci": ci,
    }
    if args.json:
        print(json.dumps(out, indent=2))
    else:
        for key, v in out.items():
            print(f"{key:10s} {v:.6g}")
    return EXIT_OK


def _cmd_schedule(args) -> int:
    sc = load_scenario(args.config)
    k = sc.estimator.k if args.k is None else args.k
    sched = compute_schedule(sc.prior, k)
    print(f"T_clean {' '.join(str(c) for c in sched.T_clean)}")
    print(f"T_release {sched.T_release}")
    print(f"T_round {sched.T_round}")
    return EXIT_OK


def _decomposition(d: dict) -> ControlDecomposition:
    if "b_Bq" in d and "b_qs" in d:
        b_Bs = d.get("b_Bs", d["b_s"] - d["b_qs"])
        return ControlDecomposition(float(d["b_s"]), float(d["b_qs"]), float(b_Bs), float(d["b_Bq"]))
    return decompose(float(d["b_s"]), float(d["q"]), float(d["B"]))


def _cmd_translate(args) -> int:
    src = open(args.input) if args.input and args.input != "-" else sys.stdin
    with src:
        text = src.read().strip()
    if not text:
        return EXIT_OK
    if text.startswith("["):
        steps = json.loads(text)
    else:
        try:
            steps = [json.loads(text)]
        except json.JSONDecodeError:
            steps = [json.loads(line) for line in text.splitlines() if line.strip()]
    tr = None
    for i, d in enumerate(steps):
        if tr is None:
            g = d["geometry"]
            geom = SegmentGeometry(float(g["L"]), float(g["v_free"]), float(g["dt"]))
            tr = Translator(geom, d.get("ell_max"), int(d.get("next_id", 0)))
        e = d["estimates"]
        est = Estimates(float(e["alpha_hat"]), float(e["Fmax_hat"]), float(e["R_hat"]), float(e["epsmax_hat"]))
        for ins in tr.step(
            int(d.get("t", i)), _decomposition(d), est, float(d["x0_clean"]),
            float(d["A_max"]), float(d.get("x0_pred_s", 0.0)),
        ):
            print(json.dumps(ins.to_dict()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="probe-release", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run replications and write CSV/JSON outputs")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("check", help="evaluate the stability conditions")
    p.add_argument("config")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.add_argument("--strict", action="store_true", help="exit 2 if a condition fails")
    p.set_defaults(func=_cmd_check)

    p = sub.add_parser("theory", help="print Y, kappa, p, p', R~ at one gamma")
    p.add_argument("config")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--rollouts", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_theory)

    p = sub.add_parser("schedule", help="print the clean and release durations")
    p.add_argument("config")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=_cmd_schedule)

    p = sub.add_parser("translate", help="JSON step(s) in, JSON-lines speed instructions out")
    p.add_argument("input", nargs="?", default="-")
    p.set_defaults(func=_cmd_translate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Numerical evaluation of the stability bounds and condition checks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import simpson

from . import kernels
from .controller import PriorKnowledge, compute_schedule
from .model import DemandModel, FlowParams, NoiseModel, TrafficState

SIMPSON_NODES = 2049  # 2048 panels


def gamma_grid(n: int = 40) -> np.ndarray:
    """Log-spaced gammas in [1e-4, 0.25)."""
    return np.logspace(-4, math.log10(0.25), n + 1)[:-1]


def error_bound_Y(lam: float, sigma2: float, R: float, alpha: float, gap: float) -> float:
    """Bound on the long-run mean of e_alpha^2 + e_R^2."""
    if not 0 < lam <= 1:
        raise ValueError("lambda must lie in (0, 1]")
    if sigma2 < 0 or min(R, alpha, gap) <= 0:
        raise ValueError("need sigma2 >= 0 and positive R, alpha, gap")
    return (1 / R**2 + 1 / (alpha**2 * gap**2)) * lam * sigma2 / (2 - lam)


def error_bound_parts(lam: float, sigma2: float, R: float, alpha: float, gap: float) -> tuple[float, float]:
    """(bound on e_R^2, bound on e_alpha^2)."""
    c = lam * sigma2 / (2 - lam)
    return c / R**2, c / (alpha**2 * gap**2)


def p_chi(chi: float, params: FlowParams, noise: NoiseModel, prior: PriorKnowledge, k: int) -> float:
    """Probability that at least one of k episode-2 samples beats the running max by 3 chi / 4."""
    if chi < 0:
        raise ValueError("chi must be non-negative")
    lo, hi = prior.x0_min, prior.x0_max
    xc = params.x0_c
    if not lo <= xc <= hi:
        raise ValueError(f"x0_c={xc} outside the episode-2 range [{lo}, {hi}]")
    e = noise.eps_max
    top = float(noise.cdf(e))
    rho = 1.0 / (hi - lo)
    I1 = 0.0
    if xc > lo:
        grid = np.linspace(lo, xc, SIMPSON_NODES)
        inner = np.maximum(top - noise.cdf(e - 0.75 * chi + params.alpha * (xc - grid)), 0.0)
        I1 = rho * float(simpson(inner, x=grid))
    I2 = rho * (hi - xc) * max(top - float(noise.cdf(e - 0.75 * chi + params.Q - params.R)), 0.0)
    base = min(max(1.0 - I1 - I2, 0.0), 1.0)
    return float(min(max(1.0 - base**k, 0.0), 1.0))


def p_prime(psi: float, noise: NoiseModel, k: int) -> float:
    """Probability that one of k episode-3 samples lands in either noise tail of width psi / 2."""
    if psi < 0:
        raise ValueError("psi must be non-negative")
    e = noise.eps_max
    upper = 1.0 - float(noise.cdf(e - psi / 2))
    lower = float(noise.cdf(-e + psi / 2))
    base = min(max(1.0 - upper - lower, 0.0), 1.0)
    return float(min(max(1.0 - base**k, 0.0), 1.0))


def kappa(gamma: float, lam: float, k: int, params: FlowParams, noise: NoiseModel, prior: PriorKnowledge) -> float:
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if gamma == 0:
        return 0.0
    r = math.sqrt(gamma)
    return min(
        (1 - (1 - lam) ** (2 * k)) * gamma,
        7 * gamma / 16 * p_chi(r * (params.Q + noise.eps_max), params, noise, prior, k),
        7 * gamma / 16 * p_prime(r * noise.eps_max, noise, k),
    )


def noise_variance_rhs(
    gamma: float, params: FlowParams, noise: NoiseModel, prior: PriorKnowledge, lam: float, k: int
) -> float:
    """Largest noise variance the stability condition tolerates at ``gamma``."""
    kap = kappa(gamma, lam, k, params, noise, prior)
    a2g2 = params.alpha**2 * params.gap**2
    R2 = params.R**2
    num = kap * prior.delta2 * (2 - lam) * a2g2 * R2
    den = lam * (prior.delta2 + prior.Lambda) * (1 - (1 - lam) ** (2 * k)) * (R2 + a2g2)
    return num / den


def xi0_and_M(
    params: FlowParams, noise: NoiseModel, prior: PriorKnowledge, gamma: float
) -> tuple[TrafficState, int]:
    """Worst-case start state and rollout length for the throughput bound."""
    if not 0 <= gamma < 0.25:
        raise ValueError("gamma must lie in [0, 0.25)")
    s = prior.s
    Q = params.Q
    M = int(math.ceil(s * (Q - params.R + noise.eps_max) / prior.delta1 - 1e-9)) + s
    if gamma == 0:
        # the limit gamma -> 0 puts the queue exactly at the critical value
        x0 = params.x0_c
    else:
        x0 = params.x0_clean + (Q - params.x0_clean) / ((1 - 2 * math.sqrt(gamma)) * params.alpha)
    x = np.empty(s + 2)
    x[0] = x0
    x[1 : s + 1] = Q
    x[s + 1] = max(M - s - 1, 0) * Q
    return TrafficState(x), M


ROLLOUT_ESTIMATES = ("nominal", "worst-case")


def rollout_estimates(
    params: FlowParams, noise: NoiseModel, gamma: float, mode: str = "nominal"
) -> tuple[float, float, float, float]:
    """Estimates (alpha, x0_clean, critical value, R) the rollout controller uses.

    ``nominal`` uses the true values. ``worst-case`` lowers alpha by the
    factor (1 - 2 sqrt(gamma)) and targets the matching start occupancy.
    """
    if mode == "nominal":
        return params.as_tuple()
    if mode == "worst-case":
        a = (1 - 2 * math.sqrt(gamma)) * params.alpha
        xc = params.x0_clean + (params.Q - params.x0_clean) / a
        return (a, params.x0_clean, xc, params.R)
    raise ValueError(f"rollout estimates must be one of {ROLLOUT_ESTIMATES}")


def r_tilde(
    params: FlowParams,
    demand: DemandModel,
    noise: NoiseModel,
    prior: PriorKnowledge,
    gamma: float,
    n_rollouts: int,
    rng: np.random.Generator,
    mode: str = "nominal",
    chunk: int = 50_000,
) -> tuple[float, float]:
    """Monte Carlo mean of f(x0(m)) over m = 1..M from the worst-case start.

    Returns the estimate and a 95% normal-approximation half-width.
    """
    if n_rollouts < 100:
        raise ValueError("need at least 100 rollouts")
    xi0, M = xi0_and_M(params, noise, prior, gamma)
    est = rollout_estimates(params, noise, gamma, mode)
    means = []
    done = 0
    while done < n_rollouts:
        n = min(chunk, n_rollouts - done)
        A = demand.A.ppf(rng.random((n, M)))
        B = demand.B.ppf(rng.random((n, M)))
        eps = noise.dist.ppf(rng.random((n, M)))
        means.append(kernels.rollout_flow_means(xi0.x, A, B, eps, params.as_tuple(), est))
        done += n
    vals = np.concatenate(means)
    return float(vals.mean()), float(1.96 * vals.std(ddof=1) / math.sqrt(vals.size))


@dataclass
class TheoremReport:
    Y: float
    R_tilde: float | None
    R_tilde_ci: float | None
    cond_i: bool | None
    cond_ii: bool
    cond_iii: bool
    gamma_used: float
    rhs_iii: float
    kappa_value: float
    beta: float
    sigma2: float
    demand_mean: float
    A_max: float
    cond_ii_threshold: float
    assumptions: dict

    @property
    def stable(self) -> bool:
        return bool(self.cond_i) and self.cond_ii and self.cond_iii

    def to_dict(self) -> dict:
        return asdict(self) | {"stable": self.stable}

    def format(self) -> str:
        rt = "n/a" if self.R_tilde is None else f"{self.R_tilde:.4f} +/- {self.R_tilde_ci:.4f}"
        return "\n".join(
            [
                f"(i)   mean demand {self.demand_mean:.4g} < R~ {rt}: {self.cond_i}",
                f"(ii)  A_max {self.A_max:.4g} < {self.cond_ii_threshold:.4g}: {self.cond_ii}",
                f"(iii) sigma2 {self.sigma2:.4g} < rhs {self.rhs_iii:.4g}"
                f" at gamma {self.gamma_used:.4g}: {self.cond_iii}",
                f"kappa {self.kappa_value:.6g}  Y {self.Y:.6g}  beta {self.beta:.6g}",
                f"prior bounds: {self.assumptions}",
            ]
        )


def beta_coefficient(
    gamma: float, params: FlowParams, noise: NoiseModel, demand: DemandModel,
    prior: PriorKnowledge, lam: float, k: int, mu2: float | None = None,
) -> float:
    """Drift coefficient from the joint Lyapunov argument; diagnostic only.

    ``mu2`` must lie in (0, 1/(1 - mu1)); the default is the midpoint.
    """
    if mu2 is None:
        mu2 = 0.5 / (1 - prior.mu1)
    T = compute_schedule(prior, k).T_round
    G1 = T * (demand.A_max + demand.B_max)
    G2 = G1 / prior.mu1
    c = mu2 * kappa(gamma, lam, k, params, noise, prior)
    s2 = noise.sigma2
    tail = s2 / (params.alpha**2 * params.gap**2) + s2 / params.R**2
    return lam * (1 - (1 - lam) ** (2 * k)) / ((2 * lam - 4) * G2) * tail - c / (2 * G2)


def check_theorem_conditions(
    scenario,
    lam: float | None = None,
    k: int | None = None,
    gamma_grid_values=None,
    gamma: float | None = None,
    n_rollouts: int | None = None,
    rng: np.random.Generator | None = None,
) -> TheoremReport:
    """Evaluate the three stability conditions.

    With ``gamma`` given, condition (iii) and R~ are evaluated there;
    otherwise the smallest grid gamma meeting (iii) is used (or the grid
    point with the largest right-hand side when none does). ``n_rollouts=0``
    skips R~ and leaves condition (i) undecided.
    """
    p, nz, dm, pr = scenario.flow, scenario.noise, scenario.demand, scenario.prior
    lam = scenario.estimator.lam if lam is None else lam
    k = scenario.estimator.k if k is None else k
    th = scenario.theory
    gamma = th.gamma if gamma is None else gamma
    n_rollouts = th.n_rollouts if n_rollouts is None else n_rollouts
    if gamma is None:
        grid = gamma_grid(th.n_grid) if gamma_grid_values is None else np.asarray(gamma_grid_values)
        rhs = np.array([noise_variance_rhs(g, p, nz, pr, lam, k) for g in grid])
        ok = np.flatnonzero(nz.sigma2 < rhs)
        gamma = float(grid[ok[0]] if ok.size else grid[int(np.argmax(rhs))])
    rhs_g = noise_variance_rhs(gamma, p, nz, pr, lam, k)
    kap = kappa(gamma, lam, k, p, nz, pr)
    thr = min(p.x0_clean, p.R - nz.eps_max)
    Rt = ci = None
    cond_i = None
    if n_rollouts:
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(scenario.seed, spawn_key=(10_000,)))
        Rt, ci = r_tilde(p, dm, nz, pr, gamma, n_rollouts, rng, th.rollout_estimates)
        cond_i = dm.total_mean < Rt
    return TheoremReport(
        Y=error_bound_Y(lam, nz.sigma2, p.R, p.alpha, p.gap),
        R_tilde=Rt,
        R_tilde_ci=ci,
        cond_i=cond_i,
        cond_ii=dm.A_max < thr,
        cond_iii=bool(nz.sigma2 < rhs_g),
        gamma_used=gamma,
        rhs_iii=rhs_g,
        kappa_value=kap,
        beta=beta_coefficient(gamma, p, nz, dm, pr, lam, k, th.mu2),
        sigma2=nz.sigma2,
        demand_mean=dm.total_mean,
        A_max=dm.A_max,
        cond_ii_threshold=thr,
        assumptions=pr.check_assumptions(p.R, nz.eps_max, dm.A_max, dm.B_max, dm.total_mean, Rt),
    )


def check_baseline_conditions(scenario, x0_initial: float | None = None) -> dict:
    """Stability without coordination: either condition suffices."""
    p, nz, dm = scenario.flow, scenario.noise, scenario.demand
    x0 = scenario.x0_initial if x0_initial is None else x0_initial
    c1 = dm.total_mean < p.R
    c2 = x0 <= p.x0_c and dm.A_max + dm.B_max <= p.Q - nz.eps_max
    return {"cond_1": bool(c1), "cond_2": bool(c2), "stable": bool(c1 or c2)}

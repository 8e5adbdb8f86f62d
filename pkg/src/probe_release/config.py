"""Scenario definition and YAML loading."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .controller import PriorKnowledge
from .distributions import BoundedDist
from .estimator import EstimatorConfig, Estimates
from .model import DemandModel, FlowParams, NoiseModel, check_compatible

CONFIG_DIR = Path(__file__).parent / "configs"
CONTROLLERS = ("probe-release", "no-coordination")


@dataclass(frozen=True)
class Plant:
    """Ground truth that a schedule patch may change mid-run."""

    flow: FlowParams
    noise: NoiseModel
    demand: DemandModel

    def __post_init__(self) -> None:
        check_compatible(self.flow, self.noise)


@dataclass(frozen=True)
class Patch:
    step: int
    changes: dict


@dataclass(frozen=True)
class TheorySettings:
    gamma: float | None = None
    n_rollouts: int = 100_000
    rollout_estimates: str = "nominal"
    n_grid: int = 40
    mu2: float | None = None


@dataclass(frozen=True)
class Geometry:
    L: float
    v_free: float


@dataclass(frozen=True)
class Scenario:
    name: str
    plant: Plant
    prior: PriorKnowledge
    estimator: EstimatorConfig
    controller: str = "probe-release"
    horizon: int = 10_000
    replications: int = 1
    seed: int = 0
    schedule: tuple[Patch, ...] = ()
    x0_initial: float = 0.0
    initial_estimates: Estimates | None = None
    R0_guess: float | None = None
    dt: float = 10.0
    evaluate: bool = True
    gap_fraction: float = 0.05
    theory: TheorySettings = field(default_factory=TheorySettings)
    geometry: Geometry | None = None

    def __post_init__(self) -> None:
        if self.controller not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if abs(self.prior.x0_clean - self.plant.flow.x0_clean) > 1e-12:
            raise ValueError("prior x0_clean differs from the plant's")
        steps = [p.step for p in self.schedule]
        if steps != sorted(steps) or any(s < 0 for s in steps):
            raise ValueError("schedule steps must be non-negative and sorted")

    # shortcuts
    flow = property(lambda self: self.plant.flow)
    noise = property(lambda self: self.plant.noise)
    demand = property(lambda self: self.plant.demand)

    def with_(self, **kw) -> Scenario:
        return replace(self, **kw)


def apply_schedule_patch(plant: Plant, changes: dict) -> Plant:
    """New plant parameters after a patch; untouched quantities carry over.

    Recognised keys: ``flow`` (alpha, x0_clean, x0_c, R or F_max),
    ``noise`` (kind, eps_max, sigma2), ``demand`` (A, B distributions) and
    ``demand_scale`` (A, B multipliers).
    """
    unknown = set(changes) - {"flow", "noise", "demand", "demand_scale"}
    if unknown:
        raise ValueError(f"unknown patch keys {sorted(unknown)}")
    noise = plant.noise
    if "noise" in changes:
        nz = {"kind": noise.kind, "eps_max": noise.eps_max} | dict(changes["noise"])
        if "sigma2" not in changes["noise"] and nz["kind"] != "uniform":
            raise ValueError("changing non-uniform noise needs an explicit sigma2")
        noise = NoiseModel(nz["kind"], float(nz["eps_max"]), nz.get("sigma2"))
    flow = plant.flow
    if "flow" in changes:
        fd = dict(changes["flow"])
        if "F_max" in fd and "x0_c" in fd:
            raise ValueError("give either F_max or x0_c, not both")
        base = flow.to_dict() | {k: v for k, v in fd.items() if k != "F_max"}
        if "F_max" in fd:
            flow = FlowParams.from_capacity(
                base["alpha"], base["x0_clean"], fd["F_max"], noise.eps_max, base["R"]
            )
        else:
            flow = FlowParams(**{k: float(v) for k, v in base.items()})
    demand = plant.demand
    if "demand" in changes:
        dd = changes["demand"]
        demand = DemandModel(
            BoundedDist.from_dict(dd["A"]) if "A" in dd else demand.A,
            BoundedDist.from_dict(dd["B"]) if "B" in dd else demand.B,
        )
    if "demand_scale" in changes:
        sc = changes["demand_scale"]
        demand = demand.scaled(float(sc.get("A", 1.0)), float(sc.get("B", 1.0)))
    return Plant(flow, noise, demand)


def _flow_from(d: dict, noise: NoiseModel, x0_clean: float) -> FlowParams:
    if "F_max" in d:
        return FlowParams.from_capacity(d["alpha"], x0_clean, d["F_max"], noise.eps_max, d["R"])
    return FlowParams(float(d["alpha"]), x0_clean, float(d["x0_c"]), float(d["R"]))


def scenario_from_dict(d: dict) -> Scenario:
    nd = d["noise"]
    noise = NoiseModel(nd.get("kind", "uniform"), float(nd["eps_max"]), nd.get("sigma2"))
    pd = dict(d["prior"])
    x0_clean = float(d.get("flow", {}).get("x0_clean", pd.get("x0_clean")))
    pd.setdefault("x0_clean", x0_clean)
    prior = PriorKnowledge(
        s=int(pd["s"]),
        x0_clean=float(pd["x0_clean"]),
        x0_min=float(pd["x0_min"]),
        x0_max=float(pd["x0_max"]),
        delta1=float(pd["delta1"]),
        delta2=float(pd["delta2"]),
        Lambda=float(pd["Lambda"]),
        mu1=float(pd["mu1"]),
    )
    flow = _flow_from(d["flow"], noise, x0_clean)
    demand = DemandModel(
        BoundedDist.from_dict(d["demand"]["A"]), BoundedDist.from_dict(d["demand"]["B"])
    )
    ed = d.get("estimator", {})
    reset = ed.get("reset_period")
    est_cfg = EstimatorConfig(
        lam=float(ed.get("lambda", 0.08)),
        k=int(ed.get("k", 3)),
        reset_period=math.inf if reset in (None, "inf") else float(reset),
        reset_defaults=tuple(float(v) for v in ed.get("reset_defaults", (0.0, 0.0))),
    )
    init = ed.get("initial")
    initial = None
    if init is not None:
        initial = Estimates(
            float(init["alpha_hat"]),
            float(init.get("Fmax_hat", est_cfg.reset_defaults[0])),
            float(init["R_hat"]),
            float(init.get("epsmax_hat", est_cfg.reset_defaults[1])),
        )
    patches = tuple(
        Patch(int(p["step"]), {k: v for k, v in p.items() if k != "step"})
        for p in d.get("schedule", []) or []
    )
    th = d.get("theory", {}) or {}
    geo = d.get("geometry")
    return Scenario(
        name=str(d.get("name", "scenario")),
        plant=Plant(flow, noise, demand),
        prior=prior,
        estimator=est_cfg,
        controller=d.get("controller", "probe-release"),
        horizon=int(d.get("horizon", 10_000)),
        replications=int(d.get("replications", 1)),
        seed=int(d.get("seed", 0)),
        schedule=patches,
        x0_initial=float(d.get("initial", {}).get("x0", 0.0)),
        initial_estimates=initial,
        R0_guess=ed.get("R0_guess"),
        dt=float(d.get("dt", 10.0)),
        evaluate=bool(d.get("evaluate", True)),
        gap_fraction=float(ed.get("gap_fraction", 0.05)),
        theory=TheorySettings(
            gamma=th.get("gamma"),
            n_rollouts=int(th.get("n_rollouts", 100_000)),
            rollout_estimates=th.get("rollout_estimates", "nominal"),
            n_grid=int(th.get("n_grid", 40)),
            mu2=th.get("mu2"),
        ),
        geometry=Geometry(float(geo["L"]), float(geo["v_free"])) if geo else None,
    )


def resolve_config(path_or_name: str | Path) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    for cand in (CONFIG_DIR / p.name, CONFIG_DIR / f"{p.name}.yaml"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no config at {path_or_name} and no bundled config of that name")


def load_scenario(path_or_name: str | Path) -> Scenario:
    with open(resolve_config(path_or_name)) as fh:
        return scenario_from_dict(yaml.safe_load(fh))


def bundled_configs() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.yaml"))

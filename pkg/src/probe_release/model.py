"""Ground-truth plant: flow function, noisy outflow, demand and the queue update."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .distributions import BoundedDist, symmetric_noise


class DomainError(ValueError):
    """An input lies outside the domain of an operation."""


class InvariantViolation(RuntimeError):
    """A state update would break a model invariant."""


@dataclass(frozen=True)
class FlowParams:
    """Piecewise-linear flow function with a capacity drop past ``x0_c``."""

    alpha: float
    x0_clean: float
    x0_c: float
    R: float

    def __post_init__(self) -> None:
        vals = (self.alpha, self.x0_clean, self.x0_c, self.R)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("flow parameters must be finite")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.x0_clean < self.x0_c:
            raise ValueError("need 0 < x0_clean < x0_c")
        if not self.R < self.Q:
            raise ValueError(f"R={self.R} must be below the peak flow Q={self.Q}")

    @property
    def Q(self) -> float:
        return self.alpha * (self.x0_c - self.x0_clean) + self.x0_clean

    @property
    def gap(self) -> float:
        return self.x0_c - self.x0_clean

    @classmethod
    def from_capacity(
        cls, alpha: float, x0_clean: float, F_max: float, eps_max: float, R: float
    ) -> FlowParams:
        """Build from the observable peak outflow F_max = Q + eps_max."""
        Q = F_max - eps_max
        return cls(alpha, x0_clean, x0_clean + (Q - x0_clean) / alpha, R)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.x0_clean, self.x0_c, self.R)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "x0_clean": self.x0_clean, "x0_c": self.x0_c, "R": self.R}


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean outflow noise on ``[-eps_max, eps_max]``."""

    kind: str
    eps_max: float
    sigma2: float | None = None
    dist: BoundedDist = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        dist = symmetric_noise(self.kind, self.eps_max, self.sigma2)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "sigma2", float(dist.var))

    def cdf(self, x):
        return self.dist.cdf(x)

    def pdf(self, x):
        return self.dist.pdf(x)

    def sample(self, rng: np.random.Generator, size=None):
        return self.dist.sample(rng, size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eps_max": self.eps_max, "sigma2": self.sigma2}


def check_compatible(params: FlowParams, noise: NoiseModel) -> None:
    """Raise unless the noise bound keeps the outflow below the occupancy."""
    limit = (1 - params.alpha) * params.gap
    if noise.eps_max > limit + 1e-12:
        raise ValueError(
            f"eps_max={noise.eps_max} exceeds (1-alpha)(x0_c-x0_clean)={limit:.6g};"
            " outflow could exceed the queue"
        )


@dataclass(frozen=True)
class DemandModel:
    """Uncontrolled demand A and CAV demand B per step."""

    A: BoundedDist
    B: BoundedDist

    def __post_init__(self) -> None:
        if self.A.low < 0:
            raise ValueError("A must be non-negative")
        if self.B.low < 0 or not 0 < self.B.high < math.inf:
            raise ValueError("B must be supported on [0, B_max] with 0 < B_max < inf")

    A_mean = property(lambda self: self.A.mean)
    B_mean = property(lambda self: self.B.mean)
    A_var = property(lambda self: self.A.var)
    B_var = property(lambda self: self.B.var)
    A_min = property(lambda self: self.A.low)
    A_max = property(lambda self: self.A.high)
    B_max = property(lambda self: self.B.high)

    @property
    def total_mean(self) -> float:
        return self.A_mean + self.B_mean

    def scaled(self, a_factor: float = 1.0, b_factor: float = 1.0) -> DemandModel:
        return DemandModel(self.A.scaled(a_factor), self.B.scaled(b_factor))

    def to_dict(self) -> dict:
        return {"A": self.A.to_dict(), "B": self.B.to_dict()}


@dataclass(frozen=True)
class TrafficState:
    """``x = [x0, x1, ..., xs, q]``: bottleneck, pipeline slots, virtual queue."""

    x: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("state needs at least [x0, x1, q]")
        if not np.all(np.isfinite(x)) or np.any(x < 0):
            raise InvariantViolation(f"state entries must be finite and >= 0: {x}")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @classmethod
    def zeros(cls, s: int) -> TrafficState:
        return cls(np.zeros(s + 2))

    @classmethod
    def initial(cls, s: int, x0: float = 0.0, q: float = 0.0) -> TrafficState:
        x = np.zeros(s + 2)
        x[0] = x0
        x[-1] = q
        return cls(x)

    @property
    def s(self) -> int:
        return self.x.size - 2

    @property
    def x0(self) -> float:
        return float(self.x[0])

    @property
    def pipeline(self) -> np.ndarray:
        return self.x[1:-1]

    @property
    def q(self) -> float:
        return float(self.x[-1])


@dataclass(frozen=True)
class ControlDecomposition:
    """How the release ``b_s`` splits between queued and new CAVs."""

    b_s: float
    b_qs: float
    b_Bs: float
    b_Bq: float
    clamped: bool = False


def decompose(b_s: float, q: float, B: float) -> ControlDecomposition:
    """Split a feasible release, serving the virtual queue first."""
    b_qs = min(b_s, q)
    # (q + B) - q can exceed B by one ulp
    b_Bs = min(max(b_s - q, 0.0), B)
    return ControlDecomposition(b_s, b_qs, b_Bs, B - b_Bs)


def flow_function(params: FlowParams, x0: float) -> float:
    if x0 < 0:
        raise DomainError(f"x0 must be non-negative, got {x0}")
    return kernels.flow(float(x0), *params.as_tuple())


@dataclass
class Diagnostics:
    """Counters for clamps that long runs record instead of raising."""

    outflow_clamps: int = 0
    control_clamps: int = 0


def sample_outflow(
    params: FlowParams,
    noise: NoiseModel,
    x0: float,
    rng: np.random.Generator,
    diagnostics: Diagnostics | None = None,
) -> float:
    if x0 < 0:
        raise DomainError(f"x0 must be non-negative, got {x0}")
    eps = float(noise.sample(rng))
    F, clamped = kernels.outflow(float(x0), eps, *params.as_tuple())
    if clamped and diagnostics is not None:
        diagnostics.outflow_clamps += 1
    return F


def sample_demand(demand: DemandModel, rng: np.random.Generator) -> tuple[float, float]:
    return float(demand.A.sample(rng)), float(demand.B.sample(rng))


def step_dynamics(
    state: TrafficState,
    inflow: tuple[float, float],
    F: float,
    b_s: float,
    diagnostics: Diagnostics | None = None,
) -> tuple[TrafficState, ControlDecomposition]:
    """Advance one step. ``b_s`` is clamped into ``[0, q + B]`` if needed."""
    A, B = inflow
    x = state.x
    s = state.s
    q = x[-1]
    b = min(max(b_s, 0.0), q + B)
    clamped = b != b_s
    if clamped and diagnostics is not None:
        diagnostics.control_clamps += 1
    x0_next = x[0] + x[1] - F
    if x0_next < -1e-9 * max(1.0, x[0] + x[1]):
        raise InvariantViolation(
            f"outflow {F} exceeds x0 + x1 = {x[0] + x[1]} at t={state.t}"
        )
    new = np.empty_like(x)
    new[0] = max(x0_next, 0.0)
    new[1:s] = x[2 : s + 1]
    new[s] = A + b
    dec = decompose(b, q, B)
    new[s + 1] = max(q - dec.b_qs + dec.b_Bq, 0.0)
    if clamped:
        dec = ControlDecomposition(dec.b_s, dec.b_qs, dec.b_Bs, dec.b_Bq, True)
    return TrafficState(new, state.t + 1), dec


def l1_norm(state: TrafficState | np.ndarray) -> float:
    x = state.x if isinstance(state, TrafficState) else np.asarray(state)
    return float(np.abs(x).sum())


def time_average_l1(trajectory) -> tuple[float, np.ndarray]:
    """Mean l1-norm over a trajectory and the running prefix averages.

    Accepts a sequence of states or a 1-D array of precomputed norms.
    """
    if isinstance(trajectory, np.ndarray) and trajectory.ndim == 1:
        norms = trajectory.astype(float)
    else:
        norms = np.array([l1_norm(s) for s in trajectory], dtype=float)
    if norms.size == 0:
        raise ValueError("empty trajectory")
    prefix = np.cumsum(norms) / np.arange(1, norms.size + 1)
    return float(prefix[-1]), prefix

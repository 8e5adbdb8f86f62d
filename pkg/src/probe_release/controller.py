"""The probe-and-release controller.

Each round runs three probing episodes followed by a release phase:

* Ep1: k steers into [x0_clean, x0_min] sample the slope alpha.
* Ep2: k steers into [x0_min, x0_max] sample the peak outflow.
* Ep3: k steers into [x0_max, 1.5 x0_max] sample the discharge rate R.
* Release: hold the bottleneck at the estimated critical occupancy.
* Ep4: stop releasing until the bottleneck is clean again.

Every steer is followed by a clean sub-phase with b_s = 0 long enough that the
steered slug has drained before the next one lands.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .estimator import (
    DegenerateEstimate,
    Estimates,
    RoundSamples,
    estimated_params,
)
from .model import ControlDecomposition, TrafficState, decompose


class Phase(str, Enum):
    EP1_STEER = "Ep1Steer"
    EP1_CLEAN = "Ep1Clean"
    EP2_STEER = "Ep2Steer"
    EP2_CLEAN = "Ep2Clean"
    EP3_STEER = "Ep3Steer"
    EP3_CLEAN = "Ep3Clean"
    RELEASE = "Release"
    EP4_CLEAN = "Ep4Clean"


_STEER = {1: Phase.EP1_STEER, 2: Phase.EP2_STEER, 3: Phase.EP3_STEER}
_CLEAN = {1: Phase.EP1_CLEAN, 2: Phase.EP2_CLEAN, 3: Phase.EP3_CLEAN}
_EPISODE = {p: i for i, p in _STEER.items()} | {p: i for i, p in _CLEAN.items()}


class ConsistencyError(RuntimeError):
    """Controller bookkeeping disagrees with the observed time line."""


@dataclass(frozen=True)
class PriorKnowledge:
    s: int
    x0_clean: float
    x0_min: float
    x0_max: float
    delta1: float
    delta2: float
    Lambda: float
    mu1: float

    def __post_init__(self) -> None:
        if int(self.s) != self.s or self.s < 1:
            raise ValueError("s must be a positive integer")
        if not self.x0_clean < self.x0_min < self.x0_max:
            raise ValueError("need x0_clean < x0_min < x0_max")
        if min(self.delta1, self.delta2, self.Lambda) <= 0:
            raise ValueError("delta1, delta2 and Lambda must be positive")
        if not self.Lambda + self.mu1 * self.delta2 < 0:
            raise ValueError(
                f"mu1={self.mu1} must be below -Lambda/delta2 = {-self.Lambda / self.delta2:.6g}"
            )

    def intervals(self) -> dict[int, tuple[float, float]]:
        return {
            1: (self.x0_clean, self.x0_min),
            2: (self.x0_min, self.x0_max),
            3: (self.x0_max, 1.5 * self.x0_max),
        }

    def check_assumptions(
        self,
        R: float,
        eps_max: float,
        A_max: float,
        B_max: float,
        total_mean: float,
        r_tilde: float | None = None,
    ) -> dict[str, bool | None]:
        """Which of the prior bounds hold against a known plant."""
        return {
            "delta1": self.delta1 <= min(self.x0_clean, R - eps_max) - A_max,
            "delta2": None if r_tilde is None else self.delta2 <= r_tilde - total_mean,
            "Lambda": self.Lambda >= A_max + B_max,
        }

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Schedule:
    T_clean: tuple[int, int, int, int]
    T_release: int
    k: int

    @property
    def T_round(self) -> int:
        c = self.T_clean
        return 3 * self.k + self.k * (c[0] + c[1] + c[2]) + self.T_release + c[3]

    @property
    def T_probe(self) -> int:
        """Steps from the first steer to the end of episode 3."""
        c = self.T_clean
        return 3 * self.k + self.k * (c[0] + c[1] + c[2])


def compute_schedule(prior: PriorKnowledge, k: int) -> Schedule:
    p = prior
    if p.Lambda + p.mu1 * p.delta2 >= 0:
        raise ValueError("invalid mu1: need Lambda + mu1 * delta2 < 0")
    # small slack so an exact division is not pushed up by rounding
    up = lambda v: int(math.ceil(v - 1e-9))  # noqa: E731
    c1 = up((p.x0_min - p.x0_clean) / p.delta1)
    c2 = up((p.x0_max - p.x0_clean) / p.delta1)
    c3 = up((1.5 * p.x0_max - p.x0_clean) / p.delta1)
    c4 = up(((p.s + 1) * p.x0_max - p.x0_clean) / p.delta1)
    busy = 3 * k + k * (c1 + c2 + c3) + c4
    T_rel = up((p.mu1 - 1) * p.Lambda * busy / (p.Lambda + p.mu1 * p.delta2))
    return Schedule((c1, c2, c3, c4), T_rel, k)


def steer_control(x0_set: float, A_t: float) -> tuple[float, bool]:
    """Release that puts exactly ``x0_set`` into the last pipeline slot."""
    b = x0_set - A_t
    if b < 0:
        return 0.0, True
    return b, False


def predict_queue(state: TrafficState | np.ndarray, est: Estimates, x0_clean: float) -> np.ndarray:
    """Forecast of x0 at t, t+1, ..., t+s (index l holds t+l)."""
    x = state.x if isinstance(state, TrafficState) else np.asarray(state, dtype=float)
    out = np.empty(x.size - 1)
    kernels.predict_into(x, *estimated_params(est, x0_clean), out)
    return out


def release_control(
    x0_set: float, x0_pred_s: float, est: Estimates, x0_clean: float, A_t: float
) -> float:
    return kernels.release_target(x0_set, x0_pred_s, *estimated_params(est, x0_clean), A_t)


def clamp_control(b_star: float, q: float, B_t: float) -> ControlDecomposition:
    b_s = min(max(b_star, 0.0), q + B_t)
    dec = decompose(b_s, q, B_t)
    if b_s != b_star:
        return ControlDecomposition(dec.b_s, dec.b_qs, dec.b_Bs, dec.b_Bq, True)
    return dec


@dataclass
class ControllerStats:
    rejected_samples: int = 0
    steer_clamps: int = 0
    release_clamps: int = 0
    wait_steps: int = 0
    degenerate_setpoints: int = 0
    makeup_steers: int = 0


class ProbeReleaseController:
    """Sequential state machine driving b_s.

    Per step the caller invokes :meth:`act` before the plant moves and
    :meth:`observe` with the realised (x0, F) afterwards. ``observe`` returns
    the round's samples once all 3k of them are in; the caller feeds them to
    the estimator before the next :meth:`act` so the release set point uses
    the fresh estimates.
    """

    def __init__(
        self,
        prior: PriorKnowledge,
        schedule: Schedule,
        rng: np.random.Generator,
        gap_fraction: float = 0.05,
    ):
        self.prior = prior
        self.schedule = schedule
        self.rng = rng
        self.k = schedule.k
        self.s = prior.s
        self.gap = gap_fraction * (prior.x0_min - prior.x0_clean)
        self._intervals = prior.intervals()
        self.stats = ControllerStats()
        self.round = 0
        self.phase = Phase.EP1_STEER
        self.x0_set = math.nan
        self.pending: deque[tuple[int, int]] = deque()
        self.round_starts: list[int] = []
        self._new_round()

    def _new_round(self) -> None:
        self.phase = Phase.EP1_STEER
        self.step_in_phase = 0
        self.rep = 0
        self.buffers: dict[int, list[float]] = {1: [], 2: [], 3: []}
        self.makeup: list[int] = []
        self.in_makeup = False
        self.handed_over = False
        self.release_setpoint: float | None = None
        self.release_steps = 0
        self.round_start: int | None = None

    # -- helpers -----------------------------------------------------------

    def _draw_setpoint(self, episode: int) -> float:
        lo, hi = self._intervals[episode]
        if episode == 1:
            lo = lo + self.gap
        return float(self.rng.uniform(lo, hi))

    def _missing(self) -> list[int]:
        out = []
        for ep in (1, 2, 3):
            out.extend([ep] * (self.k - len(self.buffers[ep])))
        return out

    def _after_clean(self, episode: int) -> None:
        if self.in_makeup:
            if self.makeup:
                self.phase = _STEER[self.makeup[0]]
            else:
                self.in_makeup = False
                self.phase = Phase.RELEASE
            return
        if self.rep < self.k:
            self.phase = _STEER[episode]
        elif episode < 3:
            self.rep = 0
            self.phase = _STEER[episode + 1]
        else:
            self.phase = Phase.RELEASE

    # -- main interface ----------------------------------------------------

    def act(self, t: int, x: np.ndarray, A: float, B: float, est: Estimates) -> float:
        """Feasible release ``b_s`` for step ``t``; ``x`` is the current state vector."""
        if self.round_start is None:
            self.round_start = t
            self.round_starts.append(t)
        q = x[-1]
        self.label = self.phase
        if self.phase == Phase.RELEASE and self.release_setpoint is None:
            if not self.pending and not self.handed_over:
                missing = self._missing()
                if missing:
                    self.makeup = missing
                    self.in_makeup = True
                    self.phase = _STEER[missing[0]]
                    self.label = self.phase
            elif self.handed_over:
                try:
                    _, _, xc, _ = estimated_params(est, self.prior.x0_clean)
                except DegenerateEstimate:
                    self.stats.degenerate_setpoints += 1
                    xc = self.prior.x0_clean
                self.release_setpoint = xc
                self.x0_set = xc

        phase = self.phase
        if phase in _STEER.values():
            ep = _EPISODE[phase]
            if self.in_makeup:
                self.makeup.pop(0)
                self.stats.makeup_steers += 1
            else:
                self.rep += 1
            self.x0_set = self._draw_setpoint(ep)
            b, clamped = steer_control(self.x0_set, A)
            if b > q + B:
                b = q + B
                clamped = True
            if clamped:
                self.stats.steer_clamps += 1
            self.pending.append((t + self.s + 1, ep))
            self.phase = _CLEAN[ep]
            self.step_in_phase = 0
            return b

        if phase in _CLEAN.values():
            ep = _EPISODE[phase]
            self.step_in_phase += 1
            if self.step_in_phase >= self.schedule.T_clean[ep - 1]:
                self.step_in_phase = 0
                self._after_clean(ep)
            return 0.0

        if phase == Phase.RELEASE:
            self.release_steps += 1
            b = 0.0
            if self.release_setpoint is None:
                self.stats.wait_steps += 1
            else:
                pred = predict_queue(x, est, self.prior.x0_clean)
                b_star = release_control(
                    self.release_setpoint, pred[-1], est, self.prior.x0_clean, A
                )
                b = min(max(b_star, 0.0), q + B)
                if b != b_star:
                    self.stats.release_clamps += 1
            if self.release_steps >= self.schedule.T_release:
                self.phase = Phase.EP4_CLEAN
                self.step_in_phase = 0
            return b

        # Ep4 clean
        self.step_in_phase += 1
        if self.step_in_phase >= self.schedule.T_clean[3]:
            if self.pending or not self.handed_over:
                raise ConsistencyError(f"round {self.round} ended at t={t} without all samples")
            self.round += 1
            self._new_round()
        return 0.0

    def observe(self, t: int, x0: float, F: float) -> RoundSamples | None:
        """Record the realised (x0, F) of step ``t``; return samples when complete."""
        while self.pending and self.pending[0][0] <= t:
            due, ep = self.pending.popleft()
            if due < t:
                raise ConsistencyError(f"sample due at {due} missed (now {t})")
            lo, hi = self._intervals[ep]
            if ep == 1:
                lo = lo + self.gap
            tol = 1e-9 * max(1.0, hi)
            if not lo - tol <= x0 <= hi + tol or len(self.buffers[ep]) >= self.k:
                self.stats.rejected_samples += 1
                continue
            if ep == 1:
                value = (F - self.prior.x0_clean) / (x0 - self.prior.x0_clean)
            else:
                value = F
            self.buffers[ep].append(value)
        if self.handed_over or self.pending:
            return None
        if all(len(self.buffers[ep]) == self.k for ep in (1, 2, 3)):
            self.handed_over = True
            return RoundSamples(
                tuple(self.buffers[1]), tuple(self.buffers[2]), tuple(self.buffers[3])
            )
        return None


class UncoordinatedController:
    """Every CAV passes straight through: b_s = B."""

    label = "NoCoord"
    round = 0

    def act(self, t: int, x: np.ndarray, A: float, B: float, est: Estimates) -> float:
        return B + x[-1]

    def observe(self, t: int, x0: float, F: float) -> None:
        return None

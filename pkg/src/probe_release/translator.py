"""Per-vehicle speed instructions from the fluid release decisions.

New CAVs passed straight through get the free-flow speed. Postponed CAVs get
a holding speed that delays their arrival by ``ell`` extra steps, and a
modified speed when the controller later releases them, timed so they reach
the bottleneck exactly ``s`` steps after the release.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .estimator import Estimates, estimated_params
from .model import ControlDecomposition


class TranslationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmentGeometry:
    L: float
    v_free: float
    dt: float

    def __post_init__(self) -> None:
        if min(self.L, self.v_free, self.dt) <= 0:
            raise ValueError("L, v_free and dt must be positive")
        steps = self.L / (self.v_free * self.dt)
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise ValueError(f"L / (v_free dt) = {steps} is not a positive integer")

    @property
    def s(self) -> int:
        return int(round(self.L / (self.v_free * self.dt)))


def hold_speed(geom: SegmentGeometry, ell: int, ell_max: int | None = None) -> float:
    """Speed that makes the segment take s + ell steps."""
    ell_max = 10 * geom.s if ell_max is None else ell_max
    if ell < 1:
        raise TranslationError("ell must be >= 1")
    if ell > ell_max:
        raise TranslationError(f"ell={ell} exceeds the cap {ell_max}")
    return geom.L / ((geom.s + ell) * geom.dt)


def modified_speed(geom: SegmentGeometry, t0: int, t: int, v_hold: float) -> float:
    """Speed that covers the remaining distance in exactly s steps."""
    if t < t0:
        raise TranslationError("release before entry")
    remaining = geom.L - geom.dt * (t - t0) * v_hold
    if remaining <= 0:
        raise TranslationError(f"no distance left (entered {t0}, now {t})")
    return remaining / (geom.s * geom.dt)


def allocate_postponed(
    b_Bq: float,
    occupancy: np.ndarray,
    est: Estimates,
    x0_clean: float,
    A_max: float,
    epsmax_hat: float,
    x0_pred_s: float,
    b_s_t: float,
) -> tuple[np.ndarray, bool]:
    """Split ``b_Bq`` over the virtual slots s+1, s+2, ...

    ``occupancy[l-1]`` is the fluid amount already scheduled for slot s+l.
    Each slot takes what the conservative forecast (non-CAV inflow at its
    maximum plus the noise bound) leaves below the critical occupancy.
    Returns the allocation, same shape as ``occupancy``, and whether the
    remainder overflowed into the last slot.
    """
    if b_Bq < 0:
        raise ValueError("b_Bq must be non-negative")
    occ = np.asarray(occupancy, dtype=float)
    alloc = np.zeros_like(occ)
    if b_Bq == 0:
        return alloc, False
    a, c, xc, r = estimated_params(est, x0_clean)
    push = A_max + epsmax_hat
    pred = x0_pred_s
    left = b_Bq
    for i in range(occ.size):
        extra = b_s_t if i == 0 else occ[i]
        pred = max(pred + push + extra - kernels.flow(pred, a, c, xc, r), 0.0)
        cap = xc - pred + kernels.flow(pred, a, c, xc, r) - push
        take = min(left, max(cap, 0.0))
        alloc[i] = take
        left -= take
        if left <= 0:
            return alloc, False
    alloc[-1] += left
    return alloc, True


@dataclass
class HeldVehicle:
    vehicle_id: str
    t0: int
    ell: int
    speed: float

    @property
    def due(self) -> int:
        return self.t0 + self.ell


@dataclass
class Instruction:
    vehicle_id: str
    speed_mps: float
    kind: str

    def to_dict(self) -> dict:
        return {"vehicle_id": self.vehicle_id, "speed_mps": self.speed_mps, "kind": self.kind}


@dataclass
class VirtualPipeline:
    """Fluid occupancy of the virtual slots plus the individual held vehicles."""

    ell_max: int
    occupancy: np.ndarray = None
    vehicles: list[HeldVehicle] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.occupancy is None:
            self.occupancy = np.zeros(self.ell_max)

    @property
    def total(self) -> float:
        return float(self.occupancy.sum())

    def release(self, amount: float) -> None:
        """Remove fluid from the earliest slots first."""
        for i in range(self.ell_max):
            if amount <= 0:
                break
            take = min(amount, self.occupancy[i])
            self.occupancy[i] -= take
            amount -= take

    def advance(self, alloc: np.ndarray) -> None:
        """Add this step's allocation, then shift one step (slot 1 keeps overdue fluid).

        Slot l at step t holds vehicles due at t + l, so a vehicle allocated to
        slot l sits in slot l-1 one step later.
        """
        occ = self.occupancy
        occ += alloc
        first = occ[0] + occ[1] if self.ell_max > 1 else occ[0]
        occ[1:-1], occ[-1] = occ[2:].copy(), 0.0
        occ[0] = first


@dataclass
class TranslatorStats:
    overflow_steps: int = 0
    overdue_releases: int = 0


def _split_counts(amounts: np.ndarray, carry: float) -> tuple[np.ndarray, float]:
    """Whole-vehicle counts per entry with a carried fractional remainder."""
    cum = carry + np.cumsum(amounts)
    fl = np.floor(cum + 1e-9)
    counts = np.diff(np.concatenate(([math.floor(carry + 1e-9)], fl))).astype(int)
    return counts, float(cum[-1] - fl[-1]) if cum.size else carry


class Translator:
    """Stateful per-step translation for one bottleneck approach."""

    def __init__(self, geom: SegmentGeometry, ell_max: int | None = None, next_id: int = 0):
        self.geom = geom
        self.ell_max = 10 * geom.s if ell_max is None else ell_max
        self.pipeline = VirtualPipeline(self.ell_max)
        self.stats = TranslatorStats()
        self.next_id = next_id
        self._carry = {"free": 0.0, "release": 0.0, "hold": 0.0}

    def _new_id(self) -> str:
        vid = f"v{self.next_id}"
        self.next_id += 1
        return vid

    def step(
        self,
        t: int,
        dec: ControlDecomposition,
        est: Estimates,
        x0_clean: float,
        A_max: float,
        x0_pred_s: float,
    ) -> list[Instruction]:
        out: list[Instruction] = []
        geom = self.geom

        # release from the virtual queue, earliest scheduled arrival first
        n_rel, self._carry["release"] = _split_counts(np.array([dec.b_qs]), self._carry["release"])
        self.pipeline.vehicles.sort(key=lambda v: (v.due, v.t0, v.vehicle_id))
        for veh in self.pipeline.vehicles[: int(n_rel[0])]:
            if t - veh.t0 >= veh.ell:
                self.stats.overdue_releases += 1
                speed = veh.speed
            else:
                speed = modified_speed(geom, veh.t0, t, veh.speed)
            out.append(Instruction(veh.vehicle_id, speed, "modify"))
        del self.pipeline.vehicles[: int(n_rel[0])]
        self.pipeline.release(dec.b_qs)

        n_free, self._carry["free"] = _split_counts(np.array([dec.b_Bs]), self._carry["free"])
        for _ in range(int(n_free[0])):
            out.append(Instruction(self._new_id(), geom.v_free, "free"))

        alloc, overflow = allocate_postponed(
            dec.b_Bq, self.pipeline.occupancy, est, x0_clean, A_max,
            est.epsmax_hat, x0_pred_s, dec.b_s,
        )
        if overflow:
            self.stats.overflow_steps += 1
        counts, self._carry["hold"] = _split_counts(alloc, self._carry["hold"])
        for i, n in enumerate(counts):
            ell = i + 1
            v = hold_speed(geom, ell, self.ell_max)
            for _ in range(int(n)):
                vid = self._new_id()
                self.pipeline.vehicles.append(HeldVehicle(vid, t, ell, v))
                out.append(Instruction(vid, v, "hold"))
        self.pipeline.advance(alloc)
        return out

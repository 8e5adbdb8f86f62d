"""Online estimation of the flow parameters from probe samples."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .model import FlowParams, NoiseModel


class SampleRejected(ValueError):
    """A probe sample is too close to the clean threshold to invert."""


class DegenerateEstimate(ValueError):
    """Estimates that cannot define a critical value."""


@dataclass(frozen=True)
class EstimatorConfig:
    lam: float
    k: int
    reset_period: float = math.inf
    reset_defaults: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must lie in (0, 1], got {self.lam}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if not self.reset_period > 0:
            raise ValueError("reset_period must be positive (use inf to disable)")

    @property
    def weights(self) -> np.ndarray:
        """EWMA weights of the k samples of a round, oldest first."""
        j = np.arange(1, self.k + 1)
        return self.lam * (1 - self.lam) ** (self.k - j)

    @property
    def carry(self) -> float:
        return (1 - self.lam) ** self.k


@dataclass(frozen=True)
class Estimates:
    alpha_hat: float
    Fmax_hat: float
    R_hat: float
    epsmax_hat: float
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "alpha_hat": self.alpha_hat,
            "Fmax_hat": self.Fmax_hat,
            "R_hat": self.R_hat,
            "epsmax_hat": self.epsmax_hat,
        }

    @classmethod
    def exact(cls, params: FlowParams, noise: NoiseModel) -> Estimates:
        """Zero-error estimates for a known plant."""
        return cls(params.alpha, params.Q + noise.eps_max, params.R, noise.eps_max)

    @classmethod
    def random_initial(
        cls, rng: np.random.Generator, F_guess: float, Fmax0: float = 0.0, epsmax0: float = 0.0
    ) -> Estimates:
        """alpha uniform in (0, 1), R uniform in (0, F_guess]."""
        alpha = float(rng.uniform(0.0, 1.0))
        while alpha == 0.0:
            alpha = float(rng.uniform(0.0, 1.0))
        R = float(F_guess * (1.0 - rng.uniform(0.0, 1.0)))
        return cls(alpha, Fmax0, R, epsmax0)


@dataclass(frozen=True)
class ErrorVector:
    e_alpha: float
    e_Fmax: float
    e_R: float
    e_epsmax: float

    @property
    def norm2(self) -> float:
        return self.e_alpha**2 + self.e_Fmax**2 + self.e_R**2 + self.e_epsmax**2


@dataclass(frozen=True)
class RoundSamples:
    theta_alpha: tuple[float, ...]
    theta_Fmax: tuple[float, ...]
    theta_R: tuple[float, ...]


def theta_alpha(x0_sample: float, F_sample: float, x0_clean: float, gap: float = 0.0) -> float:
    """Slope sample from a point in the linear branch."""
    d = x0_sample - x0_clean
    if d <= gap or d <= 0:
        raise SampleRejected(f"x0={x0_sample} is within {gap} of x0_clean={x0_clean}")
    return (F_sample - x0_clean) / d


def update_round(est: Estimates, samples: RoundSamples, cfg: EstimatorConfig) -> Estimates:
    k = cfg.k
    for name in ("theta_alpha", "theta_Fmax", "theta_R"):
        if len(getattr(samples, name)) != k:
            raise ValueError(f"expected {k} {name} samples, got {len(getattr(samples, name))}")
    w = cfg.weights
    c = cfg.carry
    th_a = np.asarray(samples.theta_alpha, dtype=float)
    th_r = np.asarray(samples.theta_R, dtype=float)
    alpha = float(w @ th_a + c * est.alpha_hat)
    R = float(w @ th_r + c * est.R_hat)
    Fmax = max(est.Fmax_hat, max(samples.theta_Fmax))
    eps = max(est.epsmax_hat, 0.5 * (th_r.max() - th_r.min()))
    return Estimates(alpha, Fmax, R, eps, est.n + 1)


def critical_value(est: Estimates, x0_clean: float) -> float:
    if not est.alpha_hat > 0:
        raise DegenerateEstimate(f"alpha_hat must be positive, got {est.alpha_hat}")
    return x0_clean + (est.Fmax_hat - est.epsmax_hat - x0_clean) / est.alpha_hat


def estimated_params(est: Estimates, x0_clean: float) -> tuple[float, float, float, float]:
    """(alpha_hat, x0_clean, critical value, R_hat) in kernel argument order."""
    return (est.alpha_hat, x0_clean, critical_value(est, x0_clean), est.R_hat)


def estimated_flow(est: Estimates, x0_clean: float, x0: float) -> float:
    return kernels.flow(float(x0), *estimated_params(est, x0_clean))


def normalized_errors(est: Estimates, params: FlowParams, noise: NoiseModel) -> ErrorVector:
    truth = (params.alpha, params.Q + noise.eps_max, params.R, noise.eps_max)
    if any(v <= 0 for v in truth):
        raise ValueError("normalization needs all true values > 0")
    a, F, R, e = truth
    return ErrorVector(
        (est.alpha_hat - a) / a,
        (est.Fmax_hat - F) / F,
        (est.R_hat - R) / R,
        (est.epsmax_hat - e) / e,
    )


def reset_max_estimates(est: Estimates, cfg: EstimatorConfig) -> Estimates:
    Fmax0, eps0 = cfg.reset_defaults
    return replace(est, Fmax_hat=float(Fmax0), epsmax_hat=float(eps0))


def reset_due(t: int, cfg: EstimatorConfig) -> bool:
    """True at every positive multiple of the reset period."""
    if math.isinf(cfg.reset_period) or t <= 0:
        return False
    return t % int(cfg.reset_period) == 0

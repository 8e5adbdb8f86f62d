"""Bounded scalar distributions used for demand and outflow noise."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import optimize, stats

KINDS = ("uniform", "truncated-gaussian", "constant")


@dataclass(frozen=True)
class BoundedDist:
    """A distribution supported on ``[low, high]``.

    ``loc`` and ``scale`` are the centre and standard deviation of the
    untruncated normal for the ``truncated-gaussian`` kind.
    """

    kind: str
    low: float
    high: float
    loc: float | None = None
    scale: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "constant":
            if self.low != self.high:
                raise ValueError("constant distribution needs low == high")
        elif not self.low < self.high:
            raise ValueError(f"need low < high, got [{self.low}, {self.high}]")
        if self.kind == "truncated-gaussian":
            if self.scale is None or self.scale <= 0:
                raise ValueError("truncated-gaussian needs scale > 0")
            if self.loc is None:
                object.__setattr__(self, "loc", 0.5 * (self.low + self.high))

    @classmethod
    def uniform(cls, low: float, high: float) -> BoundedDist:
        return cls("uniform", float(low), float(high))

    @classmethod
    def constant(cls, value: float) -> BoundedDist:
        return cls("constant", float(value), float(value))

    @classmethod
    def truncated_gaussian(
        cls, low: float, high: float, scale: float, loc: float | None = None
    ) -> BoundedDist:
        return cls("truncated-gaussian", float(low), float(high), loc, float(scale))

    @classmethod
    def from_dict(cls, d: dict) -> BoundedDist:
        kind = d.get("kind", "uniform")
        if kind == "constant":
            return cls.constant(d["value"] if "value" in d else d["low"])
        return cls(kind, float(d["low"]), float(d["high"]), d.get("loc"), d.get("scale"))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "low": self.low, "high": self.high}
        if self.kind == "truncated-gaussian":
            d.update(loc=self.loc, scale=self.scale)
        return d

    @cached_property
    def _frozen(self):
        if self.kind == "uniform":
            return stats.uniform(loc=self.low, scale=self.high - self.low)
        if self.kind == "truncated-gaussian":
            a = (self.low - self.loc) / self.scale
            b = (self.high - self.loc) / self.scale
            return stats.truncnorm(a, b, loc=self.loc, scale=self.scale)
        return None

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.low
        return float(self._frozen.mean())

    @property
    def var(self) -> float:
        if self.kind == "constant":
            return 0.0
        return float(self._frozen.var())

    @property
    def max(self) -> float:
        return self.high

    def cdf(self, x):
        if self.kind == "constant":
            return np.where(np.asarray(x) >= self.low, 1.0, 0.0)
        return self._frozen.cdf(x)

    def pdf(self, x):
        if self.kind == "constant":
            raise ValueError("constant distribution has no density")
        return self._frozen.pdf(x)

    def ppf(self, u):
        """Inverse cdf; used to turn pre-drawn uniforms into samples."""
        u = np.asarray(u, dtype=float)
        if self.kind == "constant":
            return np.full(u.shape, self.low)
        if self.kind == "uniform":
            return self.low + (self.high - self.low) * u
        return np.clip(self._frozen.ppf(u), self.low, self.high)

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.random(size))

    def scaled(self, factor: float) -> BoundedDist:
        """The distribution of ``factor * X``."""
        if factor < 0:
            raise ValueError("scale factor must be non-negative")
        if factor == 0:
            return BoundedDist.constant(0.0)
        if self.kind == "truncated-gaussian":
            return BoundedDist.truncated_gaussian(
                self.low * factor, self.high * factor, self.scale * factor, self.loc * factor
            )
        return BoundedDist(self.kind, self.low * factor, self.high * factor)


def symmetric_noise(kind: str, eps_max: float, variance: float | None = None) -> BoundedDist:
    """Zero-mean noise on ``[-eps_max, eps_max]``.

    The uniform kind fixes the variance at eps_max^2/3; the truncated Gaussian
    solves for the underlying scale that yields ``variance``, which must lie
    strictly below that uniform value.
    """
    if eps_max < 0:
        raise ValueError("eps_max must be non-negative")
    if eps_max == 0 or kind == "constant":
        if eps_max != 0 and kind == "constant":
            raise ValueError("constant noise must have eps_max = 0")
        return BoundedDist.constant(0.0)
    if kind == "uniform":
        if variance is not None and not np.isclose(variance, eps_max**2 / 3, rtol=1e-6):
            raise ValueError(
                f"uniform noise on [-{eps_max}, {eps_max}] has variance {eps_max**2 / 3:.6g},"
                f" not {variance}"
            )
        return BoundedDist.uniform(-eps_max, eps_max)
    if kind == "truncated-gaussian":
        if variance is None:
            raise ValueError("truncated-gaussian noise needs a variance")
        ceiling = eps_max**2 / 3
        if not 0 < variance < ceiling:
            raise ValueError(
                f"variance {variance} unattainable for noise bounded by {eps_max};"
                f" must lie in (0, {ceiling:.6g})"
            )

        def gap(log_scale):
            sc = np.exp(log_scale)
            return stats.truncnorm(-eps_max / sc, eps_max / sc, scale=sc).var() - variance

        lo, hi = np.log(1e-6 * eps_max), np.log(1e4 * eps_max)
        scale = float(np.exp(optimize.brentq(gap, lo, hi, xtol=1e-14)))
        return BoundedDist.truncated_gaussian(-eps_max, eps_max, scale, 0.0)
    raise ValueError(f"unknown noise kind {kind!r}")

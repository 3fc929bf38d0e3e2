"""Latch holding-time distributions.

Every distribution exposes closed-form survival, moments and the first two
stop-loss transforms ``E[(T - t)+]`` and ``E[(T - t)+^2]``. The model module
uses these as exact references next to its quadrature paths. Times are in
microseconds throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DistributionError(ValueError):
    """Invalid distribution parameters or token string."""


class InfiniteMoment(DistributionError):
    """The parameterization has no finite second moment."""


# Uniform-on-[lo, hi] helpers; lo == hi degenerates to a point mass.


def _u_sf(t, lo: float, hi: float):
    t = np.asarray(t, dtype=float)
    if hi == lo:
        return np.where(t < lo, 1.0, 0.0)
    return np.clip((hi - t) / (hi - lo), 0.0, 1.0)


def _u_stop_loss(t, lo: float, hi: float):
    t = np.asarray(t, dtype=float)
    if hi == lo:
        return np.maximum(lo - t, 0.0)
    below = (lo + hi) / 2 - t
    inside = (hi - t) ** 2 / (2 * (hi - lo))
    return np.where(t < lo, below, np.where(t < hi, inside, 0.0))


def _u_stop_loss2(t, lo: float, hi: float):
    t = np.asarray(t, dtype=float)
    if hi == lo:
        return np.maximum(lo - t, 0.0) ** 2
    below = (hi - lo) ** 2 / 12 + ((lo + hi) / 2 - t) ** 2
    inside = (hi - t) ** 3 / (3 * (hi - lo))
    return np.where(t < lo, below, np.where(t < hi, inside, 0.0))


def _scalar(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


class HoldingDist:
    """Base class for holding-time distributions on ``[0, inf)``."""

    kind: str = ""

    @property
    def mean(self) -> float:
        raise NotImplementedError

    @property
    def second_moment(self) -> float:
        raise NotImplementedError

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    @property
    def residual_mean(self) -> float:
        """Mean residual holding time seen by a random observer."""
        return self.second_moment / (2 * self.mean)

    def sf(self, t):
        """Survival ``Q(t) = P(T > t)``."""
        raise NotImplementedError

    def cdf(self, t):
        return _scalar(1.0 - np.asarray(self.sf(t)))

    def stop_loss(self, t):
        """``E[(T - t)+] = integral of Q over [t, inf)``."""
        raise NotImplementedError

    def stop_loss2(self, t):
        """``E[(T - t)+^2] = 2 * integral of stop_loss over [t, inf)``."""
        raise NotImplementedError

    def breakpoints(self) -> tuple[float, ...]:
        """Points where ``Q`` or its derivative is discontinuous."""
        return ()

    @property
    def upper(self) -> float:
        """Right end of the support (``inf`` when unbounded)."""
        return math.inf

    @property
    def point_mass_at_zero(self) -> float:
        return 0.0

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def sample_length_biased(self, rng: np.random.Generator, size=None):
        """Draw from the density ``t p(t) / <t>``."""
        raise NotImplementedError

    def label(self) -> str:
        raise NotImplementedError

    def __str__(self) -> str:
        return self.label()


@dataclass(frozen=True)
class Exponential(HoldingDist):
    mu: float
    kind = "exp"

    def __post_init__(self):
        if not self.mu > 0 or not math.isfinite(self.mu):
            raise DistributionError(f"exponential mean must be positive, got {self.mu}")

    @property
    def mean(self) -> float:
        return self.mu

    @property
    def second_moment(self) -> float:
        return 2 * self.mu**2

    def sf(self, t):
        t = np.asarray(t, dtype=float)
        return _scalar(np.where(t < 0, 1.0, np.exp(-np.maximum(t, 0.0) / self.mu)))

    def stop_loss(self, t):
        t = np.asarray(t, dtype=float)
        pos = self.mu * np.exp(-np.maximum(t, 0.0) / self.mu)
        return _scalar(np.where(t < 0, self.mu - t, pos))

    def stop_loss2(self, t):
        t = np.asarray(t, dtype=float)
        pos = 2 * self.mu**2 * np.exp(-np.maximum(t, 0.0) / self.mu)
        return _scalar(np.where(t < 0, 2 * self.mu**2 - 2 * self.mu * t + t**2, pos))

    def sample(self, rng, size=None):
        return rng.exponential(self.mu, size)

    def sample_length_biased(self, rng, size=None):
        return rng.gamma(2.0, self.mu, size)

    def label(self) -> str:
        return f"exp:{self.mu:g}"


@dataclass(frozen=True)
class Deterministic(HoldingDist):
    value: float
    kind = "det"

    def __post_init__(self):
        if not self.value > 0 or not math.isfinite(self.value):
            raise DistributionError(f"deterministic value must be positive, got {self.value}")

    @property
    def mean(self) -> float:
        return self.value

    @property
    def second_moment(self) -> float:
        return self.value**2

    def sf(self, t):
        return _scalar(_u_sf(t, self.value, self.value))

    def stop_loss(self, t):
        return _scalar(_u_stop_loss(t, self.value, self.value))

    def stop_loss2(self, t):
        return _scalar(_u_stop_loss2(t, self.value, self.value))

    def breakpoints(self):
        return (self.value,)

    @property
    def upper(self) -> float:
        return self.value

    def sample(self, rng, size=None):
        if size is None:
            return self.value
        return np.full(size, self.value)

    sample_length_biased = sample

    def label(self) -> str:
        return f"det:{self.value:g}"


@dataclass(frozen=True)
class Uniform(HoldingDist):
    a: float
    b: float
    kind = "uniform"

    def __post_init__(self):
        if not (0 <= self.a < self.b) or not math.isfinite(self.b):
            raise DistributionError(f"uniform needs 0 <= a < b, got a={self.a} b={self.b}")

    @property
    def mean(self) -> float:
        return (self.a + self.b) / 2

    @property
    def second_moment(self) -> float:
        return (self.a**2 + self.a * self.b + self.b**2) / 3

    def sf(self, t):
        return _scalar(_u_sf(t, self.a, self.b))

    def stop_loss(self, t):
        return _scalar(_u_stop_loss(t, self.a, self.b))

    def stop_loss2(self, t):
        return _scalar(_u_stop_loss2(t, self.a, self.b))

    def breakpoints(self):
        return (self.a, self.b) if self.a > 0 else (self.b,)

    @property
    def upper(self) -> float:
        return self.b

    def sample(self, rng, size=None):
        return rng.uniform(self.a, self.b, size)

    def sample_length_biased(self, rng, size=None):
        u = rng.random(size)
        return np.sqrt(self.a**2 + u * (self.b**2 - self.a**2))

    def label(self) -> str:
        return f"uniform:{self.a:g}:{self.b:g}"


@dataclass(frozen=True)
class Pareto(HoldingDist):
    """Pareto type I: ``Q(t) = (x_min / t)^alpha`` for ``t >= x_min``."""

    alpha: float
    x_min: float
    kind = "pareto"

    def __post_init__(self):
        if not self.x_min > 0:
            raise DistributionError(f"pareto x_min must be positive, got {self.x_min}")
        if not self.alpha > 2:
            raise InfiniteMoment(f"pareto alpha={self.alpha} has no finite second moment (need alpha > 2)")

    @property
    def mean(self) -> float:
        return self.alpha * self.x_min / (self.alpha - 1)

    @property
    def second_moment(self) -> float:
        return self.alpha * self.x_min**2 / (self.alpha - 2)

    def sf(self, t):
        t = np.asarray(t, dtype=float)
        safe = np.maximum(t, self.x_min)
        return _scalar(np.where(t < self.x_min, 1.0, (self.x_min / safe) ** self.alpha))

    def stop_loss(self, t):
        a, xm = self.alpha, self.x_min
        t = np.asarray(t, dtype=float)
        safe = np.maximum(t, xm)
        tail = xm**a * safe ** (1 - a) / (a - 1)
        return _scalar(np.where(t < xm, (xm - t) + xm / (a - 1), tail))

    def stop_loss2(self, t):
        a, xm = self.alpha, self.x_min
        t = np.asarray(t, dtype=float)
        safe = np.maximum(t, xm)
        tail = 2 * xm**a * safe ** (2 - a) / ((a - 1) * (a - 2))
        d = xm - t
        head = d**2 + 2 * d * xm / (a - 1) + 2 * xm**2 / ((a - 1) * (a - 2))
        return _scalar(np.where(t < xm, head, tail))

    def breakpoints(self):
        return (self.x_min,)

    def sample(self, rng, size=None):
        return self.x_min * (1.0 + rng.pareto(self.alpha, size))

    def sample_length_biased(self, rng, size=None):
        # t p(t) is again Pareto with the shape reduced by one
        return self.x_min * (1.0 + rng.pareto(self.alpha - 1, size))

    def label(self) -> str:
        return f"pareto:{self.alpha:g}:{self.x_min:g}"


@dataclass(frozen=True)
class EmpiricalHistogram(HoldingDist):
    """Mass spread uniformly over ``(previous upper, upper]`` for each bin.

    A bin whose upper edge equals the previous one is a point mass.
    """

    uppers: tuple[float, ...]
    masses: tuple[float, ...]
    source: str = field(default="", compare=False)
    kind = "hist"

    def __post_init__(self):
        if len(self.uppers) != len(self.masses) or not self.uppers:
            raise DistributionError("histogram needs matching, non-empty bin and mass lists")
        prev = 0.0
        for u, m in zip(self.uppers, self.masses):
            if u < prev or not math.isfinite(u):
                raise DistributionError("histogram bin uppers must be finite and non-decreasing from 0")
            if m < 0:
                raise DistributionError("histogram masses must be non-negative")
            prev = u
        total = sum(self.masses)
        if abs(total - 1.0) > 1e-6:
            raise DistributionError(f"histogram masses sum to {total}, expected 1")
        object.__setattr__(self, "masses", tuple(m / total for m in self.masses))
        if self.mean <= 0:
            raise DistributionError("histogram mean must be positive")

    @classmethod
    def from_csv(cls, path: str | Path) -> "EmpiricalHistogram":
        uppers, masses = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    uppers.append(float(row[0]))
                    masses.append(float(row[1]))
                except (ValueError, IndexError):
                    if lineno == 1:  # header
                        continue
                    raise DistributionError(f"{path}:{lineno}: expected 'bin_upper,probability_mass'")
        return cls(tuple(uppers), tuple(masses), source=str(path))

    def components(self) -> list[tuple[float, float, float]]:
        out, prev = [], 0.0
        for u, m in zip(self.uppers, self.masses):
            if m > 0:
                out.append((m, prev, u))
            prev = u
        return out

    def _mix(self, fn, t):
        return _scalar(sum(w * fn(t, lo, hi) for w, lo, hi in self.components()))

    @property
    def mean(self) -> float:
        return sum(w * (lo + hi) / 2 for w, lo, hi in self.components())

    @property
    def second_moment(self) -> float:
        return sum(w * (lo * lo + lo * hi + hi * hi) / 3 for w, lo, hi in self.components())

    def sf(self, t):
        return self._mix(_u_sf, t)

    def stop_loss(self, t):
        return self._mix(_u_stop_loss, t)

    def stop_loss2(self, t):
        return self._mix(_u_stop_loss2, t)

    def breakpoints(self):
        return tuple(sorted({0.0, *self.uppers} - {0.0}))

    @property
    def upper(self) -> float:
        return self.uppers[-1]

    @property
    def point_mass_at_zero(self) -> float:
        return sum(w for w, lo, hi in self.components() if hi == 0.0)

    def _draw(self, rng, size, weights, within):
        comps = self.components()
        w = np.asarray(weights, dtype=float)
        n = 1 if size is None else size
        idx = rng.choice(len(comps), size=n, p=w / w.sum())
        lo = np.array([c[1] for c in comps])[idx]
        hi = np.array([c[2] for c in comps])[idx]
        out = within(lo, hi, rng.random(n))
        return float(out[0]) if size is None else out

    def sample(self, rng, size=None):
        return self._draw(rng, size, [c[0] for c in self.components()], lambda lo, hi, u: lo + u * (hi - lo))

    def sample_length_biased(self, rng, size=None):
        weights = [w * (lo + hi) / 2 for w, lo, hi in self.components()]
        return self._draw(rng, size, weights, lambda lo, hi, u: np.sqrt(lo**2 + u * (hi**2 - lo**2)))

    def label(self) -> str:
        return f"hist:{self.source}" if self.source else "hist:<inline>"


def parse_dist(text: str) -> HoldingDist:
    """Parse ``exp:MEAN``, ``det:VALUE``, ``uniform:A:B``, ``pareto:ALPHA:XMIN`` or ``hist:FILE``."""
    kind, _, rest = text.strip().partition(":")
    kind = kind.lower()
    if kind == "hist":
        if not rest:
            raise DistributionError("hist: needs a file path")
        try:
            return EmpiricalHistogram.from_csv(rest)
        except OSError as exc:
            raise DistributionError(f"cannot read histogram {rest}: {exc}") from exc
    try:
        args = [float(x) for x in rest.split(":")] if rest else []
    except ValueError:
        raise DistributionError(f"non-numeric parameter in {text!r}") from None
    arity = {"exp": 1, "det": 1, "uniform": 2, "pareto": 2}
    if kind not in arity:
        raise DistributionError(f"unknown distribution kind {kind!r} in {text!r}")
    if len(args) != arity[kind]:
        raise DistributionError(f"{kind} takes {arity[kind]} parameter(s), got {len(args)}")
    cls = {"exp": Exponential, "det": Deterministic, "uniform": Uniform, "pareto": Pareto}[kind]
    return cls(*args)


def histogram(uppers: Sequence[float], masses: Sequence[float]) -> EmpiricalHistogram:
    return EmpiricalHistogram(tuple(map(float, uppers)), tuple(map(float, masses)))

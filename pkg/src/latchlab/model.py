"""Spin efficiency and spin CPU cost from the residual holding-time model.

A process that misses the latch observes the *residual* holding time of the
current holder, whose density is ``Q(t) / <t>``. Spinning for at most
``delta`` succeeds with probability ``sigma = P_l(delta)`` and burns on
average ``gamma_sg = E[min(tau, delta)]`` of CPU time per miss.

All functions are pure. Times share the unit of the distribution
(microseconds by convention).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate

from .dists import HoldingDist

#: Default duration of one spin iteration. The live latch counts iterations,
#: the model and the simulator work in time; this is the shared conversion.
SPIN_ITERATION_NS = 5.0

QUAD_EPSREL = 1e-10
QUAD_EPSABS = 1e-13
QUAD_LIMIT = 200
FORM_RTOL = 1e-5
TAIL_R2_MIN = 0.99
TAIL_POINTS = 64
REGIME_THRESHOLD = 0.2


class ModelError(ValueError):
    pass


class PrecondViolated(ModelError):
    pass


class NoExponentialTail(ModelError):
    pass


class ConsistencyError(ArithmeticError):
    """Independent evaluations of the same quantity disagree."""


def iterations_to_us(iterations: float, ns_per_iteration: float = SPIN_ITERATION_NS) -> float:
    return iterations * ns_per_iteration / 1000.0


def us_to_iterations(delta_us: float, ns_per_iteration: float = SPIN_ITERATION_NS) -> int:
    if math.isinf(delta_us):
        raise ValueError("an infinite spin budget has no iteration count")
    return int(round(delta_us * 1000.0 / ns_per_iteration))


def _integrate(f: Callable[[float], float], a: float, b: float, breaks=()) -> float:
    """Adaptive quadrature of ``f`` over ``[a, b]``, split at ``breaks``."""
    if b <= a:
        return 0.0
    cuts = [a, *sorted(x for x in breaks if a < x < b), b]
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for lo, hi in zip(cuts, cuts[1:]):
            val, _ = integrate.quad(f, lo, hi, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT)
            total += val
    return total


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not delta >= 0:
        raise ValueError(f"spin budget must be non-negative, got {delta}")
    return delta


@dataclass(frozen=True)
class ResidualDist:
    """Stationary residual holding time of ``base``."""

    base: HoldingDist

    @property
    def mean(self) -> float:
        return self.base.residual_mean

    def pdf(self, t):
        return np.asarray(self.base.sf(t)) / self.base.mean

    def sf(self, t):
        return np.asarray(self.base.stop_loss(np.maximum(t, 0.0))) / self.base.mean

    def cdf(self, t):
        return 1.0 - self.sf(t)

    def normalization(self) -> float:
        q = lambda t: float(self.base.sf(t))
        return _integrate(q, 0.0, self.base.upper, self.base.breakpoints()) / self.base.mean


def residual(dist: HoldingDist) -> ResidualDist:
    if not (dist.mean > 0 and math.isfinite(dist.second_moment)):
        raise ModelError("residual time needs 0 < <t> and finite <t^2>")
    res = ResidualDist(dist)
    norm = res.normalization()
    if abs(norm - 1.0) > 1e-6:
        raise ConsistencyError(f"residual density integrates to {norm}, not 1")
    return res


def spin_efficiency(dist: HoldingDist, delta: float) -> float:
    """Probability that a miss is resolved within ``delta`` of spinning."""
    delta = _check_delta(delta)
    if math.isinf(delta):
        return 1.0
    q = lambda t: float(dist.sf(t))
    sigma = _integrate(q, 0.0, min(delta, dist.upper), dist.breakpoints()) / dist.mean
    return min(max(sigma, 0.0), 1.0)


def sleep_ratio(dist: HoldingDist, delta: float) -> float:
    """``1 - sigma``, evaluated from the tail so small values keep precision."""
    delta = _check_delta(delta)
    if math.isinf(delta):
        return 0.0
    return min(max(float(dist.stop_loss(delta)) / dist.mean, 0.0), 1.0)


class GammaForms(NamedTuple):
    point_mass: float  # spin-get density with the atom at delta
    tail: float  # mean residual minus the integrated residual tail
    nested: float  # double integral of the holding survival
    stop_loss: float  # closed form via E[(T - delta)+^2]


def gamma_forms(dist: HoldingDist, delta: float) -> GammaForms:
    """Spin CPU time per miss computed four independent ways."""
    delta = _check_delta(delta)
    mean, top, brk = dist.mean, dist.upper, dist.breakpoints()
    if math.isinf(delta):
        r = dist.residual_mean
        return GammaForms(r, r, r, r)
    q = lambda t: float(dist.sf(t))
    d_in = min(delta, top)

    sigma = _integrate(q, 0.0, d_in, brk) / mean
    point_mass = _integrate(lambda t: t * q(t), 0.0, d_in, brk) / mean + delta * (1.0 - sigma)

    q_res = lambda t: float(dist.stop_loss(t)) / mean
    tail = dist.residual_mean - _integrate(q_res, delta, top, brk)

    def inner(t):
        return _integrate(q, t, top, brk)

    nested = _integrate(inner, 0.0, d_in, brk) / mean

    closed = (dist.second_moment - float(dist.stop_loss2(delta))) / (2 * mean)
    return GammaForms(point_mass, tail, nested, closed)


def gamma_bound(dist: HoldingDist, delta: float) -> float:
    return min(dist.residual_mean, delta)


def spin_cpu_time(dist: HoldingDist, delta: float, check: bool = True) -> float:
    """Mean spinning time per miss for spin budget ``delta``.

    With ``check`` the quadrature value is cross-checked against the nested
    double integral and against the residual/budget bound.
    """
    delta = _check_delta(delta)
    if math.isinf(delta):
        return dist.residual_mean
    if not check:
        q = lambda t: float(dist.sf(t))
        d_in = min(delta, dist.upper)
        sigma = spin_efficiency(dist, delta)
        return _integrate(lambda t: t * q(t), 0.0, d_in, dist.breakpoints()) / dist.mean + delta * (1 - sigma)
    forms = gamma_forms(dist, delta)
    gamma = forms.point_mass
    scale = max(abs(gamma), 1e-300)
    if abs(forms.nested - gamma) > FORM_RTOL * scale:
        raise ConsistencyError(f"gamma_sg forms disagree: {forms}")
    bound = gamma_bound(dist, delta)
    if gamma > bound * (1 + 1e-12):
        raise ConsistencyError(f"gamma_sg={gamma} exceeds bound {bound}")
    return gamma


@dataclass(frozen=True)
class ModelPrediction:
    delta: float
    sigma: float
    kappa: float
    gamma_sg: float
    bound: float

    @property
    def regime(self) -> str:
        if self.sigma <= REGIME_THRESHOLD:
            return "low-efficiency"
        if self.kappa <= REGIME_THRESHOLD:
            return "high-efficiency"
        return "intermediate"


def predict(dist: HoldingDist, delta: float, check: bool = True) -> ModelPrediction:
    delta = _check_delta(delta)
    return ModelPrediction(
        delta=delta,
        sigma=spin_efficiency(dist, delta),
        kappa=sleep_ratio(dist, delta),
        gamma_sg=spin_cpu_time(dist, delta, check=check),
        bound=gamma_bound(dist, delta),
    )


class LowEfficiency(NamedTuple):
    sigma_approx: float
    gamma_approx: float
    sigma_error: float
    gamma_error: float


def low_efficiency_expansion(dist: HoldingDist, delta: float) -> LowEfficiency:
    """Leading-order spin efficiency and cost for a short spin budget.

    ``sigma ~ delta/<t>`` and ``gamma ~ delta - delta^2/(2<t>)``; both scale
    linearly, so doubling the budget doubles efficiency and CPU. Errors are
    absolute, against the exact quadrature.
    """
    delta = _check_delta(delta)
    if dist.point_mass_at_zero > 0:
        raise PrecondViolated("distribution releases immediately with positive probability")
    if math.isinf(delta):
        raise PrecondViolated("expansion needs a finite spin budget")
    mean = dist.mean
    s_apx = delta / mean
    g_apx = delta - delta**2 / (2 * mean)
    s = spin_efficiency(dist, delta)
    g = spin_cpu_time(dist, delta, check=False)
    return LowEfficiency(s_apx, g_apx, abs(s - s_apx), abs(g - g_apx))


@dataclass(frozen=True)
class TailLaw:
    """Exponential tail fit ``Q(t) ~ C exp(-t/tau)`` around the spin budget."""

    delta: float
    C: float
    tau: float
    r_squared: float
    mean: float
    residual_mean: float
    kappa_exact: float

    def kappa_at(self, delta: float) -> float:
        return self.C * math.exp(-delta / self.tau) * self.tau / self.mean

    def gamma_at(self, delta: float) -> float:
        return self.residual_mean - self.C * self.tau**2 * math.exp(-delta / self.tau) / self.mean

    @property
    def kappa_pred(self) -> float:
        return self.kappa_at(self.delta)

    @property
    def gamma_pred(self) -> float:
        return self.gamma_at(self.delta)

    @property
    def squaring_ratio(self) -> float:
        """``kappa(2 delta) / kappa(delta)^2`` under the fitted law."""
        return self.kappa_at(2 * self.delta) / self.kappa_pred**2


def high_efficiency_tail(dist: HoldingDist, delta: float) -> TailLaw:
    """Fit an exponential tail on ``[delta/2, 4 delta]`` (log-survival regression)."""
    delta = _check_delta(delta)
    if delta == 0 or math.isinf(delta):
        raise PrecondViolated("tail fit needs a finite positive spin budget")
    t = np.linspace(delta / 2, 4 * delta, TAIL_POINTS)
    q = np.asarray(dist.sf(t), dtype=float)
    if np.any(q <= 0) or not np.all(np.isfinite(np.log(q))):
        raise NoExponentialTail("survival vanishes inside the fit window (bounded support)")
    y = np.log(q)
    slope, intercept = np.polyfit(t, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if slope >= 0 or ss_tot == 0.0:
        raise NoExponentialTail("survival does not decay inside the fit window")
    fit = intercept + slope * t
    r2 = 1.0 - float(np.sum((y - fit) ** 2)) / ss_tot
    if r2 < TAIL_R2_MIN:
        raise NoExponentialTail(f"log-survival is not linear on the window (R^2={r2:.4f})")
    return TailLaw(
        delta=delta,
        C=float(math.exp(intercept)),
        tau=float(-1.0 / slope),
        r_squared=r2,
        mean=dist.mean,
        residual_mean=dist.residual_mean,
        kappa_exact=sleep_ratio(dist, delta),
    )


class McEstimate(NamedTuple):
    sigma: float
    gamma: float
    sigma_se: float
    gamma_se: float


def mc_oracle(dist: HoldingDist, delta: float, n_samples: int = 10**6, seed: int = 0) -> McEstimate:
    """Monte-Carlo spin efficiency and cost from length-biased sampling.

    A random observer lands in a holding interval with probability
    proportional to its length and at a uniform position inside it.
    """
    delta = _check_delta(delta)
    if n_samples < 10**4:
        raise ValueError("mc_oracle needs at least 1e4 samples")
    rng = np.random.default_rng(seed)
    t = np.asarray(dist.sample_length_biased(rng, n_samples), dtype=float)
    tau = rng.random(n_samples) * t
    hit = tau <= delta
    spin = np.minimum(tau, delta)
    n = float(n_samples)
    return McEstimate(
        sigma=float(hit.mean()),
        gamma=float(spin.mean()),
        sigma_se=float(hit.std(ddof=1) / math.sqrt(n)),
        gamma_se=float(spin.std(ddof=1) / math.sqrt(n)),
    )

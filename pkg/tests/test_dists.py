import math

import mpmath
import numpy as np
import pytest
import sympy as sp

from latchlab.dists import (
    Deterministic,
    DistributionError,
    EmpiricalHistogram,
    Exponential,
    InfiniteMoment,
    Pareto,
    Uniform,
    histogram,
    parse_dist,
)

DISTS = [Exponential(10.0), Deterministic(5.0), Uniform(2.0, 8.0), Pareto(3.0, 1.0), histogram([1, 3, 6], [0.2, 0.5, 0.3])]


def _symbolic_moments(kind, *params):
    t = sp.symbols("t", positive=True)
    if kind == "exp":
        (mu,) = params
        pdf, lo, hi = sp.exp(-t / mu) / mu, 0, sp.oo
    elif kind == "uniform":
        a, b = params
        pdf, lo, hi = sp.Integer(1) / (b - a), a, b
    else:
        alpha, xm = params
        pdf, lo, hi = alpha * xm**alpha / t ** (alpha + 1), xm, sp.oo
    m1 = sp.integrate(t * pdf, (t, lo, hi))
    m2 = sp.integrate(t**2 * pdf, (t, lo, hi))
    return float(m1), float(m2)


@pytest.mark.parametrize(
    "dist, sym",
    [
        (Exponential(10.0), ("exp", sp.Integer(10))),
        (Uniform(2.0, 8.0), ("uniform", sp.Integer(2), sp.Integer(8))),
        (Pareto(3.0, 1.0), ("pareto", sp.Integer(3), sp.Integer(1))),
        (Pareto(4.5, 2.0), ("pareto", sp.Rational(9, 2), sp.Integer(2))),
    ],
)
def test_moments_match_symbolic_integration(dist, sym):
    m1, m2 = _symbolic_moments(*sym)
    assert dist.mean == pytest.approx(m1, rel=1e-12)
    assert dist.second_moment == pytest.approx(m2, rel=1e-12)
    assert dist.residual_mean == pytest.approx(m2 / (2 * m1), rel=1e-12)


def test_pareto_moment_oracle_values():
    d = Pareto(3.0, 1.0)
    assert d.mean == pytest.approx(1.5)
    assert d.second_moment == pytest.approx(3.0)
    assert d.residual_mean == pytest.approx(1.0)


@pytest.mark.parametrize("dist", DISTS, ids=lambda d: d.label())
@pytest.mark.parametrize("frac", [0.0, 0.3, 1.0, 2.5])
def test_stop_loss_against_mpmath_quadrature(dist, frac):
    t0 = frac * dist.mean
    pts = sorted({t0, *[b for b in dist.breakpoints() if b > t0]})
    top = dist.upper if math.isfinite(dist.upper) else mpmath.inf
    if top != mpmath.inf and top <= t0:
        ref1 = ref2 = 0.0
    else:
        pts = [p for p in pts if p < top] + [top]
        sf = lambda s: float(dist.sf(float(s)))
        ref1 = float(mpmath.quad(sf, pts))
        ref2 = float(mpmath.quad(lambda s: 2 * (s - t0) * sf(s), pts))
    assert float(dist.stop_loss(t0)) == pytest.approx(ref1, rel=1e-8, abs=1e-12)
    assert float(dist.stop_loss2(t0)) == pytest.approx(ref2, rel=1e-8, abs=1e-12)


@pytest.mark.parametrize("dist", DISTS, ids=lambda d: d.label())
def test_stop_loss_at_zero_recovers_moments(dist):
    assert float(dist.stop_loss(0.0)) == pytest.approx(dist.mean, rel=1e-12)
    assert float(dist.stop_loss2(0.0)) == pytest.approx(dist.second_moment, rel=1e-12)


@pytest.mark.parametrize("dist", DISTS, ids=lambda d: d.label())
def test_sampling_and_length_biased_means(dist):
    rng = np.random.default_rng(7)
    n = 200_000
    x = dist.sample(rng, n)
    assert abs(x.mean() - dist.mean) < 5 * x.std() / math.sqrt(n) + 1e-12
    y = dist.sample_length_biased(rng, n)
    # a length-biased draw has mean E[T^2]/E[T]
    assert abs(y.mean() - dist.second_moment / dist.mean) < 5 * y.std() / math.sqrt(n) + 1e-12


def test_sf_is_survival():
    d = Uniform(2.0, 8.0)
    assert d.sf(1.0) == 1.0
    assert d.sf(5.0) == pytest.approx(0.5)
    assert d.sf(9.0) == 0.0
    assert d.cdf(5.0) == pytest.approx(0.5)
    assert Deterministic(5.0).sf(5.0) == 0.0
    assert Deterministic(5.0).sf(4.999) == 1.0


@pytest.mark.parametrize(
    "text, expected",
    [
        ("exp:10", Exponential(10.0)),
        ("det:5", Deterministic(5.0)),
        ("uniform:2:8", Uniform(2.0, 8.0)),
        ("pareto:3:1", Pareto(3.0, 1.0)),
    ],
)
def test_parse_dist(text, expected):
    d = parse_dist(text)
    assert d == expected
    assert parse_dist(d.label()) == d


@pytest.mark.parametrize("bad", ["", "exp", "exp:-1", "exp:x", "uniform:5:2", "gamma:1", "pareto:3", "det:1:2"])
def test_parse_dist_rejects(bad):
    with pytest.raises(DistributionError):
        parse_dist(bad)


@pytest.mark.parametrize("alpha", [1.5, 2.0])
def test_pareto_without_second_moment(alpha):
    with pytest.raises(InfiniteMoment):
        Pareto(alpha, 1.0)


def test_histogram_from_csv(tmp_path):
    f = tmp_path / "h.csv"
    f.write_text("bin_upper,probability_mass\n0,0.1\n2,0.4\n5,0.5\n")
    d = parse_dist(f"hist:{f}")
    assert isinstance(d, EmpiricalHistogram)
    assert d.point_mass_at_zero == pytest.approx(0.1)
    assert d.mean == pytest.approx(0.4 * 1.0 + 0.5 * 3.5)
    assert d.second_moment == pytest.approx(0.4 * 4 / 3 + 0.5 * (25 + 10 + 4) / 3)


def test_histogram_validation(tmp_path):
    with pytest.raises(DistributionError):
        histogram([1, 2], [0.5, 0.4])
    with pytest.raises(DistributionError):
        histogram([2, 1], [0.5, 0.5])
    with pytest.raises(DistributionError):
        histogram([1, 2], [-0.5, 1.5])
    f = tmp_path / "bad.csv"
    f.write_text("1,abc\n")
    with pytest.raises(DistributionError):
        EmpiricalHistogram.from_csv(f)
    with pytest.raises(DistributionError):
        parse_dist(f"hist:{tmp_path / 'missing.csv'}")

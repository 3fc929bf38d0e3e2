import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latchlab import stats
from latchlab.stats import DiffStats, LatchStats, SampledStats, Snapshot


def golden_pair():
    begin = LatchStats(gets=100_000, misses=5_000, sleeps=100, spin_gets=4_900, wait_time=1e6, timestamp=10.0)
    end = LatchStats(gets=120_812, misses=6_623, sleeps=121, spin_gets=6_502, wait_time=1e6 + 25_000, timestamp=11.0)
    return begin, end


def test_diff_no_misses():
    d = stats.diff(LatchStats(timestamp=0), LatchStats(gets=1000, timestamp=1))
    assert d.lam == 1000
    assert d.rho == 0
    assert d.kappa is None and d.sigma is None


def test_diff_golden_counters():
    d = stats.diff(*golden_pair())
    assert d.lam == pytest.approx(20812)
    assert d.rho == pytest.approx(1623 / 20812)
    assert round(d.rho, 3) == 0.078
    assert round(d.kappa, 3) == 0.013
    assert round(d.sigma, 3) == 0.987
    assert d.w == pytest.approx(0.025)


def test_diff_errors():
    with pytest.raises(stats.CounterRegression):
        stats.diff(LatchStats(gets=10, timestamp=0), LatchStats(gets=5, timestamp=1))
    with pytest.raises(stats.ZeroInterval):
        stats.diff(LatchStats(timestamp=1), LatchStats(timestamp=1))


counters = st.integers(0, 10**6)


@st.composite
def stats_pairs(draw):
    misses = draw(counters)
    spin = draw(st.integers(0, misses))
    begin = LatchStats(
        gets=misses + draw(counters),
        misses=misses,
        sleeps=draw(counters),
        spin_gets=spin,
        wait_time=draw(st.floats(0, 1e9)),
        timestamp=draw(st.floats(0, 1e6)),
    )
    dm = draw(counters)
    end = LatchStats(
        gets=begin.gets + dm + draw(counters),
        misses=begin.misses + dm,
        sleeps=begin.sleeps + draw(counters),
        spin_gets=begin.spin_gets + draw(st.integers(0, dm)),
        wait_time=begin.wait_time + draw(st.floats(0, 1e9)),
        timestamp=begin.timestamp + draw(st.floats(1e-3, 1e4)),
    )
    return begin, end


def _shift(s: LatchStats, k: int, dt: float) -> LatchStats:
    return LatchStats(
        gets=s.gets + k,
        misses=s.misses + k,
        sleeps=s.sleeps + k,
        spin_gets=s.spin_gets + k,
        wait_time=s.wait_time + k,
        timestamp=s.timestamp + dt,
    )


@settings(max_examples=200)
@given(stats_pairs(), st.integers(0, 10**6), st.floats(0, 1e6))
def test_diff_translation_invariant(pair, k, dt):
    b, e = pair
    d0, d1 = stats.diff(b, e), stats.diff(_shift(b, k, dt), _shift(e, k, dt))
    assert (d1.gets, d1.misses, d1.sleeps, d1.spin_gets) == (d0.gets, d0.misses, d0.sleeps, d0.spin_gets)
    assert (d1.rho, d1.kappa, d1.sigma) == (d0.rho, d0.kappa, d0.sigma)
    assert d1.lam == pytest.approx(d0.lam, rel=1e-6)


@settings(max_examples=200)
@given(stats_pairs(), st.integers(2, 50))
def test_diff_scaling(pair, c):
    # c identical back-to-back intervals: rates unchanged, ratios unchanged
    b, e = pair
    d = stats.diff(b, e)
    scaled = LatchStats(
        gets=b.gets + c * d.gets,
        misses=b.misses + c * d.misses,
        sleeps=b.sleeps + c * d.sleeps,
        spin_gets=b.spin_gets + c * d.spin_gets,
        wait_time=b.wait_time + c * (e.wait_time - b.wait_time),
        timestamp=b.timestamp + c * (e.timestamp - b.timestamp),
    )
    dc = stats.diff(b, scaled)
    assert dc.lam == pytest.approx(d.lam, rel=1e-6)
    assert dc.rho == pytest.approx(d.rho) if d.rho is not None else dc.rho is None
    assert dc.kappa == pytest.approx(d.kappa) if d.kappa is not None else dc.kappa is None
    assert dc.w == pytest.approx(d.w, rel=1e-6, abs=1e-12)


def test_eta():
    assert stats.eta(8, 100) == pytest.approx(8 / 7)
    assert stats.eta(2, 2) == 2.0
    assert stats.eta(16, 4) == pytest.approx(4 / 3)
    with pytest.raises(stats.SingleCpuInapplicable):
        stats.eta(1, 10)
    with pytest.raises(stats.SingleCpuInapplicable):
        stats.eta(4, 1)


def test_service_time_examples():
    d = DiffStats.from_ratios(20812.2, 0.078)
    assert stats.service_time(d, 2, 2) * 1e6 == pytest.approx(7.5, abs=0.1)
    assert stats.service_time(DiffStats.from_ratios(1e4, 0.0), 2, 2) == 0.0
    S = stats.service_time(DiffStats.from_ratios(1e4, 0.05), 16, 100)
    assert S == pytest.approx(16 / 15 * 0.05 / 1e4)
    assert S * 1e6 == pytest.approx(5.333, abs=1e-3)
    assert stats.utilization(DiffStats.from_ratios(1e4, 0.05), 16, 100) == pytest.approx(16 / 15 * 0.05)


def test_queue_length():
    assert stats.wait_queue_length(DiffStats.from_ratios(1.0, 0.1, w=0.025)) == 0.025
    assert stats.wait_queue_length(DiffStats.from_ratios(1.0, 0.1)) == 0.0


def test_recurrent_sleep_ratio():
    r = stats.recurrent_sleep_ratio(DiffStats.from_ratios(1.0, 0.1, kappa=0.013, sigma=0.987))
    assert 0.0 <= r.ratio <= 0.02
    assert stats.recurrent_sleep_ratio(DiffStats.from_ratios(1.0, 0.1, kappa=1.0, sigma=1.0)).ratio == 1.0
    assert stats.recurrent_sleep_ratio(DiffStats.from_ratios(1.0, 0.1, kappa=0.25, sigma=0.75)).ratio == 0.0
    low = stats.recurrent_sleep_ratio(DiffStats.from_ratios(1.0, 0.1, kappa=0.2, sigma=0.7))
    assert low.clamped and low.ratio == 0.0 and low.raw < 0
    with pytest.raises(stats.Undefined):
        stats.recurrent_sleep_ratio(DiffStats.from_ratios(1.0, 0.0))


def test_acquisition_time():
    t = stats.acquisition_time(DiffStats.from_ratios(20812.2, 0.078, w=0.025), 0.123)
    assert t.total * 1e6 == pytest.approx(7.1, abs=0.15)
    assert t.sleep * 1e6 == pytest.approx(1.2, abs=0.05)
    assert t.spin + t.sleep == pytest.approx(t.total)
    assert stats.acquisition_time(DiffStats.from_ratios(10.0, 0.0), 0.0).total == 0.0


def _codes(d, s=None, n_cpu=2, n_proc=2):
    est = stats.estimate(d, n_cpu, n_proc, s)
    return {f.code for f in stats.contention_report(d, s, est)}


def test_contention_report():
    assert "wait_time" in _codes(DiffStats.from_ratios(1e4, 0.01, 0.1, 0.9, w=0.15))
    assert "utilization" in _codes(DiffStats.from_ratios(20812.2, 0.078, 0.013, 0.987, w=0.025))
    # healthy latch: eta*rho = 0.05, W = 0.01, acquisition time close to holding time
    lam = 1e4
    d = DiffStats.from_ratios(lam, 0.025, 0.2, 0.8, w=0.01)
    S = 2 * 0.025 / lam
    s = SampledStats(u=0.05, l=0.01, n_s=S * lam - 0.01)
    assert _codes(d, s) == set()


def test_contention_report_long_acquisitions():
    d = DiffStats.from_ratios(1e4, 0.05, 0.5, 0.5, w=0.3)
    assert {"acquisition_time", "sleep_time"} <= _codes(d, SampledStats(u=0.1, l=0.3, n_s=0.2))


def test_stationarity_warning():
    ds = [DiffStats.from_ratios(100, 0.1), DiffStats.from_ratios(110, 0.1), DiffStats.from_ratios(500, 0.1)]
    w = stats.stationarity_warnings(ds)
    assert len(w) == 1 and "interval 2" in w[0]


# -- CSV ------------------------------------------------------------------


def test_snapshot_roundtrip(tmp_path):
    b, e = golden_pair()
    snaps = [Snapshot("a", b), Snapshot("a", e, SampledStats(0.15, 0.04, 0.12))]
    f = tmp_path / "s.csv"
    stats.write_snapshots(snaps, f)
    back = stats.read_snapshots(f)
    assert [s.stats for s in back] == [b, e]
    assert back[1].sampled == SampledStats(0.15, 0.04, 0.12)
    grouped = stats.group_by_latch(back)
    pairs = list(stats.intervals(grouped["a"]))
    assert len(pairs) == 1
    assert stats.diff(pairs[0][0].stats, pairs[0][1].stats).gets == 20812


def test_read_groups_interleaved_latches():
    text = ",".join(stats.SNAPSHOT_COLUMNS) + "\n"
    text += "x,0,1,0,0,0,0,0,0\ny,0,5,0,0,0,0,0,0\nx,1,3,0,0,0,0,0,0\ny,1,9,0,0,0,0,0,0\n"
    snaps = stats.read_snapshots(io.StringIO(text))
    assert [s.latch_id for s in snaps] == ["x", "x", "y", "y"]


def test_read_header_only():
    assert stats.read_snapshots(io.StringIO(",".join(stats.SNAPSHOT_COLUMNS) + "\n")) == []
    assert stats.read_snapshots(io.StringIO("")) == []


@pytest.mark.parametrize(
    "row",
    [
        "a,0,-1,0,0,0,0,0,0",  # negative counter
        "a,0,x,0,0,0,0,0,0",
        "a,0,1,0,0",
        ",0,1,0,0,0,0,0,0",
        "a,nan,1,0,0,0,0,0,0",
    ],
)
def test_read_rejects_bad_rows(row):
    with pytest.raises(stats.ParseError) as exc:
        stats.read_snapshots(io.StringIO(",".join(stats.SNAPSHOT_COLUMNS) + "\n" + row + "\n"))
    assert exc.value.line == 2


def test_read_rejects_missing_columns_and_time_travel():
    with pytest.raises(stats.ParseError):
        stats.read_snapshots(io.StringIO("latch_id,gets\na,1\n"))
    text = ",".join(stats.SNAPSHOT_COLUMNS) + "\na,1,1,0,0,0,0,0,0\na,1,2,0,0,0,0,0,0\n"
    with pytest.raises(stats.ParseError):
        stats.read_snapshots(io.StringIO(text))

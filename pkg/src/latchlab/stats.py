"""Latch statistics: raw counters, interval differentials and the queueing
estimators built from them.

Ratios whose denominator is zero over an interval are ``None`` ("absent"),
never 0 or NaN, so that threshold checks cannot be fooled by empty
intervals. No-wait (immediate) counters are carried along but none of the
estimators use them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Optional, Union

SNAPSHOT_COLUMNS = (
    "latch_id",
    "timestamp_s",
    "gets",
    "misses",
    "sleeps",
    "spin_gets",
    "wait_time_us",
    "immediate_gets",
    "immediate_misses",
)
# optional trailing columns carrying sampled observations for the interval ending at the row
SAMPLED_COLUMNS = ("sampled_u", "sampled_l", "sampled_ns")

_COUNTERS = ("gets", "misses", "sleeps", "spin_gets", "immediate_gets", "immediate_misses", "wait_time")

W_THRESHOLD = 0.1
UTILIZATION_THRESHOLD = 0.10
ACQUISITION_RATIO_THRESHOLD = 2.0
STATIONARITY_TOLERANCE = 0.5


class StatsError(ValueError):
    pass


class CounterRegression(StatsError):
    pass


class ZeroInterval(StatsError):
    pass


class SingleCpuInapplicable(StatsError):
    pass


class Undefined(StatsError):
    pass


class ParseError(StatsError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class LatchStats:
    """Integral counters since latch creation; ``wait_time`` in microseconds."""

    gets: int = 0
    misses: int = 0
    sleeps: int = 0
    spin_gets: int = 0
    immediate_gets: int = 0
    immediate_misses: int = 0
    wait_time: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        for name in _COUNTERS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def consistent(self) -> bool:
        return (
            self.misses <= self.gets
            and self.spin_gets <= self.misses
            and self.immediate_misses <= self.immediate_gets
        )


@dataclass(frozen=True)
class DiffStats:
    """Point-in-time statistics over one interval.

    ``lam`` is the get rate in Hz, ``w`` the wait seconds per second. The
    ratios ``rho``, ``kappa`` and ``sigma`` are ``None`` when undefined.
    """

    lam: float
    rho: Optional[float]
    kappa: Optional[float]
    sigma: Optional[float]
    w: float
    interval: float = 0.0
    gets: int = 0
    misses: int = 0
    sleeps: int = 0
    spin_gets: int = 0
    immediate_gets: int = 0
    immediate_misses: int = 0

    @classmethod
    def from_ratios(
        cls,
        lam: float,
        rho: Optional[float],
        kappa: Optional[float] = None,
        sigma: Optional[float] = None,
        w: float = 0.0,
    ) -> "DiffStats":
        return cls(lam=lam, rho=rho, kappa=kappa, sigma=sigma, w=w)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class SampledStats:
    u: float
    l: float
    n_s: float
    samples: int = 0

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise ValueError(f"sampled utilization must be in [0, 1], got {self.u}")
        if self.l < 0 or self.n_s < 0:
            raise ValueError("sampled queue length and spinner count must be non-negative")


def diff(begin: LatchStats, end: LatchStats) -> DiffStats:
    dt = end.timestamp - begin.timestamp
    if not dt > 0:
        raise ZeroInterval(f"interval must be positive, got {dt} s")
    d = {name: getattr(end, name) - getattr(begin, name) for name in _COUNTERS}
    bad = [name for name, v in d.items() if v < 0]
    if bad:
        raise CounterRegression(f"counters decreased over the interval: {', '.join(bad)}")
    gets, misses = d["gets"], d["misses"]
    return DiffStats(
        lam=gets / dt,
        rho=misses / gets if gets else None,
        kappa=d["sleeps"] / misses if misses else None,
        sigma=d["spin_gets"] / misses if misses else None,
        w=d["wait_time"] / (1e6 * dt),
        interval=dt,
        gets=gets,
        misses=misses,
        sleeps=d["sleeps"],
        spin_gets=d["spin_gets"],
        immediate_gets=d["immediate_gets"],
        immediate_misses=d["immediate_misses"],
    )


def eta(n_cpu: int, n_proc: int) -> float:
    """Finite-processor correction between miss ratio and utilization."""
    m = min(n_cpu, n_proc)
    if m < 2:
        raise SingleCpuInapplicable("utilization estimate needs at least two CPUs and two processes")
    return m / (m - 1)


def utilization(d: DiffStats, n_cpu: int, n_proc: int) -> float:
    if d.rho is None:
        raise Undefined("no gets in the interval")
    return eta(n_cpu, n_proc) * d.rho


def service_time(d: DiffStats, n_cpu: int, n_proc: int) -> float:
    """Mean latch holding time in seconds, ``eta * rho / lambda``."""
    mult = eta(n_cpu, n_proc)
    if d.lam <= 0 or d.rho is None:
        raise Undefined("service time needs a positive get rate")
    return mult * d.rho / d.lam


def wait_queue_length(d: DiffStats) -> float:
    """Mean number of sleeping processes; by Little's law it equals ``W``."""
    return d.w


class RecurrentSleeps(NamedTuple):
    ratio: float
    raw: float
    clamped: bool


def recurrent_sleep_ratio(d: DiffStats) -> RecurrentSleeps:
    """Fraction of sleeps that were repeated sleeps of a posted process."""
    if not d.kappa or d.sigma is None:
        raise Undefined("recurrent sleep ratio needs sleeps in the interval")
    raw = (d.sigma + d.kappa - 1.0) / d.kappa
    ratio = min(max(raw, 0.0), 1.0)
    return RecurrentSleeps(ratio, raw, ratio != raw)


class AcquisitionTime(NamedTuple):
    total: float
    spin: float
    sleep: float


def acquisition_time(d: DiffStats, n_s: float) -> AcquisitionTime:
    """Mean acquisition time (seconds) from sampled spinners and ``W``."""
    if d.lam <= 0:
        raise Undefined("acquisition time needs a positive get rate")
    return AcquisitionTime((n_s + d.w) / d.lam, n_s / d.lam, d.w / d.lam)


@dataclass(frozen=True)
class Estimates:
    eta: float
    utilization: float
    service_time: float
    queue_length: float
    recurrent: Optional[RecurrentSleeps] = None
    acquisition: Optional[AcquisitionTime] = None


def estimate(d: DiffStats, n_cpu: int, n_proc: int, sampled: Optional[SampledStats] = None) -> Estimates:
    rec = recurrent_sleep_ratio(d) if d.kappa else None
    acq = acquisition_time(d, sampled.n_s) if sampled is not None and d.lam > 0 else None
    rho = d.rho or 0.0
    mult = eta(n_cpu, n_proc)
    return Estimates(
        eta=mult,
        utilization=mult * rho,
        service_time=mult * rho / d.lam if d.lam > 0 else 0.0,
        queue_length=wait_queue_length(d),
        recurrent=rec,
        acquisition=acq,
    )


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    values: dict = field(default_factory=dict)


def contention_report(
    d: DiffStats,
    s: Optional[SampledStats],
    est: Estimates,
    acquisition_ratio: float = ACQUISITION_RATIO_THRESHOLD,
) -> list[Finding]:
    """Contention symptoms for one interval."""
    out = []
    if d.w > W_THRESHOLD:
        out.append(Finding("wait_time", f"wait time per second exceeds {W_THRESHOLD}", {"w": d.w}))
    if est.utilization > UTILIZATION_THRESHOLD:
        out.append(
            Finding(
                "utilization",
                f"utilization > {UTILIZATION_THRESHOLD:.0%}",
                {"eta_rho": est.utilization, **({"sampled_u": s.u} if s is not None else {})},
            )
        )
    S = est.service_time
    if S > 0:
        if est.acquisition is not None and est.acquisition.total > acquisition_ratio * S:
            out.append(
                Finding(
                    "acquisition_time",
                    f"acquisition time exceeds {acquisition_ratio:g}x holding time",
                    {"t_a": est.acquisition.total, "s": S},
                )
            )
        t_sleep = d.w / d.lam if d.lam > 0 else 0.0
        if t_sleep > acquisition_ratio * S:
            out.append(
                Finding(
                    "sleep_time",
                    f"sleeping time exceeds {acquisition_ratio:g}x holding time",
                    {"t_sleep": t_sleep, "s": S},
                )
            )
    return out


def stationarity_warnings(diffs: Iterable[DiffStats], tolerance: float = STATIONARITY_TOLERANCE) -> list[str]:
    out = []
    prev = None
    for i, d in enumerate(diffs):
        if prev is not None and prev.lam > 0 and abs(d.lam - prev.lam) / prev.lam > tolerance:
            out.append(f"interval {i}: get rate changed {prev.lam:.4g} -> {d.lam:.4g} Hz (>{tolerance:.0%})")
        prev = d
    return out


# -- snapshot files -------------------------------------------------------


class Snapshot(NamedTuple):
    latch_id: str
    stats: LatchStats
    sampled: Optional[SampledStats] = None


def _open_text(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        return open(source, newline="", encoding="utf-8"), True
    return source, False


def read_snapshots(source: Union[str, Path, IO[str]]) -> list[Snapshot]:
    """Parse a snapshot CSV; rows come back grouped per latch in timestamp order."""
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        missing = [c for c in SNAPSHOT_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns: {', '.join(missing)}", 1)
        pos = {name: header.index(name) for name in header}
        rows: list[Snapshot] = []
        last_ts: dict[str, float] = {}
        for lineno, row in enumerate(reader, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
            rows.append(_parse_row(row, pos, lineno))
            snap = rows[-1]
            if snap.latch_id in last_ts and snap.stats.timestamp <= last_ts[snap.latch_id]:
                raise ParseError(f"timestamps for latch {snap.latch_id!r} must strictly increase", lineno)
            last_ts[snap.latch_id] = snap.stats.timestamp
    finally:
        if owned:
            fh.close()
    order = {lid: i for i, lid in enumerate(dict.fromkeys(r.latch_id for r in rows))}
    return sorted(rows, key=lambda r: (order[r.latch_id], r.stats.timestamp))


def _parse_row(row: list[str], pos: dict[str, int], lineno: int) -> Snapshot:
    def num(name, kind):
        raw = row[pos[name]].strip()
        try:
            v = kind(raw)
        except ValueError:
            raise ParseError(f"{name}: {raw!r} is not a valid number", lineno) from None
        if isinstance(v, float) and not math.isfinite(v):
            raise ParseError(f"{name}: must be finite", lineno)
        if v < 0:
            raise ParseError(f"{name}: negative value {v}", lineno)
        return v

    stats = LatchStats(
        gets=num("gets", int),
        misses=num("misses", int),
        sleeps=num("sleeps", int),
        spin_gets=num("spin_gets", int),
        immediate_gets=num("immediate_gets", int),
        immediate_misses=num("immediate_misses", int),
        wait_time=num("wait_time_us", float),
        timestamp=num("timestamp_s", float),
    )
    sampled = None
    present = [c for c in SAMPLED_COLUMNS if c in pos and row[pos[c]].strip()]
    if present:
        if len(present) != len(SAMPLED_COLUMNS):
            raise ParseError("sampled columns must be given together", lineno)
        try:
            sampled = SampledStats(num("sampled_u", float), num("sampled_l", float), num("sampled_ns", float))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    latch_id = row[pos["latch_id"]].strip()
    if not latch_id:
        raise ParseError("empty latch_id", lineno)
    return Snapshot(latch_id, stats, sampled)


def write_snapshots(snapshots: Iterable[Snapshot], dest: Union[str, Path, IO[str], None] = None) -> str:
    """Write snapshots as CSV; returns the text when ``dest`` is None."""
    snaps = list(snapshots)
    with_sampled = any(s.sampled is not None for s in snaps)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SNAPSHOT_COLUMNS + (SAMPLED_COLUMNS if with_sampled else ()))
    for s in snaps:
        st = s.stats
        row = [
            s.latch_id,
            repr(float(st.timestamp)),
            st.gets,
            st.misses,
            st.sleeps,
            st.spin_gets,
            repr(float(st.wait_time)),
            st.immediate_gets,
            st.immediate_misses,
        ]
        if with_sampled:
            row += [repr(s.sampled.u), repr(s.sampled.l), repr(s.sampled.n_s)] if s.sampled else ["", "", ""]
        w.writerow(row)
    text = buf.getvalue()
    if dest is None:
        return text
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text, encoding="utf-8")
    else:
        dest.write(text)
    return text


def group_by_latch(snapshots: Iterable[Snapshot]) -> dict[str, list[Snapshot]]:
    out: dict[str, list[Snapshot]] = {}
    for s in snapshots:
        out.setdefault(s.latch_id, []).append(s)
    return out


def intervals(snaps: list[Snapshot]) -> Iterator[tuple[Snapshot, Snapshot]]:
    return zip(snaps, snaps[1:])

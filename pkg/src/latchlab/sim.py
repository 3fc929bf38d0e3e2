"""Latch workload simulation.

:func:`run_des` is a deterministic discrete-event simulation in integer
nanosecond time. Each of ``n_processes`` processes alternates between
thinking and requesting the latch; requests go through the same
:class:`~latchlab.latch.Latch` state machine the threaded code uses (atomic
get, FIFO wait list, posting on release, counters). Spinners are resolved
in random order at release, sleepers in FIFO order.

:func:`run_live` drives a real latch from worker threads.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import threading
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

from .dists import DistributionError, HoldingDist, parse_dist
from .latch import (
    FREE,
    AcquireContext,
    DEFAULT_RELIABLE_TIMEOUT_US,
    BackoffTimed,
    ClassPolicy,
    Latch,
    LatchConfig,
    Poisoned,
    PostOnly,
    ReliableTimed,
    WaitPolicy,
)
from .model import SPIN_ITERATION_NS, us_to_iterations
from .stats import DiffStats, LatchStats, SampledStats, Snapshot, diff, write_snapshots

ACQUISITION_COLUMNS = ("seq", "arrival_ts_ns", "missed", "spin_ns", "sleeps", "wait_ns")


class ConfigInvalid(ValueError):
    pass


class OverloadDetected(UserWarning):
    pass


class SpawnFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class PoissonArrivals:
    rate_hz: float

    @property
    def rate(self) -> float:
        return self.rate_hz


@dataclass(frozen=True)
class DeterministicArrivals:
    interval_us: float

    @property
    def rate(self) -> float:
        return 1e6 / self.interval_us


Arrivals = Union[PoissonArrivals, DeterministicArrivals]


@dataclass(frozen=True)
class SimConfig:
    """Workload for one simulated latch.

    ``arrival`` is the aggregate offered request rate; it is split evenly
    over the processes, each thinking for ``n_processes / rate`` on average
    between its requests.
    """

    holding: HoldingDist
    arrival: Arrivals
    spin_budget_us: float = 100.0
    n_processes: int = 2
    wait_policy: WaitPolicy = PostOnly()
    acquisitions: Optional[int] = 10_000
    horizon_s: Optional[float] = None
    seed: int = 0
    sample_interval_us: float = 1.0
    wake_latency_us: float = 10.0
    post_loss: float = 0.0
    record_acquisitions: bool = False
    ns_per_iteration: float = SPIN_ITERATION_NS

    def __post_init__(self):
        if self.n_processes < 1:
            raise ConfigInvalid("n_processes must be >= 1")
        if not self.spin_budget_us >= 0:
            raise ConfigInvalid("spin_budget_us must be >= 0")
        if not self.sample_interval_us > 0:
            raise ConfigInvalid("sample_interval_us must be > 0")
        if not self.wake_latency_us >= 0:
            raise ConfigInvalid("wake_latency_us must be >= 0")
        if not 0.0 <= self.post_loss <= 1.0:
            raise ConfigInvalid("post_loss must be a probability")
        if self.acquisitions is None and self.horizon_s is None:
            raise ConfigInvalid("one of acquisitions or horizon_s is required")
        if self.acquisitions is not None and self.acquisitions < 1:
            raise ConfigInvalid("acquisitions must be >= 1")
        if self.horizon_s is not None and not self.horizon_s > 0:
            raise ConfigInvalid("horizon_s must be > 0")
        if not self.arrival.rate > 0 or not math.isfinite(self.arrival.rate):
            raise ConfigInvalid("arrival rate must be positive and finite")
        if not 0 <= self.seed < 2**64:
            raise ConfigInvalid("seed must be a 64-bit unsigned integer")

    @property
    def offered_load(self) -> float:
        return self.arrival.rate * self.holding.mean * 1e-6

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "SimConfig":
        known = {
            "holding", "arrival", "spin_budget_us", "spin_iterations", "n_processes", "wait_policy",
            "acquisitions", "horizon_s", "seed", "sample_interval_us", "wake_latency_us", "post_loss",
            "record_acquisitions", "ns_per_iteration",
        }  # fmt: skip
        unknown = set(m) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key in ("holding", "arrival"):
            if key not in m:
                raise ConfigInvalid(f"missing required key {key!r}")
        try:
            kw: dict[str, Any] = {
                "holding": parse_dist(str(m["holding"])),
                "arrival": parse_arrival(str(m["arrival"])),
                "wait_policy": parse_wait_policy(str(m.get("wait_policy", "post"))),
            }
        except DistributionError as exc:
            raise ConfigInvalid(str(exc)) from exc
        ns_it = float(m.get("ns_per_iteration", SPIN_ITERATION_NS))
        kw["ns_per_iteration"] = ns_it
        if "spin_iterations" in m and "spin_budget_us" in m:
            raise ConfigInvalid("give spin_budget_us or spin_iterations, not both")
        if "spin_iterations" in m:
            kw["spin_budget_us"] = float(m["spin_iterations"]) * ns_it / 1000.0
        elif "spin_budget_us" in m:
            kw["spin_budget_us"] = float(m["spin_budget_us"])
        for key, conv in (
            ("n_processes", int),
            ("horizon_s", float),
            ("seed", int),
            ("sample_interval_us", float),
            ("wake_latency_us", float),
            ("post_loss", float),
            ("record_acquisitions", bool),
        ):
            if key in m:
                kw[key] = conv(m[key])
        if "acquisitions" in m:
            kw["acquisitions"] = None if m["acquisitions"] is None else int(m["acquisitions"])
        elif "horizon_s" in m:
            kw["acquisitions"] = None
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc


def parse_arrival(text: str) -> Arrivals:
    """``poisson:RATE_HZ`` or ``det:INTERVAL_US``."""
    kind, _, arg = text.partition(":")
    try:
        value = float(arg)
    except ValueError:
        raise ConfigInvalid(f"bad arrival {text!r}") from None
    if not (value > 0 and math.isfinite(value)):
        raise ConfigInvalid(f"arrival parameter must be positive and finite in {text!r}")
    if kind == "poisson":
        return PoissonArrivals(value)
    if kind in ("det", "deterministic"):
        return DeterministicArrivals(value)
    raise ConfigInvalid(f"unknown arrival kind {kind!r}")


def parse_wait_policy(text: str) -> WaitPolicy:
    """``post``, ``reliable[:TIMEOUT_US]`` or ``backoff``."""
    kind, _, arg = text.partition(":")
    if kind == "post":
        return PostOnly()
    if kind == "reliable":
        try:
            timeout = float(arg) if arg else DEFAULT_RELIABLE_TIMEOUT_US
        except ValueError:
            raise ConfigInvalid(f"bad reliable timeout in {text!r}") from None
        if not timeout > 0:
            raise ConfigInvalid("reliable timeout must be positive")
        return ReliableTimed(timeout)
    if kind == "backoff":
        return BackoffTimed()
    raise ConfigInvalid(f"unknown wait policy {text!r}")


@dataclass
class AcquisitionRecord:
    seq: int
    arrival_ts_ns: int
    missed: bool
    spin_ns: int
    sleeps: int
    wait_ns: int


@dataclass
class SimResult:
    config: SimConfig
    stats: LatchStats
    diff: DiffStats
    sampled: SampledStats
    elapsed_s: float
    spin_time_s: float  # summed spin time over completed acquisitions
    wait_time_s: float
    hold_time_s: float
    records: Optional[list[AcquisitionRecord]] = None
    warnings: list[str] = field(default_factory=list)
    live: bool = False
    first_sleeps: int = 0  # acquisitions that slept at least once, counted apart from the latch

    @property
    def mean_spin_s(self) -> float:
        return self.spin_time_s / self.stats.gets if self.stats.gets else 0.0

    @property
    def mean_acquisition_s(self) -> float:
        return (self.spin_time_s + self.wait_time_s) / self.stats.gets if self.stats.gets else 0.0

    def snapshots(self, latch_id: str = "sim") -> list[Snapshot]:
        begin = LatchStats(timestamp=0.0)
        end = replace(self.stats, timestamp=self.elapsed_s)
        return [Snapshot(latch_id, begin), Snapshot(latch_id, end, self.sampled)]

    def snapshot_csv(self, dest=None, latch_id: str = "sim") -> str:
        return write_snapshots(self.snapshots(latch_id), dest)

    def acquisitions_csv(self, dest: Union[str, Path, None] = None) -> str:
        if self.records is None:
            raise ValueError("run with record_acquisitions=True to export per-acquisition data")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ACQUISITION_COLUMNS)
        for r in self.records:
            w.writerow([r.seq, r.arrival_ts_ns, int(r.missed), r.spin_ns, r.sleeps, r.wait_ns])
        text = buf.getvalue()
        if dest is not None:
            Path(dest).write_text(text, encoding="utf-8")
        return text


# process phases
THINK, SPIN, SLEEP, WAKE, HOLD = range(5)
# event kinds; the order breaks no ties, the sequence number does
ARRIVE, SPIN_END, TIMEOUT, WAKEUP, RELEASE = range(5)


class _Proc:
    __slots__ = (
        "pid", "ctx", "phase", "token", "first", "sleeps", "spin_ns", "wait_ns",
        "mark", "arrival", "queued",
    )  # fmt: skip

    def __init__(self, pid: int):
        self.pid = pid
        self.ctx = AcquireContext(pid=pid)
        self.phase = THINK
        self.token = 0
        self.queued = False
        self.reset(0)

    def reset(self, now: int) -> None:
        self.first = True
        self.sleeps = 0
        self.spin_ns = 0
        self.wait_ns = 0
        self.mark = now
        self.arrival = now


class _Draws:
    """Batched random draws; keeps per-event numpy overhead low."""

    def __init__(self, fn, batch: int = 4096):
        self._fn = fn
        self._batch = batch
        self._buf = np.empty(0)
        self._i = 0

    def next(self) -> float:
        if self._i >= len(self._buf):
            self._buf = np.asarray(self._fn(self._batch), dtype=float)
            self._i = 0
        v = self._buf[self._i]
        self._i += 1
        return v


class DesEngine:
    """Event loop state for one :func:`run_des` run."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        hold_rng, think_rng, siro_rng, phase_rng, loss_seed = (np.random.default_rng(s) for s in ss.spawn(5))
        self.latch = Latch(
            LatchConfig("sim"),
            ClassPolicy(0, 0, 0, (0,) * 8),
            wait_policy=cfg.wait_policy,
            post_loss=cfg.post_loss,
            seed=int(loss_seed.integers(2**63)),
        )
        self._hold = _Draws(lambda n: cfg.holding.sample(hold_rng, n))
        n = cfg.n_processes
        if isinstance(cfg.arrival, PoissonArrivals):
            mean_think_ns = n * 1e9 / cfg.arrival.rate_hz
            self._think = _Draws(lambda k: think_rng.exponential(mean_think_ns, k))
            first = [self._think.next() for _ in range(n)]
        else:
            period = n * cfg.arrival.interval_us * 1000.0
            self._think = _Draws(lambda k: np.full(k, period))
            first = list(phase_rng.uniform(0, period, n))
        self._siro = siro_rng

        self.budget_ns = math.inf if math.isinf(cfg.spin_budget_us) else int(round(cfg.spin_budget_us * 1000))
        self.latency_ns = int(round(cfg.wake_latency_us * 1000))
        self.sample_ns = max(1, int(round(cfg.sample_interval_us * 1000)))

        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.procs = [_Proc(pid) for pid in range(1, n + 1)]
        self.spinners: list[_Proc] = []
        self._spin_idx: dict[int, int] = {}
        self.blocked = 0

        self._next_sample = self.sample_ns
        self.samples = 0
        self.sum_held = 0
        self.sum_blocked = 0
        self.sum_spin = 0

        self.gets = 0
        self.first_sleeps = 0
        self.total_spin_ns = 0
        self.total_wait_ns = 0
        self.total_hold_ns = 0
        self.records: Optional[list[AcquisitionRecord]] = [] if cfg.record_acquisitions else None
        self.done = False

        for p, t in zip(self.procs, first):
            self._push(int(t), ARRIVE, p)

    # -- plumbing ------------------------------------------------------

    def _push(self, t: int, kind: int, p: _Proc) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, kind, p.pid, p.token))

    def observe(self) -> tuple[int, int, int]:
        return (0 if self._free() else 1, self.blocked, len(self.spinners))

    def _free(self) -> bool:
        return self.latch.state is FREE

    def _advance(self, t: int) -> None:
        nxt = self._next_sample
        if nxt <= t:
            k = (t - nxt) // self.sample_ns + 1
            self.samples += k
            if not self._free():
                self.sum_held += k
            self.sum_blocked += k * self.blocked
            self.sum_spin += k * len(self.spinners)
            self._next_sample = nxt + k * self.sample_ns
        self.now = t

    def _add_spinner(self, p: _Proc) -> None:
        self._spin_idx[p.pid] = len(self.spinners)
        self.spinners.append(p)

    def _remove_spinner(self, p: _Proc) -> None:
        i = self._spin_idx.pop(p.pid)
        last = self.spinners.pop()
        if last is not p:
            self.spinners[i] = last
            self._spin_idx[last.pid] = i

    # -- process transitions ---------------------------------------------

    def _start_spin(self, p: _Proc) -> None:
        if self.budget_ns == 0:
            self._go_sleep(p)
            return
        p.phase = SPIN
        p.mark = self.now
        self._add_spinner(p)
        if self.budget_ns != math.inf:
            self._push(self.now + self.budget_ns, SPIN_END, p)

    def _go_sleep(self, p: _Proc) -> None:
        wp = self.cfg.wait_policy
        p.first = False
        p.sleeps += 1
        p.phase = SLEEP
        p.mark = self.now
        self.blocked += 1
        if isinstance(wp, BackoffTimed):
            self._push(self.now + int(round(wp.schedule(p.sleeps) * 1000)), TIMEOUT, p)
            return
        self.latch.enqueue(p.pid)
        p.queued = True
        if isinstance(wp, ReliableTimed):
            self._push(self.now + int(round(wp.timeout_us * 1000)), TIMEOUT, p)

    def _begin_wake(self, p: _Proc) -> None:
        p.token += 1  # cancels any pending timeout
        p.phase = WAKE
        if self.latency_ns == 0:
            self._finish_wake(p)
        else:
            self._push(self.now + self.latency_ns, WAKEUP, p)

    def _finish_wake(self, p: _Proc) -> None:
        self.blocked -= 1
        p.wait_ns += self.now - p.mark
        if self.latch.try_get(p.ctx):
            self._grant(p, missed=True)
        else:
            self._start_spin(p)

    def _grant(self, p: _Proc, missed: bool) -> None:
        if p.phase == SPIN:
            self._remove_spinner(p)
            p.spin_ns += self.now - p.mark
        spin_get = missed and p.first and p.sleeps == 0
        self.latch.record_get(missed, spin_get, p.sleeps, p.wait_ns / 1000.0)
        self.gets += 1
        if p.sleeps:
            self.first_sleeps += 1
        self.total_spin_ns += p.spin_ns
        self.total_wait_ns += p.wait_ns
        if self.records is not None:
            self.records.append(AcquisitionRecord(self.gets, p.arrival, missed, p.spin_ns, p.sleeps, p.wait_ns))
        p.phase = HOLD
        hold = max(0, int(round(self._hold.next() * 1000)))
        self.total_hold_ns += hold
        self._push(self.now + hold, RELEASE, p)
        if self.cfg.acquisitions is not None and self.gets >= self.cfg.acquisitions:
            self.done = True

    # -- events ----------------------------------------------------------

    def _on_arrive(self, p: _Proc) -> None:
        p.reset(self.now)
        if self.latch.try_get(p.ctx):
            self._grant(p, missed=False)
        else:
            self._start_spin(p)

    def _on_spin_end(self, p: _Proc) -> None:
        if p.phase != SPIN:
            return
        self._remove_spinner(p)
        p.spin_ns += self.now - p.mark
        self._go_sleep(p)

    def _on_timeout(self, p: _Proc) -> None:
        if p.phase != SLEEP:
            return
        if p.queued:
            self.latch.dequeue(p.pid)  # no-op when a lost post already removed it
            p.queued = False
        self._begin_wake(p)

    def _on_release(self, p: _Proc) -> None:
        posted = self.latch.free(p.pid)
        p.phase = THINK
        self._push(self.now + int(self._think.next()), ARRIVE, p)
        if posted is not None:
            self._begin_wake(self.procs[posted - 1])
        if self.spinners and self._free():
            winner = self.spinners[int(self._siro.integers(len(self.spinners)))]
            if self.latch.try_get(winner.ctx):
                self._grant(winner, missed=True)

    def run(self) -> None:
        horizon_ns = None if self.cfg.horizon_s is None else int(self.cfg.horizon_s * 1e9)
        handlers = {
            ARRIVE: self._on_arrive,
            SPIN_END: self._on_spin_end,
            TIMEOUT: self._on_timeout,
            WAKEUP: lambda p: p.phase == WAKE and self._finish_wake(p),
            RELEASE: self._on_release,
        }
        heap = self._heap
        procs = self.procs
        while heap and not self.done:
            t, _, kind, pid, token = heapq.heappop(heap)
            if horizon_ns is not None and t > horizon_ns:
                self._advance(horizon_ns)
                break
            p = procs[pid - 1]
            if kind != RELEASE and kind != ARRIVE and token != p.token:
                continue
            self._advance(t)
            handlers[kind](p)


def sample_state(source) -> tuple[int, int, int]:
    """One observation ``(held, blocked, spinning)`` of a latch or a running DES."""
    return source.observe()


def run_des(cfg: SimConfig) -> SimResult:
    """Simulate ``cfg`` in logical time; identical configs give identical results."""
    warns = []
    if cfg.offered_load >= 1.0:
        msg = f"offered load lambda*<t> = {cfg.offered_load:.4g} >= 1; no steady state"
        warnings.warn(msg, OverloadDetected, stacklevel=2)
        warns.append(f"OverloadDetected: {msg}")
    eng = DesEngine(cfg)
    eng.run()
    if not eng.done and cfg.acquisitions is not None and cfg.horizon_s is None:
        warns.append(f"simulation stalled after {eng.gets} acquisitions (lost posts without timeouts?)")
    if eng.latch.lost_posts and eng.blocked:
        warns.append(f"{eng.latch.lost_posts} posts lost; {eng.blocked} processes still asleep at the end")
    elapsed = eng.now / 1e9
    stats = eng.latch.stats(timestamp=elapsed)
    n = max(eng.samples, 1)
    sampled = SampledStats(u=eng.sum_held / n, l=eng.sum_blocked / n, n_s=eng.sum_spin / n, samples=eng.samples)
    d = diff(LatchStats(timestamp=0.0), stats) if elapsed > 0 else DiffStats(0.0, None, None, None, 0.0)
    return SimResult(
        config=cfg,
        stats=stats,
        diff=d,
        sampled=sampled,
        elapsed_s=elapsed,
        spin_time_s=eng.total_spin_ns / 1e9,
        wait_time_s=eng.total_wait_ns / 1e9,
        hold_time_s=eng.total_hold_ns / 1e9,
        records=eng.records,
        warnings=warns,
        first_sleeps=eng.first_sleeps,
    )


# -- live harness -------------------------------------------------------------


def _busy_wait_ns(duration_ns: float) -> None:
    end = time.perf_counter_ns() + duration_ns
    while time.perf_counter_ns() < end:
        pass


def run_live(cfg: SimConfig, timeout_s: float = 60.0) -> SimResult:
    """Run real worker threads against a real latch; results are statistical."""
    if math.isinf(cfg.spin_budget_us):
        spin = 1 << 40
    else:
        spin = us_to_iterations(cfg.spin_budget_us, cfg.ns_per_iteration)
    latch = Latch(
        LatchConfig("live", level=1),
        ClassPolicy(spin, 0, 0, (0,) * 8),
        wait_policy=cfg.wait_policy,
        post_loss=cfg.post_loss,
        seed=cfg.seed,
    )
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_processes
    target = cfg.acquisitions if cfg.acquisitions is not None else math.inf
    deadline = time.monotonic() + (cfg.horizon_s if cfg.horizon_s is not None else timeout_s)
    lock = threading.Lock()
    totals = {"gets": 0, "first_sleeps": 0, "spin_ns": 0.0, "wait_ns": 0.0, "hold_ns": 0.0}
    records: Optional[list[AcquisitionRecord]] = [] if cfg.record_acquisitions else None
    stop = threading.Event()
    errors: list[BaseException] = []
    think_mean_ns = n * 1e9 / cfg.arrival.rate
    sample_s = cfg.sample_interval_us / 1e6
    acc = {"samples": 0, "held": 0, "blocked": 0, "spin": 0}

    def worker(pid: int, seed: int) -> None:
        wrng = np.random.default_rng(seed)
        ctx = AcquireContext(pid=pid)
        try:
            while not stop.is_set():
                if isinstance(cfg.arrival, PoissonArrivals):
                    _busy_wait_ns(wrng.exponential(think_mean_ns))
                else:
                    _busy_wait_ns(think_mean_ns)
                t0 = time.perf_counter_ns()
                report = latch.get_wait(ctx)
                t1 = time.perf_counter_ns()
                hold = max(0.0, float(cfg.holding.sample(wrng)) * 1000)
                _busy_wait_ns(hold)
                latch.free(pid)
                wait_ns = report.wait_time_us * 1000
                with lock:
                    totals["gets"] += 1
                    totals["first_sleeps"] += report.sleeps > 0
                    totals["wait_ns"] += wait_ns
                    totals["spin_ns"] += max(0.0, (t1 - t0) - wait_ns)
                    totals["hold_ns"] += hold
                    if records is not None:
                        records.append(
                            AcquisitionRecord(
                                totals["gets"], t0, report.missed, int(max(0, t1 - t0 - wait_ns)),
                                report.sleeps, int(wait_ns),
                            )
                        )  # fmt: skip
                    if totals["gets"] >= target:
                        stop.set()
                if time.monotonic() > deadline:
                    stop.set()
        except BaseException as exc:  # surfaced to the caller
            errors.append(exc)
            stop.set()

    def sampler() -> None:
        while not stop.is_set():
            held, blocked, spinning = latch.observe()
            acc["samples"] += 1
            acc["held"] += held
            acc["blocked"] += blocked
            acc["spin"] += spinning
            time.sleep(sample_s)

    seeds = np.random.SeedSequence(cfg.seed).generate_state(n)
    threads = [threading.Thread(target=worker, args=(i + 1, int(s)), daemon=True) for i, s in enumerate(seeds)]
    threads.append(threading.Thread(target=sampler, daemon=True))
    begin = latch.stats()
    try:
        for t in threads:
            t.start()
    except RuntimeError as exc:
        stop.set()
        raise SpawnFailure(str(exc)) from exc
    for t in threads:
        t.join(max(0.0, deadline - time.monotonic()) + 5.0)
    stop.set()
    latch.teardown()  # release any sleeper stranded by a lost post
    for t in threads:
        t.join(1.0)
    if errors and not all(isinstance(e, Poisoned) for e in errors):
        raise errors[0]
    end = latch.stats()
    m = max(acc["samples"], 1)
    sampled = SampledStats(
        u=acc["held"] / m, l=acc["blocked"] / m, n_s=acc["spin"] / m, samples=acc["samples"]
    )
    elapsed = end.timestamp - begin.timestamp
    return SimResult(
        config=cfg,
        stats=replace(end, timestamp=elapsed),
        diff=diff(begin, end),
        sampled=sampled,
        elapsed_s=elapsed,
        spin_time_s=totals["spin_ns"] / 1e9,
        wait_time_s=totals["wait_ns"] / 1e9,
        hold_time_s=totals["hold_ns"] / 1e9,
        records=records,
        live=True,
        first_sleeps=totals["first_sleeps"],
    )

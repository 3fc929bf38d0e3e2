"""Hybrid spin-blocking latch.

Acquisition in wait mode goes through an immediate atomic get, a bounded
test-and-test-and-set spin, and then a blocking sleep on a FIFO wait list
until the releaser posts the head waiter. Exclusive latches and read-write
(shared) latches are supported, with level ordering for deadlock
prevention and per-latch statistics counters.

Python has no user-visible compare-and-swap, so the state word is guarded
by a tiny internal mutex that plays the role of the atomic instruction. All
spin polling reads the state without taking it.
"""

from __future__ import annotations

import enum
import math
import os
import random
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .stats import LatchStats

DEFAULT_SPIN_COUNT = 2000
DEFAULT_RELIABLE_TIMEOUT_US = 300_000
BACKOFF_CAP_MS = 2000
MISS_HISTORY = 64

# Observed 8i sleep timeouts (ms) for the first 16 sleeps of one get. The
# closed form 10*(2^floor((n+1)/2) - 1) only approximates this trace (it
# gives 10,30,30,70,... and 310 instead of 230), so the trace is used.
_BACKOFF_TRACE_MS = (10, 10, 10, 30, 30, 70, 70, 150, 230, 390, 390, 710, 710, 1350, 1350, 2000)


class LatchError(Exception):
    pass


class MalformedPolicy(LatchError, ValueError):
    pass


class OrderViolation(LatchError):
    def __init__(self, held_level: int, target_level: int, detail: str = ""):
        self.held_level = held_level
        self.target_level = target_level
        msg = f"latch level order violated: holding level {held_level}, requested level {target_level}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class ModeUnsupported(LatchError):
    pass


class NotHolder(LatchError):
    pass


class Poisoned(LatchError):
    pass


class Mode(enum.IntEnum):
    SHARED = 8
    EXCLUSIVE = 16


@dataclass(frozen=True)
class LatchConfig:
    name: str
    shared: bool = False
    level: int = 0
    class_id: int = 0
    child_number: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.level <= 14:
            raise ValueError(f"latch level must be in 0..14, got {self.level}")
        if not 0 <= self.class_id <= 7:
            raise ValueError(f"latch class must be in 0..7, got {self.class_id}")
        if self.child_number is not None and self.child_number < 1:
            raise ValueError("child_number must be a positive integer")


@dataclass(frozen=True)
class Free:
    pass


@dataclass(frozen=True)
class ExclusiveHeldBy:
    pid: int


@dataclass(frozen=True)
class SharedHeldBy:
    count: int


LatchState = Union[Free, ExclusiveHeldBy, SharedHeldBy]
FREE = Free()


@dataclass(frozen=True)
class AcquireContext:
    pid: int
    mode: Mode = Mode.EXCLUSIVE
    where_code: int = 0
    why_code: int = 0


@dataclass(frozen=True)
class ClassPolicy:
    spin: int
    yield_count: int
    waittime: int
    sleeps: tuple[int, ...]

    def sleep_us(self, n_wait: int) -> int:
        return self.sleeps[min(n_wait, len(self.sleeps)) - 1]


DEFAULT_CLASS_POLICY = ClassPolicy(spin=20000, yield_count=0, waittime=1, sleeps=(1000,) * 8)

_POLICY_FIELDS = ("Spin", "Yield", "Waittime") + tuple(f"Sleep{i}" for i in range(8))


def parse_class_policy(text: str) -> ClassPolicy:
    """Parse ``"Spin Yield Waittime Sleep0 ... Sleep7"``."""
    tokens = text.split()
    if len(tokens) != len(_POLICY_FIELDS):
        raise MalformedPolicy(f"expected {len(_POLICY_FIELDS)} tokens ({' '.join(_POLICY_FIELDS)}), got {len(tokens)}")
    values = []
    for name, tok in zip(_POLICY_FIELDS, tokens):
        try:
            v = int(tok)
        except ValueError:
            raise MalformedPolicy(f"{name}: {tok!r} is not an integer") from None
        if v < 0:
            raise MalformedPolicy(f"{name}: must be non-negative, got {v}")
        values.append(v)
    return ClassPolicy(values[0], values[1], values[2], tuple(values[3:]))


def backoff_timeout(n_wait: int) -> int:
    """Legacy sleep timeout in milliseconds for the ``n_wait``-th sleep of a get."""
    if n_wait < 1:
        raise ValueError("n_wait is 1-based")
    if n_wait <= len(_BACKOFF_TRACE_MS):
        return _BACKOFF_TRACE_MS[n_wait - 1]
    return BACKOFF_CAP_MS


@dataclass(frozen=True)
class PostOnly:
    """Block until posted by a releaser."""


@dataclass(frozen=True)
class ReliableTimed:
    """Block until posted, re-checking the latch every ``timeout_us``."""

    timeout_us: float = DEFAULT_RELIABLE_TIMEOUT_US


def _legacy_schedule_us(n_wait: int) -> float:
    return backoff_timeout(n_wait) * 1000.0


@dataclass(frozen=True)
class BackoffTimed:
    """Sleep for ``schedule(n_wait)`` microseconds without joining the wait list."""

    schedule: Callable[[int], float] = _legacy_schedule_us


WaitPolicy = Union[PostOnly, ReliableTimed, BackoffTimed]


def class_wait_policy(config: LatchConfig, policy: ClassPolicy) -> WaitPolicy:
    """Class 0 relies on wait posting; other classes sleep on their schedule."""
    if config.class_id == 0:
        return PostOnly()
    return BackoffTimed(policy.sleep_us)


@dataclass(frozen=True)
class HeldEntry:
    level: int
    child_number: Optional[int]
    name: str
    latch_id: int


class HeldSet:
    """Latches currently held by one process, in acquisition order."""

    def __init__(self):
        self._entries: list[HeldEntry] = []

    def add(self, config: LatchConfig, latch_id: int = 0) -> None:
        self._entries.append(HeldEntry(config.level, config.child_number, config.name, latch_id))

    def remove(self, config: LatchConfig, latch_id: int = 0) -> None:
        for i in range(len(self._entries) - 1, -1, -1):
            e = self._entries[i]
            if e.latch_id == latch_id and e.name == config.name and e.level == config.level:
                del self._entries[i]
                return

    @property
    def max_level(self) -> Optional[int]:
        return max((e.level for e in self._entries), default=None)

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        return f"HeldSet({self._entries!r})"


def check_order(held: Optional[HeldSet], target: LatchConfig) -> None:
    """Raise :class:`OrderViolation` unless ``target`` may be requested in wait mode.

    Levels must strictly rise. At the held maximum level, a second child of
    the same family is allowed only with a smaller child number than every
    child already held at that level.
    """
    if not held:
        return
    top = held.max_level
    if target.level > top:
        return
    if target.level < top:
        raise OrderViolation(top, target.level)
    same = [e for e in held if e.level == top]
    if target.child_number is None:
        raise OrderViolation(top, target.level, "same level, not a child latch")
    for e in same:
        if e.child_number is None or e.name != target.name:
            raise OrderViolation(top, target.level, f"same level as {e.name!r}")
        if not target.child_number < e.child_number:
            raise OrderViolation(
                top, target.level, f"child {target.child_number} requested after child {e.child_number}"
            )


@dataclass
class AcquisitionReport:
    missed: bool = False
    spin_iterations: int = 0  # first spin phase; bounded by the mode's budget
    sleeps: int = 0
    wait_time_us: float = 0.0
    total_spin_iterations: int = 0


@dataclass
class _Counters:
    gets: int = 0
    misses: int = 0
    sleeps: int = 0
    spin_gets: int = 0
    immediate_gets: int = 0
    immediate_misses: int = 0
    wait_time_us: float = 0.0
    misses_by_where: Counter = field(default_factory=Counter)


_ids = iter(range(1, 1 << 62))


class Latch:
    """A spin-blocking latch usable from real threads or from a simulator.

    The simulator drives :meth:`try_get`, :meth:`enqueue`, :meth:`free` and
    :meth:`record_get` directly in logical time; threads use
    :meth:`get_wait` and :meth:`get_nowait`.
    """

    def __init__(
        self,
        config: LatchConfig,
        policy: ClassPolicy = DEFAULT_CLASS_POLICY,
        wait_policy: Optional[WaitPolicy] = None,
        spin_count: int = DEFAULT_SPIN_COUNT,
        post_loss: float = 0.0,
        seed: Optional[int] = None,
        miss_history: int = MISS_HISTORY,
    ):
        self.config = config
        self.policy = policy
        self.wait_policy = wait_policy if wait_policy is not None else class_wait_policy(config, policy)
        self.spin_count = spin_count
        self.post_loss = post_loss
        self.id = next(_ids)
        self._rng = random.Random(seed)

        self._atomic = threading.Lock()  # stands in for the CAS on the state word
        self._state: LatchState = FREE
        self._shared = Counter()
        self._blocker: Optional[int] = None
        self._waiters: deque[int] = deque()
        self._parked: dict[int, threading.Event] = {}

        self._counter_lock = threading.Lock()
        self._c = _Counters()
        self.lost_posts = 0
        self.last_where = 0
        self.last_why = 0
        self.recent_misses: deque[tuple[int, int]] = deque(maxlen=miss_history)

        self._spinning = 0
        self._sleeping = 0
        self.poisoned = False

    def __repr__(self):
        return f"Latch({self.config.name!r}, level={self.config.level}, state={self._state})"

    @property
    def state(self) -> LatchState:
        return self._state

    @property
    def blocking(self) -> Optional[int]:
        """Pid of an exclusive requester that currently blocks new shared gets."""
        return self._blocker

    @property
    def waiters(self) -> tuple[int, ...]:
        return tuple(self._waiters)

    def spin_budget(self, mode: Mode) -> int:
        if not self.config.shared:
            return self.policy.spin
        if mode is Mode.EXCLUSIVE:
            return 2 * self.spin_count
        return 0

    def _check_mode(self, ctx: AcquireContext) -> None:
        if ctx.mode is Mode.SHARED and not self.config.shared:
            raise ModeUnsupported(f"{self.config.name!r} is exclusive-only; shared get requested")

    def _looks_free(self, ctx: AcquireContext) -> bool:
        # nonatomic read of the state word, as in the spin loop
        st = self._state
        if ctx.mode is Mode.EXCLUSIVE:
            return st is FREE
        return (st is FREE or type(st) is SharedHeldBy) and self._blocker in (None, ctx.pid)

    # -- atomic transitions ---------------------------------------------

    def try_get(self, ctx: AcquireContext) -> bool:
        """One atomic acquisition attempt; touches no statistics counters."""
        self._check_mode(ctx)
        with self._atomic:
            st = self._state
            if ctx.mode is Mode.EXCLUSIVE:
                if st is not FREE:
                    return False
                self._state = ExclusiveHeldBy(ctx.pid)
                if self._blocker == ctx.pid:
                    self._blocker = None
            else:
                if type(st) is ExclusiveHeldBy or self._blocker not in (None, ctx.pid):
                    return False
                self._state = SharedHeldBy(1 if st is FREE else st.count + 1)
                self._shared[ctx.pid] += 1
            self.last_where = ctx.where_code
            self.last_why = ctx.why_code
            return True

    def announce_blocking(self, pid: int) -> None:
        """An exclusive waiter on a shared latch stops new shared gets."""
        with self._atomic:
            if self.config.shared and self._blocker is None and type(self._state) is SharedHeldBy:
                self._blocker = pid

    def enqueue(self, pid: int) -> None:
        with self._atomic:
            self._waiters.append(pid)

    def dequeue(self, pid: int) -> bool:
        with self._atomic:
            try:
                self._waiters.remove(pid)
                return True
            except ValueError:
                return False

    def free(self, pid: int, held: Optional[HeldSet] = None) -> Optional[int]:
        """Release the latch; returns the pid of the waiter that was posted, if any."""
        with self._atomic:
            st = self._state
            if type(st) is ExclusiveHeldBy and st.pid == pid:
                self._state = FREE  # plain store; leaving the mutex is the barrier
            elif type(st) is SharedHeldBy and self._shared[pid] > 0:
                self._shared[pid] -= 1
                if not self._shared[pid]:
                    del self._shared[pid]
                self._state = FREE if st.count == 1 else SharedHeldBy(st.count - 1)
            else:
                raise NotHolder(f"pid {pid} does not hold {self.config.name!r} (state {st})")
            posted = None
            event = None
            if self._state is FREE and self._waiters:
                # a listed blocker goes first: shared waiters cannot pass it anyway
                if self._blocker is not None and self._blocker in self._waiters:
                    self._waiters.remove(self._blocker)
                    posted = self._blocker
                else:
                    posted = self._waiters.popleft()
                event = self._parked.get(posted)
        if held is not None:
            held.remove(self.config, self.id)
        if posted is None:
            return None
        if self.post_loss and self._rng.random() < self.post_loss:
            self.lost_posts += 1
            return None
        if event is not None:
            event.set()
        return posted

    # -- statistics -----------------------------------------------------

    def record_get(self, missed: bool, spin_get: bool, sleeps: int, wait_time_us: float, where: int = 0) -> None:
        with self._counter_lock:
            c = self._c
            c.gets += 1
            if missed:
                c.misses += 1
                c.misses_by_where[where] += 1
            if spin_get:
                c.spin_gets += 1
            c.sleeps += sleeps
            c.wait_time_us += wait_time_us
        if missed:
            self.recent_misses.append((where, sleeps))

    def record_nowait(self, acquired: bool) -> None:
        with self._counter_lock:
            self._c.immediate_gets += 1
            if not acquired:
                self._c.immediate_misses += 1

    def stats(self, timestamp: Optional[float] = None) -> LatchStats:
        with self._counter_lock:
            c = self._c
            return LatchStats(
                gets=c.gets,
                misses=c.misses,
                sleeps=c.sleeps,
                spin_gets=c.spin_gets,
                immediate_gets=c.immediate_gets,
                immediate_misses=c.immediate_misses,
                wait_time=c.wait_time_us,
                timestamp=time.monotonic() if timestamp is None else timestamp,
            )

    @property
    def misses_by_where(self) -> dict[int, int]:
        with self._counter_lock:
            return dict(self._c.misses_by_where)

    def observe(self) -> tuple[int, int, int]:
        """(held, blocked processes, spinning processes); racy by design."""
        return (0 if self._state is FREE else 1, self._sleeping, self._spinning)

    # -- thread-facing gets -----------------------------------------------

    def get_nowait(self, ctx: AcquireContext, held: Optional[HeldSet] = None) -> bool:
        ok = self.try_get(ctx)
        self.record_nowait(ok)
        if ok and held is not None:
            held.add(self.config, self.id)
        return ok

    def get_wait(self, ctx: AcquireContext, held: Optional[HeldSet] = None) -> AcquisitionReport:
        """Immediate get, then spin, then sleep until posted; repeat until acquired."""
        self._check_mode(ctx)
        if self.poisoned:
            raise Poisoned(self.config.name)
        check_order(held, self.config)
        st = self._state
        if (type(st) is ExclusiveHeldBy and st.pid == ctx.pid) or (
            ctx.mode is Mode.EXCLUSIVE and self._shared.get(ctx.pid)
        ):
            lvl = self.config.level
            raise OrderViolation(lvl, lvl, "process already holds this latch")

        report = AcquisitionReport()
        if self.try_get(ctx):
            self.record_get(False, False, 0, 0.0, ctx.where_code)
            if held is not None:
                held.add(self.config, self.id)
            return report

        report.missed = True
        if ctx.mode is Mode.EXCLUSIVE and self.config.shared:
            self.announce_blocking(ctx.pid)
        budget = self.spin_budget(ctx.mode)
        first = True
        spin_get = False
        while True:
            ok, n = self._spin(ctx, budget)
            if first:
                report.spin_iterations = n
            report.total_spin_iterations += n
            if not ok:
                ok = self._yield_phase(ctx)
            if not ok:
                ok, waited = self._sleep(ctx, report.sleeps + 1)
                if waited is not None:
                    report.sleeps += 1
                    report.wait_time_us += waited
            if ok:
                spin_get = first and report.sleeps == 0
                break
            if self.poisoned:
                raise Poisoned(self.config.name)
            first = False

        self.record_get(True, spin_get, report.sleeps, report.wait_time_us, ctx.where_code)
        if held is not None:
            held.add(self.config, self.id)
        return report

    def _spin(self, ctx: AcquireContext, budget: int) -> tuple[bool, int]:
        if budget <= 0:
            return False, 0
        with self._counter_lock:
            self._spinning += 1
        try:
            for i in range(budget):
                if self._looks_free(ctx) and self.try_get(ctx):
                    return True, i + 1
            return False, budget
        finally:
            with self._counter_lock:
                self._spinning -= 1

    def _yield_phase(self, ctx: AcquireContext) -> bool:
        for _ in range(self.policy.yield_count if not self.config.shared else 0):
            os.sched_yield()
            if self._looks_free(ctx) and self.try_get(ctx):
                return True
        return False

    def _sleep(self, ctx: AcquireContext, n_wait: int) -> tuple[bool, Optional[float]]:
        """Block once. Returns (acquired without blocking, blocked microseconds or None)."""
        wp = self.wait_policy
        event = threading.Event()
        queued = not isinstance(wp, BackoffTimed)
        with self._atomic:
            self._parked[ctx.pid] = event
            if queued:
                self._waiters.append(ctx.pid)
        try:
            # last immediate get after joining the wait list closes the lost-wakeup window
            if self.try_get(ctx):
                if queued:
                    self.dequeue(ctx.pid)
                return True, None
            if isinstance(wp, ReliableTimed):
                timeout = wp.timeout_us / 1e6
            elif isinstance(wp, BackoffTimed):
                timeout = wp.schedule(n_wait) / 1e6
            else:
                timeout = None
            with self._counter_lock:
                self._sleeping += 1
            t0 = time.monotonic()
            try:
                event.wait(timeout)
            finally:
                waited = (time.monotonic() - t0) * 1e6
                with self._counter_lock:
                    self._sleeping -= 1
            if queued:
                self.dequeue(ctx.pid)  # timed out or poisoned while still listed
            return False, waited
        finally:
            with self._atomic:
                self._parked.pop(ctx.pid, None)

    def teardown(self) -> None:
        """Poison the latch and wake every sleeper; they raise :class:`Poisoned`."""
        self.poisoned = True
        with self._atomic:
            events = list(self._parked.values())
            self._waiters.clear()
        for ev in events:
            ev.set()

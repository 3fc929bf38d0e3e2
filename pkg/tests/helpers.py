"""Shared test machinery: a step-by-step interleaving driver for the latch."""

import math
import random

from latchlab.dists import Deterministic, Exponential, Pareto, Uniform, histogram
from latchlab.latch import (
    FREE,
    AcquireContext,
    BackoffTimed,
    ExclusiveHeldBy,
    HeldSet,
    Latch,
    LatchConfig,
    Mode,
    PostOnly,
    ReliableTimed,
    SharedHeldBy,
)
from latchlab.sim import DeterministicArrivals, PoissonArrivals, SimConfig

# acceptance verdict lines, printed in the terminal summary by conftest
ACCEPTANCE: list[str] = []

# -- latch ordering and compatibility ------------------------------------------


def held_of(*configs: LatchConfig) -> HeldSet:
    h = HeldSet()
    for c in configs:
        h.add(c)
    return h


def order_oracle(held, target: LatchConfig) -> bool:
    """Independent statement of the ordering rule, used against check_order."""
    for h in held:
        if h.level < target.level:
            continue
        same_family_child = (
            h.level == target.level
            and h.name == target.name
            and h.child_number is not None
            and target.child_number is not None
            and target.child_number < h.child_number
        )
        if not same_family_child:
            return False
    return True


# (latch state, requested mode) -> (immediate grant, spin budget in iterations)
COMPATIBILITY = {
    ("S", Mode.SHARED): (True, 0),
    ("S", Mode.EXCLUSIVE): (False, 4000),
    ("X", Mode.SHARED): (False, 0),
    ("X", Mode.EXCLUSIVE): (False, 4000),
    ("blocking", Mode.SHARED): (False, 0),
    ("blocking", Mode.EXCLUSIVE): (False, 4000),
}


def probe_compatibility(row: str, mode: Mode) -> tuple[bool, int]:
    lt = Latch(LatchConfig("s", shared=True))
    if row == "X":
        lt.try_get(AcquireContext(1, Mode.EXCLUSIVE))
    else:
        lt.try_get(AcquireContext(1, Mode.SHARED))
        if row == "blocking":  # shared holder plus an announced exclusive waiter
            lt.announce_blocking(9)
    return lt.try_get(AcquireContext(2, mode)), lt.spin_budget(mode)


# -- step-by-step interleavings ---------------------------------------------------

IDLE, WANT, QUEUED, HOLD = range(4)


class Proc:
    def __init__(self, pid: int):
        self.pid = pid
        self.state = IDLE
        self.ctx = AcquireContext(pid)


def _check(latch: Latch, procs: list[Proc]) -> None:
    x = [p.pid for p in procs if p.state == HOLD and p.ctx.mode is Mode.EXCLUSIVE]
    s = [p.pid for p in procs if p.state == HOLD and p.ctx.mode is Mode.SHARED]
    assert len(x) <= 1, f"two exclusive holders: {x}"
    assert not (x and s), f"exclusive holder {x} alongside shared holders {s}"
    st = latch.state
    if x:
        assert st == ExclusiveHeldBy(x[0])
    elif s:
        assert st == SharedHeldBy(len(s))
    else:
        assert st is FREE
        # a free latch with sleepers needs someone awake to take it
        listed = set(latch.waiters)
        awake = [q for q in procs if q.state == WANT or (q.state == QUEUED and q.pid not in listed)]
        assert not listed or awake, f"waiters {sorted(listed)} stranded on a free latch"


def run_schedule(seed: int, n_procs: int = 4, steps: int = 40, shared: bool = True) -> int:
    """Drive ``n_procs`` simulated processes through one random schedule.

    Each step advances one process by one atomic action (get attempt,
    enqueue, wake check or release). Returns the number of acquisitions.
    """
    rng = random.Random(seed)
    latch = Latch(LatchConfig("il", shared=shared))
    procs = [Proc(i + 1) for i in range(n_procs)]
    acquired = 0
    for _ in range(steps):
        p = rng.choice(procs)
        if p.state == IDLE:
            mode = rng.choice([Mode.SHARED, Mode.EXCLUSIVE]) if shared else Mode.EXCLUSIVE
            p.ctx = AcquireContext(p.pid, mode)
            if latch.try_get(p.ctx):
                p.state = HOLD
            else:
                if mode is Mode.EXCLUSIVE:
                    latch.announce_blocking(p.pid)
                p.state = WANT
        elif p.state == WANT:
            if rng.random() < 0.6:
                if latch.try_get(p.ctx):
                    p.state = HOLD
            else:
                latch.enqueue(p.pid)
                if latch.try_get(p.ctx):  # re-check after joining the list
                    latch.dequeue(p.pid)
                    p.state = HOLD
                else:
                    p.state = QUEUED
        elif p.state == QUEUED:
            if p.pid not in latch.waiters:  # posted
                p.state = WANT
        else:
            posted = latch.free(p.pid)
            p.state = IDLE
            assert posted is None or posted not in latch.waiters
        if p.state == HOLD:
            acquired += 1
        _check(latch, procs)
    return acquired


# -- simulator configurations ---------------------------------------------------


def random_config(rng: random.Random, acquisitions=300) -> SimConfig:
    holding = rng.choice(
        [Exponential(rng.uniform(1, 20)), Deterministic(rng.uniform(1, 20)), Uniform(0.5, rng.uniform(1, 30)),
         Pareto(rng.uniform(2.2, 4), rng.uniform(0.5, 5)), histogram([0, 2, 10], [0.1, 0.6, 0.3])]
    )  # fmt: skip
    load = rng.uniform(0.02, 0.95)
    if rng.random() < 0.8:
        arrival = PoissonArrivals(load / holding.mean * 1e6)
    else:
        arrival = DeterministicArrivals(holding.mean / load)
    policy = rng.choice([PostOnly(), PostOnly(), ReliableTimed(rng.uniform(5, 200)), BackoffTimed(lambda n: 20.0 * n)])
    budget = rng.choice([0.0, math.inf, rng.uniform(0, 3) * holding.mean, rng.uniform(0, 0.3) * holding.mean])
    return SimConfig(
        holding=holding,
        arrival=arrival,
        spin_budget_us=budget,
        n_processes=rng.randint(1, 8),
        wait_policy=policy,
        acquisitions=acquisitions,
        seed=rng.getrandbits(64),
        sample_interval_us=rng.choice([0.5, 1.0, 7.0]),
        wake_latency_us=rng.choice([0.0, 0.0, rng.uniform(0.1, 30)]),
        post_loss=0.0 if isinstance(policy, PostOnly) else rng.choice([0.0, 0.3]),
        record_acquisitions=True,
    )


def recurrent_sleeps_disabled(c: SimConfig) -> bool:
    return c.wake_latency_us == 0 and isinstance(c.wait_policy, PostOnly) and c.post_loss == 0


def check_conservation(res) -> None:
    s = res.stats
    assert s.misses == s.spin_gets + res.first_sleeps
    assert s.sleeps >= s.misses - s.spin_gets
    assert s.consistent()
    if res.records is not None:
        assert sum(r.missed for r in res.records) == s.misses
        assert sum(r.sleeps for r in res.records) == s.sleeps
        assert all(r.missed or r.sleeps == 0 for r in res.records)
        if not res.live:
            assert all(r.missed or r.spin_ns == 0 for r in res.records)
    if not res.live and recurrent_sleeps_disabled(res.config):
        assert s.sleeps == s.misses - s.spin_gets  # sigma + kappa == 1 exactly

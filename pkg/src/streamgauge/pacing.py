"""Nanosecond-deadline pacing shared by the generator and the engine throttle."""

from __future__ import annotations

import threading
import time
from typing import Optional

from .core import NS_PER_SEC, Clock

SPIN_THRESHOLD_NS = 100_000


def wait_until(clock: Clock, deadline: int, cancel: Optional[threading.Event] = None) -> bool:
    """Sleep until ``clock.now() >= deadline``; spin only for the last 100 us.

    The spin yields the GIL (``sleep(0)``) so a pacing thread never starves the
    consumer it is pacing against. Returns False if cancelled first.
    """
    while True:
        if cancel is not None and cancel.is_set():
            return False
        remaining = deadline - clock.now()
        if remaining <= 0:
            return True
        if remaining > SPIN_THRESHOLD_NS:
            # cap each sleep so cancellation is observed within 10 ms
            time.sleep(min(remaining - SPIN_THRESHOLD_NS, 10_000_000) / NS_PER_SEC)
        else:
            time.sleep(0)


class TokenBucket:
    """GCRA-style token bucket: ``acquire(n)`` blocks until n tokens accrue.

    ``burst_ns`` is how far the bucket may run ahead of its nominal schedule,
    i.e. a burst allowance of ``rate * burst_ns`` tokens.
    """

    def __init__(self, rate: float, clock: Clock, burst_ns: int = 5_000_000):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.clock = clock
        self.burst_ns = burst_ns
        self._tat: Optional[float] = None  # theoretical arrival time, ns

    def acquire(self, n: int, cancel: Optional[threading.Event] = None) -> bool:
        now = self.clock.now()
        tat = now if self._tat is None else max(self._tat, now - self.burst_ns)
        tat += n * NS_PER_SEC / self.rate
        self._tat = tat
        deadline = int(tat)
        if deadline > now:
            return wait_until(self.clock, deadline, cancel)
        return True

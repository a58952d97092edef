"""Injectable clocks.

Everything time-dependent in this package (auction waits, cache expiry,
timeline stamps, transaction-id timestamps) reads time through one of these
objects so tests can run on a virtual clock. Operation-cost stopwatches are
the exception: they always use ``time.perf_counter_ns`` directly, because
they measure real work, not simulated time.
"""

from __future__ import annotations

import time
from typing import Protocol


class Clock(Protocol):
    def now_ns(self) -> int:
        """Nanoseconds since the Unix epoch."""
        ...

    def sleep(self, seconds: float) -> None:
        ...


class SystemClock:
    """Real wall clock."""

    def now_ns(self) -> int:
        return time.time_ns()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Deterministic clock: ``sleep`` advances time instead of blocking."""

    def __init__(self, start_ns: int = 1_700_000_000_000_000_000):
        self._now_ns = int(start_ns)

    def now_ns(self) -> int:
        return self._now_ns

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now_ns += int(seconds * 1e9)

    def advance_ns(self, ns: int) -> None:
        if ns < 0:
            raise ValueError("cannot move a clock backwards")
        self._now_ns += ns

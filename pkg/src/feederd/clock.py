"""Clock abstraction so the controller, actuators, and simulator share one time source.

The daemon runs on the wall clock; tests and scenario runs inject a virtual
clock so dispense waits and capture cadence advance instantly and
deterministically.
"""

from __future__ import annotations

import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now_s(self) -> float:
        """Monotonic seconds used for cadence, cooldowns, and schedules."""
        ...

    def now_ms(self) -> int:
        """Epoch-style milliseconds stamped onto events and readings."""
        ...

    def sleep(self, seconds: float) -> None:
        ...


class WallClock:
    """Real time: monotonic for intervals, unix epoch for event timestamps."""

    def now_s(self) -> float:
        return time.monotonic()

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Simulated time starting at zero; advances only when told to.

    sleep() jumps time forward immediately, which is what makes accelerated
    scenario runs and deterministic dispense timing possible.
    """

    def __init__(self, start_s: float = 0.0):
        self._t = float(start_s)

    def now_s(self) -> float:
        return self._t

    def now_ms(self) -> int:
        return int(self._t * 1000)

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot sleep a negative duration")
        self._t += seconds

    def advance_to(self, t_s: float) -> None:
        if t_s < self._t:
            raise ValueError(f"cannot move virtual time backwards ({self._t} -> {t_s})")
        self._t = t_s

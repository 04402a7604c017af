"""Timed dispense execution for the food valve and water pump.

A dispense is planned as duration = quantity / rate, then executed as an
open -> wait -> close command sequence against an actuator port. The food
valve speaks in duty-cycle percent (7 = open, 0 = closed); the water pump is
a plain on/off. Whatever happens mid-cycle, the trace always closes what it
opened — that is the hardware-safety contract every test leans on.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Union

from .clock import Clock, WallClock

logger = logging.getLogger(__name__)

DUTY_OPEN = 7
DUTY_CLOSED = 0


class ActuationError(Exception):
    """Base for dispense-path failures."""


class InvalidRateError(ActuationError):
    """Dispensing rate must be strictly positive."""


class NegativeQuantityError(ActuationError):
    """Requested quantity must be >= 0."""


class PortFault(ActuationError):
    """The actuator port rejected a command."""


class BusyError(ActuationError):
    """Another dispense is already running on the same target."""


class Target(str, Enum):
    FOOD = "food"
    WATER = "water"


@dataclass(frozen=True)
class DispensePlan:
    """Target, quantity (g or ml), calibrated rate, and derived open time."""

    target: Target
    quantity: float
    rate: float
    duration_s: float


@dataclass(frozen=True)
class FoodValve:
    duty_percent: int

    def __post_init__(self):
        if self.duty_percent not in (DUTY_OPEN, DUTY_CLOSED):
            raise ValueError(f"food valve duty must be {DUTY_OPEN} or {DUTY_CLOSED}")


@dataclass(frozen=True)
class WaterPump:
    on: bool


@dataclass(frozen=True)
class Wait:
    seconds: float

    def __post_init__(self):
        if self.seconds < 0:
            raise ValueError("wait must be >= 0 seconds")


ActuatorCommand = Union[FoodValve, WaterPump, Wait]


class TraceOutcome(str, Enum):
    COMPLETED = "completed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class CommandTrace:
    """What actually happened on the wire, with timing for accounting.

    dispensed is rate x actual open time, so aborted cycles credit the
    partial amount that physically left the hopper.
    """

    plan: DispensePlan
    commands: tuple
    started_at_ms: int
    finished_at_ms: int
    outcome: TraceOutcome
    dispensed: float
    abort_reason: Optional[str] = None


class ActuatorPort(Protocol):
    """Minimal hardware contract: open/close per target, raising PortFault."""

    def open(self, target: Target) -> None:
        ...

    def close(self, target: Target) -> None:
        ...


def _open_command(target: Target) -> ActuatorCommand:
    return FoodValve(DUTY_OPEN) if target is Target.FOOD else WaterPump(True)


def _close_command(target: Target) -> ActuatorCommand:
    return FoodValve(DUTY_CLOSED) if target is Target.FOOD else WaterPump(False)


def plan_dispense(target: Target, quantity: float, rate: float) -> DispensePlan:
    """Compute the open duration for a desired quantity at a calibrated rate."""
    if rate <= 0:
        raise InvalidRateError(f"dispensing rate must be > 0, got {rate}")
    if quantity < 0:
        raise NegativeQuantityError(f"quantity must be >= 0, got {quantity}")
    return DispensePlan(
        target=target,
        quantity=float(quantity),
        rate=float(rate),
        duration_s=float(quantity) / float(rate),
    )


class Dispenser:
    """Executes plans against a port, one dispense per target at a time."""

    def __init__(self, port: ActuatorPort, clock: Optional[Clock] = None):
        self._port = port
        self._clock = clock if clock is not None else WallClock()
        self._locks = {t: threading.Lock() for t in Target}

    def execute(self, plan: DispensePlan) -> CommandTrace:
        """Run open -> wait -> close for the plan.

        A zero-quantity plan is a completed no-op. Any port fault forces a
        close command into the trace and yields an Aborted outcome; the
        dispensed amount reflects how long the valve was actually open.
        Raises BusyError if the target is already mid-dispense.
        """
        lock = self._locks[plan.target]
        if not lock.acquire(blocking=False):
            raise BusyError(f"{plan.target.value} dispense already in progress")
        try:
            return self._run(plan)
        finally:
            lock.release()

    def _run(self, plan: DispensePlan) -> CommandTrace:
        started = self._clock.now_ms()
        if plan.duration_s == 0.0:
            return CommandTrace(
                plan=plan,
                commands=(),
                started_at_ms=started,
                finished_at_ms=started,
                outcome=TraceOutcome.COMPLETED,
                dispensed=0.0,
            )

        commands: list[ActuatorCommand] = [_open_command(plan.target)]
        try:
            self._port.open(plan.target)
        except PortFault as fault:
            commands.append(_close_command(plan.target))
            self._force_close(plan.target)
            logger.warning("%s open rejected: %s", plan.target.value, fault)
            return CommandTrace(
                plan=plan,
                commands=tuple(commands),
                started_at_ms=started,
                finished_at_ms=self._clock.now_ms(),
                outcome=TraceOutcome.ABORTED,
                dispensed=0.0,
                abort_reason=f"open fault: {fault}",
            )

        opened_s = self._clock.now_s()
        commands.append(Wait(plan.duration_s))
        self._clock.sleep(plan.duration_s)
        open_time = self._clock.now_s() - opened_s

        commands.append(_close_command(plan.target))
        try:
            self._port.close(plan.target)
        except PortFault as fault:
            logger.warning("%s close rejected: %s", plan.target.value, fault)
            return CommandTrace(
                plan=plan,
                commands=tuple(commands),
                started_at_ms=started,
                finished_at_ms=self._clock.now_ms(),
                outcome=TraceOutcome.ABORTED,
                dispensed=plan.rate * open_time,
                abort_reason=f"close fault: {fault}",
            )

        return CommandTrace(
            plan=plan,
            commands=tuple(commands),
            started_at_ms=started,
            finished_at_ms=self._clock.now_ms(),
            outcome=TraceOutcome.COMPLETED,
            dispensed=plan.rate * open_time,
        )

    def _force_close(self, target: Target) -> None:
        # Safety: always try to drive the hardware closed, even after a fault.
        try:
            self._port.close(target)
        except PortFault:
            logger.error("%s forced close also rejected", target.value)


@dataclass
class SimulatedPort:
    """In-memory port that tracks valve/pump state and can inject faults.

    fail_open_on / fail_close_on are 1-based call indices (per method across
    both targets) at which the port raises PortFault, for fault-injection
    tests.
    """

    fail_open_on: Optional[int] = None
    fail_close_on: Optional[int] = None
    open_state: dict = field(default_factory=lambda: {t: False for t in Target})
    open_calls: int = 0
    close_calls: int = 0

    def open(self, target: Target) -> None:
        self.open_calls += 1
        if self.fail_open_on is not None and self.open_calls == self.fail_open_on:
            raise PortFault(f"injected open fault on call {self.open_calls}")
        self.open_state[target] = True

    def close(self, target: Target) -> None:
        self.close_calls += 1
        if self.fail_close_on is not None and self.close_calls == self.fail_close_on:
            raise PortFault(f"injected close fault on call {self.close_calls}")
        self.open_state[target] = False


class LoggingPort:
    """Decorator port that logs every command it forwards."""

    def __init__(self, inner: ActuatorPort, log: Optional[logging.Logger] = None):
        self._inner = inner
        self._log = log if log is not None else logger

    def open(self, target: Target) -> None:
        self._log.info("actuator open %s", target.value)
        self._inner.open(target)

    def close(self, target: Target) -> None:
        self._log.info("actuator close %s", target.value)
        self._inner.close(target)

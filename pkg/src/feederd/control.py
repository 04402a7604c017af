"""Dispensing decisions: fuse food-level and presence readings with schedules.

The behavioral core is the teaser-then-meal protocol: a small portion is
released the moment a pet shows up; if the pet stays engaged through the
engagement window, the rest of the meal follows. Independently, a low bowl
with no pet around triggers a refill plus an alert. Everything is gated by a
per-target cooldown so no rule can machine-gun the servo.

decide() is a pure function from (state, config, readings, now) to
(new state, actions); the runtime owns when it gets called.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .actuation import DispensePlan, Target, plan_dispense
from .vision import FoodLevelReading, FoodLevelStatus, PresenceReading

SECONDS_PER_DAY = 86_400


class InvalidScheduleError(Exception):
    """Schedule entries are unsorted, duplicated, or out of range."""


class Phase(str, Enum):
    IDLE = "idle"
    TEASER_SERVED = "teaser_served"
    MEAL_SERVED = "meal_served"


class AlertKind(str, Enum):
    LOW_FOOD = "low_food"
    LOW_WATER = "low_water"
    DISPENSE_FAULT = "dispense_fault"
    MIRROR_UNREACHABLE = "mirror_unreachable"


@dataclass(frozen=True)
class ScheduleEntry:
    target: Target
    time_of_day_s: int
    quantity: float

    @property
    def entry_id(self) -> str:
        return f"{self.target.value}@{self.time_of_day_s}"


@dataclass(frozen=True)
class Schedule:
    """Per-target daily schedules, sorted by time of day, times unique per target."""

    entries: tuple = ()
    water_entries: tuple = ()

    def __post_init__(self):
        for target, group in (
            (Target.FOOD, self.entries),
            (Target.WATER, self.water_entries),
        ):
            times = [e.time_of_day_s for e in group]
            for e in group:
                if e.target is not target:
                    raise InvalidScheduleError(
                        f"{e.entry_id} listed under {target.value} entries"
                    )
                if not 0 <= e.time_of_day_s < SECONDS_PER_DAY:
                    raise InvalidScheduleError(
                        f"time_of_day {e.time_of_day_s} outside [0, 86400)"
                    )
                if e.quantity <= 0:
                    raise InvalidScheduleError(
                        f"{e.entry_id}: quantity must be > 0, got {e.quantity}"
                    )
            if times != sorted(times):
                raise InvalidScheduleError(f"{target.value} entries are not sorted")
            if len(set(times)) != len(times):
                raise InvalidScheduleError(f"duplicate {target.value} times")

    def all_entries(self) -> tuple:
        return self.entries + self.water_entries

    @classmethod
    def from_dict(cls, raw: dict) -> "Schedule":
        def parse(items, target):
            out = []
            for item in items or []:
                if isinstance(item, dict):
                    tod, qty = item["time_of_day_s"], item["quantity"]
                else:
                    tod, qty = item
                if not isinstance(tod, int) or isinstance(tod, bool):
                    raise InvalidScheduleError(f"time_of_day must be an integer, got {tod!r}")
                out.append(ScheduleEntry(target, tod, float(qty)))
            return tuple(out)

        return cls(
            entries=parse(raw.get("entries"), Target.FOOD),
            water_entries=parse(raw.get("water_entries"), Target.WATER),
        )

    def to_dict(self) -> dict:
        return {
            "entries": [[e.time_of_day_s, e.quantity] for e in self.entries],
            "water_entries": [[e.time_of_day_s, e.quantity] for e in self.water_entries],
        }


@dataclass(frozen=True)
class ControllerConfig:
    """Tunables for the decision rules. Quantities in grams, times in seconds."""

    low_level_threshold: float = 30.0
    refill_quantity: float = 20.0
    teaser_quantity: float = 5.0
    meal_quantity: float = 40.0
    engagement_window_s: float = 10.0
    cooldown_s: float = 1800.0
    presence_threshold: float = 0.05
    intensity_threshold: int = 50
    food_rate: float = 10.0
    water_rate: float = 50.0

    def __post_init__(self):
        if not self.teaser_quantity < self.meal_quantity:
            raise ValueError("teaser quantity must be smaller than the meal quantity")
        for name in ("refill_quantity", "teaser_quantity", "meal_quantity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.engagement_window_s <= 0 or self.cooldown_s <= 0:
            raise ValueError("engagement window and cooldown must be > 0")
        if self.food_rate <= 0 or self.water_rate <= 0:
            raise ValueError("dispensing rates must be > 0")


NEVER = float("-inf")


@dataclass(frozen=True)
class ControllerState:
    phase: Phase = Phase.IDLE
    phase_since_s: float = NEVER
    last_food_dispense_s: float = NEVER
    last_water_dispense_s: float = NEVER
    last_presence: bool = False

    def last_dispense_s(self, target: Target) -> float:
        return (
            self.last_food_dispense_s if target is Target.FOOD else self.last_water_dispense_s
        )

    def noting_dispense(self, target: Target, at_s: float) -> "ControllerState":
        if target is Target.FOOD:
            return replace(self, last_food_dispense_s=at_s)
        return replace(self, last_water_dispense_s=at_s)


@dataclass(frozen=True)
class DispenseAction:
    plan: DispensePlan
    trigger: str  # teaser | meal | refill | schedule | manual
    command_id: Optional[str] = None
    entry_id: Optional[str] = None


@dataclass(frozen=True)
class AlertAction:
    kind: AlertKind
    message: str


def decide(
    state: ControllerState,
    config: ControllerConfig,
    level: FoodLevelReading,
    presence: PresenceReading,
    now_s: float,
) -> tuple[ControllerState, list]:
    """One decision step. Rules, in priority order:

    1. presence rising edge while idle, cooldown elapsed -> teaser portion
    2. teaser served and presence sustained through the window -> meal top-up
    3. teaser served but presence lost early -> back to idle, no meal
    4. idle, bowl low, nobody around, cooldown elapsed -> refill + low-food alert
    5. otherwise nothing

    The teaser->meal pair is the one exception to the cooldown. A served meal
    parks the phase until the cooldown elapses so neither rule 1 nor 4 can
    re-fire onto a fresh meal.
    """
    actions: list = []
    phase = state.phase
    phase_since = state.phase_since_s

    if phase is Phase.MEAL_SERVED and now_s - phase_since >= config.cooldown_s:
        phase, phase_since = Phase.IDLE, now_s

    rising_edge = presence.detected and not state.last_presence
    cooldown_ok = now_s - state.last_food_dispense_s >= config.cooldown_s
    new = state

    if phase is Phase.IDLE and rising_edge and cooldown_ok:
        actions.append(
            DispenseAction(
                plan=plan_dispense(Target.FOOD, config.teaser_quantity, config.food_rate),
                trigger="teaser",
            )
        )
        phase, phase_since = Phase.TEASER_SERVED, now_s
        new = new.noting_dispense(Target.FOOD, now_s)
    elif (
        phase is Phase.TEASER_SERVED
        and presence.detected
        and now_s - phase_since >= config.engagement_window_s
    ):
        top_up = config.meal_quantity - config.teaser_quantity
        actions.append(
            DispenseAction(
                plan=plan_dispense(Target.FOOD, top_up, config.food_rate),
                trigger="meal",
            )
        )
        phase, phase_since = Phase.MEAL_SERVED, now_s
        new = new.noting_dispense(Target.FOOD, now_s)
    elif phase is Phase.TEASER_SERVED and not presence.detected:
        phase, phase_since = Phase.IDLE, now_s
    elif (
        phase is Phase.IDLE
        and level.status is FoodLevelStatus.LOW
        and not presence.detected
        and cooldown_ok
    ):
        actions.append(
            DispenseAction(
                plan=plan_dispense(Target.FOOD, config.refill_quantity, config.food_rate),
                trigger="refill",
            )
        )
        actions.append(
            AlertAction(
                kind=AlertKind.LOW_FOOD,
                message=f"food level {level.percent:.1f}% below {config.low_level_threshold:.1f}%",
            )
        )
        new = new.noting_dispense(Target.FOOD, now_s)

    return (
        replace(new, phase=phase, phase_since_s=phase_since, last_presence=presence.detected),
        actions,
    )


def next_scheduled_fire(
    schedule: Schedule,
    last_fired: dict,
    now_s: float,
) -> Optional[tuple[ScheduleEntry, float]]:
    """Earliest entry whose occurrence today is due and not yet fired.

    last_fired maps entry ids to the timestamp of their last fire; an entry
    fires when today's occurrence is at or before now and strictly after its
    recorded last fire, which caps it at once per day. Seeding last_fired
    with the boot time is what keeps missed entries from back-filling.
    """
    day_start = (now_s // SECONDS_PER_DAY) * SECONDS_PER_DAY
    best: Optional[tuple[float, ScheduleEntry]] = None
    for entry in schedule.all_entries():
        occurrence = day_start + entry.time_of_day_s
        if occurrence > now_s:
            continue
        fired = last_fired.get(entry.entry_id)
        if fired is not None and fired >= occurrence:
            continue
        if best is None or occurrence < best[0]:
            best = (occurrence, entry)
    if best is None:
        return None
    return best[1], best[0]

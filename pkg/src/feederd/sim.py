"""Deterministic world model that closes the loop without hardware.

The simulator owns a virtual clock, a bowl with food mass, and a pet that
arrives and eats — scripted exactly or sampled from seeded exponential
clocks. Frames are rendered so the vision stage sees what a camera would:
dark pixels inside the bowl in proportion to the fill fraction, plus an
off-bowl dark blob whenever the pet is present. run_scenario drives the full
capture/decide/dispense loop in accelerated virtual time and measures the
operational metrics: activation success rate and trigger-to-open response.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import control, vision
from .actuation import Dispenser, SimulatedPort, Target
from .clock import VirtualClock
from .config import FeederConfig
from .events import EventKind, EventLog
from .runtime import CapturedFrame, FeederRuntime
from .vision import BowlRegion, Frame, build_mask

logger = logging.getLogger(__name__)

FOOD_INTENSITY = 20
BACKGROUND_INTENSITY = 200
PET_BLOB_FRACTION = 0.06


class ScenarioInvalidError(Exception):
    """Scenario script is unsorted, out of range, or malformed."""


def _round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


# ---------------------------------------------------------------- world

@dataclass
class WorldState:
    """Bowl mass, pet presence, and the seeded behavior clocks."""

    food_mass: float
    bowl_capacity: float
    eating_rate: float = 0.5
    arrival_rate_per_hour: float = 1.0
    visit_duration_mean_s: float = 90.0
    pet_present: bool = False
    sim_time_s: float = 0.0
    stochastic: bool = False
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    next_transition_s: float = math.inf
    dispensed_total: float = 0.0
    eaten_total: float = 0.0
    clamped_total: float = 0.0
    transitions: list = field(default_factory=list)  # (time_s, pet_present)
    frames_rendered: int = 0  # drives the pet blob's frame-to-frame movement

    def __post_init__(self):
        if not 0 <= self.food_mass <= self.bowl_capacity:
            raise ValueError("food_mass must lie in [0, bowl_capacity]")
        if self.stochastic and math.isinf(self.next_transition_s):
            self.next_transition_s = self.sim_time_s + self._sample_gap()

    def _sample_gap(self) -> float:
        if self.pet_present:
            return float(self.rng.exponential(self.visit_duration_mean_s))
        return float(self.rng.exponential(3600.0 / self.arrival_rate_per_hour))

    def set_presence(self, present: bool) -> None:
        if present != self.pet_present:
            self.pet_present = present
            self.transitions.append((self.sim_time_s, present))
            if self.stochastic:
                self.next_transition_s = self.sim_time_s + self._sample_gap()

    def set_food_mass(self, grams: float) -> None:
        self.food_mass = min(max(grams, 0.0), self.bowl_capacity)

    def credit_food(self, grams: float) -> None:
        """Add dispensed grams to the bowl, tallying clamp overflow."""
        overflow = max(0.0, self.food_mass + grams - self.bowl_capacity)
        if overflow:
            self.clamped_total += overflow
        self.food_mass = min(self.bowl_capacity, self.food_mass + grams)
        self.dispensed_total += grams

    @property
    def fill_fraction(self) -> float:
        return self.food_mass / self.bowl_capacity if self.bowl_capacity > 0 else 0.0


def world_step(world: WorldState, dt: float, dispensed: float = 0.0) -> WorldState:
    """Advance the world by dt seconds, crediting dispensed grams up front.

    The pet eats at eating_rate while present and the bowl is non-empty; mass
    is clamped to [0, capacity] and overflow is tallied. Stochastic presence
    transitions fire at their sampled times inside the interval.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if dispensed < 0:
        raise ValueError("dispensed must be >= 0")
    if dispensed:
        world.credit_food(dispensed)
    t_end = world.sim_time_s + dt
    while world.sim_time_s < t_end - 1e-12:
        seg_end = t_end
        if world.stochastic and world.next_transition_s < seg_end:
            seg_end = world.next_transition_s
        seg = seg_end - world.sim_time_s
        if world.pet_present and world.food_mass > 0 and seg > 0:
            eaten = min(world.food_mass, world.eating_rate * seg)
            world.food_mass -= eaten
            world.eaten_total += eaten
        world.sim_time_s = seg_end
        if world.stochastic and seg_end >= world.next_transition_s - 1e-12:
            world.set_presence(not world.pet_present)
    return world


# ---------------------------------------------------------------- rendering

class BowlRenderer:
    """Deterministic frame synthesis for a fixed geometry and seed.

    Fill maps to round-half-up(fill x mask.count) dark pixels chosen by one
    seeded shuffle, so consecutive fills differ only at the margin. The pet
    blob covers 6% of off-bowl pixels and alternates between two disjoint
    positions on consecutive frames: a motionless blob would be absorbed
    into the running-average background within seconds (real presence
    detection rides on subject motion), and the hop keeps the foreground
    fraction at the full blob size for the whole visit. Both positions stay
    clear of the bowl so presence never perturbs the level reading.
    """

    def __init__(self, frame_width: int, frame_height: int, region: BowlRegion, seed: int):
        self.frame_width = frame_width
        self.frame_height = frame_height
        self.mask = build_mask(frame_width, frame_height, region)
        total = frame_width * frame_height
        rng = np.random.default_rng(seed)
        self._order = self.mask.flat_indices.copy()
        rng.shuffle(self._order)
        blob_size = math.ceil(PET_BLOB_FRACTION * total)
        off_mask = np.setdiff1d(np.arange(total), self.mask.flat_indices, assume_unique=True)
        if off_mask.size < 2 * blob_size:
            raise ValueError(
                "bowl mask leaves too few off-mask pixels for the presence blob; "
                "use a larger frame or smaller bowl"
            )
        self._blobs = (off_mask[:blob_size], off_mask[blob_size : 2 * blob_size])
        self._base = np.full(total, BACKGROUND_INTENSITY, dtype=np.uint8)

    def dark_count(self, fill_fraction: float) -> int:
        fill = min(max(fill_fraction, 0.0), 1.0)
        return _round_half_up(fill * self.mask.count)

    def render(self, fill_fraction: float, pet_present: bool, phase: int = 0) -> Frame:
        arr = self._base.copy()
        dark = self.dark_count(fill_fraction)
        if dark:
            arr[self._order[:dark]] = FOOD_INTENSITY
        if pet_present:
            arr[self._blobs[phase % 2]] = FOOD_INTENSITY
        return Frame(
            width=self.frame_width, height=self.frame_height, pixels=arr.tobytes()
        )

    def level_percent(self, fill_fraction: float) -> float:
        """Percent a frame rendered at this fill would read back."""
        return 100.0 * self.dark_count(fill_fraction) / self.mask.count


_renderers: dict = {}


def render_bowl_frame(
    world: WorldState,
    frame_width: int,
    frame_height: int,
    region: BowlRegion,
    seed: int,
) -> Frame:
    """One-shot rendering API; caches the renderer per geometry and seed."""
    key = (frame_width, frame_height, region, seed)
    renderer = _renderers.get(key)
    if renderer is None:
        renderer = _renderers[key] = BowlRenderer(frame_width, frame_height, region, seed)
    return renderer.render(world.fill_fraction, world.pet_present, world.frames_rendered)


class SimFrameSource:
    """Frame source backed by the simulated world."""

    def __init__(self, world: WorldState, renderer: BowlRenderer):
        self.world = world
        self.renderer = renderer
        self.pending_food_g = 0.0

    def capture(self) -> Optional[CapturedFrame]:
        frame = self.renderer.render(
            self.world.fill_fraction, self.world.pet_present, self.world.frames_rendered
        )
        self.world.frames_rendered += 1
        return CapturedFrame(frame=frame, raw=None)

    def notify_dispensed(self, target: Target, amount: float) -> None:
        # Food lands in the bowl at the next world advance; water bypasses it.
        if target is Target.FOOD:
            self.pending_food_g += amount

    def take_pending_food(self) -> float:
        amount, self.pending_food_g = self.pending_food_g, 0.0
        return amount


class SteppingSimFrameSource(SimFrameSource):
    """Sim source for the wall-clock daemon: advances the world on capture."""

    def __init__(self, world: WorldState, renderer: BowlRenderer, clock):
        super().__init__(world, renderer)
        self._clock = clock
        self._last_step_s = clock.now_s()

    def capture(self) -> Optional[CapturedFrame]:
        now = self._clock.now_s()
        if now > self._last_step_s:
            world_step(self.world, now - self._last_step_s, self.take_pending_food())
            self._last_step_s = now
        return super().capture()


# ---------------------------------------------------------------- scenarios

SCRIPT_KINDS = ("pet_arrives", "pet_leaves", "set_food_mass")


@dataclass(frozen=True)
class ScriptEvent:
    time_s: float
    kind: str
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SCRIPT_KINDS:
            raise ScenarioInvalidError(f"unknown script event kind {self.kind!r}")
        if self.kind == "set_food_mass" and self.value is None:
            raise ScenarioInvalidError("set_food_mass requires a value in grams")
        if self.time_s < 0:
            raise ScenarioInvalidError("script times must be >= 0")


@dataclass(frozen=True)
class Scenario:
    """What the world does: a duration plus either a script or seeded randomness."""

    duration_s: float
    script: tuple = ()
    stochastic: bool = False

    def __post_init__(self):
        if self.duration_s < 0:
            raise ScenarioInvalidError("duration must be >= 0")
        times = [e.time_s for e in self.script]
        if times != sorted(times):
            raise ScenarioInvalidError("script events must be sorted by time")
        if times and times[-1] > self.duration_s:
            raise ScenarioInvalidError("script events must fall within the duration")

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        script = tuple(
            ScriptEvent(float(e["time_s"]), str(e["kind"]), e.get("value"))
            for e in raw.get("script", [])
        )
        return cls(
            duration_s=float(raw["duration_s"]),
            script=script,
            stochastic=bool(raw.get("stochastic", False)),
        )

    @classmethod
    def from_file(cls, path: Path) -> "Scenario":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalidError(f"cannot load scenario {path}: {exc}") from exc


# ---------------------------------------------------------------- metrics

@dataclass
class Trigger:
    kind: str  # presence | meal | refill | schedule | manual
    onset_s: float
    resolved: bool = False
    response_s: Optional[float] = None


class TriggerTracker:
    """Arms trigger conditions as the world produces them and matches them to
    the dispenses they cause, yielding activation success and response times."""

    TRIGGER_FOR_DISPENSE = {
        "teaser": "presence",
        "meal": "meal",
        "refill": "refill",
        "schedule": "schedule",
        "manual": "manual",
    }

    def __init__(self, config: FeederConfig, runtime: FeederRuntime, renderer: BowlRenderer):
        self._config = config
        self._runtime = runtime
        self._renderer = renderer
        self._armed: dict[str, list[Trigger]] = {k: [] for k in set(self.TRIGGER_FOR_DISPENSE.values())}
        self.triggers: list[Trigger] = []
        self._seen_transitions = 0
        self._meal_checks: list[tuple[float, float]] = []  # (check_at_s, teaser_time_s)
        self._refill_armed = False

    def _arm(self, kind: str, onset_s: float) -> None:
        trigger = Trigger(kind=kind, onset_s=onset_s)
        self.triggers.append(trigger)
        self._armed[kind].append(trigger)

    def _cooldown_elapsed(self, at_s: float) -> bool:
        return (
            at_s - self._runtime.state.last_food_dispense_s
            >= self._config.controller.cooldown_s
        )

    def observe_world(self, world: WorldState, now_s: float) -> None:
        """Poll after every world advance (event times and tick times)."""
        new = world.transitions[self._seen_transitions :]
        self._seen_transitions = len(world.transitions)
        for t, present in new:
            if present:
                if (
                    self._runtime.state.phase is control.Phase.IDLE
                    and self._cooldown_elapsed(t)
                ):
                    self._arm("presence", t)

        # Meal triggers: engagement window elapsed with the pet still there.
        due = [c for c in self._meal_checks if c[0] <= now_s]
        self._meal_checks = [c for c in self._meal_checks if c[0] > now_s]
        for check_at, _teaser_t in due:
            if self._present_at(world, check_at):
                self._arm("meal", check_at)

        # Refill trigger: the level a frame would read is low, nobody around,
        # cooldown elapsed, controller idle.
        low = (
            self._renderer.level_percent(world.fill_fraction)
            < self._config.controller.low_level_threshold
        )
        predicate = (
            low
            and not world.pet_present
            and self._runtime.state.phase is control.Phase.IDLE
            and self._cooldown_elapsed(now_s)
        )
        if predicate and not self._refill_armed:
            self._refill_armed = True
            self._arm("refill", now_s)
        elif not low:
            self._refill_armed = False

    @staticmethod
    def _present_at(world: WorldState, t: float) -> bool:
        present = False
        for when, state in world.transitions:
            if when > t:
                break
            present = state
        return present

    def observe_events(self, events: list) -> None:
        for event in events:
            if event.kind is not EventKind.DISPENSE:
                continue
            payload = event.payload
            if payload.get("outcome") == "busy":
                continue
            trigger_kind = self.TRIGGER_FOR_DISPENSE.get(payload.get("trigger"))
            if trigger_kind is None:
                continue
            open_s = payload.get("started_at_ms", event.ts_ms) / 1000.0
            if payload["trigger"] == "teaser":
                self._meal_checks.append(
                    (open_s + self._config.controller.engagement_window_s, open_s)
                )
            queue = self._armed[trigger_kind]
            if queue:
                trigger = queue.pop(0)
                trigger.resolved = True
                trigger.response_s = open_s - trigger.onset_s
            if payload["trigger"] == "refill":
                self._refill_armed = False

    def summary(self) -> dict:
        total = len(self.triggers)
        resolved = [t for t in self.triggers if t.resolved]
        responses = [t.response_s for t in resolved if t.response_s is not None]
        return {
            "triggers_total": total,
            "triggers_activated": len(resolved),
            "activation_success_rate": (len(resolved) / total) if total else None,
            "mean_response_s": (sum(responses) / len(responses)) if responses else None,
            "max_response_s": max(responses) if responses else None,
            "by_kind": {
                kind: {
                    "total": sum(1 for t in self.triggers if t.kind == kind),
                    "activated": sum(
                        1 for t in self.triggers if t.kind == kind and t.resolved
                    ),
                }
                for kind in sorted({t.kind for t in self.triggers})
            },
        }


# ---------------------------------------------------------------- runner

@dataclass
class ScenarioReport:
    duration_s: float
    ticks: int
    triggers_total: int
    triggers_activated: int
    activation_success_rate: Optional[float]
    mean_response_s: Optional[float]
    max_response_s: Optional[float]
    by_kind: dict
    dispenses: list
    alerts: list
    event_counts: dict
    final_food_mass_g: float
    dispensed_total_g: float
    eaten_total_g: float
    clamped_total_g: float
    trace_sha256: str

    def to_dict(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "ticks": self.ticks,
            "triggers_total": self.triggers_total,
            "triggers_activated": self.triggers_activated,
            "activation_success_rate": self.activation_success_rate,
            "mean_response_s": self.mean_response_s,
            "max_response_s": self.max_response_s,
            "by_kind": self.by_kind,
            "dispenses": self.dispenses,
            "alerts": self.alerts,
            "event_counts": self.event_counts,
            "final_food_mass_g": self.final_food_mass_g,
            "dispensed_total_g": self.dispensed_total_g,
            "eaten_total_g": self.eaten_total_g,
            "clamped_total_g": self.clamped_total_g,
            "trace_sha256": self.trace_sha256,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_world(config: FeederConfig, stochastic: bool) -> WorldState:
    w = config.world
    return WorldState(
        food_mass=w.initial_food_g,
        bowl_capacity=w.bowl_capacity_g,
        eating_rate=w.eating_rate_g_per_s,
        arrival_rate_per_hour=w.arrival_rate_per_hour,
        visit_duration_mean_s=w.visit_duration_mean_s,
        stochastic=stochastic,
        rng=np.random.default_rng(w.seed),
    )


def run_scenario(
    scenario: Scenario,
    config: FeederConfig,
    report_path: Optional[Path] = None,
    event_log: Optional[EventLog] = None,
    keep_readings: bool = False,
) -> ScenarioReport:
    """Drive the full loop through the scenario in accelerated virtual time."""
    clock = VirtualClock()
    stochastic = scenario.stochastic and not scenario.script
    world = build_world(config, stochastic)
    renderer = BowlRenderer(
        config.frame_width, config.frame_height, config.bowl, seed=config.world.seed
    )
    log = (
        event_log
        if event_log is not None
        else EventLog(retain_readings=keep_readings, track_digest=True)
    )
    source = SimFrameSource(world, renderer)
    dispenser = Dispenser(SimulatedPort(), clock)
    runtime = FeederRuntime(config, source, dispenser, log, clock)
    tracker = TriggerTracker(config, runtime, renderer)

    script = list(scenario.script)
    interval = config.capture_interval_s
    ticks = 0
    tick_at = 0.0
    while tick_at < scenario.duration_s:
        clock.advance_to(tick_at)
        _advance_world(world, source, script, tracker, tick_at)
        tracker.observe_world(world, tick_at)
        result = runtime.tick()
        tracker.observe_events(result.events)
        ticks += 1
        tick_at = max(tick_at + interval, clock.now_s())

    summary = tracker.summary()
    dispense_events = [
        dict(e.payload, ts_ms=e.ts_ms, seq=e.seq)
        for e in log.events()
        if e.kind is EventKind.DISPENSE
    ]
    alert_events = [
        dict(e.payload, ts_ms=e.ts_ms, seq=e.seq)
        for e in log.events()
        if e.kind in (EventKind.ALERT, EventKind.CAMERA_UNAVAILABLE)
    ]
    report = ScenarioReport(
        duration_s=scenario.duration_s,
        ticks=ticks,
        triggers_total=summary["triggers_total"],
        triggers_activated=summary["triggers_activated"],
        activation_success_rate=summary["activation_success_rate"],
        mean_response_s=summary["mean_response_s"],
        max_response_s=summary["max_response_s"],
        by_kind=summary["by_kind"],
        dispenses=dispense_events,
        alerts=alert_events,
        event_counts=log.counts,
        final_food_mass_g=world.food_mass,
        dispensed_total_g=world.dispensed_total,
        eaten_total_g=world.eaten_total,
        clamped_total_g=world.clamped_total,
        trace_sha256=log.trace_sha256() or "",
    )
    if report_path is not None:
        Path(report_path).write_text(report.to_json())
        logger.info("scenario report written to %s", report_path)
    return report


def _advance_world(
    world: WorldState,
    source: SimFrameSource,
    script: list,
    tracker: TriggerTracker,
    target_t: float,
) -> None:
    """Move the world to target_t, applying due script events in order."""
    pending = source.take_pending_food()
    while True:
        next_script_t = script[0].time_s if script else math.inf
        step_to = min(target_t, next_script_t)
        if step_to > world.sim_time_s + 1e-12:
            world_step(world, step_to - world.sim_time_s, dispensed=pending)
            pending = 0.0
        if script and script[0].time_s <= world.sim_time_s + 1e-12:
            event = script.pop(0)
            if event.kind == "pet_arrives":
                world.set_presence(True)
            elif event.kind == "pet_leaves":
                world.set_presence(False)
            else:
                world.set_food_mass(float(event.value))
            tracker.observe_world(world, world.sim_time_s)
            continue
        break
    if pending:  # target_t == sim_time already; credit without advancing
        world.credit_food(pending)

"""The capture -> analyze -> decide -> act loop, plus the state the service reads.

One tick: grab a frame, read food level, update the background model, detect
presence, run the decision rules, merge due schedule entries, then drain
manual commands — executing every resulting dispense through the actuator
and appending one event per reading, action, and alert. All mutation happens
on the tick thread; HTTP handlers only enqueue commands and read immutable
snapshots.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

from . import control, vision
from .actuation import BusyError, Dispenser, Target, TraceOutcome, plan_dispense
from .clock import Clock
from .config import FeederConfig
from .control import (
    AlertAction,
    AlertKind,
    ControllerState,
    DispenseAction,
    Schedule,
)
from .events import EventKind, EventLog, FeederEvent
from .vision import BackgroundModel, Frame

logger = logging.getLogger(__name__)

MS_PER_DAY = 86_400_000


class QuantityOutOfRangeError(Exception):
    """Manual dispense quantity is zero, negative, or above the per-command cap."""


class NoFrameYetError(Exception):
    """No frame has been captured since boot."""


@dataclass(frozen=True)
class CapturedFrame:
    frame: Frame
    raw: Optional[bytes]  # original bytes when ingested from a file, else None


class FrameSource(Protocol):
    def capture(self) -> Optional[CapturedFrame]:
        """Latest frame, or None when the camera is unavailable."""
        ...


class StaticFrameSource:
    """Fixed or scripted frames for tests: pop from a list, then repeat the last."""

    def __init__(self, frames: list):
        self._frames = list(frames)
        self._last: Optional[CapturedFrame] = None

    def capture(self) -> Optional[CapturedFrame]:
        if self._frames:
            item = self._frames.pop(0)
            self._last = CapturedFrame(item, None) if isinstance(item, Frame) else item
        return self._last


class DirectoryFrameSource:
    """Camera-directory mode: serve the newest .pgm file in a watched directory."""

    def __init__(self, directory: Path):
        self._dir = Path(directory)

    def capture(self) -> Optional[CapturedFrame]:
        try:
            candidates = sorted(
                (p for p in self._dir.iterdir() if p.suffix.lower() == ".pgm"),
                key=lambda p: (p.stat().st_mtime, p.name),
            )
        except OSError:
            return None
        if not candidates:
            return None
        newest = candidates[-1]
        try:
            raw = newest.read_bytes()
            return CapturedFrame(frame=vision.decode_pgm(raw), raw=raw)
        except (OSError, vision.MalformedImageError) as exc:
            logger.warning("cannot ingest %s: %s", newest, exc)
            return None


@dataclass(frozen=True)
class StatusSnapshot:
    food_percent: Optional[float]
    food_status: Optional[str]
    presence: bool
    water_dispensed_today_ml: float
    food_dispensed_today_g: float
    last_dispense: Optional[dict]
    schedule_version: int
    uptime_s: float

    def to_dict(self) -> dict:
        return {
            "food_percent": self.food_percent,
            "food_status": self.food_status,
            "presence": self.presence,
            "water_dispensed_today_ml": self.water_dispensed_today_ml,
            "food_dispensed_today_g": self.food_dispensed_today_g,
            "last_dispense": self.last_dispense,
            "schedule_version": self.schedule_version,
            "uptime_s": self.uptime_s,
        }


class ScheduleStore:
    """Schedule plus version, persisted atomically as one small JSON file."""

    def __init__(self, path: Optional[Path], bootstrap: Schedule):
        self._path = path
        self.schedule = bootstrap
        self.version = 1
        if path is not None and path.exists():
            raw = json.loads(path.read_text())
            self.schedule = Schedule.from_dict(raw)
            self.version = int(raw.get("version", 1))
        elif path is not None:
            self._persist()

    def replace(self, schedule: Schedule) -> int:
        self.schedule = schedule
        self.version += 1
        self._persist()
        return self.version

    def _persist(self) -> None:
        if self._path is None:
            return
        payload = dict(self.schedule.to_dict(), version=self.version)
        tmp = self._path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2))
        os.replace(tmp, self._path)


@dataclass
class _Command:
    id: str
    action: str  # "dispense" | "put_schedule"
    params: dict
    done: threading.Event = field(default_factory=threading.Event)
    result: Optional[dict] = None


@dataclass
class TickResult:
    events: list
    dispensed: dict  # Target -> amount credited this tick


class FeederRuntime:
    """Owns controller state, the event log, and the serialized command queue."""

    def __init__(
        self,
        config: FeederConfig,
        frame_source: FrameSource,
        dispenser: Dispenser,
        log: EventLog,
        clock: Clock,
        schedule_path: Optional[Path] = None,
    ):
        self.config = config
        self.clock = clock
        self.log = log
        self._source = frame_source
        self._dispenser = dispenser
        self._mask = vision.build_mask(config.frame_width, config.frame_height, config.bowl)
        self._model = BackgroundModel(
            alpha=config.background_alpha, diff_threshold=config.diff_threshold
        )
        self.state = ControllerState()
        self._schedules = ScheduleStore(schedule_path, config.schedule)
        self._commands: "queue.SimpleQueue[_Command]" = queue.SimpleQueue()
        self._boot_s = clock.now_s()
        self._boot_epoch_s = clock.now_ms() / 1000.0
        self._last_fired: dict[str, float] = {
            e.entry_id: self._boot_epoch_s for e in self._schedules.schedule.all_entries()
        }
        self._latest: Optional[tuple[CapturedFrame, int]] = None
        self._last_level: Optional[vision.FoodLevelReading] = None
        self._last_presence_reading: Optional[vision.PresenceReading] = None
        self._last_dispense_summary: Optional[dict] = None
        self._day: int = clock.now_ms() // MS_PER_DAY
        self._food_today = 0.0
        self._water_today = 0.0
        self._water_all_time = 0.0
        self._low_water_alerted = False
        self._command_counter = 0
        self._command_counter_lock = threading.Lock()
        self.mirror = None  # set by the daemon when a mirror URL is configured
        self._replay()
        self._snapshot = self._build_snapshot()

    # ------------------------------------------------------------- replay

    def _replay(self) -> None:
        """Rebuild dispense counters and the command counter from the log."""
        today = self.clock.now_ms() // MS_PER_DAY
        for event in self.log.events():
            if event.kind is EventKind.DISPENSE:
                amount = float(event.payload.get("dispensed", 0.0))
                target = event.payload.get("target")
                day = event.ts_ms // MS_PER_DAY
                if target == Target.WATER.value:
                    self._water_all_time += amount
                    if day == today:
                        self._water_today += amount
                elif day == today:
                    self._food_today += amount
                self._last_dispense_summary = dict(event.payload, ts_ms=event.ts_ms)
            elif event.kind is EventKind.COMMAND:
                cid = str(event.payload.get("id", ""))
                if cid.startswith("cmd-"):
                    try:
                        self._command_counter = max(self._command_counter, int(cid[4:]))
                    except ValueError:
                        pass
        if self.log.last_seq:
            logger.info(
                "replayed %d events: food today %.1f g, water today %.1f ml",
                self.log.last_seq,
                self._food_today,
                self._water_today,
            )

    # ------------------------------------------------------------- public API

    def submit_dispense(self, target: Target, quantity: float, source: str = "api") -> str:
        """Validate and enqueue a manual dispense; returns the command id."""
        limit = self.config.max_food_g if target is Target.FOOD else self.config.max_water_ml
        if not 0 < quantity <= limit:
            raise QuantityOutOfRangeError(
                f"{target.value} quantity must be in (0, {limit}], got {quantity}"
            )
        command = _Command(
            id=self._next_command_id(),
            action="dispense",
            params={"target": target, "quantity": float(quantity), "source": source},
        )
        self.log.append(
            EventKind.COMMAND,
            {
                "id": command.id,
                "action": "dispense",
                "target": target.value,
                "quantity": float(quantity),
                "source": source,
            },
            ts_ms=self.clock.now_ms(),
        )
        self._commands.put(command)
        return command.id

    def _next_command_id(self) -> str:
        with self._command_counter_lock:
            self._command_counter += 1
            return f"cmd-{self._command_counter}"

    def submit_schedule(self, schedule: Schedule, timeout: float = 10.0) -> int:
        """Queue an atomic schedule replacement; returns the new version."""
        command = _Command(
            id=self._next_command_id(),
            action="put_schedule",
            params={"schedule": schedule},
        )
        self._commands.put(command)
        if not command.done.wait(timeout):
            raise TimeoutError("schedule change not applied within timeout")
        return command.result["version"]

    def get_schedule(self) -> tuple[Schedule, int]:
        return self._schedules.schedule, self._schedules.version

    def status(self) -> StatusSnapshot:
        return self._snapshot

    def latest_frame(self) -> tuple[bytes, int]:
        """Latest frame as PGM bytes plus its capture timestamp (ms)."""
        latest = self._latest
        if latest is None:
            raise NoFrameYetError("no frame captured yet")
        captured, ts_ms = latest
        raw = captured.raw if captured.raw is not None else vision.encode_pgm(captured.frame)
        return raw, ts_ms

    # ------------------------------------------------------------- tick

    def tick(self) -> TickResult:
        now_ms = self.clock.now_ms()
        now_s = self.clock.now_s()
        epoch_s = now_ms / 1000.0
        events: list[FeederEvent] = []
        dispensed: dict[Target, float] = {Target.FOOD: 0.0, Target.WATER: 0.0}
        actions: list = []

        captured = self._source.capture()
        if captured is None:
            events.append(
                self.log.append(
                    EventKind.CAMERA_UNAVAILABLE,
                    {"message": "frame source yielded no frame"},
                    ts_ms=now_ms,
                )
            )
        else:
            self._latest = (captured, now_ms)
            level = vision.food_level(
                captured.frame,
                self._mask,
                intensity_threshold=self.config.controller.intensity_threshold,
                low_threshold=self.config.controller.low_level_threshold,
                timestamp_ms=now_ms,
            )
            self._model, foreground = vision.update_background(self._model, captured.frame)
            presence = vision.detect_presence(
                foreground,
                presence_threshold=self.config.controller.presence_threshold,
                timestamp_ms=now_ms,
            )
            self._last_level = level
            self._last_presence_reading = presence
            events.append(
                self.log.append(
                    EventKind.FOOD_LEVEL,
                    {
                        "percent": level.percent,
                        "dark_pixels": level.dark_pixels,
                        "total_pixels": level.total_pixels,
                        "intensity_threshold": level.intensity_threshold,
                        "status": level.status.value,
                    },
                    ts_ms=now_ms,
                )
            )
            events.append(
                self.log.append(
                    EventKind.PRESENCE,
                    {
                        "foreground_fraction": presence.foreground_fraction,
                        "detected": presence.detected,
                    },
                    ts_ms=now_ms,
                )
            )
            self.state, decided = control.decide(
                self.state, self.config.controller, level, presence, now_s
            )
            actions.extend(decided)

        actions.extend(self._due_schedule_actions(epoch_s))
        actions.extend(self._drain_commands())

        for action in actions:
            if isinstance(action, DispenseAction):
                events.extend(self._execute_dispense(action, dispensed, now_s))
            elif isinstance(action, AlertAction):
                events.append(
                    self.log.append(
                        EventKind.ALERT,
                        {"alert": action.kind.value, "message": action.message},
                        ts_ms=self.clock.now_ms(),
                    )
                )

        self._check_water_level(events)
        self._snapshot = self._build_snapshot()
        if self.mirror is not None:
            self.mirror.offer(self._mirror_payload())
        return TickResult(events=events, dispensed=dispensed)

    def run_loop(self, stop: threading.Event) -> None:
        """Daemon cadence (wall clock): tick every capture interval until stopped."""
        interval = self.config.capture_interval_s
        next_tick = self.clock.now_s()
        while not stop.is_set():
            self.tick()
            next_tick += interval
            now = self.clock.now_s()
            if next_tick < now:  # a long dispense overran; catch up
                next_tick = now
            if stop.wait(max(0.0, next_tick - now)):
                break

    # ------------------------------------------------------------- internals

    def _due_schedule_actions(self, epoch_s: float) -> list:
        actions = []
        while True:
            hit = control.next_scheduled_fire(self._schedules.schedule, self._last_fired, epoch_s)
            if hit is None:
                return actions
            entry, fire_time = hit
            self._last_fired[entry.entry_id] = fire_time
            rate = (
                self.config.controller.food_rate
                if entry.target is Target.FOOD
                else self.config.controller.water_rate
            )
            actions.append(
                DispenseAction(
                    plan=plan_dispense(entry.target, entry.quantity, rate),
                    trigger="schedule",
                    entry_id=entry.entry_id,
                )
            )

    def _drain_commands(self) -> list:
        actions = []
        while True:
            try:
                command = self._commands.get_nowait()
            except queue.Empty:
                return actions
            if command.action == "dispense":
                target, quantity = command.params["target"], command.params["quantity"]
                rate = (
                    self.config.controller.food_rate
                    if target is Target.FOOD
                    else self.config.controller.water_rate
                )
                actions.append(
                    DispenseAction(
                        plan=plan_dispense(target, quantity, rate),
                        trigger="manual",
                        command_id=command.id,
                    )
                )
            elif command.action == "put_schedule":
                version = self._schedules.replace(command.params["schedule"])
                now_epoch = self.clock.now_ms() / 1000.0
                for entry in self._schedules.schedule.all_entries():
                    self._last_fired.setdefault(entry.entry_id, now_epoch)
                self.log.append(
                    EventKind.COMMAND,
                    {"id": command.id, "action": "put_schedule", "version": version},
                    ts_ms=self.clock.now_ms(),
                )
                command.result = {"version": version}
                command.done.set()

    def _execute_dispense(
        self, action: DispenseAction, dispensed: dict, now_s: float
    ) -> list:
        events = []
        payload = {
            "target": action.plan.target.value,
            "quantity": action.plan.quantity,
            "rate": action.plan.rate,
            "duration_s": action.plan.duration_s,
            "trigger": action.trigger,
            "command_id": action.command_id,
            "entry_id": action.entry_id,
        }
        try:
            trace = self._dispenser.execute(action.plan)
        except BusyError as exc:
            payload.update(outcome="busy", dispensed=0.0, abort_reason=str(exc))
            events.append(
                self.log.append(EventKind.DISPENSE, payload, ts_ms=self.clock.now_ms())
            )
            return events

        payload.update(
            outcome=trace.outcome.value,
            dispensed=trace.dispensed,
            abort_reason=trace.abort_reason,
            started_at_ms=trace.started_at_ms,
        )
        event = self.log.append(EventKind.DISPENSE, payload, ts_ms=trace.finished_at_ms)
        events.append(event)
        dispensed[action.plan.target] += trace.dispensed
        self.state = self.state.noting_dispense(action.plan.target, now_s)
        self._note_dispensed(action.plan.target, trace.dispensed, event.ts_ms)
        self._last_dispense_summary = dict(payload, ts_ms=event.ts_ms)
        if trace.outcome is TraceOutcome.ABORTED:
            events.append(
                self.log.append(
                    EventKind.ALERT,
                    {
                        "alert": AlertKind.DISPENSE_FAULT.value,
                        "message": f"{action.plan.target.value} dispense aborted: {trace.abort_reason}",
                    },
                    ts_ms=self.clock.now_ms(),
                )
            )
        notify = getattr(self._source, "notify_dispensed", None)
        if notify is not None:
            notify(action.plan.target, trace.dispensed)
        return events

    def _note_dispensed(self, target: Target, amount: float, ts_ms: int) -> None:
        day = ts_ms // MS_PER_DAY
        if day != self._day:
            self._day = day
            self._food_today = 0.0
            self._water_today = 0.0
        if target is Target.FOOD:
            self._food_today += amount
        else:
            self._water_today += amount
            self._water_all_time += amount

    def _check_water_level(self, events: list) -> None:
        capacity = self.config.water_tank_capacity_ml
        remaining = capacity - self._water_all_time
        if remaining / capacity < self.config.low_water_fraction:
            if not self._low_water_alerted:
                self._low_water_alerted = True
                events.append(
                    self.log.append(
                        EventKind.ALERT,
                        {
                            "alert": AlertKind.LOW_WATER.value,
                            "message": f"water tank below {self.config.low_water_fraction:.0%}"
                            f" ({remaining:.0f} ml left of {capacity:.0f})",
                        },
                        ts_ms=self.clock.now_ms(),
                    )
                )
        else:
            self._low_water_alerted = False

    def _build_snapshot(self) -> StatusSnapshot:
        today = self.clock.now_ms() // MS_PER_DAY
        stale = today != self._day
        level = self._last_level
        presence = self._last_presence_reading
        return StatusSnapshot(
            food_percent=level.percent if level else None,
            food_status=level.status.value if level else None,
            presence=presence.detected if presence else False,
            water_dispensed_today_ml=0.0 if stale else self._water_today,
            food_dispensed_today_g=0.0 if stale else self._food_today,
            last_dispense=self._last_dispense_summary,
            schedule_version=self._schedules.version,
            uptime_s=self.clock.now_s() - self._boot_s,
        )

    def _mirror_payload(self) -> dict:
        level = self._last_level
        presence = self._last_presence_reading
        return {
            "food_level": level.percent if level else None,
            "presence": presence.detected if presence else False,
            "timestamp": self.clock.now_ms(),
        }

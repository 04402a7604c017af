"""Tick-level runtime tests on a virtual clock: schedule firing through the
loop, water bookkeeping, fault alerts, and daily counter rollover."""

import pytest

from feederd.actuation import Dispenser, SimulatedPort, Target
from feederd.clock import VirtualClock
from feederd.config import FeederConfig
from feederd.events import EventKind, EventLog
from feederd.runtime import (
    FeederRuntime,
    QuantityOutOfRangeError,
    StaticFrameSource,
)
from feederd.vision import Frame
from tests.conftest import raw_config


def make_runtime(clock=None, config_overrides=None, port=None, frame=None):
    config = FeederConfig.from_dict(raw_config(**(config_overrides or {})))
    clock = clock or VirtualClock()
    log = EventLog()
    source = StaticFrameSource([frame or Frame.filled(64, 64, 30)])
    runtime = FeederRuntime(config, source, Dispenser(port or SimulatedPort(), clock), log, clock)
    return runtime, clock, log


def dispense_events(log):
    return [e for e in log.events() if e.kind is EventKind.DISPENSE]


def alert_events(log):
    return [e for e in log.events() if e.kind is EventKind.ALERT]


def test_scheduled_entry_fires_once_through_the_loop():
    clock = VirtualClock()
    runtime, clock, log = make_runtime(
        clock=clock,
        config_overrides={"schedule": {"entries": [[100, 12.0]]}},
    )
    clock.advance_to(50.0)
    runtime.tick()
    assert dispense_events(log) == []
    clock.advance_to(101.0)
    runtime.tick()
    fired = dispense_events(log)
    assert len(fired) == 1
    assert fired[0].payload["trigger"] == "schedule"
    assert fired[0].payload["entry_id"] == "food@100"
    assert fired[0].payload["quantity"] == pytest.approx(12.0)
    clock.advance_to(200.0)
    runtime.tick()
    assert len(dispense_events(log)) == 1  # once per day


def test_entry_before_boot_waits_for_tomorrow():
    clock = VirtualClock(start_s=150.0)  # boot after the 100 s occurrence
    runtime, clock, log = make_runtime(
        clock=clock,
        config_overrides={"schedule": {"entries": [[100, 12.0]]}},
    )
    clock.advance_to(3600.0)
    runtime.tick()
    assert dispense_events(log) == []  # missed occurrence is not back-filled
    clock.advance_to(86_400.0 + 101.0)
    runtime.tick()
    assert len(dispense_events(log)) == 1


def test_water_schedule_updates_daily_total_and_tank_alert():
    clock = VirtualClock()
    runtime, clock, log = make_runtime(
        clock=clock,
        config_overrides={
            "schedule": {"water_entries": [[10, 300.0], [20, 300.0]]},
            "limits": {"max_food_g": 100.0, "max_water_ml": 500.0},
            "water": {"tank_capacity_ml": 650.0, "low_fraction": 0.1},
        },
    )
    clock.advance_to(11.0)
    runtime.tick()
    assert runtime.status().water_dispensed_today_ml == pytest.approx(300.0)
    assert [a.payload["alert"] for a in alert_events(log)] == []
    clock.advance_to(21.0)
    runtime.tick()
    # 600 of 650 ml used: remaining fraction 7.7% < 10% -> one low-water alert.
    assert runtime.status().water_dispensed_today_ml == pytest.approx(600.0)
    assert [a.payload["alert"] for a in alert_events(log)] == ["low_water"]
    clock.advance_to(30.0)
    runtime.tick()
    assert [a.payload["alert"] for a in alert_events(log)] == ["low_water"]  # not repeated


def test_daily_totals_reset_on_day_rollover():
    clock = VirtualClock()
    runtime, clock, log = make_runtime(clock=clock)
    runtime.submit_dispense(Target.FOOD, 10.0)
    clock.advance_to(10.0)
    runtime.tick()
    assert runtime.status().food_dispensed_today_g == pytest.approx(10.0)
    clock.advance_to(86_400.0 + 5.0)
    runtime.tick()
    assert runtime.status().food_dispensed_today_g == 0.0


def test_aborted_dispense_raises_fault_alert():
    port = SimulatedPort(fail_close_on=1)
    runtime, clock, log = make_runtime(port=port)
    runtime.submit_dispense(Target.FOOD, 10.0)
    clock.advance_to(1.0)
    runtime.tick()
    events = dispense_events(log)
    assert len(events) == 1
    assert events[0].payload["outcome"] == "aborted"
    faults = [a for a in alert_events(log) if a.payload["alert"] == "dispense_fault"]
    assert len(faults) == 1


def test_submit_dispense_validates_bounds():
    runtime, clock, log = make_runtime()
    with pytest.raises(QuantityOutOfRangeError):
        runtime.submit_dispense(Target.FOOD, 0.0)
    with pytest.raises(QuantityOutOfRangeError):
        runtime.submit_dispense(Target.WATER, 9999.0)


def test_command_ids_continue_after_restart(tmp_path):
    path = tmp_path / "events.jsonl"
    clock = VirtualClock()
    config = FeederConfig.from_dict(raw_config())
    log = EventLog(path)
    runtime = FeederRuntime(
        config,
        StaticFrameSource([Frame.filled(64, 64, 30)]),
        Dispenser(SimulatedPort(), clock),
        log,
        clock,
    )
    first = runtime.submit_dispense(Target.FOOD, 5.0)
    runtime.tick()
    log.close()

    log2 = EventLog(path)
    revived = FeederRuntime(
        config,
        StaticFrameSource([Frame.filled(64, 64, 30)]),
        Dispenser(SimulatedPort(), clock),
        log2,
        clock,
    )
    second = revived.submit_dispense(Target.FOOD, 5.0)
    assert first == "cmd-1"
    assert second == "cmd-2"  # ids never collide across restarts


def test_teaser_quantities_follow_config_through_the_loop():
    # End-to-end decide wiring: a presence edge dispenses the teaser quantity.
    clock = VirtualClock()
    config_overrides = {
        "frame": {"width": 64, "height": 64},
        "bowl": {"cx": 32, "cy": 32, "r": 8},
    }
    runtime, clock, log = make_runtime(clock=clock, config_overrides=config_overrides)
    quiet = Frame.filled(64, 64, 30)
    busy_pixels = bytearray(quiet.pixels)
    for i in range(300):  # 300/4096 = 7.3% of pixels change
        busy_pixels[i] = 255
    busy = Frame(64, 64, bytes(busy_pixels))

    runtime._source = StaticFrameSource([quiet, quiet, busy])
    runtime.tick()  # seeds the background model
    clock.advance_to(2.0)
    runtime.tick()
    clock.advance_to(4.0)
    runtime.tick()  # presence edge -> teaser
    fired = dispense_events(log)
    assert [e.payload["trigger"] for e in fired] == ["teaser"]
    assert fired[0].payload["quantity"] == pytest.approx(5.0)

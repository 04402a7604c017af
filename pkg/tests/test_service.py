"""HTTP API contract tests against a live in-process daemon, plus the mirror
publisher against a local stub."""

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
import requests

from feederd.actuation import Dispenser, SimulatedPort, Target
from feederd.clock import WallClock
from feederd.config import FeederConfig
from feederd.events import EventKind, EventLog
from feederd.runtime import (
    CapturedFrame,
    DirectoryFrameSource,
    FeederRuntime,
    StaticFrameSource,
)
from feederd.service import MirrorPublisher
from feederd.vision import BowlRegion, Frame, build_mask, decode_pgm, encode_pgm, food_level
from tests.conftest import raw_config


def frame_158_of_317():
    """100x100 frame whose r=10 bowl reads exactly 158/317 dark."""
    mask = build_mask(100, 100, BowlRegion(50, 50, 10))
    arr = np.full((100, 100), 200, dtype=np.uint8)
    for x, y in sorted(mask.inside)[:158]:
        arr[y, x] = 10
    return Frame.from_array(arr), mask


def wait_until(predicate, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False


def stream_events(base_url, since=0, count=None, timeout=5.0):
    """Read NDJSON events; stop after `count` lines (or replay end if follow=0)."""
    url = f"{base_url}/events?since={since}" + ("" if count else "&follow=0")
    out = []
    with requests.get(url, stream=True, timeout=timeout) as response:
        assert response.status_code == 200
        for line in response.iter_lines():
            if not line:
                continue
            out.append(json.loads(line))
            if count is not None and len(out) >= count:
                break
    return out


# ---------------------------------------------------------------- status & frame

def test_fresh_boot_has_no_reading(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([]))
    status = requests.get(f"{daemon.base_url}/status").json()
    assert status["food_percent"] is None
    assert status["food_status"] is None
    assert status["presence"] is False
    assert status["schedule_version"] == 1
    response = requests.get(f"{daemon.base_url}/frame")
    assert response.status_code == 404
    assert response.json()["error"] == "no_frame_yet"


def test_camera_unavailable_becomes_an_event_not_a_crash(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([]))
    assert wait_until(
        lambda: daemon.log.counts[EventKind.CAMERA_UNAVAILABLE.value] >= 2
    )
    assert daemon.log.counts[EventKind.DISPENSE.value] == 0


def test_status_reflects_the_latest_reading(live_daemon_factory):
    frame, _ = frame_158_of_317()
    daemon = live_daemon_factory(
        StaticFrameSource([frame]),
        config_overrides={"frame": {"width": 100, "height": 100}, "bowl": {"cx": 50, "cy": 50, "r": 10}},
    )
    assert wait_until(lambda: daemon.log.counts[EventKind.FOOD_LEVEL.value] >= 1)
    status = requests.get(f"{daemon.base_url}/status").json()
    assert status["food_percent"] == pytest.approx(100 * 158 / 317)
    assert round(status["food_percent"], 2) == 49.84
    assert status["food_status"] == "adequate"
    assert status["uptime_s"] > 0


def test_frame_endpoint_returns_ingested_bytes_exactly(live_daemon_factory, tmp_path):
    # A header comment survives only if the original bytes are served.
    raw = b"P5\n# shot 1\n4 2\n255\n" + bytes(range(8))
    frame_dir = tmp_path / "frames"
    frame_dir.mkdir()
    (frame_dir / "shot.pgm").write_bytes(raw)
    daemon = live_daemon_factory(
        DirectoryFrameSource(frame_dir),
        config_overrides={"frame": {"width": 4, "height": 2}, "bowl": {"cx": 2, "cy": 1, "r": 1}},
    )
    assert wait_until(lambda: daemon.log.counts[EventKind.FOOD_LEVEL.value] >= 1)
    response = requests.get(f"{daemon.base_url}/frame")
    assert response.status_code == 200
    assert response.content == raw
    assert int(response.headers["X-Capture-Timestamp"]) > 0


def test_frame_round_trip_reproduces_the_reading(live_daemon_factory):
    frame, mask = frame_158_of_317()
    daemon = live_daemon_factory(
        StaticFrameSource([frame]),
        config_overrides={"frame": {"width": 100, "height": 100}, "bowl": {"cx": 50, "cy": 50, "r": 10}},
    )
    assert wait_until(lambda: daemon.log.counts[EventKind.FOOD_LEVEL.value] >= 1)
    payload = requests.get(f"{daemon.base_url}/frame").content
    reading = food_level(decode_pgm(payload), mask)
    status = requests.get(f"{daemon.base_url}/status").json()
    assert reading.percent == pytest.approx(status["food_percent"])


# ---------------------------------------------------------------- dispense

def test_manual_dispense_links_command_to_event(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    response = requests.post(
        f"{daemon.base_url}/dispense", json={"target": "food", "quantity": 20}
    )
    assert response.status_code == 202
    command_id = response.json()["id"]

    def dispense_event():
        return [
            e
            for e in daemon.log.events()
            if e.kind is EventKind.DISPENSE and e.payload.get("command_id") == command_id
        ]

    assert wait_until(lambda: len(dispense_event()) == 1)
    event = dispense_event()[0]
    assert event.payload["outcome"] == "completed"
    assert event.payload["duration_s"] == pytest.approx(20 / 100.0)
    # Credited amount is rate x actual open time: a real sleep overshoots a
    # little, so the credit is >= nominal, never less.
    assert 20.0 <= event.payload["dispensed"] < 25.0
    # The accepted command id appears in exactly one dispense event.
    time.sleep(0.2)
    assert len(dispense_event()) == 1


@pytest.mark.parametrize(
    "body",
    [
        {"target": "food", "quantity": 0},
        {"target": "food", "quantity": -3},
        {"target": "water", "quantity": 10000},
    ],
)
def test_out_of_range_dispense_rejected(live_daemon_factory, body):
    daemon = live_daemon_factory(StaticFrameSource([]))
    response = requests.post(f"{daemon.base_url}/dispense", json=body)
    assert response.status_code == 400
    assert response.json()["error"] == "quantity_out_of_range"


def test_malformed_dispense_rejected(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([]))
    response = requests.post(f"{daemon.base_url}/dispense", json={"target": "lava"})
    assert response.status_code == 400


# ---------------------------------------------------------------- schedule

def test_schedule_put_increments_version_and_round_trips(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    before = requests.get(f"{daemon.base_url}/status").json()["schedule_version"]
    body = {"entries": [[28800, 12.0], [64800, 25.0]], "water_entries": [[30000, 100.0]]}
    response = requests.put(f"{daemon.base_url}/schedule", json=body)
    assert response.status_code == 200
    assert response.json()["version"] == before + 1
    fetched = requests.get(f"{daemon.base_url}/schedule").json()
    assert fetched["entries"] == body["entries"]
    assert fetched["water_entries"] == body["water_entries"]
    assert wait_until(
        lambda: requests.get(f"{daemon.base_url}/status").json()["schedule_version"]
        == before + 1
    )


def test_empty_schedule_accepted(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    response = requests.put(
        f"{daemon.base_url}/schedule", json={"entries": [], "water_entries": []}
    )
    assert response.status_code == 200


def test_duplicate_schedule_times_rejected(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([]))
    response = requests.put(
        f"{daemon.base_url}/schedule",
        json={"entries": [[28800, 12.0], [28800, 30.0]]},
    )
    assert response.status_code == 400
    assert response.json()["error"] == "invalid_schedule"


def test_schedule_survives_restart(live_daemon_factory, tmp_path):
    daemon = live_daemon_factory(
        StaticFrameSource([Frame.filled(64, 64, 30)]), persistent=True
    )
    body = {"entries": [[3600, 10.0]], "water_entries": []}
    version = requests.put(f"{daemon.base_url}/schedule", json=body).json()["version"]
    daemon.stop()

    revived = live_daemon_factory(
        StaticFrameSource([Frame.filled(64, 64, 30)]), persistent=True
    )
    fetched = requests.get(f"{revived.base_url}/schedule").json()
    assert fetched["entries"] == body["entries"]
    assert fetched["version"] == version


# ---------------------------------------------------------------- events stream

def test_replay_returns_exactly_the_persisted_events(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    assert wait_until(lambda: daemon.log.last_seq >= 5)
    got = stream_events(daemon.base_url, since=0, count=5)
    assert [e["seq"] for e in got] == [1, 2, 3, 4, 5]


def test_since_latest_yields_only_new_events(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    assert wait_until(lambda: daemon.log.last_seq >= 3)
    latest = daemon.log.last_seq
    got = stream_events(daemon.base_url, since=latest, count=2)
    assert all(e["seq"] > latest for e in got)
    assert [e["seq"] for e in got] == sorted(e["seq"] for e in got)


def test_stream_is_gap_free_across_commands_and_ticks(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    for quantity in (5, 10, 15):
        requests.post(
            f"{daemon.base_url}/dispense", json={"target": "food", "quantity": quantity}
        )
    assert wait_until(
        lambda: daemon.log.counts[EventKind.DISPENSE.value] >= 3
    )
    got = stream_events(daemon.base_url, since=0, count=daemon.log.last_seq)
    seqs = [e["seq"] for e in got]
    assert seqs == list(range(1, len(seqs) + 1))


def test_nonfollow_stream_ends_at_replay(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([Frame.filled(64, 64, 30)]))
    assert wait_until(lambda: daemon.log.last_seq >= 4)
    got = stream_events(daemon.base_url, since=0)
    assert len(got) >= 4
    assert [e["seq"] for e in got] == list(range(1, len(got) + 1))


def test_bad_since_rejected(live_daemon_factory):
    daemon = live_daemon_factory(StaticFrameSource([]))
    assert requests.get(f"{daemon.base_url}/events?since=-1").status_code == 400
    assert requests.get(f"{daemon.base_url}/events?since=frog").status_code == 400


# ---------------------------------------------------------------- durability

def test_restart_reconstructs_counters_from_log(live_daemon_factory):
    daemon = live_daemon_factory(
        StaticFrameSource([Frame.filled(64, 64, 30)]), persistent=True
    )
    for quantity in (20, 30):
        requests.post(
            f"{daemon.base_url}/dispense", json={"target": "food", "quantity": quantity}
        )
    requests.post(f"{daemon.base_url}/dispense", json={"target": "water", "quantity": 40})
    assert wait_until(lambda: daemon.log.counts[EventKind.DISPENSE.value] >= 3)
    expected = {"food": 0.0, "water": 0.0}
    for event in daemon.log.events():
        if event.kind is EventKind.DISPENSE:
            expected[event.payload["target"]] += event.payload["dispensed"]
    daemon.stop()

    revived = live_daemon_factory(
        StaticFrameSource([Frame.filled(64, 64, 30)]), persistent=True
    )
    status = requests.get(f"{revived.base_url}/status").json()
    # Replay must reconstruct the fold over the log exactly, not approximately.
    assert status["food_dispensed_today_g"] == expected["food"]
    assert status["water_dispensed_today_ml"] == expected["water"]
    assert status["food_dispensed_today_g"] == pytest.approx(50.0, abs=3.0)
    assert status["last_dispense"]["target"] == "water"


# ---------------------------------------------------------------- mirror

class MirrorStub(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self):
        self.received = []

        class Handler(BaseHTTPRequestHandler):
            def do_PUT(handler):
                length = int(handler.headers.get("Content-Length", 0))
                self.received.append(json.loads(handler.rfile.read(length)))
                handler.send_response(200)
                handler.send_header("Content-Length", "0")
                handler.end_headers()

            def log_message(handler, *args):
                pass

        super().__init__(("127.0.0.1", 0), Handler)
        self.url = "http://127.0.0.1:%d/pet_feeder/food_level" % self.server_address[1]


def test_mirror_publishes_the_tick_reading():
    stub = MirrorStub()
    stub_thread = threading.Thread(target=stub.serve_forever, daemon=True)
    stub_thread.start()

    config = FeederConfig.from_dict(raw_config())
    clock = WallClock()
    log = EventLog()
    runtime = FeederRuntime(
        config,
        StaticFrameSource([Frame.filled(64, 64, 30)]),
        Dispenser(SimulatedPort(), clock),
        log,
        clock,
    )
    mirror = MirrorPublisher(stub.url, log, clock)
    mirror.start()
    runtime.mirror = mirror
    try:
        runtime.tick()
        assert wait_until(lambda: len(stub.received) >= 1)
        payload = stub.received[0]
        assert payload["food_level"] == pytest.approx(runtime.status().food_percent)
        assert payload["presence"] is False
        assert payload["timestamp"] > 0
    finally:
        mirror.stop()
        stub.shutdown()


def test_dead_mirror_never_blocks_ticks():
    config = FeederConfig.from_dict(raw_config())
    clock = WallClock()
    log = EventLog()
    runtime = FeederRuntime(
        config,
        StaticFrameSource([Frame.filled(64, 64, 30)]),
        Dispenser(SimulatedPort(), clock),
        log,
        clock,
    )
    # Nothing listens on this port: every publish must fail fast in its thread.
    mirror = MirrorPublisher("http://127.0.0.1:9/unreachable", log, clock, timeout_s=0.2)
    mirror.start()
    runtime.mirror = mirror
    try:
        durations = []
        for _ in range(10):
            t0 = time.monotonic()
            runtime.tick()
            durations.append(time.monotonic() - t0)
        assert max(durations) < config.capture_interval_s
        assert wait_until(
            lambda: any(
                e.payload.get("alert") == "mirror_unreachable"
                for e in log.events()
                if e.kind is EventKind.ALERT
            )
        )
    finally:
        mirror.stop()

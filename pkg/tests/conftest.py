"""Shared fixtures: raw config builders and an in-process daemon harness."""

import json
import threading

import pytest

from feederd.actuation import Dispenser, SimulatedPort
from feederd.clock import WallClock
from feederd.config import FeederConfig
from feederd.events import EventLog
from feederd.runtime import FeederRuntime
from feederd.service import serve


def raw_config(**overrides) -> dict:
    raw = {
        "frame": {"width": 64, "height": 64},
        "bowl": {"cx": 32, "cy": 32, "r": 8},
        "rates": {"food_g_per_s": 100.0, "water_ml_per_s": 100.0},
        "capture_interval_s": 0.05,
        "controller": {"cooldown_s": 1800.0},
        "limits": {"max_food_g": 100.0, "max_water_ml": 500.0},
    }
    raw.update(overrides)
    return raw


class LiveDaemon:
    """Runtime + HTTP server on an OS-assigned port, torn down after the test."""

    def __init__(self, config: FeederConfig, frame_source, data_dir=None, port=None):
        self.clock = WallClock()
        self.log = EventLog(data_dir / "events.jsonl" if data_dir else None)
        self.dispenser = Dispenser(port or SimulatedPort(), self.clock)
        self.runtime = FeederRuntime(
            config,
            frame_source,
            self.dispenser,
            self.log,
            self.clock,
            schedule_path=data_dir / "schedule.json" if data_dir else None,
        )
        self.server = serve(self.runtime, "127.0.0.1", 0)
        self.base_url = "http://127.0.0.1:%d" % self.server.server_address[1]
        self._stop = threading.Event()
        self._ticker = threading.Thread(
            target=self.runtime.run_loop, args=(self._stop,), daemon=True
        )
        self._server_thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def start(self):
        self._server_thread.start()
        self._ticker.start()
        return self

    def stop(self):
        self._stop.set()
        self._ticker.join(5.0)
        self.server.shutdown()
        self.log.close()


@pytest.fixture
def live_daemon_factory(tmp_path):
    daemons = []

    def factory(frame_source, config_overrides=None, persistent=False):
        config = FeederConfig.from_dict(raw_config(**(config_overrides or {})))
        data_dir = None
        if persistent:
            data_dir = tmp_path / "data"
            data_dir.mkdir(exist_ok=True)
        daemon = LiveDaemon(config, frame_source, data_dir=data_dir).start()
        daemons.append(daemon)
        return daemon

    yield factory
    for daemon in daemons:
        daemon.stop()


def write_config_file(path, **overrides):
    path.write_text(json.dumps(raw_config(**overrides)))
    return path

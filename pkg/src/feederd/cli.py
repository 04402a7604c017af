"""feederd entry point.

Daemon mode runs the tick loop against either the built-in simulator or a
watched directory of PGM frames, serving the HTTP API (and dashboard assets,
when configured). Scenario mode runs an accelerated closed-loop simulation
and writes a metrics report instead of serving anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .actuation import Dispenser, LoggingPort, SimulatedPort
from .clock import WallClock
from .config import ConfigError, FeederConfig
from .events import EventLog
from .runtime import DirectoryFrameSource, FeederRuntime
from .service import MirrorPublisher, serve
from .sim import (
    BowlRenderer,
    Scenario,
    ScenarioInvalidError,
    SteppingSimFrameSource,
    build_world,
    run_scenario,
)

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feederd", description="camera-driven pet feeder daemon and simulator"
    )
    parser.add_argument("--config", required=True, type=Path, help="JSON config file")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--sim", action="store_true", help="use the built-in simulated world")
    source.add_argument(
        "--camera-dir", type=Path, help="ingest the newest .pgm frame from this directory"
    )
    parser.add_argument("--listen", help="addr:port for the HTTP API (overrides config)")
    parser.add_argument("--mirror-url", help="remote mirror endpoint (overrides config)")
    parser.add_argument("--data-dir", type=Path, help="event log / schedule directory")
    parser.add_argument("--static-dir", type=Path, help="dashboard assets served at /")
    parser.add_argument("--scenario", type=Path, help="run this scenario file and exit")
    parser.add_argument("--report", type=Path, help="where to write the scenario report")
    parser.add_argument(
        "--log-level", default="info", choices=["debug", "info", "warning", "error"]
    )
    return parser


def _parse_listen(listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--listen must be addr:port, got {listen!r}")
    return host, int(port)


def _run_scenario_mode(config: FeederConfig, args) -> int:
    try:
        scenario = Scenario.from_file(args.scenario)
    except ScenarioInvalidError as exc:
        print(f"feederd: {exc}", file=sys.stderr)
        return 2
    report = run_scenario(scenario, config, report_path=args.report)
    summary = {
        "ticks": report.ticks,
        "triggers_total": report.triggers_total,
        "activation_success_rate": report.activation_success_rate,
        "mean_response_s": report.mean_response_s,
        "max_response_s": report.max_response_s,
        "dispenses": len(report.dispenses),
        "alerts": len(report.alerts),
    }
    print(json.dumps(summary, indent=2))
    return 0


def _run_daemon(config: FeederConfig, args) -> int:
    clock = WallClock()
    data_dir = args.data_dir or config.data_dir or Path("feederd-data")
    data_dir.mkdir(parents=True, exist_ok=True)

    if args.camera_dir is not None:
        source = DirectoryFrameSource(args.camera_dir)
    else:
        if not args.sim:
            logger.info("no --camera-dir given; defaulting to --sim")
        world = build_world(config, stochastic=True)
        renderer = BowlRenderer(
            config.frame_width, config.frame_height, config.bowl, seed=config.world.seed
        )
        source = SteppingSimFrameSource(world, renderer, clock)

    log = EventLog(data_dir / "events.jsonl")
    dispenser = Dispenser(LoggingPort(SimulatedPort()), clock)
    runtime = FeederRuntime(
        config, source, dispenser, log, clock, schedule_path=data_dir / "schedule.json"
    )

    mirror_url = args.mirror_url or config.mirror_url
    mirror = None
    if mirror_url:
        mirror = MirrorPublisher(mirror_url, log, clock)
        mirror.start()
        runtime.mirror = mirror

    host, port = _parse_listen(args.listen or config.listen)
    server = serve(runtime, host, port, static_dir=args.static_dir or config.static_dir)
    bound_host, bound_port = server.server_address[:2]
    (data_dir / "endpoint.json").write_text(
        json.dumps({"host": bound_host, "port": bound_port})
    )
    logger.info("feederd up at http://%s:%d (data in %s)", bound_host, bound_port, data_dir)

    server_thread = threading.Thread(target=server.serve_forever, daemon=True)
    server_thread.start()

    stop = threading.Event()

    def _shutdown(signum, _frame):
        logger.info("signal %d: shutting down", signum)
        stop.set()

    signal.signal(signal.SIGTERM, _shutdown)
    signal.signal(signal.SIGINT, _shutdown)

    try:
        runtime.run_loop(stop)
    finally:
        server.shutdown()
        if mirror is not None:
            mirror.stop()
        log.close()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = FeederConfig.from_file(args.config)
    except ConfigError as exc:
        print(f"feederd: {exc}", file=sys.stderr)
        return 2
    if args.scenario is not None:
        return _run_scenario_mode(config, args)
    return _run_daemon(config, args)


if __name__ == "__main__":
    sys.exit(main())

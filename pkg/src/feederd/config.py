"""Daemon configuration: one JSON file covering bowl calibration, vision
thresholds, controller tunables, actuator rates, simulator world parameters,
and the bootstrap schedule.

The dispensing rates carry no baked-in truth — they are calibration numbers
the operator must supply, so daemon startup refuses to guess them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .control import ControllerConfig, Schedule
from .vision import BowlRegion


class ConfigError(Exception):
    """The configuration file is missing required values or inconsistent."""


@dataclass(frozen=True)
class WorldConfig:
    """Simulated world parameters (sim mode only)."""

    bowl_capacity_g: float = 60.0
    initial_food_g: float = 40.0
    eating_rate_g_per_s: float = 0.5
    arrival_rate_per_hour: float = 1.0
    visit_duration_mean_s: float = 90.0
    seed: int = 42


@dataclass(frozen=True)
class FeederConfig:
    frame_width: int = 64
    frame_height: int = 64
    bowl: BowlRegion = field(default_factory=lambda: BowlRegion(32, 32, 8))
    background_alpha: float = 0.05
    diff_threshold: float = 25.0
    capture_interval_s: float = 2.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    max_food_g: float = 100.0
    max_water_ml: float = 500.0
    water_tank_capacity_ml: float = 2000.0
    low_water_fraction: float = 0.1
    schedule: Schedule = field(default_factory=Schedule)
    world: WorldConfig = field(default_factory=WorldConfig)
    data_dir: Optional[Path] = None
    listen: str = "127.0.0.1:8080"
    mirror_url: Optional[str] = None
    static_dir: Optional[Path] = None

    def __post_init__(self):
        if self.capture_interval_s <= 0:
            raise ConfigError("capture_interval_s must be > 0")
        if self.max_food_g <= 0 or self.max_water_ml <= 0:
            raise ConfigError("per-command maximums must be > 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "FeederConfig":
        frame = raw.get("frame", {})
        bowl = raw.get("bowl")
        if bowl is None:
            raise ConfigError("config requires a bowl calibration: {cx, cy, r}")
        vision_raw = raw.get("vision", {})
        ctrl_raw = dict(raw.get("controller", {}))
        rates = raw.get("rates")
        if not rates or "food_g_per_s" not in rates or "water_ml_per_s" not in rates:
            raise ConfigError(
                "config requires calibrated rates: rates.food_g_per_s and rates.water_ml_per_s"
            )
        controller = ControllerConfig(
            low_level_threshold=float(ctrl_raw.get("low_level_threshold", 30.0)),
            refill_quantity=float(ctrl_raw.get("refill_quantity", 20.0)),
            teaser_quantity=float(ctrl_raw.get("teaser_quantity", 5.0)),
            meal_quantity=float(ctrl_raw.get("meal_quantity", 40.0)),
            engagement_window_s=float(ctrl_raw.get("engagement_window_s", 10.0)),
            cooldown_s=float(ctrl_raw.get("cooldown_s", 1800.0)),
            presence_threshold=float(vision_raw.get("presence_threshold", 0.05)),
            intensity_threshold=int(vision_raw.get("intensity_threshold", 50)),
            food_rate=float(rates["food_g_per_s"]),
            water_rate=float(rates["water_ml_per_s"]),
        )
        world_raw = raw.get("sim", {})
        world = WorldConfig(
            bowl_capacity_g=float(world_raw.get("bowl_capacity_g", 60.0)),
            initial_food_g=float(world_raw.get("initial_food_g", 40.0)),
            eating_rate_g_per_s=float(world_raw.get("eating_rate_g_per_s", 0.5)),
            arrival_rate_per_hour=float(world_raw.get("arrival_rate_per_hour", 1.0)),
            visit_duration_mean_s=float(world_raw.get("visit_duration_mean_s", 90.0)),
            seed=int(world_raw.get("seed", 42)),
        )
        limits = raw.get("limits", {})
        water = raw.get("water", {})
        return cls(
            frame_width=int(frame.get("width", 64)),
            frame_height=int(frame.get("height", 64)),
            bowl=BowlRegion(int(bowl["cx"]), int(bowl["cy"]), int(bowl["r"])),
            background_alpha=float(vision_raw.get("alpha", 0.05)),
            diff_threshold=float(vision_raw.get("diff_threshold", 25.0)),
            capture_interval_s=float(raw.get("capture_interval_s", 2.0)),
            controller=controller,
            max_food_g=float(limits.get("max_food_g", 100.0)),
            max_water_ml=float(limits.get("max_water_ml", 500.0)),
            water_tank_capacity_ml=float(water.get("tank_capacity_ml", 2000.0)),
            low_water_fraction=float(water.get("low_fraction", 0.1)),
            schedule=Schedule.from_dict(raw.get("schedule", {})),
            world=world,
            data_dir=Path(raw["data_dir"]) if raw.get("data_dir") else None,
            listen=str(raw.get("listen", "127.0.0.1:8080")),
            mirror_url=raw.get("mirror_url"),
            static_dir=Path(raw["static_dir"]) if raw.get("static_dir") else None,
        )

    @classmethod
    def from_file(cls, path: Path) -> "FeederConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

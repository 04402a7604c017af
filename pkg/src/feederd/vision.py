"""Pure image analysis: bowl masking, food-level estimation, presence detection.

Frames are 8-bit grayscale. The bowl is a calibrated disc; the food level is
the share of in-bowl pixels darker than the intensity threshold; presence is
declared when the foreground fraction from background subtraction strictly
exceeds the presence threshold. Every function here is deterministic and
side-effect free: update_background returns a new model rather than mutating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np


class VisionError(Exception):
    """Base for vision-stage failures."""


class EmptyMaskError(VisionError):
    """The calibrated bowl disc contains no frame pixel at all."""


class DimensionMismatchError(VisionError):
    """Frame, mask, or model geometries disagree."""


class MalformedImageError(VisionError):
    """Input bytes are not a decodable binary PGM."""


DEFAULT_INTENSITY_THRESHOLD = 50
DEFAULT_PRESENCE_THRESHOLD = 0.05
DEFAULT_LOW_LEVEL_THRESHOLD = 30.0
DEFAULT_BACKGROUND_ALPHA = 0.05
DEFAULT_DIFF_THRESHOLD = 25.0


@dataclass(frozen=True)
class Frame:
    """8-bit grayscale raster, row-major."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"frame dimensions must be >= 1, got {self.width}x{self.height}")
        if len(self.pixels) != self.width * self.height:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, expected "
                f"{self.width * self.height} for {self.width}x{self.height}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Frame":
        a = np.asarray(arr)
        if a.ndim != 2:
            raise ValueError("expected a 2-D (height, width) array")
        if a.dtype != np.uint8:
            if a.min() < 0 or a.max() > 255:
                raise ValueError("intensities must lie in [0, 255]")
            a = a.astype(np.uint8)
        return cls(width=a.shape[1], height=a.shape[0], pixels=a.tobytes())

    @classmethod
    def filled(cls, width: int, height: int, intensity: int) -> "Frame":
        if not 0 <= intensity <= 255:
            raise ValueError("intensity must lie in [0, 255]")
        return cls(width=width, height=height, pixels=bytes([intensity]) * (width * height))

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)

    def at(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"({x}, {y}) outside {self.width}x{self.height} frame")
        return self.pixels[y * self.width + x]


@dataclass(frozen=True)
class BowlRegion:
    """Calibrated circular bowl: center (cx, cy) and radius, in pixels."""

    cx: int
    cy: int
    radius: int

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"bowl radius must be >= 0, got {self.radius}")


@dataclass(frozen=True, eq=False)
class Mask:
    """Lattice points inside the bowl disc, clipped to the frame.

    A point (x, y) belongs iff (x-cx)^2 + (y-cy)^2 <= r^2 and it lies on the
    frame. flat_indices caches the row-major offsets for fast pixel gathers.
    """

    region: BowlRegion
    frame_width: int
    frame_height: int
    inside: frozenset
    count: int
    flat_indices: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return (
            self.region == other.region
            and self.frame_width == other.frame_width
            and self.frame_height == other.frame_height
            and self.inside == other.inside
        )


class FoodLevelStatus(str, Enum):
    LOW = "low"
    ADEQUATE = "adequate"


@dataclass(frozen=True)
class FoodLevelReading:
    percent: float
    dark_pixels: int
    total_pixels: int
    intensity_threshold: int
    status: FoodLevelStatus
    timestamp_ms: int


@dataclass(frozen=True)
class PresenceReading:
    foreground_fraction: float
    detected: bool
    timestamp_ms: int


@dataclass(frozen=True, eq=False)
class BackgroundModel:
    """Per-pixel exponential running mean of the static scene.

    A pixel is foreground when it deviates from the mean by strictly more
    than diff_threshold; the mean then absorbs the new frame at rate alpha.
    """

    width: int = 0
    height: int = 0
    mean: Optional[np.ndarray] = None
    alpha: float = DEFAULT_BACKGROUND_ALPHA
    diff_threshold: float = DEFAULT_DIFF_THRESHOLD
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.diff_threshold < 0:
            raise ValueError(f"diff_threshold must be >= 0, got {self.diff_threshold}")


def build_mask(frame_width: int, frame_height: int, region: BowlRegion) -> Mask:
    """Enumerate the in-bowl lattice points for frames of the given size.

    Raises EmptyMaskError when the disc misses the frame entirely, which
    signals a miscalibrated bowl region rather than an empty bowl.
    """
    if frame_width < 1 or frame_height < 1:
        raise ValueError("frame dimensions must be >= 1")
    ys, xs = np.ogrid[0:frame_height, 0:frame_width]
    disc = (xs - region.cx) ** 2 + (ys - region.cy) ** 2 <= region.radius**2
    flat = np.flatnonzero(disc.ravel())
    if flat.size == 0:
        raise EmptyMaskError(
            f"bowl disc at ({region.cx}, {region.cy}) r={region.radius} "
            f"contains no pixel of a {frame_width}x{frame_height} frame"
        )
    points = frozenset(
        (int(i % frame_width), int(i // frame_width)) for i in flat
    )
    return Mask(
        region=region,
        frame_width=frame_width,
        frame_height=frame_height,
        inside=points,
        count=int(flat.size),
        flat_indices=flat,
    )


def food_level(
    frame: Frame,
    mask: Mask,
    intensity_threshold: int = DEFAULT_INTENSITY_THRESHOLD,
    low_threshold: float = DEFAULT_LOW_LEVEL_THRESHOLD,
    timestamp_ms: int = 0,
) -> FoodLevelReading:
    """Percentage of in-bowl pixels strictly darker than the threshold.

    Dark pixels indicate food, so percent is the estimated fill level. The
    comparison is strict: a pixel exactly at the threshold is not dark.
    """
    if frame.width != mask.frame_width or frame.height != mask.frame_height:
        raise DimensionMismatchError(
            f"mask built for {mask.frame_width}x{mask.frame_height}, "
            f"frame is {frame.width}x{frame.height}"
        )
    values = np.frombuffer(frame.pixels, dtype=np.uint8)[mask.flat_indices]
    dark = int(np.count_nonzero(values < intensity_threshold))
    percent = 100.0 * dark / mask.count
    return FoodLevelReading(
        percent=percent,
        dark_pixels=dark,
        total_pixels=mask.count,
        intensity_threshold=intensity_threshold,
        status=classify_food_level(percent, low_threshold),
        timestamp_ms=timestamp_ms,
    )


def classify_food_level(percent: float, low_threshold: float) -> FoodLevelStatus:
    """Low only when percent falls strictly below the threshold."""
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"percent must lie in [0, 100], got {percent}")
    return FoodLevelStatus.LOW if percent < low_threshold else FoodLevelStatus.ADEQUATE


def update_background(model: BackgroundModel, frame: Frame) -> tuple[BackgroundModel, np.ndarray]:
    """Advance the background model by one frame.

    Returns (new model, boolean foreground raster). The first frame ever seen
    seeds the mean and reports an all-background raster so nothing fires at
    boot. Afterwards a pixel is foreground iff |frame - mean| > diff_threshold,
    and the mean is then blended toward the frame at rate alpha.
    """
    arr = frame.to_array().astype(np.float64)
    if not model.initialized:
        return (
            BackgroundModel(
                width=frame.width,
                height=frame.height,
                mean=arr,
                alpha=model.alpha,
                diff_threshold=model.diff_threshold,
                initialized=True,
            ),
            np.zeros((frame.height, frame.width), dtype=bool),
        )
    if frame.width != model.width or frame.height != model.height:
        raise DimensionMismatchError(
            f"model is {model.width}x{model.height}, frame is {frame.width}x{frame.height}"
        )
    foreground = np.abs(arr - model.mean) > model.diff_threshold
    new_mean = (1.0 - model.alpha) * model.mean + model.alpha * arr
    return (
        BackgroundModel(
            width=model.width,
            height=model.height,
            mean=new_mean,
            alpha=model.alpha,
            diff_threshold=model.diff_threshold,
            initialized=True,
        ),
        foreground,
    )


def detect_presence(
    foreground_mask: np.ndarray,
    presence_threshold: float = DEFAULT_PRESENCE_THRESHOLD,
    timestamp_ms: int = 0,
) -> PresenceReading:
    """Declare presence when the foreground fraction strictly exceeds the threshold."""
    total = int(foreground_mask.size)
    if total == 0:
        raise ValueError("foreground raster is empty")
    fraction = float(np.count_nonzero(foreground_mask)) / total
    return PresenceReading(
        foreground_fraction=fraction,
        detected=fraction > presence_threshold,
        timestamp_ms=timestamp_ms,
    )


_PGM_WHITESPACE = b" \t\n\r\x0b\x0c"


def decode_pgm(data: bytes) -> Frame:
    """Decode a binary (P5) PGM with maxval <= 255.

    Header comments (#) are honored. Truncated payloads, wrong magic, or
    wide maxvals raise MalformedImageError.
    """
    if len(data) < 2 or data[:2] != b"P5":
        raise MalformedImageError("not a binary PGM: magic is not P5")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1] in (b"#",) + tuple(
            bytes([c]) for c in _PGM_WHITESPACE
        ):
            if data[pos : pos + 1] == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise MalformedImageError("unterminated header comment")
                pos = nl + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos] not in _PGM_WHITESPACE and data[pos : pos + 1] != b"#":
            pos += 1
        token = data[start:pos]
        if not token:
            raise MalformedImageError("truncated PGM header")
        try:
            fields.append(int(token))
        except ValueError:
            raise MalformedImageError(f"non-numeric header field {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise MalformedImageError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise MalformedImageError(f"maxval {maxval} unsupported (must be in 1..255)")
    if pos >= len(data) or data[pos] not in _PGM_WHITESPACE:
        raise MalformedImageError("missing whitespace between header and raster")
    pos += 1
    payload = data[pos:]
    expected = width * height
    if len(payload) < expected:
        raise MalformedImageError(
            f"raster truncated: header claims {expected} bytes, found {len(payload)}"
        )
    if len(payload) > expected:
        raise MalformedImageError(
            f"raster has {len(payload) - expected} trailing bytes beyond {expected}"
        )
    return Frame(width=width, height=height, pixels=bytes(payload))


def encode_pgm(frame: Frame) -> bytes:
    """Serialize a frame as binary PGM (P5, maxval 255)."""
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    return header + frame.pixels

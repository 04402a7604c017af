"""Camera-driven pet feeder: vision, dispensing control, monitoring service, simulator."""

__version__ = "0.1.0"

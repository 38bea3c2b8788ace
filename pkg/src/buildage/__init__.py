"""Building age estimation from photographs via patch mining and decision fusion."""

__version__ = "0.1.0"

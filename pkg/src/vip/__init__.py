"""Zero-shot video-instructed imitation on a small 2-D manipulation world."""

__version__ = "0.1.0"

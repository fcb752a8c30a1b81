"""Knowledge-point tagging for math problem texts."""

__version__ = "0.1.0"

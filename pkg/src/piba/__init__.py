"""Input-level information bottleneck attribution and evaluation harness."""

__version__ = "0.1.0"

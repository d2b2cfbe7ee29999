"""Census-faithful LLM agent cohorts for election simulation, with offline
mock backends and a full statistical validation cycle."""

__version__ = "0.1.0"

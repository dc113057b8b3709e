"""sgfopt package."""

__version__ = "0.1.0"

__all__ = ["grid", "fieldio", "solvers", "control", "analysis", "config", "runner", "cli"]

"""Knowledge-tracing experiments with leakage-aware evaluation."""

__version__ = "0.1.0"

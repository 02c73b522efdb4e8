"""Ray tracing, pseudolinearization and symbol audits for layered TI media."""

__version__ = "0.1.0"

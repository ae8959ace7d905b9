"""Deterministic cache/TLB simulator and attack laboratory for cache-line demotion."""

__version__ = "0.1.0"

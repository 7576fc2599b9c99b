"""Guaranteed reachable sets and tube-constrained MPC for low-thrust spacecraft."""

__version__ = "0.1.0"

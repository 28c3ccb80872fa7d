"""Scene-aware human motion synthesis on sparse scene semantic occupancy."""

__version__ = "0.1.0"

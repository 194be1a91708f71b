"""Task- and instance-conditioned block gating for multi-task residual networks."""

__version__ = "0.1.0"

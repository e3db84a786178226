"""Joint positioning and control of a quadrotor as one factor graph."""
from __future__ import annotations

__version__ = "0.1.0"

"""Continuous-time 3D lidar-inertial SLAM toolkit."""

__version__ = "0.1.0"

from .geometry import Pose  # noqa: F401

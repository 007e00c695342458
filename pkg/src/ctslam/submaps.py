"""Submap containers shared by the odometry front end and the pose-graph and
multi-agent back ends.

A submap is a rigid six-second bundle: surfels expressed in the submap's local
frame (the odometry pose at the interval start), a local up direction, and an
odometry link to the same agent's previous submap. Map surfels carry only the
fields that go over the wire: position, normal, resolution, planarity, mean
time and point count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose

SUBMAP_LENGTH = 6.0
SUBMAP_PERIOD = 5.0


class MapSurfels:
    """Column-array container for back-end surfels."""

    __slots__ = ("positions", "normals", "resolutions", "planarities", "mean_times", "counts")

    def __init__(self, positions, normals, resolutions, planarities, mean_times, counts):
        self.positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.resolutions = np.asarray(resolutions, dtype=float).reshape(-1)
        self.planarities = np.asarray(planarities, dtype=float).reshape(-1)
        self.mean_times = np.asarray(mean_times, dtype=float).reshape(-1)
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1)

    @staticmethod
    def empty() -> "MapSurfels":
        return MapSurfels(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                          np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.resolutions)

    def transformed(self, pose: Pose) -> "MapSurfels":
        return MapSurfels(
            self.positions @ pose.rotation.T + pose.translation,
            self.normals @ pose.rotation.T,
            self.resolutions,
            self.planarities,
            self.mean_times,
            self.counts,
        )

    @staticmethod
    def concatenate(parts) -> "MapSurfels":
        parts = [p for p in parts if len(p)]
        if not parts:
            return MapSurfels.empty()
        return MapSurfels(
            np.concatenate([p.positions for p in parts]),
            np.concatenate([p.normals for p in parts]),
            np.concatenate([p.resolutions for p in parts]),
            np.concatenate([p.planarities for p in parts]),
            np.concatenate([p.mean_times for p in parts]),
            np.concatenate([p.counts for p in parts]),
        )

    def equals(self, other: "MapSurfels") -> bool:
        return (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.normals, other.normals)
            and np.array_equal(self.resolutions, other.resolutions)
            and np.array_equal(self.planarities, other.planarities)
            and np.array_equal(self.mean_times, other.mean_times)
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class OdomEdgeMeasurement:
    """Relative pose from the previous submap's frame to this one, with a
    6x6 covariance on the [rot; trans] tangent."""

    relative: Pose
    covariance: np.ndarray


@dataclass(frozen=True)
class Submap:
    agent_id: int
    seq_no: int                    # 1-based, strictly increasing per agent
    t0: float
    length: float
    base_pose: Pose                # world estimate of the local frame
    surfels: MapSurfels            # local frame
    up_local: np.ndarray           # unit, local frame
    odom_edge: OdomEdgeMeasurement | None = field(default=None)  # None for seq 1

    @property
    def key(self):
        return (self.agent_id, self.seq_no)

    def __post_init__(self):
        u = np.asarray(self.up_local, dtype=float)
        if abs(np.linalg.norm(u) - 1.0) > 1e-9:
            raise ValueError("up_local must be a unit vector")
        if self.seq_no < 1:
            raise ValueError("seq_no is 1-based")

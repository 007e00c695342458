"""Surfel extraction: voxel/time clustering of world-frame lidar points and
planar ellipsoid fitting at multiple spatial resolutions.

A surfel summarises one cluster by its sample mean, sample covariance and the
covariance spectrum; the normal is the eigenvector of the smallest eigenvalue.
Only sufficiently planar clusters survive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RESOLUTIONS = (0.25, 0.5, 1.0, 2.0)
DEFAULT_MIN_CLUSTER = 10
DEFAULT_PLANARITY_THRESHOLD = 0.4
DEFAULT_TIME_GAP = 0.2

# descriptor scale for the log2(resolution) channel, in meters
DESCRIPTOR_GAMMA = 1.0


@dataclass(frozen=True)
class Surfel:
    position: np.ndarray        # world frame, sample mean (m)
    normal: np.ndarray          # unit, eigenvector of smallest eigenvalue
    covariance: np.ndarray      # 3x3 sample covariance, N-1 divisor (m^2)
    eigvals: np.ndarray         # ascending
    mean_time: float
    resolution: float           # voxel edge length (m)
    point_count: int
    planarity: float


def voxel_indices(points, resolution: float) -> np.ndarray:
    """Integer voxel index of each point on a grid anchored at the origin."""
    return np.floor(np.asarray(points, dtype=float) / resolution).astype(np.int64)


def cluster_points(times, points, resolution: float, time_gap: float,
                   min_cluster_size: int = DEFAULT_MIN_CLUSTER):
    """Cluster points by voxel and by time proximity within each voxel.

    Returns a list of index arrays into the input. Within a voxel, points are
    sorted by timestamp and split wherever consecutive stamps gap by more
    than `time_gap`. Clusters below `min_cluster_size` are discarded.
    Deterministic and invariant to the input ordering.
    """
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float)
    if len(times) == 0:
        return []
    vox = voxel_indices(points, resolution)
    order = np.lexsort((times, vox[:, 2], vox[:, 1], vox[:, 0]))
    v = vox[order]
    t = times[order]
    if len(t) == 1:
        breaks = np.zeros(0, dtype=bool)
    else:
        new_voxel = np.any(v[1:] != v[:-1], axis=1)
        gap = (t[1:] - t[:-1]) > time_gap
        breaks = new_voxel | gap
    starts = np.concatenate(([0], np.flatnonzero(breaks) + 1))
    ends = np.concatenate((starts[1:], [len(t)]))
    return [order[s:e] for s, e in zip(starts, ends) if e - s >= min_cluster_size]


def planarity_score(eigvals) -> float:
    """2 * (lambda2 - lambda1) / trace, clamped to [0, 1].

    The wider the gap between the two smallest eigenvalues relative to the
    trace, the flatter the ellipsoid. Zero for a degenerate (empty) spectrum.
    """
    lam = np.asarray(eigvals, dtype=float)
    if np.any(lam < -1e-12):
        raise ValueError(f"negative eigenvalue in spectrum: {lam}")
    lam = np.maximum(lam, 0.0)
    tr = lam.sum()
    if tr < 1e-15:
        return 0.0
    return float(np.clip(2.0 * (lam[1] - lam[0]) / tr, 0.0, 1.0))


def canonical_normal(n) -> np.ndarray:
    """Flip sign so the first non-negligible component is positive."""
    n = np.asarray(n, dtype=float)
    for c in n:
        if abs(c) > 1e-12:
            return n if c > 0.0 else -n
    return n


def segment_moments(points, offsets):
    """Mean and N-1 covariance per CSR-style segment of a point array.

    points: (P,3) sorted by segment; offsets: (S+1,) segment boundaries.
    Returns means (S,3), covariances (S,3,3), counts (S,).
    """
    points = np.asarray(points, dtype=float)
    offsets = np.asarray(offsets)
    counts = np.diff(offsets)
    sums = np.add.reduceat(points, offsets[:-1], axis=0)
    means = sums / counts[:, None]
    outer = points[:, :, None] * points[:, None, :]
    second = np.add.reduceat(outer.reshape(len(points), 9), offsets[:-1], axis=0).reshape(-1, 3, 3)
    centred = second - counts[:, None, None] * (means[:, :, None] * means[:, None, :])
    denom = np.maximum(counts - 1, 1)
    covs = centred / denom[:, None, None]
    # symmetrise against accumulation round-off
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return means, covs, counts


def fit_surfel(points, times, resolution: float, sensor_position=None,
               planarity_threshold: float = DEFAULT_PLANARITY_THRESHOLD,
               min_cluster_size: int = DEFAULT_MIN_CLUSTER):
    """Fit a planar surfel to one cluster; returns None when rejected.

    Rejection (low planarity, too few points) is an expected outcome, not an
    error. The normal is oriented toward `sensor_position` when given,
    otherwise sign-canonicalised.
    """
    points = np.asarray(points, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(points) < max(min_cluster_size, 2):
        return None
    mean = points.mean(axis=0)
    centred = points - mean
    cov = centred.T @ centred / (len(points) - 1)
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    planarity = planarity_score(eigvals)
    if planarity < planarity_threshold:
        return None
    normal = eigvecs[:, 0]
    mean_time = float(times.mean())
    if sensor_position is not None:
        if np.dot(normal, np.asarray(sensor_position, dtype=float) - mean) < 0.0:
            normal = -normal
    else:
        normal = canonical_normal(normal)
    return Surfel(
        position=mean,
        normal=normal,
        covariance=cov,
        eigvals=eigvals,
        mean_time=mean_time,
        resolution=float(resolution),
        point_count=int(len(points)),
        planarity=planarity,
    )


def extract_multires(times, points, resolutions=DEFAULT_RESOLUTIONS,
                     time_gap: float = DEFAULT_TIME_GAP,
                     min_cluster_size: int = DEFAULT_MIN_CLUSTER,
                     planarity_threshold: float = DEFAULT_PLANARITY_THRESHOLD,
                     sensor_position_at=None):
    """Run clustering + fitting at every resolution and concatenate.

    `sensor_position_at(t)` supplies the sensor position used to orient
    normals; when None, normals are sign-canonicalised instead.
    """
    resolutions = list(resolutions)
    if not resolutions:
        raise ValueError("resolutions must be nonempty")
    if sorted(resolutions) != resolutions:
        raise ValueError("resolutions must be ascending")
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=float)
    out = []
    for res in resolutions:
        for idx in cluster_points(times, points, res, time_gap, min_cluster_size):
            sensor = None
            if sensor_position_at is not None:
                sensor = sensor_position_at(float(times[idx].mean()))
            s = fit_surfel(points[idx], times[idx], res, sensor_position=sensor,
                           planarity_threshold=planarity_threshold,
                           min_cluster_size=min_cluster_size)
            if s is not None:
                out.append(s)
    return out


def descriptor(s: Surfel) -> np.ndarray:
    """7-D match descriptor: [position, resolution * normal, log2(resolution)].

    The normal is sign-canonicalised first so n and -n embed identically.
    """
    n = canonical_normal(s.normal)
    return np.concatenate(
        [s.position, s.resolution * n, [DESCRIPTOR_GAMMA * np.log2(s.resolution)]]
    )


def descriptor_matrix(positions, normals, resolutions) -> np.ndarray:
    """Vectorised descriptors for (S,3)/(S,3)/(S,) surfel arrays."""
    normals = np.asarray(normals, dtype=float).copy()
    # canonicalise: first component with |c| > 1e-12 must be positive
    sign = np.ones(len(normals))
    for axis in range(3):
        undecided = sign == 1.0
        col = normals[:, axis]
        flip = undecided & (col < -1e-12)
        keep = undecided & (col > 1e-12)
        sign[flip] = -1.0
        sign[keep] = 2.0  # decided, positive
    sign = np.where(sign == 2.0, 1.0, sign)
    normals *= sign[:, None]
    res = np.asarray(resolutions, dtype=float)
    return np.hstack(
        [
            np.asarray(positions, dtype=float),
            res[:, None] * normals,
            DESCRIPTOR_GAMMA * np.log2(res)[:, None],
        ]
    )


def write_surfels_ply(path, positions, normals, resolutions, planarities) -> None:
    """ASCII PLY export: x y z nx ny nz resolution planarity."""
    positions = np.asarray(positions, dtype=float)
    normals = np.asarray(normals, dtype=float)
    resolutions = np.asarray(resolutions, dtype=float)
    planarities = np.asarray(planarities, dtype=float)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(positions)}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz", "resolution", "planarity"):
            f.write(f"property float {prop}\n")
        f.write("end_header\n")
        for p, n, r, q in zip(positions, normals, resolutions, planarities):
            f.write(
                f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                f"{n[0]:.9g} {n[1]:.9g} {n[2]:.9g} {r:.9g} {q:.9g}\n"
            )

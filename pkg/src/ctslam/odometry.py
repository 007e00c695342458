"""Sliding-window continuous-time lidar-inertial odometry.

Each window step: integrate new IMU measurements (first-order strapdown),
place new lidar points by pose interpolation at their emission times, extract
multi-resolution surfels, then alternate a fixed number of outer iterations of
  match surfels -> solve sample-pose corrections (damped Gauss-Newton with
  Cauchy IRLS on the match residuals) -> apply corrections -> update the
  IMU-rate trajectory through the ratio of two cumulative B-splines ->
  reproject surfels from their retained body-frame points.
Data that falls behind the window is frozen and bundled into overlapping
six-second submaps for the pose-graph back end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from . import pose_costs, surfel
from .geometry import (
    GRAVITY_MAG,
    Pose,
    PoseSpline,
    exp_so3,
    exp_so3_batch,
    log_so3_batch,
)
from .pose_costs import ImuNoise
from .submaps import SUBMAP_LENGTH, SUBMAP_PERIOD, MapSurfels, OdomEdgeMeasurement, Submap


@dataclass
class OdometryConfig:
    window_length: float = 2.0
    slide: float = 0.5
    sample_rate: float = 10.0          # sample poses per second
    outer_iters: int = 4
    gn_iters: int = 2
    cauchy_scale: float = 0.06         # meters, on the point-to-plane distance
    lidar_sigma: float = 0.02          # meters
    gyro_sigma: float = 0.01           # rad/s
    accel_sigma: float = 0.05          # m/s^2
    bias_gyro_sigma: float = 1e-4      # anchor strength, rad/s
    bias_accel_sigma: float = 1e-3     # anchor strength, m/s^2
    knn_k: int = 4
    time_sep_threshold: float = 0.1    # s, minimum match time separation
    match_normal_angle_max: float = 15.0  # deg, max angle between matched normals
    gravity_mag: float = GRAVITY_MAG
    imu_dt: float = 0.01
    max_imu_gap: float = 5.0           # in units of imu_dt; larger gaps are fatal
    levenberg: float = 1e-6
    degeneracy_rel_threshold: float = 1e-9
    max_step_rot: float = 0.2          # rad, per-GN-step trust region
    max_step_trans: float = 0.5        # m
    resolutions: tuple = surfel.DEFAULT_RESOLUTIONS
    min_cluster_size: int = surfel.DEFAULT_MIN_CLUSTER
    planarity_threshold: float = surfel.DEFAULT_PLANARITY_THRESHOLD
    cluster_time_gap: float = surfel.DEFAULT_TIME_GAP
    submap_length: float = SUBMAP_LENGTH
    submap_period: float = SUBMAP_PERIOD
    odom_edge_rot_sigma: float = 0.01  # rad, fallback odometry-edge covariance
    odom_edge_trans_sigma: float = 0.02  # m
    agent_id: int = 0

    def __post_init__(self):
        if self.slide >= self.window_length:
            raise ValueError("slide must be smaller than window_length")
        for name in ("window_length", "slide", "sample_rate", "cauchy_scale",
                     "lidar_sigma", "gyro_sigma", "accel_sigma", "imu_dt"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if int(round(self.window_length * self.sample_rate)) < 3:
            raise ValueError("need at least 4 sample poses per window")

    def noise(self) -> ImuNoise:
        return ImuNoise.from_scalars(self.gyro_sigma, self.accel_sigma,
                                     self.bias_gyro_sigma, self.bias_accel_sigma)

    def gravity(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity_mag])


@dataclass
class BiasState:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class CorrectionPose:
    rot_vec: np.ndarray
    trans: np.ndarray


@dataclass
class SurfelMatch:
    idx_a: int
    idx_b: int
    weight: float
    normal: np.ndarray


@dataclass
class MatchSet:
    """Vectorised matched-pair data consumed by the solver."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    weight: np.ndarray
    normal: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    @staticmethod
    def empty():
        z = np.zeros(0, dtype=np.int64)
        return MatchSet(z, z, np.zeros(0), np.zeros((0, 3)))


@dataclass
class DegeneracyReport:
    degenerate: bool
    eigenvalue: float
    direction: np.ndarray | None


@dataclass
class SolveResult:
    corrections: np.ndarray        # (n, 6)
    bias: np.ndarray               # (6,)
    report: DegeneracyReport
    cost_history: list


class SurfelStore:
    """Window surfels with retained per-point body-frame data so that
    reprojection after a trajectory update is exact."""

    def __init__(self):
        self.point_times = np.zeros(0)
        self.body_points = np.zeros((0, 3))
        self.offsets = np.zeros(1, dtype=np.int64)
        self.resolution = np.zeros(0)
        # fitted world-frame quantities
        self.position = np.zeros((0, 3))
        self.normal = np.zeros((0, 3))
        self.covariance = np.zeros((0, 3, 3))
        self.eigvals = np.zeros((0, 3))
        self.mean_time = np.zeros(0)
        self.counts = np.zeros(0, dtype=np.int64)
        self.planarity = np.zeros(0)

    def __len__(self):
        return len(self.resolution)

    def append_batch(self, point_times, body_points, offsets, resolution,
                     position, normal, covariance, eigvals, mean_time, planarity):
        base = self.offsets[-1]
        self.point_times = np.concatenate([self.point_times, point_times])
        self.body_points = np.concatenate([self.body_points, body_points])
        self.offsets = np.concatenate([self.offsets, base + np.asarray(offsets[1:])])
        self.resolution = np.concatenate([self.resolution, resolution])
        self.position = np.concatenate([self.position, position])
        self.normal = np.concatenate([self.normal, normal])
        self.covariance = np.concatenate([self.covariance, covariance])
        self.eigvals = np.concatenate([self.eigvals, eigvals])
        self.mean_time = np.concatenate([self.mean_time, mean_time])
        self.counts = np.concatenate([self.counts, np.diff(offsets).astype(np.int64)])
        self.planarity = np.concatenate([self.planarity, planarity])

    def retire(self, cutoff_time: float):
        """Split off surfels with mean_time < cutoff; returns them as MapSurfels."""
        old = self.mean_time < cutoff_time
        retired = MapSurfels(self.position[old], self.normal[old], self.resolution[old],
                             self.planarity[old], self.mean_time[old], self.counts[old])
        keep = ~old
        if not np.all(keep):
            keep_idx = np.flatnonzero(keep)
            point_mask = np.zeros(len(self.point_times), dtype=bool)
            new_offsets = [0]
            for i in keep_idx:
                s, e = self.offsets[i], self.offsets[i + 1]
                point_mask[s:e] = True
                new_offsets.append(new_offsets[-1] + (e - s))
            self.point_times = self.point_times[point_mask]
            self.body_points = self.body_points[point_mask]
            self.offsets = np.asarray(new_offsets, dtype=np.int64)
            for name in ("resolution", "position", "normal", "covariance",
                         "eigvals", "mean_time", "counts", "planarity"):
                setattr(self, name, getattr(self, name)[keep])
        return retired

    def refit(self, imu_times, imu_rot, imu_trans):
        """Re-place every member point from the current trajectory and refit."""
        if len(self) == 0:
            return
        R, t = interpolate_point_poses(self.point_times, imu_times, imu_rot, imu_trans)
        world = np.einsum("nij,nj->ni", R, self.body_points) + t
        means, covs, _ = surfel.segment_moments(world, self.offsets)
        eigvals, eigvecs = np.linalg.eigh(covs)
        eigvals = np.maximum(eigvals, 0.0)
        normals = eigvecs[:, :, 0]
        # orient toward the sensor position at each surfel's mean time
        _, sensor_pos = interpolate_point_poses(
            np.clip(self.mean_time, imu_times[0], imu_times[-1]), imu_times, imu_rot, imu_trans
        )
        flip = np.einsum("si,si->s", normals, sensor_pos - means) < 0.0
        normals[flip] *= -1.0
        tr = eigvals.sum(axis=1)
        gap = 2.0 * (eigvals[:, 1] - eigvals[:, 0])
        with np.errstate(invalid="ignore", divide="ignore"):
            planarity = np.where(tr < 1e-15, 0.0, np.clip(gap / np.where(tr < 1e-15, 1.0, tr), 0.0, 1.0))
        self.position = means
        self.covariance = covs
        self.eigvals = eigvals
        self.normal = normals
        self.planarity = planarity

    def as_map_surfels(self, mask=None) -> MapSurfels:
        if mask is None:
            mask = np.ones(len(self), dtype=bool)
        return MapSurfels(self.position[mask], self.normal[mask], self.resolution[mask],
                          self.planarity[mask], self.mean_time[mask], self.counts[mask])


@dataclass
class WindowState:
    window: tuple                      # (t_start, t_end)
    imu_times: np.ndarray              # (K,)
    imu_rot: np.ndarray                # (K,3,3)
    imu_trans: np.ndarray              # (K,3)
    imu_gyro: np.ndarray               # (K,3) measurements aligned with imu_times
    imu_accel: np.ndarray
    sample_times: np.ndarray           # (n,) equidistant
    sample_poses: list                 # list[Pose], latest corrected estimates
    store: SurfelStore
    bias: BiasState
    gravity: np.ndarray


# --------------------------------------------------------------------------
# IMU integration and pose interpolation
# --------------------------------------------------------------------------

def gravity_aligned_rotation(mean_accel, gravity_mag=GRAVITY_MAG) -> np.ndarray:
    """Initial orientation mapping the measured specific-force direction to
    world up (minimal rotation; yaw remains free)."""
    a = np.asarray(mean_accel, dtype=float)
    na = np.linalg.norm(a)
    if na < 1e-6:
        raise ValueError("accelerometer mean too small for gravity alignment")
    u = a / na
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(u, z)
    s = np.linalg.norm(axis)
    c = float(np.dot(u, z))
    if s < 1e-12:
        return np.eye(3) if c > 0 else exp_so3(np.array([np.pi, 0.0, 0.0]))
    angle = np.arctan2(s, c)
    return exp_so3(axis / s * angle)


def integrate_imu_segment(R0, p0, v0, times, gyro, accel, bias: BiasState, gravity,
                          max_gap: float):
    """First-order strapdown propagation across `times` (first entry is the
    state's own timestamp; poses are returned for times[1:])."""
    dts = np.diff(times)
    if np.any(dts <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    if np.any(dts > max_gap):
        raise ValueError(f"IMU gap {dts.max():.4f}s exceeds the permitted maximum {max_gap:.4f}s")
    K = len(times) - 1
    rots = np.empty((K, 3, 3))
    trans = np.empty((K, 3))
    R, p, v = R0.copy(), p0.copy(), v0.copy()
    for k in range(K):
        dt = dts[k]
        a_w = R @ (accel[k] - bias.accel) + gravity
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R @ exp_so3((gyro[k] - bias.gyro) * dt)
        rots[k] = R
        trans[k] = p
    return rots, trans, v


def interpolate_point_poses(query_times, imu_times, imu_rot, imu_trans):
    """Pose at arbitrary times by blending the two bracketing IMU poses
    (translation linear, rotation by geodesic fraction). Vectorised."""
    q = np.asarray(query_times, dtype=float)
    imu_times = np.asarray(imu_times, dtype=float)
    slack = 1e-9
    if np.any(q < imu_times[0] - slack) or np.any(q > imu_times[-1] + slack):
        raise ValueError("query time not bracketed by IMU timestamps")
    idx = np.clip(np.searchsorted(imu_times, q, side="right") - 1, 0, len(imu_times) - 2)
    dt = imu_times[idx + 1] - imu_times[idx]
    alpha = np.clip((q - imu_times[idx]) / dt, 0.0, 1.0)
    rel = log_so3_batch(np.swapaxes(imu_rot[:-1], -1, -2) @ imu_rot[1:])
    R = imu_rot[idx] @ exp_so3_batch(alpha[:, None] * rel[idx])
    t = (1.0 - alpha)[:, None] * imu_trans[idx] + alpha[:, None] * imu_trans[idx + 1]
    return R, t


def terminal_velocity(times, translations, span: float = 0.3) -> np.ndarray:
    """Least-squares velocity over the trailing `span` seconds of a
    trajectory; robust to single-pose jitter at the live window edge."""
    times = np.asarray(times, dtype=float)
    sel = times >= times[-1] - span
    if sel.sum() < 2:
        sel = np.zeros(len(times), dtype=bool)
        sel[-2:] = True
    t = times[sel] - times[sel].mean()
    p = np.asarray(translations)[sel]
    denom = float(t @ t)
    if denom <= 0.0:
        return np.zeros(3)
    return (t[:, None] * (p - p.mean(axis=0))).sum(axis=0) / denom


def handoff_velocity(state: WindowState, cfg: OdometryConfig) -> np.ndarray:
    """Velocity for extending the trajectory: the local slope of the estimated
    trajectory at its live edge.

    Deliberately local: the extension must continue the estimate's own motion
    (including any not-yet-corrected tail error) so that no artificial
    velocity kink appears at the seam; the next windows re-optimise the tail
    and the kink-free seam keeps IMU and lidar terms consistent."""
    times = state.imu_times
    if len(times) < 2:
        return np.zeros(3)
    lo = max(len(times) - 4, 0)
    t = times[lo:] - times[lo:].mean()
    p = state.imu_trans[lo:]
    denom = float(t @ t)
    if denom <= 0.0:
        return np.zeros(3)
    v = (t[:, None] * (p - p.mean(axis=0))).sum(axis=0) / denom
    # slope refers to the midpoint of the fitted stretch; carry it to the end
    # with the raw IMU so curved motion hands off without lag
    t_mid = times[lo:].mean()
    im = int(np.clip(np.searchsorted(times, t_mid), 1, len(times) - 1))
    a_prev = state.imu_rot[im - 1] @ (state.imu_accel[im - 1] - state.bias.accel) + state.gravity
    v = v + a_prev * (times[im] - t_mid)
    for k in range(im, len(times) - 1):
        dt = times[k + 1] - times[k]
        a_w = state.imu_rot[k] @ (state.imu_accel[k] - state.bias.accel) + state.gravity
        v = v + a_w * dt
    return v


def init_new_imu_poses(state: WindowState, new_times, new_gyro, new_accel,
                       cfg: OdometryConfig) -> WindowState:
    """Extend the window's IMU-rate trajectory over new contiguous samples."""
    new_times = np.asarray(new_times, dtype=float)
    if len(new_times) == 0:
        return state
    K = len(state.imu_times)
    if K >= 2:
        v0 = handoff_velocity(state, cfg)
    else:
        v0 = np.zeros(3)
    seg_times = np.concatenate([[state.imu_times[-1]], new_times])
    seg_gyro = np.concatenate([[state.imu_gyro[-1]], np.asarray(new_gyro, dtype=float)])
    seg_accel = np.concatenate([[state.imu_accel[-1]], np.asarray(new_accel, dtype=float)])
    rots, trans, _ = integrate_imu_segment(
        state.imu_rot[-1], state.imu_trans[-1], v0, seg_times, seg_gyro, seg_accel,
        state.bias, state.gravity, cfg.max_imu_gap * cfg.imu_dt,
    )
    return replace(
        state,
        imu_times=np.concatenate([state.imu_times, new_times]),
        imu_rot=np.concatenate([state.imu_rot, rots]),
        imu_trans=np.concatenate([state.imu_trans, trans]),
        imu_gyro=np.concatenate([state.imu_gyro, new_gyro]),
        imu_accel=np.concatenate([state.imu_accel, new_accel]),
    )


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

def match_surfels(store: SurfelStore, k: int, time_sep_threshold: float,
                  lidar_sigma: float, normal_angle_max: float = 15.0) -> MatchSet:
    """Reciprocal k-nearest-neighbour matches in 7-D descriptor space.

    Same-resolution only; pairs must be separated in mean time and have
    consistent normals (the point-to-plane model assumes the pair samples one
    planar patch, so near-orthogonal pairs from corners are rejected); each
    unordered pair appears once. The match normal is the smallest-eigenvalue
    eigenvector of the summed covariances and the weight is
    1 / (sigma^2 + lambda_min).
    """
    S = len(store)
    if S < 2:
        return MatchSet.empty()
    desc = surfel.descriptor_matrix(store.position, store.normal, store.resolution)
    pairs = []
    for res in np.unique(store.resolution):
        idx = np.flatnonzero(store.resolution == res)
        if len(idx) < 2:
            continue
        d = desc[idx]
        kk = min(k + 1, len(idx))
        tree = cKDTree(d)
        _, nbr = tree.query(d, k=kk)
        nbr = nbr.reshape(len(idx), -1)
        neigh_sets = []
        for i in range(len(idx)):
            cand = [j for j in nbr[i] if j != i][:k]
            neigh_sets.append(set(cand))
        for i in range(len(idx)):
            for j in neigh_sets[i]:
                if j <= i:
                    continue
                if i in neigh_sets[j]:
                    pairs.append((idx[i], idx[j]))
    if not pairs:
        return MatchSet.empty()
    pairs = np.asarray(sorted(pairs), dtype=np.int64)
    dt = np.abs(store.mean_time[pairs[:, 0]] - store.mean_time[pairs[:, 1]])
    pairs = pairs[dt > time_sep_threshold]
    if len(pairs) == 0:
        return MatchSet.empty()
    cos_lim = np.cos(np.deg2rad(normal_angle_max))
    dots = np.abs(np.einsum("mi,mi->m", store.normal[pairs[:, 0]], store.normal[pairs[:, 1]]))
    pairs = pairs[dots >= cos_lim]
    if len(pairs) == 0:
        return MatchSet.empty()
    comb = store.covariance[pairs[:, 0]] + store.covariance[pairs[:, 1]]
    eigvals, eigvecs = np.linalg.eigh(comb)
    lam_min = np.maximum(eigvals[:, 0], 0.0)
    normals = eigvecs[:, :, 0]
    # deterministic sign
    flips = np.ones(len(normals))
    for axis in range(3):
        undecided = flips == 1.0
        col = normals[:, axis]
        flips[undecided & (col < -1e-12)] = -1.0
        flips[undecided & (col > 1e-12)] = 2.0
    normals *= np.where(flips == 2.0, 1.0, flips)[:, None]
    weight = 1.0 / (lidar_sigma**2 + lam_min)
    return MatchSet(pairs[:, 0], pairs[:, 1], weight, normals)


# --------------------------------------------------------------------------
# the correction solve
# --------------------------------------------------------------------------

class _Triplets:
    def __init__(self):
        self.data = []
        self.rows = []
        self.cols = []

    def add(self, data, rows, cols):
        self.data.append(np.asarray(data, dtype=float).ravel())
        self.rows.append(np.asarray(rows, dtype=np.int64).ravel())
        self.cols.append(np.asarray(cols, dtype=np.int64).ravel())

    def matrix(self, shape):
        if not self.data:
            return sp.csr_matrix(shape)
        return sp.coo_matrix(
            (np.concatenate(self.data), (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=shape,
        ).tocsr()


def _match_distances(store: SurfelStore, matches: MatchSet, x, sample_times):
    e, blocks = pose_costs.match_residuals_batch(
        store.position[matches.idx_a], store.position[matches.idx_b],
        matches.normal, matches.weight,
        store.mean_time[matches.idx_a], store.mean_time[matches.idx_b],
        x, sample_times,
    )
    return e, blocks


def _robust_cost(e_match, weight, cauchy_c, imu_residual_vec):
    cost = 0.0
    if len(e_match):
        d = e_match / np.sqrt(weight)
        cost += float(np.sum(0.5 * weight * cauchy_c**2 * np.log1p((d / cauchy_c) ** 2)))
    if imu_residual_vec is not None and len(imu_residual_vec):
        cost += 0.5 * float(imu_residual_vec @ imu_residual_vec)
    return cost


def _imu_residual_vector(state: WindowState, x, bias_vec, anchor, cfg: OdometryConfig):
    noise = cfg.noise()
    i0 = int(np.searchsorted(state.imu_times, state.window[0] - 1e-12))
    r_g, r_a, r_b, blocks = pose_costs.imu_residuals_batch(
        x, bias_vec, anchor, state.sample_times, state.imu_times[i0:],
        state.imu_rot[i0:], state.imu_trans[i0:], state.imu_gyro[i0:], state.imu_accel[i0:],
        state.gravity, cfg.imu_dt, noise,
    )
    wg = 1.0 / noise.sigma_gyro
    wa = 1.0 / noise.sigma_accel
    wb = np.concatenate([1.0 / noise.sigma_bias_gyro, 1.0 / noise.sigma_bias_accel])
    vec = np.concatenate([(r_g * wg).ravel(), (r_a * wa).ravel(), (r_b * wb).ravel()])
    return vec, blocks, (wg, wa, wb)


def solve_corrections(state: WindowState, matches: MatchSet, cfg: OdometryConfig,
                      include_imu: bool = True, bias_anchor=None) -> SolveResult:
    """Damped Gauss-Newton / IRLS solve for per-sample corrections + biases.

    The bias anchor defaults to the state's current bias; the pipeline pins it
    to the estimate carried over from the previous window.
    """
    n = len(state.sample_times)
    nv = 6 * n + 6
    if len(matches) == 0 and (not include_imu or len(state.imu_times) < 3):
        raise ValueError("nothing to solve: no matches and no usable IMU residuals")
    x = np.zeros((n, 6))
    bias_vec = state.bias.vector().copy()
    anchor = state.bias.vector().copy() if bias_anchor is None else np.asarray(bias_anchor, float).copy()
    c = cfg.cauchy_scale
    cost_history = []
    H_last = None

    def total_cost(xc, bc):
        e = np.zeros(0)
        if len(matches):
            e, _ = _match_distances(state.store, matches, xc, state.sample_times)
        ivec = None
        if include_imu:
            ivec, _, _ = _imu_residual_vector(state, xc, bc, anchor, cfg)
        return _robust_cost(e, matches.weight, c, ivec)

    cost = total_cost(x, bias_vec)
    cost_history.append(cost)
    for _ in range(cfg.gn_iters):
        trips = _Triplets()
        rhs = []
        row0 = 0
        if len(matches):
            e_m, blocks = _match_distances(state.store, matches, x, state.sample_times)
            d = e_m / np.sqrt(matches.weight)
            irls = 1.0 / (1.0 + (d / c) ** 2)
            sq = np.sqrt(irls)
            M = len(e_m)
            rows = np.arange(M)
            for idx, jac in blocks:
                scaled = jac * sq[:, None]
                trips.add(scaled, np.repeat(rows, 6), (6 * idx[:, None] + np.arange(6)).ravel())
            rhs.append(e_m * sq)
            row0 += M
        if include_imu:
            ivec, blocks, (wg, wa, wb) = _imu_residual_vector(state, x, bias_vec, anchor, cfg)
            K = (len(ivec) - 0) // 12  # 3 gyro + 3 accel + 6 bias per usable timestamp
            base_g, base_a, base_b = row0, row0 + 3 * K, row0 + 6 * K
            krange = np.arange(K)
            for idx, frac, J in blocks["gyro"]["rot"]:
                Jw = J * frac[:, None, None] * wg[None, :, None]
                rows = (base_g + 3 * krange)[:, None, None] + np.arange(3)[None, :, None]
                cols = (6 * idx)[:, None, None] + np.arange(3)[None, None, :]
                trips.add(Jw, np.broadcast_to(rows, Jw.shape), np.broadcast_to(cols, Jw.shape))
            Jb = blocks["gyro"]["bias_w"] * wg[None, :, None]
            rows = (base_g + 3 * krange)[:, None, None] + np.arange(3)[None, :, None]
            cols = np.broadcast_to(6 * n + np.arange(3)[None, None, :], Jb.shape)
            trips.add(Jb, np.broadcast_to(rows, Jb.shape), cols)

            for idx, frac, J in blocks["accel"]["rot"]:
                Jw = J * frac[:, None, None] * wa[None, :, None]
                rows = (base_a + 3 * krange)[:, None, None] + np.arange(3)[None, :, None]
                cols = (6 * idx)[:, None, None] + np.arange(3)[None, None, :]
                trips.add(Jw, np.broadcast_to(rows, Jw.shape), np.broadcast_to(cols, Jw.shape))
            for idx, frac, coef in blocks["accel"]["trans"]:
                data = (coef * frac)[:, None] * wa[None, :]  # (K,3) diagonal entries
                rows = (base_a + 3 * krange)[:, None] + np.arange(3)[None, :]
                cols = (6 * idx)[:, None] + 3 + np.arange(3)[None, :]
                trips.add(data, rows, cols)
            Jba = blocks["accel"]["bias_a"] * wa[None, :, None]
            rows = (base_a + 3 * krange)[:, None, None] + np.arange(3)[None, :, None]
            cols = np.broadcast_to(6 * n + 3 + np.arange(3)[None, None, :], Jba.shape)
            trips.add(Jba, np.broadcast_to(rows, Jba.shape), cols)

            data = np.tile(wb, K)
            rows = base_b + np.arange(6 * K)
            cols = np.tile(6 * n + np.arange(6), K)
            trips.add(data, rows, cols)
            rhs.append(ivec)
            row0 += 12 * K

        J = trips.matrix((row0, nv))
        r = np.concatenate(rhs)
        H = (J.T @ J).tocsc()
        g = J.T @ r
        H_last = H
        diag = H.diagonal()
        floor = max(1e-8 * diag.max(), 1e-12) if diag.max() > 0 else 1e-12
        damp = cfg.levenberg * np.maximum(diag, floor)
        try:
            lu = spla.splu(H + sp.diags(damp))
            step = lu.solve(-g)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"normal equations factorisation failed: {exc}")

        # trust region: corrections are small by construction, so huge steps
        # only ever point along near-null directions where the cost is flat
        step_x = step[: 6 * n].reshape(n, 6)
        rot_mag = np.abs(step_x[:, :3]).max() if n else 0.0
        trn_mag = np.abs(step_x[:, 3:]).max() if n else 0.0
        scale = min(1.0,
                    cfg.max_step_rot / rot_mag if rot_mag > cfg.max_step_rot else 1.0,
                    cfg.max_step_trans / trn_mag if trn_mag > cfg.max_step_trans else 1.0)
        step = step * scale

        beta = 1.0
        improved = False
        for _ in range(8):
            x_try = x + beta * step[: 6 * n].reshape(n, 6)
            b_try = bias_vec + beta * step[6 * n:]
            cost_try = total_cost(x_try, b_try)
            # accept only genuine decreases: along flat (degenerate)
            # directions the cost is unchanged and the step must be refused
            if cost_try < cost - 1e-12 * max(1.0, cost):
                x, bias_vec, cost = x_try, b_try, cost_try
                improved = True
                break
            beta *= 0.5
        cost_history.append(cost)
        if not improved:
            break

    report = _degeneracy_report(H_last, n, cfg) if H_last is not None else DegeneracyReport(False, np.inf, None)
    return SolveResult(x, bias_vec, report, cost_history)


def _degeneracy_report(H, n, cfg: OdometryConfig) -> DegeneracyReport:
    Hd = np.asarray(H.todense())
    nv = Hd.shape[0]
    # global window translation is an intrinsic gauge freedom; exclude it
    gauge = np.zeros((nv, 3))
    for k in range(3):
        gauge[3 + k: 6 * n: 6, k] = 1.0
    gauge /= np.linalg.norm(gauge, axis=0, keepdims=True)
    eigval, eigvec = np.linalg.eigh(Hd)
    max_eig = max(eigval[-1], 1e-30)
    thresh = cfg.degeneracy_rel_threshold * max_eig
    for i in range(nv):
        if eigval[i] >= thresh:
            break
        v = eigvec[:, i]
        v_ng = v - gauge @ (gauge.T @ v)
        if np.linalg.norm(v_ng) > 0.5:
            return DegeneracyReport(True, float(eigval[i]), v_ng / np.linalg.norm(v_ng))
    return DegeneracyReport(False, float(eigval[0]), None)


# --------------------------------------------------------------------------
# applying corrections and updating the trajectory
# --------------------------------------------------------------------------

def corrections_as_poses(x) -> list:
    return [CorrectionPose(row[:3].copy(), row[3:].copy()) for row in np.asarray(x)]


def apply_corrections(sample_poses, corrections) -> list:
    """Left-multiplicative rotation update, additive translation update."""
    x = np.asarray(corrections, dtype=float)
    out = []
    for pose, row in zip(sample_poses, x):
        out.append(Pose(exp_so3(row[:3]) @ pose.rotation, row[3:] + pose.translation))
    return out


def _orthonormalise_batch(Rs):
    U, _, Vt = np.linalg.svd(Rs)
    dets = np.linalg.det(U @ Vt)
    fix = np.where(dets < 0)[0]
    if len(fix):
        U[fix, :, -1] *= -1.0
    return U @ Vt


def sample_breve_poses(state: WindowState) -> list:
    """T-breve: trajectory estimate at sample times from the current IMU-rate
    poses (blend of the two closest IMU poses)."""
    R, t = interpolate_point_poses(
        np.clip(state.sample_times, state.imu_times[0], state.imu_times[-1]),
        state.imu_times, state.imu_rot, state.imu_trans,
    )
    return [Pose(R[i], t[i]) for i in range(len(state.sample_times))]


def update_imu_poses(state: WindowState, corrected_samples, breve_samples) -> WindowState:
    """Trajectory update through the ratio of two cumulative B-splines.

    T(t) <- T_hat_sp(t) * T_breve_sp(t)^-1 * T(t) at every IMU timestamp
    inside the spline support. Outside the support (the first and last sample
    interval plus the retained tail) the interpolated correction is applied
    directly, clamped to the sample span; this keeps a constant correction an
    exact rigid shift at every timestamp, which the held-ratio alternative
    does not.
    """
    if len(corrected_samples) < 4:
        raise ValueError("need at least 4 sample poses for the spline update")
    sp_hat = PoseSpline(state.sample_times, corrected_samples)
    sp_breve = PoseSpline(state.sample_times, breve_samples)
    lo, hi = sp_hat.support
    inside = (state.imu_times >= lo) & (state.imu_times <= hi)
    new_R = state.imu_rot.copy()
    new_t = state.imu_trans.copy()
    if np.any(inside):
        ts = state.imu_times[inside]
        Rh, th = sp_hat.eval_many(ts)
        Rb, tb = sp_breve.eval_many(ts)
        D_R = Rh @ np.swapaxes(Rb, -1, -2)
        D_t = th - np.einsum("kij,kj->ki", D_R, tb)
        new_R[inside] = D_R @ state.imu_rot[inside]
        new_t[inside] = np.einsum("kij,kj->ki", D_R, state.imu_trans[inside]) + D_t
    if np.any(~inside):
        # recover the per-sample corrections and interpolate them directly
        x = np.zeros((len(corrected_samples), 6))
        for i, (c, b) in enumerate(zip(corrected_samples, breve_samples)):
            x[i, :3] = log_so3_batch((c.rotation @ b.rotation.T)[None], validate=False)[0]
            x[i, 3:] = c.translation - b.translation
        ts = np.clip(state.imu_times[~inside], state.sample_times[0], state.sample_times[-1])
        rbar, tbar, _, _ = pose_costs.blend_corrections(x, state.sample_times, ts)
        new_R[~inside] = exp_so3_batch(rbar) @ state.imu_rot[~inside]
        new_t[~inside] = tbar + state.imu_trans[~inside]
    new_R = _orthonormalise_batch(new_R)
    return replace(state, imu_rot=new_R, imu_trans=new_t, sample_poses=list(corrected_samples))


def reproject_surfels(state: WindowState) -> WindowState:
    state.store.refit(state.imu_times, state.imu_rot, state.imu_trans)
    return state


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

@dataclass
class WindowLog:
    index: int
    t_start: float
    solve_ms: float
    n_surfels: int
    n_matches: int
    rss_bytes: int
    n_submaps: int
    degenerate: bool


class OdometryPipeline:
    """Streaming front end: feed IMU/lidar chunks, collect submaps.

    Deterministic and single-threaded. Finalised IMU-rate poses (those that
    have slid out of the window) are appended to `finalized_times/poses`.
    """

    def __init__(self, cfg: OdometryConfig, initial_rotation=None, initial_velocity=None):
        self.cfg = cfg
        self.noise = cfg.noise()
        self._imu_buf = []
        self._lidar_buf = []
        self.state: WindowState | None = None
        self._velocity = None if initial_velocity is None else np.asarray(initial_velocity, float)
        self._initial_rotation = initial_rotation
        self.finalized_times = []
        self.finalized_rot = []
        self.finalized_trans = []
        self._retired = [MapSurfels.empty()]
        self._next_submap = 0
        self._last_submap_base: Pose | None = None
        self._t0_data = None
        self.submaps = []
        self.logs = []
        self._window_index = 0
        self.bias = BiasState()

    # ------------------------------------------------------------- feeding

    def feed(self, imu_times, imu_gyro, imu_accel, lidar_times=None, lidar_points=None):
        """Append sensor chunks and run every window step that has data."""
        self._imu_buf.append((np.asarray(imu_times, float), np.asarray(imu_gyro, float),
                              np.asarray(imu_accel, float)))
        if lidar_times is not None and len(lidar_times):
            self._lidar_buf.append((np.asarray(lidar_times, float),
                                    np.asarray(lidar_points, float)))
        before = len(self.submaps)
        while self._try_step():
            pass
        return self.submaps[before:]

    def _buffered_imu(self):
        if not self._imu_buf:
            return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
        times = np.concatenate([b[0] for b in self._imu_buf])
        gyro = np.concatenate([b[1] for b in self._imu_buf])
        accel = np.concatenate([b[2] for b in self._imu_buf])
        return times, gyro, accel

    def _buffered_lidar(self):
        if not self._lidar_buf:
            return np.zeros(0), np.zeros((0, 3))
        times = np.concatenate([b[0] for b in self._lidar_buf])
        pts = np.concatenate([b[1] for b in self._lidar_buf])
        return times, pts

    def _try_step(self) -> bool:
        times, gyro, accel = self._buffered_imu()
        if len(times) == 0:
            return False
        if self.state is None:
            t_end = times[0] + self.cfg.window_length
            if times[-1] < t_end:
                return False
            self._bootstrap(times, gyro, accel)
            return True
        t_end_new = self.state.window[1] + self.cfg.slide
        if times[-1] < t_end_new:
            return False
        self._advance(times, gyro, accel, t_end_new)
        return True

    # ------------------------------------------------------------ stepping

    def _consume_imu(self, t_upto):
        times, gyro, accel = self._buffered_imu()
        take = times <= t_upto + 1e-12
        rest = ~take
        self._imu_buf = [(times[rest], gyro[rest], accel[rest])]
        return times[take], gyro[take], accel[take]

    def _consume_lidar(self, t_from, t_upto):
        times, pts = self._buffered_lidar()
        if len(times) == 0:
            return times, pts
        take = (times > t_from + 1e-12) & (times <= t_upto + 1e-12)
        keep = times > t_upto + 1e-12
        self._lidar_buf = [(times[keep], pts[keep])]
        return times[take], pts[take]

    def _bootstrap(self, times, gyro, accel):
        cfg = self.cfg
        self._t0_data = times[0]
        t_end = times[0] + cfg.window_length
        it, ig, ia = self._consume_imu(t_end)
        if self._initial_rotation is not None:
            R0 = np.asarray(self._initial_rotation, float)
        else:
            m = min(20, len(ia))
            R0 = gravity_aligned_rotation(ia[:m].mean(axis=0), cfg.gravity_mag)
        v0 = self._velocity if self._velocity is not None else np.zeros(3)
        rots, trans, _ = integrate_imu_segment(
            R0, np.zeros(3), v0, it, ig, ia, self.bias, cfg.gravity(),
            cfg.max_imu_gap * cfg.imu_dt,
        )
        imu_rot = np.concatenate([R0[None], rots])
        imu_trans = np.concatenate([np.zeros((1, 3)), trans])
        n = int(round(cfg.window_length * cfg.sample_rate)) + 1
        sample_times = times[0] + np.arange(n) / cfg.sample_rate
        state = WindowState(
            window=(float(times[0]), float(t_end)),
            imu_times=it, imu_rot=imu_rot, imu_trans=imu_trans,
            imu_gyro=ig, imu_accel=ia,
            sample_times=sample_times, sample_poses=[],
            store=SurfelStore(), bias=self.bias, gravity=cfg.gravity(),
        )
        self.state = state
        lt, lp = self._consume_lidar(-np.inf, t_end)
        self._ingest_lidar(lt, lp)
        self._optimise_window()

    def _advance(self, times, gyro, accel, t_end_new):
        cfg = self.cfg
        state = self.state
        t_start_new = t_end_new - cfg.window_length
        it, ig, ia = self._consume_imu(t_end_new)
        state = init_new_imu_poses(state, it, ig, ia, cfg)
        # keep an IMU tail of one slide behind the window: surfels retire by
        # mean time, so their oldest member points can be up to `slide` older
        keep_from = t_start_new - cfg.slide - 2.0 * cfg.imu_dt
        old = state.imu_times < keep_from
        if np.any(old):
            self.finalized_times.extend(state.imu_times[old].tolist())
            self.finalized_rot.extend(list(state.imu_rot[old]))
            self.finalized_trans.extend(list(state.imu_trans[old]))
            keep = ~old
            state = replace(
                state,
                imu_times=state.imu_times[keep], imu_rot=state.imu_rot[keep],
                imu_trans=state.imu_trans[keep], imu_gyro=state.imu_gyro[keep],
                imu_accel=state.imu_accel[keep],
            )
        self._retired.append(state.store.retire(t_start_new))
        n = int(round(cfg.window_length * cfg.sample_rate)) + 1
        sample_times = t_start_new + np.arange(n) / cfg.sample_rate
        state = replace(state, window=(float(t_start_new), float(t_end_new)),
                        sample_times=sample_times)
        self.state = state
        lt, lp = self._consume_lidar(state.imu_times[0], t_end_new)
        self._ingest_lidar(lt, lp)
        self._optimise_window()
        self._emit_submaps(keep_from)

    def _ingest_lidar(self, lidar_times, lidar_points):
        state = self.state
        if len(lidar_times) == 0:
            return
        ok = (lidar_times >= state.imu_times[0]) & (lidar_times <= state.imu_times[-1])
        lidar_times = lidar_times[ok]
        lidar_points = lidar_points[ok]
        if len(lidar_times) == 0:
            return
        # bound cluster time spans to one slide so member points never age
        # past the retained IMU tail (matters for the long bootstrap batch)
        span = lidar_times[-1] - lidar_times[0]
        if span > self.cfg.slide + 1e-9:
            edges = np.arange(lidar_times[0], lidar_times[-1] + self.cfg.slide,
                              self.cfg.slide)
            for lo, hi in zip(edges[:-1], edges[1:]):
                sel = (lidar_times >= lo) & (lidar_times < hi)
                if np.any(sel):
                    self._ingest_lidar_batch(lidar_times[sel], lidar_points[sel])
            return
        self._ingest_lidar_batch(lidar_times, lidar_points)

    def _ingest_lidar_batch(self, lidar_times, lidar_points):
        state = self.state
        R, t = interpolate_point_poses(lidar_times, state.imu_times, state.imu_rot,
                                       state.imu_trans)
        world = np.einsum("nij,nj->ni", R, lidar_points) + t
        cfg = self.cfg
        for res in cfg.resolutions:
            clusters = surfel.cluster_points(lidar_times, world, res,
                                             cfg.cluster_time_gap, cfg.min_cluster_size)
            if not clusters:
                continue
            pt_idx = np.concatenate(clusters)
            offsets = np.concatenate([[0], np.cumsum([len(c) for c in clusters])])
            means, covs, counts = surfel.segment_moments(world[pt_idx], offsets)
            eigvals, eigvecs = np.linalg.eigh(covs)
            eigvals = np.maximum(eigvals, 0.0)
            tr = eigvals.sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                planarity = np.where(
                    tr < 1e-15, 0.0,
                    np.clip(2.0 * (eigvals[:, 1] - eigvals[:, 0]) / np.where(tr < 1e-15, 1.0, tr), 0.0, 1.0),
                )
            accept = planarity >= cfg.planarity_threshold
            if not np.any(accept):
                continue
            acc_idx = np.flatnonzero(accept)
            mean_times = np.array([lidar_times[c].mean() for c in clusters])[acc_idx]
            normals = eigvecs[acc_idx][:, :, 0]
            _, sensor_pos = interpolate_point_poses(
                mean_times, state.imu_times, state.imu_rot, state.imu_trans)
            flip = np.einsum("si,si->s", normals, sensor_pos - means[acc_idx]) < 0.0
            normals[flip] *= -1.0
            sel_points = []
            sel_times = []
            new_offsets = [0]
            for ci in acc_idx:
                c = clusters[ci]
                sel_points.append(lidar_points[c])
                sel_times.append(lidar_times[c])
                new_offsets.append(new_offsets[-1] + len(c))
            state.store.append_batch(
                np.concatenate(sel_times), np.concatenate(sel_points),
                np.asarray(new_offsets), np.full(len(acc_idx), res),
                means[acc_idx], normals, covs[acc_idx], eigvals[acc_idx],
                mean_times, planarity[acc_idx],
            )

    def _optimise_window(self):
        cfg = self.cfg
        state = self.state
        t0 = time.perf_counter()
        n_matches = 0
        degenerate = False
        window_anchor = state.bias.vector().copy()
        for _ in range(cfg.outer_iters):
            breve = sample_breve_poses(state)
            matches = match_surfels(state.store, cfg.knn_k, cfg.time_sep_threshold,
                                    cfg.lidar_sigma, cfg.match_normal_angle_max)
            n_matches = len(matches)
            if n_matches == 0 and len(state.imu_times) < 3:
                break
            result = solve_corrections(state, matches, cfg, bias_anchor=window_anchor)
            degenerate = degenerate or result.report.degenerate
            corrected = apply_corrections(breve, result.corrections)
            state = update_imu_poses(state, corrected, breve)
            state = reproject_surfels(state)
            state.bias = BiasState(result.bias[:3].copy(), result.bias[3:].copy())
        self.bias = state.bias
        self.state = state
        solve_ms = (time.perf_counter() - t0) * 1e3
        try:
            import psutil

            rss = psutil.Process().memory_info().rss
        except Exception:
            rss = 0
        self.logs.append(WindowLog(self._window_index, state.window[0], solve_ms,
                                   len(state.store), n_matches, rss,
                                   len(self.submaps), degenerate))
        self._window_index += 1

    # ------------------------------------------------------------- submaps

    def _finalized_pose_at(self, t: float) -> Pose:
        times = np.asarray(self.finalized_times)
        idx = np.searchsorted(times, t)
        if idx == 0:
            i, j = 0, min(1, len(times) - 1)
        elif idx >= len(times):
            i, j = len(times) - 2, len(times) - 1
        else:
            i, j = idx - 1, idx
        ta, tb = times[i], times[j]
        alpha = 0.0 if tb == ta else np.clip((t - ta) / (tb - ta), 0.0, 1.0)
        from .geometry import blend_poses

        pa = Pose(self.finalized_rot[i], self.finalized_trans[i])
        pb = Pose(self.finalized_rot[j], self.finalized_trans[j])
        return blend_poses(pa, pb, float(alpha))

    def _emit_submaps(self, finalized_upto: float):
        cfg = self.cfg
        while True:
            s0 = self._t0_data + self._next_submap * cfg.submap_period
            s1 = s0 + cfg.submap_length
            if finalized_upto < s1 or not self.finalized_times:
                return
            self.submaps.append(self._build_submap(s0, s1))
            self._next_submap += 1

    def _build_submap(self, s0: float, s1: float) -> Submap:
        cfg = self.cfg
        base = self._finalized_pose_at(s0)
        retired = MapSurfels.concatenate(self._retired)
        in_interval = (retired.mean_times >= s0) & (retired.mean_times < s1)
        world = MapSurfels(
            retired.positions[in_interval], retired.normals[in_interval],
            retired.resolutions[in_interval], retired.planarities[in_interval],
            retired.mean_times[in_interval], retired.counts[in_interval],
        )
        local = world.transformed(base.inverse())
        up_local = base.rotation.T @ np.array([0.0, 0.0, 1.0])
        up_local = up_local / np.linalg.norm(up_local)
        seq = self._next_submap + 1
        odom_edge = None
        if self._last_submap_base is not None:
            rel = self._last_submap_base.inverse().compose(base)
            cov = np.diag([cfg.odom_edge_rot_sigma**2] * 3 + [cfg.odom_edge_trans_sigma**2] * 3)
            odom_edge = OdomEdgeMeasurement(rel, cov)
        self._last_submap_base = base
        # drop retired surfels that no future interval can need
        keep_from = s0 + cfg.submap_period
        pooled = MapSurfels.concatenate(self._retired)
        still = pooled.mean_times >= keep_from
        self._retired = [MapSurfels(pooled.positions[still], pooled.normals[still],
                                    pooled.resolutions[still], pooled.planarities[still],
                                    pooled.mean_times[still], pooled.counts[still])]
        return Submap(cfg.agent_id, seq, float(s0), cfg.submap_length, base, local,
                      up_local, odom_edge)

    # -------------------------------------------------------------- finish

    def finish(self):
        """Flush: finalise the trailing window and emit any complete submaps."""
        if self.state is None:
            return []
        state = self.state
        already = set(np.round(np.asarray(self.finalized_times), 9).tolist())
        for k, t in enumerate(state.imu_times):
            if round(float(t), 9) in already:
                continue
            self.finalized_times.append(float(t))
            self.finalized_rot.append(state.imu_rot[k])
            self.finalized_trans.append(state.imu_trans[k])
        self._retired.append(state.store.retire(np.inf))
        before = len(self.submaps)
        self._emit_submaps(self.finalized_times[-1] + 1e-9)
        return self.submaps[before:]

    def trajectory(self):
        """Finalised trajectory as (times (N,), list[Pose])."""
        times = np.asarray(self.finalized_times)
        poses = [Pose(R, t) for R, t in zip(self.finalized_rot, self.finalized_trans)]
        return times, poses

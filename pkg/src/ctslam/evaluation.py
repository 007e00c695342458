"""Trajectory and map accuracy metrics: timestamp association, relative pose
error over fixed path lengths (odometry drift), absolute pose error with
optional rigid alignment, point-map distance statistics, and outlier-robust
target registration (MSAC).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, log_so3


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    rmse: float
    std: float
    max: float
    count: int

    @staticmethod
    def from_values(values) -> "ErrorStats":
        v = np.asarray(values, dtype=float)
        if len(v) == 0:
            raise ValueError("no values to summarise")
        return ErrorStats(float(v.mean()), float(np.sqrt(np.mean(v**2))),
                          float(v.std()), float(v.max()), int(len(v)))


def associate(gt_times, est_times, max_dt: float):
    """Greedy nearest-timestamp pairing within max_dt; each pose used once.

    Returns index pairs (i_gt, j_est) sorted by gt time.
    """
    gt_times = np.asarray(gt_times, dtype=float)
    est_times = np.asarray(est_times, dtype=float)
    cands = []
    for j, t in enumerate(est_times):
        lo = int(np.searchsorted(gt_times, t - max_dt))
        hi = int(np.searchsorted(gt_times, t + max_dt, side="right"))
        for k in range(lo, hi):
            dt = abs(gt_times[k] - t)
            if dt <= max_dt:
                cands.append((dt, k, j))
    cands.sort()
    used_gt, used_est = set(), set()
    pairs = []
    for dt, i, j in cands:
        if i in used_gt or j in used_est:
            continue
        used_gt.add(i)
        used_est.add(j)
        pairs.append((i, j))
    if not pairs:
        raise ValueError("empty association: no timestamp pairs within max_dt")
    pairs.sort(key=lambda p: gt_times[p[0]])
    return pairs


def _path_lengths(positions) -> np.ndarray:
    steps = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass(frozen=True)
class RpeBucket:
    delta: float
    translation: ErrorStats
    rotation: ErrorStats
    drift_pct: float


def rpe(gt_poses, est_poses, deltas):
    """Relative pose error per path-length bucket.

    Pair selection: from each start index, the first index whose accumulated
    ground-truth path length reaches the bucket's delta. The error pose is
    (G_i^-1 G_j)^-1 (T_i^-1 T_j); translation stats are on its translation
    norm, rotation stats on its rotation angle. Buckets with no pairs are
    returned as None.
    """
    gt_pos = np.stack([p.translation for p in gt_poses])
    lengths = _path_lengths(gt_pos)
    out = {}
    for delta in deltas:
        errs_t = []
        errs_r = []
        j = 0
        for i in range(len(gt_poses)):
            target = lengths[i] + delta
            j = max(j, i)
            while j < len(gt_poses) and lengths[j] < target:
                j += 1
            if j >= len(gt_poses):
                break
            G = gt_poses[i].inverse().compose(gt_poses[j])
            T = est_poses[i].inverse().compose(est_poses[j])
            E = G.inverse().compose(T)
            errs_t.append(np.linalg.norm(E.translation))
            errs_r.append(np.linalg.norm(log_so3(E.rotation)))
        if not errs_t:
            out[delta] = None
            continue
        st = ErrorStats.from_values(errs_t)
        sr = ErrorStats.from_values(errs_r)
        out[delta] = RpeBucket(delta, st, sr, 100.0 * st.mean / delta)
    return out


def umeyama_alignment(source, target) -> Pose:
    """Closed-form rigid transform minimising ||target - (R source + t)||^2."""
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if len(X) < 3:
        raise ValueError("need at least 3 point pairs for rigid alignment")
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    H = (X - mx).T @ (Y - my)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return Pose(R, my - R @ mx)


def ape(gt_poses, est_poses, align: str = "none"):
    """Absolute pose error; align='rigid' applies closed-form SE(3) alignment
    of the estimate onto the ground truth first.

    Returns (translation stats, rotation stats, alignment Pose).
    """
    if align not in ("none", "rigid"):
        raise ValueError("align must be 'none' or 'rigid'")
    A = Pose.identity()
    if align == "rigid":
        A = umeyama_alignment(np.stack([p.translation for p in est_poses]),
                              np.stack([p.translation for p in gt_poses]))
    errs_t = []
    errs_r = []
    for g, e in zip(gt_poses, est_poses):
        ea = A.compose(e)
        errs_t.append(np.linalg.norm(g.translation - ea.translation))
        errs_r.append(np.linalg.norm(log_so3(g.rotation.T @ ea.rotation)))
    return ErrorStats.from_values(errs_t), ErrorStats.from_values(errs_r), A


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """One representative per occupied voxel: the member point nearest the
    voxel centroid (so downsampling a cloud returns actual cloud points and
    map_distance(A, A) is identically zero). Deterministic ordering."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        raise ValueError("empty cloud after voxelisation")
    idx = np.floor(pts / voxel).astype(np.int64)
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0]))
    idx = idx[order]
    pts = pts[order]
    breaks = np.any(idx[1:] != idx[:-1], axis=1)
    starts = np.concatenate([[0], np.flatnonzero(breaks) + 1])
    ends = np.concatenate([starts[1:], [len(pts)]])
    out = np.empty((len(starts), 3))
    for k, (s, e) in enumerate(zip(starts, ends)):
        centroid = pts[s:e].mean(axis=0)
        out[k] = pts[s + int(np.argmin(np.linalg.norm(pts[s:e] - centroid, axis=1)))]
    return out


def _fine_align(target, reference, iters: int = 20, tol: float = 1e-6):
    """Point-to-point ICP of target onto reference (rigid, no scale)."""
    tree = cKDTree(reference)
    R = np.eye(3)
    t = np.zeros(3)
    for _ in range(iters):
        moved = target @ R.T + t
        _, idx = tree.query(moved)
        A = umeyama_alignment(moved, reference[idx])
        R = A.rotation @ R
        t = A.rotation @ t + A.translation
        if np.linalg.norm(A.translation) + np.linalg.norm(log_so3(A.rotation)) < tol:
            break
    return Pose(R, t)


def map_distance(target, reference, voxel: float = 0.4, align: bool = True,
                 bin_width: float = 0.05, bin_max: float = 1.0):
    """Nearest-neighbour distances from the voxelised target cloud to the
    reference cloud, after optional fine rigid ICP alignment.

    Returns (ErrorStats, (bin_edges, counts)).
    """
    target = np.asarray(target, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if len(target) == 0 or len(reference) == 0:
        raise ValueError("empty cloud")
    tv = voxel_downsample(target, voxel)
    if align:
        A = _fine_align(tv, reference)
        tv = tv @ A.rotation.T + A.translation
    tree = cKDTree(reference)
    d, _ = tree.query(tv)
    stats = ErrorStats.from_values(d)
    edges = np.arange(0.0, bin_max + bin_width / 2, bin_width)
    counts, _ = np.histogram(d, bins=edges)
    return stats, (edges, counts)


def robust_target_align(mapped, surveyed, inlier_threshold: float = 0.2,
                        iterations: int = 200, seed: int = 0):
    """MSAC over 3-point rigid hypotheses with truncated squared loss.

    mapped/surveyed are row-corresponding 3D points. Returns
    (Pose aligning mapped onto surveyed, inlier index array, ErrorStats of
    inlier residuals after refit).
    """
    X = np.asarray(mapped, dtype=float)
    Y = np.asarray(surveyed, dtype=float)
    if len(X) != len(Y) or len(X) < 3:
        raise ValueError("need at least 3 corresponding targets")

    def collinear(P):
        return np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0])) < 1e-9

    if len(X) == 3 and collinear(X):
        raise ValueError("degenerate: targets are collinear")
    rng = np.random.default_rng(seed)
    tau2 = inlier_threshold**2
    best = None
    for _ in range(iterations):
        pick = rng.choice(len(X), size=3, replace=False)
        if collinear(X[pick]):
            continue
        try:
            A = umeyama_alignment(X[pick], Y[pick])
        except np.linalg.LinAlgError:
            continue
        r2 = np.sum((Y - (X @ A.rotation.T + A.translation)) ** 2, axis=1)
        score = float(np.minimum(r2, tau2).sum())
        if best is None or score < best[0]:
            best = (score, A)
    if best is None:
        raise ValueError("degenerate: no valid 3-point hypothesis found")
    A = best[1]
    for _ in range(2):
        r2 = np.sum((Y - (X @ A.rotation.T + A.translation)) ** 2, axis=1)
        inliers = np.flatnonzero(r2 < tau2)
        if len(inliers) < 3 or collinear(X[inliers[:3]]) and len(inliers) == 3:
            raise ValueError("degenerate: inlier set too small or collinear")
        A = umeyama_alignment(X[inliers], Y[inliers])
    r = np.linalg.norm(Y[inliers] - (X[inliers] @ A.rotation.T + A.translation), axis=1)
    return A, inliers, ErrorStats.from_values(r)

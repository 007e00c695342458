import numpy as np
import pytest

from ctslam.evaluation import (
    ErrorStats,
    ape,
    associate,
    map_distance,
    robust_target_align,
    rpe,
    umeyama_alignment,
    voxel_downsample,
)
from ctslam.geometry import Pose, exp_so3, log_so3


def make_trajectory(n=100, step=0.5):
    poses = []
    for k in range(n):
        yaw = 0.01 * k
        pos = np.array([step * k, 2.0 * np.sin(0.05 * k), 0.3 * np.sin(0.03 * k)])
        poses.append(Pose(exp_so3([0, 0, yaw]), pos))
    times = np.arange(n) * 0.1
    return times, poses


# ---------------------------------------------------------------- associate

def test_associate_identical_timestamps():
    t = np.arange(50) * 0.1
    pairs = associate(t, t, max_dt=0.01)
    assert pairs == [(i, i) for i in range(50)]


def test_associate_offset_beyond_max_dt():
    t = np.arange(10) * 1.0
    with pytest.raises(ValueError):
        associate(t, t + 100.0, max_dt=0.5)


def test_associate_each_est_used_once():
    gt = np.array([0.0, 1.0, 2.0])
    est = np.array([0.05, 0.06, 1.02])
    pairs = associate(gt, est, max_dt=0.5)
    est_used = [j for _, j in pairs]
    assert len(set(est_used)) == len(est_used)


def test_associate_matches_bruteforce_oracle():
    rng = np.random.default_rng(0)
    gt = np.sort(rng.uniform(0, 30, 200))
    est = np.sort(rng.uniform(0, 30, 180))
    max_dt = 0.2
    pairs = associate(gt, est, max_dt)

    # O(n^2) oracle: same greedy-by-distance policy
    cands = sorted(
        (abs(g - e), i, j) for i, g in enumerate(gt) for j, e in enumerate(est)
        if abs(g - e) <= max_dt
    )
    used_g, used_e = set(), set()
    oracle = []
    for d, i, j in cands:
        if i in used_g or j in used_e:
            continue
        used_g.add(i)
        used_e.add(j)
        oracle.append((i, j))
    oracle.sort(key=lambda p: gt[p[0]])
    assert pairs == oracle


# ---------------------------------------------------------------------- rpe

def test_rpe_zero_for_identical():
    _, poses = make_trajectory()
    out = rpe(poses, poses, deltas=[5.0, 10.0])
    for bucket in out.values():
        assert bucket.translation.max < 1e-12
        assert bucket.rotation.max < 1e-12


def test_rpe_invariant_under_global_transform():
    _, poses = make_trajectory()
    T = Pose.from_rotvec((0.2, -0.1, 0.5), (10.0, -3.0, 2.0))
    moved = [T.compose(p) for p in poses]
    out = rpe(poses, moved, deltas=[5.0])
    assert out[5.0].translation.max < 1e-9


def test_rpe_measures_injected_drift():
    # straight-line path with 1% per-meter drift along the motion direction
    poses = [Pose(np.eye(3), np.array([0.25 * k, 0.0, 0.0])) for k in range(400)]
    drifted = [Pose(p.rotation, p.translation * (1.0 + 0.01)) for p in poses]
    out = rpe(poses, drifted, deltas=[10.0])
    drift = out[10.0].drift_pct
    assert drift == pytest.approx(1.0, abs=0.1)


def test_rpe_empty_bucket():
    _, poses = make_trajectory(n=10, step=0.1)  # ~1 m total path
    out = rpe(poses, poses, deltas=[50.0])
    assert out[50.0] is None


# ---------------------------------------------------------------------- ape

def test_ape_zero_for_identical():
    _, poses = make_trajectory()
    st, sr, _ = ape(poses, poses, align="none")
    assert st.max < 1e-12 and sr.max < 1e-12


def test_ape_rigid_alignment_removes_global_transform():
    _, poses = make_trajectory()
    T = Pose.from_rotvec((0.0, 0.0, 0.8), (5.0, -2.0, 1.0))
    moved = [T.compose(p) for p in poses]
    st, sr, _ = ape(poses, moved, align="rigid")
    assert st.max < 1e-9
    assert sr.max < 1e-9
    st_raw, _, _ = ape(poses, moved, align="none")
    assert st_raw.mean > 1.0


def test_umeyama_matches_horn_quaternion_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        X = rng.normal(size=(20, 3)) * 4
        R_true = exp_so3(rng.normal(size=3))
        t_true = rng.normal(size=3) * 5
        Y = X @ R_true.T + t_true
        A = umeyama_alignment(X, Y)
        assert np.abs(A.rotation - R_true).max() < 1e-9
        assert np.abs(A.translation - t_true).max() < 1e-9

        # independent closed-form oracle: Horn's quaternion method
        mx, my = X.mean(axis=0), Y.mean(axis=0)
        S = (X - mx).T @ (Y - my)
        N = np.array([
            [S[0, 0] + S[1, 1] + S[2, 2], S[1, 2] - S[2, 1], S[2, 0] - S[0, 2], S[0, 1] - S[1, 0]],
            [S[1, 2] - S[2, 1], S[0, 0] - S[1, 1] - S[2, 2], S[0, 1] + S[1, 0], S[2, 0] + S[0, 2]],
            [S[2, 0] - S[0, 2], S[0, 1] + S[1, 0], -S[0, 0] + S[1, 1] - S[2, 2], S[1, 2] + S[2, 1]],
            [S[0, 1] - S[1, 0], S[2, 0] + S[0, 2], S[1, 2] + S[2, 1], -S[0, 0] - S[1, 1] + S[2, 2]],
        ])
        w, v = np.linalg.eigh(N)
        q = v[:, -1]  # w, x, y, z
        from ctslam.geometry import quat_to_rot

        R_horn = quat_to_rot(np.array([q[1], q[2], q[3], q[0]]))
        assert np.abs(A.rotation - R_horn).max() < 1e-9


def test_ape_needs_three_pairs_for_alignment():
    _, poses = make_trajectory(n=2)
    with pytest.raises(ValueError):
        ape(poses, poses, align="rigid")


# ------------------------------------------------------------- map distance

def test_map_distance_self_is_zero():
    rng = np.random.default_rng(2)
    cloud = rng.uniform(-5, 5, (2000, 3))
    stats, _ = map_distance(cloud, cloud, voxel=0.4, align=False)
    assert stats.max < 1e-9


def test_map_distance_shift_no_alignment():
    rng = np.random.default_rng(3)
    cloud = rng.uniform(-5, 5, (3000, 3))
    shifted = cloud + np.array([0.05, 0.0, 0.0])
    stats, _ = map_distance(shifted, cloud, voxel=0.2, align=False)
    # voxel centroids of a dense uniform cloud sit ~0.05 from their shifted twins
    assert stats.mean == pytest.approx(0.05, abs=0.02)


def test_map_distance_matches_bruteforce_oracle():
    rng = np.random.default_rng(4)
    target = rng.uniform(-2, 2, (400, 3))
    reference = rng.uniform(-2, 2, (300, 3))
    stats, (edges, counts) = map_distance(target, reference, voxel=0.3, align=False)

    tv = voxel_downsample(target, 0.3)
    d_oracle = np.array([np.linalg.norm(reference - p, axis=1).min() for p in tv])
    oracle = ErrorStats.from_values(d_oracle)
    assert stats.mean == pytest.approx(oracle.mean, abs=1e-9)
    assert stats.rmse == pytest.approx(oracle.rmse, abs=1e-9)
    assert stats.max == pytest.approx(oracle.max, abs=1e-9)
    assert counts.sum() == np.count_nonzero(d_oracle < 1.0)


def test_map_distance_alignment_recovers_small_offset():
    rng = np.random.default_rng(5)
    # structured cloud (box shell) so ICP has gradients
    from tests.test_pose_graph import box_map

    reference = box_map(rng, n=4000, size=6.0).positions
    target = reference @ exp_so3([0.0, 0.0, 0.02]).T + np.array([0.05, -0.03, 0.01])
    stats, _ = map_distance(target, reference, voxel=0.3, align=True)
    assert stats.mean < 0.02


# ------------------------------------------------------------ target MSAC

def test_msac_exact_correspondences():
    rng = np.random.default_rng(6)
    X = rng.uniform(-10, 10, (20, 3))
    T = Pose.from_rotvec((0.1, -0.2, 0.3), (4.0, 1.0, -2.0))
    Y = X @ T.rotation.T + T.translation
    A, inliers, stats = robust_target_align(X, Y, inlier_threshold=0.1, seed=0)
    assert len(inliers) == 20
    assert stats.rmse < 1e-9


def test_msac_with_gross_outliers():
    rng = np.random.default_rng(7)
    X = rng.uniform(-10, 10, (20, 3))
    T = Pose.from_rotvec((0.0, 0.0, 0.4), (2.0, -1.0, 0.5))
    sigma = 0.02
    Y = X @ T.rotation.T + T.translation + rng.normal(scale=sigma, size=(20, 3))
    out_idx = rng.choice(20, size=6, replace=False)  # 30% gross outliers
    Y[out_idx] += rng.uniform(5, 10, (6, 3))
    A, inliers, stats = robust_target_align(X, Y, inlier_threshold=0.2, seed=1)
    assert set(inliers).isdisjoint(set(out_idx))
    assert stats.rmse < 2.0 * sigma * np.sqrt(3)


def test_msac_collinear_is_degenerate():
    X = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    with pytest.raises(ValueError):
        robust_target_align(X, X.copy(), inlier_threshold=0.1)

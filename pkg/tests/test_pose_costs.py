import numpy as np
import pytest

from ctslam.geometry import GRAVITY_MAG, exp_so3, exp_so3_batch, log_so3
from ctslam.pose_costs import (
    ImuNoise,
    accel_hat,
    imu_residuals,
    interp_correction,
    match_residuals_batch,
    omega_hat,
    surfel_match_residual,
)

GRAV = np.array([0.0, 0.0, -GRAVITY_MAG])


def sample_grid(n=5, dt=0.1):
    return np.arange(n) * dt


def pack(x, biases):
    return np.concatenate([np.asarray(x, float).ravel(), np.asarray(biases, float)])


def unpack(z, n):
    return z[: 6 * n].reshape(n, 6), z[6 * n :]


def dense_jacobian(res, n):
    """Assemble a Residual's blocks into a dense (m, 6n+6) matrix."""
    m = len(res.value)
    J = np.zeros((m, 6 * n + 6))
    for key, block in res.jacobians.items():
        if key == "bias":
            J[:, 6 * n :] += block
        else:
            _, i = key
            J[:, 6 * i : 6 * i + 6] += block
    return J


def fd_jacobian(fun, z, eps=1e-7):
    f0 = fun(z)
    J = np.zeros((len(f0), len(z)))
    for i in range(len(z)):
        zp = z.copy()
        zm = z.copy()
        zp[i] += eps
        zm[i] -= eps
        J[:, i] = (fun(zp) - fun(zm)) / (2 * eps)
    return J


def rel_err(A, B):
    denom = max(np.abs(A).max(), np.abs(B).max(), 1e-12)
    return np.abs(A - B).max() / denom


# -------------------------------------------------------- interp_correction

def test_interp_at_sample_time_returns_that_sample():
    times = sample_grid()
    rng = np.random.default_rng(0)
    x = rng.normal(scale=0.1, size=(5, 6))
    for i in range(5):
        c = interp_correction(x, times, times[i])
        assert np.allclose(c.rot_vec, x[i, :3], atol=1e-12)
        assert np.allclose(c.trans, x[i, 3:], atol=1e-12)


def test_interp_midpoint():
    times = sample_grid(2, 1.0)
    x = np.zeros((2, 6))
    x[0, 3:] = (1.0, 0.0, 0.0)
    x[1, 3:] = (0.0, 1.0, 0.0)
    c = interp_correction(x, times, 0.5)
    assert np.allclose(c.trans, (0.5, 0.5, 0.0))
    assert c.idx_a == 0 and c.idx_b == 1
    assert c.alpha == pytest.approx(0.5)


def test_interp_piecewise_linear_in_tau():
    times = sample_grid()
    rng = np.random.default_rng(1)
    x = rng.normal(scale=0.1, size=(5, 6))
    taus = np.array([0.12, 0.15, 0.18])  # colinear within one bracket
    vals = [np.concatenate([interp_correction(x, times, t).rot_vec,
                            interp_correction(x, times, t).trans]) for t in taus]
    second_diff = vals[0] - 2 * vals[1] + vals[2]
    assert np.abs(second_diff).max() < 1e-12


def test_interp_rejects_outside_span():
    times = sample_grid()
    with pytest.raises(ValueError):
        interp_correction(np.zeros((5, 6)), times, times[-1] + 0.5)


# ----------------------------------------------------- surfel match residual

def test_match_residual_zero_for_coincident():
    times = sample_grid()
    p = np.array([1.0, 2.0, 3.0])
    res = surfel_match_residual(p, p, (0.0, 0.0, 1.0), 25.0, 0.05, 0.35,
                                np.zeros((5, 6)), times)
    assert abs(res.value[0]) < 1e-15


def test_match_residual_offset_along_normal():
    times = sample_grid()
    n = np.array([0.0, 0.0, 1.0])
    p = np.array([1.0, 2.0, 3.0])
    w = 25.0
    d = 0.1
    res = surfel_match_residual(p, p + d * n, n, w, 0.05, 0.35, np.zeros((5, 6)), times)
    assert res.value[0] == pytest.approx(np.sqrt(w) * d)


def test_match_residual_swap_flips_sign():
    rng = np.random.default_rng(2)
    times = sample_grid()
    x = rng.normal(scale=0.05, size=(5, 6))
    pa, pb = rng.normal(size=3), rng.normal(size=3)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    r1 = surfel_match_residual(pa, pb, n, 9.0, 0.07, 0.31, x, times)
    r2 = surfel_match_residual(pb, pa, n, 9.0, 0.31, 0.07, x, times)
    assert r1.value[0] == pytest.approx(-r2.value[0])
    assert r1.value[0] ** 2 == pytest.approx(r2.value[0] ** 2)


def test_match_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    times = sample_grid()
    n_s = 5
    for _ in range(30):
        x = rng.normal(scale=0.1, size=(n_s, 6))
        pa, pb = rng.normal(size=3) * 2, rng.normal(size=3) * 2
        nrm = rng.normal(size=3)
        nrm /= np.linalg.norm(nrm)
        w = rng.uniform(1.0, 100.0)
        ta, tb = rng.uniform(0.0, 0.4, 2)

        def fun(z):
            xs, _ = unpack(z, n_s)
            r = surfel_match_residual(pa, pb, nrm, w, ta, tb, xs, times)
            return r.value

        z0 = pack(x, np.zeros(6))
        res = surfel_match_residual(pa, pb, nrm, w, ta, tb, x, times)
        J = dense_jacobian(res, n_s)
        assert rel_err(J, fd_jacobian(fun, z0)) < 1e-5


def test_match_batch_matches_scalar_path():
    rng = np.random.default_rng(4)
    times = sample_grid()
    M = 20
    x = rng.normal(scale=0.08, size=(5, 6))
    pa = rng.normal(size=(M, 3))
    pb = rng.normal(size=(M, 3))
    nrm = rng.normal(size=(M, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    w = rng.uniform(1, 50, M)
    ta = rng.uniform(0, 0.4, M)
    tb = rng.uniform(0, 0.4, M)
    e, _ = match_residuals_batch(pa, pb, nrm, w, ta, tb, x, times)
    for i in range(M):
        ri = surfel_match_residual(pa[i], pb[i], nrm[i], w[i], ta[i], tb[i], x, times)
        assert e[i] == pytest.approx(ri.value[0], abs=1e-12)


# ------------------------------------------------------------ IMU residuals

def make_const_rate_imu(dt, K, rate=(0.0, 0.0, 1.0)):
    """Exact poses for a constant body-rate pure rotation."""
    rate = np.asarray(rate, float)
    times = np.arange(K) * dt
    rots = exp_so3_batch(np.outer(times, rate))
    trans = np.zeros((K, 3))
    gyro = np.tile(rate, (K, 1))
    # stationary translation: accelerometer sees the gravity reaction
    accel = np.einsum("kij,j->ki", np.swapaxes(rots, -1, -2), -GRAV)
    return times, rots, trans, gyro, accel


def default_noise():
    return ImuNoise.from_scalars(1.0, 1.0, 1.0, 1.0)  # unit whitening for value checks


def test_gyro_residual_first_order_in_dt():
    # varying body rate: the Euler estimate is exact for constant rates, so a
    # quadratic rotation-vector trajectory is needed to expose the O(dt) term
    def rot_at(t):
        return exp_so3(np.array([0.3 * t + 0.4 * t**2, -0.2 * t, 0.5 * t + 0.3 * t**2]))

    def omega_true(t, h=1e-7):
        return log_so3(rot_at(t - h).T @ rot_at(t + h)) / (2 * h)

    t0 = 0.2
    errs = []
    for dt in (0.01, 0.005, 0.0025):
        times = t0 + np.arange(3) * dt
        rots = np.stack([rot_at(t) for t in times])
        trans = np.zeros((3, 3))
        gyro = np.stack([omega_true(t) for t in times])
        accel = np.einsum("kij,j->ki", np.swapaxes(rots, -1, -2), -GRAV)
        samples = np.linspace(times[0], times[-1], 4)
        g, a, b = imu_residuals(0, np.zeros((4, 6)), np.zeros(6), np.zeros(6),
                                samples, times, rots, trans, gyro, accel,
                                GRAV, dt, default_noise())
        errs.append(np.linalg.norm(g.value))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.15)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.15)


def test_gyro_residual_exact_for_constant_rate():
    dt = 0.01
    times, rots, trans, gyro, accel = make_const_rate_imu(dt, 3, (0.3, -0.2, 0.5))
    samples = np.linspace(times[0], times[-1], 4)
    g, _, _ = imu_residuals(0, np.zeros((4, 6)), np.zeros(6), np.zeros(6),
                            samples, times, rots, trans, gyro, accel,
                            GRAV, dt, default_noise())
    assert np.linalg.norm(g.value) < 1e-12


def test_accel_residual_stationary_equilibrium():
    dt = 0.01
    times, rots, trans, gyro, accel = make_const_rate_imu(dt, 3, (0.0, 0.0, 0.0))
    samples = np.linspace(0.0, times[-1], 4)
    g, a, b = imu_residuals(0, np.zeros((4, 6)), np.zeros(6), np.zeros(6),
                            samples, times, rots, trans, gyro, accel,
                            GRAV, dt, default_noise())
    assert np.linalg.norm(a.value) < 1e-9
    assert np.linalg.norm(g.value) < 1e-12


def test_bias_residual_zero_at_anchor():
    dt = 0.01
    times, rots, trans, gyro, accel = make_const_rate_imu(dt, 3)
    samples = np.linspace(0.0, times[-1], 4)
    anchor = np.array([0.01, -0.02, 0.005, 0.1, 0.0, -0.05])
    g, a, b = imu_residuals(0, np.zeros((4, 6)), anchor, anchor,
                            samples, times, rots, trans, gyro, accel,
                            GRAV, dt, default_noise())
    assert np.allclose(b.value, 0.0)


def test_imu_residual_skipped_at_window_tail():
    dt = 0.01
    times, rots, trans, gyro, accel = make_const_rate_imu(dt, 4)
    samples = np.linspace(0.0, times[-1], 4)
    with pytest.raises(ValueError):
        imu_residuals(2, np.zeros((4, 6)), np.zeros(6), np.zeros(6),
                      samples, times, rots, trans, gyro, accel, GRAV, dt, default_noise())


def test_imu_jacobians_match_finite_differences():
    rng = np.random.default_rng(5)
    dt = 0.01
    noise = ImuNoise.from_scalars(0.01, 0.05, 1e-4, 1e-3)
    n_s = 4
    for trial in range(30):
        K = 3
        times = np.arange(K) * dt + 0.013
        rots = exp_so3_batch(rng.normal(scale=0.5, size=(K, 3)))
        trans = rng.normal(size=(K, 3))
        gyro = rng.normal(scale=0.3, size=(K, 3))
        accel = rng.normal(scale=2.0, size=(K, 3))
        samples = np.linspace(0.0, 0.05, n_s)
        x0 = rng.normal(scale=0.1, size=(n_s, 6))
        b0 = rng.normal(scale=0.05, size=6)
        anchor = rng.normal(scale=0.05, size=6)

        def make_fun(which):
            def fun(z):
                xs, bs = unpack(z, n_s)
                out = imu_residuals(0, xs, bs, anchor, samples, times, rots,
                                    trans, gyro, accel, GRAV, dt, noise)
                return out[which].value
            return fun

        z0 = pack(x0, b0)
        out = imu_residuals(0, x0, b0, anchor, samples, times, rots, trans,
                            gyro, accel, GRAV, dt, noise)
        for which in range(3):
            J = dense_jacobian(out[which], n_s)
            Jfd = fd_jacobian(make_fun(which), z0)
            assert rel_err(J, Jfd) < 1e-5, f"family {which} trial {trial}"


def test_whitening_halves_cost_when_covariance_doubles():
    dt = 0.01
    rng = np.random.default_rng(6)
    times = np.arange(3) * dt
    rots = exp_so3_batch(rng.normal(scale=0.2, size=(3, 3)))
    trans = rng.normal(size=(3, 3))
    gyro = rng.normal(size=(3, 3))
    accel = rng.normal(size=(3, 3))
    samples = np.linspace(0.0, 0.03, 4)
    x = rng.normal(scale=0.05, size=(4, 6))

    def accel_cost(sigma_accel):
        noise = ImuNoise.from_scalars(0.01, sigma_accel, 1e-4, 1e-3)
        _, a, _ = imu_residuals(0, x, np.zeros(6), np.zeros(6), samples, times,
                                rots, trans, gyro, accel, GRAV, dt, noise)
        return float(a.value @ a.value)

    c1 = accel_cost(0.05)
    c2 = accel_cost(0.05 * np.sqrt(2.0))  # doubles the covariance
    assert c2 == pytest.approx(c1 / 2.0, rel=1e-12)


def test_euler_estimators_converge_first_order():
    # analytic trajectory with nonzero angular acceleration and jerk
    def pose_at(t):
        rv = np.array([0.3 * t + 0.2 * t**2, -0.1 * t, 0.25 * t**2])
        p = np.array([np.sin(t), t**2, 0.5 * t])
        return exp_so3(rv), p

    t0 = 0.4
    errs_w, errs_a = [], []
    for dt in (0.01, 0.005, 0.0025):
        Rs = np.stack([pose_at(t0 + i * dt)[0] for i in range(3)])
        ts = np.stack([pose_at(t0 + i * dt)[1] for i in range(3)])
        w_est = omega_hat(Rs[0][None], Rs[1][None], dt)[0]
        a_est = accel_hat(ts[0], ts[1], ts[2], dt)
        # analytic values at t0
        h = 1e-6
        Ra, _ = pose_at(t0)
        Rb, _ = pose_at(t0 + h)
        w_true = log_so3(Ra.T @ Rb) / h
        a_true = np.array([-np.sin(t0), 2.0, 0.0])
        errs_w.append(np.linalg.norm(w_est - w_true))
        errs_a.append(np.linalg.norm(a_est - a_true))
    assert errs_w[0] / errs_w[1] == pytest.approx(2.0, rel=0.2)
    assert errs_a[0] / errs_a[1] == pytest.approx(2.0, rel=0.2)

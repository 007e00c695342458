"""Residuals and analytic Jacobians for the sliding-window correction solve.

Decision variables are per-sample correction poses x_i = (r_i, p_i) stacked as
an (n, 6) array (axis-angle rotation first, translation second) plus a 6-vector
of gyro/accelerometer biases. Corrections at arbitrary times are linear blends
of the two bracketing sample corrections; the blend weights are chosen so that
the correction at a sample time equals that sample's correction exactly
(weight 1 - alpha on the earlier sample), which keeps the interpolant
continuous across samples.

Three residual families:
  * surfel match: scalar point-to-plane misalignment of a matched surfel pair
    after applying interpolated corrections, scaled by sqrt(match weight);
  * IMU: gyro and accelerometer residuals against Euler-method estimates of
    body rate and world acceleration from the corrected poses at consecutive
    IMU timestamps, plus a bias anchor;
  * all residuals are whitened by the inverse noise standard deviations.

Batched builders emit COO triplets for the sparse normal equations; the
per-item functions wrap them and are the reference used in the Jacobian
finite-difference tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    exp_so3_batch,
    hat_batch,
    inv_left_jacobian_so3_batch,
    left_jacobian_so3_batch,
    log_so3_batch,
)

ROT, TRN = slice(0, 3), slice(3, 6)


@dataclass(frozen=True)
class ImuNoise:
    """Per-axis noise standard deviations used for whitening."""

    sigma_gyro: np.ndarray
    sigma_accel: np.ndarray
    sigma_bias_gyro: np.ndarray
    sigma_bias_accel: np.ndarray

    @staticmethod
    def from_scalars(gyro=0.01, accel=0.05, bias_gyro=1e-4, bias_accel=1e-3):
        return ImuNoise(
            np.full(3, float(gyro)),
            np.full(3, float(accel)),
            np.full(3, float(bias_gyro)),
            np.full(3, float(bias_accel)),
        )


@dataclass(frozen=True)
class InterpolatedCorrection:
    rot_vec: np.ndarray
    trans: np.ndarray
    alpha: float
    idx_a: int
    idx_b: int


@dataclass
class Residual:
    """Residual vector with Jacobian blocks keyed by variable.

    Keys are ('sample', i) for the 6-dof correction of sample i, or 'bias'
    for the stacked 6-dof bias vector. Blocks have shape (len(value), 6).
    """

    value: np.ndarray
    jacobians: dict = field(default_factory=dict)
    robust_weight: float = 1.0

    def add_block(self, key, block):
        if key in self.jacobians:
            self.jacobians[key] = self.jacobians[key] + block
        else:
            self.jacobians[key] = block


def bracket_samples(sample_times, taus):
    """Bracketing sample index a (b = a + 1) and blend fraction for times."""
    sample_times = np.asarray(sample_times, dtype=float)
    taus = np.asarray(taus, dtype=float)
    span = sample_times[-1] - sample_times[0]
    slack = 1e-9 * max(1.0, span)
    if np.any(taus < sample_times[0] - slack) or np.any(taus > sample_times[-1] + slack):
        raise ValueError("time outside the sample-time span")
    a = np.clip(np.searchsorted(sample_times, taus, side="right") - 1, 0, len(sample_times) - 2)
    alpha = (taus - sample_times[a]) / (sample_times[a + 1] - sample_times[a])
    return a, np.clip(alpha, 0.0, 1.0)


def blend_corrections(x, sample_times, taus):
    """Interpolated corrections at times: (rbar (K,3), tbar (K,3), a, alpha)."""
    x = np.asarray(x, dtype=float)
    a, alpha = bracket_samples(sample_times, taus)
    wa = (1.0 - alpha)[:, None]
    wb = alpha[:, None]
    rbar = wa * x[a, ROT] + wb * x[a + 1, ROT]
    tbar = wa * x[a, TRN] + wb * x[a + 1, TRN]
    return rbar, tbar, a, alpha


def interp_correction(corrections, sample_times, tau: float) -> InterpolatedCorrection:
    """Correction pose at an arbitrary time inside the sample span."""
    rbar, tbar, a, alpha = blend_corrections(corrections, sample_times, np.array([float(tau)]))
    return InterpolatedCorrection(rbar[0], tbar[0], float(alpha[0]), int(a[0]), int(a[0]) + 1)


# --------------------------------------------------------------------------
# surfel match residual
# --------------------------------------------------------------------------

def match_residuals_batch(pos_a, pos_b, normal, weight, time_a, time_b, x, sample_times):
    """Whitened point-to-plane residuals for matched surfel pairs.

    Returns (e (M,), blocks) where blocks is a list of
    (sample_idx (M,), jac (M,6)) contributions to scatter-add.
    """
    x = np.asarray(x, dtype=float)
    pos_a = np.asarray(pos_a, dtype=float)
    pos_b = np.asarray(pos_b, dtype=float)
    normal = np.asarray(normal, dtype=float)
    weight = np.asarray(weight, dtype=float)
    sw = np.sqrt(weight)

    out_blocks = []
    q = []
    for pos, times in ((pos_a, time_a), (pos_b, time_b)):
        rbar, tbar, a, alpha = blend_corrections(x, sample_times, times)
        Rbar = exp_so3_batch(rbar)
        qi = np.einsum("mij,mj->mi", Rbar, pos) + tbar
        q.append(qi)
        # d(Rbar p)/d rbar = -Rbar hat(p) J_r(rbar); J_r(r) = J_l(-r)
        Jr = left_jacobian_so3_batch(-rbar)
        dq_dr = -(Rbar @ hat_batch(pos) @ Jr)
        out_blocks.append((a, alpha, dq_dr))
    d = np.einsum("mi,mi->m", normal, q[1] - q[0])
    e = sw * d

    blocks = []
    for side, (a, alpha, dq_dr) in enumerate(out_blocks):
        sign = 1.0 if side == 1 else -1.0
        grad_r = sign * np.einsum("mi,mij->mj", normal, dq_dr)  # dd/drbar
        grad_t = sign * normal                                   # dd/dtbar
        row = np.concatenate([grad_r, grad_t], axis=1) * sw[:, None]  # (M,6)
        blocks.append((a, row * (1.0 - alpha)[:, None]))
        blocks.append((a + 1, row * alpha[:, None]))
    return e, blocks


def surfel_match_residual(pos_s, pos_sp, normal, weight, time_s, time_sp,
                          corrections, sample_times) -> Residual:
    """Scalar match residual with per-sample Jacobian blocks."""
    e, blocks = match_residuals_batch(
        np.asarray(pos_s, float)[None], np.asarray(pos_sp, float)[None],
        np.asarray(normal, float)[None], np.array([float(weight)]),
        np.array([float(time_s)]), np.array([float(time_sp)]),
        corrections, sample_times,
    )
    res = Residual(value=e)
    for idx, jac in blocks:
        res.add_block(("sample", int(idx[0])), jac)
    return res


# --------------------------------------------------------------------------
# IMU residuals
# --------------------------------------------------------------------------

def corrected_poses(x, sample_times, taus, rotations, translations):
    """Apply interpolated corrections: Rtilde = exp(rbar^) Rhat, ttilde = tbar + that."""
    rbar, tbar, a, alpha = blend_corrections(x, sample_times, taus)
    Rt = exp_so3_batch(rbar) @ rotations
    tt = tbar + translations
    return Rt, tt, rbar, a, alpha


def omega_hat(R_tau, R_tau1, dt):
    """Euler estimate of body angular velocity from two consecutive rotations."""
    return log_so3_batch(np.swapaxes(R_tau, -1, -2) @ R_tau1) / dt


def accel_hat(t_tau, t_tau1, t_tau2, dt):
    """Euler (second-difference) estimate of world acceleration."""
    return (t_tau2 - 2.0 * t_tau1 + t_tau) / (dt * dt)


def imu_residuals_batch(x, biases, bias_anchor, sample_times, imu_times,
                        rotations, translations, gyro_meas, accel_meas,
                        gravity, dt, noise: ImuNoise):
    """Whitened gyro/accel/bias residuals over all usable IMU timestamps.

    The last two timestamps lack successors and contribute no gyro/accel
    residuals (bias anchors are emitted once per usable timestamp, matching
    the per-measurement cost decomposition).

    Returns (r_gyro (K,3), r_accel (K,3), r_bias (K,6), blocks) where blocks
    is a dict of scatter lists; see build callers.
    """
    imu_times = np.asarray(imu_times, dtype=float)
    K = len(imu_times) - 2
    if K <= 0:
        raise ValueError("need at least 3 IMU samples in the window")
    b_w = np.asarray(biases, dtype=float)[:3]
    b_a = np.asarray(biases, dtype=float)[3:]

    taus = imu_times[:K]
    R0, t0, rbar0, a0, al0 = corrected_poses(x, sample_times, taus, rotations[:K], translations[:K])
    R1, t1, rbar1, a1, al1 = corrected_poses(x, sample_times, imu_times[1 : K + 1],
                                             rotations[1 : K + 1], translations[1 : K + 1])
    _, t2, _, a2, al2 = corrected_poses(x, sample_times, imu_times[2 : K + 2],
                                        rotations[2 : K + 2], translations[2 : K + 2])

    M = np.swapaxes(R0, -1, -2) @ R1
    phi = log_so3_batch(M)
    w_hat = phi / dt
    r_gyro = gyro_meas[:K] - w_hat - b_w

    v = accel_meas[1 : K + 1] - b_a
    Rv = np.einsum("kij,kj->ki", R1, v)
    a_hat = accel_hat(t0, t1, t2, dt)
    r_accel = Rv - a_hat + np.asarray(gravity, dtype=float)

    r_bias = np.concatenate([np.tile(b_w - bias_anchor[:3], (K, 1)),
                             np.tile(b_a - bias_anchor[3:], (K, 1))], axis=1)

    # Jacobian pieces (unwhitened)
    Jl_inv_phi = inv_left_jacobian_so3_batch(phi)
    P = Jl_inv_phi @ np.swapaxes(R0, -1, -2)  # common prefactor
    dg_drbar0 = (P @ left_jacobian_so3_batch(rbar0)) / dt          # (K,3,3)
    dg_drbar1 = -(P @ left_jacobian_so3_batch(rbar1)) / dt
    da_drbar1 = -hat_batch(Rv) @ left_jacobian_so3_batch(rbar1)

    blocks = {
        "gyro": {
            "rot": [(a0, (1 - al0), dg_drbar0), (a0 + 1, al0, dg_drbar0),
                    (a1, (1 - al1), dg_drbar1), (a1 + 1, al1, dg_drbar1)],
            "bias_w": -np.broadcast_to(np.eye(3), (K, 3, 3)),
        },
        "accel": {
            "rot": [(a1, (1 - al1), da_drbar1), (a1 + 1, al1, da_drbar1)],
            "trans": [(a0, (1 - al0), -1.0 / dt**2), (a0 + 1, al0, -1.0 / dt**2),
                      (a1, (1 - al1), 2.0 / dt**2), (a1 + 1, al1, 2.0 / dt**2),
                      (a2, (1 - al2), -1.0 / dt**2), (a2 + 1, al2, -1.0 / dt**2)],
            "bias_a": -R1,
        },
    }
    return r_gyro, r_accel, r_bias, blocks


def imu_residuals(k, x, biases, bias_anchor, sample_times, imu_times,
                  rotations, translations, gyro_meas, accel_meas,
                  gravity, dt, noise: ImuNoise):
    """Per-timestamp (gyro, accel, bias) residuals with Jacobian blocks.

    k indexes the IMU timestamp; k at either of the last two slots has no
    successors and raises. Residuals and Jacobians are whitened.
    """
    imu_times = np.asarray(imu_times, dtype=float)
    if k >= len(imu_times) - 2:
        raise ValueError("no two subsequent IMU samples; residual skipped at window tail")
    sl = slice(k, k + 3)
    r_g, r_a, r_b, blocks = imu_residuals_batch(
        x, biases, bias_anchor, sample_times, imu_times[sl], rotations[sl],
        translations[sl], gyro_meas[sl], accel_meas[sl], gravity, dt, noise,
    )
    wg = 1.0 / noise.sigma_gyro
    wa = 1.0 / noise.sigma_accel
    wb = np.concatenate([1.0 / noise.sigma_bias_gyro, 1.0 / noise.sigma_bias_accel])

    gyro = Residual(value=r_g[0] * wg)
    for idx, frac, J in blocks["gyro"]["rot"]:
        block = np.zeros((3, 6))
        block[:, :3] = (J[0] * frac[0]) * wg[:, None]
        gyro.add_block(("sample", int(idx[0])), block)
    bias_block = np.zeros((3, 6))
    bias_block[:, :3] = blocks["gyro"]["bias_w"][0] * wg[:, None]
    gyro.add_block("bias", bias_block)

    accel = Residual(value=r_a[0] * wa)
    for idx, frac, J in blocks["accel"]["rot"]:
        block = np.zeros((3, 6))
        block[:, :3] = (J[0] * frac[0]) * wa[:, None]
        accel.add_block(("sample", int(idx[0])), block)
    for idx, frac, coef in blocks["accel"]["trans"]:
        block = np.zeros((3, 6))
        block[:, 3:] = (coef * frac[0]) * np.eye(3) * wa[:, None]
        accel.add_block(("sample", int(idx[0])), block)
    bias_block = np.zeros((3, 6))
    bias_block[:, 3:] = blocks["accel"]["bias_a"][0] * wa[:, None]
    accel.add_block("bias", bias_block)

    bias = Residual(value=r_b[0] * wb)
    bias.add_block("bias", np.eye(6) * wb[:, None])
    return gyro, accel, bias

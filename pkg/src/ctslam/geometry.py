"""Rigid-body geometry kernel: SO(3) maps, pose algebra, interpolation
operators, and cumulative cubic B-spline pose curves.

Rotations are exchanged as 3x3 orthonormal matrices; tangent vectors are
axis-angle 3-vectors. All functions are pure and operate on float64 numpy
arrays; batched variants take a leading N axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Below this angle the closed-form Rodrigues coefficients lose precision and
# Taylor series are used instead.
_SMALL_ANGLE = 1e-8
# Orthonormality residual above which log_so3 refuses the input.
_ORTHO_TOL = 1e-6
# trace(R) must exceed -1 + this; rotations at the pi branch cut are rejected.
_PI_TRACE_GUARD = 1e-12

GRAVITY_MAG = 9.80665


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector: hat(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    """Inverse of hat for a skew-symmetric matrix."""
    S = np.asarray(S, dtype=float)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def hat_batch(V) -> np.ndarray:
    """(N,3) -> (N,3,3) skew matrices."""
    V = np.asarray(V, dtype=float)
    out = np.zeros(V.shape[:-1] + (3, 3))
    x, y, z = V[..., 0], V[..., 1], V[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def exp_so3(v) -> np.ndarray:
    """Rodrigues exponential: axis-angle 3-vector -> rotation matrix."""
    return exp_so3_batch(np.asarray(v, dtype=float)[None])[0]


def exp_so3_batch(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    theta = np.linalg.norm(V, axis=-1)
    theta2 = theta * theta
    small = theta < _SMALL_ANGLE
    # sin(t)/t and (1-cos(t))/t^2 with series fallback near zero
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    K = hat_batch(V)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def _check_orthonormal(R: np.ndarray, tol: float = _ORTHO_TOL) -> None:
    R = np.asarray(R)
    err = np.linalg.norm(R.T @ R - np.eye(3))
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (residual {err:.3e} > {tol:.1e})")
    if np.linalg.det(R) < 0.0:
        raise ValueError("matrix has negative determinant (not a rotation)")


def log_so3(R) -> np.ndarray:
    """Principal-branch logarithm of a rotation matrix as an axis-angle vector.

    Rejects non-orthonormal input and rotations at the pi branch cut
    (trace <= -1 + 1e-12); those never arise for correction-scale rotations
    and failing loudly beats silently picking a branch.
    """
    R = np.asarray(R, dtype=float)
    _check_orthonormal(R)
    tr = np.trace(R)
    if tr <= -1.0 + _PI_TRACE_GUARD:
        raise ValueError(f"rotation too close to pi (trace {tr:.12f}); log branch undefined")
    return log_so3_batch(R[None], validate=False)[0]


def log_so3_batch(Rs, validate: bool = True) -> np.ndarray:
    """Batched principal-branch log. Inputs must be valid rotations."""
    Rs = np.asarray(Rs, dtype=float)
    tr = np.trace(Rs, axis1=-2, axis2=-1)
    if validate and np.any(tr <= -1.0 + _PI_TRACE_GUARD):
        raise ValueError("rotation too close to pi; log branch undefined")
    c = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(c)
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(
            small,
            0.5 + theta * theta / 12.0,
            theta / (2.0 * np.sin(np.where(small, 1.0, theta))),
        )
    W = Rs - np.swapaxes(Rs, -1, -2)
    v = np.stack([W[..., 2, 1], W[..., 0, 2], W[..., 1, 0]], axis=-1)
    return factor[..., None] * v


def _ab_coeffs(theta: np.ndarray):
    """Coefficients for the SO(3) left Jacobian: J_l = I + a*K + b*K^2."""
    theta2 = theta * theta
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        t2s = np.where(small, 1.0, theta2)
        a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / t2s)
        b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - np.sin(theta)) / (t2s * np.where(small, 1.0, theta)))
    return a, b


def left_jacobian_so3(v) -> np.ndarray:
    return left_jacobian_so3_batch(np.asarray(v, dtype=float)[None])[0]


def left_jacobian_so3_batch(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    theta = np.linalg.norm(V, axis=-1)
    a, b = _ab_coeffs(theta)
    K = hat_batch(V)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def inv_left_jacobian_so3(v) -> np.ndarray:
    return inv_left_jacobian_so3_batch(np.asarray(v, dtype=float)[None])[0]


def inv_left_jacobian_so3_batch(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    theta = np.linalg.norm(V, axis=-1)
    theta2 = theta * theta
    small = theta < _SMALL_ANGLE
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(small, 1.0, theta)
        c = np.where(
            small,
            1.0 / 12.0 + theta2 / 720.0,
            1.0 / np.where(small, 1.0, theta2) - (1.0 + np.cos(theta)) / (2.0 * t * np.where(small, 1.0, np.sin(t))),
        )
    K = hat_batch(V)
    return np.eye(3) - 0.5 * K + c[..., None, None] * (K @ K)


def right_jacobian_so3(v) -> np.ndarray:
    return left_jacobian_so3(-np.asarray(v, dtype=float))


def right_jacobian_so3_batch(V) -> np.ndarray:
    return left_jacobian_so3_batch(-np.asarray(V, dtype=float))


def inv_right_jacobian_so3(v) -> np.ndarray:
    return inv_left_jacobian_so3(-np.asarray(v, dtype=float))


def inv_right_jacobian_so3_batch(V) -> np.ndarray:
    return inv_left_jacobian_so3_batch(-np.asarray(V, dtype=float))


def lin_interpolate(x, y, alpha: float) -> np.ndarray:
    """alpha * x + (1 - alpha) * y; alpha weights the FIRST argument."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return alpha * x + (1.0 - alpha) * y


def rot_interpolate(ra, rb, alpha: float) -> np.ndarray:
    """Linear axis-angle blend alpha * ra + (1 - alpha) * rb.

    Valid as a Slerp approximation only for small rotations; warns when
    either argument exceeds 0.5 rad.
    """
    ra = np.asarray(ra, dtype=float)
    rb = np.asarray(rb, dtype=float)
    na, nb = np.linalg.norm(ra), np.linalg.norm(rb)
    if max(na, nb) > 0.5:
        warnings.warn(
            f"rot_interpolate called with large rotation ({max(na, nb):.3f} rad > 0.5); "
            "linear blend is a poor Slerp approximation",
            stacklevel=2,
        )
    return lin_interpolate(ra, rb, alpha)


def project_to_so3(M) -> np.ndarray:
    """Nearest rotation matrix in Frobenius norm (via SVD)."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def rot_to_quat(R) -> np.ndarray:
    """Rotation matrix -> unit quaternion [qx, qy, qz, qw] (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        qw = (R[2, 1] - R[1, 2]) / s
        qx = 0.25 * s
        qy = (R[0, 1] + R[1, 0]) / s
        qz = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        qw = (R[0, 2] - R[2, 0]) / s
        qx = (R[0, 1] + R[1, 0]) / s
        qy = 0.25 * s
        qz = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        qw = (R[1, 0] - R[0, 1]) / s
        qx = (R[0, 2] + R[2, 0]) / s
        qy = (R[1, 2] + R[2, 1]) / s
        qz = 0.25 * s
    q = np.array([qx, qy, qz, qw])
    if q[3] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q) -> np.ndarray:
    """Unit quaternion [qx, qy, qz, qw] -> rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float)
    n = x * x + y * y + z * z + w * w
    s = 2.0 / n
    xx, yy, zz = x * x * s, y * y * s, z * z * s
    xy, xz, yz = x * y * s, x * z * s, y * z * s
    wx, wy, wz = w * x * s, w * y * s, w * z * s
    return np.array(
        [
            [1.0 - yy - zz, xy - wz, xz + wy],
            [xy + wz, 1.0 - xx - zz, yz - wx],
            [xz - wy, yz + wx, 1.0 - xx - yy],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose: rotation matrix plus translation. Immutable value."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.ascontiguousarray(np.asarray(self.rotation, dtype=float).reshape(3, 3))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=float).reshape(3))
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    @staticmethod
    def from_rotvec(rv, t=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(exp_so3(rv), np.asarray(t, dtype=float))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -(self.rotation.T @ self.translation))

    def transform(self, points) -> np.ndarray:
        """Apply to (3,) or (N,3) points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def rotvec(self) -> np.ndarray:
        return log_so3(self.rotation)

    def renormalised(self) -> "Pose":
        return Pose(project_to_so3(self.rotation), self.translation)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )


def pose_compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def blend_poses(pa: Pose, pb: Pose, frac: float) -> Pose:
    """Pose at `frac` of the way from pa to pb: geodesic rotation blend,
    linear translation blend. frac=0 -> pa, frac=1 -> pb."""
    d = log_so3(pa.rotation.T @ pb.rotation)
    R = pa.rotation @ exp_so3(frac * d)
    t = (1.0 - frac) * pa.translation + frac * pb.translation
    return Pose(R, t)


def se3_adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint of a pose on [rot; trans]-ordered tangent vectors."""
    A = np.zeros((6, 6))
    A[:3, :3] = p.rotation
    A[3:, 3:] = p.rotation
    A[3:, :3] = hat(p.translation) @ p.rotation
    return A


# Cumulative cubic B-spline basis (matrix form), and the standard basis.
# u in [0,1) inside a segment.

def _bspline_basis(u: np.ndarray):
    """Standard uniform cubic B-spline basis values b0..b3 at u, shape (...,4)."""
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    b0 = (1.0 - 3.0 * u + 3.0 * u2 - u3) / 6.0
    b1 = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0
    b2 = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0
    b3 = u3 / 6.0
    return np.stack([b0, b1, b2, b3], axis=-1)


def _bspline_cumulative_basis(u: np.ndarray):
    """Cumulative basis (B1..B3) at u: Bj = sum of standard basis k >= j."""
    u = np.asarray(u, dtype=float)
    u2 = u * u
    u3 = u2 * u
    c1 = (5.0 + 3.0 * u - 3.0 * u2 + u3) / 6.0
    c2 = (1.0 + 3.0 * u + 3.0 * u2 - 2.0 * u3) / 6.0
    c3 = u3 / 6.0
    return np.stack([c1, c2, c3], axis=-1)


class PoseSpline:
    """Approximating cumulative cubic B-spline through control poses on a
    uniform knot grid.

    Control poses sit at the knot times; the curve does not interpolate them
    (Spline-Fusion convention). Valid support is [knots[1], knots[n-2]].
    Translation uses the standard uniform cubic basis; rotation uses the
    cumulative form R_{i-1} * prod_j exp(Bj(u) * log(R_{j-1}^T R_j)).
    """

    def __init__(self, knot_times, control_poses):
        times = np.asarray(knot_times, dtype=float)
        if times.ndim != 1 or len(times) < 4:
            raise ValueError("need at least 4 control poses")
        if len(control_poses) != len(times):
            raise ValueError("knot_times and control_poses length mismatch")
        dts = np.diff(times)
        dt = dts.mean()
        if dt <= 0.0 or np.any(np.abs(dts - dt) > 1e-9 * max(1.0, abs(dt))):
            raise ValueError("knot spacing must be uniform")
        self.knot_times = times
        self.dt = dt
        if isinstance(control_poses[0], Pose):
            self.rotations = np.stack([p.rotation for p in control_poses])
            self.translations = np.stack([p.translation for p in control_poses])
        else:
            rot, trans = control_poses
            self.rotations = np.asarray(rot, dtype=float)
            self.translations = np.asarray(trans, dtype=float)
        # relative rotation increments between consecutive controls
        rel = np.swapaxes(self.rotations[:-1], -1, -2) @ self.rotations[1:]
        self.rel_rotvecs = log_so3_batch(rel)

    @property
    def support(self):
        return self.knot_times[1], self.knot_times[-2]

    def _locate(self, ts: np.ndarray):
        lo, hi = self.support
        slack = 1e-9 * max(1.0, self.dt)
        if np.any(ts < lo - slack) or np.any(ts > hi + slack):
            raise ValueError(f"time outside spline support [{lo}, {hi}]")
        seg = np.clip(
            np.searchsorted(self.knot_times, ts, side="right") - 1, 1, len(self.knot_times) - 3
        )
        u = (ts - self.knot_times[seg]) / self.dt
        return seg, np.clip(u, 0.0, 1.0)

    def eval_many(self, ts):
        """Evaluate at times (N,) -> rotations (N,3,3), translations (N,3)."""
        ts = np.asarray(ts, dtype=float)
        seg, u = self._locate(ts)
        b = _bspline_basis(u)
        idx = seg[:, None] + np.arange(-1, 3)[None, :]
        trans = np.einsum("nk,nkj->nj", b, self.translations[idx])
        c = _bspline_cumulative_basis(u)
        R = self.rotations[seg - 1]
        for j in range(3):
            inc = exp_so3_batch(c[:, j : j + 1] * self.rel_rotvecs[seg - 1 + j])
            R = R @ inc
        return R, trans

    def eval(self, t: float) -> Pose:
        R, trans = self.eval_many(np.array([t]))
        return Pose(R[0], trans[0])


def spline_eval(spline: PoseSpline, t: float) -> Pose:
    return spline.eval(t)

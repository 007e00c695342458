"""Deterministic synthetic sensor data with analytic ground truth.

Worlds are collections of bounded planar patches (walls, floors, boxes).
Trajectories are C2 analytic planar curves with exact velocity, acceleration
and body angular rate, so IMU measurements can be synthesised exactly and
lidar rays are cast from the true pose at each ray's emission time. Per-point
timestamps are what create motion distortion for the pipeline to undo.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import GRAVITY_MAG, Pose
from . import formats

GRAVITY_W = np.array([0.0, 0.0, -GRAVITY_MAG])

_MIN_RANGE = 0.05


# ------------------------------------------------------------------- worlds

@dataclass(frozen=True)
class PlanarPatch:
    """Bounded rectangle: center, unit normal, two in-plane half-axes."""

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self):
        if self.half_u <= 0.0 or self.half_v <= 0.0:
            raise ValueError("patch extents must be positive")


def _patch(center, normal, axis_u, half_u, half_v) -> PlanarPatch:
    center = np.asarray(center, dtype=float)
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    axis_u = np.asarray(axis_u, dtype=float)
    axis_u = axis_u / np.linalg.norm(axis_u)
    axis_v = np.cross(normal, axis_u)
    return PlanarPatch(center, normal, axis_u, axis_v, float(half_u), float(half_v))


class World:
    def __init__(self, patches):
        self.patches = list(patches)

    @staticmethod
    def box(center, size) -> list:
        """Six outward-facing patches of an axis-aligned box."""
        c = np.asarray(center, dtype=float)
        hx, hy, hz = np.asarray(size, dtype=float) / 2.0
        return [
            _patch(c + [hx, 0, 0], [1, 0, 0], [0, 1, 0], hy, hz),
            _patch(c - [hx, 0, 0], [-1, 0, 0], [0, 1, 0], hy, hz),
            _patch(c + [0, hy, 0], [0, 1, 0], [1, 0, 0], hx, hz),
            _patch(c - [0, hy, 0], [0, -1, 0], [1, 0, 0], hx, hz),
            _patch(c + [0, 0, hz], [0, 0, 1], [1, 0, 0], hx, hy),
            _patch(c - [0, 0, hz], [0, 0, -1], [1, 0, 0], hx, hy),
        ]


def _shell(center, size) -> list:
    """Inward-facing box shell (room walls, floor, ceiling)."""
    out = World.box(center, size)
    return [
        PlanarPatch(p.center, -p.normal, p.axis_u, -p.axis_v, p.half_u, p.half_v)
        for p in out
    ]


def make_scene(name: str) -> World:
    """Built-in worlds: room, corridor, tunnel (no end caps), loop."""
    if name == "room":
        return World(_shell((0.0, 0.0, 0.0), (10.0, 10.0, 3.0)))
    if name == "corridor":
        # spans x in [-3, 33]; a straight path 0..30 keeps 3 m from the caps
        return World(_shell((15.0, 0.0, 0.0), (36.0, 4.0, 3.0)))
    if name == "tunnel":
        shell = _shell((15.0, 0.0, 0.0), (36.0, 4.0, 3.0))
        # drop the end caps: degenerate along the axis
        return World([p for p in shell if abs(p.normal[0]) < 0.5])
    if name == "loop":
        patches = _shell((12.0, 0.0, 0.0), (34.0, 14.0, 3.0))
        patches += World.box((12.0, 0.0, 0.0), (16.0, 6.0, 3.0))
        return World(patches)
    raise ValueError(f"unknown scene {name!r} (expected room|corridor|tunnel|loop)")


# -------------------------------------------------------------- trajectories

def _rz_batch(yaw):
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.zeros(yaw.shape + (3, 3))
    R[..., 0, 0] = c
    R[..., 0, 1] = -s
    R[..., 1, 0] = s
    R[..., 1, 1] = c
    R[..., 2, 2] = 1.0
    return R


class Trajectory:
    """Base: planar C2 curve with yaw-following heading. Subclasses provide
    _xy(t) -> x, y, dx, dy, ddx, ddy, dddx-free yaw rate terms (vectorised)."""

    duration: float

    def _check(self, ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        if np.any(ts < -1e-9) or np.any(ts > self.duration + 1e-9):
            raise ValueError(f"time outside [0, {self.duration}]")
        return ts

    def states(self, ts):
        """Vectorised: rotations (N,3,3), positions, velocities, accelerations
        (world) and body angular rates (N,3)."""
        ts = self._check(ts)
        x, y, dx, dy, ddx, ddy, yaw, yaw_rate = self._xy(ts)
        p = np.stack([x, y, np.zeros_like(x)], axis=1)
        v = np.stack([dx, dy, np.zeros_like(dx)], axis=1)
        a = np.stack([ddx, ddy, np.zeros_like(ddx)], axis=1)
        R = _rz_batch(yaw)
        w = np.stack([np.zeros_like(yaw_rate), np.zeros_like(yaw_rate), yaw_rate], axis=1)
        return R, p, v, a, w

    def state(self, t: float):
        R, p, v, a, w = self.states(np.array([float(t)]))
        return Pose(R[0], p[0]), v[0], a[0], w[0]


class Line(Trajectory):
    """Straight run at constant speed (speed 0 = stationary)."""

    def __init__(self, speed=1.0, duration=10.0, start=(0.0, 0.0), heading=0.0):
        self.speed = float(speed)
        self.duration = float(duration)
        self.start = np.asarray(start, dtype=float)
        self.heading = float(heading)

    def _xy(self, ts):
        c, s = np.cos(self.heading), np.sin(self.heading)
        x = self.start[0] + self.speed * ts * c
        y = self.start[1] + self.speed * ts * s
        z = np.zeros_like(ts)
        return (x, y, self.speed * c + z, self.speed * s + z, z, z,
                np.full_like(ts, self.heading), z)


class Circle(Trajectory):
    def __init__(self, radius=5.0, speed=1.0, duration=30.0, center=(0.0, 0.0), ccw=True):
        self.radius = float(radius)
        self.speed = float(speed)
        self.duration = float(duration)
        self.center = np.asarray(center, dtype=float)
        self.sign = 1.0 if ccw else -1.0

    def _xy(self, ts):
        w = self.sign * self.speed / self.radius
        th = w * ts - self.sign * np.pi / 2.0  # start at bottom, heading +x
        x = self.center[0] + self.radius * np.cos(th)
        y = self.center[1] + self.radius * np.sin(th)
        dx = -self.radius * w * np.sin(th)
        dy = self.radius * w * np.cos(th)
        ddx = -self.radius * w * w * np.cos(th)
        ddy = -self.radius * w * w * np.sin(th)
        yaw = th + self.sign * np.pi / 2.0
        return x, y, dx, dy, ddx, ddy, yaw, np.full_like(ts, w)


class Ellipse(Trajectory):
    """Closed elliptic circuit; `speed` sets the average speed over a lap."""

    def __init__(self, a=10.0, b=5.0, speed=1.0, laps=1.0, center=(0.0, 0.0)):
        self.a, self.b = float(a), float(b)
        self.center = np.asarray(center, dtype=float)
        th = np.linspace(0.0, 2.0 * np.pi, 4096)
        seg = np.hypot(self.a * np.diff(np.cos(th)), self.b * np.diff(np.sin(th)))
        self.lap_length = float(seg.sum())
        self.period = self.lap_length / float(speed)
        self.duration = self.period * float(laps)

    def _xy(self, ts):
        w = 2.0 * np.pi / self.period
        th = w * ts
        x = self.center[0] + self.a * np.cos(th)
        y = self.center[1] + self.b * np.sin(th)
        dx = -self.a * w * np.sin(th)
        dy = self.b * w * np.cos(th)
        ddx = -self.a * w * w * np.cos(th)
        ddy = -self.b * w * w * np.sin(th)
        yaw = np.arctan2(dy, dx)
        v2 = dx * dx + dy * dy
        yaw_rate = (dx * ddy - dy * ddx) / v2
        yaw = np.unwrap(yaw) if len(np.atleast_1d(yaw)) > 1 else yaw
        return x, y, dx, dy, ddx, ddy, yaw, yaw_rate


class Weave(Trajectory):
    """Straight run with sinusoidal lateral sway: x = v t, y = A sin(2 pi x / L).
    Gives smooth yaw motion inside narrow scenes (corridors)."""

    def __init__(self, speed=1.0, duration=20.0, amplitude=1.0, wavelength=8.0,
                 start=(0.0, 0.0)):
        self.speed = float(speed)
        self.duration = float(duration)
        self.amplitude = float(amplitude)
        self.k = 2.0 * np.pi / float(wavelength)
        self.start = np.asarray(start, dtype=float)

    def _xy(self, ts):
        v, A, k = self.speed, self.amplitude, self.k
        x = self.start[0] + v * ts
        arg = k * (x - self.start[0])
        y = self.start[1] + A * np.sin(arg)
        dx = np.full_like(ts, v)
        dy = A * k * v * np.cos(arg)
        ddx = np.zeros_like(ts)
        ddy = -A * k * k * v * v * np.sin(arg)
        yaw = np.arctan2(dy, dx)
        v2 = dx * dx + dy * dy
        yaw_rate = (dx * ddy - dy * ddx) / v2
        return x, y, dx, dy, ddx, ddy, yaw, yaw_rate


class Figure8(Trajectory):
    """Gerono lemniscate; `speed` sets the average speed over one figure."""

    def __init__(self, scale=3.0, speed=1.0, laps=1.0, center=(0.0, 0.0)):
        self.scale = float(scale)
        self.center = np.asarray(center, dtype=float)
        th = np.linspace(0.0, 2.0 * np.pi, 8192)
        x = self.scale * np.sin(th)
        y = self.scale * np.sin(th) * np.cos(th)
        self.lap_length = float(np.hypot(np.diff(x), np.diff(y)).sum())
        self.period = self.lap_length / float(speed)
        self.duration = self.period * float(laps)

    def _xy(self, ts):
        w = 2.0 * np.pi / self.period
        th = w * ts
        A = self.scale
        x = self.center[0] + A * np.sin(th)
        y = self.center[1] + 0.5 * A * np.sin(2.0 * th)
        dx = A * w * np.cos(th)
        dy = A * w * np.cos(2.0 * th)
        ddx = -A * w * w * np.sin(th)
        ddy = -2.0 * A * w * w * np.sin(2.0 * th)
        yaw = np.arctan2(dy, dx)
        v2 = dx * dx + dy * dy
        yaw_rate = (dx * ddy - dy * ddx) / v2
        yaw = np.unwrap(yaw) if len(np.atleast_1d(yaw)) > 1 else yaw
        return x, y, dx, dy, ddx, ddy, yaw, yaw_rate


def _quintic(u):
    """Smoothstep 10u^3 - 15u^4 + 6u^5 with first/second derivatives."""
    s = 10 * u**3 - 15 * u**4 + 6 * u**5
    ds = 30 * u**2 - 60 * u**3 + 30 * u**4
    dds = 60 * u - 180 * u**2 + 120 * u**3
    return s, ds, dds


class Piecewise(Trajectory):
    """Waypoint path: quintic-blended straight legs with turn-in-place phases.

    The platform comes to rest at each waypoint (velocity and acceleration
    vanish at segment joins), which keeps the whole curve C2 despite heading
    changes.
    """

    def __init__(self, waypoints, speed=1.0, turn_rate=1.0):
        wps = [np.asarray(w, dtype=float) for w in waypoints]
        if len(wps) < 2:
            raise ValueError("need at least two waypoints")
        self.segments = []  # (t0, t1, kind, data)
        t = 0.0
        yaw = None
        for a, b in zip(wps[:-1], wps[1:]):
            leg = b - a
            length = float(np.linalg.norm(leg))
            if length < 1e-12:
                continue
            heading = float(np.arctan2(leg[1], leg[0]))
            if yaw is None:
                yaw = heading
            dyaw = (heading - yaw + np.pi) % (2.0 * np.pi) - np.pi
            if abs(dyaw) > 1e-12:
                T = max(abs(dyaw) / float(turn_rate), 0.5)
                self.segments.append((t, t + T, "turn", (a.copy(), yaw, dyaw)))
                t += T
                yaw = yaw + dyaw
            T = length / float(speed)
            self.segments.append((t, t + T, "move", (a.copy(), leg / length, length, yaw)))
            t += T
        self.duration = t

    def _xy(self, ts):
        n = len(ts)
        x = np.zeros(n)
        y = np.zeros(n)
        dx = np.zeros(n)
        dy = np.zeros(n)
        ddx = np.zeros(n)
        ddy = np.zeros(n)
        yaw = np.zeros(n)
        yaw_rate = np.zeros(n)
        starts = np.array([s[0] for s in self.segments])
        idx = np.clip(np.searchsorted(starts, ts, side="right") - 1, 0, len(self.segments) - 1)
        for k, (t0, t1, kind, data) in enumerate(self.segments):
            m = idx == k
            if not np.any(m):
                continue
            u = np.clip((ts[m] - t0) / (t1 - t0), 0.0, 1.0)
            s, ds, dds = _quintic(u)
            T = t1 - t0
            if kind == "move":
                origin, direction, length, hd = data
                x[m] = origin[0] + direction[0] * length * s
                y[m] = origin[1] + direction[1] * length * s
                dx[m] = direction[0] * length * ds / T
                dy[m] = direction[1] * length * ds / T
                ddx[m] = direction[0] * length * dds / T**2
                ddy[m] = direction[1] * length * dds / T**2
                yaw[m] = hd
            else:
                origin, yaw0, dyaw = data
                x[m] = origin[0]
                y[m] = origin[1]
                yaw[m] = yaw0 + dyaw * s
                yaw_rate[m] = dyaw * ds / T
        return x, y, dx, dy, ddx, ddy, yaw, yaw_rate


_TRAJECTORIES = {
    "line": Line,
    "circle": Circle,
    "ellipse": Ellipse,
    "figure8": Figure8,
    "weave": Weave,
    "piecewise": Piecewise,
}


def make_trajectory(kind: str, **kwargs) -> Trajectory:
    if kind not in _TRAJECTORIES:
        raise ValueError(f"unknown trajectory {kind!r}")
    return _TRAJECTORIES[kind](**kwargs)


def eval_trajectory(traj: Trajectory, t: float):
    """(Pose, world velocity, world acceleration, body angular velocity)."""
    return traj.state(t)


# ---------------------------------------------------------------------- IMU

def simulate_imu(traj: Trajectory, times, gyro_bias=(0, 0, 0), accel_bias=(0, 0, 0),
                 gyro_sigma=0.0, accel_sigma=0.0, rng=None):
    """Exact IMU measurements plus constant bias and seeded white noise.

    gyro = w_body + b_w + eps; accel = R^T (a_world - g) + b_a + eps.
    """
    times = np.asarray(times, dtype=float)
    R, _, _, a_w, w_b = traj.states(times)
    gyro = w_b + np.asarray(gyro_bias, dtype=float)
    accel = np.einsum("nji,nj->ni", R, a_w - GRAVITY_W) + np.asarray(accel_bias, dtype=float)
    if rng is not None and (gyro_sigma > 0.0 or accel_sigma > 0.0):
        gyro = gyro + rng.normal(scale=gyro_sigma, size=gyro.shape)
        accel = accel + rng.normal(scale=accel_sigma, size=accel.shape)
    return times, gyro, accel


# -------------------------------------------------------------------- lidar

@dataclass(frozen=True)
class LidarModel:
    kind: str = "flat"            # flat | spinning
    rate: float = 10.0            # scan revolutions per second
    rays_per_rev: int = 90        # azimuth steps per revolution
    beams: int = 9                # simultaneous elevation beams
    vfov_deg: float = 30.0
    spin_rate: float = 0.5        # Hz, spinning mount about body z
    tilt_deg: float = 45.0        # scanner inclination of the spinning mount
    max_range: float = 50.0
    sigma: float = 0.0            # range noise std (m)

    def __post_init__(self):
        if self.kind not in ("flat", "spinning"):
            raise ValueError(f"unknown lidar kind {self.kind!r}")


def _beam_directions(model: LidarModel, phis, spin_angles):
    """Body-frame unit directions for azimuth angles, (N, beams, 3)."""
    elev = np.deg2rad(np.linspace(-model.vfov_deg / 2.0, model.vfov_deg / 2.0, model.beams))
    ce, se = np.cos(elev), np.sin(elev)
    cp, sp = np.cos(phis), np.sin(phis)
    d = np.empty((len(phis), model.beams, 3))
    d[:, :, 0] = cp[:, None] * ce[None, :]
    d[:, :, 1] = sp[:, None] * ce[None, :]
    d[:, :, 2] = se[None, :]
    if model.kind == "spinning":
        tilt = np.deg2rad(model.tilt_deg)
        ct, st = np.cos(tilt), np.sin(tilt)
        Ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
        d = d @ Ry.T
        cs, ss = np.cos(spin_angles), np.sin(spin_angles)
        Rz = np.zeros((len(phis), 3, 3))
        Rz[:, 0, 0] = cs
        Rz[:, 0, 1] = -ss
        Rz[:, 1, 0] = ss
        Rz[:, 1, 1] = cs
        Rz[:, 2, 2] = 1.0
        d = np.einsum("nij,nbj->nbi", Rz, d)
    return d


def _cast_rays(world: World, origins, dirs, max_range):
    """Nearest patch intersection per ray; inf where nothing is hit."""
    n_rays = len(origins)
    best = np.full(n_rays, np.inf)
    for patch in world.patches:
        denom = dirs @ patch.normal
        facing = np.abs(denom) > 1e-12
        s = np.where(
            facing, ((patch.center - origins) @ patch.normal) / np.where(facing, denom, 1.0), np.inf
        )
        in_range = facing & (s > _MIN_RANGE) & (s <= max_range)
        q = origins + np.where(in_range, s, 0.0)[:, None] * dirs
        rel = q - patch.center
        ok = (
            in_range
            & (np.abs(rel @ patch.axis_u) <= patch.half_u)
            & (np.abs(rel @ patch.axis_v) <= patch.half_v)
        )
        best = np.where(ok & (s < best), s, best)
    return best


def simulate_lidar(world: World, traj: Trajectory, model: LidarModel, rng=None,
                   t0: float = 0.0, t1: float | None = None):
    """Per-ray exact intersections from the true pose at each emission time.

    Returns (times (N,), body-frame points (N,3)); misses are dropped. Range
    noise (sigma) is applied along the ray.
    """
    if t1 is None:
        t1 = traj.duration
    rev_period = 1.0 / model.rate
    n_revs = max(int(np.floor((t1 - t0) / rev_period)), 0)
    all_t = []
    all_p = []
    for rev in range(n_revs):
        rev_start = t0 + rev * rev_period
        step = rev_period / model.rays_per_rev
        t_fire = rev_start + np.arange(model.rays_per_rev) * step
        phis = 2.0 * np.pi * (np.arange(model.rays_per_rev) / model.rays_per_rev)
        spin = 2.0 * np.pi * model.spin_rate * t_fire
        d_body = _beam_directions(model, phis, spin)
        R, p, _, _, _ = traj.states(t_fire)
        d_world = np.einsum("nij,nbj->nbi", R, d_body)
        B = model.beams
        origins = np.repeat(p, B, axis=0)
        dirs = d_world.reshape(-1, 3)
        s = _cast_rays(world, origins, dirs, model.max_range)
        hit = np.isfinite(s)
        if not np.any(hit):
            continue
        s_hit = s[hit]
        if rng is not None and model.sigma > 0.0:
            s_hit = s_hit + rng.normal(scale=model.sigma, size=s_hit.shape)
        pts_body = d_body.reshape(-1, 3)[hit] * s_hit[:, None]
        all_t.append(np.repeat(t_fire, B)[hit])
        all_p.append(pts_body)
    if not all_t:
        return np.zeros(0), np.zeros((0, 3))
    return np.concatenate(all_t), np.concatenate(all_p)


# ------------------------------------------------------------------ dataset

def write_dataset(out_dir, traj: Trajectory, imu_data, lidar_data, meta=None) -> None:
    """Emit imu.csv, lidar.bin, gt.tum (poses at IMU timestamps), meta.json."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    times, gyro, accel = imu_data
    formats.write_imu_csv(os.path.join(out_dir, "imu.csv"), times, gyro, accel)
    lt, lp = lidar_data
    order = np.argsort(lt, kind="stable")
    formats.write_lidar_bin(os.path.join(out_dir, "lidar.bin"), lt[order], lp[order])
    R, p, _, _, _ = traj.states(times)
    poses = [Pose(R[i], p[i]) for i in range(len(times))]
    formats.write_tum(os.path.join(out_dir, "gt.tum"), times, poses)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta or {}, f, indent=1, sort_keys=True)
        f.write("\n")

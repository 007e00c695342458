"""Dataset file formats: IMU CSV, packed lidar point binary, TUM trajectories,
pose-graph JSON, and small CSV report helpers.

All parsers reject malformed input with the offending line or byte offset;
all writers round-trip losslessly (floats at 17 significant digits in text
formats; the lidar binary stores positions as float32 by contract).
"""

from __future__ import annotations

import json

import numpy as np

from .geometry import Pose, quat_to_rot, rot_to_quat

IMU_HEADER = "t,wx,wy,wz,ax,ay,az"

LIDAR_DTYPE = np.dtype([("t", "<f8"), ("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
LIDAR_RECORD_BYTES = LIDAR_DTYPE.itemsize  # 20


class FormatError(ValueError):
    """Malformed dataset file; message carries the location."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ------------------------------------------------------------------ IMU CSV

def write_imu_csv(path, times, gyro, accel) -> None:
    times = np.asarray(times, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    accel = np.asarray(accel, dtype=float)
    with open(path, "w") as f:
        f.write(IMU_HEADER + "\n")
        for t, w, a in zip(times, gyro, accel):
            f.write(
                f"{_fmt(t)},{_fmt(w[0])},{_fmt(w[1])},{_fmt(w[2])},"
                f"{_fmt(a[0])},{_fmt(a[1])},{_fmt(a[2])}\n"
            )


def read_imu_csv(path):
    """Returns (times (N,), gyro (N,3), accel (N,3)); times strictly increasing."""
    with open(path) as f:
        header = f.readline().strip()
        if header != IMU_HEADER:
            raise FormatError(f"{path}:1: bad IMU header {header!r}")
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise FormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not rows:
        return np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3))
    data = np.array(rows)
    times = data[:, 0]
    bad = np.flatnonzero(np.diff(times) <= 0.0)
    if len(bad):
        raise FormatError(f"{path}:{bad[0] + 3}: timestamps not strictly increasing")
    return times, data[:, 1:4], data[:, 4:7]


# ------------------------------------------------------------- lidar binary

def write_lidar_bin(path, times, points) -> None:
    times = np.asarray(times, dtype=np.float64)
    points = np.asarray(points, dtype=np.float32)
    rec = np.empty(len(times), dtype=LIDAR_DTYPE)
    rec["t"] = times
    rec["x"] = points[:, 0]
    rec["y"] = points[:, 1]
    rec["z"] = points[:, 2]
    rec.tofile(path)


def read_lidar_bin(path):
    """Returns (times (N,), points (N,3) float32-exact body-frame positions)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if len(raw) % LIDAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: truncated record ({len(raw)} bytes is not a multiple of {LIDAR_RECORD_BYTES})"
        )
    rec = raw.view(LIDAR_DTYPE)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return rec["t"].astype(np.float64), pts


def write_lidar_csv(path, times, points) -> None:
    times = np.asarray(times, dtype=float)
    points = np.asarray(points, dtype=np.float32)
    with open(path, "w") as f:
        f.write("t,x,y,z\n")
        for t, p in zip(times, points):
            f.write(f"{_fmt(t)},{_fmt(p[0])},{_fmt(p[1])},{_fmt(p[2])}\n")


def read_lidar_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != "t,x,y,z":
            raise FormatError(f"{path}:1: bad lidar CSV header {header!r}")
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not rows:
        return np.zeros(0), np.zeros((0, 3))
    data = np.array(rows)
    return data[:, 0], data[:, 1:4].astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------- TUM

def write_tum(path, times, poses) -> None:
    """`time tx ty tz qx qy qz qw`, one pose per line, quaternion w-last."""
    with open(path, "w") as f:
        for t, p in zip(times, poses):
            q = rot_to_quat(p.rotation)
            tx, ty, tz = p.translation
            f.write(
                f"{_fmt(t)} {_fmt(tx)} {_fmt(ty)} {_fmt(tz)} "
                f"{_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])}\n"
            )


def read_tum(path, quat_tol: float = 1e-6):
    """Returns (times (N,), list[Pose]); quaternions are normalised on read."""
    times = []
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            q = np.array(vals[4:8])
            nq = np.linalg.norm(q)
            if abs(nq - 1.0) > quat_tol:
                raise FormatError(f"{path}:{lineno}: non-unit quaternion (norm {nq:.8f})")
            times.append(vals[0])
            poses.append(Pose(quat_to_rot(q / nq), np.array(vals[1:4])))
    return np.array(times), poses


# -------------------------------------------------------------- pose graph

def pose_to_seven(p: Pose):
    q = rot_to_quat(p.rotation)
    return [*map(float, p.translation), *map(float, q)]


def seven_to_pose(v) -> Pose:
    v = np.asarray(v, dtype=float)
    q = v[3:7]
    return Pose(quat_to_rot(q / np.linalg.norm(q)), v[:3])


def write_pose_graph_json(path, nodes, edges) -> None:
    """nodes: (id, Pose, up (3,), member ids); edges: (i, j, kind, Pose, cov)."""
    doc = {
        "nodes": [
            {
                "id": int(nid),
                "pose": pose_to_seven(pose),
                "up": [float(u) for u in up],
                "members": [[int(a), int(s)] for a, s in members],
            }
            for nid, pose, up, members in nodes
        ],
        "edges": [
            {
                "i": int(i),
                "j": int(j),
                "kind": kind,
                "z": pose_to_seven(z),
                "cov": [float(c) for c in np.asarray(cov).reshape(36)],
            }
            for i, j, kind, z, cov in edges
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def read_pose_graph_json(path):
    with open(path) as f:
        doc = json.load(f)
    nodes = [
        (
            n["id"],
            seven_to_pose(n["pose"]),
            np.array(n["up"], dtype=float),
            [tuple(m) for m in n["members"]],
        )
        for n in doc["nodes"]
    ]
    edges = [
        (
            e["i"],
            e["j"],
            e["kind"],
            seven_to_pose(e["z"]),
            np.array(e["cov"], dtype=float).reshape(6, 6),
        )
        for e in doc["edges"]
    ]
    return nodes, edges


# -------------------------------------------------------------- CSV reports

def write_stats_csv(path, rows, header) -> None:
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_histogram_csv(path, bin_edges, counts) -> None:
    total = max(int(np.sum(counts)), 1)
    with open(path, "w") as f:
        f.write("bin_low,bin_high,count,fraction\n")
        for lo, hi, c in zip(bin_edges[:-1], bin_edges[1:], counts):
            f.write(f"{_fmt(lo)},{_fmt(hi)},{int(c)},{_fmt(c / total)}\n")

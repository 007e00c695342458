"""Command-line surface: simulate, odometry, slam, multi-agent, evaluate.

Every subcommand validates its inputs before writing anything, exits 0 on
success, and prints a one-line machine-readable `error: <kind>: <detail>` to
stderr (exit 1) otherwise. `--deterministic` pins the default seed and zeroes
wall-clock/memory fields in reports so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import formats
from .config import Config, ConfigError, dump_config, load_config
from .evaluation import ape, associate, map_distance, robust_target_align, rpe
from .geometry import Pose, quat_to_rot, rot_to_quat
from .multi_agent import (
    Link,
    SimNetwork,
    SubmapDatabase,
    collective_optimize,
    digests_equal,
    run_sync,
    serialize_submap,
)
from .odometry import OdometryPipeline
from .pose_graph import SlamBackend
from .sensor_sim import LidarModel, make_scene, make_trajectory, simulate_imu, simulate_lidar, write_dataset
from .submaps import MapSurfels
from .surfel import write_surfels_ply


class CliError(RuntimeError):
    def __init__(self, kind, detail):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind


# --------------------------------------------------------------------------
# dataset helpers
# --------------------------------------------------------------------------

def _load_dataset(path):
    imu_path = os.path.join(path, "imu.csv")
    lidar_path = os.path.join(path, "lidar.bin")
    if not os.path.isdir(path):
        raise CliError("missing-dataset", path)
    for p in (imu_path, lidar_path):
        if not os.path.exists(p):
            raise CliError("missing-file", p)
    imu = formats.read_imu_csv(imu_path)
    lidar = formats.read_lidar_bin(lidar_path)
    meta = {}
    meta_path = os.path.join(path, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
    if len(imu[0]) == 0:
        raise CliError("empty-dataset", imu_path)
    if len(lidar[0]) and (lidar[0][0] > imu[0][-1] or lidar[0][-1] < imu[0][0]):
        raise CliError("no-time-overlap", path)
    return imu, lidar, meta


def _build_trajectory(cfg: Config):
    kind = cfg.sim_trajectory
    if kind == "line":
        return make_trajectory("line", speed=cfg.sim_speed, duration=cfg.sim_duration,
                               start=cfg.sim_start, heading=cfg.sim_heading)
    if kind == "circle":
        return make_trajectory("circle", radius=cfg.sim_radius, speed=cfg.sim_speed,
                               duration=cfg.sim_duration, center=cfg.sim_center)
    if kind == "ellipse":
        return make_trajectory("ellipse", a=cfg.sim_axis_a, b=cfg.sim_axis_b,
                               speed=cfg.sim_speed, laps=cfg.sim_laps,
                               center=cfg.sim_center)
    if kind == "figure8":
        return make_trajectory("figure8", scale=cfg.sim_scale, speed=cfg.sim_speed,
                               laps=cfg.sim_laps, center=cfg.sim_center)
    if kind == "piecewise":
        if not cfg.sim_waypoints:
            raise CliError("bad-config", "piecewise trajectory needs sim_waypoints")
        wps = []
        for part in cfg.sim_waypoints.split(";"):
            x, y = (float(v) for v in part.split(","))
            wps.append((x, y))
        return make_trajectory("piecewise", waypoints=wps, speed=cfg.sim_speed,
                               turn_rate=cfg.sim_turn_rate)
    raise CliError("bad-config", f"unknown sim_trajectory {kind!r}")


def _lidar_model(cfg: Config) -> LidarModel:
    return LidarModel(kind=cfg.sim_lidar_kind, rate=cfg.sim_lidar_rate,
                      rays_per_rev=cfg.sim_rays_per_rev, beams=cfg.sim_beams,
                      vfov_deg=cfg.sim_vfov_deg, spin_rate=cfg.sim_spin_rate,
                      tilt_deg=cfg.sim_tilt_deg, max_range=cfg.sim_max_range,
                      sigma=cfg.sim_lidar_sigma)


def cmd_simulate(args, cfg: Config):
    traj = _build_trajectory(cfg)
    duration = min(cfg.sim_duration, traj.duration)
    times = np.arange(0.0, duration, cfg.imu_dt)
    rng_imu = np.random.default_rng(args.seed)
    rng_lidar = np.random.default_rng(args.seed + 1)
    imu = simulate_imu(traj, times, gyro_bias=cfg.sim_gyro_bias,
                       accel_bias=cfg.sim_accel_bias,
                       gyro_sigma=cfg.sim_gyro_sigma,
                       accel_sigma=cfg.sim_accel_sigma,
                       rng=rng_imu if (cfg.sim_gyro_sigma or cfg.sim_accel_sigma) else None)
    world = make_scene(cfg.sim_scene)
    model = _lidar_model(cfg)
    lidar = simulate_lidar(world, traj, model,
                           rng=rng_lidar if model.sigma > 0 else None, t1=duration)
    R0, p0, v0, _, _ = traj.states(np.array([0.0]))
    meta = {
        "seed": int(args.seed),
        "scene": cfg.sim_scene,
        "trajectory": cfg.sim_trajectory,
        "duration": float(duration),
        "initial_rotation_quat": [float(v) for v in rot_to_quat(R0[0])],
        "initial_velocity": [float(v) for v in v0[0]],
        "initial_position": [float(v) for v in p0[0]],
    }
    os.makedirs(args.output, exist_ok=True)
    write_dataset(args.output, traj, imu, lidar, meta=meta)
    dump_config(cfg, os.path.join(args.output, "config.used"))
    print(f"simulate: wrote {len(times)} imu samples, {len(lidar[0])} lidar points -> {args.output}")
    return 0


# --------------------------------------------------------------------------
# odometry / slam
# --------------------------------------------------------------------------

def _run_pipeline(cfg: Config, dataset, agent_id: int, use_meta_init: bool,
                  on_submaps=None):
    (imu_t, gyro, accel), (lt, lp), meta = dataset
    kw = {}
    if use_meta_init and "initial_rotation_quat" in meta:
        kw["initial_rotation"] = quat_to_rot(np.asarray(meta["initial_rotation_quat"]))
        kw["initial_velocity"] = np.asarray(meta.get("initial_velocity", (0, 0, 0)))
    pipe = OdometryPipeline(cfg.to_odometry(agent_id), **kw)
    chunk = cfg.slide
    t = imu_t[0]
    order = np.argsort(lt, kind="stable")
    lt, lp = lt[order], lp[order]
    while t <= imu_t[-1] + chunk:
        sel_i = (imu_t >= t) & (imu_t < t + chunk)
        sel_l = (lt >= t) & (lt < t + chunk)
        new = pipe.feed(imu_t[sel_i], gyro[sel_i], accel[sel_i], lt[sel_l], lp[sel_l])
        if on_submaps and new:
            on_submaps(new)
        t += chunk
    tail = pipe.finish()
    if on_submaps and tail:
        on_submaps(tail)
    return pipe


def _write_timing(path, logs, node_counts=None, deterministic=False):
    rows = []
    for k, log in enumerate(logs):
        nodes = node_counts[k] if node_counts else 0
        rows.append((log.index, 0.0 if deterministic else log.solve_ms,
                     log.n_surfels, log.n_matches,
                     0 if deterministic else log.rss_bytes,
                     log.n_submaps, nodes))
    formats.write_stats_csv(path, rows,
                            ["window", "solve_ms", "surfels", "matches",
                             "rss_bytes", "submaps", "nodes"])


def _submap_world_surfels(submaps) -> MapSurfels:
    return MapSurfels.concatenate([s.surfels.transformed(s.base_pose) for s in submaps])


def cmd_odometry(args, cfg: Config):
    dataset = _load_dataset(args.dataset)
    os.makedirs(args.output, exist_ok=True)
    pipe = _run_pipeline(cfg, dataset, args.agent_id, not args.no_meta_init)
    times, poses = pipe.trajectory()
    if len(times) == 0:
        raise CliError("no-output", "dataset shorter than one window")
    formats.write_tum(os.path.join(args.output, "trajectory_odom.tum"), times, poses)
    world = _submap_world_surfels(pipe.submaps)
    write_surfels_ply(os.path.join(args.output, "surfels.ply"), world.positions,
                      world.normals, world.resolutions, world.planarities)
    with open(os.path.join(args.output, "submaps.bin"), "wb") as f:
        for s in pipe.submaps:
            f.write(serialize_submap(s))
    _write_timing(os.path.join(args.output, "timing.csv"), pipe.logs,
                  deterministic=args.deterministic)
    print(f"odometry: {len(times)} poses, {len(pipe.submaps)} submaps -> {args.output}")
    return 0


def _slam_corrected_trajectory(pipe, backend):
    """Odometry poses re-expressed through their submap's optimised node."""
    graph = backend.graph
    submaps = pipe.submaps
    times, poses = pipe.trajectory()
    if not submaps:
        return times, poses
    starts = np.array([s.t0 for s in submaps])
    out = []
    for t, p in zip(times, poses):
        k = int(np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(submaps) - 1))
        s = submaps[k]
        nid = graph.submap_to_node[s.key]
        node = graph.nodes[nid]
        world = node.pose.compose(node.member_frames[s.key])
        out.append(world.compose(s.base_pose.inverse().compose(p)))
    return times, out


def cmd_slam(args, cfg: Config):
    dataset = _load_dataset(args.dataset)
    os.makedirs(args.output, exist_ok=True)
    backend = SlamBackend(cfg.to_pgo())
    node_counts = []

    def on_submaps(new):
        for s in new:
            backend.add_submap(s)

    pipe = _run_pipeline(cfg, dataset, args.agent_id, not args.no_meta_init, on_submaps)
    if not pipe.submaps:
        raise CliError("no-output", "dataset too short to finalise a submap")
    backend.finalize()
    times, poses = _slam_corrected_trajectory(pipe, backend)
    formats.write_tum(os.path.join(args.output, "trajectory_slam.tum"), times, poses)
    gmap = backend.graph.global_map()
    write_surfels_ply(os.path.join(args.output, "map.ply"), gmap.positions,
                      gmap.normals, gmap.resolutions, gmap.planarities)
    nodes, edges = backend.graph.export_payload()
    formats.write_pose_graph_json(os.path.join(args.output, "graph.json"), nodes, edges)
    _write_timing(os.path.join(args.output, "timing.csv"), pipe.logs,
                  deterministic=args.deterministic)
    print(f"slam: {backend.n_submaps} submaps -> {len(backend.graph.nodes)} nodes, "
          f"{backend.n_loops} loop closures -> {args.output}")
    return 0


def cmd_multi_agent(args, cfg: Config):
    if len(args.datasets) < 2:
        raise CliError("bad-args", "multi-agent needs at least two datasets")
    datasets = [_load_dataset(d) for d in args.datasets]
    os.makedirs(args.output, exist_ok=True)
    dbs = {}
    for aid, dataset in enumerate(datasets):
        pipe = _run_pipeline(cfg, dataset, aid, not args.no_meta_init)
        db = SubmapDatabase()
        for s in pipe.submaps:
            db.insert(s)
        dbs[aid] = db
    ids = sorted(dbs)
    links = {}
    if cfg.sync_topology == "ring":
        pairs = [(a, ids[(k + 1) % len(ids)]) for k, a in enumerate(ids)]
    else:
        pairs = [(a, b) for a in ids for b in ids if a < b]
    for a, b in pairs:
        for link in ((a, b), (b, a)):
            links[link] = Link(latency=cfg.sync_latency, drop_prob=cfg.sync_drop_prob,
                               bandwidth=cfg.sync_bandwidth)
    net = SimNetwork(links, seed=args.seed)
    rounds = run_sync(dbs, net, cfg.sync_rounds, max_batch=cfg.sync_max_batch)
    formats.write_stats_csv(os.path.join(args.output, "sync_transcript.csv"),
                            net.transcript,
                            ["round", "src", "dst", "kind", "bytes", "status"])
    report = {"rounds": int(rounds), "converged": bool(digests_equal(dbs)),
              "digests": {str(a): list(map(list, dbs[a].make_digest())) for a in ids}}
    agents_out = {}
    for aid in ids:
        backend, colrep = collective_optimize(dbs[aid], cfg.to_pgo())
        nodes, edges = backend.graph.export_payload()
        formats.write_pose_graph_json(
            os.path.join(args.output, f"graph_agent{aid}.json"), nodes, edges)
        gmap = backend.graph.global_map()
        write_surfels_ply(os.path.join(args.output, f"map_agent{aid}.ply"),
                          gmap.positions, gmap.normals, gmap.resolutions,
                          gmap.planarities)
        agents_out[str(aid)] = {
            "nodes": len(backend.graph.nodes),
            "submaps": len(dbs[aid]),
            "components": colrep.n_components_after,
            "cross_edges": colrep.cross_edges,
        }
    report["agents"] = agents_out
    with open(os.path.join(args.output, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"multi-agent: sync {'converged' if report['converged'] else 'incomplete'} "
          f"after {rounds} rounds -> {args.output}")
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def read_surfels_ply(path):
    """Positions from an ASCII PLY written by this package."""
    with open(path) as f:
        header = []
        for line in f:
            header.append(line.strip())
            if line.strip() == "end_header":
                break
        n = 0
        for h in header:
            if h.startswith("element vertex"):
                n = int(h.split()[-1])
        rows = [f.readline().split() for _ in range(n)]
    data = np.array(rows, dtype=float)
    return data[:, :3]


def _read_xyz_csv(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise CliError("bad-format", f"{path}:{lineno}: expected x,y,z")
            rows.append([float(p) for p in parts])
    return np.array(rows)


def cmd_evaluate(args, cfg: Config):
    os.makedirs(args.output, exist_ok=True)
    out_csv = os.path.join(args.output, f"{args.mode}_stats.csv")
    if args.mode in ("rpe", "ape"):
        t_gt, p_gt = formats.read_tum(args.gt)
        t_est, p_est = formats.read_tum(args.est)
        pairs = associate(t_gt, t_est, args.max_dt)
        g = [p_gt[i] for i, _ in pairs]
        e = [p_est[j] for _, j in pairs]
        if args.mode == "rpe":
            deltas = [float(d) for d in args.deltas.split(",")]
            buckets = rpe(g, e, deltas)
            rows = []
            for d in deltas:
                b = buckets[d]
                if b is None:
                    continue
                rows.append((d, b.translation.mean, b.translation.rmse,
                             b.translation.std, b.translation.max,
                             b.rotation.mean, b.rotation.rmse, b.drift_pct,
                             b.translation.count))
            formats.write_stats_csv(out_csv, rows,
                                    ["delta_m", "trans_mean", "trans_rmse", "trans_std",
                                     "trans_max", "rot_mean", "rot_rmse", "drift_pct",
                                     "pairs"])
            if rows:
                print(f"evaluate rpe: drift {rows[-1][7]:.3f}% at {rows[-1][0]} m")
        else:
            st, sr, A = ape(g, e, align=args.align)
            formats.write_stats_csv(out_csv, [(st.mean, st.rmse, st.std, st.max,
                                               sr.mean, sr.rmse, sr.std, sr.max,
                                               st.count)],
                                    ["trans_mean", "trans_rmse", "trans_std", "trans_max",
                                     "rot_mean", "rot_rmse", "rot_std", "rot_max", "pairs"])
            print(f"evaluate ape: mean {st.mean:.4f} m rmse {st.rmse:.4f} m ({st.count} poses)")
    elif args.mode == "map":
        target = read_surfels_ply(args.est)
        reference = read_surfels_ply(args.gt)
        stats, (edges, counts) = map_distance(target, reference, voxel=args.voxel,
                                              align=not args.no_align)
        formats.write_stats_csv(out_csv, [(stats.mean, stats.rmse, stats.std,
                                           stats.max, stats.count)],
                                ["mean", "rmse", "std", "max", "points"])
        formats.write_histogram_csv(os.path.join(args.output, "map_hist.csv"),
                                    edges, counts)
        print(f"evaluate map: mean {stats.mean:.4f} m over {stats.count} points")
    elif args.mode == "targets":
        mapped = _read_xyz_csv(args.est)
        surveyed = _read_xyz_csv(args.gt)
        if len(mapped) != len(surveyed):
            raise CliError("bad-args", "target files must correspond row by row")
        A, inliers, stats = robust_target_align(mapped, surveyed,
                                                inlier_threshold=args.inlier_threshold,
                                                seed=args.seed)
        formats.write_stats_csv(out_csv, [(stats.mean, stats.rmse, stats.std,
                                           stats.max, stats.count, len(mapped))],
                                ["mean", "rmse", "std", "max", "inliers", "targets"])
        print(f"evaluate targets: rmse {stats.rmse:.4f} m on {stats.count}/{len(mapped)} inliers")
    else:
        raise CliError("bad-args", f"unknown mode {args.mode!r}")
    return 0


# --------------------------------------------------------------------------
# entry
# --------------------------------------------------------------------------

def _common(sub):
    sub.add_argument("--config", default=None, help="flat key = value config file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--deterministic", action="store_true",
                     help="single-threaded, pinned seed, reproducible reports")
    sub.add_argument("--output", required=True)


def build_parser():
    ap = argparse.ArgumentParser(prog="ctslam",
                                 description="continuous-time lidar-inertial SLAM toolkit")
    sp = ap.add_subparsers(dest="command", required=True)

    sim = sp.add_parser("simulate", help="generate a synthetic dataset")
    _common(sim)
    sim.add_argument("--scene", default=None, choices=["room", "corridor", "tunnel", "loop"])
    sim.add_argument("--trajectory", default=None,
                     choices=["line", "circle", "ellipse", "figure8", "piecewise"])

    odo = sp.add_parser("odometry", help="run the sliding-window front end")
    _common(odo)
    odo.add_argument("--dataset", required=True)
    odo.add_argument("--agent-id", type=int, default=0)
    odo.add_argument("--no-meta-init", action="store_true",
                     help="ignore initial state hints in meta.json")

    slm = sp.add_parser("slam", help="odometry + pose-graph back end")
    _common(slm)
    slm.add_argument("--dataset", required=True)
    slm.add_argument("--agent-id", type=int, default=0)
    slm.add_argument("--no-meta-init", action="store_true")

    ma = sp.add_parser("multi-agent", help="N agents with simulated submap sync")
    _common(ma)
    ma.add_argument("--datasets", nargs="+", required=True)
    ma.add_argument("--no-meta-init", action="store_true")

    ev = sp.add_parser("evaluate", help="trajectory / map / target metrics")
    _common(ev)
    ev.add_argument("--mode", required=True, choices=["rpe", "ape", "map", "targets"])
    ev.add_argument("--gt", required=True)
    ev.add_argument("--est", required=True)
    ev.add_argument("--max-dt", type=float, default=0.05)
    ev.add_argument("--deltas", default="5,10")
    ev.add_argument("--align", default="rigid", choices=["none", "rigid"])
    ev.add_argument("--voxel", type=float, default=0.4)
    ev.add_argument("--no-align", action="store_true")
    ev.add_argument("--inlier-threshold", type=float, default=0.2)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = Config()
        if args.config:
            if not os.path.exists(args.config):
                raise CliError("missing-config", args.config)
            cfg = load_config(args.config)
        if args.seed is None:
            args.seed = 0 if args.deterministic else 0
        if getattr(args, "scene", None):
            cfg.sim_scene = args.scene
        if getattr(args, "trajectory", None):
            cfg.sim_trajectory = args.trajectory
        handler = {
            "simulate": cmd_simulate,
            "odometry": cmd_odometry,
            "slam": cmd_slam,
            "multi-agent": cmd_multi_agent,
            "evaluate": cmd_evaluate,
        }[args.command]
        return handler(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, formats.FormatError) as e:
        print(f"error: bad-input: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: missing-file: {e.filename}", file=sys.stderr)
        return 1


def hash_outputs(directory) -> str:
    """SHA-256 over every file in a directory tree (sorted), for determinism checks."""
    h = hashlib.sha256()
    for root, _, names in sorted(os.walk(directory)):
        for name in sorted(names):
            path = os.path.join(root, name)
            h.update(name.encode())
            with open(path, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


if __name__ == "__main__":
    sys.exit(main())

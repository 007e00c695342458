"""Flat `key = value` configuration covering every pipeline stage, with
defaults matching the shipped parameter choices. Unknown keys are rejected;
values are validated on load.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .geometry import GRAVITY_MAG
from .odometry import OdometryConfig
from .pose_graph import CHI2_3_95, CHI2_6_95, PgoConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # odometry window
    window_length: float = 2.0
    slide: float = 0.5
    sample_rate: float = 10.0
    outer_iters: int = 4
    gn_iters: int = 2
    cauchy_scale: float = 0.06
    lidar_sigma: float = 0.02
    gyro_sigma: float = 0.01
    accel_sigma: float = 0.05
    bias_gyro_sigma: float = 1e-4
    bias_accel_sigma: float = 1e-3
    knn_k: int = 4
    time_sep_threshold: float = 0.1
    match_normal_angle_max: float = 15.0
    gravity_mag: float = GRAVITY_MAG
    imu_dt: float = 0.01
    max_imu_gap: float = 5.0
    levenberg: float = 1e-6
    degeneracy_rel_threshold: float = 1e-9
    # surfel extraction
    resolutions: tuple = (0.25, 0.5, 1.0, 2.0)
    min_cluster_size: int = 10
    planarity_threshold: float = 0.4
    cluster_time_gap: float = 0.2
    # submaps
    submap_length: float = 6.0
    submap_period: float = 5.0
    odom_edge_rot_sigma: float = 0.01
    odom_edge_trans_sigma: float = 0.02
    # pose graph
    overlap_threshold: float = 0.6
    merge_gate: float = CHI2_6_95
    loop_gate: float = CHI2_6_95
    candidate_gate: float = CHI2_3_95
    gravity_weight: float = 100.0
    pgo_cauchy_scale: float = 3.0
    pgo_max_iters: int = 50
    pgo_tol: float = 1e-6
    icp_max_iters: int = 30
    icp_tol: float = 1e-4
    icp_min_corr: int = 10
    icp_corr_dist_factor: float = 2.0
    loop_search_every: int = 5
    yaw_grid_bins: int = 16
    yaw_sigma_trigger: float = 0.3
    # multi-agent sync
    sync_max_batch: int = 5
    sync_drop_prob: float = 0.0
    sync_latency: int = 1
    sync_bandwidth: float = 1e7
    sync_rounds: int = 200
    sync_topology: str = "full"
    # simulator
    sim_scene: str = "room"
    sim_trajectory: str = "line"
    sim_speed: float = 1.0
    sim_duration: float = 10.0
    sim_heading: float = 0.0
    sim_start: tuple = (0.0, 0.0)
    sim_radius: float = 3.0
    sim_center: tuple = (0.0, 0.0)
    sim_scale: float = 3.0
    sim_axis_a: float = 10.0
    sim_axis_b: float = 4.0
    sim_laps: float = 1.0
    sim_waypoints: str = ""
    sim_turn_rate: float = 1.0
    sim_lidar_kind: str = "flat"
    sim_lidar_rate: float = 10.0
    sim_rays_per_rev: int = 90
    sim_beams: int = 16
    sim_vfov_deg: float = 40.0
    sim_spin_rate: float = 0.5
    sim_tilt_deg: float = 45.0
    sim_max_range: float = 50.0
    sim_lidar_sigma: float = 0.0
    sim_gyro_sigma: float = 0.0
    sim_accel_sigma: float = 0.0
    sim_gyro_bias: tuple = (0.0, 0.0, 0.0)
    sim_accel_bias: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        self.to_odometry()  # OdometryConfig runs its own checks
        positives = ["submap_length", "submap_period", "gravity_weight",
                     "icp_tol", "sync_bandwidth", "sim_lidar_rate", "sim_duration"]
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.sync_topology not in ("full", "ring"):
            raise ConfigError("sync_topology must be full or ring")
        if not 0.0 <= self.sync_drop_prob < 1.0:
            raise ConfigError("sync_drop_prob must be in [0, 1)")
        if tuple(sorted(self.resolutions)) != tuple(self.resolutions):
            raise ConfigError("resolutions must be ascending")
        return self

    def to_odometry(self, agent_id: int = 0) -> OdometryConfig:
        return OdometryConfig(
            window_length=self.window_length, slide=self.slide,
            sample_rate=self.sample_rate, outer_iters=self.outer_iters,
            gn_iters=self.gn_iters, cauchy_scale=self.cauchy_scale,
            lidar_sigma=self.lidar_sigma, gyro_sigma=self.gyro_sigma,
            accel_sigma=self.accel_sigma, bias_gyro_sigma=self.bias_gyro_sigma,
            bias_accel_sigma=self.bias_accel_sigma, knn_k=self.knn_k,
            time_sep_threshold=self.time_sep_threshold,
            match_normal_angle_max=self.match_normal_angle_max,
            gravity_mag=self.gravity_mag, imu_dt=self.imu_dt,
            max_imu_gap=self.max_imu_gap, levenberg=self.levenberg,
            degeneracy_rel_threshold=self.degeneracy_rel_threshold,
            resolutions=tuple(self.resolutions),
            min_cluster_size=self.min_cluster_size,
            planarity_threshold=self.planarity_threshold,
            cluster_time_gap=self.cluster_time_gap,
            submap_length=self.submap_length, submap_period=self.submap_period,
            odom_edge_rot_sigma=self.odom_edge_rot_sigma,
            odom_edge_trans_sigma=self.odom_edge_trans_sigma,
            agent_id=agent_id,
        )

    def to_pgo(self) -> PgoConfig:
        return PgoConfig(
            overlap_threshold=self.overlap_threshold, merge_gate=self.merge_gate,
            loop_gate=self.loop_gate, candidate_gate=self.candidate_gate,
            gravity_weight=self.gravity_weight, cauchy_scale=self.pgo_cauchy_scale,
            max_iters=self.pgo_max_iters, tol=self.pgo_tol,
            icp_max_iters=self.icp_max_iters, icp_tol=self.icp_tol,
            icp_min_corr=self.icp_min_corr,
            icp_corr_dist_factor=self.icp_corr_dist_factor,
            loop_search_every=self.loop_search_every,
            yaw_grid_bins=self.yaw_grid_bins,
            yaw_sigma_trigger=self.yaw_sigma_trigger,
        )


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is float:
        return float(raw)
    if kind is int:
        val = float(raw)
        if val != int(val):
            raise ConfigError(f"{name}: expected integer, got {raw!r}")
        return int(val)
    if kind is str:
        return raw
    if kind is tuple:
        if not raw:
            return ()
        return tuple(float(p) for p in raw.split(","))
    raise ConfigError(f"{name}: unsupported type")


def load_config(path, base: Config | None = None) -> Config:
    """Parse a flat `key = value` file (with # comments) over defaults."""
    cfg = base or Config()
    types = {f.name: f.type for f in fields(Config)}
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(Config)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in text.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                setattr(cfg, key, _coerce(key, kinds[key], raw))
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    cfg.validate()
    return cfg


def dump_config(cfg: Config, path) -> None:
    with open(path, "w") as fh:
        for f in fields(Config):
            val = getattr(cfg, f.name)
            if isinstance(val, tuple):
                val = ",".join(format(v, ".17g") for v in val)
            elif isinstance(val, float):
                val = format(val, ".17g")
            fh.write(f"{f.name} = {val}\n")

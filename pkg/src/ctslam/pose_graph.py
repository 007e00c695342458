"""Submap pose-graph back end.

Nodes start as submap frames and are merged when their local maps overlap and
their relative pose is statistically consistent, so graph size tracks the
explored environment rather than mission duration. Edges are odometry links
and ICP loop closures, both gated by Mahalanobis tests using covariances
transported along the graph. Optimisation is damped Gauss-Newton over
SO(3) x R^3 node poses with a Cauchy M-estimator on loop-closure residuals
and a gravity-alignment term pulling each node's locally observed up
direction to the world vertical.

Tangent ordering is [rotation; translation] throughout; edge noise lives on
the right of the measurement (frame of the second node).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .geometry import (
    Pose,
    exp_so3,
    hat,
    inv_right_jacobian_so3,
    log_so3,
    se3_adjoint,
)
from .submaps import MapSurfels, Submap

CHI2_6_95 = 12.591587243743977
CHI2_3_95 = 7.814727903251179


@dataclass
class PgoConfig:
    overlap_threshold: float = 0.6
    merge_gate: float = CHI2_6_95
    loop_gate: float = CHI2_6_95
    candidate_gate: float = CHI2_3_95
    gravity_weight: float = 100.0
    cauchy_scale: float = 3.0            # on whitened loop residual norms
    max_iters: int = 50
    tol: float = 1e-6
    icp_max_iters: int = 30
    icp_tol: float = 1e-4
    icp_min_corr: int = 10
    icp_corr_dist_factor: float = 2.0    # times the finest resolution
    loop_search_every: int = 5           # submaps between forced searches
    yaw_grid_bins: int = 16
    yaw_sigma_trigger: float = 0.3       # rad; above this ICP starts from a yaw grid
    levenberg: float = 1e-9


def pose_tangent(p: Pose) -> np.ndarray:
    """[log(R); t] minimal coordinates of a pose near identity."""
    return np.concatenate([log_so3(p.rotation), p.translation])


def edge_residual(Ti: Pose, Tj: Pose, Z: Pose) -> np.ndarray:
    """Unwhitened [rot; trans] residual of Z^-1 (Ti^-1 Tj)."""
    E = Z.inverse().compose(Ti.inverse().compose(Tj))
    return np.concatenate([log_so3(E.rotation), E.translation])


def edge_jacobians(Ti: Pose, Tj: Pose, Z: Pose):
    """d residual / d(left perturbation of Ti, Tj); 6x6 blocks."""
    phi = log_so3(Z.rotation.T @ Ti.rotation.T @ Tj.rotation)
    Jr_inv = inv_right_jacobian_so3(phi)
    A = Z.rotation.T @ Ti.rotation.T
    dtij = Tj.translation - Ti.translation
    Ji = np.zeros((6, 6))
    Jj = np.zeros((6, 6))
    Ji[:3, :3] = -Jr_inv @ Tj.rotation.T
    Ji[3:, :3] = A @ hat(dtij)
    Ji[3:, 3:] = -A
    Jj[:3, :3] = Jr_inv @ Tj.rotation.T
    Jj[3:, 3:] = A
    return Ji, Jj


def whitener(cov: np.ndarray) -> np.ndarray:
    """W with W @ r having unit covariance: inverse Cholesky factor."""
    L = np.linalg.cholesky(np.asarray(cov, dtype=float))
    return np.linalg.inv(L)


@dataclass
class Node:
    nid: int
    pose: Pose
    surfels: MapSurfels                      # node-local frame
    up: np.ndarray                           # unit, node-local frame
    members: list = field(default_factory=list)          # submap keys
    member_frames: dict = field(default_factory=dict)    # key -> node<-submap Pose
    member_counts: dict = field(default_factory=dict)


@dataclass
class Edge:
    i: int
    j: int
    kind: str              # "odometry" | "loop_closure"
    z: Pose
    cov: np.ndarray


@dataclass
class ICPResult:
    pose: Pose
    cov: np.ndarray
    fitness: float
    n_corr: int
    rmse: float


def icp_point_to_plane(map_a: MapSurfels, map_b: MapSurfels, init: Pose,
                       cfg: PgoConfig | None = None):
    """Align map_b onto map_a: returns T with positions_a ~ T * positions_b.

    Nearest-centre correspondences capped at twice the finest resolution,
    point-to-plane Gauss-Newton, covariance from the scaled inverse Hessian.
    Returns None when fewer than icp_min_corr correspondences survive.
    """
    cfg = cfg or PgoConfig()
    if len(map_a) == 0 or len(map_b) == 0:
        return None
    finest = min(map_a.resolutions.min(), map_b.resolutions.min())
    max_dist = cfg.icp_corr_dist_factor * finest
    tree = cKDTree(map_a.positions)
    R = init.rotation.copy()
    t = init.translation.copy()
    n_corr = 0
    rmse = np.inf
    for _ in range(cfg.icp_max_iters):
        q = map_b.positions @ R.T + t
        dist, idx = tree.query(q, distance_upper_bound=max_dist)
        valid = np.isfinite(dist)
        n_corr = int(valid.sum())
        if n_corr < cfg.icp_min_corr:
            return None
        pa = map_a.positions[idx[valid]]
        na = map_a.normals[idx[valid]]
        qv = q[valid]
        r = np.einsum("mi,mi->m", na, pa - qv)
        J = np.empty((n_corr, 6))
        # left perturbation: q(d) ~ q + d x (R p_b) + dt
        J[:, :3] = np.cross(na, qv - t)
        J[:, 3:] = -na
        H = J.T @ J + cfg.levenberg * np.eye(6)
        g = J.T @ r
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return None
        R = exp_so3(step[:3]) @ R
        t = t + step[3:]
        rmse = float(np.sqrt(np.mean(r**2)))
        if np.linalg.norm(step) < cfg.icp_tol:
            break
    dof = max(n_corr - 6, 1)
    s2 = float(np.sum(r**2)) / dof
    cov = s2 * np.linalg.inv(H)
    # keep the covariance honestly bounded from below
    cov += np.eye(6) * 1e-10
    fitness = n_corr / len(map_b)
    return ICPResult(Pose(R, t), cov, float(fitness), n_corr, rmse)


def icp_with_yaw_grid(map_a: MapSurfels, map_b: MapSurfels, init: Pose,
                      up_axis, cfg: PgoConfig):
    """Yaw-grid search about the gravity-aligned axis, then full ICP.

    Replaces a global registration initialiser: candidates rotate map_b about
    map_a's up axis through the aligned centroids.
    """
    up = np.asarray(up_axis, dtype=float)
    up = up / np.linalg.norm(up)
    ca = map_a.positions.mean(axis=0)
    cb = map_b.positions.mean(axis=0)
    best = None
    short = PgoConfig(**{**cfg.__dict__, "icp_max_iters": 5})
    for k in range(cfg.yaw_grid_bins):
        theta = 2.0 * np.pi * k / cfg.yaw_grid_bins
        Rk = exp_so3(up * theta) @ init.rotation
        tk = ca - Rk @ cb
        res = icp_point_to_plane(map_a, map_b, Pose(Rk, tk), short)
        if res is None:
            continue
        score = (res.fitness, -res.rmse)
        if best is None or score > best[0]:
            best = (score, res.pose)
    if best is None:
        return None
    return icp_point_to_plane(map_a, map_b, best[1], cfg)


class PoseGraph:
    def __init__(self, cfg: PgoConfig | None = None):
        self.cfg = cfg or PgoConfig()
        self.nodes: dict[int, Node] = {}
        self.edges: list[Edge] = []
        self.submap_to_node: dict = {}
        self._next_id = 0
        self._version = 0
        self._cov_cache: dict = {}

    # ------------------------------------------------------------- helpers

    def _bump(self):
        self._version += 1
        self._cov_cache.clear()

    def node_ids(self):
        return sorted(self.nodes)

    def adjacency(self):
        adj: dict[int, list] = {nid: [] for nid in self.nodes}
        for e in self.edges:
            adj[e.i].append((e.j, e, True))
            adj[e.j].append((e.i, e, False))
        return adj

    def connected_components(self):
        adj = self.adjacency()
        seen = set()
        comps = []
        for nid in self.node_ids():
            if nid in seen:
                continue
            stack = [nid]
            comp = []
            while stack:
                u = stack.pop()
                if u in seen:
                    continue
                seen.add(u)
                comp.append(u)
                for v, _, _ in adj[u]:
                    if v not in seen:
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    # ------------------------------------------------------------ submaps

    def add_submap(self, s: Submap) -> int:
        """Insert a submap: chain from its predecessor (or root a new
        component), then try to fold it into an overlapping consistent node."""
        pred_key = (s.agent_id, s.seq_no - 1)
        if s.odom_edge is None or pred_key not in self.submap_to_node:
            if s.odom_edge is not None:
                raise KeyError(f"predecessor {pred_key} unknown")
            pose = s.base_pose
            nid = self._new_node(s, pose)
        else:
            pred_nid = self.submap_to_node[pred_key]
            pred_node = self.nodes[pred_nid]
            frame = pred_node.member_frames[pred_key]
            z = frame.compose(s.odom_edge.relative)
            pose = pred_node.pose.compose(z)
            nid = self._new_node(s, pose)
            self.edges.append(Edge(pred_nid, nid, "odometry", z, s.odom_edge.covariance))
        self._bump()
        merged = self._try_merge(nid)
        return merged if merged is not None else nid

    def _new_node(self, s: Submap, pose: Pose) -> int:
        nid = self._next_id
        self._next_id += 1
        node = Node(nid, pose, s.surfels, np.asarray(s.up_local, float).copy())
        node.members.append(s.key)
        node.member_frames[s.key] = Pose.identity()
        node.member_counts[s.key] = len(s.surfels)
        self.nodes[nid] = node
        self.submap_to_node[s.key] = nid
        return nid

    # ------------------------------------------------------------- merging

    def overlap_fraction(self, a: Node, b: Node) -> float:
        """Fraction of the smaller node's surfels that have a same-resolution
        surfel of the other node within one voxel edge (world frame)."""
        small, large = (a, b) if len(a.surfels) <= len(b.surfels) else (b, a)
        if len(small.surfels) == 0 or len(large.surfels) == 0:
            return 0.0
        ps = small.surfels.transformed(small.pose)
        pl = large.surfels.transformed(large.pose)
        hit = 0
        for res in np.unique(ps.resolutions):
            qs = ps.positions[ps.resolutions == res]
            ql = pl.positions[pl.resolutions == res]
            if len(ql) == 0:
                continue
            tree = cKDTree(ql)
            d, _ = tree.query(qs, distance_upper_bound=res)
            hit += int(np.isfinite(d).sum())
        return hit / len(ps)

    def _merge_candidates(self, nid: int):
        """Nodes statistically close to nid (relative pose within the gate's
        translation radius), nearest first."""
        node = self.nodes[nid]
        out = []
        for other in self.node_ids():
            if other == nid:
                continue
            try:
                cov = self.relative_covariance(nid, other)
            except KeyError:
                continue
            rel = node.pose.inverse().compose(self.nodes[other].pose)
            dt = rel.translation
            d2 = float(dt @ np.linalg.solve(cov[3:, 3:], dt))
            if d2 < self.cfg.candidate_gate * 4.0:
                out.append((d2, other))
        return [o for _, o in sorted(out)]

    def _try_merge(self, nid: int):
        """Fold nid into an overlapping, gate-passing node; returns the
        surviving node id or None."""
        for other in self._merge_candidates(nid):
            keep_id, drop_id = (other, nid) if other < nid else (nid, other)
            keep, drop = self.nodes[keep_id], self.nodes[drop_id]
            if self.overlap_fraction(keep, drop) < self.cfg.overlap_threshold:
                continue
            rel = keep.pose.inverse().compose(drop.pose)
            cov = self.relative_covariance(keep_id, drop_id)
            r = pose_tangent(rel)
            d2 = float(r @ np.linalg.solve(cov, r))
            if d2 >= self.cfg.merge_gate:
                continue
            self._merge_into(keep_id, drop_id)
            return keep_id
        return None

    def _merge_into(self, keep_id: int, drop_id: int):
        keep, drop = self.nodes[keep_id], self.nodes[drop_id]
        F = keep.pose.inverse().compose(drop.pose)   # keep <- drop frame
        keep.surfels = MapSurfels.concatenate([keep.surfels, drop.surfels.transformed(F)])
        w_keep = sum(keep.member_counts.values())
        w_drop = sum(drop.member_counts.values())
        up = w_keep * keep.up + w_drop * (F.rotation @ drop.up)
        keep.up = up / np.linalg.norm(up)
        for key in drop.members:
            keep.members.append(key)
            keep.member_frames[key] = F.compose(drop.member_frames[key])
            keep.member_counts[key] = drop.member_counts[key]
            self.submap_to_node[key] = keep_id
        new_edges = []
        for e in self.edges:
            i, j, z = e.i, e.j, e.z
            if i == drop_id and j == drop_id:
                continue
            if i == drop_id:
                i, z = keep_id, F.compose(z)
            if j == drop_id:
                # constraint T_i^-1 T_drop = z  ->  T_i^-1 T_keep = z F^-1;
                # right-frame noise moves with the frame change
                j = keep_id
                A = se3_adjoint(F)
                e = Edge(i, j, e.kind, z.compose(F.inverse()), A @ e.cov @ A.T)
                new_edges.append(e)
                continue
            if i == keep_id and j == keep_id:
                continue
            new_edges.append(Edge(i, j, e.kind, z, e.cov))
        self.edges = [e for e in new_edges if e.i != e.j]
        del self.nodes[drop_id]
        self._bump()

    # ------------------------------------------------- covariance transport

    def relative_covariance(self, i: int, j: int) -> np.ndarray:
        """Covariance of T_i^-1 T_j composed along the minimum-trace path."""
        if i == j:
            return np.eye(6) * 1e-12
        key = (i, j)
        if key in self._cov_cache:
            return self._cov_cache[key]
        adj = self.adjacency()
        dist = {i: 0.0}
        prev = {}
        pq = [(0.0, i)]
        while pq:
            d, u = heapq.heappop(pq)
            if u == j:
                break
            if d > dist.get(u, np.inf):
                continue
            for v, e, forward in adj[u]:
                w = d + float(np.trace(e.cov))
                if w < dist.get(v, np.inf):
                    dist[v] = w
                    prev[v] = (u, e, forward)
                    heapq.heappush(pq, (w, v))
        if j not in prev and j != i:
            raise KeyError(f"nodes {i} and {j} are not connected")
        # walk back, then compose forward
        steps = []
        u = j
        while u != i:
            pu, e, forward = prev[u]
            steps.append((e, forward))
            u = pu
        steps.reverse()
        cov = np.zeros((6, 6))
        for e, forward in steps:
            if forward:
                z_step = e.z
                cov_step = e.cov
            else:
                z_step = e.z.inverse()
                A = se3_adjoint(e.z)
                cov_step = A @ e.cov @ A.T
            Ainv = se3_adjoint(z_step.inverse())
            cov = Ainv @ cov @ Ainv.T + cov_step
        cov = 0.5 * (cov + cov.T)
        self._cov_cache[key] = cov
        return cov

    # ------------------------------------------------------- loop closures

    def find_loop_candidates(self, nid: int):
        """Nodes whose current relative translation to nid passes the
        Mahalanobis search radius; chain neighbours excluded; ascending."""
        node = self.nodes[nid]
        direct = {e.j if e.i == nid else e.i for e in self.edges if nid in (e.i, e.j)}
        out = []
        for other in self.node_ids():
            if other == nid or other in direct:
                continue
            try:
                cov = self.relative_covariance(nid, other)
            except KeyError:
                continue
            dt = node.pose.inverse().compose(self.nodes[other].pose).translation
            d2 = float(dt @ np.linalg.solve(cov[3:, 3:], dt))
            if d2 < self.cfg.candidate_gate:
                out.append((d2, other))
        return [o for _, o in sorted(out)]

    def gate_and_add_loop(self, i: int, j: int, icp_pose: Pose, icp_cov) -> bool:
        """Accept an ICP loop closure iff its discrepancy against the current
        graph-relative pose passes chi-square gating (strict inequality)."""
        rel = self.nodes[i].pose.inverse().compose(self.nodes[j].pose)
        r = pose_tangent(icp_pose.inverse().compose(rel))
        cov = self.relative_covariance(i, j) + np.asarray(icp_cov, float)
        d2 = float(r @ np.linalg.solve(cov, r))
        if not d2 < self.cfg.loop_gate:
            return False
        self.edges.append(Edge(i, j, "loop_closure", icp_pose, np.asarray(icp_cov, float)))
        self._bump()
        return True

    # --------------------------------------------------------- optimisation

    def optimize(self):
        """Robust Gauss-Newton over node poses; returns {nid: Pose}.

        Gauge: per connected component, the smallest node id is fixed in
        translation and world-z rotation (yaw); roll/pitch stay free and are
        observable through the gravity term.
        """
        if not self.nodes:
            raise ValueError("empty graph")
        ids = self.node_ids()
        index = {nid: k for k, nid in enumerate(ids)}
        nv = 6 * len(ids)
        fixed = []
        for comp in self.connected_components():
            anchor = index[comp[0]]
            fixed.extend([6 * anchor + 2, 6 * anchor + 3, 6 * anchor + 4, 6 * anchor + 5])
        free = np.setdiff1d(np.arange(nv), np.array(fixed, dtype=int))
        kappa = np.sqrt(self.cfg.gravity_weight)
        c = self.cfg.cauchy_scale
        u_w = np.array([0.0, 0.0, 1.0])
        poses = {nid: self.nodes[nid].pose for nid in ids}
        whiteners = [whitener(e.cov) for e in self.edges]

        def residuals(ps):
            rows = []
            for e, W in zip(self.edges, whiteners):
                rows.append(W @ edge_residual(ps[e.i], ps[e.j], e.z))
            for nid in ids:
                rows.append(kappa * (ps[nid].rotation @ self.nodes[nid].up - u_w))
            return rows

        def robust_cost(rows):
            cost = 0.0
            for k, e in enumerate(self.edges):
                r2 = float(rows[k] @ rows[k])
                if e.kind == "loop_closure":
                    cost += 0.5 * c * c * np.log1p(r2 / (c * c))
                else:
                    cost += 0.5 * r2
            for k in range(len(self.edges), len(rows)):
                cost += 0.5 * float(rows[k] @ rows[k])
            return cost

        cost = robust_cost(residuals(poses))
        history = [cost]
        for _ in range(self.cfg.max_iters):
            data, rows_idx, cols_idx, rvec = [], [], [], []
            row0 = 0
            rows_now = residuals(poses)
            for k, (e, W) in enumerate(zip(self.edges, whiteners)):
                Ji, Jj = edge_jacobians(poses[e.i], poses[e.j], e.z)
                r = rows_now[k]
                w = 1.0
                if e.kind == "loop_closure":
                    w = 1.0 / (1.0 + float(r @ r) / (c * c))
                sw = np.sqrt(w)
                for J, nid in ((Ji, e.i), (Jj, e.j)):
                    blk = sw * (W @ J)
                    base = 6 * index[nid]
                    for a in range(6):
                        for b in range(6):
                            data.append(blk[a, b])
                            rows_idx.append(row0 + a)
                            cols_idx.append(base + b)
                rvec.append(sw * r)
                row0 += 6
            for nid in ids:
                r = rows_now[len(self.edges) + index[nid]]
                Jn = -kappa * hat(poses[nid].rotation @ self.nodes[nid].up)
                base = 6 * index[nid]
                for a in range(3):
                    for b in range(3):
                        data.append(Jn[a, b])
                        rows_idx.append(row0 + a)
                        cols_idx.append(base + b)
                rvec.append(r)
                row0 += 3
            J = sp.coo_matrix((data, (rows_idx, cols_idx)), shape=(row0, nv)).tocsr()
            r_all = np.concatenate(rvec)
            Jf = J[:, free]
            H = (Jf.T @ Jf).tocsc()
            g = Jf.T @ r_all
            damp = self.cfg.levenberg * np.maximum(H.diagonal(), 1e-12)
            try:
                step_free = spla.splu(H + sp.diags(damp)).solve(-g)
            except RuntimeError:
                raise np.linalg.LinAlgError("singular gauge: pose graph under-constrained")
            step = np.zeros(nv)
            step[free] = step_free
            beta = 1.0
            improved = False
            for _ in range(10):
                trial = {}
                for nid in ids:
                    d = beta * step[6 * index[nid]: 6 * index[nid] + 6]
                    p = poses[nid]
                    trial[nid] = Pose(exp_so3(d[:3]) @ p.rotation, p.translation + d[3:])
                cost_try = robust_cost(residuals(trial))
                if cost_try <= cost + 1e-15:
                    poses = trial
                    cost = cost_try
                    improved = True
                    break
                beta *= 0.5
            history.append(cost)
            if not improved or np.linalg.norm(beta * step) < self.cfg.tol:
                break
        for nid in ids:
            self.nodes[nid].pose = poses[nid]
        self._bump()
        self._history = history
        return poses

    # -------------------------------------------------------------- export

    def global_map(self) -> MapSurfels:
        return MapSurfels.concatenate(
            [self.nodes[nid].surfels.transformed(self.nodes[nid].pose) for nid in self.node_ids()]
        )

    def export_payload(self):
        nodes = [
            (nid, self.nodes[nid].pose, self.nodes[nid].up, self.nodes[nid].members)
            for nid in self.node_ids()
        ]
        edges = [(e.i, e.j, e.kind, e.z, e.cov) for e in self.edges]
        return nodes, edges


class SlamBackend:
    """Schedules the back end: insert submaps, search loop candidates, run
    ICP with gating, optimise, and re-check merges after new edges."""

    def __init__(self, cfg: PgoConfig | None = None):
        self.cfg = cfg or PgoConfig()
        self.graph = PoseGraph(self.cfg)
        self.n_submaps = 0
        self.n_loops = 0

    def add_submap(self, s: Submap, optimize: bool = True) -> int:
        nid = self.graph.add_submap(s)
        self.n_submaps += 1
        run_search = (len(self.graph.nodes[nid].members) == 1
                      or self.n_submaps % self.cfg.loop_search_every == 0)
        if run_search and self._search_loops(nid) and optimize:
            self.graph.optimize()
            again = self.graph._try_merge(nid) if nid in self.graph.nodes else None
            if again is not None:
                nid = again
        return nid

    def _search_loops(self, nid: int) -> bool:
        added = False
        for other in self.graph.find_loop_candidates(nid):
            node_a = self.graph.nodes[other]
            node_b = self.graph.nodes[nid]
            init = node_a.pose.inverse().compose(node_b.pose)
            cov = self.graph.relative_covariance(other, nid)
            yaw_sigma = np.sqrt(max(cov[2, 2], 0.0))
            if yaw_sigma > self.cfg.yaw_sigma_trigger:
                res = icp_with_yaw_grid(node_a.surfels, node_b.surfels, init,
                                        node_a.up, self.cfg)
            else:
                res = icp_point_to_plane(node_a.surfels, node_b.surfels, init, self.cfg)
            if res is None:
                continue
            if self.graph.gate_and_add_loop(other, nid, res.pose, res.cov):
                self.n_loops += 1
                added = True
        return added

    def finalize(self):
        if self.graph.nodes:
            self.graph.optimize()
        return self.graph

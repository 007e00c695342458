"""Decentralised collaborative mapping: per-agent submap databases kept in
sync by an anti-entropy protocol over a simulated lossy network, plus
independent per-agent optimisation of the collective pose graph.

Sync is digest/request/payload: agents advertise per-agent contiguous
watermarks, push submaps the peer provably lacks, and explicitly request
advertised submaps they miss. Databases only grow and every message is
idempotent, so any delivery order converges. Submaps travel in a fixed
little-endian wire format (length-prefixed records).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .formats import pose_to_seven, seven_to_pose
from .geometry import Pose
from .pose_graph import Edge, PgoConfig, SlamBackend, icp_with_yaw_grid
from .submaps import MapSurfels, OdomEdgeMeasurement, Submap

_HEADER = struct.Struct("<IQd")          # agent_id u32, seq_no u64, t0 f64
_POSE7 = struct.Struct("<7d")
_UP = struct.Struct("<3d")
_ODOM = struct.Struct("<43d")            # 7 pose + 36 covariance
_SURFEL = struct.Struct("<9dI")          # pos 3, normal 3, res, planarity, mean_time, count u32
_LEN = struct.Struct("<I")


def serialize_submap(s: Submap) -> bytes:
    """Length-prefixed little-endian record; root submaps carry an identity
    odometry edge with zero covariance (seq_no 1 identifies them)."""
    parts = [_HEADER.pack(s.agent_id, s.seq_no, s.t0)]
    parts.append(_POSE7.pack(*pose_to_seven(s.base_pose)))
    parts.append(_UP.pack(*s.up_local))
    if s.odom_edge is not None:
        vals = pose_to_seven(s.odom_edge.relative) + [float(v) for v in
                                                      np.asarray(s.odom_edge.covariance).reshape(36)]
    else:
        vals = pose_to_seven(Pose.identity()) + [0.0] * 36
    parts.append(_ODOM.pack(*vals))
    surf = s.surfels
    for k in range(len(surf)):
        parts.append(_SURFEL.pack(*surf.positions[k], *surf.normals[k],
                                  surf.resolutions[k], surf.planarities[k],
                                  surf.mean_times[k], int(surf.counts[k])))
    body = b"".join(parts)
    return _LEN.pack(len(body)) + body


def parse_submap(buf: bytes, offset: int = 0):
    """Returns (Submap, next_offset)."""
    (length,) = _LEN.unpack_from(buf, offset)
    start = offset + _LEN.size
    end = start + length
    if end > len(buf):
        raise ValueError("truncated submap record")
    pos = start
    agent_id, seq_no, t0 = _HEADER.unpack_from(buf, pos)
    pos += _HEADER.size
    base = seven_to_pose(_POSE7.unpack_from(buf, pos))
    pos += _POSE7.size
    up = np.array(_UP.unpack_from(buf, pos))
    pos += _UP.size
    odom_vals = _ODOM.unpack_from(buf, pos)
    pos += _ODOM.size
    n_surf, rem = divmod(end - pos, _SURFEL.size)
    if rem:
        raise ValueError("surfel array size mismatch")
    positions = np.empty((n_surf, 3))
    normals = np.empty((n_surf, 3))
    resolutions = np.empty(n_surf)
    planarities = np.empty(n_surf)
    mean_times = np.empty(n_surf)
    counts = np.empty(n_surf, dtype=np.int64)
    for k in range(n_surf):
        vals = _SURFEL.unpack_from(buf, pos)
        pos += _SURFEL.size
        positions[k] = vals[0:3]
        normals[k] = vals[3:6]
        resolutions[k] = vals[6]
        planarities[k] = vals[7]
        mean_times[k] = vals[8]
        counts[k] = vals[9]
    odom = None
    if seq_no > 1:
        odom = OdomEdgeMeasurement(seven_to_pose(odom_vals[:7]),
                                   np.array(odom_vals[7:]).reshape(6, 6))
    surf = MapSurfels(positions, normals, resolutions, planarities, mean_times, counts)
    return Submap(agent_id, seq_no, t0, 6.0, base, surf, up / np.linalg.norm(up), odom), end


# --------------------------------------------------------------------------
# database and protocol
# --------------------------------------------------------------------------

class SubmapDatabase:
    """Grow-only map from (agent_id, seq_no) to Submap.

    Entries are canonicalised through the wire format on insert and the
    original bytes are kept: forwarding reuses the stored blob, so every
    agent ends up holding byte-identical records (required for bit-identical
    collective graphs in deterministic mode).
    """

    def __init__(self):
        self.submaps: dict = {}
        self.blobs: dict = {}

    def insert(self, s: Submap, blob: bytes | None = None) -> bool:
        if s.key in self.submaps:
            return False
        if blob is None:
            blob = serialize_submap(s)
            s, _ = parse_submap(blob)
        self.submaps[s.key] = s
        self.blobs[s.key] = blob
        return True

    def __contains__(self, key):
        return key in self.submaps

    def __len__(self):
        return len(self.submaps)

    def agents(self):
        return sorted({a for a, _ in self.submaps})

    def watermark(self, agent_id: int) -> int:
        """Highest contiguous seq_no held for the agent (seq is 1-based)."""
        seq = 0
        while (agent_id, seq + 1) in self.submaps:
            seq += 1
        return seq

    def make_digest(self):
        """Sorted tuple of (agent_id, watermark)."""
        return tuple((a, self.watermark(a)) for a in self.agents())

    def missing_upto(self, agent_id: int, watermark: int):
        return [(agent_id, q) for q in range(1, watermark + 1)
                if (agent_id, q) not in self.submaps]

    def held_beyond(self, agent_id: int, watermark: int):
        out = [key for key in self.submaps if key[0] == agent_id and key[1] > watermark]
        return sorted(out)


@dataclass(frozen=True)
class Message:
    kind: str                # digest | request | payload
    src: int
    dst: int
    digest: tuple = ()
    ids: tuple = ()
    blob: bytes = b""

    def size_bytes(self) -> int:
        if self.kind == "digest":
            return 16 + 12 * len(self.digest)
        if self.kind == "request":
            return 16 + 12 * len(self.ids)
        return 16 + len(self.blob)


def _payload_messages(db: SubmapDatabase, src: int, dst: int, keys, max_batch: int):
    out = []
    for k0 in range(0, len(keys), max_batch):
        blob = b"".join(db.blobs[key] for key in keys[k0: k0 + max_batch])
        out.append(Message("payload", src, dst, blob=blob))
    return out


def sync_round(db: SubmapDatabase, self_id: int, peer_id: int, peer_digest,
               max_batch: int = 5):
    """Anti-entropy step against a peer digest: push what the peer provably
    lacks, request what it advertises and we miss."""
    peer = dict(peer_digest)
    push_keys = []
    for agent in db.agents():
        push_keys.extend(db.held_beyond(agent, peer.get(agent, 0)))
    msgs = _payload_messages(db, self_id, peer_id, sorted(push_keys), max_batch)
    want = []
    for agent, wm in sorted(peer.items()):
        want.extend(db.missing_upto(agent, wm))
    if want:
        msgs.append(Message("request", self_id, peer_id, ids=tuple(want)))
    return msgs


def handle_message(db: SubmapDatabase, self_id: int, msg: Message,
                   max_batch: int = 5):
    """Apply a message; returns response messages."""
    if msg.kind == "digest":
        return sync_round(db, self_id, msg.src, msg.digest, max_batch)
    if msg.kind == "request":
        keys = [key for key in ([tuple(k) for k in msg.ids]) if key in db.submaps]
        return _payload_messages(db, self_id, msg.src, sorted(keys), max_batch)
    if msg.kind == "payload":
        offset = 0
        while offset < len(msg.blob):
            start = offset
            s, offset = parse_submap(msg.blob, offset)
            db.insert(s, blob=msg.blob[start:offset])
        return []
    raise ValueError(f"unknown message kind {msg.kind!r}")


# --------------------------------------------------------------------------
# simulated network
# --------------------------------------------------------------------------

@dataclass
class Link:
    latency: int = 1             # rounds
    drop_prob: float = 0.0
    bandwidth: float = 1e7       # bytes per round


class SimNetwork:
    """Deterministic event loop over simulated rounds.

    Per-link messages are delivered in order or dropped whole; a bandwidth
    cap defers (never reorders) queued traffic.
    """

    def __init__(self, links: dict, seed: int = 0):
        self.links = links
        self.rng = np.random.default_rng(seed)
        self._pending: dict = {link: [] for link in links}
        self.transcript = []

    def send(self, round_no: int, msg: Message):
        link = (msg.src, msg.dst)
        if link not in self.links:
            raise KeyError(f"no link {link}")
        self._pending[link].append((round_no, msg))

    def deliver(self, round_no: int):
        """Messages that arrive at this round, respecting latency, drops and
        per-round bandwidth; processed in deterministic link order."""
        out = []
        for link in sorted(self._pending):
            params = self.links[link]
            budget = params.bandwidth
            keep = []
            for sent_at, msg in self._pending[link]:
                due = sent_at + params.latency
                if due > round_no:
                    keep.append((sent_at, msg))
                    continue
                size = msg.size_bytes()
                if size > budget:
                    # defer in order: bump the send round so it stays queued
                    keep.append((round_no, msg))
                    continue
                budget -= size
                dropped = self.rng.random() < params.drop_prob
                self.transcript.append(
                    (round_no, link[0], link[1], msg.kind, size,
                     "dropped" if dropped else "delivered")
                )
                if not dropped:
                    out.append(msg)
            self._pending[link] = keep
        return out


def run_sync(databases: dict, network: SimNetwork, rounds: int,
             max_batch: int = 5, stop_when_converged: bool = True):
    """Digest broadcast + anti-entropy every round; returns rounds executed."""
    ids = sorted(databases)
    neighbours = {a: sorted({dst for (src, dst) in network.links if src == a}) for a in ids}
    for r in range(rounds):
        for a in ids:
            digest = databases[a].make_digest()
            for b in neighbours[a]:
                network.send(r, Message("digest", a, b, digest=digest))
        for msg in network.deliver(r):
            responses = handle_message(databases[msg.dst], msg.dst, msg, max_batch)
            for resp in responses:
                network.send(r, resp)
        if stop_when_converged and digests_equal(databases):
            return r + 1
    return rounds


def digests_equal(databases: dict) -> bool:
    digests = [databases[a].make_digest() for a in sorted(databases)]
    return all(d == digests[0] for d in digests)


# --------------------------------------------------------------------------
# collective optimisation
# --------------------------------------------------------------------------

@dataclass
class CollectiveReport:
    n_components_before: int
    n_components_after: int
    cross_edges: int
    disjoint_agents: list = field(default_factory=list)


def collective_optimize(db: SubmapDatabase, cfg: PgoConfig | None = None,
                        cross_fitness_min: float = 0.5):
    """Build and optimise the pose graph over every held submap.

    Per-agent chains are inserted in deterministic order with the usual loop
    search; agents without a verified inter-agent closure stay in their own
    gauge component (reported, not fatal). Returns (backend, report).
    """
    cfg = cfg or PgoConfig()
    backend = SlamBackend(cfg)
    for key in sorted(db.submaps):
        backend.add_submap(db.submaps[key], optimize=False)
    g = backend.graph
    comps = g.connected_components()
    before = len(comps)
    cross = 0
    # link components by exhaustive yaw-grid ICP, best fitness first
    while len(comps) > 1:
        best = None
        base_comp = comps[0]
        for other_comp in comps[1:]:
            for a in base_comp:
                for b in other_comp:
                    na, nb = g.nodes[a], g.nodes[b]
                    if len(na.surfels) == 0 or len(nb.surfels) == 0:
                        continue
                    res = icp_with_yaw_grid(na.surfels, nb.surfels,
                                            Pose.identity(), na.up, cfg)
                    if res is None or res.fitness < cross_fitness_min:
                        continue
                    score = (res.fitness, -res.rmse)
                    if best is None or score > best[0]:
                        best = (score, a, b, res)
        if best is None:
            break
        _, a, b, res = best
        g.edges.append(Edge(a, b, "loop_closure", res.pose, res.cov))
        g._bump()
        cross += 1
        g.optimize()
        comps = g.connected_components()
    if g.nodes:
        g.optimize()
    comps = g.connected_components()
    disjoint = []
    if len(comps) > 1:
        for comp in comps[1:]:
            agents = sorted({a for nid in comp for a, _ in g.nodes[nid].members})
            disjoint.extend(agents)
    return backend, CollectiveReport(before, len(comps), cross, sorted(set(disjoint)))

"""Node-to-node contact traces: static topologies, random waypoint and
community-structured mobility.

A trace is a per-epoch symmetric, irreflexive adjacency over ``n_nodes``
nodes. One epoch equals one time unit; positions and residency are
sampled once per epoch, so contacts shorter than an epoch never appear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError


class TopologyKind(str, Enum):
    LINE = "line"
    TREE = "tree"
    RINGSTAR = "ringstar"
    DENSE = "dense"


@dataclass(frozen=True)
class RwpConfig:
    n_nodes: int = 10
    n_epochs: int = 5000
    seed: int = 0
    area_size: float = 500.0
    radio_range: float = 100.0
    pause: int = 10
    speed_min: float = 3.0
    speed_max: float = 7.0

    def validate(self):
        if self.area_size <= 0:
            raise ConfigError("area_size must be positive")
        if self.radio_range <= 0:
            raise ConfigError("radio_range must be positive")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("need 0 < speed_min <= speed_max")
        if self.pause < 0:
            raise ConfigError("pause must be >= 0")
        _check_counts(self.n_nodes, self.n_epochs, min_nodes=1)


@dataclass(frozen=True)
class CseConfig:
    n_nodes: int = 10
    n_epochs: int = 5000
    seed: int = 0
    n_communities: int = 10
    memberships_per_node: int = 2
    transit_time: int = 10
    transit_prob: float = 0.05

    def validate(self):
        if self.n_communities < 1:
            raise ConfigError("n_communities must be >= 1")
        if not 1 <= self.memberships_per_node <= self.n_communities:
            raise ConfigError(
                f"memberships_per_node={self.memberships_per_node} must lie in "
                f"[1, n_communities={self.n_communities}]")
        if not 0.0 <= self.transit_prob <= 1.0:
            raise ConfigError("transit_prob must lie in [0, 1]")
        if self.transit_time < 0:
            raise ConfigError("transit_time must be >= 0")
        _check_counts(self.n_nodes, self.n_epochs, min_nodes=1)


def _check_counts(n_nodes, n_epochs, min_nodes):
    if n_nodes < min_nodes:
        raise ConfigError(f"n_nodes must be >= {min_nodes}, got {n_nodes}")
    if n_epochs < 1:
        raise ConfigError(f"n_epochs must be >= 1, got {n_epochs}")


@dataclass(frozen=True, eq=False)
class ContactTrace:
    """Per-epoch adjacency of shape ``(n_epochs, n_nodes, n_nodes)``.

    ``positions`` (RWP, meters, shape ``(n_epochs, n_nodes, 2)``) and
    ``residency`` (CSE, community id or -1 while in transit, shape
    ``(n_epochs, n_nodes)``) are kept so the trace can be audited.
    """

    kind: str
    adjacency: np.ndarray
    config: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    positions: Optional[np.ndarray] = None
    residency: Optional[np.ndarray] = None
    memberships: Optional[np.ndarray] = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 3 or adj.shape[1] != adj.shape[2]:
            raise ValueError(f"adjacency must be (epochs, n, n), got {adj.shape}")
        adj = adj.copy()
        adj.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)
        for name in ("positions", "residency", "memberships"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr)
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @property
    def n_epochs(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[1]

    def pairs(self, epoch: int):
        """Sorted list of ``(a, b)`` pairs with ``a < b`` in contact at ``epoch``."""
        a, b = np.nonzero(np.triu(self.adjacency[epoch], k=1))
        return list(zip(a.tolist(), b.tolist()))

    def edge_counts(self) -> np.ndarray:
        return self.adjacency.sum(axis=(1, 2)) // 2

    def __eq__(self, other):
        if not isinstance(other, ContactTrace):
            return NotImplemented
        return (self.kind == other.kind and np.array_equal(self.adjacency, other.adjacency)
                and _opt_equal(self.positions, other.positions)
                and _opt_equal(self.residency, other.residency))


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def neighbors(trace: ContactTrace, epoch: int, node: int) -> set:
    """Neighbors of ``node`` at ``epoch``; never contains the node itself."""
    if not 0 <= epoch < trace.n_epochs:
        raise IndexError(f"epoch {epoch} outside [0, {trace.n_epochs})")
    if not 0 <= node < trace.n_nodes:
        raise IndexError(f"node {node} outside [0, {trace.n_nodes})")
    row = trace.adjacency[epoch, node]
    return {int(k) for k in np.flatnonzero(row) if k != node}


def _static_edges(kind: TopologyKind, n):
    if kind is TopologyKind.LINE:
        return [(i, i + 1) for i in range(n - 1)]
    if kind is TopologyKind.DENSE:
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    if kind is TopologyKind.TREE:
        return [(i, c) for i in range(n) for c in (2 * i + 1, 2 * i + 2) if c < n]
    if kind is TopologyKind.RINGSTAR:
        ring = list(range(1, n))
        edges = [(ring[i], ring[i + 1]) for i in range(len(ring) - 1)]
        if len(ring) >= 3:
            edges.append((ring[0], ring[-1]))
        edges += [(0, k) for k in ring[::3]]
        return edges
    raise ConfigError(f"unknown topology {kind!r}")


_STATIC_SHAPES = {
    TopologyKind.LINE: "chain 0-1-...-(n-1)",
    TopologyKind.DENSE: "complete graph",
    TopologyKind.TREE: "stand-in: binary tree in breadth-first order, children of i are 2i+1 and 2i+2",
    TopologyKind.RINGSTAR: "stand-in: ring over nodes 1..n-1, hub 0 linked to ring nodes 1, 4, 7, ...",
}


def build_static_topology(kind, n_nodes: int, n_epochs: int) -> ContactTrace:
    try:
        kind = TopologyKind(kind)
    except ValueError:
        raise ConfigError(f"unknown static topology {kind!r}; expected one of "
                          f"{[k.value for k in TopologyKind]}") from None
    _check_counts(n_nodes, n_epochs, min_nodes=2)
    one = np.zeros((n_nodes, n_nodes), dtype=bool)
    for a, b in _static_edges(kind, n_nodes):
        one[a, b] = one[b, a] = True
    adj = np.broadcast_to(one, (n_epochs, n_nodes, n_nodes))
    return ContactTrace(
        kind=f"static_{kind.value}",
        adjacency=adj,
        config={"topology": kind.value, "n_nodes": n_nodes, "n_epochs": n_epochs},
        metadata={"shape": _STATIC_SHAPES[kind]},
    )


def adjacency_from_positions(positions, radio_range: float) -> np.ndarray:
    """Contact iff Euclidean distance <= ``radio_range`` (per epoch)."""
    pos = np.asarray(positions, dtype=np.float64)
    diff = pos[:, :, None, :] - pos[:, None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    adj = dist <= radio_range
    idx = np.arange(pos.shape[1])
    adj[:, idx, idx] = False
    return adj


def simulate_rwp(cfg: RwpConfig) -> ContactTrace:
    """Random waypoint mobility in a square of side ``area_size``.

    Each node starts at a uniform random point and alternates travel legs
    toward a uniform random waypoint (constant speed drawn from
    ``[speed_min, speed_max]``, arrival clamped to the waypoint) with
    pauses of exactly ``pause`` epochs at the waypoint.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, T = cfg.n_nodes, cfg.n_epochs
    pos = rng.uniform(0.0, cfg.area_size, size=(n, 2))
    target = np.zeros((n, 2))
    speed = np.zeros(n)
    moving = np.zeros(n, dtype=bool)
    pause_left = np.zeros(n, dtype=np.int64)

    positions = np.empty((T, n, 2))
    positions[0] = pos
    legs = []  # (node, depart_epoch, arrive_epoch, speed)
    depart = np.zeros(n, dtype=np.int64)
    for e in range(1, T):
        for i in range(n):
            if pause_left[i] > 0:
                pause_left[i] -= 1
                continue
            if not moving[i]:
                target[i] = rng.uniform(0.0, cfg.area_size, size=2)
                speed[i] = rng.uniform(cfg.speed_min, cfg.speed_max)
                moving[i] = True
                depart[i] = e - 1
            delta = target[i] - pos[i]
            dist = float(np.hypot(delta[0], delta[1]))
            if dist <= speed[i]:
                pos[i] = target[i]
                moving[i] = False
                pause_left[i] = cfg.pause
                legs.append((i, int(depart[i]), e, float(speed[i])))
            else:
                pos[i] = pos[i] + delta * (speed[i] / dist)
        positions[e] = pos

    return ContactTrace(
        kind="rwp",
        adjacency=adjacency_from_positions(positions, cfg.radio_range),
        config={"model": "rwp", **asdict(cfg)},
        metadata={"legs": legs},
        positions=positions,
    )


def simulate_cse(cfg: CseConfig) -> ContactTrace:
    """Community-structured mobility.

    Every node gets ``memberships_per_node`` distinct home communities and
    starts resident in one of them. Each epoch a resident node with at least
    two homes leaves with probability ``transit_prob`` toward another of its
    homes, is unreachable for ``transit_time`` epochs, then becomes resident
    there. Two nodes are in contact iff resident in the same community.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, T = cfg.n_nodes, cfg.n_epochs
    homes = np.array([np.sort(rng.choice(cfg.n_communities, cfg.memberships_per_node, replace=False))
                      for _ in range(n)], dtype=np.int64).reshape(n, cfg.memberships_per_node)
    where = np.array([homes[i, rng.integers(cfg.memberships_per_node)] for i in range(n)], dtype=np.int64)
    destination = np.full(n, -1, dtype=np.int64)
    transit_left = np.zeros(n, dtype=np.int64)

    residency = np.empty((T, n), dtype=np.int64)
    residency[0] = where
    for e in range(1, T):
        for i in range(n):
            if where[i] < 0:
                transit_left[i] -= 1
                if transit_left[i] <= 0:
                    where[i] = destination[i]
                continue
            if cfg.memberships_per_node < 2 or rng.random() >= cfg.transit_prob:
                continue
            others = homes[i][homes[i] != where[i]]
            destination[i] = others[rng.integers(len(others))]
            if cfg.transit_time == 0:
                where[i] = destination[i]
            else:
                where[i] = -1
                transit_left[i] = cfg.transit_time
        residency[e] = where

    return ContactTrace(
        kind="cse",
        adjacency=adjacency_from_residency(residency),
        config={"model": "cse", **asdict(cfg)},
        residency=residency,
        memberships=homes,
    )


def adjacency_from_residency(residency) -> np.ndarray:
    res = np.asarray(residency)
    adj = (res[:, :, None] == res[:, None, :]) & (res[:, :, None] >= 0)
    idx = np.arange(res.shape[1])
    adj[:, idx, idx] = False
    return adj


def generate(kind: str, *, n_nodes=10, n_epochs=5000, seed=0, **params) -> ContactTrace:
    """Build a trace from a kind name such as ``static_line``, ``rwp`` or ``cse``."""
    kind = kind.replace("-", "_")
    if kind.startswith("static_"):
        return build_static_topology(kind[len("static_"):], n_nodes, n_epochs)
    if kind == "rwp":
        return simulate_rwp(RwpConfig(n_nodes=n_nodes, n_epochs=n_epochs, seed=seed, **params))
    if kind == "cse":
        return simulate_cse(CseConfig(n_nodes=n_nodes, n_epochs=n_epochs, seed=seed, **params))
    raise ConfigError(f"unknown trace kind {kind!r}")


# -- trace file ---------------------------------------------------------------

def trace_to_dict(trace: ContactTrace) -> dict:
    out = {
        "kind": trace.kind,
        "config": trace.config,
        "n_nodes": trace.n_nodes,
        "n_epochs": trace.n_epochs,
        "epochs": [[list(p) for p in trace.pairs(e)] for e in range(trace.n_epochs)],
    }
    meta = {k: v for k, v in trace.metadata.items() if k != "legs"}
    if meta:
        out["metadata"] = meta
    if trace.positions is not None:
        out["positions"] = trace.positions.tolist()
    if trace.residency is not None:
        out["residency"] = trace.residency.tolist()
    if trace.memberships is not None:
        out["memberships"] = trace.memberships.tolist()
    return out


def trace_from_dict(doc: dict) -> ContactTrace:
    try:
        n, T = int(doc["n_nodes"]), int(doc["n_epochs"])
        epochs = doc["epochs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"trace document missing field: {exc}") from exc
    if len(epochs) != T:
        raise FormatError(f"n_epochs={T} but {len(epochs)} epoch entries")
    adj = np.zeros((T, n, n), dtype=bool)
    for e, pairs in enumerate(epochs):
        for a, b in pairs:
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise FormatError(f"invalid pair ({a}, {b}) at epoch {e}")
            adj[e, a, b] = adj[e, b, a] = True
    positions = doc.get("positions")
    residency = doc.get("residency")
    memberships = doc.get("memberships")
    return ContactTrace(
        kind=doc.get("kind", "custom"),
        adjacency=adj,
        config=doc.get("config", {}),
        metadata=doc.get("metadata", {}),
        positions=None if positions is None else np.asarray(positions, dtype=np.float64),
        residency=None if residency is None else np.asarray(residency, dtype=np.int64),
        memberships=None if memberships is None else np.asarray(memberships, dtype=np.int64),
    )


def save_trace(trace: ContactTrace, path):
    Path(path).write_text(json.dumps(trace_to_dict(trace)))


def load_trace(path) -> ContactTrace:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}", offset=exc.pos) from exc
    return trace_from_dict(doc)

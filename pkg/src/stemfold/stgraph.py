"""Temporal-anchor spatiotemporal graphs.

One node per (agent, observed timestep) inside the encoder window. Every node
carries an anchor: its elapsed time since that agent's first observation.
Temporal edges link node pairs whose anchor difference is within `max_gap`
(same agent, or agents adjacent in the visible graph); spatial edges link
same-time nodes of adjacent agents. Edge existence is what downstream
attention consumes; weights are kept for inspection/export.

`build_temporal_graph` is the object-level construction; `build_grid` is the
equivalent dense form used by the batched encoder. Tests hold them equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ObservedSample
from .errors import AgentUnobservable

SPATIAL = "spatial"
TEMPORAL = "temporal"


@dataclass
class STNode:
    agent: int
    obs_time: float
    anchor: float
    feature: np.ndarray      # [x, y, vx, vy]


@dataclass
class STEdge:
    src: int
    dst: int
    kind: str                # spatial | temporal
    weight: float            # anchor difference, or adjacency weight


@dataclass
class STGraph:
    nodes: list[STNode]
    edges: list[STEdge]
    max_gap: float

    def edge_set(self) -> set[tuple[int, int, str]]:
        return {(e.src, e.dst, e.kind) for e in self.edges}

    def to_text(self) -> str:
        """Plain-text dump for oracle comparison and debugging."""
        lines = [f"nodes {len(self.nodes)} edges {len(self.edges)} "
                 f"max_gap {self.max_gap:g}"]
        for i, nd in enumerate(self.nodes):
            feat = " ".join(f"{v:.6g}" for v in nd.feature)
            lines.append(f"node {i} agent {nd.agent} t {nd.obs_time:g} "
                         f"anchor {nd.anchor:g} feature {feat}")
        for e in sorted(self.edges, key=lambda e: (e.src, e.dst, e.kind)):
            lines.append(f"edge {e.src} -> {e.dst} {e.kind} {e.weight:g}")
        return "\n".join(lines) + "\n"


def time_anchor(t_i: float, t_0i: float) -> float:
    """Elapsed time since the agent's first observation."""
    if t_i < t_0i:
        raise ValueError(f"observation time {t_i} precedes first time {t_0i}")
    return t_i - t_0i


def temporal_edge(a_i: float, a_j: float, max_gap: float) -> float | None:
    """Signed anchor difference a_i - a_j if within the gap, else None.
    The reverse direction carries the negated weight."""
    if max_gap < 0:
        raise ValueError("max_gap must be >= 0")
    r = a_i - a_j
    return r if abs(r) <= max_gap else None


def build_temporal_graph(sample: ObservedSample, window: tuple[int, int],
                         max_gap: float = math.inf,
                         fully_connected: bool = False) -> STGraph:
    """Construct the spatiotemporal graph for one observed sample over the
    half-open step window [start, stop)."""
    start, stop = window
    stop = min(stop, sample.n_steps)
    n = sample.n_visible

    nodes: list[STNode] = []
    index: dict[tuple[int, int], int] = {}
    first: dict[int, int] = {}
    for agent in range(n):
        steps = [t for t in range(start, stop) if sample.mask[agent, t]]
        if not steps:
            raise AgentUnobservable(
                f"agent {agent} has no observation in window [{start}, {stop})")
        first[agent] = steps[0]
        for t in steps:
            index[(agent, t)] = len(nodes)
            nodes.append(STNode(agent=agent, obs_time=float(t),
                                anchor=time_anchor(float(t), float(steps[0])),
                                feature=sample.states[agent, t].copy()))

    def linked(i: int, j: int) -> bool:
        return fully_connected or sample.adjacency[i, j] > 0

    edges: list[STEdge] = []
    for u, nu in enumerate(nodes):
        for v, nv in enumerate(nodes):
            if u == v:
                continue
            if nu.agent == nv.agent:
                w = temporal_edge(nu.anchor, nv.anchor, max_gap)
                if w is not None:
                    edges.append(STEdge(u, v, TEMPORAL, w))
                continue
            if not linked(nu.agent, nv.agent):
                continue
            w = temporal_edge(nu.anchor, nv.anchor, max_gap)
            if w is not None:
                edges.append(STEdge(u, v, TEMPORAL, w))
            if nu.obs_time == nv.obs_time:
                weight = sample.adjacency[nu.agent, nv.agent]
                if fully_connected and weight <= 0:
                    weight = 1.0
                edges.append(STEdge(u, v, SPATIAL, weight))
    return STGraph(nodes=nodes, edges=edges, max_gap=max_gap)


# -- dense grid form used by the batched encoder --------------------------------


@dataclass
class GridGraph:
    """Fixed (agent, step) grid over the encoder window. Invalid slots stand
    for missing observations and never appear in `neighbors`."""
    valid: np.ndarray       # (N, T_h) bool
    anchors: np.ndarray     # (N, T_h) float, 0 where invalid
    neighbors: np.ndarray   # (N*T_h, N*T_h) bool, row r lists senders into r
    t_history: int

    @property
    def n_agents(self) -> int:
        return self.valid.shape[0]


def build_grid(mask: np.ndarray, adjacency: np.ndarray, t_history: int,
               max_gap: float = math.inf,
               fully_connected: bool = False) -> GridGraph:
    """Dense equivalent of `build_temporal_graph` on the window [0, t_history)."""
    n = mask.shape[0]
    t_h = t_history
    valid = mask[:, :t_h].astype(bool)
    if not valid.any(axis=1).all():
        bad = int(np.flatnonzero(~valid.any(axis=1))[0])
        raise AgentUnobservable(
            f"agent {bad} has no observation in window [0, {t_h})")

    steps = np.arange(t_h, dtype=np.float64)
    firsts = np.array([steps[valid[i]].min() for i in range(n)])
    anchors = np.where(valid, steps[None, :] - firsts[:, None], 0.0)

    flat_anchor = anchors.reshape(-1)
    flat_valid = valid.reshape(-1)
    flat_step = np.tile(steps, n)
    gap_ok = np.abs(flat_anchor[:, None] - flat_anchor[None, :]) <= max_gap
    same_time = flat_step[:, None] == flat_step[None, :]

    agent_of = np.repeat(np.arange(n), t_h)
    same_agent = agent_of[:, None] == agent_of[None, :]
    if fully_connected:
        adjacent = ~same_agent
    else:
        adjacent = adjacency[np.ix_(agent_of, agent_of)] > 0

    neighbors = np.where(same_agent, gap_ok, adjacent & (gap_ok | same_time))
    neighbors &= flat_valid[:, None] & flat_valid[None, :]
    np.fill_diagonal(neighbors, False)
    return GridGraph(valid=valid, anchors=anchors, neighbors=neighbors,
                     t_history=t_h)

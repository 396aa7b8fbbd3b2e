"""Observed datasets: hidden-agent masking, observation corruptions, and the
on-disk container.

A sample is what the model is allowed to see: states of the visible agents,
the visible-visible adjacency, and a per-(agent, time) observation mask.
Splits are stored as one directory per split holding a manifest plus one
tensor file per stacked array (states/adjacency/mask).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensorio
from .physics import SimConfig, TrajectorySet, sample_system, simulate_many

UNIFORM = "uniform"
SYNC_FAILURE = "sync_failure"
ASYNC_FAILURE = "async_failure"


@dataclass
class ObservedSample:
    states: np.ndarray      # (N, T, 4) features [x, y, vx, vy]
    adjacency: np.ndarray   # (N, N) visible-visible weights
    mask: np.ndarray        # (N, T) bool, all true unless corrupted

    @property
    def n_visible(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1]


@dataclass
class ObservedDataset:
    """A stacked split of observed samples (identical shapes across samples)."""
    states: np.ndarray      # (S, N, T, 4)
    adjacency: np.ndarray   # (S, N, N)
    mask: np.ndarray        # (S, N, T) bool
    n_total: int
    split: str = "train"
    seed: int = 0
    pos_scale: float = 1.0
    vel_scale: float = 1.0
    sim_config: dict | None = None

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n_visible(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.shape[2]

    def sample(self, i: int) -> ObservedSample:
        return ObservedSample(self.states[i], self.adjacency[i], self.mask[i])

    def normalized_states(self) -> np.ndarray:
        """States with positions and velocities scaled by the split stats."""
        out = self.states.copy()
        out[..., 0:2] /= self.pos_scale
        out[..., 2:4] /= self.vel_scale
        return out


# -- masking and corruption ops ------------------------------------------------


def mask_hidden(traj: TrajectorySet, m_hidden: int, rng: np.random.Generator,
                hidden: np.ndarray | None = None) -> ObservedSample:
    """Delete `m_hidden` uniformly chosen agents (or an explicit index set);
    the visible-visible sub-adjacency is all that remains of the graph."""
    m = traj.n_agents
    if hidden is None:
        if not 0 <= m_hidden < m:
            raise ValueError(f"m_hidden must be in [0, {m})")
        hidden = rng.choice(m, size=m_hidden, replace=False)
    hidden = np.asarray(hidden, dtype=int)
    visible = np.setdiff1d(np.arange(m), hidden)
    states = traj.states()[visible]
    adjacency = traj.adjacency[np.ix_(visible, visible)]
    mask = np.ones(states.shape[:2], dtype=bool)
    return ObservedSample(states=states, adjacency=adjacency, mask=mask)


def apply_sparsity(sample: ObservedSample, mode: str, keep,
                   rng: np.random.Generator, t_history: int) -> ObservedSample:
    """Drop encoder-window observations. `keep` is a count (or a fraction of
    `t_history` in uniform mode); target steps (t >= t_history) stay observed."""
    n, t = sample.mask.shape
    t_h = min(t_history, t)
    if mode == UNIFORM and not isinstance(keep, (int, np.integer)):
        keep = int(round(float(keep) * t_h))
    keep = int(keep)
    if keep <= 0:
        raise ValueError("keep must be positive")
    if keep > t_h:
        raise ValueError(f"keep={keep} exceeds encoder window {t_h}")

    mask = sample.mask.copy()
    mask[:, :t_h] = False
    if mode == SYNC_FAILURE:
        steps = rng.choice(t_h, size=keep, replace=False)
        mask[:, steps] = True
    elif mode in (ASYNC_FAILURE, UNIFORM):
        for i in range(n):
            steps = rng.choice(t_h, size=keep, replace=False)
            mask[i, steps] = True
    else:
        raise ValueError(f"unknown sparsity mode {mode!r}")
    return replace(sample, mask=mask)


def add_observation_noise(sample: ObservedSample, sigma: float,
                          rng: np.random.Generator,
                          t_history: int) -> ObservedSample:
    """Gaussian observation noise on the encoder window only. The sample is
    expected to be normalized already; `sigma` lives on that scale."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    states = sample.states.copy()
    if sigma > 0:
        t_h = min(t_history, states.shape[1])
        states[:, :t_h] += rng.normal(0.0, sigma, size=states[:, :t_h].shape)
    return replace(sample, states=states)


def build_r_topology(n_visible: int, n_hidden: int, r: int,
                     rng: np.random.Generator,
                     coupling_set=(1.0,)) -> np.ndarray:
    """Adjacency with a complete visible block; every hidden agent touches
    exactly `r` distinct visible agents and no other hidden agent."""
    if not 1 <= r <= n_visible:
        raise ValueError(f"r must be in [1, {n_visible}]")
    m = n_visible + n_hidden
    couplings = np.asarray(coupling_set, dtype=np.float64)

    def draw() -> float:
        return float(couplings[rng.integers(len(couplings))])

    adj = np.zeros((m, m))
    for i in range(n_visible):
        for j in range(i + 1, n_visible):
            adj[i, j] = adj[j, i] = draw()
    for h in range(n_visible, m):
        targets = rng.choice(n_visible, size=r, replace=False)
        for v in targets:
            adj[h, v] = adj[v, h] = draw()
    return adj


# -- split generation ------------------------------------------------------------


def generate_split(cfg: SimConfig, n_samples: int, n_hidden: int, split: str,
                   base_seed: int, r_topology: int | None = None,
                   chunk: int = 512) -> ObservedDataset:
    """Simulate `n_samples` systems and hide agents. Sample `i` uses an rng
    seeded with `base_seed + i`, so generation can be chunked or distributed
    without changing the result."""
    if not 0 <= n_hidden < cfg.n_agents:
        raise ValueError("n_hidden must be in [0, n_agents)")
    all_states, all_adj, all_mask = [], [], []
    for start in range(0, n_samples, chunk):
        stop = min(start + chunk, n_samples)
        systems, rngs = [], []
        for i in range(start, stop):
            rng = np.random.default_rng(base_seed + i)
            system = sample_system(cfg, rng)
            if r_topology is not None:
                adj = build_r_topology(cfg.n_agents - n_hidden, n_hidden,
                                       r_topology, rng, cfg.coupling_set)
                system = (adj, *system[1:])
            systems.append(system)
            rngs.append(rng)
        trajs = simulate_many(systems, cfg)
        for traj, rng in zip(trajs, rngs):
            if r_topology is not None:
                hidden = np.arange(cfg.n_agents - n_hidden, cfg.n_agents)
                obs = mask_hidden(traj, n_hidden, rng, hidden=hidden)
            else:
                obs = mask_hidden(traj, n_hidden, rng)
            all_states.append(obs.states)
            all_adj.append(obs.adjacency)
            all_mask.append(obs.mask)
    return ObservedDataset(states=np.stack(all_states),
                           adjacency=np.stack(all_adj),
                           mask=np.stack(all_mask),
                           n_total=cfg.n_agents, split=split, seed=base_seed,
                           sim_config=cfg.to_dict())


def compute_scales(dataset: ObservedDataset) -> tuple[float, float]:
    """Max-abs normalization scales for positions and velocities."""
    pos = np.abs(dataset.states[..., 0:2]).max()
    vel = np.abs(dataset.states[..., 2:4]).max()
    return float(max(pos, 1e-12)), float(max(vel, 1e-12))


# -- container I/O ------------------------------------------------------------


def save_split(directory: str | Path, dataset: ObservedDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(directory / "states.tens", dataset.states)
    tensorio.write_tensor(directory / "adjacency.tens", dataset.adjacency)
    tensorio.write_tensor(directory / "mask.tens",
                          dataset.mask.astype(np.float64))
    manifest = {
        "format_version": tensorio.FORMAT_VERSION,
        "split": dataset.split,
        "n_samples": len(dataset),
        "n_total": dataset.n_total,
        "n_visible": dataset.n_visible,
        "n_steps": dataset.n_steps,
        "seed": dataset.seed,
        "pos_scale": dataset.pos_scale,
        "vel_scale": dataset.vel_scale,
    }
    if dataset.sim_config:
        for k, v in dataset.sim_config.items():
            manifest[f"sim.{k}"] = v
    tensorio.write_manifest(directory / "manifest", manifest)


def load_split(directory: str | Path) -> ObservedDataset:
    """Load any split written in the container format; `adjacency` defaults to
    fully connected and `mask` to all-true so external trajectory dumps only
    need a states tensor plus a manifest."""
    directory = Path(directory)
    manifest = tensorio.read_manifest(directory / "manifest")
    states = tensorio.read_tensor(directory / "states.tens")
    s, n = states.shape[0], states.shape[1]
    adj_path = directory / "adjacency.tens"
    if adj_path.exists():
        adjacency = tensorio.read_tensor(adj_path)
    else:
        adjacency = np.broadcast_to(1.0 - np.eye(n), (s, n, n)).copy()
    mask_path = directory / "mask.tens"
    if mask_path.exists():
        mask = tensorio.read_tensor(mask_path) > 0.5
    else:
        mask = np.ones(states.shape[:3], dtype=bool)
    sim_config = {k[4:]: v for k, v in manifest.items() if k.startswith("sim.")}
    return ObservedDataset(
        states=states, adjacency=adjacency, mask=mask,
        n_total=int(manifest.get("n_total", n)),
        split=str(manifest.get("split", directory.name)),
        seed=int(manifest.get("seed", 0)),
        pos_scale=float(manifest.get("pos_scale", 1.0)),
        vel_scale=float(manifest.get("vel_scale", 1.0)),
        sim_config=sim_config or None)


def fingerprint(directory: str | Path) -> str:
    """Content hash over the manifest and every tensor file of a split dir
    (or of all split dirs under a dataset root)."""
    directory = Path(directory)
    h = hashlib.sha256()
    files = sorted(directory.rglob("manifest")) + \
        sorted(directory.rglob(f"*{tensorio.TENSOR_SUFFIX}"))
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]

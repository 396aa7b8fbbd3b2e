"""Spring and charged-particle simulators.

Ground truth comes from a symplectic leapfrog (kick-drift-kick) integrator
at a fine raw step, subsampled for the learning problem. Springs follow
Hooke's law F_ij = -k (r_i - r_j) on sampled edges; charged particles all
interact through a softened Coulomb force. Particles live in a 2D box with
elastic wall reflection. Masses are 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import SimulationDiverged

SPRINGS = "springs"
CHARGED = "charged"


@dataclass
class SimConfig:
    system: str = SPRINGS
    n_agents: int = 10
    edge_prob: float = 0.5
    coupling_set: tuple[float, ...] = (1.0,)
    charge_magnitude: float = 1.0
    coulomb_constant: float = 1.0
    softening: float = 0.1
    dt: float = 0.001
    subsample: int = 100
    box_half_width: float = 5.0
    n_steps: int = 60          # sampled trajectory length
    seed: int = 1991

    def __post_init__(self):
        if self.system not in (SPRINGS, CHARGED):
            raise ValueError(f"unknown system {self.system!r}")
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if not (0.0 <= self.edge_prob <= 1.0):
            raise ValueError("edge_prob must be a probability")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")
        if len(self.coupling_set) == 0 or any(k < 0 for k in self.coupling_set):
            raise ValueError("coupling_set must be nonempty with entries >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coupling_set"] = list(self.coupling_set)
        return d


@dataclass
class TrajectorySet:
    """Full ground truth for one simulated sample (all M agents)."""
    positions: np.ndarray        # (M, T, 2)
    velocities: np.ndarray       # (M, T, 2)
    adjacency: np.ndarray        # (M, M), zero diagonal
    config: SimConfig
    charges: np.ndarray | None = None   # (M,) for charged systems
    wall_contacts: int = 0

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1]

    def states(self) -> np.ndarray:
        """(M, T, 4) feature array [x, y, vx, vy]."""
        return np.concatenate([self.positions, self.velocities], axis=-1)


def sample_system(cfg: SimConfig, rng: np.random.Generator):
    """Draw the interaction graph and initial conditions for one sample.

    Returns (adjacency, positions, velocities, charges-or-None). Spring pairs
    connect independently with `edge_prob` and carry a coupling drawn from
    `coupling_set`; charged systems are fully coupled with charges +-q.
    """
    m = cfg.n_agents
    adjacency = np.zeros((m, m))
    charges = None
    if cfg.system == SPRINGS:
        couplings = np.asarray(cfg.coupling_set, dtype=np.float64)
        for i in range(m):
            for j in range(i + 1, m):
                if rng.random() < cfg.edge_prob:
                    k = couplings[rng.integers(len(couplings))]
                    adjacency[i, j] = adjacency[j, i] = k
    else:
        adjacency = 1.0 - np.eye(m)
        charges = np.where(rng.random(m) < 0.5, cfg.charge_magnitude,
                           -cfg.charge_magnitude)

    positions = rng.normal(0.0, 0.5, size=(m, 2))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=m)
    velocities = 0.5 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return adjacency, positions, velocities, charges


def forces(positions: np.ndarray, adjacency: np.ndarray, cfg: SimConfig,
           charges: np.ndarray | None = None) -> np.ndarray:
    """Net force on every particle; pairwise terms are exactly antisymmetric.

    Accepts a single (M, 2) state or a batch (..., M, 2) with matching
    leading axes on `adjacency`/`charges`.
    """
    diff = positions[..., :, None, :] - positions[..., None, :, :]  # r_i - r_j
    if cfg.system == SPRINGS:
        pair = -adjacency[..., :, :, None] * diff
    else:
        sign = np.sign(charges[..., :, None] * charges[..., None, :])
        d2 = (diff ** 2).sum(-1) + cfg.softening ** 2
        inv = adjacency * sign / d2 ** 1.5
        pair = cfg.coulomb_constant * inv[..., :, :, None] * diff
    return pair.sum(axis=-2)


def _reflect(positions: np.ndarray, velocities: np.ndarray,
             half: float) -> np.ndarray:
    """Elastic wall reflection in place; returns per-sample contact counts
    (positions shaped (..., M, 2) -> counts over the trailing two axes)."""
    contacts = np.zeros(positions.shape[:-2], dtype=np.int64)
    for _ in range(16):
        over = positions > half
        under = positions < -half
        if not (over.any() or under.any()):
            break
        positions[over] = 2.0 * half - positions[over]
        positions[under] = -2.0 * half - positions[under]
        velocities[over | under] *= -1.0
        contacts += (over | under).sum(axis=(-2, -1))
    return contacts


def _leapfrog(pos, vel, adjacency, charges, cfg: SimConfig):
    """Batched kick-drift-kick rollout. pos/vel are (..., M, 2); returns
    subsampled (..., T, M, 2) arrays and per-sample wall-contact counts."""
    pos = pos.copy()
    vel = vel.copy()
    t_out = cfg.n_steps
    raw_steps = t_out * cfg.subsample
    dt = cfg.dt
    lead = pos.shape[:-2]

    positions = np.empty((t_out,) + pos.shape)
    velocities = np.empty_like(positions)
    contacts = np.zeros(lead, dtype=np.int64)

    acc = forces(pos, adjacency, cfg, charges)
    for step in range(raw_steps):
        if step % cfg.subsample == 0:
            k = step // cfg.subsample
            positions[k] = pos
            velocities[k] = vel
        # kick-drift-kick; the closing force evaluation opens the next step
        vel += 0.5 * dt * acc
        pos += dt * vel
        contacts += _reflect(pos, vel, cfg.box_half_width)
        acc = forces(pos, adjacency, cfg, charges)
        vel += 0.5 * dt * acc
        if not np.all(np.isfinite(pos)):
            raise SimulationDiverged(f"non-finite state at raw step {step}")

    # time axis first -> move behind the batch/agent layout expected by callers
    return positions, velocities, contacts


def simulate(system, cfg: SimConfig) -> TrajectorySet:
    """Leapfrog rollout of one sampled system, subsampled every `subsample`
    raw steps (the initial state is the first recorded sample)."""
    adjacency, pos, vel, charges = system
    positions, velocities, contacts = _leapfrog(pos, vel, adjacency, charges, cfg)
    return TrajectorySet(positions=positions.transpose(1, 0, 2).copy(),
                         velocities=velocities.transpose(1, 0, 2).copy(),
                         adjacency=adjacency, config=cfg, charges=charges,
                         wall_contacts=int(contacts))


def simulate_many(systems: list, cfg: SimConfig) -> list[TrajectorySet]:
    """Roll out many samples at once (one vectorized integration). Produces
    bit-identical trajectories to per-sample `simulate` calls."""
    adjacency = np.stack([s[0] for s in systems])
    pos = np.stack([s[1] for s in systems])
    vel = np.stack([s[2] for s in systems])
    charged = systems[0][3] is not None
    charges = np.stack([s[3] for s in systems]) if charged else None
    positions, velocities, contacts = _leapfrog(pos, vel, adjacency, charges, cfg)
    # positions is (T, S, M, 2)
    out = []
    for i in range(len(systems)):
        out.append(TrajectorySet(
            positions=positions[:, i].transpose(1, 0, 2).copy(),
            velocities=velocities[:, i].transpose(1, 0, 2).copy(),
            adjacency=adjacency[i], config=cfg,
            charges=charges[i] if charged else None,
            wall_contacts=int(contacts[i])))
    return out


def total_spring_energy(positions: np.ndarray, velocities: np.ndarray,
                        adjacency: np.ndarray) -> float:
    """Kinetic plus spring potential, consistent with the Hooke force law:
    E = sum_i 1/2 |v_i|^2 + sum_{i<j} 1/2 a_ij |r_i - r_j|^2."""
    kinetic = 0.5 * (velocities ** 2).sum()
    diff = positions[:, None, :] - positions[None, :, :]
    d2 = (diff ** 2).sum(-1)
    potential = 0.25 * (adjacency * d2).sum()   # each unordered pair counted twice
    return float(kinetic + potential)


def generate_trajectory(cfg: SimConfig, rng: np.random.Generator,
                        adjacency: np.ndarray | None = None) -> TrajectorySet:
    """Sample a system (unless an adjacency is forced) and simulate it."""
    system = sample_system(cfg, rng)
    if adjacency is not None:
        system = (adjacency, *system[1:])
    return simulate(system, cfg)

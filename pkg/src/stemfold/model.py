"""Encoder, posterior, latent ODE dynamics, decoder, and the training loss.

Two implementations of the encoder coexist:

* a node-level reference (`init_node_repr`, `message`, `attention_scores`,
  `aggregate`, `encode_posterior`) that walks an `STGraph` with plain numpy
  and makes the update rules easy to audit, and
* a batched tape-building path (`encode_window`, `forward_batch`) used for
  training, operating on dense (agent, step) grids.

The test suite pins the two paths to each other; gradients only flow through
the batched one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .data import ObservedSample
from .errors import AgentUnobservable
from .ode import rk4_integrate
from .stgraph import STGraph, GridGraph, build_grid, build_temporal_graph
from .tensor import Tensor

SIGMA_FLOOR = 1e-6
FEATURE_DIM = 4


@dataclass
class ModelConfig:
    d_g: int = 64               # node representation width
    n_layers: int = 2           # spatiotemporal attention layers
    d_ctx: int = 128            # sequence-attention context width
    d_latent: int = 16          # per-agent latent state
    d_ode: int = 128            # hidden width of the dynamics nets
    decoder_hidden: int = 64
    dropout: float = 0.2
    max_gap: float = 5.0        # temporal edge threshold, in sampled steps
    ode_substeps: int = 1       # RK4 steps per output interval
    pe_base: float = 10000.0
    fully_connected: bool = False
    no_attention: bool = False
    no_temporal_encoding: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


class ModelParams:
    """All learnable weights as named leaf tensors."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self._params: dict[str, Tensor] = {}
        dg, dc, dl, do = cfg.d_g, cfg.d_ctx, cfg.d_latent, cfg.d_ode

        def weight(name, fan_in, fan_out):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            self._params[name] = Tensor(
                rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                requires_grad=True)

        def bias(name, n):
            self._params[name] = Tensor(np.zeros(n), requires_grad=True)

        weight("w_init", FEATURE_DIM + 1, dg)
        bias("b_init", dg)
        weight("w_t", dg + 1, dg)
        bias("b_t", dg)
        for l in range(cfg.n_layers):
            weight(f"w_v_{l}", dg, dg)
            weight(f"w_key_{l}", dg, dg)
            weight(f"w_query_{l}", dg, dg)
        weight("w_seq_q", dg, dc)
        weight("w_seq_k", dg, dc)
        weight("w_seq_v", dg, dc)
        weight("w_mu", dc, dl)
        bias("b_mu", dl)
        weight("w_sigma", dc, dl)
        # posterior noise starts small (softplus(-3) ~ 0.05): reconstruction
        # feedback stays crisp from the first steps instead of waiting for
        # the head to crawl down from softplus(0)
        self._params["b_sigma"] = Tensor(np.full(dl, -3.0),
                                         requires_grad=True)
        weight("w_r1", 2 * dl, do)
        bias("b_r1", do)
        weight("w_r2", do, do)
        bias("b_r2", do)
        weight("w_o1", do, do)
        bias("b_o1", do)
        # dynamics output starts at zero: rollouts begin as constants and the
        # unrolled solver cannot blow up before the nets have learned a scale
        self._params["w_o2"] = Tensor(np.zeros((do, dl)), requires_grad=True)
        bias("b_o2", dl)
        weight("w_d1", dl, cfg.decoder_hidden)
        bias("b_d1", cfg.decoder_hidden)
        weight("w_d2", cfg.decoder_hidden, FEATURE_DIM)
        bias("b_d2", FEATURE_DIM)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            p = self._params[k]
            if p.data.shape != tuple(v.shape):
                raise ValueError(f"{k}: shape {v.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(v, dtype=np.float64)


@dataclass
class PosteriorState:
    mu: np.ndarray      # (N, d_latent) or (B, N, d_latent)
    sigma: np.ndarray   # same shape, > 0


# -- positional encoding -------------------------------------------------------


def positional_encoding(dt, d: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal encoding of elapsed time; dt may be scalar or an array, the
    encoding occupies a trailing axis of size d (d must be even)."""
    if d % 2 != 0:
        raise ValueError("encoding dimension must be even")
    dt = np.asarray(dt, dtype=np.float64)
    k = np.arange(d // 2, dtype=np.float64)
    inv = base ** (-2.0 * k / d)
    angle = dt[..., None] * inv
    out = np.empty(dt.shape + (d,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


# -- node-level reference ops ----------------------------------------------------


def _pe(params: ModelParams, dt) -> np.ndarray:
    cfg = params.cfg
    if cfg.no_temporal_encoding:
        return np.zeros(np.shape(np.asarray(dt)) + (cfg.d_g,))
    return positional_encoding(dt, cfg.d_g, cfg.pe_base)


def init_node_repr(feature: np.ndarray, dt_start: float,
                   params: ModelParams) -> np.ndarray:
    """h0 = relu(W_init [o || dt]) + q(dt)."""
    cfg = params.cfg
    dt_feat = 0.0 if cfg.no_temporal_encoding else dt_start
    x = np.concatenate([feature, [dt_feat]])
    pre = x @ params["w_init"].data + params["b_init"].data
    return np.maximum(pre, 0.0) + _pe(params, dt_start)


def message(h_s: np.ndarray, dt_start: float, params: ModelParams,
            layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Returns (h_hat, message) where h_hat = relu(W_t [h || dt]) + q(dt)
    and message = W_v h_hat."""
    cfg = params.cfg
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer must be in [0, {cfg.n_layers})")
    dt_feat = 0.0 if cfg.no_temporal_encoding else dt_start
    x = np.concatenate([h_s, [dt_feat]])
    h_hat = np.maximum(x @ params["w_t"].data + params["b_t"].data, 0.0)
    h_hat = h_hat + _pe(params, dt_start)
    return h_hat, h_hat @ params[f"w_v_{layer}"].data


def attention_scores(h_r: np.ndarray, h_hats: np.ndarray, params: ModelParams,
                     layer: int) -> np.ndarray:
    """Softmax over (W_key h_hat_s) . (W_query h_r) / sqrt(d_g) for each
    neighbor s; uniform when attention is ablated."""
    if len(h_hats) == 0:
        raise ValueError("attention needs at least one neighbor")
    n = len(h_hats)
    if params.cfg.no_attention:
        return np.full(n, 1.0 / n)
    keys = np.asarray(h_hats) @ params[f"w_key_{layer}"].data
    query = h_r @ params[f"w_query_{layer}"].data
    scores = keys @ query / math.sqrt(params.cfg.d_g)
    scores = scores - scores.max()
    e = np.exp(scores)
    return e / e.sum()


def aggregate(h_r: np.ndarray, messages: np.ndarray,
              weights: np.ndarray) -> np.ndarray:
    """Residual update h' = h + sum_s attn_s * message_s; identity with no
    neighbors."""
    if len(messages) == 0:
        return h_r.copy()
    return h_r + np.tensordot(weights, np.asarray(messages), axes=1)


def encode_posterior(graph: STGraph, params: ModelParams) -> PosteriorState:
    """Reference posterior over initial latents, walking the object graph.
    Deterministic, dropout-free; agents are the distinct node agents."""
    cfg = params.cfg
    agents = sorted({nd.agent for nd in graph.nodes})
    n_nodes = len(graph.nodes)
    if n_nodes == 0:
        raise AgentUnobservable("graph has no nodes")

    h = np.stack([init_node_repr(nd.feature, nd.anchor, params)
                  for nd in graph.nodes])
    # receivers aggregate over distinct senders
    senders: list[set[int]] = [set() for _ in range(n_nodes)]
    for e in graph.edges:
        senders[e.dst].add(e.src)

    for layer in range(cfg.n_layers):
        hats_msgs = [message(h[s], graph.nodes[s].anchor, params, layer)
                     for s in range(n_nodes)]
        h_new = h.copy()
        for r in range(n_nodes):
            ss = sorted(senders[r])
            if not ss:
                continue
            hats = [hats_msgs[s][0] for s in ss]
            msgs = [hats_msgs[s][1] for s in ss]
            w = attention_scores(h[r], np.asarray(hats), params, layer)
            h_new[r] = aggregate(h[r], np.asarray(msgs), w)
        h = h_new

    mus, sigmas = [], []
    for agent in agents:
        rows = [i for i, nd in enumerate(graph.nodes) if nd.agent == agent]
        ctx, _ = _sequence_context(h[rows], params)
        mus.append(ctx @ params["w_mu"].data + params["b_mu"].data)
        raw = ctx @ params["w_sigma"].data + params["b_sigma"].data
        sigmas.append(np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0.0)
                      + SIGMA_FLOOR)
    return PosteriorState(mu=np.stack(mus), sigma=np.stack(sigmas))


def _sequence_context(h_agent: np.ndarray,
                      params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Single-head self-attention over one agent's node representations,
    mean-pooled over query positions. Returns (context, pooling weights)."""
    q = h_agent @ params["w_seq_q"].data
    k = h_agent @ params["w_seq_k"].data
    v = h_agent @ params["w_seq_v"].data
    scores = q @ k.T / math.sqrt(params.cfg.d_ctx)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=1, keepdims=True)
    ctx = (attn @ v).mean(axis=0)
    return ctx, attn.mean(axis=0)


# -- batched encoder -------------------------------------------------------------


def stack_grids(grids: list[GridGraph]):
    """Stack per-sample grids into (B, ...) arrays for the batched encoder."""
    valid = np.stack([g.valid for g in grids])
    anchors = np.stack([g.anchors for g in grids])
    neighbors = np.stack([g.neighbors for g in grids])
    return valid, anchors, neighbors


def grids_for(dataset_mask: np.ndarray, adjacency: np.ndarray, t_history: int,
              cfg: ModelConfig) -> list[GridGraph]:
    return [build_grid(dataset_mask[i], adjacency[i], t_history,
                       max_gap=cfg.max_gap, fully_connected=cfg.fully_connected)
            for i in range(dataset_mask.shape[0])]


def encode_window(states: np.ndarray, valid: np.ndarray, anchors: np.ndarray,
                  neighbors: np.ndarray, params: ModelParams,
                  dropout_rng: np.random.Generator | None = None):
    """Posterior parameters for a batch.

    states: (B, N, T_h, 4) normalized observations over the encoder window.
    valid/anchors: (B, N, T_h); neighbors: (B, N*T_h, N*T_h).
    Returns (mu, sigma, pool) with mu/sigma Tensors (B, N, d_latent) and
    pool a plain (B, N, T_h) array of sequence-attention weights.
    """
    cfg = params.cfg
    b, n, t_h, _ = states.shape
    nt = n * t_h
    drop = cfg.dropout if dropout_rng is not None else 0.0

    anchors_flat = anchors.reshape(b, nt)
    if cfg.no_temporal_encoding:
        anchor_feat = np.zeros((b, nt, 1))
        pe = np.zeros((b, nt, cfg.d_g))
    else:
        anchor_feat = anchors_flat[..., None]
        pe = positional_encoding(anchors_flat, cfg.d_g, cfg.pe_base)

    x = np.concatenate([states.reshape(b, nt, FEATURE_DIM), anchor_feat],
                       axis=-1)
    h = T.affine(Tensor(x), params["w_init"], params["b_init"], relu_out=True)
    h = h + pe

    scale = 1.0 / math.sqrt(cfg.d_g)
    for layer in range(cfg.n_layers):
        hat_in = T.concat([h, Tensor(anchor_feat)], axis=-1)
        h_hat = T.affine(hat_in, params["w_t"], params["b_t"], relu_out=True)
        h_hat = h_hat + pe
        msgs = h_hat @ params[f"w_v_{layer}"]
        if cfg.no_attention:
            attn = T.masked_softmax(Tensor(np.zeros((b, nt, nt))), neighbors)
        else:
            keys = h_hat @ params[f"w_key_{layer}"]
            queries = h @ params[f"w_query_{layer}"]
            scores = (queries @ T.transpose(keys, (0, 2, 1))) * scale
            attn = T.masked_softmax(scores, neighbors, axis=-1)
        inc = attn @ msgs
        if drop > 0:
            keep = (dropout_rng.random(inc.shape) >= drop) / (1.0 - drop)
            inc = inc * keep
        h = h + inc

    h_seq = h.reshape(b, n, t_h, cfg.d_g)
    q = h_seq @ params["w_seq_q"]
    k = h_seq @ params["w_seq_k"]
    v = h_seq @ params["w_seq_v"]
    scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.d_ctx))
    key_mask = np.broadcast_to(valid[:, :, None, :], scores.shape)
    attn = T.masked_softmax(scores, key_mask, axis=-1)
    out = attn @ v                                    # (B, N, T_h, d_ctx)
    qmask = valid[:, :, :, None].astype(np.float64)
    counts = qmask.sum(axis=2, keepdims=True)
    ctx = (out * qmask).sum(axis=2) * Tensor(1.0 / counts[:, :, 0, :])

    pool = (attn.data * qmask).sum(axis=2) / counts[:, :, 0, :]  # (B, N, T_h)
    pool = pool * valid                                # zero at missing steps

    mu = T.affine(ctx, params["w_mu"], params["b_mu"])
    sigma = T.softplus(T.affine(ctx, params["w_sigma"], params["b_sigma"])) \
        + SIGMA_FLOOR
    return mu, sigma, pool


def sample_latent(mu: Tensor, sigma: Tensor,
                  rng: np.random.Generator) -> Tensor:
    """Reparameterized draw z = mu + sigma * eps with eps ~ N(0, I)."""
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps


# -- latent dynamics and decoding -------------------------------------------------


def neighbor_gate(adjacency: np.ndarray, fully_connected: bool) -> np.ndarray:
    """(.., N, N) binary interaction gate for the dynamics."""
    n = adjacency.shape[-1]
    if fully_connected:
        gate = np.ones(adjacency.shape)
        eye = np.eye(n, dtype=bool)
        gate[..., eye] = 0.0
        return gate
    return (adjacency > 0).astype(np.float64)


def ode_dynamics(z: Tensor, gate: np.ndarray, params: ModelParams,
                 mask_r: np.ndarray | None = None,
                 mask_o: np.ndarray | None = None) -> Tensor:
    """dz_i/dt = f_O( sum_{j in N_i} f_R([z_i || z_j]) ).

    `gate` is the (B, N, N) binary neighbor matrix; both nets are
    one-hidden-layer ReLU maps. Isolated agents receive f_O(0). Optional
    dropout masks (fixed per forward pass) act on the two hidden layers.
    """
    cfg = params.cfg
    dl = cfg.d_latent
    w_r1 = params["w_r1"]
    zi = z @ w_r1[:dl, :]
    zj = z @ w_r1[dl:, :]
    agg = T.pairwise_relu_sum(zi, zj, params["b_r1"], gate)
    if mask_r is not None:
        agg = agg * mask_r
    deg = gate.sum(axis=-1, keepdims=True)
    pair = agg @ params["w_r2"] + params["b_r2"] * deg
    hidden = T.affine(pair, params["w_o1"], params["b_o1"], relu_out=True)
    if mask_o is not None:
        hidden = hidden * mask_o
    return T.affine(hidden, params["w_o2"], params["b_o2"])


def decode(z: Tensor, params: ModelParams) -> Tensor:
    """Latent -> [x, y, vx, vy], two-layer map with ReLU hidden."""
    hidden = T.affine(z, params["w_d1"], params["b_d1"], relu_out=True)
    return T.affine(hidden, params["w_d2"], params["b_d2"])


def rollout(z0: Tensor, gate: np.ndarray, params: ModelParams, t_future: int,
            dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Integrate the latent ODE over `t_future` unit-spaced steps and decode,
    returning predictions shaped (B, N, T_f, 4). The first prediction is
    decode(z0)."""
    cfg = params.cfg
    masks = (None, None)
    if dropout_rng is not None and cfg.dropout > 0:
        b = z0.shape[0]
        p = cfg.dropout
        masks = tuple((dropout_rng.random((b, 1, cfg.d_ode)) >= p) / (1.0 - p)
                      for _ in range(2))

    def f(z: Tensor) -> Tensor:
        return ode_dynamics(z, gate, params, masks[0], masks[1])

    grid = np.arange(float(t_future))
    states = rk4_integrate(f, z0, grid, substeps=cfg.ode_substeps)
    latents = T.stack(states, axis=2)        # (B, N, T_f, d_latent)
    return decode(latents, params)


# -- loss --------------------------------------------------------------------------


def kl_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over trailing axes,
    one value per batch row."""
    term = T.square(mu) + T.square(sigma) - 1.0 - T.log(T.square(sigma))
    axes = tuple(range(1, len(mu.shape)))
    return term.sum(axis=axes) * 0.5


def elbo_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None,
              post_mu: Tensor, post_sigma: Tensor, obs_std: float) -> Tensor:
    """Negated evidence lower bound, averaged over the batch.

    Reconstruction is a fixed-std Gaussian log-likelihood summed over
    unmasked entries; the KL against a standard-normal prior enters with
    weight 1. Accepts (N, T, 4) or (B, N, T, 4) predictions.
    """
    if obs_std <= 0:
        raise ValueError("obs_std must be > 0")
    single = len(pred.shape) == 3
    if single:
        pred = pred.reshape((1,) + pred.shape)
        target = target[None]
        post_mu = post_mu.reshape((1,) + post_mu.shape)
        post_sigma = post_sigma.reshape((1,) + post_sigma.shape)
        if mask is not None:
            mask = mask[None]
    b = pred.shape[0]
    diff = pred - target
    nll_elem = T.square(diff) * (0.5 / obs_std ** 2) \
        + math.log(obs_std * math.sqrt(2.0 * math.pi))
    if mask is not None:
        nll_elem = nll_elem * mask[..., None].astype(np.float64)
    recon = nll_elem.reshape(b, -1).sum(axis=1)
    kl = kl_standard_normal(post_mu, post_sigma)
    return (recon + kl).sum() * (1.0 / b)


# -- end-to-end -------------------------------------------------------------------


def forward_batch(states_norm: np.ndarray, valid: np.ndarray,
                  anchors: np.ndarray, neighbors: np.ndarray,
                  adjacency: np.ndarray, params: ModelParams, t_history: int,
                  t_future: int, obs_std: float,
                  rng: np.random.Generator | None = None,
                  target_mask: np.ndarray | None = None) -> Tensor:
    """Negated ELBO of one batch. `rng` enables latent sampling and dropout
    (training); without it the posterior mean propagates (evaluation)."""
    cfg = params.cfg
    enc = states_norm[:, :, :t_history]
    mu, sigma, _ = encode_window(enc, valid, anchors, neighbors, params,
                                 dropout_rng=rng)
    z0 = sample_latent(mu, sigma, rng) if rng is not None else mu
    gate = neighbor_gate(adjacency, cfg.fully_connected)
    pred = rollout(z0, gate, params, t_future, dropout_rng=rng)
    target = states_norm[:, :, t_history:t_history + t_future]
    return elbo_loss(pred, target, target_mask, mu, sigma, obs_std)


def forecast(sample: ObservedSample, params: ModelParams, t_history: int,
             t_future: int, rng: np.random.Generator | None = None,
             return_attention: bool = False):
    """Predict the target window of one (normalized) sample. Mean-mode when
    `rng` is None makes the forecast deterministic."""
    cfg = params.cfg
    grid = build_grid(sample.mask, sample.adjacency, t_history,
                      max_gap=cfg.max_gap, fully_connected=cfg.fully_connected)
    valid, anchors, neighbors = stack_grids([grid])
    with T.no_grad():
        mu, sigma, pool = encode_window(
            sample.states[None, :, :t_history], valid, anchors, neighbors,
            params)
        z0 = sample_latent(mu, sigma, rng) if rng is not None else mu
        gate = neighbor_gate(sample.adjacency[None], cfg.fully_connected)
        pred = rollout(z0, gate, params, t_future)
    out = pred.data[0]
    if return_attention:
        return out, pool[0]
    return out


def forecast_batch(states_norm: np.ndarray, valid: np.ndarray,
                   anchors: np.ndarray, neighbors: np.ndarray,
                   adjacency: np.ndarray, params: ModelParams, t_history: int,
                   t_future: int) -> np.ndarray:
    """Mean-mode forecasts for a batch: (B, N, T_f, 4)."""
    with T.no_grad():
        mu, _, _ = encode_window(states_norm[:, :, :t_history], valid,
                                 anchors, neighbors, params)
        gate = neighbor_gate(adjacency, params.cfg.fully_connected)
        pred = rollout(mu, gate, params, t_future)
    return pred.data

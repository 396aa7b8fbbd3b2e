"""Optimization loop: AdamW with decoupled weight decay, cosine learning-rate
decay to zero, global-norm gradient clipping, best-validation checkpointing,
and a CSV log (epoch, train_loss, val_mse, lr, wall_seconds)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import tensorio
from .data import ObservedDataset
from .errors import TrainingDiverged
from .model import (ModelConfig, ModelParams, forecast_batch, forward_batch,
                    grids_for, stack_grids)
from .tensor import Tensor


@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-3
    grad_clip_norm: float = 10.0
    batch_size: int = 128
    micro_batch: int = 32
    epochs: int = 100
    dropout: float = 0.2
    seed: int = 1991
    obs_std: float = 0.01
    t_history: int = 30
    t_future: int = 30
    val_fraction: float = 0.1
    max_gap: float = 5.0
    # ablation flags
    fully_connected: bool = False
    no_attention: bool = False
    no_temporal_encoding: bool = False
    # architecture widths
    d_g: int = 64
    n_layers: int = 2
    d_ctx: int = 128
    d_latent: int = 16
    d_ode: int = 128
    decoder_hidden: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_g=self.d_g, n_layers=self.n_layers, d_ctx=self.d_ctx,
            d_latent=self.d_latent, d_ode=self.d_ode,
            decoder_hidden=self.decoder_hidden, dropout=self.dropout,
            max_gap=self.max_gap, fully_connected=self.fully_connected,
            no_attention=self.no_attention,
            no_temporal_encoding=self.no_temporal_encoding)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total)) / 2, clamped past the end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_steps <= 0 or step >= total_steps:
        frac = 1.0
    else:
        frac = step / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def clip_gradients(grads: list[np.ndarray],
                   max_norm: float = 10.0) -> list[np.ndarray]:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds
    the bound; returns the (possibly scaled) list."""
    sq = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads


class AdamW:
    """Adam with decoupled weight decay (decay applied to the parameters
    directly, not through the moment estimates)."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay > 0:
                update = update + c.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_mse: float
    lr: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list[EpochLog]
    best_val_mse: float
    best_epoch: int
    train_indices: np.ndarray
    val_indices: np.ndarray


def _prepare(dataset: ObservedDataset, cfg: TrainConfig):
    states = dataset.normalized_states()
    grids = grids_for(dataset.mask, dataset.adjacency, cfg.t_history,
                      cfg.model_config())
    valid, anchors, neighbors = stack_grids(grids)
    return states, valid, anchors, neighbors


def _val_mse(states, valid, anchors, neighbors, adjacency, params, cfg,
             idx: np.ndarray) -> float:
    """Mean-mode MSE at the final forecast step over the given samples."""
    errs = []
    for start in range(0, len(idx), cfg.micro_batch):
        sel = idx[start:start + cfg.micro_batch]
        pred = forecast_batch(states[sel], valid[sel], anchors[sel],
                              neighbors[sel], adjacency[sel], params,
                              cfg.t_history, cfg.t_future)
        target = states[sel][:, :, cfg.t_history:cfg.t_history + cfg.t_future]
        err = ((pred[:, :, -1] - target[:, :, -1]) ** 2).mean(axis=(1, 2))
        errs.append(err)
    return float(np.concatenate(errs).mean())


def train(dataset: ObservedDataset, cfg: TrainConfig,
          log_path: str | Path | None = None,
          params: ModelParams | None = None,
          progress: bool = False) -> TrainResult:
    """Minimize the negated ELBO. Deterministic given (dataset, cfg, seed):
    a single rng drives the split, shuffles, latent draws, and dropout."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    need = cfg.t_history + cfg.t_future
    if dataset.n_steps < need:
        raise ValueError(f"dataset has {dataset.n_steps} steps, "
                         f"needs >= {need}")

    states, valid, anchors, neighbors = _prepare(dataset, cfg)
    adjacency = dataset.adjacency
    rng = np.random.default_rng(cfg.seed)

    perm = rng.permutation(len(dataset))
    n_val = int(round(cfg.val_fraction * len(dataset)))
    n_val = min(max(n_val, 1 if cfg.val_fraction > 0 and len(dataset) > 1
                    else 0), len(dataset) - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    if params is None:
        params = ModelParams(cfg.model_config(), np.random.default_rng(cfg.seed))
    tensors = params.tensors()
    opt = AdamW(tensors, cfg)

    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    target_mask = None
    tm = dataset.mask[:, :, cfg.t_history:cfg.t_history + cfg.t_future]
    if not tm.all():
        target_mask = tm

    log: list[EpochLog] = []
    best_val = math.inf
    best_epoch = -1
    best_arrays = params.state_arrays()
    global_step = 0
    lr = cfg.lr

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            params.zero_grad()
            batch_loss = 0.0
            for mstart in range(0, len(batch), cfg.micro_batch):
                sel = batch[mstart:mstart + cfg.micro_batch]
                w = len(sel) / len(batch)
                loss = forward_batch(
                    states[sel], valid[sel], anchors[sel], neighbors[sel],
                    adjacency[sel], params, cfg.t_history, cfg.t_future,
                    cfg.obs_std, rng=rng,
                    target_mask=None if target_mask is None
                    else target_mask[sel])
                val = loss.item()
                if not math.isfinite(val):
                    raise TrainingDiverged(
                        f"loss became non-finite at step {global_step}")
                loss.backward(np.asarray(w))
                batch_loss += w * val
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in tensors]
            clip_gradients(grads, cfg.grad_clip_norm)
            for p, g in zip(tensors, grads):
                p.grad = g
            lr = cosine_lr(global_step, total_steps, cfg.lr)
            opt.step(lr)
            global_step += 1
            epoch_loss += batch_loss * len(batch)
        epoch_loss /= len(train_idx)

        if len(val_idx):
            vmse = _val_mse(states, valid, anchors, neighbors, adjacency,
                            params, cfg, val_idx)
        else:
            vmse = math.nan
        if not math.isnan(vmse) and vmse < best_val:
            best_val = vmse
            best_epoch = epoch
            best_arrays = params.state_arrays()
        log.append(EpochLog(epoch=epoch, train_loss=epoch_loss, val_mse=vmse,
                            lr=lr, wall_seconds=time.perf_counter() - t0))
        if progress:
            print(f"epoch {epoch:3d} loss {epoch_loss:.4f} "
                  f"val_mse {vmse:.6f} lr {lr:.2e}", flush=True)

    if best_epoch >= 0:
        params.load_arrays(best_arrays)
    if log_path is not None:
        write_log(log_path, log)
    return TrainResult(params=params, log=log, best_val_mse=best_val,
                       best_epoch=best_epoch, train_indices=train_idx,
                       val_indices=val_idx)


def write_log(path: str | Path, log: list[EpochLog]) -> None:
    lines = ["epoch,train_loss,val_mse,lr,wall_seconds"]
    for row in log:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.val_mse!r},"
                     f"{row.lr!r},{row.wall_seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory: str | Path, params: ModelParams,
                    extra: dict | None = None) -> None:
    """Manifest (dims, flags, format version) plus one tensor file per
    parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": tensorio.FORMAT_VERSION,
                "kind": "checkpoint"}
    for k, v in params.cfg.to_dict().items():
        manifest[f"model.{k}"] = v
    if extra:
        manifest.update(extra)
    tensorio.write_manifest(directory / "manifest", manifest)
    for name, t in params.named():
        tensorio.write_tensor(directory / f"{name}{tensorio.TENSOR_SUFFIX}",
                              t.data)


def load_checkpoint(directory: str | Path) -> tuple[ModelParams, dict]:
    directory = Path(directory)
    manifest = tensorio.read_manifest(directory / "manifest")
    model_cfg = ModelConfig.from_dict(
        {k[6:]: v for k, v in manifest.items() if k.startswith("model.")})
    params = ModelParams(model_cfg, np.random.default_rng(0))
    arrays = {}
    for name, _ in params.named():
        arrays[name] = tensorio.read_tensor(
            directory / f"{name}{tensorio.TENSOR_SUFFIX}")
    params.load_arrays(arrays)
    return params, manifest

"""Recurrent baselines: a shared-weight per-agent LSTM and a joint LSTM over
the concatenated state of all visible agents. Both predict next-step deltas,
train with teacher forcing for a fixed number of steps, and roll out freely
at evaluation time."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import ObservedDataset
from .errors import TrainingDiverged
from .tensor import Tensor
from .train import AdamW, TrainConfig, clip_gradients, cosine_lr, EpochLog

SINGLE_RNN = "single_rnn"
JOINT_RNN = "joint_rnn"
BASELINE_HIDDEN = 128
TEACHER_FORCING_STEPS = 30


class LSTMParams:
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.hidden = hidden

        def glorot(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)),
                          requires_grad=True)

        self.w_x = glorot(d_in, 4 * hidden)
        self.w_h = glorot(hidden, 4 * hidden)
        self.b = Tensor(np.zeros(4 * hidden), requires_grad=True)
        self.w_out = glorot(hidden, d_in)
        self.b_out = Tensor(np.zeros(d_in), requires_grad=True)

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b, self.w_out, self.b_out]

    def named(self) -> list[tuple[str, Tensor]]:
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b),
                ("w_out", self.w_out), ("b_out", self.b_out)]

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None

    def state_arrays(self):
        return {k: v.data.copy() for k, v in self.named()}

    def load_arrays(self, arrays):
        for k, v in self.named():
            v.data = np.ascontiguousarray(arrays[k], dtype=np.float64)


def lstm_step(p: LSTMParams, x: Tensor, h: Tensor, c: Tensor):
    hd = p.hidden
    z = T.affine(x, p.w_x, p.b) + h @ p.w_h
    i = T.sigmoid(z[:, :hd])
    f = T.sigmoid(z[:, hd:2 * hd])
    g = T.tanh(z[:, 2 * hd:3 * hd])
    o = T.sigmoid(z[:, 3 * hd:])
    c2 = f * c + i * g
    h2 = o * T.tanh(c2)
    return h2, c2


def _fold_inputs(states: np.ndarray, kind: str) -> np.ndarray:
    """(S, N, T, 4) -> (rows, T, D): per-agent rows with shared weights, or
    agent-concatenated rows for the joint variant."""
    s, n, t, d = states.shape
    if kind == SINGLE_RNN:
        return states.reshape(s * n, t, d)
    if kind == JOINT_RNN:
        return states.transpose(0, 2, 1, 3).reshape(s, t, n * d)
    raise ValueError(f"unknown baseline kind {kind!r}")


def _unfold_preds(preds: np.ndarray, kind: str, n: int) -> np.ndarray:
    if kind == SINGLE_RNN:
        rows, t, d = preds.shape
        return preds.reshape(rows // n, n, t, d)
    s, t, nd = preds.shape
    return preds.reshape(s, t, n, nd // n).transpose(0, 2, 1, 3)


def _hold_last_observed(states: np.ndarray, mask: np.ndarray,
                        t_history: int) -> np.ndarray:
    """Zero-order hold over masked encoder observations."""
    if mask.all():
        return states
    out = states.copy()
    s, n, t, _ = out.shape
    for i in range(s):
        for a in range(n):
            for step in range(1, min(t_history, t)):
                if not mask[i, a, step]:
                    out[i, a, step] = out[i, a, step - 1]
    return out


def run_sequence(p: LSTMParams, inputs: np.ndarray, teacher_steps: int,
                 total_steps: int) -> list[Tensor]:
    """Predictions for steps 1..total_steps-1 (one-step deltas, fed back
    after `teacher_steps`). `inputs` is (rows, T, D) ground truth."""
    rows, t_in, d = inputs.shape
    h = Tensor(np.zeros((rows, p.hidden)))
    c = Tensor(np.zeros((rows, p.hidden)))
    preds: list[Tensor] = []
    x = Tensor(inputs[:, 0])
    for step in range(total_steps - 1):
        h, c = lstm_step(p, x, h, c)
        delta = T.affine(h, p.w_out, p.b_out)
        pred = x + delta
        preds.append(pred)
        nxt = step + 1
        if nxt < teacher_steps and nxt < t_in:
            x = Tensor(inputs[:, nxt])
        else:
            x = pred
    return preds


@dataclass
class BaselineResult:
    params: LSTMParams
    log: list[EpochLog]
    best_val_mse: float


def train_baseline(dataset: ObservedDataset, kind: str,
                   cfg: TrainConfig) -> BaselineResult:
    """Teacher-forced sequence training on normalized states (MSE loss over
    every predicted step). Weight decay is dropped: these baselines use plain
    Adam."""
    states = dataset.normalized_states()
    states = _hold_last_observed(states, dataset.mask, cfg.t_history)
    n = dataset.n_visible
    total = cfg.t_history + cfg.t_future
    inputs_all = _fold_inputs(states[:, :, :total], kind)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(dataset))
    n_val = min(max(int(round(cfg.val_fraction * len(dataset))), 1),
                len(dataset) - 1) if cfg.val_fraction > 0 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    d_in = inputs_all.shape[-1]
    p = LSTMParams(d_in, BASELINE_HIDDEN, np.random.default_rng(cfg.seed))
    opt_cfg = TrainConfig(**{**cfg.to_dict(), "weight_decay": 0.0})
    opt = AdamW(p.tensors(), opt_cfg)

    def sample_rows(idx):
        if kind == SINGLE_RNN:
            return np.concatenate([idx * n + a for a in range(n)])
        return idx

    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    log: list[EpochLog] = []
    best_val = math.inf
    best_arrays = p.state_arrays()
    global_step = 0
    lr = cfg.lr

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            rows = sample_rows(sel)
            inp = inputs_all[rows]
            p.zero_grad()
            preds = run_sequence(p, inp, TEACHER_FORCING_STEPS, total)
            stackd = T.stack(preds, axis=1)           # (rows, T-1, D)
            target = inp[:, 1:total]
            loss = T.square(stackd - target).mean()
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDiverged(
                    f"baseline loss non-finite at step {global_step}")
            loss.backward()
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                     for t in p.tensors()]
            clip_gradients(grads, cfg.grad_clip_norm)
            for t_, g_ in zip(p.tensors(), grads):
                t_.grad = g_
            lr = cosine_lr(global_step, total_steps, cfg.lr)
            opt.step(lr)
            global_step += 1
            epoch_loss += val * len(sel)
        epoch_loss /= len(train_idx)

        vmse = math.nan
        if len(val_idx):
            pred = predict_baseline(p, states[val_idx],
                                    dataset.mask[val_idx], kind,
                                    cfg.t_history, cfg.t_future)
            target = states[val_idx][:, :, cfg.t_history:total]
            vmse = float(((pred[:, :, -1] - target[:, :, -1]) ** 2).mean())
            if vmse < best_val:
                best_val = vmse
                best_arrays = p.state_arrays()
        log.append(EpochLog(epoch=epoch, train_loss=epoch_loss, val_mse=vmse,
                            lr=lr, wall_seconds=time.perf_counter() - t0))
    if len(val_idx):
        p.load_arrays(best_arrays)
    return BaselineResult(params=p, log=log, best_val_mse=best_val)


def predict_baseline(p: LSTMParams, states_norm: np.ndarray,
                     mask: np.ndarray, kind: str, t_history: int,
                     t_future: int) -> np.ndarray:
    """Free-running forecast of the target window: (S, N, T_f, D)."""
    n = states_norm.shape[1]
    states_norm = _hold_last_observed(states_norm, mask, t_history)
    inputs = _fold_inputs(states_norm[:, :, :t_history], kind)
    total = t_history + t_future
    with T.no_grad():
        preds = run_sequence(p, inputs, t_history, total)
        out = T.stack(preds[t_history - 1:], axis=1).data
    return _unfold_preds(out, kind, n)

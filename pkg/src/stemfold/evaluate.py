"""Evaluation: forecast-error metrics, baseline and ablation orchestration,
attention-map export, and the hidden-fraction sweep. All evaluation runs in
posterior-mean mode, so reports are deterministic functions of
(dataset, config, seed)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import predict_baseline, train_baseline
from .data import ObservedDataset, ObservedSample, compute_scales, generate_split
from .model import ModelParams, forecast, forecast_batch, grids_for, stack_grids
from .physics import SimConfig
from .train import TrainConfig, TrainResult, train

VARIANTS = ("original", "fully_connected", "no_attention",
            "no_temporal_encoding")


def mse_at_step(pred: np.ndarray, target: np.ndarray,
                step: int) -> tuple[float, float]:
    """Mean and std across samples of the per-sample MSE at forecast step
    `step` (1-indexed), averaged over agents and all feature dims."""
    t_f = pred.shape[2]
    if not 1 <= step <= t_f:
        raise ValueError(f"step must be in [1, {t_f}]")
    err = ((pred[:, :, step - 1] - target[:, :, step - 1]) ** 2).mean(axis=(1, 2))
    return float(err.mean()), float(err.std())


def mse_curve(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-step mean MSE across samples: shape (T_f,)."""
    return ((pred - target) ** 2).mean(axis=(1, 3)).mean(axis=0)


@dataclass
class EvalReport:
    label: str
    mse_mean: dict[int, float]
    mse_std: dict[int, float]
    curve: list[float]
    config_fingerprint: str
    seeds: list[int]

    def headline(self, step: int | None = None) -> float:
        step = step if step is not None else max(self.mse_mean)
        return self.mse_mean[step]

    def to_csv(self) -> str:
        lines = ["step,mse_mean,mse_std"]
        for step in sorted(self.mse_mean):
            lines.append(f"{step},{self.mse_mean[step]!r},"
                         f"{self.mse_std[step]!r}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        last = max(self.mse_mean)
        return (f"{self.label}: MSE@{last} = {self.mse_mean[last]:.6f} "
                f"+- {self.mse_std[last]:.6f} (seeds {self.seeds}, "
                f"config {self.config_fingerprint})")


def report_from_predictions(label: str, pred: np.ndarray, target: np.ndarray,
                            fingerprint: str = "",
                            seeds: list[int] | None = None) -> EvalReport:
    t_f = pred.shape[2]
    means, stds = {}, {}
    for step in range(1, t_f + 1):
        m, s = mse_at_step(pred, target, step)
        means[step], stds[step] = m, s
    return EvalReport(label=label, mse_mean=means, mse_std=stds,
                      curve=[float(x) for x in mse_curve(pred, target)],
                      config_fingerprint=fingerprint, seeds=seeds or [])


def predict_dataset(params: ModelParams, dataset: ObservedDataset,
                    cfg: TrainConfig, chunk: int = 64) -> np.ndarray:
    """Mean-mode forecasts for every sample of a split: (S, N, T_f, 4)."""
    states = dataset.normalized_states()
    grids = grids_for(dataset.mask, dataset.adjacency, cfg.t_history,
                      params.cfg)
    valid, anchors, neighbors = stack_grids(grids)
    preds = []
    for start in range(0, len(dataset), chunk):
        sel = slice(start, start + chunk)
        preds.append(forecast_batch(states[sel], valid[sel], anchors[sel],
                                    neighbors[sel], dataset.adjacency[sel],
                                    params, cfg.t_history, cfg.t_future))
    return np.concatenate(preds)


def evaluate_model(params: ModelParams, dataset: ObservedDataset,
                   cfg: TrainConfig, label: str = "model",
                   fingerprint: str = "") -> EvalReport:
    pred = predict_dataset(params, dataset, cfg)
    target = dataset.normalized_states()[:, :, cfg.t_history:
                                         cfg.t_history + cfg.t_future]
    return report_from_predictions(label, pred, target, fingerprint,
                                   [cfg.seed])


def run_baseline(kind: str, train_ds: ObservedDataset,
                 test_ds: ObservedDataset, cfg: TrainConfig,
                 fingerprint: str = ""):
    """Train one recurrent baseline and evaluate it on the test split."""
    result = train_baseline(train_ds, kind, cfg)
    states = test_ds.normalized_states()
    pred = predict_baseline(result.params, states, test_ds.mask, kind,
                            cfg.t_history, cfg.t_future)
    target = states[:, :, cfg.t_history:cfg.t_history + cfg.t_future]
    report = report_from_predictions(kind, pred, target, fingerprint,
                                     [cfg.seed])
    return report, result


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    d = cfg.to_dict()
    d["fully_connected"] = variant == "fully_connected"
    d["no_attention"] = variant == "no_attention"
    d["no_temporal_encoding"] = variant == "no_temporal_encoding"
    return TrainConfig.from_dict(d)


def run_ablation_suite(train_ds: ObservedDataset, test_ds: ObservedDataset,
                       cfg: TrainConfig, seeds: list[int],
                       variants: tuple[str, ...] = VARIANTS,
                       fingerprint: str = "",
                       progress: bool = False) -> dict[str, list[EvalReport]]:
    """Train every variant under an identical budget for each seed."""
    if not seeds:
        raise ValueError("need at least one seed")
    out: dict[str, list[EvalReport]] = {v: [] for v in variants}
    for variant in variants:
        for seed in seeds:
            vcfg = variant_config(cfg, variant)
            vcfg.seed = seed
            result = train(train_ds, vcfg, progress=progress)
            report = evaluate_model(result.params, test_ds, vcfg,
                                    label=f"{variant}/seed{seed}",
                                    fingerprint=fingerprint)
            report.seeds = [seed]
            out[variant].append(report)
    return out


def ablation_table(suite: dict[str, list[EvalReport]], step: int) -> str:
    lines = ["variant," + ",".join(
        f"seed{r.seeds[0]}" for r in next(iter(suite.values())))]
    for variant, reports in suite.items():
        cells = ",".join(f"{r.mse_mean[step]:.6f}" for r in reports)
        lines.append(f"{variant},{cells}")
    return "\n".join(lines) + "\n"


def export_attention_maps(params: ModelParams, sample: ObservedSample,
                          t_history: int) -> tuple[np.ndarray, np.ndarray]:
    """Sequence-attention pooling weights for one (normalized) sample.

    Returns (scaled, raw): raw rows are probability vectors over each agent's
    observed encoder steps; scaled divides by the map maximum so the display
    range is [0, 1].
    """
    _, pool = forecast(sample, params, t_history, 1, return_attention=True)
    top = pool.max()
    scaled = pool / top if top > 0 else pool.copy()
    return scaled, pool


def hidden_fraction_sweep(base_sim: SimConfig, fractions: list[float],
                          seeds: list[int], cfg: TrainConfig,
                          n_train: int, n_test: int,
                          progress: bool = False) -> dict:
    """Generate, train, and evaluate one model per (fraction, seed); report
    the mean MSE at the final forecast step per fraction plus a monotonicity
    statistic (fraction of increasing adjacent pairs)."""
    if list(fractions) != sorted(fractions):
        raise ValueError("fractions must be sorted ascending")
    per_fraction: dict[float, list[float]] = {f: [] for f in fractions}
    step = cfg.t_future
    for frac in fractions:
        n_hidden = int(round(frac * base_sim.n_agents))
        if not 0 <= n_hidden < base_sim.n_agents:
            raise ValueError(f"fraction {frac} hides {n_hidden} of "
                             f"{base_sim.n_agents} agents")
        for seed in seeds:
            train_ds = generate_split(base_sim, n_train, n_hidden, "train",
                                      base_seed=seed)
            train_ds.pos_scale, train_ds.vel_scale = compute_scales(train_ds)
            test_ds = generate_split(base_sim, n_test, n_hidden, "test",
                                     base_seed=seed + n_train)
            test_ds.pos_scale = train_ds.pos_scale
            test_ds.vel_scale = train_ds.vel_scale
            scfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
            result = train(train_ds, scfg, progress=progress)
            report = evaluate_model(result.params, test_ds, scfg,
                                    label=f"hidden{frac:g}/seed{seed}")
            per_fraction[frac].append(report.mse_mean[step])
    means = {f: float(np.mean(v)) for f, v in per_fraction.items()}
    ordered = [means[f] for f in fractions]
    pairs = max(len(ordered) - 1, 1)
    increasing = sum(b > a for a, b in zip(ordered, ordered[1:]))
    return {"fractions": list(fractions), "per_seed": per_fraction,
            "mean_mse": means,
            "monotonicity": increasing / pairs if len(ordered) > 1 else 1.0}

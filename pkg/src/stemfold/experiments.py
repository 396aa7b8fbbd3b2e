"""Desk-scale experiment orchestration.

Runs (variant, seed) training jobs in worker processes with a JSON result
cache keyed by dataset fingerprint + configuration, so studies resume
cheaply. Each job is deterministic, making cached results exact replays.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from multiprocessing import get_context
from pathlib import Path

from . import __version__

CACHE_SCHEMA = 3


def _set_worker_threads():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"


def ensure_dataset(root: str | Path, system: str, n_agents: int,
                   n_hidden: int, n_train: int, n_test: int, seed: int,
                   n_steps: int = 60) -> Path:
    """Create (or reuse) a dataset container under `root`; returns its dir."""
    from .data import compute_scales, generate_split, save_split
    from .physics import SimConfig

    name = f"{system}{n_agents}_h{n_hidden}_tr{n_train}_te{n_test}_s{seed}"
    out = Path(root) / "datasets" / name
    if (out / "train" / "manifest").exists() and \
            (out / "test" / "manifest").exists():
        return out
    sim = SimConfig(system=system, n_agents=n_agents, n_steps=n_steps,
                    seed=seed)
    train_ds = generate_split(sim, n_train, n_hidden, "train", base_seed=seed)
    train_ds.pos_scale, train_ds.vel_scale = compute_scales(train_ds)
    test_ds = generate_split(sim, n_test, n_hidden, "test",
                             base_seed=seed + n_train)
    test_ds.pos_scale = train_ds.pos_scale
    test_ds.vel_scale = train_ds.vel_scale
    save_split(out / "train", train_ds)
    save_split(out / "test", test_ds)
    return out


def job_key(spec: dict) -> str:
    payload = json.dumps({**spec, "schema": CACHE_SCHEMA,
                          "version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def run_job(spec: dict) -> dict:
    """Train + evaluate one job. spec fields:
    kind: 'model' | 'single_rnn' | 'joint_rnn'; data_dir; cfg (TrainConfig
    dict); variant (model only); seed; save_checkpoint (optional path)."""
    _set_worker_threads()
    from .data import fingerprint, load_split
    from .evaluate import evaluate_model, run_baseline, variant_config
    from .train import TrainConfig, save_checkpoint, train

    t0 = time.perf_counter()
    data_dir = Path(spec["data_dir"])
    train_ds = load_split(data_dir / "train")
    test_ds = load_split(data_dir / "test")
    cfg = TrainConfig.from_dict(spec["cfg"])
    cfg.seed = int(spec["seed"])
    fp = fingerprint(data_dir)

    if spec["kind"] == "model":
        cfg = variant_config(cfg, spec.get("variant", "original"))
        cfg.seed = int(spec["seed"])
        result = train(train_ds, cfg)
        report = evaluate_model(result.params, test_ds, cfg,
                                label=f"{spec.get('variant', 'original')}"
                                      f"/seed{cfg.seed}", fingerprint=fp)
        if spec.get("checkpoint_dir"):
            save_checkpoint(Path(spec["checkpoint_dir"]), result.params,
                            extra={"seed": cfg.seed,
                                   "t_history": cfg.t_history,
                                   "t_future": cfg.t_future,
                                   "obs_std": cfg.obs_std,
                                   "n_visible": train_ds.n_visible,
                                   "dataset_fingerprint": fp})
        best_val = result.best_val_mse
    else:
        report, baseline = run_baseline(spec["kind"], train_ds, test_ds, cfg,
                                        fingerprint=fp)
        best_val = baseline.best_val_mse

    step = cfg.t_future
    return {
        "kind": spec["kind"], "variant": spec.get("variant", ""),
        "seed": int(spec["seed"]), "dataset": str(data_dir),
        "fingerprint": fp,
        "mse_final": report.mse_mean[step],
        "mse_final_std": report.mse_std[step],
        "curve": report.curve,
        "best_val_mse": best_val,
        "wall_seconds": time.perf_counter() - t0,
    }


def run_jobs(specs: list[dict], cache_dir: str | Path,
             workers: int = 2, progress: bool = True) -> list[dict]:
    """Run jobs through the cache; misses execute in spawn-mode worker
    processes (single-threaded BLAS each)."""
    cache = Path(cache_dir) / "results"
    cache.mkdir(parents=True, exist_ok=True)
    results: dict[int, dict] = {}
    pending: list[tuple[int, dict]] = []
    for i, spec in enumerate(specs):
        path = cache / f"{job_key(spec)}.json"
        if path.exists():
            results[i] = json.loads(path.read_text())
        else:
            pending.append((i, spec))

    if pending:
        if progress:
            print(f"[experiments] {len(pending)} jobs to run, "
                  f"{len(results)} cached", flush=True)
        ctx = get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                                 initializer=_set_worker_threads) as pool:
            futures = {pool.submit(run_job, spec): (i, spec)
                       for i, spec in pending}
            for fut in as_completed(futures):
                i, spec = futures[fut]
                res = fut.result()
                (cache / f"{job_key(spec)}.json").write_text(
                    json.dumps(res, indent=1))
                results[i] = res
                if progress:
                    print(f"[experiments] done {res['kind']}"
                          f"{'/' + res['variant'] if res['variant'] else ''}"
                          f" seed={res['seed']} mse={res['mse_final']:.5f}"
                          f" ({res['wall_seconds']:.0f}s)", flush=True)
    return [results[i] for i in range(len(specs))]

"""Command-line entry point.

Subcommands: simulate, train, eval, ablate, sweep, export-attention, plot.
Every flag has a config-file equivalent (``key = value`` lines, flag wins);
the STEMFOLD_SEED environment variable overrides a config-file seed and an
explicit ``--seed`` flag overrides both. Exit codes: 0 success, 2 invalid
arguments, 3 data/fingerprint errors, 4 numerical divergence.

Heavy imports happen inside the command handlers so ``--threads`` /
``--deterministic`` can pin the BLAS thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    from . import tensorio
    if not Path(path).exists():
        raise FileNotFoundError(f"config file {path} not found")
    return tensorio.read_manifest(path)


def _resolve(args: argparse.Namespace, key: str, file_cfg: dict, default):
    """flag > STEMFOLD_SEED (seed only) > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key == "seed" and os.environ.get("STEMFOLD_SEED"):
        return int(os.environ["STEMFOLD_SEED"])
    if key in file_cfg:
        return file_cfg[key]
    return default


def _write_run_manifest(out_dir: Path, command: str, resolved: dict,
                        started: float, fingerprints: dict | None = None):
    from . import tensorio, __version__
    entries = {
        "command": command,
        "argv": " ".join(sys.argv[1:]),
        "code_version": __version__,
        "started_unix": f"{started:.3f}",
        "finished_unix": f"{time.time():.3f}",
    }
    for k, v in resolved.items():
        entries[f"config.{k}"] = v
    for k, v in (fingerprints or {}).items():
        entries[f"fingerprint.{k}"] = v
    tensorio.write_manifest(out_dir / "manifest", entries)


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(
            f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- simulate ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)

    def get(key, default):
        return _resolve(args, key, file_cfg, default)

    seed = int(get("seed", 1991))
    samples = int(get("samples", 10000))
    test_samples = int(get("test_samples", max(samples // 5, 1)))
    system = str(get("system", "springs"))
    agents = int(get("agents", 10))
    hidden = int(get("hidden", 0))
    steps = int(get("steps", 60))
    edge_prob = float(get("edge_prob", 0.5))
    hetero = get("hetero_set", None)
    coupling = tuple(float(x) for x in str(hetero).split(",")) if hetero \
        else (1.0,)
    r_topology = get("r_topology", None)
    r_topology = int(r_topology) if r_topology is not None else None

    out = _prepare_out(args.out, args.force)

    from .data import compute_scales, generate_split, save_split, fingerprint
    from .physics import SimConfig

    sim = SimConfig(system=system, n_agents=agents, edge_prob=edge_prob,
                    coupling_set=coupling, n_steps=steps, seed=seed)
    train_ds = generate_split(sim, samples, hidden, "train", base_seed=seed,
                              r_topology=r_topology)
    pos_scale, vel_scale = compute_scales(train_ds)
    train_ds.pos_scale, train_ds.vel_scale = pos_scale, vel_scale
    test_ds = generate_split(sim, test_samples, hidden, "test",
                             base_seed=seed + samples, r_topology=r_topology)
    test_ds.pos_scale, test_ds.vel_scale = pos_scale, vel_scale
    save_split(out / "train", train_ds)
    save_split(out / "test", test_ds)

    resolved = {"system": system, "agents": agents, "hidden": hidden,
                "samples": samples, "test_samples": test_samples,
                "steps": steps, "edge_prob": edge_prob,
                "coupling_set": list(coupling), "seed": seed,
                "r_topology": r_topology if r_topology is not None else "none"}
    _write_run_manifest(out, "simulate", resolved, started,
                        {"train": fingerprint(out / "train"),
                         "test": fingerprint(out / "test")})
    print(f"wrote {samples} train / {test_samples} test samples to {out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------


ABLATION_FLAGS = {"fc": "fully_connected", "noattn": "no_attention",
                  "notemp": "no_temporal_encoding"}


def _train_config(args, file_cfg) -> "TrainConfig":
    from .train import TrainConfig

    def get(key, default):
        return _resolve(args, key, file_cfg, default)

    base = TrainConfig()
    kwargs = {}
    for key in ("lr", "weight_decay", "grad_clip_norm", "batch_size",
                "micro_batch", "epochs", "dropout", "seed", "obs_std",
                "t_history", "t_future", "val_fraction", "max_gap",
                "d_g", "n_layers", "d_ctx", "d_latent", "d_ode"):
        val = get(key, getattr(base, key))
        kwargs[key] = type(getattr(base, key))(val)
    cfg = TrainConfig(**kwargs)
    ablation = get("ablation", None)
    if ablation:
        if ablation not in ABLATION_FLAGS:
            raise ValueError(f"unknown ablation {ablation!r} "
                             f"(choose from {sorted(ABLATION_FLAGS)})")
        setattr(cfg, ABLATION_FLAGS[ablation], True)
    return cfg


def cmd_train(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    data_dir = Path(args.data)
    if not (data_dir / "train" / "manifest").exists():
        raise FileNotFoundError(f"no train split under {data_dir}")
    out = _prepare_out(args.out, args.force)

    from .data import fingerprint, load_split
    from .train import save_checkpoint, train

    train_ds = load_split(data_dir / "train")
    result = train(train_ds, cfg, log_path=out / "log.csv",
                   progress=not args.quiet)
    fp = fingerprint(data_dir / "train")
    save_checkpoint(out / "checkpoint", result.params, extra={
        "seed": cfg.seed, "t_history": cfg.t_history,
        "t_future": cfg.t_future, "obs_std": cfg.obs_std,
        "n_visible": train_ds.n_visible, "dataset_fingerprint": fp,
        "best_val_mse": result.best_val_mse, "best_epoch": result.best_epoch})
    resolved = cfg.to_dict()
    resolved["ablation"] = getattr(args, "ablation", None) or "none"
    _write_run_manifest(out, "train", resolved, started, {"train_data": fp})
    print(f"best val MSE {result.best_val_mse:.6f} "
          f"(epoch {result.best_epoch}); checkpoint in {out/'checkpoint'}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------------


def _load_for_eval(args):
    from .data import load_split
    from .errors import FingerprintError
    from .train import TrainConfig, load_checkpoint

    params, manifest = load_checkpoint(Path(args.checkpoint))
    split = args.split or "test"
    ds = load_split(Path(args.data) / split)
    t_history = int(manifest.get("t_history", 30))
    t_future = int(manifest.get("t_future", 30))
    if int(manifest.get("n_visible", ds.n_visible)) != ds.n_visible \
            and not args.force:
        raise FingerprintError(
            f"checkpoint was trained with n_visible="
            f"{manifest['n_visible']}, dataset has {ds.n_visible}")
    if ds.n_steps < t_history + t_future:
        raise FingerprintError(
            f"dataset serves {ds.n_steps} steps, checkpoint expects "
            f"{t_history + t_future}")
    cfg = TrainConfig.from_dict({
        "t_history": t_history, "t_future": t_future,
        "obs_std": float(manifest.get("obs_std", 0.01)),
        "seed": int(manifest.get("seed", 0)),
        "max_gap": params.cfg.max_gap,
        "fully_connected": params.cfg.fully_connected,
        "no_attention": params.cfg.no_attention,
        "no_temporal_encoding": params.cfg.no_temporal_encoding,
        "d_g": params.cfg.d_g, "n_layers": params.cfg.n_layers,
        "d_ctx": params.cfg.d_ctx, "d_latent": params.cfg.d_latent,
        "d_ode": params.cfg.d_ode})
    return params, ds, cfg


def _corrupt(ds, args, cfg):
    """Optional evaluation-time corruptions on the normalized test data."""
    import numpy as np
    from .data import apply_sparsity, add_observation_noise, ObservedSample

    if not (args.sparsity_mode or args.noise_sigma):
        return ds, ds.normalized_states()
    rng = np.random.default_rng(int(args.corruption_seed))
    states = ds.normalized_states()
    masks = ds.mask.copy()
    for i in range(len(ds)):
        s = ObservedSample(states[i], ds.adjacency[i], masks[i])
        if args.sparsity_mode:
            keep = float(args.sparsity_keep)
            keep = int(keep) if keep >= 1 else keep
            s = apply_sparsity(s, args.sparsity_mode, keep, rng,
                               cfg.t_history)
        if args.noise_sigma:
            s = add_observation_noise(s, float(args.noise_sigma), rng,
                                      cfg.t_history)
        states[i] = s.states
        masks[i] = s.mask
    out = type(ds)(states=ds.states, adjacency=ds.adjacency, mask=masks,
                   n_total=ds.n_total, split=ds.split, seed=ds.seed,
                   pos_scale=ds.pos_scale, vel_scale=ds.vel_scale,
                   sim_config=ds.sim_config)
    return out, states


def cmd_eval(args) -> int:
    started = time.time()
    params, ds, cfg = _load_for_eval(args)
    out = _prepare_out(args.out, args.force)

    from .data import fingerprint
    from .evaluate import report_from_predictions
    from .model import forecast_batch, grids_for, stack_grids

    ds2, states = _corrupt(ds, args, cfg)
    grids = grids_for(ds2.mask, ds2.adjacency, cfg.t_history, params.cfg)
    valid, anchors, neighbors = stack_grids(grids)
    import numpy as np
    preds = []
    for start in range(0, len(ds2), 64):
        sel = slice(start, start + 64)
        preds.append(forecast_batch(states[sel], valid[sel], anchors[sel],
                                    neighbors[sel], ds2.adjacency[sel],
                                    params, cfg.t_history, cfg.t_future))
    pred = np.concatenate(preds)
    target = ds.normalized_states()[:, :, cfg.t_history:
                                    cfg.t_history + cfg.t_future]
    fp = fingerprint(Path(args.data) / (args.split or "test"))
    report = report_from_predictions("model", pred, target, fp, [cfg.seed])
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary() + "\n")
    _write_run_manifest(out, "eval", {"checkpoint": args.checkpoint,
                                      "data": args.data,
                                      "noise_sigma": args.noise_sigma or 0,
                                      "sparsity_mode":
                                          args.sparsity_mode or "none",
                                      "seed": cfg.seed}, started,
                        {"data": fp})
    print(report.summary())
    return EXIT_OK


# -- ablate -----------------------------------------------------------------------


def cmd_ablate(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = _prepare_out(args.out, args.force)

    from .data import fingerprint, load_split
    from .evaluate import ablation_table, run_ablation_suite, VARIANTS

    data_dir = Path(args.data)
    train_ds = load_split(data_dir / "train")
    test_ds = load_split(data_dir / "test")
    variants = tuple(args.variants.split(",")) if args.variants else VARIANTS
    fp = fingerprint(data_dir)
    suite = run_ablation_suite(train_ds, test_ds, cfg, seeds,
                               variants=variants, fingerprint=fp,
                               progress=not args.quiet)
    table = ablation_table(suite, cfg.t_future)
    (out / "ablation.csv").write_text(table)
    for variant, reports in suite.items():
        for r in reports:
            name = f"report_{variant}_seed{r.seeds[0]}.csv"
            (out / name).write_text(r.to_csv())
    _write_run_manifest(out, "ablate",
                        {**cfg.to_dict(), "seeds": seeds,
                         "variants": list(variants)}, started, {"data": fp})
    print(table)
    return EXIT_OK


# -- sweep ------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    fractions = sorted(float(f) for f in args.fractions.split(","))
    out = _prepare_out(args.out, args.force)

    from .evaluate import hidden_fraction_sweep
    from .physics import SimConfig
    from .plots import plot_trend

    sim = SimConfig(system=args.system, n_agents=int(args.agents),
                    n_steps=cfg.t_history + cfg.t_future, seed=cfg.seed)
    result = hidden_fraction_sweep(sim, fractions, seeds, cfg,
                                   n_train=int(args.samples),
                                   n_test=int(args.test_samples),
                                   progress=not args.quiet)
    lines = ["fraction,mean_mse," + ",".join(f"seed{s}" for s in seeds)]
    for f in fractions:
        per_seed = ",".join(f"{v!r}" for v in result["per_seed"][f])
        lines.append(f"{f},{result['mean_mse'][f]!r},{per_seed}")
    lines.append(f"# monotonicity {result['monotonicity']:.3f}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    plot_trend(fractions, [result["mean_mse"][f] for f in fractions],
               out / "sweep.svg", xlabel="hidden fraction",
               title="forecast error vs hidden fraction")
    _write_run_manifest(out, "sweep",
                        {**cfg.to_dict(), "fractions": fractions,
                         "seeds": seeds, "samples": int(args.samples),
                         "test_samples": int(args.test_samples)}, started)
    print("\n".join(lines))
    return EXIT_OK


# -- export-attention ----------------------------------------------------------------


def cmd_export_attention(args) -> int:
    started = time.time()
    params, ds, cfg = _load_for_eval(args)
    out = _prepare_out(args.out, args.force)

    from . import tensorio
    from .evaluate import export_attention_maps
    from .plots import plot_attention_map

    idx = int(args.sample_index)
    if not 0 <= idx < len(ds):
        raise ValueError(f"sample index {idx} out of range [0, {len(ds)})")
    states = ds.normalized_states()
    from .data import ObservedSample
    sample = ObservedSample(states[idx], ds.adjacency[idx], ds.mask[idx])
    scaled, raw = export_attention_maps(params, sample, cfg.t_history)
    tensorio.write_tensor(out / "attention.tens", scaled)
    lines = [",".join(f"{v!r}" for v in row) for row in scaled]
    (out / "attention.csv").write_text("\n".join(lines) + "\n")
    plot_attention_map(scaled, out / "attention.svg")
    _write_run_manifest(out, "export-attention",
                        {"checkpoint": args.checkpoint, "data": args.data,
                         "sample_index": idx, "seed": cfg.seed}, started)
    print(f"attention map {scaled.shape[0]}x{scaled.shape[1]} written to {out}")
    return EXIT_OK


# -- plot -------------------------------------------------------------------------


def cmd_plot(args) -> int:
    started = time.time()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    from .plots import plot_mse_curves

    curves = {}
    for spec in args.report:
        path = Path(spec)
        label = path.stem
        ys = []
        for line in path.read_text().splitlines()[1:]:
            parts = line.split(",")
            ys.append(float(parts[1]))
        curves[label] = ys
    plot_mse_curves(curves, out)
    print(f"wrote {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="stemfold",
        description="multi-agent forecasting with temporal-anchor graphs "
                    "and a latent ODE")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS worker threads")
    ap.add_argument("--deterministic", action="store_true",
                    help="single-threaded math for bit-exact traces")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="key = value file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true",
                       help="write into a non-empty output directory")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("simulate", help="generate a spring/charged dataset")
    common(p)
    p.add_argument("--system", choices=["springs", "charged"], default=None)
    p.add_argument("--agents", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None,
                   help="number of agents to hide")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--test-samples", dest="test_samples", type=int,
                   default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--edge-prob", dest="edge_prob", type=float, default=None)
    p.add_argument("--hetero-set", dest="hetero_set", default=None,
                   help="comma list of coupling strengths")
    p.add_argument("--r-topology", dest="r_topology", type=int, default=None,
                   help="visible links per hidden agent")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the forecaster")
    common(p)
    for flag, typ in [("lr", float), ("weight-decay", float),
                      ("grad-clip-norm", float), ("batch-size", int),
                      ("micro-batch", int), ("epochs", int),
                      ("dropout", float), ("obs-std", float),
                      ("t-history", int), ("t-future", int),
                      ("val-fraction", float), ("max-gap", float),
                      ("d-g", int), ("n-layers", int), ("d-ctx", int),
                      ("d-latent", int), ("d-ode", int)]:
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ,
                       default=None)
    p.add_argument("--ablation", choices=sorted(ABLATION_FLAGS), default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--sparsity-mode", dest="sparsity_mode", default=None,
                   choices=["uniform", "sync_failure", "async_failure"])
    p.add_argument("--sparsity-keep", dest="sparsity_keep", default="1.0",
                   help="steps to keep (int) or fraction (<1)")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                   default=None)
    p.add_argument("--corruption-seed", dest="corruption_seed", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare model variants")
    common(p)
    for flag, typ in [("lr", float), ("batch-size", int),
                      ("micro-batch", int), ("epochs", int),
                      ("t-history", int), ("t-future", int),
                      ("max-gap", float)]:
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ,
                       default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="1991")
    p.add_argument("--variants", default=None,
                   help="comma subset of original,fully_connected,"
                        "no_attention,no_temporal_encoding")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="hidden-fraction trend study")
    common(p)
    for flag, typ in [("lr", float), ("batch-size", int),
                      ("micro-batch", int), ("epochs", int),
                      ("t-history", int), ("t-future", int)]:
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ,
                       default=None)
    p.add_argument("--system", choices=["springs", "charged"],
                   default="springs")
    p.add_argument("--agents", type=int, default=10)
    p.add_argument("--fractions", default="0.2,0.6")
    p.add_argument("--seeds", default="1991")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--test-samples", dest="test_samples", type=int,
                   default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-attention",
                       help="dump sequence-attention maps for one sample")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--sample-index", dest="sample_index", default="0")
    p.add_argument("--sparsity-mode", dest="sparsity_mode", default=None)
    p.add_argument("--sparsity-keep", dest="sparsity_keep", default="1.0")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float,
                   default=None)
    p.add_argument("--corruption-seed", dest="corruption_seed", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("plot", help="render report CSVs as an SVG chart")
    p.add_argument("--report", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.deterministic:
        _set_threads(1)
    elif args.threads:
        _set_threads(args.threads)

    from .errors import (AgentUnobservable, FingerprintError,
                         NumericalOverflow)
    try:
        return args.func(args)
    except (FileNotFoundError, FileExistsError, FingerprintError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalOverflow as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, AgentUnobservable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

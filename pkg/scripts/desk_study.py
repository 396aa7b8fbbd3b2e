#!/usr/bin/env python3
"""Desk-scale study: ablation ordering, recurrent-baseline comparison, and
the hidden-fraction trend on springs-10. Results cache under --cache so
re-runs are instant; figures and CSVs land in --out.

Usage:
    python scripts/desk_study.py --cache .acceptance-cache --out results/
    python scripts/desk_study.py --quick     # tiny budget smoke study
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from stemfold.experiments import ensure_dataset, run_jobs  # noqa: E402

SEEDS = [1991, 1992, 1993]
VARIANTS = ["original", "no_attention", "fully_connected",
            "no_temporal_encoding"]


def study_specs(cache: Path, quick: bool):
    if quick:
        budget = dict(n_train=120, n_test=40, epochs=6)
        sweep_budget = dict(n_train=80, n_test=30, epochs=4)
        seeds = SEEDS[:1]
    else:
        budget = dict(n_train=1000, n_test=200, epochs=60)
        sweep_budget = dict(n_train=600, n_test=150, epochs=40)
        seeds = SEEDS

    cfg = dict(batch_size=64, micro_batch=32, epochs=budget["epochs"],
               t_history=30, t_future=30)
    data50 = ensure_dataset(cache, "springs", 10, 5, budget["n_train"],
                            budget["n_test"], seed=1991)
    specs = []
    for variant in VARIANTS:
        for seed in seeds:
            specs.append(dict(kind="model", variant=variant,
                              data_dir=str(data50), cfg=cfg, seed=seed))
    for seed in seeds:
        specs.append(dict(kind="single_rnn", data_dir=str(data50), cfg=cfg,
                          seed=seed))
        specs.append(dict(kind="joint_rnn", data_dir=str(data50), cfg=cfg,
                          seed=seed))

    sweep_cfg = dict(batch_size=64, micro_batch=32,
                     epochs=sweep_budget["epochs"], t_history=30, t_future=30)
    for hidden in (2, 6):
        data = ensure_dataset(cache, "springs", 10, hidden,
                              sweep_budget["n_train"], sweep_budget["n_test"],
                              seed=1991)
        for seed in seeds:
            specs.append(dict(kind="model", variant="original",
                              data_dir=str(data), cfg=sweep_cfg, seed=seed,
                              tag=f"hidden{hidden}"))
    return specs, seeds


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", default=".acceptance-cache")
    ap.add_argument("--out", default="results")
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()

    cache = Path(args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs, seeds = study_specs(cache, args.quick)
    results = run_jobs(specs, cache, workers=args.workers)

    by = {}
    for spec, res in zip(specs, results):
        tag = spec.get("tag") or (spec.get("variant") or spec["kind"])
        by.setdefault(tag, {})[spec["seed"]] = res["mse_final"]

    lines = ["group," + ",".join(f"seed{s}" for s in seeds) + ",mean"]
    for tag, per_seed in by.items():
        vals = [per_seed[s] for s in seeds if s in per_seed]
        cells = ",".join(f"{v:.6f}" for v in vals)
        lines.append(f"{tag},{cells},{sum(vals)/len(vals):.6f}")
    table = "\n".join(lines)
    (out / "desk_study.csv").write_text(table + "\n")
    (out / "desk_study.json").write_text(json.dumps(by, indent=1, default=str))
    print(table)

    if "hidden2" in by and "hidden6" in by:
        m20 = sum(by["hidden2"].values()) / len(by["hidden2"])
        m60 = sum(by["hidden6"].values()) / len(by["hidden6"])
        print(f"\nhidden-fraction trend: MSE@30 60% / 20% = {m60 / m20:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())

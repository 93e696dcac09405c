"""Clustered (K=2) vs unclustered (K=1) test MSE on the two-regime synthetic series.

    python3 scripts/clustering_ablation.py --seeds 0 1 2 --output runs/ablation.csv
"""

import argparse
import csv
import time
from dataclasses import replace

import numpy as np

from fedpatch.data import two_regime_dataset
from fedpatch.experiments import ExperimentSpec, run_spec
from fedpatch.federation import FederationConfig
from fedpatch.model import desk_config


def regime_mse(seed: int, k: int, rows: int, fed: FederationConfig) -> float:
    spec = ExperimentSpec("two_regime", 24, (8,), desk_config(horizon=8), replace(fed, clusters=k),
                          clustering=k > 1, seed=seed)
    return run_spec(two_regime_dataset(rows, seed=seed), spec, 8).row.mse


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--rounds", type=int, default=20)
    p.add_argument("--server-optimizer", default="fedadam", choices=["fedadam", "fedavg"])
    p.add_argument("--server-lr", type=float)
    p.add_argument("--output", help="CSV of per-seed results")
    args = p.parse_args(argv)

    fed = FederationConfig(clients=8, clusters=2, rounds=args.rounds, local_epochs=1, batch_size=128, patience=0,
                           server_optimizer=args.server_optimizer)
    if args.server_lr is not None:
        fed = replace(fed, server_lr=args.server_lr)
    t0 = time.perf_counter()
    results = [(s, k, regime_mse(s, k, args.rows, fed)) for s in args.seeds for k in (2, 1)]
    for s, k, mse in results:
        print(f"seed {s} K={k}: test mse {mse:.4f}")
    med = {k: float(np.median([m for _, kk, m in results if kk == k])) for k in (2, 1)}
    print(f"median K=2 {med[2]:.4f}  K=1 {med[1]:.4f}  ({time.perf_counter() - t0:.0f}s)")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "clusters", "mse"])
            w.writerows(results)


if __name__ == "__main__":
    main()

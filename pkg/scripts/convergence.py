"""Federated rounds vs centralized epochs to come within 5% of each curve's best test MSE.

    python3 scripts/convergence.py --rounds 60 --output runs/curves.csv
"""

import argparse
import csv
from dataclasses import replace

from fedpatch.data import bundled_dataset, two_regime_dataset
from fedpatch.experiments import ExperimentSpec, convergence_compare
from fedpatch.federation import FederationConfig
from fedpatch.model import desk_config


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dataset", choices=["bundled", "two_regime"], default="two_regime")
    p.add_argument("--rounds", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    args = p.parse_args(argv)

    ds = bundled_dataset() if args.dataset == "bundled" else two_regime_dataset(2000, seed=args.seed)
    clients = 4 if args.dataset == "bundled" else 8
    fed = FederationConfig(clients=clients, clusters=2, rounds=args.rounds, local_epochs=1, batch_size=128,
                           patience=0)
    spec = ExperimentSpec(ds.name, 24, (8,), desk_config(horizon=8), fed, seed=args.seed)
    res = convergence_compare(ds, replace(spec, centralized_epochs=args.rounds))
    print(f"federated reaches target at round {res.federated_to_target}, "
          f"centralized at epoch {res.centralized_to_target}, speedup {res.speedup}")
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "federated_test_mse", "centralized_test_mse"])
            for i, (a, b) in enumerate(zip(res.federated_curve, res.centralized_curve), start=1):
                w.writerow([i, a, b])


if __name__ == "__main__":
    main()

"""Best weighted accuracy of FedAvg, DP-FedAvg and DPxFin over seeds and client counts.

Writes one run tree per (clients, seed) through the same code path as ``dpxfin train``
and a consolidated report, e.g.::

    python3 scripts/utility_comparison.py --config configs/default.yaml --clients 5 10 15 --seeds 0 1 2 3 4
"""

import argparse
import copy
import logging
from pathlib import Path

import numpy as np

from dpxfin import cli, runs
from dpxfin.config import load_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/default.yaml"))
    ap.add_argument("--clients", type=int, nargs="+", default=[5])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--partition", choices=["iid", "dirichlet"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    base = load_spec(args.config)
    root = base.resolved_output_dir()
    dirs = []
    for k in args.clients:
        best = {m: [] for m in base.federation.methods}
        for seed in args.seeds:
            spec = copy.deepcopy(base)
            spec.seed = seed
            spec.federation.n_clients = k
            if args.partition:
                spec.federation.partition = args.partition
            spec.output_dir = str(root / f"clients{k}" / f"seed{seed}")
            for method, d in cli.cmd_train(spec).items():
                best[method].append(max(float(r["weighted_accuracy"]) for r in runs.read_rounds(d)))
                dirs.append(d)
        print(f"{k} clients, median best weighted accuracy over {len(args.seeds)} seeds:")
        for method, vals in best.items():
            print(f"  {method:<10} {np.median(vals):.4f}  (min {min(vals):.4f}, max {max(vals):.4f})")
    rows = cli.cmd_report(dirs, root)
    print(runs.format_report(rows), end="")


if __name__ == "__main__":
    main()

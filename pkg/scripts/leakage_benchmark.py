"""Reconstruction accuracy of the inversion attack across noise multipliers.

Attacks the same round-1 victims with updates privatized at each sigma' in the grid,
reusing the stored updates of a ``dpxfin train`` run (store_updates must be on)::

    dpxfin train --config configs/leakage.yaml
    python3 scripts/leakage_benchmark.py --config configs/leakage.yaml --sigmas 0 0.2 0.5 1.0
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from dpxfin import runs
from dpxfin.attack import FeatureSpace, noisy_copy, run_attack_benchmark
from dpxfin.config import load_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path, default=Path("configs/leakage.yaml"))
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.2, 0.5, 1.0])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = load_spec(args.config)
    run_dir = spec.resolved_output_dir() / "FedAvg"
    clean = runs.load_probes(run_dir)
    space = FeatureSpace.from_json(json.loads((run_dir / runs.FEATURES_FILE).read_text()))
    by_sigma = {
        f"sigma={s:g}": [noisy_copy(v, s, spec.dp.clip_norm, np.random.default_rng([spec.seed, i]))
                         for i, v in enumerate(clean)]
        for s in args.sigmas
    }
    rows = run_attack_benchmark(by_sigma, spec.attack_config(), spec.attack.n_victims, space)
    for r in rows:
        print(f"{r.method:<12} B={r.batch_size:<3} {100 * r.mean_accuracy:5.1f} +- {100 * r.sd_accuracy:.2f}")
    out = spec.resolved_output_dir() / "leakage_grid.json"
    out.write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n")


if __name__ == "__main__":
    main()

"""Command-line entry point: ``dpxfin {synth,train,attack,report}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from filelock import FileLock, Timeout

from dpxfin import runs
from dpxfin.config import ConfigError, ExperimentSpec, load_spec, spec_from_dict

log = logging.getLogger("dpxfin")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOCK_FILE = ".lock"
SURROGATE_NOTE = ("desk-scale surrogate scoring: categorical cell = exact code match, "
                  "continuous cell = within tau standard deviations")


class RunFailure(RuntimeError):
    pass


def _spec(args) -> ExperimentSpec:
    spec = load_spec(args.config) if args.config else spec_from_dict({})
    if args.seed is not None:
        spec.seed = args.seed
    if getattr(args, "out", None):
        spec.output_dir = args.out
    return spec


def _locked(out_dir: Path) -> FileLock:
    out_dir.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out_dir / LOCK_FILE), timeout=0)


def load_records(spec: ExperimentSpec):
    from dpxfin import data

    d = spec.data
    if d.source == "csv":
        return data.load_csv(d.csv_path, day_of_week=d.day_of_week)
    return data.synthesize_dataset(d.n_rows, d.positive_fraction, n_banks=d.n_banks, n_currencies=d.n_currencies,
                                   rng_seed=spec.seed, separation=d.separation)


# ----------------------------------------------------------------------------- commands


def cmd_synth(spec: ExperimentSpec, out: Path | None = None) -> Path:
    from dpxfin import data

    d = spec.data
    records = data.synthesize_dataset(d.n_rows, d.positive_fraction, n_banks=d.n_banks,
                                      n_currencies=d.n_currencies, rng_seed=spec.seed, separation=d.separation)
    path = out or spec.resolved_output_dir() / "transactions.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    data.write_csv(records, path)
    return path


def cmd_train(spec: ExperimentSpec) -> dict[str, Path]:
    """Train every configured method; returns the run directory per method."""
    from dpxfin import data
    from dpxfin.attack import FeatureSpace
    from dpxfin.federation import run_experiment

    root = spec.resolved_output_dir()
    d = spec.data
    train, holdout = data.prepare_federated_data(
        load_records(spec), d.train_fraction, d.smote_ratio, d.smote_k, rng_seed=spec.seed, columns=d.columns)
    dirs = {}
    for method in spec.federation.methods:
        run_dir = root / method
        config = spec.federation_config(method)
        writer = runs.RunWriter(run_dir)
        try:
            runs.dump_json({**spec.to_dict(), "method": method}, run_dir / runs.CONFIG_FILE)
            runs.dump_json(FeatureSpace.from_encoding(train.encoding).to_json(), run_dir / runs.FEATURES_FILE)
            result = run_experiment(config, train, holdout, on_round=writer.round)
            final = {
                "setting": "IID" if config.partition == "iid" else "Non-IID",
                "clients": config.n_clients,
                "method": method,
                "sigma": config.dp.base_sigma if config.is_private else None,
                "seed": spec.seed,
                **result.final_metrics,
            }
            runs.dump_json(final, run_dir / runs.FINAL_FILE)
        except Exception as exc:
            runs.dump_json({"method": method, "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc()}, run_dir / runs.ERROR_FILE)
            raise RunFailure(f"{method} failed: {exc}") from exc
        finally:
            writer.close()
        dirs[method] = run_dir
        log.info("%s done: holdout accuracy %.4f (best round %d)", method, final["accuracy"], final["best_round"])
    return dirs


def cmd_attack(spec: ExperimentSpec, run_root: Path) -> list[dict]:
    from dpxfin.attack import FeatureSpace, run_attack_benchmark

    dirs = runs.method_run_dirs(run_root)
    if not dirs:
        raise RunFailure(f"no method run directories under {run_root}")
    victims, space = {}, None
    for d in dirs:
        method = json.loads((d / runs.CONFIG_FILE).read_text())["method"]
        try:
            victims[method] = runs.load_probes(d)
        except FileNotFoundError as exc:
            raise RunFailure(str(exc)) from exc
        space = space or FeatureSpace.from_json(json.loads((d / runs.FEATURES_FILE).read_text()))
    config = spec.attack_config()
    try:
        rows = run_attack_benchmark(victims, config, spec.attack.n_victims, space)
    except ValueError as exc:
        raise RunFailure(str(exc)) from exc
    batch = {m: int(v[0].batch.shape[0]) for m, v in victims.items()}
    summary = [{**r.as_dict(), "batch_size": batch[r.method], "scoring": SURROGATE_NOTE} for r in rows]
    runs.dump_json(summary, run_root / "attack_summary.json")
    lines = [f"# {SURROGATE_NOTE}", f"{'Method':<10} {'B':>4} {'Acc(%)':>16} {'victims':>7}  config"]
    for r in summary:
        acc = f"{100 * r['mean_accuracy']:.1f} +- {100 * r['sd_accuracy']:.2f}"
        lines.append(f"{r['method']:<10} {r['batch_size']:>4} {acc:>16} {r['n_victims']:>7}  {r['config_hash']}")
    (run_root / "attack_summary.txt").write_text("\n".join(lines) + "\n")
    return summary


def cmd_report(run_dirs, out_dir: Path) -> list[dict]:
    rows = runs.collect_report(run_dirs)
    if not rows:
        raise RunFailure("no readable run directories")
    runs.write_report(rows, out_dir)
    return rows


# ----------------------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpxfin", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in [("synth", "write a synthetic transactions CSV"),
                           ("train", "run the configured federated methods"),
                           ("attack", "benchmark gradient inversion on stored updates")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="experiment YAML or JSON (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the experiment seed")

    p = sub.add_parser("report", help="consolidate final metrics into one table")
    p.add_argument("run_dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, default=Path("."), help="where report.csv/report.txt go")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            rows = cmd_report(args.run_dirs, args.out)
            print(runs.format_report(rows), end="")
            return EXIT_OK
        spec = _spec(args)
        out = spec.resolved_output_dir()
        with _locked(out):
            if args.command == "synth":
                print(cmd_synth(spec))
            elif args.command == "train":
                for method, d in cmd_train(spec).items():
                    print(f"{method}\t{d}")
            else:
                print((out / "attack_summary.txt").read_text() if cmd_attack(spec, out) else "", end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Timeout:
        print(f"run directory is locked by another process: {out}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure with partial artifacts left in place
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Run-directory artifacts: round metrics, ledgers, stored updates, final metrics, reports."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Iterable

import numpy as np

from dpxfin.federation import METHODS, RoundRecord, UpdateProbe

log = logging.getLogger(__name__)

ROUNDS_FILE = "rounds.csv"
LEDGER_FILE = "ledger.jsonl"
FINAL_FILE = "final_metrics.json"
CONFIG_FILE = "config.json"
FEATURES_FILE = "features.json"
ERROR_FILE = "error.json"
UPDATES_DIR = "updates"
UPDATES_INDEX = "index.jsonl"

ROUND_FIELDS = [
    "method", "round", "weighted_accuracy", "tp", "fp", "tn", "fn",
    "participants", "client_ids", "client_accuracies", "client_test_counts", "lambdas", "sigmas",
]
REPORT_FIELDS = ["setting", "clients", "method", "sigma", "accuracy", "f1", "precision", "recall", "run_dir"]


def _join(values) -> str:
    return ";".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in values)


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunWriter:
    """Streams one method's artifacts into its run directory as rounds complete."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        for stale in (ROUNDS_FILE, LEDGER_FILE, FINAL_FILE, ERROR_FILE):
            (self.run_dir / stale).unlink(missing_ok=True)
        updates = self.run_dir / UPDATES_DIR
        if updates.exists():
            for f in updates.iterdir():
                f.unlink()
        self._rounds = open(self.run_dir / ROUNDS_FILE, "w", newline="")
        self._csv = csv.DictWriter(self._rounds, ROUND_FIELDS, lineterminator="\n")
        self._csv.writeheader()
        self._ledger = None
        self._updates_index = None

    def round(self, record: RoundRecord) -> None:
        c = record.confusion
        self._csv.writerow({
            "method": record.method,
            "round": record.round_index,
            "weighted_accuracy": repr(record.weighted_accuracy),
            "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn,
            "participants": _join(record.participants),
            "client_ids": _join(record.client_ids),
            "client_accuracies": _join(record.local_accuracies),
            "client_test_counts": _join(record.test_counts),
            "lambdas": _join(record.lambdas),
            "sigmas": _join(record.sigmas),
        })
        self._rounds.flush()
        if record.ledger is not None:
            if self._ledger is None:
                self._ledger = open(self.run_dir / LEDGER_FILE, "w")
            for row in record.ledger.records():
                self._ledger.write(json.dumps(row, sort_keys=True) + "\n")
            self._ledger.flush()
        for probe in record.probes:
            self._store_probe(probe)

    def _store_probe(self, probe: UpdateProbe) -> None:
        updates = self.run_dir / UPDATES_DIR
        if self._updates_index is None:
            updates.mkdir(exist_ok=True)
            self._updates_index = open(updates / UPDATES_INDEX, "w")
        name = f"round{probe.round_index:04d}_client{probe.client_id:04d}.npz"
        np.savez(updates / name, global_params=probe.global_params, observed=probe.observed,
                 batch=probe.batch, labels=probe.labels)
        meta = {
            "file": name,
            "round": probe.round_index,
            "client_id": probe.client_id,
            "method": probe.method,
            "sigma": probe.sigma,
            "clip_norm": probe.clip_norm,
            "lr": probe.lr,
            "layer_dims": list(probe.layer_dims),
        }
        self._updates_index.write(json.dumps(meta, sort_keys=True) + "\n")
        self._updates_index.flush()

    def close(self) -> None:
        for fh in (self._rounds, self._ledger, self._updates_index):
            if fh is not None:
                fh.close()


def read_rounds(run_dir) -> list[dict]:
    with open(Path(run_dir) / ROUNDS_FILE, newline="") as fh:
        return list(csv.DictReader(fh))


def read_ledger(run_dir) -> list[dict]:
    path = Path(run_dir) / LEDGER_FILE
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def load_probes(run_dir) -> list[UpdateProbe]:
    updates = Path(run_dir) / UPDATES_DIR
    index = updates / UPDATES_INDEX
    if not index.exists():
        raise FileNotFoundError(
            f"{run_dir} has no stored updates; rerun training with federation.store_updates: true"
        )
    probes = []
    for line in index.read_text().splitlines():
        meta = json.loads(line)
        with np.load(updates / meta["file"]) as arrays:
            probes.append(UpdateProbe(
                round_index=meta["round"],
                client_id=meta["client_id"],
                method=meta["method"],
                sigma=meta["sigma"],
                clip_norm=meta["clip_norm"],
                lr=meta["lr"],
                layer_dims=tuple(meta["layer_dims"]),
                global_params=arrays["global_params"],
                observed=arrays["observed"],
                batch=arrays["batch"],
                labels=arrays["labels"],
            ))
    return probes


def method_run_dirs(path) -> list[Path]:
    """``path`` itself if it is a method run directory, else its method subdirectories."""
    path = Path(path)
    if (path / CONFIG_FILE).exists():
        return [path]
    return [path / m for m in METHODS if (path / m / CONFIG_FILE).exists()]


def report_row(run_dir: Path) -> dict:
    config = json.loads((run_dir / CONFIG_FILE).read_text())
    final = json.loads((run_dir / FINAL_FILE).read_text())
    fed = config["federation"]
    return {
        "setting": "IID" if fed["partition"] == "iid" else "Non-IID",
        "clients": int(fed["n_clients"]),
        "method": config["method"],
        "sigma": None if config["method"] == "FedAvg" else float(config["dp"]["sigma"]),
        "accuracy": final["accuracy"],
        "f1": final["f1"],
        "precision": final["precision"],
        "recall": final["recall"],
        "run_dir": str(run_dir),
    }


def collect_report(paths: Iterable) -> list[dict]:
    rows = []
    for p in paths:
        dirs = method_run_dirs(p)
        if not dirs:
            log.warning("skipping %s: no run directories found", p)
        for d in dirs:
            try:
                rows.append(report_row(d))
            except (OSError, KeyError, ValueError) as exc:
                log.warning("skipping malformed run directory %s: %s", d, exc)
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r["setting"], r["clients"], order.get(r["method"], len(order)), r["run_dir"]))
    return rows


def format_report(rows: list[dict]) -> str:
    header = f"{'Setting':<8} {'Clients':>7} {'Method':<10} {'Sigma':>5} {'Accuracy':>8} {'F1':>6} {'Precision':>9} {'Recall':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        sigma = "--" if r["sigma"] is None else f"{r['sigma']:.1f}"
        lines.append(
            f"{r['setting']:<8} {r['clients']:>7} {r['method']:<10} {sigma:>5} "
            f"{r['accuracy']:>8.4f} {r['f1']:>6.4f} {r['precision']:>9.4f} {r['recall']:>6.4f}"
        )
    return "\n".join(lines) + "\n"


def write_report(rows: list[dict], out_dir: Path) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / "report.csv", out_dir / "report.txt"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})
    txt_path.write_text(format_report(rows))
    return csv_path, txt_path

"""Experiment configuration: one YAML (or JSON) file per experiment, validated up front."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from dpxfin.attack import AttackConfig
from dpxfin.dp import DpConfig
from dpxfin.federation import METHODS, FederationConfig

OUTPUT_ROOT_ENV = "DPXFIN_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic"
    csv_path: str | None = None
    n_rows: int = 50_000
    positive_fraction: float = 0.01
    n_banks: int = 30
    n_currencies: int = 5
    separation: float = 2.0
    day_of_week: bool = False
    columns: list[str] | None = None
    train_fraction: float = 0.8
    smote_ratio: float | None = 1.0
    smote_k: int = 5


@dataclass
class FederationSection:
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    n_clients: int = 5
    participation_fraction: float = 1.0
    rounds: int = 20
    partition: str = "dirichlet"
    alpha: float = 1.0
    local_test_fraction: float = 0.1
    store_updates: bool = False
    probe_batch_size: int = 64


@dataclass
class DpSection:
    clip_norm: float = 1.0
    sigma: float = 1.0


@dataclass
class TrainingSection:
    hidden_dims: list[int] = field(default_factory=lambda: [64, 32])
    epochs: int = 1
    batch_size: int = 64
    lr: float = 0.01


@dataclass
class AttackSection:
    batch_size: int = 64
    steps: int = 400
    step_size: float = 0.1
    n_ensemble: int = 8
    match_loss: str = "cosine"
    tau: float = 0.3
    label_strategy: str = "known"
    victim_round: int | None = 1
    relu_smoothing: list[float] | None = field(default_factory=lambda: [2.0, 500.0])
    categorical_warmup: float = 0.5
    n_victims: int = 10


@dataclass
class ExperimentSpec:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    federation: FederationSection = field(default_factory=FederationSection)
    dp: DpSection = field(default_factory=DpSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    attack: AttackSection = field(default_factory=AttackSection)

    def validate(self) -> None:
        problems = []
        d, f, p = self.data, self.federation, self.dp
        if p.sigma < 0:
            problems.append(f"dp.sigma must be >= 0 (got {p.sigma})")
        if p.clip_norm <= 0:
            problems.append(f"dp.clip_norm must be > 0 (got {p.clip_norm})")
        if not 0 < f.participation_fraction <= 1:
            problems.append(f"federation.participation_fraction must lie in (0, 1] (got {f.participation_fraction})")
        if f.alpha <= 0:
            problems.append(f"federation.alpha must be > 0 (got {f.alpha})")
        if f.n_clients < 1:
            problems.append(f"federation.n_clients must be >= 1 (got {f.n_clients})")
        if f.rounds < 1:
            problems.append(f"federation.rounds must be >= 1 (got {f.rounds})")
        if f.partition not in ("iid", "dirichlet"):
            problems.append(f"federation.partition must be 'iid' or 'dirichlet' (got {f.partition!r})")
        bad = [m for m in f.methods if m not in METHODS]
        if bad or not f.methods:
            problems.append(f"federation.methods must be a non-empty subset of {list(METHODS)} (got {f.methods})")
        if d.source not in ("synthetic", "csv"):
            problems.append(f"data.source must be 'synthetic' or 'csv' (got {d.source!r})")
        if d.source == "csv" and not d.csv_path:
            problems.append("data.csv_path is required when data.source is 'csv'")
        if not 0 < d.train_fraction < 1:
            problems.append(f"data.train_fraction must lie in (0, 1) (got {d.train_fraction})")
        if d.source == "synthetic" and not 0 < d.positive_fraction < 0.5:
            problems.append(f"data.positive_fraction must lie in (0, 0.5) (got {d.positive_fraction})")
        if d.smote_ratio is not None and not 0 < d.smote_ratio <= 1:
            problems.append(f"data.smote_ratio must lie in (0, 1] or be null (got {d.smote_ratio})")
        if self.training.lr <= 0 or self.training.batch_size < 1 or self.training.epochs < 0:
            problems.append("training needs lr > 0, batch_size >= 1, epochs >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        try:
            self.attack_config()
        except ValueError as exc:
            raise ConfigError(f"attack: {exc}") from exc

    def federation_config(self, method: str) -> FederationConfig:
        f, t = self.federation, self.training
        return FederationConfig(
            method=method,
            n_clients=f.n_clients,
            participation_fraction=f.participation_fraction,
            rounds=f.rounds,
            dp=DpConfig(self.dp.clip_norm, self.dp.sigma),
            hidden_dims=tuple(t.hidden_dims),
            epochs=t.epochs,
            batch_size=t.batch_size,
            lr=t.lr,
            experiment_seed=self.seed,
            partition=f.partition,
            alpha=f.alpha,
            local_test_fraction=f.local_test_fraction,
            store_updates=f.store_updates,
            probe_batch_size=f.probe_batch_size,
        )

    def attack_config(self) -> AttackConfig:
        a = dataclasses.asdict(self.attack)
        a.pop("n_victims")
        a["relu_smoothing"] = tuple(a["relu_smoothing"]) if a["relu_smoothing"] else None
        return AttackConfig(rng_seed=self.seed, **a)

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, blob, where: str):
    if not isinstance(blob, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping, got {type(blob).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(blob) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in blob.items():
        sub = _SECTIONS.get(name) if cls is ExperimentSpec else None
        kwargs[name] = _build(sub, value, name) if sub else value
    return cls(**kwargs)


_SECTIONS = {
    "data": DataSection,
    "federation": FederationSection,
    "dp": DpSection,
    "training": TrainingSection,
    "attack": AttackSection,
}


def spec_from_dict(blob: dict | None) -> ExperimentSpec:
    try:
        spec = _build(ExperimentSpec, blob or {}, "")
        spec.validate()
    except TypeError as exc:
        raise ConfigError(f"bad value type: {exc}") from exc
    return spec


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    blob = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return spec_from_dict(blob)

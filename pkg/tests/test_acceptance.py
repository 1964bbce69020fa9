"""Acceptance suite: one test per criterion; the terminal summary lists PASS/FAIL/SKIP per criterion.

Criterion 12 needs the real HI_Small transactions file; point DPXFIN_HI_SMALL_CSV at it to run it.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from dpxfin import cli, data, dp, nn, reputation, runs
from dpxfin.config import load_spec, spec_from_dict
from dpxfin.federation import FederationConfig, build_clients, initial_model, run_experiment, run_round
from oracles import reputation_round
from test_nn import fd_gradient

criterion = pytest.mark.criterion


@criterion(1, "reputation round matches straight-line oracle on 200 instances")
def test_reputation_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(200):
        n, dim = rng.integers(3, 13), rng.integers(10, 101)
        models = rng.normal(size=(n, dim)) * rng.uniform(0.01, 10)
        glob, ledger = reputation.run_reputation_round(models)
        ref = reputation_round(models.tolist())
        for field in ("distances", "scores", "reputation", "lambdas"):
            np.testing.assert_allclose(getattr(ledger, field), ref[field], rtol=0, atol=1e-9)
        np.testing.assert_allclose(ledger.raw_reputation, ref["scores"], rtol=0, atol=1e-9)
        assert abs(ledger.p70 - ref["p70"]) <= 1e-9 and abs(ledger.p50 - ref["p50"]) <= 1e-9
        np.testing.assert_allclose(glob, ref["global_model"], rtol=0, atol=1e-9)
    assert time.perf_counter() - start < 5.0


@criterion(2, "clipping never exceeds C and lands on C when it binds")
def test_clipping_exactness():
    rng = np.random.default_rng(7)
    for c in (0.5, 1.0, 5.0):
        for _ in range(10_000):
            x = rng.normal(size=rng.integers(1, 65)) * 10.0 ** rng.uniform(-3, 3)
            out = dp.clip_update(x, c)
            norm = np.linalg.norm(out)
            assert norm <= c
            if np.linalg.norm(x) > c:
                assert abs(norm - c) <= 1e-12


@criterion(3, "Gaussian noise has mean 0 and std sigma' * C")
@pytest.mark.parametrize("sigma, c", [(1.0, 1.0), (0.2, 1.0), (2.0, 3.0)])
def test_noise_calibration(sigma, c):
    rng = np.random.default_rng(3)
    draws = np.stack([dp.add_gaussian_noise(np.zeros(10), sigma, c, rng) for _ in range(10_000)])
    assert np.abs(draws.mean(axis=0)).max() <= 0.05
    assert np.abs(draws.std(axis=0, ddof=1) / (sigma * c) - 1).max() <= 0.05


@criterion(4, "lambda tiers match hand fixture and are monotone")
def test_lambda_tier_contract():
    np.testing.assert_array_equal(reputation.assign_lambdas([0.6, 0.4, 0.0]), [0.2, 0.5, 1.0])
    rng = np.random.default_rng(4)
    for _ in range(1_000):
        reps = rng.dirichlet(np.ones(rng.integers(1, 20)))
        lam = reputation.assign_lambdas(reps)
        order = np.argsort(reps, kind="stable")
        assert (np.diff(lam[order]) <= 0).all()
        assert set(lam) <= set(dp.LAMBDA_TIERS)


@criterion(5, "DPxFin(sigma=0, uniform) == DP-FedAvg(sigma=0) == FedAvg over 5 rounds")
def test_method_nesting():
    recs = data.synthesize_dataset(4_000, 0.02, rng_seed=5)
    train, _ = data.prepare_federated_data(recs, rng_seed=5)
    # a bound no update reaches, so clipping is inactive and only the noise path differs
    no_noise = dp.DpConfig(clip_norm=1e6, base_sigma=0.0)
    configs = [FederationConfig(method="FedAvg", n_clients=5, experiment_seed=5),
               FederationConfig(method="DP-FedAvg", n_clients=5, experiment_seed=5, dp=no_noise),
               FederationConfig(method="DPxFin", n_clients=5, experiment_seed=5, dp=no_noise,
                                force_uniform_reputation=True)]
    states = []
    for cfg in configs:
        clients = build_clients(train, cfg)
        model = initial_model(train.features.shape[1], cfg)
        trace = []
        for t in range(1, 6):
            model, record = run_round(model, clients, cfg, t)
            trace.append(model.params)
            if cfg.method == "DPxFin":
                assert record.lambdas == (1.0,) * 5
        states.append(trace)
    for other in states[1:]:
        for a, b in zip(states[0], other):
            assert np.abs(a - b).max() <= 1e-9


@criterion(6, "backward matches finite differences on a 20-16-8-2 net")
def test_gradient_correctness():
    rng = np.random.default_rng(6)
    checked, worst = 0, 0.0
    while checked < 1_000:
        model = nn.init_model((20, 16, 8, 2), int(rng.integers(1 << 30)))
        x, y = rng.normal(size=(32, 20)), rng.integers(0, 2, 32)
        coords = rng.choice(model.n_params, size=min(model.n_params, 1_000 - checked), replace=False)
        g, fd = nn.backward(model, x, y)[coords], fd_gradient(model, x, y, coords)
        den = np.maximum(np.abs(g), np.abs(fd))
        rel = np.where(den > 0, np.abs(g - fd) / np.where(den > 0, den, 1.0), 0.0)
        worst = max(worst, rel.max())
        checked += coords.size
    assert worst < 1e-4


@criterion(7, "IID and Dirichlet(1.0) partitions assign every row once, no empty client")
def test_partition_conservation():
    labels = data.synthesize_dataset(50_000, 0.01, rng_seed=0).is_laundering.to_numpy()
    for seed in range(20):
        for k in (5, 10, 15):
            for plan in (data.partition_iid(labels.size, k, seed), data.partition_dirichlet(labels, k, 1.0, seed)):
                shards = plan.shards()
                assert min(s.size for s in shards) > 0
                np.testing.assert_array_equal(np.sort(np.concatenate(shards)), np.arange(labels.size))


@criterion(8, "identical client models give uniform reps, lambda 0.2, unchanged global")
def test_degenerate_round():
    rng = np.random.default_rng(8)
    with np.errstate(all="raise"):
        for n in (1, 2, 5, 12):
            common = rng.normal(size=30)
            glob, ledger = reputation.run_reputation_round([common.copy() for _ in range(n)])
            np.testing.assert_allclose(ledger.reputation, 1.0 / n, rtol=0, atol=1e-15)
            np.testing.assert_array_equal(ledger.lambdas, 0.2)
            np.testing.assert_allclose(glob, common, rtol=0, atol=1e-12)


@criterion(9, "desk-scale utility ordering FedAvg >= DPxFin >= DP-FedAvg")
@pytest.mark.slow
def test_utility_ordering():
    start = time.perf_counter()
    best = {m: [] for m in ("FedAvg", "DP-FedAvg", "DPxFin")}
    for seed in range(5):
        recs = data.synthesize_dataset(50_000, 0.01, rng_seed=seed)
        train, _ = data.prepare_federated_data(recs, smote_ratio=1.0, rng_seed=seed)
        for method in best:
            cfg = FederationConfig(method=method, n_clients=5, rounds=20, partition="dirichlet", alpha=1.0,
                                   dp=dp.DpConfig(1.0, 1.0), experiment_seed=seed)
            res = run_experiment(cfg, train)
            best[method].append(max(r.weighted_accuracy for r in res.records))
    med = {m: float(np.median(v)) for m, v in best.items()}
    gap = float(np.median(np.subtract(best["DPxFin"], best["DP-FedAvg"])))
    print(f"median best weighted accuracy {med}; median DPxFin - DP-FedAvg gap {gap:.4f}")
    assert med["FedAvg"] >= med["DPxFin"] >= med["DP-FedAvg"]
    assert gap > 0
    assert time.perf_counter() - start < 600


def _write_config(tmp_path, blob):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(blob))
    return path


@criterion(10, "clean updates leak >= 15 points more than DPxFin updates (B=16)")
@pytest.mark.slow
def test_leakage_ordering(tmp_path):
    blob = yaml.safe_load(Path(__file__).parent.parent.joinpath("configs", "leakage.yaml").read_text())
    blob["output_dir"] = str(tmp_path / "leak")
    cfg = _write_config(tmp_path, blob)
    spec = load_spec(cfg)
    assert spec.attack.batch_size == 16 and len(spec.training.hidden_dims) == 1
    assert spec.data.columns and len(spec.data.columns) == 8
    cli.cmd_train(spec)
    rows = {r["method"]: r for r in cli.cmd_attack(spec, spec.resolved_output_dir())}
    clean, private = rows["FedAvg"], rows["DPxFin"]
    print(f"FedAvg {100 * clean['mean_accuracy']:.1f} +- {100 * clean['sd_accuracy']:.2f}, "
          f"DPxFin {100 * private['mean_accuracy']:.1f} +- {100 * private['sd_accuracy']:.2f}")
    assert clean["n_victims"] == private["n_victims"] == 10
    assert clean["mean_accuracy"] - private["mean_accuracy"] >= 0.15


@criterion(11, "two train runs with identical config and seed give byte-identical round metrics")
def test_determinism(tmp_path):
    blob = {"seed": 11, "data": {"n_rows": 3_000, "positive_fraction": 0.02},
            "federation": {"n_clients": 5, "rounds": 3, "participation_fraction": 0.6}}
    outputs = []
    for name in ("a", "b"):
        blob["output_dir"] = str(tmp_path / name)
        assert cli.main(["train", "--config", str(_write_config(tmp_path, blob))]) == 0
        outputs.append({m: (tmp_path / name / m / runs.ROUNDS_FILE).read_bytes()
                        for m in ("FedAvg", "DP-FedAvg", "DPxFin")})
    assert outputs[0] == outputs[1]


HI_SMALL = os.environ.get("DPXFIN_HI_SMALL_CSV")


@criterion(12, "real HI_Small data: DPxFin accuracy within 0.03 of the 0.89-0.91 band (data-dependent)")
@pytest.mark.skipif(not HI_SMALL or not Path(HI_SMALL).exists(),
                    reason="set DPXFIN_HI_SMALL_CSV to the HI_Small transactions file to run")
def test_real_data_reproduction(tmp_path):
    spec = spec_from_dict({"seed": 0, "output_dir": str(tmp_path / "hi"),
                           "data": {"source": "csv", "csv_path": HI_SMALL},
                           "federation": {"methods": ["DPxFin"], "n_clients": 5, "rounds": 20},
                           "dp": {"sigma": 1.0, "clip_norm": 1.0}})
    dirs = cli.cmd_train(spec)
    final = runs.report_row(dirs["DPxFin"])
    print(f"DPxFin accuracy on HI_Small: {final['accuracy']:.4f}")
    assert 0.89 - 0.03 <= final["accuracy"] <= 0.91 + 0.03

"""Server-side reputation scoring and reputation-weighted aggregation.

One round goes: plain mean of the client models -> each client's distance to
that mean -> consistency score ``1 - d / max(d)`` -> normalized reputation ->
percentile-tiered noise factor, and finally the reputation-weighted model sum.
Nothing is carried between rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WEIGHT_SUM_TOL = 1e-9
UNIFORM_FALLBACK_EPS = 1e-12


@dataclass(frozen=True)
class ReputationLedger:
    round_index: int
    client_ids: tuple[int, ...]
    distances: np.ndarray
    scores: np.ndarray
    raw_reputation: np.ndarray
    reputation: np.ndarray
    lambdas: np.ndarray
    p70: float
    p50: float
    uniform_fallback: bool = False
    extra: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        """One flat record per client, for line-delimited output."""
        return [
            {
                "round": self.round_index,
                "client_id": int(cid),
                "distance": float(self.distances[i]),
                "score": float(self.scores[i]),
                "raw_reputation": float(self.raw_reputation[i]),
                "reputation": float(self.reputation[i]),
                "lambda": float(self.lambdas[i]),
                "p70": self.p70,
                "p50": self.p50,
                "uniform_fallback": self.uniform_fallback,
            }
            for i, cid in enumerate(self.client_ids)
        ]


def _stack(models) -> np.ndarray:
    models = [np.asarray(m, dtype=np.float64).ravel() for m in models]
    if not models:
        raise ValueError("need at least one model")
    lengths = {m.size for m in models}
    if len(lengths) != 1:
        raise ValueError(f"model lengths differ: {sorted(lengths)}")
    return np.vstack(models)


def temp_aggregate(models) -> np.ndarray:
    return _stack(models).mean(axis=0)


def compute_distances(models, temp_global) -> np.ndarray:
    stacked = _stack(models)
    temp_global = np.asarray(temp_global, dtype=np.float64).ravel()
    if temp_global.size != stacked.shape[1]:
        raise ValueError(f"temporary model has length {temp_global.size}, clients have {stacked.shape[1]}")
    return np.linalg.norm(stacked - temp_global, axis=1)


def consistency_scores(distances) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        raise ValueError("need at least one distance")
    dmax = d.max()
    if dmax == 0:
        return np.ones_like(d)
    return 1.0 - d / dmax


def normalize_reputation(raw_scores) -> np.ndarray:
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("need at least one score")
    if (raw < 0).any():
        raise ValueError("reputation scores must be non-negative")
    total = raw.sum()
    if total < UNIFORM_FALLBACK_EPS:
        return np.full(raw.size, 1.0 / raw.size)
    return raw / total


def percentile_thresholds(reps) -> tuple[float, float]:
    """(P70, P50) by linear interpolation between closest ranks."""
    p70, p50 = np.percentile(np.asarray(reps, dtype=np.float64), [70, 50], method="linear")
    return float(p70), float(p50)


def assign_lambdas(normalized_reps) -> np.ndarray:
    reps = np.asarray(normalized_reps, dtype=np.float64)
    if reps.size == 0:
        raise ValueError("need at least one reputation")
    p70, p50 = percentile_thresholds(reps)
    return np.where(reps >= p70, 0.2, np.where(reps >= p50, 0.5, 1.0))


def aggregate_weighted(models, weights) -> np.ndarray:
    stacked = _stack(models)
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != stacked.shape[0]:
        raise ValueError(f"{w.size} weights for {stacked.shape[0]} models")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
    # fixed summation order over clients keeps the result reproducible
    out = np.zeros(stacked.shape[1])
    for wi, row in zip(w, stacked):
        out += wi * row
    return out


def run_reputation_round(models, round_index: int = 1, client_ids=None,
                         force_uniform: bool = False) -> tuple[np.ndarray, ReputationLedger]:
    """Score and aggregate one round of client models.

    With ``force_uniform`` the ledger is still computed, but aggregation uses
    uniform weights and every lambda is pinned to 1.0 (the fixed-noise baseline
    expressed through this code path).
    """
    stacked = _stack(models)
    n = stacked.shape[0]
    client_ids = tuple(range(n)) if client_ids is None else tuple(int(c) for c in client_ids)
    temp = temp_aggregate(stacked)
    distances = compute_distances(stacked, temp)
    scores = consistency_scores(distances)
    raw = scores.copy()
    reps = normalize_reputation(raw)
    fallback = raw.sum() < UNIFORM_FALLBACK_EPS
    lambdas = assign_lambdas(reps)
    p70, p50 = percentile_thresholds(reps)
    if force_uniform:
        reps = np.full(n, 1.0 / n)
        lambdas = np.ones(n)
    ledger = ReputationLedger(
        round_index=round_index,
        client_ids=client_ids,
        distances=distances,
        scores=scores,
        raw_reputation=raw,
        reputation=reps,
        lambdas=lambdas,
        p70=p70,
        p50=p50,
        uniform_fallback=bool(fallback),
    )
    return aggregate_weighted(stacked, reps), ledger

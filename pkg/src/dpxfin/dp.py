"""Update-level differential privacy: norm clipping plus reputation-scaled Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAMBDA_TIERS = (0.2, 0.5, 1.0)

# stream tags keep per-purpose RNG streams apart for the same (client, round)
STREAM_TRAIN = 0
STREAM_NOISE = 1
STREAM_SELECT = 2
STREAM_PROBE = 3


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    base_sigma: float = 1.0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.base_sigma >= 0:
            raise ValueError(f"base_sigma must be >= 0, got {self.base_sigma}")


@dataclass(frozen=True)
class NoiseAssignment:
    client_id: int
    lam: float
    effective_sigma: float


def stream_seed(experiment_seed: int, client_id: int, round_index: int, stream: int) -> np.random.SeedSequence:
    """Counter-based seed: one independent stream per (experiment, client, round, purpose)."""
    return np.random.SeedSequence([int(experiment_seed), int(client_id), int(round_index), int(stream)])


def clip_update(delta, clip_norm: float) -> np.ndarray:
    if not clip_norm > 0:
        raise ValueError(f"clip_norm must be > 0, got {clip_norm}")
    delta = np.asarray(delta, dtype=np.float64)
    norm = np.linalg.norm(delta)
    if norm <= clip_norm:
        return delta.copy()
    out = delta * (clip_norm / norm)
    # rounding can leave the product a few ulps above the bound
    while np.linalg.norm(out) > clip_norm:
        out = np.nextafter(out, 0.0)
    return out


def add_gaussian_noise(delta, sigma_eff: float, clip_norm: float, rng) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if sigma_eff == 0:
        return delta.copy()
    rng = np.random.default_rng(rng)
    return delta + rng.normal(0.0, sigma_eff * clip_norm, size=delta.shape)


def effective_sigma(lam: float, base_sigma: float, round_index: int) -> float:
    if round_index < 1:
        raise ValueError(f"round_index starts at 1, got {round_index}")
    if round_index == 1:
        return base_sigma
    return lam * base_sigma


def privatize_update(delta, config: DpConfig, lam: float, round_index: int, rng) -> np.ndarray:
    """Clip ``delta`` to ``config.clip_norm`` then add noise at the effective multiplier."""
    clipped = clip_update(delta, config.clip_norm)
    sigma = effective_sigma(lam, config.base_sigma, round_index)
    return add_gaussian_noise(clipped, sigma, config.clip_norm, rng)

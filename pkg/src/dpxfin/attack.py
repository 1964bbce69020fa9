"""Tabular gradient-inversion attack on single-step client updates.

The attacker knows the architecture, the global model the victim started
from, and (by default) the batch labels. It optimizes a dummy batch so that
the update it would produce matches the observed one. Categorical columns are
relaxed to a softmax over their candidate codes; an ensemble of independently
initialized trials is aligned row-by-row and pooled (median for continuous
cells, mode for categorical codes).

Scoring is a desk-scale surrogate: a categorical cell counts as recovered when
the code matches, a continuous cell when it lands within ``tau`` standard
deviations of the truth.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from dpxfin import nn
from dpxfin.dp import DpConfig, privatize_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackConfig:
    batch_size: int = 64
    steps: int = 400
    step_size: float = 0.1
    n_ensemble: int = 8
    match_loss: str = "cosine"
    tau: float = 0.3
    label_strategy: str = "known"
    # (start, end) sharpness of the smoothed ReLU used while optimizing; None for exact ReLU
    relu_smoothing: tuple[float, float] | None = (2.0, 500.0)
    # share of steps spent with categorical cells as free scalars before the softmax phase
    categorical_warmup: float = 0.5
    victim_round: int | None = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_ensemble < 1:
            raise ValueError("n_ensemble must be >= 1")
        if self.match_loss not in ("cosine", "l2"):
            raise ValueError(f"match_loss must be 'cosine' or 'l2', got {self.match_loss!r}")
        if self.label_strategy not in ("known", "infer"):
            raise ValueError(f"label_strategy must be 'known' or 'infer', got {self.label_strategy!r}")
        if self.relu_smoothing is not None:
            lo, hi = self.relu_smoothing
            if not 0 < lo <= hi:
                raise ValueError("relu_smoothing must be (start, end) with 0 < start <= end")
            object.__setattr__(self, "relu_smoothing", (float(lo), float(hi)))
        if not 0 <= self.categorical_warmup <= 1:
            raise ValueError("categorical_warmup must lie in [0, 1]")
        if self.steps < 0 or not self.step_size > 0 or not self.tau > 0:
            raise ValueError("steps must be >= 0 and step_size, tau > 0")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class FeatureSpace:
    """Which input columns are categorical, and the input value of each of their codes."""

    categorical_mask: np.ndarray
    code_values: Mapping[int, np.ndarray]
    std: np.ndarray | None = None

    @classmethod
    def from_encoding(cls, encoding) -> "FeatureSpace":
        mask = np.array(encoding.categorical_mask, dtype=bool)
        codes = {j: encoding.code_values(c) for j, c in enumerate(encoding.columns) if mask[j]}
        return cls(mask, codes)

    @classmethod
    def continuous(cls, n_features: int) -> "FeatureSpace":
        return cls(np.zeros(n_features, dtype=bool), {})

    def to_json(self) -> dict:
        return {
            "categorical_mask": self.categorical_mask.tolist(),
            "code_values": {str(j): v.tolist() for j, v in self.code_values.items()},
        }

    @classmethod
    def from_json(cls, blob: dict) -> "FeatureSpace":
        return cls(np.array(blob["categorical_mask"], dtype=bool),
                   {int(j): np.array(v) for j, v in blob["code_values"].items()})

    def snap(self, batch: np.ndarray) -> np.ndarray:
        """Replace each categorical cell by the index of its nearest code."""
        out = np.array(batch, dtype=np.float64, copy=True)
        for j, values in self.code_values.items():
            out[:, j] = np.argmin(np.abs(out[:, j, None] - values[None, :]), axis=1)
        return out


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    batch: np.ndarray  # model-input space; categorical cells sit exactly on a code value
    codes: np.ndarray  # continuous values, categorical cells as integer codes
    labels: np.ndarray
    correct: np.ndarray | None = None
    accuracy: float | None = None
    trial_accuracies: tuple[float, ...] = ()
    trial_losses: tuple[float, ...] = ()
    trials: tuple[np.ndarray, ...] = ()


# ----------------------------------------------------------------------------- victim side


def simulate_victim_update(model: nn.MlpModel, true_batch, labels, lr: float) -> np.ndarray:
    """The update one plain SGD step on ``true_batch`` would send."""
    return -lr * nn.backward(model, true_batch, labels)


# ----------------------------------------------------------------------------- scoring


def reconstruction_accuracy(true_batch, reconstructed, categorical_mask, tau: float,
                            feature_std=None) -> float:
    return float(cell_correctness(true_batch, reconstructed, categorical_mask, tau, feature_std).mean())


def cell_correctness(true_batch, reconstructed, categorical_mask, tau: float, feature_std=None) -> np.ndarray:
    """Per-cell hit matrix. Categorical columns must hold codes in both inputs."""
    true_batch = np.asarray(true_batch, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if true_batch.shape != reconstructed.shape:
        raise ValueError(f"shape mismatch: {true_batch.shape} vs {reconstructed.shape}")
    mask = np.asarray(categorical_mask, dtype=bool)
    if mask.size != true_batch.shape[1]:
        raise ValueError(f"categorical_mask has {mask.size} entries for {true_batch.shape[1]} columns")
    std = np.ones(mask.size) if feature_std is None else np.asarray(feature_std, dtype=np.float64)
    err = np.abs(true_batch - reconstructed)
    return np.where(mask, np.rint(true_batch) == np.rint(reconstructed), err <= tau * std)


def _row_cost(a: np.ndarray, b: np.ndarray, la, lb, mask) -> np.ndarray:
    cont = ~mask
    cost = np.zeros((a.shape[0], b.shape[0]))
    if cont.any():
        cost += ((a[:, None, cont] - b[None, :, cont]) ** 2).sum(-1)
    if mask.any():
        cost += (a[:, None, mask] != b[None, :, mask]).sum(-1)
    cost += 1e6 * (np.asarray(la)[:, None] != np.asarray(lb)[None, :])
    return cost


def match_rows(reference, candidate, ref_labels, cand_labels, categorical_mask) -> np.ndarray:
    """Permutation of ``candidate`` rows best aligned with ``reference`` (labels must agree)."""
    cost = _row_cost(np.asarray(reference), np.asarray(candidate), ref_labels, cand_labels,
                     np.asarray(categorical_mask, dtype=bool))
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.intp)
    perm[rows] = cols
    return perm


# ----------------------------------------------------------------------------- inversion


def _torch_param_grad(layers, x, y_onehot, beta: float | None = None):
    """Mean cross-entropy parameter gradient, batched over a leading trial axis.

    Mirrors ``nn.backward`` in closed form so it stays differentiable in ``x``.
    The exact ReLU gradient jumps whenever a hidden unit switches on, so with
    ``beta`` set the activation becomes ``softplus(beta)`` and its derivative
    ``sigmoid(beta * z)``; both tend to the ReLU pair as ``beta`` grows.
    """
    acts, masks = [x], []
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        if i < len(layers) - 1:
            if beta is None:
                h = torch.relu(z)
                masks.append((z > 0).to(z.dtype))
            else:
                h = torch.nn.functional.softplus(z, beta=beta)
                masks.append(torch.sigmoid(beta * z))
            acts.append(h)
        else:
            h = z
    delta = (torch.softmax(h, dim=-1) - y_onehot) / x.shape[-2]
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        grads.append(delta.sum(dim=-2))
        grads.append(acts[i].transpose(-1, -2) @ delta)
        if i:
            delta = (delta @ layers[i][0].T) * masks[i - 1]
    grads.reverse()
    return torch.cat([g.flatten(start_dim=1) for g in grads], dim=1)


def infer_labels(observed: np.ndarray, model: nn.MlpModel, batch_size: int, lr: float | None = None) -> np.ndarray:
    """Recover batch labels from the output-bias entries of the update.

    For one sample the sign of the class-1 bias gradient gives the label. For
    larger batches the class-1 bias gradient is ``mean(p1) - n1 / B``; ``mean(p1)``
    is approximated by the model's output on the all-zero (mean) input, which
    needs the victim learning rate to undo the update scale.
    """
    g_b1 = observed[-1]  # observed = -lr * grad, so the sign flips
    if batch_size == 1:
        return np.array([1 if g_b1 > 0 else 0])
    if lr is None or lr <= 0:
        raise ValueError("label inference for batches > 1 needs the victim learning rate")
    p1 = nn.forward(model, np.zeros((1, model.layer_dims[0])))[0, 1]
    n1 = int(np.clip(round(batch_size * (p1 + g_b1 / lr)), 0, batch_size))
    return np.array([0] * (batch_size - n1) + [1] * n1)


def _pool(trials: list[np.ndarray], labels: np.ndarray, space: FeatureSpace, reference: int = 0) -> np.ndarray:
    """Align every trial to ``trials[reference]`` row-wise, then pool cell by cell."""
    ref = trials[reference]
    aligned = [ref] + [t[match_rows(ref, t, labels, labels, space.categorical_mask)]
                       for i, t in enumerate(trials) if i != reference]
    stack = np.stack(aligned)
    pooled = np.median(stack, axis=0)
    for j in space.code_values:
        col = stack[:, :, j].astype(np.int64)
        for r in range(col.shape[1]):
            counts = np.bincount(col[:, r])
            # ties resolve toward the reference trial's code
            best = np.flatnonzero(counts == counts.max())
            pooled[r, j] = next(c for c in col[:, r] if c in best)
    return pooled


def invert_update(observed, model: nn.MlpModel, config: AttackConfig, space: FeatureSpace,
                  labels=None, victim_lr: float | None = None,
                  on_step: Callable[[int, list[np.ndarray]], None] | None = None) -> ReconstructionResult:
    """Reconstruct the batch behind one observed update.

    ``on_step(step, probs)`` is called after every optimizer step with the
    current per-column code distributions (empty during the warm-up phase).
    """
    observed = np.asarray(observed, dtype=np.float64).ravel()
    if observed.size != model.n_params:
        raise nn.DimensionError("observed update length", model.n_params, observed.size)
    n_features = model.layer_dims[0]
    if space.categorical_mask.size != n_features:
        raise nn.DimensionError("feature space width", n_features, space.categorical_mask.size)
    B = config.batch_size
    if config.label_strategy == "known":
        if labels is None:
            raise ValueError("label_strategy 'known' needs the batch labels")
        labels = np.asarray(labels, dtype=np.int64)
    else:
        labels = infer_labels(observed, model, B, victim_lr)
    if labels.size != B:
        raise nn.DimensionError("label count", B, labels.size)

    T = config.n_ensemble
    gen = torch.Generator().manual_seed(int(config.rng_seed))
    dt = torch.float64
    layers = [(torch.tensor(w, dtype=dt), torch.tensor(b, dtype=dt)) for w, b in model.layers]
    target = torch.tensor(observed, dtype=dt)
    y_onehot = torch.nn.functional.one_hot(torch.tensor(labels), 2).to(dt).expand(T, B, 2)
    lr_sign = -1.0  # observed = -lr * grad

    cont_idx = np.flatnonzero(~space.categorical_mask)
    cat_idx = sorted(space.code_values)
    code_vals = [torch.tensor(space.code_values[j], dtype=dt) for j in cat_idx]
    cont = torch.randn(T, B, len(cont_idx), generator=gen, dtype=dt).requires_grad_(True)
    # warm-up phase: categorical cells are free scalars; afterwards a softmax over codes
    scalars = torch.randn(T, B, len(cat_idx), generator=gen, dtype=dt).requires_grad_(True)
    logits: list[torch.Tensor] = []
    beta_start, beta_end = config.relu_smoothing if config.relu_smoothing else (None, None)
    n_warm = int(round(config.categorical_warmup * config.steps)) if cat_idx else 0

    def assemble():
        cols = [None] * n_features
        for k, j in enumerate(cont_idx):
            cols[j] = cont[..., k]
        for k, j in enumerate(cat_idx):
            cols[j] = torch.softmax(logits[k], dim=-1) @ code_vals[k] if logits else scalars[..., k]
        return torch.stack(cols, dim=-1)

    def match(x, beta=None):
        g = lr_sign * _torch_param_grad(layers, x, y_onehot, beta)
        if config.match_loss == "cosine":
            return 1.0 - torch.nn.functional.cosine_similarity(g, target.expand_as(g), dim=1, eps=1e-30)
        # squared L2 needs the update scale; fit it in closed form per trial
        scale = (g @ target) / (g * g).sum(dim=1).clamp_min(1e-30)
        return ((scale[:, None] * g - target) ** 2).sum(dim=1)

    def run(params, first, last):
        opt = torch.optim.Adam(params, lr=config.step_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(last - first, 1))
        for step in range(first, last):
            beta = None if beta_start is None else beta_start * (beta_end / beta_start) ** (step / config.steps)
            opt.zero_grad()
            match(assemble(), beta).sum().backward()
            opt.step()
            sched.step()
            if on_step is not None:
                with torch.no_grad():
                    on_step(step, [torch.softmax(lg, dim=-1).numpy().copy() for lg in logits])

    if n_warm:
        run([cont, scalars], 0, n_warm)
    with torch.no_grad():
        for k, vals in enumerate(code_vals):
            width = torch.diff(vals).abs().median() if vals.numel() > 1 else torch.tensor(1.0, dtype=dt)
            start = scalars[..., k:k + 1] if n_warm else vals[torch.randint(vals.numel(), (T, B, 1), generator=gen)]
            logits.append((-0.5 * ((vals - start) / width) ** 2).requires_grad_(True))
    run([cont, *logits], n_warm, config.steps)

    with torch.no_grad():
        final_loss = match(assemble()).numpy().copy()
        relaxed = assemble().numpy()
        cont_np = relaxed[..., cont_idx]
        codes_np = [np.argmin(np.abs(relaxed[..., j, None] - space.code_values[j]), axis=-1) for j in cat_idx]

    trials = []
    for t in range(T):
        rec = np.zeros((B, n_features))
        rec[:, cont_idx] = cont_np[t]
        for j, c in zip(cat_idx, codes_np):
            rec[:, j] = c[t]
        trials.append(rec)
    codes = _pool(trials, labels, space, reference=int(np.argmin(final_loss)))
    batch = codes.copy()
    for j in cat_idx:
        batch[:, j] = space.code_values[j][codes[:, j].astype(np.int64)]
    return ReconstructionResult(batch, codes, labels, trial_losses=tuple(float(v) for v in final_loss),
                                trials=tuple(trials))


def score_reconstruction(result: ReconstructionResult, true_batch, true_labels, space: FeatureSpace,
                         tau: float) -> ReconstructionResult:
    """Align reconstructed rows with the true batch and attach per-cell and per-trial scores."""
    truth = space.snap(true_batch)
    true_labels = np.asarray(true_labels)
    mask = space.categorical_mask

    def scored(rec):
        perm = match_rows(truth, rec, true_labels, result.labels, mask)
        return cell_correctness(truth, rec[perm], mask, tau, space.std)

    correct = scored(result.codes)
    trial_acc = tuple(float(scored(t).mean()) for t in result.trials)
    return replace(result, correct=correct, accuracy=float(correct.mean()), trial_accuracies=trial_acc)


def attack_victim(victim, config: AttackConfig, space: FeatureSpace, seed_offset: int = 0) -> ReconstructionResult:
    """Invert and score one stored update (anything shaped like ``federation.UpdateProbe``)."""
    model = nn.MlpModel(tuple(victim.layer_dims), victim.global_params)
    cfg = config if victim.batch.shape[0] == config.batch_size else _with(config, batch_size=victim.batch.shape[0])
    cfg = _with(cfg, rng_seed=config.rng_seed + seed_offset)
    rec = invert_update(victim.observed, model, cfg, space, labels=victim.labels, victim_lr=victim.lr)
    return score_reconstruction(rec, victim.batch, victim.labels, space, config.tau)


def _with(config: AttackConfig, **changes) -> AttackConfig:
    return AttackConfig(**{**asdict(config), **changes})


# ----------------------------------------------------------------------------- benchmark


def mean_and_sd(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def select_victims(victims_by_method: Mapping[str, Sequence], n_victims: int, config: AttackConfig) -> list[tuple]:
    """Seeded sample of (round, client) keys present for every method."""
    keysets = []
    for method, victims in victims_by_method.items():
        keys = {(v.round_index, v.client_id) for v in victims
                if config.victim_round is None or v.round_index == config.victim_round}
        keysets.append(keys)
    common = sorted(set.intersection(*keysets)) if keysets else []
    if len(common) < n_victims:
        raise ValueError(f"only {len(common)} stored update(s) available for every method; need {n_victims}")
    rng = np.random.default_rng(config.rng_seed)
    picks = rng.choice(len(common), size=n_victims, replace=False)
    return [common[i] for i in sorted(picks)]


@dataclass
class BenchmarkRow:
    method: str
    batch_size: int
    mean_accuracy: float
    sd_accuracy: float
    n_victims: int
    config_hash: str
    accuracies: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def run_attack_benchmark(victims_by_method: Mapping[str, Sequence], config: AttackConfig, n_victims: int,
                         space: FeatureSpace) -> list[BenchmarkRow]:
    """Attack the same sampled victims under every method and report mean +- sample SD accuracy."""
    keys = select_victims(victims_by_method, n_victims, config)
    rows = []
    for method, victims in victims_by_method.items():
        index = {(v.round_index, v.client_id): v for v in victims}
        accs = []
        for i, key in enumerate(keys):
            res = attack_victim(index[key], config, space, seed_offset=i)
            accs.append(res.accuracy)
            log.info("%s victim round=%d client=%d accuracy %.3f", method, key[0], key[1], res.accuracy)
        mean, sd = mean_and_sd(accs)
        rows.append(BenchmarkRow(method, config.batch_size, mean, sd, n_victims, config.digest(), accs))
    return rows


def noisy_copy(victim, sigma: float, clip_norm: float, rng) -> object:
    """The same victim as seen through the privatization path at multiplier ``sigma``."""
    clean = -victim.lr * nn.backward(nn.MlpModel(tuple(victim.layer_dims), victim.global_params),
                                     victim.batch, victim.labels)
    observed = privatize_update(clean, DpConfig(clip_norm, sigma), 1.0, 1, rng)
    return replace(victim, observed=observed, sigma=sigma, clip_norm=clip_norm)

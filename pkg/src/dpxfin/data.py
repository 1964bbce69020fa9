"""Transaction data: CSV ingestion, synthesis, encoding, SMOTE, splitting and client partitioning.

Raw records are pandas DataFrames with snake_case columns (``SCHEMA_COLUMNS``).
Model-ready data is a :class:`TransactionDataset`, a standardized float matrix
plus labels and the frozen :class:`Encoding` that produced it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.neighbors import NearestNeighbors

log = logging.getLogger(__name__)

# CSV header name -> internal column name, in the public AML dataset's column order
CSV_COLUMNS = {
    "From Bank": "from_bank",
    "To Bank": "to_bank",
    "Amount Received": "amount_received",
    "Receiving Currency": "receiving_currency",
    "Amount Paid": "amount_paid",
    "Payment Currency": "payment_currency",
    "Payment Format": "payment_format",
    "Year": "year",
    "Month": "month",
    "Day": "day",
    "Hour": "hour",
    "Is Laundering": "is_laundering",
}
CSV_HEADER = list(CSV_COLUMNS)
SCHEMA_COLUMNS = list(CSV_COLUMNS.values())
LABEL = "is_laundering"
FEATURE_COLUMNS = [c for c in SCHEMA_COLUMNS if c != LABEL]
CONTINUOUS_COLUMNS = {"amount_received", "amount_paid"}
CALENDAR_COLUMNS = ["year", "month", "day", "hour"]
DAY_OF_WEEK = "day_of_week"

STD_FLOOR = 1e-12


class SchemaError(ValueError):
    pass


# ----------------------------------------------------------------------------- ingestion


def engineer_temporal_features(timestamp) -> tuple[int, int, int, int]:
    """(year, month, day-of-month, hour) from a datetime, a string, or epoch seconds (UTC)."""
    if isinstance(timestamp, datetime):
        ts = timestamp
    elif isinstance(timestamp, (int, float, np.integer, np.floating)) and not isinstance(timestamp, bool):
        if not np.isfinite(timestamp):
            raise ValueError(f"invalid timestamp {timestamp!r}")
        ts = datetime.fromtimestamp(float(timestamp), tz=timezone.utc)
    elif isinstance(timestamp, str):
        parsed = pd.to_datetime(timestamp, errors="coerce")
        if pd.isna(parsed):
            raise ValueError(f"invalid timestamp {timestamp!r}")
        ts = parsed.to_pydatetime()
    else:
        raise ValueError(f"invalid timestamp {timestamp!r}")
    return ts.year, ts.month, ts.day, ts.hour


def _first_bad_line(raw: pd.Series, parsed: pd.Series) -> int | None:
    bad = parsed.isna() & raw.notna() | raw.isna()
    if not bad.any():
        return None
    # +2: one for the header, one for 1-based numbering
    return int(np.flatnonzero(bad.to_numpy())[0]) + 2


def load_csv(path, day_of_week: bool = False) -> pd.DataFrame:
    """Read an AML transaction CSV into raw records.

    Accepts either a ``Timestamp`` column or pre-split Year/Month/Day/Hour.
    Unknown extra columns (e.g. account ids) are dropped.
    """
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    frame.columns = [c.strip() for c in frame.columns]
    has_calendar = all(c in frame.columns for c in ("Year", "Month", "Day", "Hour"))
    required = [c for c in CSV_HEADER if c not in ("Year", "Month", "Day", "Hour")]
    if not has_calendar:
        required.append("Timestamp")
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(repr(c) for c in missing)}")

    out = pd.DataFrame(index=frame.index)
    numeric = ["From Bank", "To Bank", "Amount Received", "Amount Paid", "Is Laundering"]
    if has_calendar:
        numeric += ["Year", "Month", "Day", "Hour"]
    for col in numeric:
        parsed = pd.to_numeric(frame[col], errors="coerce")
        line = _first_bad_line(frame[col], parsed)
        if line is not None:
            raise SchemaError(f"{path}:{line}: cannot parse {col!r} value {frame[col].iloc[line - 2]!r}")
        out[CSV_COLUMNS[col]] = parsed
    for col in ("Receiving Currency", "Payment Currency", "Payment Format"):
        values = frame[col]
        if values.isna().any():
            line = int(np.flatnonzero(values.isna().to_numpy())[0]) + 2
            raise SchemaError(f"{path}:{line}: empty {col!r}")
        out[CSV_COLUMNS[col]] = values.str.strip()

    if has_calendar:
        stamps = None
    else:
        stamps = pd.to_datetime(frame["Timestamp"], errors="coerce", format="mixed")
        line = _first_bad_line(frame["Timestamp"], stamps)
        if line is not None:
            raise SchemaError(f"{path}:{line}: cannot parse 'Timestamp' value {frame['Timestamp'].iloc[line - 2]!r}")
        out["year"] = stamps.dt.year
        out["month"] = stamps.dt.month
        out["day"] = stamps.dt.day
        out["hour"] = stamps.dt.hour
    if day_of_week:
        if stamps is None:
            stamps = pd.to_datetime(dict(year=out.year, month=out.month, day=out.day), errors="coerce")
        out[DAY_OF_WEEK] = stamps.dt.dayofweek

    for col in ("from_bank", "to_bank", "year", "month", "day", "hour", LABEL):
        as_int = out[col].astype(np.int64)
        if not (as_int == out[col]).all():
            line = int(np.flatnonzero((as_int != out[col]).to_numpy())[0]) + 2
            raise SchemaError(f"{path}:{line}: {col} must be an integer")
        out[col] = as_int
    validate_records(out, source=str(path))
    cols = SCHEMA_COLUMNS + ([DAY_OF_WEEK] if day_of_week else [])
    return out[cols].reset_index(drop=True)


def validate_records(records: pd.DataFrame, source: str = "records") -> None:
    checks = {
        LABEL: (0, 1),
        "month": (1, 12),
        "day": (1, 31),
        "hour": (0, 23),
    }
    for col, (lo, hi) in checks.items():
        bad = ~records[col].between(lo, hi)
        if bad.any():
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise SchemaError(f"{source}:{line}: {col} outside [{lo}, {hi}]")


def write_csv(records: pd.DataFrame, path) -> None:
    inverse = {v: k for k, v in CSV_COLUMNS.items()}
    frame = records[SCHEMA_COLUMNS].rename(columns=inverse)
    frame.to_csv(path, index=False, lineterminator="\n", float_format="%.2f")


# ----------------------------------------------------------------------------- synthesis


def synthesize_dataset(n_rows: int, positive_fraction: float, n_banks: int = 30, n_currencies: int = 5,
                       rng_seed=0, n_formats: int = 7, separation: float = 2.0) -> pd.DataFrame:
    """Desk-scale stand-in for the IBM AML transactions.

    Laundering rows get larger, more often cross-currency amounts, a night-heavy
    hour-of-day profile and a skewed payment-format mix. ``separation`` scales
    how far those distributions sit from the legitimate ones.
    """
    if not 0 < positive_fraction < 0.5:
        raise ValueError("positive_fraction must lie in (0, 0.5)")
    rng = np.random.default_rng(rng_seed)
    n_pos = int(round(n_rows * positive_fraction))
    labels = np.zeros(n_rows, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    pos = labels == 1

    from_bank = rng.integers(0, n_banks, n_rows)
    to_bank = rng.integers(0, n_banks, n_rows)

    log_amount = rng.normal(6.0, 1.2, n_rows)
    log_amount[pos] = rng.normal(6.0 + 2.5 * separation, 0.9, n_pos)
    amount_paid = np.round(np.exp(log_amount), 2)

    pay_cur = rng.integers(0, n_currencies, n_rows)
    cross_p = np.where(pos, min(0.1 + 0.5 * separation, 0.9), 0.1)
    cross = rng.random(n_rows) < cross_p
    shift = rng.integers(1, max(n_currencies, 2), n_rows)
    recv_cur = np.where(cross, (pay_cur + shift) % n_currencies, pay_cur)
    rate = np.where(cross, np.exp(rng.normal(0.0, 0.4, n_rows)), 1.0)
    amount_received = np.round(amount_paid * rate, 2)

    legit_fmt = np.full(n_formats, 1.0 / n_formats)
    launder_fmt = np.ones(n_formats)
    launder_fmt[: min(2, n_formats)] += 6.0 * separation
    launder_fmt /= launder_fmt.sum()
    fmt = rng.choice(n_formats, size=n_rows, p=legit_fmt)
    fmt[pos] = rng.choice(n_formats, size=n_pos, p=launder_fmt)

    day_hours = np.exp(-0.5 * ((np.arange(24) - 13.0) / 4.0) ** 2) + 0.02
    night_hours = np.exp(-0.5 * ((np.arange(24) - 2.0) / 2.5) ** 2) + 0.02
    mix = min(separation, 1.0)
    launder_hours = mix * night_hours / night_hours.sum() + (1 - mix) * day_hours / day_hours.sum()
    hour = rng.choice(24, size=n_rows, p=day_hours / day_hours.sum())
    hour[pos] = rng.choice(24, size=n_pos, p=launder_hours / launder_hours.sum())

    return pd.DataFrame({
        "from_bank": from_bank.astype(np.int64),
        "to_bank": to_bank.astype(np.int64),
        "amount_received": amount_received,
        "receiving_currency": recv_cur.astype(np.int64),
        "amount_paid": amount_paid,
        "payment_currency": pay_cur.astype(np.int64),
        "payment_format": fmt.astype(np.int64),
        "year": np.full(n_rows, 2022, dtype=np.int64),
        "month": rng.integers(1, 13, n_rows),
        "day": rng.integers(1, 29, n_rows),
        "hour": hour.astype(np.int64),
        LABEL: labels,
    })


# ----------------------------------------------------------------------------- encoding


@dataclass(frozen=True)
class Encoding:
    """Category code tables and standardization stats fitted on a training split."""

    columns: tuple[str, ...]
    categorical_mask: tuple[bool, ...]
    categories: dict
    mean: np.ndarray
    std: np.ndarray

    def cardinality(self, col: str) -> int | None:
        cats = self.categories.get(col)
        return None if cats is None else len(cats)

    def code_values(self, col: str) -> np.ndarray:
        """Standardized input value of every code of a categorical column."""
        j = self.columns.index(col)
        codes = np.arange(self.cardinality(col), dtype=np.float64)
        return (codes - self.mean[j]) / self.std[j]


@dataclass(frozen=True, eq=False)
class TransactionDataset:
    features: np.ndarray
    labels: np.ndarray
    encoding: Encoding
    unseen_counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def columns(self) -> tuple[str, ...]:
        return self.encoding.columns

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array(self.encoding.categorical_mask)

    @property
    def feature_stats(self) -> tuple[np.ndarray, np.ndarray]:
        return self.encoding.mean, self.encoding.std

    def take(self, idx) -> "TransactionDataset":
        idx = np.asarray(idx)
        return replace(self, features=self.features[idx], labels=self.labels[idx])

    def select_columns(self, cols: Sequence[str]) -> "TransactionDataset":
        j = [self.columns.index(c) for c in cols]
        enc = self.encoding
        sub = Encoding(
            columns=tuple(cols),
            categorical_mask=tuple(enc.categorical_mask[i] for i in j),
            categories={c: enc.categories[c] for c in cols if c in enc.categories},
            mean=enc.mean[j],
            std=enc.std[j],
        )
        return replace(self, features=self.features[:, j], encoding=sub)


def _category_order(values: pd.Series) -> list:
    uniques = list(pd.unique(values))
    if all(isinstance(v, (int, float, np.integer, np.floating)) for v in uniques):
        return sorted(uniques)
    return uniques


def encode_and_standardize(records: pd.DataFrame, fit: Encoding | None = None,
                           columns: Sequence[str] | None = None) -> TransactionDataset:
    """Map categories to dense integer codes and standardize every feature column.

    Continuous (amount) columns are ``log1p``-transformed before standardizing.

    With ``fit=None`` code tables and mean/std are fitted on ``records``;
    otherwise ``fit`` is applied frozen and unseen categories map to code 0.
    """
    if fit is not None:
        columns = list(fit.columns)
    elif columns is None:
        columns = FEATURE_COLUMNS + ([DAY_OF_WEEK] if DAY_OF_WEEK in records.columns else [])
    missing = [c for c in columns if c not in records.columns]
    if missing:
        raise SchemaError(f"records lack column(s) {missing}")
    mask = tuple(c not in CONTINUOUS_COLUMNS for c in columns)

    categories = {} if fit is None else fit.categories
    unseen: dict[str, int] = {}
    raw = np.empty((len(records), len(columns)))
    for j, col in enumerate(columns):
        values = records[col]
        if not mask[j]:
            # amounts are heavy-tailed; standardize them on a log scale
            raw[:, j] = np.log1p(np.maximum(values.to_numpy(dtype=np.float64), 0.0))
            continue
        if fit is None:
            categories[col] = _category_order(values)
        table = {v: i for i, v in enumerate(categories[col])}
        codes = values.map(table)
        n_unseen = int(codes.isna().sum())
        if n_unseen:
            unseen[col] = n_unseen
            log.warning("%d unseen %s value(s) mapped to code 0", n_unseen, col)
        raw[:, j] = codes.fillna(0).to_numpy(dtype=np.float64)

    if fit is None:
        mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        std = np.where(std < STD_FLOOR, 1.0, std)
        fit = Encoding(tuple(columns), mask, categories, mean, std)
    features = (raw - fit.mean) / fit.std
    labels = records[LABEL].to_numpy(dtype=np.int64)
    return TransactionDataset(features, labels, fit, unseen)


def decode_codes(dataset: TransactionDataset) -> np.ndarray:
    """Integer codes / raw continuous values, i.e. undo the standardization."""
    mean, std = dataset.feature_stats
    raw = dataset.features * std + mean
    mask = dataset.categorical_mask
    raw[:, mask] = np.rint(raw[:, mask])
    return raw


# ----------------------------------------------------------------------------- SMOTE


def smote_oversample(dataset: TransactionDataset, target_ratio: float = 1.0, k: int = 5,
                     rng_seed=0) -> TransactionDataset:
    """Append synthetic minority rows until minority/majority >= ``target_ratio``.

    Continuous columns are interpolated between a minority seed row and one of
    its k nearest minority neighbours; categorical columns are copied from the
    seed row.
    """
    if not 0 < target_ratio <= 1:
        raise ValueError("target_ratio must lie in (0, 1]")
    if k < 1:
        raise ValueError("k must be >= 1")
    y = dataset.labels
    counts = np.bincount(y, minlength=2)
    minority = int(np.argmin(counts))
    n_min, n_maj = counts[minority], counts[1 - minority]
    n_new = math.ceil(target_ratio * n_maj) - n_min
    if n_new <= 0:
        return dataset
    if n_min < k + 1:
        raise ValueError(f"minority class has {n_min} rows; SMOTE with k={k} needs at least {k + 1}, use a smaller k")

    rng = np.random.default_rng(rng_seed)
    min_idx = np.flatnonzero(y == minority)
    x_min = dataset.features[min_idx]
    nn = NearestNeighbors(n_neighbors=k + 1).fit(x_min)
    _, nbrs = nn.kneighbors(x_min)
    neighbours = np.empty((n_min, k), dtype=np.intp)
    for i, row in enumerate(nbrs):
        others = row[row != i]
        neighbours[i] = others[:k]

    seeds = rng.integers(0, n_min, n_new)
    picks = neighbours[seeds, rng.integers(0, k, n_new)]
    u = rng.random((n_new, 1))
    base = x_min[seeds]
    synth = base + u * (x_min[picks] - base)
    cat = dataset.categorical_mask
    synth[:, cat] = base[:, cat]

    features = np.vstack([dataset.features, synth])
    labels = np.concatenate([y, np.full(n_new, minority, dtype=y.dtype)])
    return replace(dataset, features=features, labels=labels)


# ----------------------------------------------------------------------------- splitting


def stratified_split_indices(labels, train_fraction: float, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(rng_seed)
    classes = np.unique(labels)
    groups = [np.flatnonzero(labels == c) for c in classes]
    for c, g in zip(classes, groups):
        if g.size < 2:
            raise ValueError(f"class {c} has {g.size} sample(s); need at least 2 to split")
    # largest-remainder rounding so the total train size is round(fraction * n)
    exact = np.array([train_fraction * g.size for g in groups])
    take = np.floor(exact).astype(int)
    short = int(round(train_fraction * labels.size)) - take.sum()
    for i in np.argsort(-(exact - take), kind="stable")[:max(short, 0)]:
        take[i] += 1
    take = np.clip(take, 1, [g.size - 1 for g in groups])
    train, test = [], []
    for g, t in zip(groups, take):
        perm = rng.permutation(g)
        train.append(perm[:t])
        test.append(perm[t:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def split_train_test(dataset, train_fraction: float = 0.8, rng_seed=0):
    """Stratified split of a TransactionDataset or raw-records DataFrame."""
    if isinstance(dataset, pd.DataFrame):
        tr, te = stratified_split_indices(dataset[LABEL].to_numpy(), train_fraction, rng_seed)
        return dataset.iloc[tr].reset_index(drop=True), dataset.iloc[te].reset_index(drop=True)
    tr, te = stratified_split_indices(dataset.labels, train_fraction, rng_seed)
    return dataset.take(tr), dataset.take(te)


# ----------------------------------------------------------------------------- partitioning


@dataclass(frozen=True, eq=False)
class PartitionPlan:
    assignments: np.ndarray
    n_clients: int
    mode: str
    alpha: float | None = None

    def shards(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignments == c) for c in range(self.n_clients)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clients)


def _n_rows(dataset) -> int:
    return dataset if isinstance(dataset, (int, np.integer)) else len(dataset)


def partition_iid(dataset, n_clients: int, rng_seed=0) -> PartitionPlan:
    n = _n_rows(dataset)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > n:
        raise ValueError(f"cannot give {n_clients} clients a row each from {n} rows")
    perm = np.random.default_rng(rng_seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    assignments[perm] = np.arange(n) % n_clients
    return PartitionPlan(assignments, n_clients, "iid")


def partition_dirichlet(dataset, n_clients: int, alpha: float = 1.0, rng_seed=0,
                        max_retries: int = 100) -> PartitionPlan:
    """Per class, split rows across clients in Dirichlet(alpha)-drawn proportions.

    Any draw leaving a client empty is discarded and redrawn in full.
    """
    labels = dataset.labels if hasattr(dataset, "labels") else np.asarray(dataset)
    if n_clients < 2:
        raise ValueError("Dirichlet partitioning needs n_clients >= 2")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    rng = np.random.default_rng(rng_seed)
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    for _ in range(max_retries):
        assignments = np.empty(labels.size, dtype=np.int64)
        for g in groups:
            perm = rng.permutation(g)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * g.size).astype(int)
            for client, part in enumerate(np.split(perm, cuts)):
                assignments[part] = client
        if np.bincount(assignments, minlength=n_clients).min() > 0:
            return PartitionPlan(assignments, n_clients, "dirichlet", alpha)
    raise RuntimeError(
        f"Dirichlet(alpha={alpha}) left a client empty in {max_retries} draws; "
        "use a larger alpha or fewer clients"
    )


def prepare_federated_data(records: pd.DataFrame, train_fraction: float = 0.8, smote_ratio: float | None = 1.0,
                           smote_k: int = 5, rng_seed=0, columns: Sequence[str] | None = None,
                           ) -> tuple[TransactionDataset, TransactionDataset]:
    """Split raw records, fit the encoding on the training side, SMOTE the training side.

    Returns ``(train, holdout)``; the holdout keeps its natural class balance.
    """
    split_seed, smote_seed = np.random.SeedSequence(rng_seed).spawn(2)
    train_rec, test_rec = split_train_test(records, train_fraction, split_seed)
    train = encode_and_standardize(train_rec, columns=columns)
    holdout = encode_and_standardize(test_rec, fit=train.encoding)
    if smote_ratio:
        train = smote_oversample(train, smote_ratio, smote_k, smote_seed)
    return train, holdout

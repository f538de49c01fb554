"""Dataset ingestion, encoding, cluster partitioning, folds, probes and synthetic data.

The pipeline keeps two representations:

* :class:`RawDataset` -- typed but unencoded columns straight from a CSV (or the
  synthetic generator), plus the target.
* :class:`DatasetBundle` -- the model-ready matrix produced by
  :func:`encode_and_standardize`, whose statistics come only from ``fit_rows``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigurationError, ContractError, IngestionError

logger = logging.getLogger(__name__)

MISSING_TOKENS = ("", "NA", "NaN", "nan", "null", "None")


# ------------------------------------------------------------------ schema


@dataclass
class DatasetSchema:
    target: str
    cluster: str
    sensitive: list[str]
    numeric: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    task: str = "classification"
    positive_label: str | None = None
    recode: dict[str, str] = field(default_factory=dict)
    missing_tokens: list[str] = field(default_factory=lambda: list(MISSING_TOKENS))
    probes: list[str] = field(default_factory=list)
    exclude: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not self.sensitive:
            raise ConfigurationError("schema needs at least one sensitive column")
        features = set(self.numeric) | set(self.categorical)
        for special in (self.target, self.cluster):
            if special in features:
                raise ConfigurationError(f"column {special!r} cannot be both feature and "
                                         "target/cluster")
        overlap = set(self.numeric) & set(self.categorical)
        if overlap:
            raise ConfigurationError(f"columns declared numeric and categorical: {sorted(overlap)}")

    @property
    def features(self) -> list[str]:
        return list(self.numeric) + list(self.categorical)

    @property
    def used_columns(self) -> list[str]:
        cols = [self.target, self.cluster, *self.features, *self.sensitive]
        return list(dict.fromkeys(c for c in cols if c not in self.probes))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSchema:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown schema keys {sorted(unknown)}")
        for key in ("target", "cluster", "sensitive"):
            if key not in d:
                raise ConfigurationError(f"schema is missing required key {key!r}")
        return cls(**d)


def read_config_file(path) -> dict:
    """Parse a TOML or JSON document (chosen by extension, TOML by default)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def load_schema(path) -> DatasetSchema:
    return DatasetSchema.from_dict(read_config_file(path))


# -------------------------------------------------------------- raw dataset


@dataclass
class RawDataset:
    """Typed, unencoded columns. ``frame`` holds features, cluster and sensitive columns."""

    frame: pd.DataFrame
    y: np.ndarray
    schema: DatasetSchema
    n_dropped: int = 0
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def cluster(self) -> np.ndarray:
        return self.frame[self.schema.cluster].to_numpy(dtype=str)

    def subset(self, rows) -> RawDataset:
        rows = np.asarray(rows)
        return RawDataset(self.frame.iloc[rows].reset_index(drop=True), self.y[rows], self.schema,
                          self.n_dropped, dict(self.provenance))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for col in sorted(self.frame.columns):
            h.update(col.encode())
            h.update(pd.util.hash_pandas_object(self.frame[col], index=False).to_numpy().tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


def load_csv(path, schema: DatasetSchema) -> RawDataset:
    """Read a headed CSV into typed columns; rows missing any used column are dropped."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except (OSError, pd.errors.ParserError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    for col in schema.used_columns:
        if col not in df.columns:
            raise IngestionError(f"column {col!r} named in schema is missing from {path.name}")
    for col in schema.exclude:
        if col not in df.columns:
            raise IngestionError(f"exclusion column {col!r} is missing from {path.name}")
    line_numbers = np.arange(len(df)) + 2  # header is line 1
    excluded = np.zeros(len(df), dtype=bool)
    for col, values in schema.exclude.items():
        excluded |= df[col].str.strip().isin([str(v) for v in values]).to_numpy()
    if excluded.any():
        logger.info("excluding %d rows by schema rule", int(excluded.sum()))
    df = df.loc[~excluded, schema.used_columns].apply(lambda s: s.str.strip())
    df = df.reset_index(drop=True)
    line_numbers = line_numbers[~excluded]
    if schema.recode:
        df = df.replace(schema.recode)
    missing = df.isin(schema.missing_tokens).any(axis=1).to_numpy()
    n_dropped = int(missing.sum())
    if n_dropped:
        logger.info("dropping %d rows with missing values", n_dropped)
    df = df.loc[~missing].reset_index(drop=True)
    line_numbers = line_numbers[~missing]

    def _numeric(col: str) -> np.ndarray:
        values = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            i = int(np.argmax(bad))
            raise IngestionError(f"column {col!r}: cannot parse {df[col].iat[i]!r} as a number "
                                 f"(line {line_numbers[i]})")
        return values

    frame = pd.DataFrame({c: _numeric(c) for c in schema.numeric})
    for col in dict.fromkeys([*schema.categorical, *schema.sensitive, schema.cluster]):
        frame[col] = df[col].to_numpy(dtype=str)

    if schema.task == "classification":
        if schema.positive_label is not None:
            y = (df[schema.target].to_numpy(dtype=str) == schema.positive_label).astype(np.float64)
        else:
            y = _numeric(schema.target)
            if not np.all(np.isin(y, (0.0, 1.0))):
                raise IngestionError(f"target {schema.target!r} must be 0/1 when no "
                                     "positive_label is given")
    else:
        y = _numeric(schema.target)
    return RawDataset(frame, y, schema, n_dropped,
                      {"source": str(path), "excluded": int(excluded.sum())})


def write_csv(raw: RawDataset, path) -> None:
    out = raw.frame.copy()
    out[raw.schema.target] = raw.y
    out.to_csv(path, index=False, float_format="%.17g")


# ------------------------------------------------------------------ encoding


@dataclass
class EncoderMeta:
    numeric_stats: dict[str, tuple[float, float]]
    dropped_numeric: list[str]
    categories: dict[str, list[str]]
    feature_names: list[str]
    blocks: dict[str, list[int]]
    probes: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EncoderMeta:
        d = dict(d)
        d["numeric_stats"] = {k: tuple(v) for k, v in d["numeric_stats"].items()}
        return cls(**d)


def fit_encoder(raw: RawDataset, fit_rows) -> EncoderMeta:
    schema = raw.schema
    fit_rows = np.asarray(fit_rows)
    stats, dropped = {}, []
    for col in schema.numeric:
        values = raw.frame[col].to_numpy()[fit_rows]
        sd = float(values.std())
        if not sd > 0:
            logger.warning("numeric column %r has zero variance on fit rows; dropped", col)
            dropped.append(col)
            continue
        stats[col] = (float(values.mean()), sd)
    categories = {col: sorted(set(raw.frame[col].to_numpy(dtype=str)[fit_rows]))
                  for col in schema.categorical}
    names, blocks = list(stats), {}
    for col in schema.categorical:
        blocks[col] = list(range(len(names), len(names) + len(categories[col])))
        names.extend(f"{col}={c}" for c in categories[col])
    return EncoderMeta(stats, dropped, categories, names, blocks, list(schema.probes))


def transform(raw: RawDataset, meta: EncoderMeta) -> np.ndarray:
    n = len(raw)
    X = np.zeros((n, len(meta.feature_names)))
    for j, (col, (mean, sd)) in enumerate(meta.numeric_stats.items()):
        X[:, j] = (raw.frame[col].to_numpy(dtype=np.float64) - mean) / sd
    for col, cols in meta.blocks.items():
        lookup = {c: i for i, c in enumerate(meta.categories[col])}
        values = raw.frame[col].to_numpy(dtype=str)
        idx = np.fromiter((lookup.get(v, -1) for v in values), dtype=np.intp, count=n)
        unseen = idx < 0
        if unseen.any():
            logger.warning("column %r: %d rows with categories unseen at fit time encode as zeros",
                           col, int(unseen.sum()))
        rows = np.nonzero(~unseen)[0]
        X[rows, np.asarray(cols)[idx[rows]]] = 1.0
    return X


@dataclass
class DatasetBundle:
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    S: dict[str, np.ndarray]
    sensitive_categories: dict[str, list[str]]
    clusters: list[str]
    cluster_names: np.ndarray
    encoder: EncoderMeta
    task: str
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def feature_names(self) -> list[str]:
        return self.encoder.feature_names

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def sensitive_sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.sensitive_categories.items()}

    def subset(self, rows) -> DatasetBundle:
        rows = np.asarray(rows)
        return DatasetBundle(self.X[rows], self.y[rows], self.z[rows],
                             {k: v[rows] for k, v in self.S.items()}, self.sensitive_categories,
                             self.clusters, self.cluster_names[rows], self.encoder, self.task,
                             dict(self.provenance))


def cluster_order(names: np.ndarray) -> list[tuple[str, int]]:
    """Clusters by descending frequency, ties broken by name."""
    values, counts = np.unique(np.asarray(names, dtype=str), return_counts=True)
    return sorted(zip(values.tolist(), counts.tolist()), key=lambda vc: (-vc[1], vc[0]))


def encode_and_standardize(raw: RawDataset, fit_rows, seen_clusters: Sequence[str] | None = None,
                           meta: EncoderMeta | None = None) -> DatasetBundle:
    """Fit encoding statistics on ``fit_rows`` (unless ``meta`` is given) and transform all rows.

    Cluster ids index ``seen_clusters`` (default: clusters present in ``fit_rows``);
    rows from other clusters get id -1.
    """
    fit_rows = np.asarray(fit_rows)
    if fit_rows.size == 0:
        raise ContractError("fit_rows is empty")
    if meta is None:
        meta = fit_encoder(raw, fit_rows)
    names = raw.cluster
    if seen_clusters is None:
        seen_clusters = [c for c, _ in cluster_order(names[fit_rows])]
    lookup = {c: i for i, c in enumerate(seen_clusters)}
    z = np.array([lookup.get(c, -1) for c in names], dtype=np.intp)
    S, cats = {}, {}
    for col in raw.schema.sensitive:
        values = raw.frame[col].to_numpy(dtype=str)
        cats[col] = sorted(set(values))
        idx = {c: i for i, c in enumerate(cats[col])}
        S[col] = np.array([idx[v] for v in values], dtype=np.intp)
    return DatasetBundle(transform(raw, meta), raw.y.astype(np.float64), z, S, cats,
                         list(seen_clusters), names, meta, raw.schema.task,
                         dict(raw.provenance))


# -------------------------------------------------------------- partitioning


@dataclass
class Partition:
    seen_clusters: list[str]
    seen_rows: np.ndarray
    unseen_rows: np.ndarray
    frequencies: dict[str, int]

    @property
    def seen_fraction(self) -> float:
        total = self.seen_rows.size + self.unseen_rows.size
        return self.seen_rows.size / total if total else 0.0


def partition_seen_unseen(raw: RawDataset, top_k: int) -> Partition:
    """Rows from the ``top_k`` most frequent clusters are seen; the rest are unseen."""
    order = cluster_order(raw.cluster)
    if top_k < 1 or top_k > len(order):
        raise ConfigurationError(f"top_k must be in [1, {len(order)}], got {top_k}")
    seen = [c for c, _ in order[:top_k]]
    mask = np.isin(raw.cluster, seen)
    return Partition(seen, np.nonzero(mask)[0], np.nonzero(~mask)[0], dict(order))


@dataclass
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    index: int = 0


def _fold_ids(labels: np.ndarray | None, n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    ids = np.empty(n, dtype=np.intp)
    stratify = labels is not None
    if stratify:
        classes, counts = np.unique(labels, return_counts=True)
        if counts.min() < k:
            logger.warning("class with %d < %d members; falling back to unstratified folds",
                           counts.min(), k)
            stratify = False
    if not stratify:
        perm = rng.permutation(n)
        ids[perm] = np.arange(n) % k
        return ids
    offset = 0
    for c in classes:
        members = np.nonzero(labels == c)[0]
        perm = rng.permutation(members)
        ids[perm] = (np.arange(perm.size) + offset) % k
        offset += perm.size
    return ids


def kfold_split(rows, labels=None, k: int = 10, seed: int = 0) -> list[Fold]:
    """k folds over ``rows``: fold i tests on block i, validates on block i+1, trains on the rest.

    Blocks are stratified by ``labels`` when given (classification).
    """
    if k < 3:
        raise ConfigurationError(f"k must be >= 3, got {k}")
    rows = np.asarray(rows)
    labels = None if labels is None else np.asarray(labels)
    ids = _fold_ids(labels, rows.size, k, np.random.default_rng(seed))
    folds = []
    for i in range(k):
        v = (i + 1) % k
        folds.append(Fold(rows[(ids != i) & (ids != v)], rows[ids == v], rows[ids == i], i))
    return folds


def resample_train_val(fold: Fold, labels_of_rows=None, seed: int = 0) -> Fold:
    """Redraw which non-test rows are validation, keeping the test block and sizes fixed."""
    pool = np.concatenate([fold.train, fold.val])
    rng = np.random.default_rng(seed)
    n_val = fold.val.size
    if labels_of_rows is not None:
        labels = np.asarray(labels_of_rows)[pool]
        val_parts = []
        classes = np.unique(labels)
        remaining = n_val
        for j, c in enumerate(classes):
            members = pool[labels == c]
            take = remaining if j == classes.size - 1 else int(round(n_val * members.size / pool.size))
            take = min(take, members.size)
            val_parts.append(rng.choice(members, size=take, replace=False))
            remaining -= take
        val = np.sort(np.concatenate(val_parts))
    else:
        val = np.sort(rng.choice(pool, size=n_val, replace=False))
    train = np.setdiff1d(pool, val)
    return Fold(train, val, fold.test.copy(), fold.index)


# -------------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeSpec:
    count: int = 3
    label_coeff: float = 0.5
    cluster_coeff: float = 0.5
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ConfigurationError(f"probe count must be >= 0, got {self.count}")
        if self.noise_sd < 0:
            raise ConfigurationError("probe noise_sd must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def inject_probes(raw: RawDataset, spec: ProbeSpec) -> RawDataset:
    """Append numeric columns ``probe_j = a*y_std + b*c_cluster + noise``.

    Each probe has its own per-cluster effect ``c ~ N(0, 1)``; the columns carry
    information about the label and the cluster only.
    """
    if spec.count == 0:
        return raw
    rng = np.random.default_rng(spec.seed)
    y = raw.y.astype(np.float64)
    y_std = (y - y.mean()) / (y.std() if y.std() > 0 else 1.0)
    clusters = sorted(set(raw.cluster))
    code = {c: i for i, c in enumerate(clusters)}
    z = np.array([code[c] for c in raw.cluster], dtype=np.intp)
    effects = rng.standard_normal((spec.count, len(clusters)))
    frame = raw.frame.copy()
    names = []
    for j in range(spec.count):
        name = f"probe_{j + 1}"
        if name in frame.columns:
            raise ConfigurationError(f"column {name!r} already exists")
        noise = rng.normal(0.0, spec.noise_sd, size=len(y))
        frame[name] = spec.label_coeff * y_std + spec.cluster_coeff * effects[j, z] + noise
        names.append(name)
    schema = DatasetSchema(**{**raw.schema.to_dict(),
                              "numeric": list(raw.schema.numeric) + names,
                              "probes": list(raw.schema.probes) + names})
    prov = dict(raw.provenance, probes=spec.to_dict())
    return RawDataset(frame, raw.y, schema, raw.n_dropped, prov)


# --------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SynthConfig:
    n: int = 5000
    d: int = 10
    n_clusters: int = 8
    cluster_effect_sd: float = 1.0
    feature_shift_sd: float = 0.3
    bias_strength: float = 0.0
    task: str = "classification"
    sensitive_rate: float = 0.5
    sensitive_cluster_skew: float = 0.0
    noise_sd: float = 1.0
    coef_max: float = 1.5
    coef_min: float = 0.3
    intercept: float = -0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 10 or self.d < 1 or self.n_clusters < 1:
            raise ConfigurationError("synthetic data needs n >= 10, d >= 1, n_clusters >= 1")
        if self.task not in ("classification", "regression"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if not 0 < self.sensitive_rate < 1:
            raise ConfigurationError("sensitive_rate must be in (0, 1)")
        if self.cluster_effect_sd < 0 or self.feature_shift_sd < 0 or self.noise_sd < 0:
            raise ConfigurationError("standard deviations must be >= 0")


def synth_schema(cfg: SynthConfig) -> DatasetSchema:
    return DatasetSchema(target="y", cluster="cluster", sensitive=["s"],
                         numeric=[f"x{j + 1}" for j in range(cfg.d)], categorical=["s"],
                         task=cfg.task)


def synth_clustered(cfg: SynthConfig) -> RawDataset:
    """Clustered tabular data with cluster-specific intercepts and an S-dependent target.

    Features are Gaussians shifted per cluster. The target's logit (or mean) is
    ``X beta + b_cluster + bias_strength * (s - rate) + intercept`` with feature
    coefficients decreasing in magnitude from ``coef_max`` to ``coef_min``.
    """
    rng = np.random.default_rng(cfg.seed)
    K = cfg.n_clusters
    weights = rng.dirichlet(np.full(K, 4.0))
    z = rng.choice(K, size=cfg.n, p=weights)
    shifts = rng.normal(0.0, cfg.feature_shift_sd, size=(K, cfg.d))
    X = shifts[z] + rng.standard_normal((cfg.n, cfg.d))
    signs = np.where(np.arange(cfg.d) % 2 == 0, 1.0, -1.0)
    beta = signs * np.linspace(cfg.coef_max, cfg.coef_min, cfg.d)
    cluster_rate = np.clip(cfg.sensitive_rate + cfg.sensitive_cluster_skew
                           * rng.uniform(-1, 1, size=K), 0.05, 0.95)
    s = (rng.uniform(size=cfg.n) < cluster_rate[z]).astype(np.float64)
    b = rng.normal(0.0, cfg.cluster_effect_sd, size=K)
    eta = X @ beta + b[z] + cfg.bias_strength * (s - cfg.sensitive_rate) + cfg.intercept
    if cfg.task == "classification":
        p = 1.0 / (1.0 + np.exp(-eta))
        y = (rng.uniform(size=cfg.n) < p).astype(np.float64)
    else:
        y = eta + rng.normal(0.0, cfg.noise_sd, size=cfg.n)
    frame = pd.DataFrame({f"x{j + 1}": X[:, j] for j in range(cfg.d)})
    frame["s"] = np.where(s > 0, "s1", "s0")
    frame["cluster"] = np.array([f"c{k}" for k in range(K)])[z]
    prov = {"source": "synth_clustered", "synth": asdict(cfg), "beta": beta.tolist(),
            "cluster_intercepts": b.tolist()}
    return RawDataset(frame, y, synth_schema(cfg), 0, prov)


# ------------------------------------------------------------- bundle cache


def save_cache(directory, raw: RawDataset, partition: Partition, folds: list[Fold],
               extra: dict | None = None) -> str:
    """Write typed column arrays plus JSON metadata; returns the content hash."""
    d = Path(directory)
    (d / "columns").mkdir(parents=True, exist_ok=True)
    columns = {}
    for col in raw.frame.columns:
        series = raw.frame[col]
        fname = f"columns/{_safe(col)}.npy"
        if series.dtype.kind == "f":
            np.save(d / fname, series.to_numpy(dtype=np.float64))
            columns[col] = {"kind": "numeric", "file": fname}
        else:
            cats, codes = np.unique(series.to_numpy(dtype=str), return_inverse=True)
            np.save(d / fname, codes.astype(np.int32))
            columns[col] = {"kind": "categorical", "file": fname, "categories": cats.tolist()}
    np.save(d / "target.npy", raw.y)
    np.save(d / "seen_rows.npy", partition.seen_rows)
    np.save(d / "unseen_rows.npy", partition.unseen_rows)
    fold_ids = np.full(len(raw), -1, dtype=np.int32)
    for f in folds:
        fold_ids[f.test] = f.index
    np.save(d / "fold_ids.npy", fold_ids)
    meta = {
        "schema": raw.schema.to_dict(),
        "columns": columns,
        "column_order": list(raw.frame.columns),
        "n_rows": len(raw),
        "n_dropped": raw.n_dropped,
        "provenance": raw.provenance,
        "partition": {"seen_clusters": partition.seen_clusters,
                      "frequencies": partition.frequencies,
                      "seen_fraction": partition.seen_fraction},
        "n_folds": len(folds),
        **(extra or {}),
    }
    digest = _cache_digest(d, meta)
    meta["content_hash"] = digest
    (d / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return digest


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def _cache_digest(d: Path, meta: dict) -> str:
    h = hashlib.sha256(json.dumps(meta, sort_keys=True).encode())
    for f in sorted(d.rglob("*.npy")):
        h.update(f.relative_to(d).as_posix().encode())
        h.update(np.load(f).tobytes())
    return h.hexdigest()[:16]


def load_cache(directory) -> tuple[RawDataset, Partition, list[Fold], dict]:
    d = Path(directory)
    meta_path = d / "metadata.json"
    if not meta_path.exists():
        raise ContractError(f"no bundle cache at {d}")
    meta = json.loads(meta_path.read_text())
    frame = pd.DataFrame()
    for col in meta["column_order"]:
        info = meta["columns"][col]
        arr = np.load(d / info["file"])
        if info["kind"] == "numeric":
            frame[col] = arr
        else:
            frame[col] = np.asarray(info["categories"], dtype=str)[arr]
    schema = DatasetSchema.from_dict(meta["schema"])
    raw = RawDataset(frame, np.load(d / "target.npy"), schema, meta["n_dropped"],
                     meta["provenance"])
    partition = Partition(meta["partition"]["seen_clusters"], np.load(d / "seen_rows.npy"),
                          np.load(d / "unseen_rows.npy"), meta["partition"]["frequencies"])
    fold_ids = np.load(d / "fold_ids.npy")
    k = meta["n_folds"]
    folds = []
    for i in range(k):
        v = (i + 1) % k
        folds.append(Fold(np.nonzero((fold_ids >= 0) & (fold_ids != i) & (fold_ids != v))[0],
                          np.nonzero(fold_ids == v)[0], np.nonzero(fold_ids == i)[0], i))
    return raw, partition, folds, meta


# --------------------------------------------------------------------- Adult

ADULT_URL = "https://archive.ics.uci.edu/ml/machine-learning-databases/adult/adult.data"
ADULT_COLUMNS = ["age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
                 "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
                 "hours-per-week", "native-country", "income"]


def adult_age_group(age: np.ndarray) -> np.ndarray:
    age = np.asarray(age, dtype=np.float64)
    return np.where(age <= 30, "<=30", np.where(age <= 45, "31-45", ">45"))


def convert_adult(source, dest) -> Path:
    """Turn the headerless UCI ``adult.data`` file into a headed CSV with ``age_group``."""
    df = pd.read_csv(source, names=ADULT_COLUMNS, skipinitialspace=True, dtype=str,
                     keep_default_na=False)
    df = df[df["income"].str.len() > 0]
    df["income"] = df["income"].str.rstrip(".")
    df["age_group"] = adult_age_group(df["age"].astype(float))
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(dest, index=False)
    return dest


def fetch_adult(dest, url: str = ADULT_URL) -> Path:
    """Download the UCI file and convert it; no-op if ``dest`` exists."""
    dest = Path(dest)
    if dest.exists():
        return dest
    raw_path = dest.with_suffix(".data")
    urllib.request.urlretrieve(url, raw_path)
    return convert_adult(raw_path, dest)


def adult_schema() -> DatasetSchema:
    """Occupation is the cluster; ``?`` is kept as an ``Unknown`` category.

    The 23 ``Married-AF-spouse`` rows are excluded, leaving six marital-status
    categories and 32,538 rows with a 24.07% positive rate.
    """
    return DatasetSchema(
        target="income",
        positive_label=">50K",
        cluster="occupation",
        sensitive=["sex", "age_group", "race", "marital-status"],
        numeric=["age", "education-num", "capital-gain", "capital-loss", "hours-per-week"],
        categorical=["workclass", "marital-status", "relationship", "race", "sex", "age_group",
                     "native-country"],
        task="classification",
        recode={"?": "Unknown"},
        exclude={"marital-status": ["Married-AF-spouse"]},
    )


def positive_rate(raw: RawDataset) -> float:
    return float(np.mean(raw.y)) if len(raw) else math.nan

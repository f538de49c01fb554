"""``fairmedl`` command line: prepare, train, audit, report, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import data as D
from . import training as T
from .architecture import VARIANTS
from .errors import ConfigurationError, ContractError, DivergenceError, FairMEDLError, IngestionError
from .fairness import GroupedPredictions, fairness_metrics

logger = logging.getLogger("fairmedl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
DEFAULT_CACHE = ".fairmedl-cache"
TOLERANCE = 1e-9


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


# ------------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    data: str | None = None
    schema: str | dict | None = None
    synthetic: dict | None = None
    top_k: int | None = None
    folds: int = 10
    fold_subset: list[int] | None = None
    probes: dict | None = None
    variants: list[str] = field(default_factory=lambda: ["armed", "fair_medl"])
    baseline: str | None = None
    plan: dict = field(default_factory=dict)
    variant_plans: dict = field(default_factory=dict)
    repeats: int = 20
    cache: str | None = None
    output: str = "runs"
    seed: int = 0

    def __post_init__(self):
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigurationError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
        if self.baseline is not None and self.baseline not in self.variants:
            raise ConfigurationError(f"baseline {self.baseline!r} is not among the variants")
        if self.repeats < 1 or self.folds < 3:
            raise ConfigurationError("repeats must be >= 1 and folds >= 3")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        cfg = cls.from_dict(D.read_config_file(path))
        base = path.parent
        if cfg.data and not Path(cfg.data).is_absolute():
            cfg.data = str(base / cfg.data)
        if isinstance(cfg.schema, str) and cfg.schema != "adult" and not Path(cfg.schema).is_absolute():
            cfg.schema = str(base / cfg.schema)
        return cfg

    def identity(self) -> dict:
        """Fields that determine results (paths to outputs and caches excluded)."""
        d = asdict(self)
        for key in ("cache", "output"):
            d.pop(key)
        return d

    def plan_for(self, variant: str) -> T.TrainPlan:
        merged = {**self.plan, **self.variant_plans.get(variant, {})}
        weights = {**self.plan.get("weights", {}), **self.variant_plans.get(variant, {}).get("weights", {})}
        merged["weights"] = weights
        merged.setdefault("seed", self.seed)
        return T.TrainPlan(variant=variant, **merged)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def resolve_cache(flag: str | None, config: ExperimentConfig | None = None) -> Path:
    if flag:
        return Path(flag)
    if os.environ.get("FAIRMEDL_CACHE"):
        return Path(os.environ["FAIRMEDL_CACHE"])
    if config is not None and config.cache:
        return Path(config.cache)
    return Path(DEFAULT_CACHE)


# ----------------------------------------------------------------- prepare


def _resolve_schema(schema) -> D.DatasetSchema:
    if schema is None:
        raise UsageError("a schema is required (--schema PATH, or 'adult')")
    if isinstance(schema, dict):
        return D.DatasetSchema.from_dict(schema)
    if schema == "adult":
        return D.adult_schema()
    if not Path(schema).exists():
        raise UsageError(f"schema file {schema} does not exist")
    return D.load_schema(schema)


def build_raw(cfg: ExperimentConfig) -> D.RawDataset:
    if cfg.synthetic is not None:
        raw = D.synth_clustered(D.SynthConfig(**{"seed": cfg.seed, **cfg.synthetic}))
    else:
        if not cfg.data:
            raise UsageError("no data given (--data PATH or a [synthetic] config table)")
        schema = _resolve_schema(cfg.schema)
        if not Path(cfg.data).exists():
            raise UsageError(f"data file {cfg.data} does not exist")
        raw = D.load_csv(cfg.data, schema)
    if cfg.probes:
        raw = D.inject_probes(raw, D.ProbeSpec(**{"seed": cfg.seed, **cfg.probes}))
    return raw


_DATA_KEYS = ("data", "schema", "synthetic", "top_k", "folds", "probes", "seed")


def data_identity(cfg: ExperimentConfig) -> dict:
    d = {k: v for k, v in cfg.identity().items() if k in _DATA_KEYS}
    if d["data"]:
        d["data"] = str(Path(d["data"]).resolve())
    return json.loads(json.dumps(d, default=str))


def prepare(cfg: ExperimentConfig, cache_dir: Path) -> str:
    raw = build_raw(cfg)
    n_clusters = len(set(raw.cluster))
    partition = D.partition_seen_unseen(raw, cfg.top_k or n_clusters)
    labels = raw.y[partition.seen_rows] if raw.schema.task == "classification" else None
    folds = D.kfold_split(partition.seen_rows, labels, cfg.folds, cfg.seed)
    extra = {"data_config": data_identity(cfg),
             "positive_rate": D.positive_rate(raw) if raw.schema.task == "classification" else None}
    digest = D.save_cache(cache_dir, raw, partition, folds, extra)
    logger.info("cache %s: %d rows, seen fraction %.4f", cache_dir, len(raw), partition.seen_fraction)
    return digest


def cmd_prepare(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.data:
        cfg.data = args.data
    if args.schema:
        cfg.schema = args.schema
    if args.synthetic:
        cfg.synthetic = cfg.synthetic or {}
    for name in ("top_k", "folds", "seed"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.probes is not None:
        cfg.probes = {**(cfg.probes or {}), "count": args.probes}
    cache = resolve_cache(args.out, cfg)
    digest = prepare(cfg, cache)
    meta = json.loads((cache / "metadata.json").read_text())
    print(json.dumps({"cache": str(cache), "content_hash": digest,
                      "rows": meta["n_rows"], "seen_fraction": meta["partition"]["seen_fraction"],
                      "positive_rate": meta.get("positive_rate")}, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------- train


_WORKER_STATE: dict = {}


def _load_state(cache_dir: str):
    meta_path = Path(cache_dir) / "metadata.json"
    if not meta_path.exists():
        raise ContractError(f"no bundle cache at {cache_dir}")
    key = (cache_dir, json.loads(meta_path.read_text()).get("content_hash"))
    if _WORKER_STATE.get("key") != key:
        raw, partition, folds, meta = D.load_cache(cache_dir)
        _WORKER_STATE.update(key=key, raw=raw, partition=partition, folds=folds, meta=meta)
    return _WORKER_STATE


def _bundle_factory(state):
    raw, partition = state["raw"], state["partition"]

    def factory(fold: D.Fold):
        bundle = D.encode_and_standardize(raw, fold.train, partition.seen_clusters)
        return bundle, partition.unseen_rows
    return factory


def _run_task(task: tuple) -> tuple:
    cache_dir, plan, repeat, fold_index = task
    state = _load_state(cache_dir)
    fold = state["folds"][fold_index]
    labels = state["raw"].y if state["raw"].schema.task == "classification" else None
    try:
        result, stack = T.run_single(_bundle_factory(state), fold, plan, repeat, labels)
    except DivergenceError as exc:
        raise DivergenceError(f"{plan.variant} repeat {repeat} fold {fold_index}: {exc}") from exc
    return result, stack.state_dict(), stack.config.to_dict()


def _run_name(repeat: int, fold: int) -> str:
    return f"r{repeat:03d}_f{fold:02d}"


def read_predictions(path) -> pd.DataFrame:
    df = pd.read_csv(path, keep_default_na=False, dtype={"split": str, "head": str, "cluster": str})
    for col in T.sensitive_columns(df):
        df[col] = df[col].astype(str)
    return df


def _write_run(vdir: Path, result: T.RunResult, state: dict, stack_config: dict, provenance: str):
    name = _run_name(result.repeat, result.fold)
    result.predictions.to_csv(vdir / f"{name}.predictions.csv", index=False)
    np.savez(vdir / f"{name}.npz", **{k.replace("/", "|"): v for k, v in state.items()})
    doc = {**result.to_dict(), "provenance": provenance, "stack_config": stack_config}
    (vdir / f"{name}.json").write_text(json.dumps(doc, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _load_run(vdir: Path, repeat: int, fold: int, provenance: str) -> T.RunResult | None:
    name = _run_name(repeat, fold)
    jpath, ppath = vdir / f"{name}.json", vdir / f"{name}.predictions.csv"
    if not (jpath.exists() and ppath.exists()):
        return None
    doc = json.loads(jpath.read_text())
    if doc.get("provenance") != provenance:
        logger.warning("%s was produced under provenance %s; retraining", jpath, doc.get("provenance"))
        return None
    return T.RunResult.from_dict(doc, read_predictions(ppath))


def train_experiment(cfg: ExperimentConfig, cache_dir: Path, out: Path, jobs: int = 1) -> dict:
    if not (cache_dir / "metadata.json").exists():
        logger.info("no cache at %s; preparing it", cache_dir)
        prepare(cfg, cache_dir)
    state = _load_state(str(cache_dir))
    meta = state["meta"]
    if meta.get("data_config") != data_identity(cfg):
        raise ConfigurationError(f"cache {cache_dir} was prepared from a different data "
                                 "configuration; run 'fairmedl prepare' or point --cache elsewhere")
    provenance = _digest({"config": cfg.identity(), "data": meta["content_hash"]})
    out.mkdir(parents=True, exist_ok=True)
    folds = [f.index for f in state["folds"]]
    if cfg.fold_subset is not None:
        bad = [f for f in cfg.fold_subset if f not in folds]
        if bad:
            raise ConfigurationError(f"fold_subset has unknown folds {bad}")
        folds = list(cfg.fold_subset)
    baseline = cfg.baseline or cfg.variants[0]
    order = [baseline] + [v for v in cfg.variants if v != baseline]
    plans = {v: cfg.plan_for(v) for v in order}

    results: dict[str, dict] = {v: {} for v in order}
    pending = []
    for v in order:
        vdir = out / v
        vdir.mkdir(exist_ok=True)
        for r in range(cfg.repeats):
            for f in folds:
                done = _load_run(vdir, r, f, provenance)
                if done is not None:
                    results[v][(r, f)] = done
                else:
                    pending.append((str(cache_dir), plans[v], r, f))
    skipped = sum(len(x) for x in results.values())
    logger.info("%d runs to train, %d resumed", len(pending), skipped)

    def _collect(task, outcome):
        result, st, sc = outcome
        v = task[1].variant
        _write_run(out / v, result, st, sc, provenance)
        results[v][(task[2], task[3])] = result

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for task, outcome in zip(pending, pool.map(_run_task, pending)):
                _collect(task, outcome)
    else:
        for task in pending:
            _collect(task, _run_task(task))

    summaries: dict[str, T.StatSummary] = {}
    for v in order:
        runs = [results[v][k] for k in sorted(results[v])]
        summaries[v] = _summarize_variant(runs, v, summaries.get(baseline) if v != baseline else None,
                                          cfg.repeats)
        _write_variant_outputs(out / v, runs, summaries[v], provenance)
    manifest = {"provenance": provenance, "cache": str(cache_dir),
                "cache_hash": meta["content_hash"], "config": cfg.identity(),
                "variants": order, "baseline": baseline, "folds": folds, "repeats": cfg.repeats,
                "probes": meta["schema"].get("probes", [])}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return {"provenance": provenance, "trained": len(pending), "resumed": skipped,
            "summaries": {v: str(out / v / "summary.json") for v in order}}


def _summarize_variant(runs, label, baseline, repeats) -> T.StatSummary:
    samples = T.repeat_samples(runs)
    if repeats < 2:
        return T.summarize(samples, label)
    return T.compare_to_baseline(samples, label, baseline)


def _write_variant_outputs(vdir: Path, runs: list[T.RunResult], summary: T.StatSummary,
                           provenance: str) -> None:
    tables = []
    for res in runs:
        t = res.predictions.copy()
        t.insert(0, "fold", res.fold)
        t.insert(0, "repeat", res.repeat)
        tables.append(t)
    pd.concat(tables, ignore_index=True).to_csv(vdir / "predictions.csv", index=False)
    imp = pd.DataFrame([{"repeat": res.repeat, "fold": res.fold, **row}
                        for res in runs for row in res.importance])
    imp.to_csv(vdir / "importance.csv", index=False)
    doc = {**summary.to_dict(), "provenance": provenance}
    (vdir / "summary.json").write_text(json.dumps(doc, indent=1, default=_json_default))


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.repeats is not None:
        cfg.repeats = args.repeats
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variants:
        cfg.variants = args.variants.split(",")
        ExperimentConfig.__post_init__(cfg)
    out = Path(args.out or cfg.output)
    info = train_experiment(cfg, resolve_cache(args.cache, cfg), out, args.jobs)
    print(json.dumps(info, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------- audit


def audit_table(df: pd.DataFrame, sensitive: Sequence[str], task: str,
                epsilon: float | None = None) -> tuple[list[dict], list[dict]]:
    """Fairness metrics per (group keys, variable); errors are recorded, not raised."""
    keys = [k for k in ("repeat", "fold", "split", "head") if k in df.columns]
    rows, errors = [], []
    groups = df.groupby(keys, sort=True) if keys else [((), df)]
    for key, part in groups:
        key = key if isinstance(key, tuple) else (key,)
        labels = dict(zip(keys, key))
        for var in sensitive:
            cats, group = np.unique(part[var].to_numpy(dtype=str), return_inverse=True)
            cf_cols = [c for c in part.columns if c.startswith(f"cf:{var}=")]
            cf = None
            if cf_cols:
                names = [c.split("=", 1)[1] for c in cf_cols]
                full = part[cf_cols].to_numpy(dtype=np.float64)
                own = np.array([names.index(v) if v in names else -1
                                for v in part[var].to_numpy(dtype=str)])
                if (own >= 0).all() and full.shape[1] >= 2:
                    keep = np.ones(full.shape, dtype=bool)
                    keep[np.arange(full.shape[0]), own] = False
                    cf = full[keep].reshape(full.shape[0], full.shape[1] - 1)
            preds = part["pred"].to_numpy(dtype=np.float64) if task == "classification" else None
            gp = GroupedPredictions(part["score"].to_numpy(dtype=np.float64),
                                    part["label"].to_numpy(dtype=np.float64), group, preds,
                                    list(cats))
            try:
                values = fairness_metrics(gp, task, cf)
            except ContractError as exc:
                errors.append({**labels, "variable": var, "error": str(exc)})
                continue
            if cf is None:
                errors.append({**labels, "variable": var,
                               "notice": "no counterfactual columns; CF skipped"})
            for name, fv in values.items():
                row = {**labels, "variable": var, "metric": name, "value": fv.value,
                       "breakdown": json.dumps(fv.breakdown), "flags": "; ".join(fv.flags)}
                if epsilon is not None:
                    row["passes"] = fv.passes(epsilon)
                rows.append(row)
    return rows, errors


def cmd_audit(args) -> int:
    path = Path(args.predictions)
    if not path.exists():
        raise UsageError(f"predictions file {path} does not exist")
    df = read_predictions(path)
    for col in ("score", "label"):
        if col not in df.columns:
            raise UsageError(f"predictions file lacks required column {col!r}")
    sensitive = args.sensitive.split(",") if args.sensitive else T.sensitive_columns(df)
    missing = [s for s in sensitive if s not in df.columns]
    if missing:
        raise UsageError(f"sensitive columns {missing} not in predictions file")
    task = args.task or T.infer_task(df)
    if task == "classification" and "pred" not in df.columns:
        raise UsageError("classification audit needs a 'pred' column of hard predictions")
    rows, errors = audit_table(df, sensitive, task, args.epsilon)
    for e in errors:
        print(f"notice: {e}", file=sys.stderr)
    report = {"source": str(path), "task": task, "sensitive": sensitive, "metrics": rows,
              "errors": errors}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.json").write_text(json.dumps(report, indent=1, default=_json_default))
        pd.DataFrame(rows).to_csv(out / "audit.csv", index=False)
    else:
        print(json.dumps(report, indent=1, default=_json_default))
    return EXIT_OK


# ------------------------------------------------------------------ report


def _split_key(key: str) -> dict:
    parts = key.split("/")
    if len(parts) == 3:
        return {"split": parts[0], "head": parts[1], "variable": "", "metric": parts[2]}
    return {"split": parts[0], "head": parts[1], "variable": parts[2], "metric": parts[3]}


def collect_runs(run_dirs: Sequence[Path]) -> list[dict]:
    """One entry per (provenance, variant); duplicates across directories merge."""
    seen: dict[tuple, dict] = {}
    for rd in run_dirs:
        manifest_path = rd / "manifest.json"
        if not manifest_path.exists():
            logger.warning("%s has no manifest.json; skipped", rd)
            continue
        manifest = json.loads(manifest_path.read_text())
        for v in manifest["variants"]:
            spath = rd / v / "summary.json"
            if not spath.exists():
                continue
            key = (manifest["provenance"], v)
            if key in seen:
                continue
            seen[key] = {"dir": rd, "variant": v, "manifest": manifest,
                         "summary": json.loads(spath.read_text())}
    return list(seen.values())


def report_rows(entries: list[dict], epsilon: float | None = None) -> list[dict]:
    rows = []
    for e in entries:
        for key, st in e["summary"]["stats"].items():
            row = {"provenance": e["manifest"]["provenance"], "variant": e["variant"],
                   **_split_key(key), "mean": st["mean"], "ci_low": st["ci_low"],
                   "ci_high": st["ci_high"], "p_value": st["p_value"], "n": st["n"],
                   "baseline": e["summary"].get("baseline")}
            if epsilon is not None and row["variable"]:
                row["passes"] = bool(st["mean"] <= epsilon)
            rows.append(row)
    return rows


def cmd_report(args) -> int:
    run_dirs = [Path(p) for p in args.runs]
    entries = collect_runs(run_dirs)
    if not entries:
        print("error: no run summaries found", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    rows = report_rows(entries, args.epsilon)
    table = pd.DataFrame(rows)
    table.to_csv(out / "table.csv", index=False)
    fair = table[table["variable"] != ""]
    for (split, head), part in fair.groupby(["split", "head"], sort=True):
        plot = part[["metric", "variable", "variant", "mean", "ci_low", "ci_high"]].rename(
            columns={"mean": "value"})
        plot.to_csv(out / "plots" / f"fairness_{split}_{head}.csv", index=False)
    imps, curves = [], []
    for e in entries:
        vdir = e["dir"] / e["variant"]
        ipath = vdir / "importance.csv"
        if ipath.exists():
            imp = pd.read_csv(ipath)
            imp.insert(0, "variant", e["variant"])
            imp.insert(0, "provenance", e["manifest"]["provenance"])
            imps.append(imp)
        for jpath in sorted(vdir.glob("r*_f*.json")):
            doc = json.loads(jpath.read_text())
            h = doc["history"]
            for epoch, (tr, va) in enumerate(zip(h["epoch_train"], h["epoch_val"])):
                curves.append({"provenance": e["manifest"]["provenance"], "variant": e["variant"],
                               "repeat": doc["repeat"], "fold": doc["fold"], "epoch": epoch,
                               "train_objective": tr, "val_task_loss": va})
    if imps:
        imp = pd.concat(imps, ignore_index=True)
        imp["probe"] = imp["probe"].astype(bool)
        imp.to_csv(out / "importance.csv", index=False)
        agg = (imp.groupby(["provenance", "variant", "feature", "probe"], sort=True)
               .agg(mean_importance=("importance", "mean"), median_rank=("rank", "median"))
               .reset_index().sort_values(["provenance", "variant", "median_rank", "feature"]))
        agg.to_csv(out / "importance_summary.csv", index=False)
    if curves:
        pd.DataFrame(curves).to_csv(out / "plots" / "training_curves.csv", index=False)
    provenances = sorted({e["manifest"]["provenance"] for e in entries})
    (out / "report.json").write_text(json.dumps(
        {"provenance": provenances, "runs": [str(d) for d in run_dirs], "rows": rows},
        indent=1, default=_json_default))
    print(json.dumps({"rows": len(rows), "provenance": provenances, "out": str(out)}, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ verify


def _diff(a, b) -> float:
    if a is None and b is None:
        return 0.0
    if a is None or b is None:
        return math.inf
    a, b = float(a), float(b)
    if math.isnan(a) and math.isnan(b):
        return 0.0
    if math.isnan(a) or math.isnan(b):
        return math.inf
    return abs(a - b)


def verify_runs(run_dir: Path, report_dir: Path | None = None) -> tuple[float, int]:
    """Recompute every stored metric from stored predictions; return (max abs diff, count)."""
    manifest = json.loads((run_dir / "manifest.json").read_text())
    worst, count = 0.0, 0
    recomputed: dict[str, T.StatSummary] = {}
    for v in manifest["variants"]:
        vdir = run_dir / v
        runs = []
        for jpath in sorted(vdir.glob("r*_f*.json")):
            doc = json.loads(jpath.read_text())
            preds = read_predictions(jpath.with_name(jpath.stem + ".predictions.csv"))
            fresh = T.metrics_from_predictions(preds, T.infer_task(preds), T.sensitive_columns(preds))
            if set(fresh) != set(doc["metrics"]):
                raise ContractError(f"{jpath.name}: metric sets differ after recomputation")
            for k, value in doc["metrics"].items():
                worst = max(worst, _diff(value, fresh[k]))
                count += 1
            runs.append(T.RunResult.from_dict(doc, preds))
        base = recomputed.get(manifest["baseline"]) if v != manifest["baseline"] else None
        summary = _summarize_variant(runs, v, base, manifest["repeats"])
        recomputed[v] = summary
        stored = json.loads((vdir / "summary.json").read_text())["stats"]
        if set(stored) != set(summary.stats):
            raise ContractError(f"{v}: summary metric sets differ after recomputation")
        for k, st in summary.stats.items():
            for attr in ("mean", "ci_low", "ci_high", "p_value"):
                worst = max(worst, _diff(stored[k][attr], getattr(st, attr)))
                count += 1
    if report_dir is not None:
        table = pd.read_csv(report_dir / "table.csv", keep_default_na=False,
                            dtype={"variable": str})
        table = table[table["provenance"] == manifest["provenance"]]
        for _, row in table.iterrows():
            key = "/".join([row["split"], row["head"]] + ([row["variable"]] if row["variable"] else [])
                           + [row["metric"]])
            st = recomputed[row["variant"]].stats[key]
            for attr in ("mean", "ci_low", "ci_high", "p_value"):
                value = row[attr]
                value = None if value == "" else value
                worst = max(worst, _diff(value, getattr(st, attr)))
                count += 1
    return worst, count


def cmd_verify(args) -> int:
    run_dir = Path(args.runs)
    if not (run_dir / "manifest.json").exists():
        raise UsageError(f"{run_dir} is not a run directory (no manifest.json)")
    worst, count = verify_runs(run_dir, Path(args.report) if args.report else None)
    ok = worst < TOLERANCE
    print(json.dumps({"numbers_checked": count, "max_abs_diff": worst, "tolerance": TOLERANCE,
                      "ok": ok}, indent=2))
    return EXIT_OK if ok else EXIT_RUNTIME


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairmedl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="encode, partition and cache a dataset")
    sp.add_argument("--data", help="input CSV")
    sp.add_argument("--schema", help="schema TOML/JSON file, or 'adult'")
    sp.add_argument("--config", help="experiment config (TOML/JSON)")
    sp.add_argument("--out", help="cache directory (default: $FAIRMEDL_CACHE)")
    sp.add_argument("--synthetic", action="store_true", help="generate clustered synthetic data")
    sp.add_argument("--top-k", type=int, dest="top_k")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--probes", type=int, help="number of confounding probes to inject")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train variants across folds and repeats")
    sp.add_argument("--config", required=True)
    sp.add_argument("--cache", help="cache directory (default: $FAIRMEDL_CACHE or config)")
    sp.add_argument("--out", help="run directory (default: config 'output')")
    sp.add_argument("--variants", help="comma-separated override of the config's variants")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("audit", help="fairness metrics for a predictions CSV")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--sensitive", help="comma-separated sensitive columns (default: all)")
    sp.add_argument("--task", choices=["classification", "regression"])
    sp.add_argument("--epsilon", type=float, help="optional maximum-unfairness threshold")
    sp.add_argument("--out", help="directory for audit.json and audit.csv (default: stdout)")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("report", help="tables and plot data from run directories")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epsilon", type=float)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("verify", help="recompute reported numbers from stored predictions")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--report", help="report directory to check as well")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if args.command == "prepare" else EXIT_RUNTIME
    except (DivergenceError, FairMEDLError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""End-to-end experiment runs and result tables."""

from __future__ import annotations

import csv
import glob as globlib
import io
import json
import logging
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import (
    SCHEMAS,
    Dataset,
    ResampleSpec,
    absent_group_features,
    class_counts,
    impute_median,
    load_csv,
    smote,
    split,
    standardize,
    zero_absent_features,
)
from .errors import ConfigError, DataError, FlbenchError
from .fed import FedData, RunHistory, run_central, run_federated, run_local
from .fixtures import synth_fixture
from .nn import mlp_init
from .partition import PartitionPlan, make_plan, route_holdout
from .rng import derive_seed

log = logging.getLogger(__name__)

RESULT_KEYS = ("dataset", "scenario", "clients", "method", "fbeta", "fairness", "best_round", "seed",
               "config_hash")
METHOD_ORDER = ("central", "local", "fedavg", "fedprox", "qfedavg", "fedyogi")


@contextmanager
def _stage(name: str) -> Iterator[None]:
    """Prefix errors raised inside a pipeline stage with the stage name."""
    try:
        yield
    except FlbenchError as exc:
        msg = str(exc)
        if not msg.startswith("["):
            msg = f"[{name}] {msg}"
        raise type(exc)(msg) from exc


@dataclass
class Prepared:
    """Preprocessed splits plus the client plan, before any resampling."""

    train: Dataset
    val: Dataset
    test: Dataset
    plan: PartitionPlan


def load_dataset(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    ds = cfg.dataset
    if ds.fixture is not None:
        f = ds.fixture
        return synth_fixture(ds.kind, f["n"], f["d"], f["pos_rate"], f["seed"]), None
    if ds.path is None:
        raise ConfigError("dataset.path is not set")
    if not Path(ds.path).is_file():
        raise DataError(f"dataset file {ds.path} not found (set FLBENCH_DATA_DIR or dataset.path)")
    schema = SCHEMAS[ds.kind]
    full = load_csv(ds.path, schema)
    test = None
    if ds.test_path:
        if not Path(ds.test_path).is_file():
            raise DataError(f"test file {ds.test_path} not found")
        test = load_csv(ds.test_path, schema)
        if test.feature_names != full.feature_names:
            raise DataError("test file columns differ from training file columns")
    return full, test


def prepare(cfg: ExperimentConfig, resample_first: bool = False) -> Prepared:
    """Load, split, impute, standardize and partition.

    With ``resample_first`` the pooled training split is oversampled before the
    partition is drawn, so clients share the synthetic rows.
    """
    with _stage("data"):
        full, external_test = load_dataset(cfg)
        parts = split(full, cfg.split)
        train, val = parts.train, parts.val
        test = external_test if external_test is not None else parts.test
        if len(test) == 0:
            raise DataError("test split is empty")
        # groups that never record a feature keep it at 0 after scaling
        absent = absent_group_features(train)
        train, (val, test) = impute_median(train, [val, test])
        train, (val, test), _ = standardize(train, [val, test])
        train, val, test = (zero_absent_features(d, absent) for d in (train, val, test))
        if resample_first:
            train = smote(train, cfg.resample)
    with _stage("partition"):
        plan = make_plan(train, cfg.partition)
    return Prepared(train, val, test, plan)


def _resample_shard(shard: Dataset, spec: ResampleSpec, client: int) -> Dataset:
    if spec.method == "none":
        return shard
    if min(class_counts(shard.labels)) < 2:
        warnings.warn(f"client {client}: fewer than 2 minority samples, SMOTE skipped", stacklevel=2)
        return shard
    return smote(shard, ResampleSpec(spec.method, spec.k_neighbors, spec.target_minority_ratio,
                                     derive_seed(spec.seed, "client", client)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


@dataclass
class ExperimentResult:
    history: RunHistory
    record: dict
    history_path: Path | None = None
    result_path: Path | None = None


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1,
                   write: bool = True) -> ExperimentResult:
    """Run one configured experiment and write its history and result files."""
    global_resample = cfg.resample.method != "none" and (cfg.resample_scope == "global" or cfg.mode == "central")
    prep = prepare(cfg, resample_first=global_resample)
    plan = prep.plan

    with _stage("data"):
        shards = [prep.train.subset(idx) for idx in plan.clients]
        if not global_resample:
            shards = [_resample_shard(s, cfg.resample, k) for k, s in enumerate(shards)]
        val_slices = route_holdout(plan, prep.val, derive_seed(cfg.seed, "route", "val"))
        test_slices = route_holdout(plan, prep.test, derive_seed(cfg.seed, "route", "test"))

    with _stage("model"):
        init = mlp_init([prep.train.n_features, *cfg.hidden, 2], derive_seed(cfg.seed, "init"), cfg.batch_norm)

    with _stage("train"):
        if cfg.mode == "central":
            hist = run_central(prep.train, prep.val, prep.test, cfg.fed, init, test_slices)
        else:
            data = FedData(shards, prep.val, prep.test, val_slices, test_slices)
            runner = run_federated if cfg.mode == "federated" else run_local
            hist = runner(data, cfg.fed, init, jobs=jobs)

    hist.config_echo = {"config": cfg.echo(), "overrides": cfg.overrides, "config_hash": cfg.config_hash}
    final = hist.final_test_metrics
    record = {
        "dataset": cfg.dataset.kind,
        "scenario": cfg.scenario,
        "clients": plan.num_clients,
        "method": cfg.method,
        "fbeta": final["fbeta"],
        "fairness": final["fairness"],
        "best_round": hist.best_round,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
    }
    result = ExperimentResult(hist, record)
    if write:
        out = Path(out_dir if out_dir is not None else cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        body = hist.to_json()
        body["data"] = {
            "n_train": len(prep.train), "n_val": len(prep.val), "n_test": len(prep.test),
            "n_features": prep.train.n_features, "feature_names": list(prep.train.feature_names),
            "client_sizes": [len(s) for s in shards], "client_positives": [s.n_positive for s in shards],
            "participation": "all", "partition_alpha": cfg.partition.alpha,
        }
        result.history_path = out / f"{cfg.name}.history.json"
        result.result_path = out / f"{cfg.name}.result.json"
        result.history_path.write_text(dumps(body))
        result.result_path.write_text(dumps(record))
        with (out / "results.jsonl").open("a") as fh:
            fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
    log.info("%s: F-beta %.4f (best round %d)", cfg.name, record["fbeta"], record["best_round"])
    return result


# ---------------------------------------------------------------- reporting


def load_results(patterns: str | Sequence[str]) -> list[dict]:
    """Result records from ``*.result.json`` and ``*.jsonl`` files, deduplicated.

    Records of the same run (dataset, scenario, clients, method, seed) are
    collapsed; if they disagree, the one from the most recently modified file
    wins and a warning is issued.
    """
    if isinstance(patterns, str):
        patterns = [patterns]
    files = sorted({p for pat in patterns for p in globlib.glob(pat, recursive=True)
                    if not p.endswith(".history.json")})
    if not files:
        raise DataError(f"no result files match {list(patterns)}")
    stamped = []
    for f in files:
        mtime = Path(f).stat().st_mtime_ns
        text = Path(f).read_text()
        try:
            if f.endswith(".jsonl"):
                recs = [json.loads(line) for line in text.splitlines() if line.strip()]
            else:
                obj = json.loads(text)
                recs = obj if isinstance(obj, list) else [obj]
        except json.JSONDecodeError as exc:
            raise DataError(f"{f}: not valid JSON: {exc}") from None
        for i, rec in enumerate(recs):
            missing = [k for k in RESULT_KEYS if k not in rec]
            if missing:
                raise DataError(f"{f}: result record lacks {missing}")
            stamped.append(((mtime, i), rec))
    stamped.sort(key=lambda t: t[0])
    latest: dict[tuple, dict] = {}
    for _, rec in stamped:
        key = (rec["dataset"], rec["scenario"], rec["clients"], rec["method"], rec["seed"])
        if key in latest and latest[key] != rec:
            warnings.warn(f"duplicate result for {key}; keeping the most recent", stacklevel=2)
        latest[key] = rec
    return list(latest.values())


def pivot(records: Sequence[dict], metric: str = "fbeta") -> tuple[list[str], list[list]]:
    """Rows are (dataset, scenario, clients); columns are methods; cells average over seeds."""
    methods = [m for m in METHOD_ORDER if any(r["method"] == m for r in records)]
    methods += sorted({r["method"] for r in records} - set(methods))
    cells: dict[tuple, dict[str, list[float]]] = {}
    for r in records:
        row = cells.setdefault((r["dataset"], r["scenario"], int(r["clients"])), {})
        if r[metric] is not None:
            row.setdefault(r["method"], []).append(float(r[metric]))
        else:
            row.setdefault(r["method"], [])
    header = ["dataset", "scenario", "clients", *methods]
    rows = []
    for key in sorted(cells):
        vals = [float(np.mean(cells[key][m])) if cells[key].get(m) else None for m in methods]
        rows.append([*key, *vals])
    return header, rows


def report(patterns: str | Sequence[str], fmt: str = "text", metric: str = "fbeta") -> str:
    if fmt not in ("text", "csv"):
        raise ConfigError(f"unknown report format {fmt!r}")
    if metric not in ("fbeta", "fairness"):
        raise ConfigError(f"unknown report metric {metric!r}")
    header, rows = pivot(load_results(patterns), metric)
    cells = [[("" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)) for v in row]
             for row in rows]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(cells)
        return buf.getvalue()
    widths = [max(len(str(c)) for c in col) for col in zip(header, *cells)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *cells]]
    return "\n".join(lines) + "\n"

"""Experiment configuration: YAML parsing, presets and validation.

A config file describes exactly one run.  A ``preset`` key expands to the
settings for one dataset family; every other key overrides the preset.
The README lists every key.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import PROVENANCES, ResampleSpec, SplitSpec
from .errors import ConfigError, FlbenchError
from .fed import STRATEGIES, FedRunConfig, StrategyConfig, TrainConfig
from .metrics import MetricsConfig
from .nn import AdamConfig
from .partition import SCHEMES, PartitionSpec
from .rng import derive_seed

MODES = ("central", "local", "federated")
DATA_DIR_ENV = "FLBENCH_DATA_DIR"

# key -> nested schema (dict) or None for a leaf
SCHEMA: dict[str, Any] = {
    "preset": None,
    "name": None,
    "mode": None,
    "seed": None,
    "output": None,
    "dataset": {"kind": None, "path": None, "test_path": None, "file": None, "test_file": None,
                "fixture": {"n": None, "d": None, "pos_rate": None, "seed": None}},
    "split": {"train": None, "val": None, "test": None, "stratified": None},
    "resample": {"method": None, "k_neighbors": None, "target_minority_ratio": None, "scope": None},
    "partition": {"scheme": None, "num_clients": None, "alpha": None},
    "model": {"hidden": None, "batch_norm": None},
    "train": {"learning_rate": None, "batch_size": None, "dropout": None, "class_weights": None,
              "adam": {"beta1": None, "beta2": None, "epsilon": None}},
    "fed": {"local_epochs": None, "global_rounds": None, "strategy": None, "mu": None, "q": None,
            "eta_g": None, "tau": None, "server_beta1": None, "server_beta2": None, "lipschitz": None},
    "metrics": {"beta": None, "threshold": None},
}

DEFAULTS: dict[str, Any] = {
    "mode": "federated",
    "seed": 0,
    "output": "results",
    "split": {"train": 0.8, "val": 0.1, "test": 0.1, "stratified": True},
    "resample": {"method": "none", "k_neighbors": 5, "target_minority_ratio": 0.2, "scope": "per_client"},
    "partition": {"scheme": "iid", "num_clients": 1, "alpha": 0.5},
    "model": {"batch_norm": True},
    "train": {"dropout": 0.2, "class_weights": "auto",
              "adam": {"beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8}},
    "fed": {"strategy": "fedavg", "mu": 0.0, "q": 0.0, "eta_g": 0.1, "tau": 1e-3,
            "server_beta1": 0.9, "server_beta2": 0.99, "lipschitz": None},
    "metrics": {"threshold": 0.5},
}


def _preset(kind, file, hidden, lr, batch, clients, epochs, rounds, mu, q, eta_g, tau, beta,
            split, resample, scheme="iid", test_file=None):
    ds = {"kind": kind, "file": file}
    if test_file:
        ds["test_file"] = test_file
    return {
        "dataset": ds,
        "split": split,
        "resample": resample,
        "partition": {"scheme": scheme, "num_clients": clients},
        "model": {"hidden": hidden},
        "train": {"learning_rate": lr, "batch_size": batch},
        "fed": {"local_epochs": epochs, "global_rounds": rounds, "mu": mu, "q": q, "eta_g": eta_g, "tau": tau},
        "metrics": {"beta": beta},
    }


_SMOTE = {"method": "smote", "target_minority_ratio": 0.2}

# one entry per dataset column of the settings table; client counts default to
# the smallest value listed for the dataset
PRESETS: dict[str, dict] = {
    "ai4i2020": _preset("AI4I2020", "ai4i2020.csv", [50, 20, 10], 1e-5, 128, 5, 10, 100,
                        0.1, 5e-12, 0.1, 1e-5, 30,
                        {"train": 0.8, "val": 0.1, "test": 0.1}, _SMOTE),
    "scania": _preset("Scania", "aps_failure_training_set.csv", [200, 100, 50], 1e-4, 128, 10, 10, 100,
                      0.001, 5e-5, 0.01, 1e-5, 50,
                      {"train": 0.8, "val": 0.2, "test": 0.0}, _SMOTE,
                      test_file="aps_failure_test_set.csv"),
    "harddrive": _preset("HardDrive", "harddrive.csv", [400, 200, 100, 50], 1e-5, 1024, 3, 5, 50,
                         0.1, 1.0, 0.001, 0.001, 1,
                         {"train": 0.952, "val": 0.024, "test": 0.024}, {"method": "none"}),
    "fladi": _preset("FLADI-like", "fladi.csv", [35, 15, 15], 1e-4, 75, 4, 20, 500,
                     0.05, 5e-6, 0.1, 1e-5, 3,
                     {"train": 0.8, "val": 0.1, "test": 0.1}, {"method": "none"}, scheme="natural"),
}

PRESET_CLIENT_COUNTS = {"ai4i2020": (5, 10, 15), "scania": (10, 20, 30), "harddrive": (3, 10, 20),
                        "fladi": (4,)}

REQUIRED = ("dataset", "mode", "model.hidden", "train.learning_rate", "train.batch_size",
            "fed.local_epochs", "fed.global_rounds", "metrics.beta")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str
    path: str | None = None
    test_path: str | None = None
    fixture: dict | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    split: SplitSpec
    resample: ResampleSpec
    resample_scope: str
    partition: PartitionSpec
    hidden: tuple[int, ...]
    batch_norm: bool
    fed: FedRunConfig
    mode: str
    seed: int
    output: str
    resolved: dict = field(repr=False)
    overrides: dict = field(default_factory=dict, repr=False)

    @property
    def method(self) -> str:
        return self.mode if self.mode != "federated" else self.fed.strategy.strategy

    @property
    def scenario(self) -> str:
        return self.partition.scheme

    def echo(self) -> dict:
        """Fully resolved settings; feeding this back to :func:`parse_config_dict` reproduces the run."""
        out = copy.deepcopy(self.resolved)
        out.pop("output", None)
        return out

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(d: dict, schema: dict, prefix: str = "") -> None:
    for k, v in d.items():
        path = f"{prefix}{k}"
        if k not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        sub = schema[k]
        if sub is not None:
            if v is None:
                continue
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _check_keys(v, sub, path + ".")


def _get(d: dict, dotted: str):
    cur: Any = d
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur or cur[part] is None:
            return None
        cur = cur[part]
    return cur


def _leaf_diff(a: dict, b: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in b.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(a.get(k), dict):
            out.update(_leaf_diff(a[k], v, path + "."))
        elif k in a and a[k] != v:
            out[path] = {"preset": a[k], "value": v}
    return out


def _resolve_path(p: str | None) -> str | None:
    if p is None:
        return None
    path = Path(p).expanduser()
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_DIR_ENV):
        candidate = Path(os.environ[DATA_DIR_ENV]) / path
        if candidate.exists():
            return str(candidate)
    return str(path)


def parse_config(file: str | Path) -> ExperimentConfig:
    path = Path(file)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return parse_config_dict(raw, source=str(path))


def parse_config_dict(raw: dict | None, source: str = "<config>") -> ExperimentConfig:
    if raw is None or raw == {}:
        raise ConfigError(f"{source}: config is empty; required keys: 'preset' or "
                          f"{', '.join(REQUIRED)}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(raw, SCHEMA)

    overrides: dict = {}
    base = copy.deepcopy(DEFAULTS)
    preset_name = raw.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        base = _merge(base, PRESETS[preset_name])
        overrides = _leaf_diff(base, {k: v for k, v in raw.items() if k != "preset"})
    cfg = _merge(base, {k: v for k, v in raw.items() if k != "preset"})

    ds = cfg.get("dataset") or {}
    if ds.get("file") and not ds.get("path") and not ds.get("fixture"):
        ds["path"] = ds["file"]
    if ds.get("test_file") and not ds.get("test_path") and not ds.get("fixture"):
        ds["test_path"] = ds["test_file"]
    ds.pop("file", None)
    ds.pop("test_file", None)
    if ds.get("fixture"):
        ds.pop("path", None)
        ds.pop("test_path", None)
    cfg["dataset"] = ds

    missing = [k for k in REQUIRED if _get(cfg, k) is None]
    if not ds.get("path") and not ds.get("fixture"):
        missing.append("dataset.path (or dataset.fixture)")
    if missing:
        raise ConfigError(f"{source}: missing required key(s): {', '.join(dict.fromkeys(missing))}")

    try:
        return _build(cfg, overrides)
    except ConfigError:
        raise
    except (FlbenchError, ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _build(cfg: dict, overrides: dict) -> ExperimentConfig:
    ds = cfg["dataset"]
    kind = ds.get("kind") or "Synthetic"
    if kind not in PROVENANCES:
        raise ConfigError(f"dataset.kind must be one of {PROVENANCES}, got {kind!r}")
    ds["kind"] = kind
    if ds.get("path"):
        ds["path"] = _resolve_path(ds["path"])
    if ds.get("test_path"):
        ds["test_path"] = _resolve_path(ds["test_path"])
    fixture = ds.get("fixture")
    if fixture is not None:
        fixture = {"n": int(fixture.get("n", 1000)), "d": fixture.get("d"),
                   "pos_rate": float(fixture.get("pos_rate", 0.1)), "seed": int(fixture.get("seed", 0))}
        ds["fixture"] = fixture

    mode = cfg["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    seed = int(cfg["seed"])

    sp = cfg["split"]
    has_test_file = bool(ds.get("test_path"))
    if not has_test_file and not float(sp.get("test") or 0.0) > 0:
        raise ConfigError("split.test is 0 but no dataset.test_path supplies a test set")
    split = SplitSpec(float(sp["train"]), float(sp["val"]), float(sp.get("test") or 0.0),
                      bool(sp["stratified"]), derive_seed(seed, "split"))
    split.validate(allow_empty_test=has_test_file)
    if has_test_file and split.test_frac != 0:
        raise ConfigError("split.test must be 0 when dataset.test_path supplies the test set")

    rs = cfg["resample"]
    resample = ResampleSpec(str(rs["method"]).lower(), int(rs["k_neighbors"]),
                            float(rs["target_minority_ratio"]), derive_seed(seed, "smote"))
    resample.validate()
    if rs["scope"] not in ("per_client", "global"):
        raise ConfigError("resample.scope must be 'per_client' or 'global'")

    pt = cfg["partition"]
    partition = PartitionSpec(pt["scheme"], int(pt["num_clients"]), float(pt["alpha"]),
                              derive_seed(seed, "partition"))
    if partition.scheme not in SCHEMES:
        raise ConfigError(f"partition.scheme must be one of {SCHEMES}")
    partition.validate()
    if mode == "central" and partition.num_clients < 1:
        raise ConfigError("partition.num_clients must be >= 1")

    hidden = tuple(int(h) for h in cfg["model"]["hidden"])
    if not hidden or any(h < 1 for h in hidden):
        raise ConfigError("model.hidden must list at least one positive layer width")

    tr = cfg["train"]
    cw = tr.get("class_weights", "auto")
    if cw in (None, "auto"):
        class_weights = None
        tr["class_weights"] = "auto"
    else:
        class_weights = tuple(float(c) for c in cw)
    adam = AdamConfig(**{k: float(v) for k, v in tr["adam"].items()})
    train = TrainConfig(float(tr["learning_rate"]), int(tr["batch_size"]), float(tr["dropout"]),
                        class_weights, adam)

    fd = cfg["fed"]
    strategy = str(fd["strategy"]).lower()
    if strategy not in STRATEGIES:
        raise ConfigError(f"fed.strategy must be one of {STRATEGIES}")
    strat = StrategyConfig(strategy, float(fd["mu"]), float(fd["q"]), float(fd["eta_g"]), float(fd["tau"]),
                           float(fd["server_beta1"]), float(fd["server_beta2"]),
                           None if fd.get("lipschitz") is None else float(fd["lipschitz"]))
    metrics = MetricsConfig(float(cfg["metrics"]["beta"]), float(cfg["metrics"]["threshold"]))
    fed = FedRunConfig(partition.num_clients, int(fd["local_epochs"]), int(fd["global_rounds"]),
                       train, strat, metrics, derive_seed(seed, "train"))
    fed.validate()

    method = mode if mode != "federated" else strategy
    name = cfg.get("name") or f"{kind}_{partition.scheme}_K{partition.num_clients}_{method}_s{seed}"
    cfg["name"] = name
    return ExperimentConfig(
        name=name,
        dataset=DatasetConfig(kind, ds.get("path"), ds.get("test_path"), fixture),
        split=split,
        resample=resample,
        resample_scope=rs["scope"],
        partition=partition,
        hidden=hidden,
        batch_norm=bool(cfg["model"]["batch_norm"]),
        fed=fed,
        mode=mode,
        seed=seed,
        output=str(cfg["output"]),
        resolved=cfg,
        overrides=overrides,
    )

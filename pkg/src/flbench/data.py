"""Dataset ingestion, cleaning, splitting and SMOTE oversampling."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

PROVENANCES = ("AI4I2020", "Scania", "HardDrive", "FLADI-like", "Synthetic")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    missing_mask: np.ndarray
    provenance: str = "Synthetic"
    groups: np.ndarray | None = None
    group_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise DataError(f"feature matrix {self.features.shape} does not match {n} labels")
        if self.features.shape[1] != len(self.feature_names):
            raise DataError("feature_names length does not match feature columns")
        if self.missing_mask.shape != self.features.shape:
            raise DataError("missing_mask shape does not match features")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0/1")
        if self.groups is not None and self.groups.shape != (n,):
            raise DataError("group column length does not match labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    def subset(self, idx: np.ndarray) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return dataclasses.replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            missing_mask=self.missing_mask[idx],
            groups=None if self.groups is None else self.groups[idx],
        )

    def replace(self, **changes) -> Dataset:
        return dataclasses.replace(self, **changes)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    first = datasets[0]
    groups = None
    if all(d.groups is not None for d in datasets):
        groups = np.concatenate([d.groups for d in datasets])
    return first.replace(
        features=np.concatenate([d.features for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        missing_mask=np.concatenate([d.missing_mask for d in datasets]),
        groups=groups,
    )


# ---------------------------------------------------------------- loading


@dataclass(frozen=True)
class Categorical:
    categories: tuple[str, ...]
    encoding: str = "onehot"  # or "ordinal"
    drop_first: bool = True


@dataclass(frozen=True)
class ColumnSchema:
    """How to turn a CSV into a :class:`Dataset`.

    ``features=None`` means every column that is not the label, the group
    column or listed in ``drop``.  With an explicit feature list, header
    columns not mentioned anywhere are an error unless ``ignore_extra``.
    """

    label: str
    label_map: dict[str, int] | None = None
    features: tuple[str, ...] | None = None
    drop: tuple[str, ...] = ()
    categorical: dict[str, Categorical] = field(default_factory=dict)
    na_values: tuple[str, ...] = ("", "na", "NA", "NaN", "nan")
    group: str | None = None
    ignore_extra: bool = False
    provenance: str = "Synthetic"


AI4I2020_SCHEMA = ColumnSchema(
    label="Machine failure",
    features=("Type", "Air temperature [K]", "Process temperature [K]",
              "Rotational speed [rpm]", "Torque [Nm]"),
    # failure-mode flags leak the label; tool wear is not among the features used
    drop=("UDI", "Product ID", "Tool wear [min]", "TWF", "HDF", "PWF", "OSF", "RNF"),
    categorical={"Type": Categorical(("L", "M", "H"))},
    provenance="AI4I2020",
)

SCANIA_SCHEMA = ColumnSchema(label="class", label_map={"neg": 0, "pos": 1}, provenance="Scania")

SMART_IDS = (3, 5, 7, 187, 188, 190, 194, 197, 198, 199)

HARDDRIVE_SCHEMA = ColumnSchema(
    label="failure",
    features=tuple(f"smart_{i}_raw" for i in SMART_IDS),
    ignore_extra=True,
    provenance="HardDrive",
)

FLADI_SCHEMA = ColumnSchema(label="label", group="group", provenance="FLADI-like")

SYNTHETIC_SCHEMA = ColumnSchema(label="label", provenance="Synthetic")

SCHEMAS = {
    "AI4I2020": AI4I2020_SCHEMA,
    "Scania": SCANIA_SCHEMA,
    "HardDrive": HARDDRIVE_SCHEMA,
    "FLADI-like": FLADI_SCHEMA,
    "Synthetic": SYNTHETIC_SCHEMA,
}


def load_csv(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read a header-ed CSV file into a :class:`Dataset`.

    Lines before the first row that contains the label column name are
    treated as a free-text preamble (the Scania files carry a licence block).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        line_no = 0
        for row in reader:
            line_no = reader.line_num
            if schema.label in row:
                header = row
                break
            if line_no > 200:
                break
        if header is None:
            raise DataError(f"{path}: no header row containing label column {schema.label!r}")
        rows = ((reader.line_num, r) for r in reader)
        return parse_rows(header, rows, schema, source=str(path))


def parse_rows(
    header: Sequence[str],
    rows: Iterable[Sequence[str] | tuple[int, Sequence[str]]],
    schema: ColumnSchema,
    source: str = "<rows>",
) -> Dataset:
    header = [h.strip() for h in header]
    col = {name: i for i, name in enumerate(header)}
    if len(col) != len(header):
        raise DataError(f"{source}: duplicate column names in header")
    named = [schema.label, *schema.drop, *schema.categorical]
    if schema.group:
        named.append(schema.group)
    if schema.features is not None:
        named.extend(schema.features)
    for name in named:
        if name not in col and name not in schema.drop:
            raise DataError(f"{source}: unknown column {name!r} (not in header)")

    if schema.features is None:
        skip = {schema.label, schema.group, *schema.drop}
        feature_cols = [h for h in header if h not in skip]
    else:
        feature_cols = list(schema.features)
        if not schema.ignore_extra:
            known = {schema.label, schema.group, *schema.drop, *feature_cols}
            extra = [h for h in header if h not in known]
            if extra:
                raise DataError(f"{source}: unknown column(s) {extra}")

    # output layout: categorical columns expand in place
    out_names: list[str] = []
    for name in feature_cols:
        cat = schema.categorical.get(name)
        if cat is None:
            out_names.append(name)
        elif cat.encoding == "ordinal":
            out_names.append(name)
        elif cat.encoding == "onehot":
            cats = cat.categories[1:] if cat.drop_first else cat.categories
            out_names.extend(f"{name}_{c}" for c in cats)
        else:
            raise DataError(f"unknown categorical encoding {cat.encoding!r} for {name!r}")

    na = set(schema.na_values)
    label_idx = col[schema.label]
    group_idx = col[schema.group] if schema.group else None
    feat_idx = [col[name] for name in feature_cols]
    width = len(header)

    feats: list[list[float]] = []
    masks: list[list[bool]] = []
    labels: list[int] = []
    groups: list[str] = []
    for item in rows:
        if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], int):
            line_no, row = item
        else:
            line_no, row = len(labels) + 2, item
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise DataError(f"{source}:{line_no}: malformed row, expected {width} fields, got {len(row)}")
        raw_label = row[label_idx].strip()
        if schema.label_map is not None:
            if raw_label not in schema.label_map:
                raise DataError(f"{source}:{line_no}: label {raw_label!r} not in label map")
            y = schema.label_map[raw_label]
        else:
            try:
                y = int(float(raw_label))
            except ValueError:
                raise DataError(f"{source}:{line_no}: label {raw_label!r} is not numeric") from None
        if y not in (0, 1):
            raise DataError(f"{source}:{line_no}: label {raw_label!r} maps outside {{0,1}}")
        values: list[float] = []
        mask: list[bool] = []
        for name, j in zip(feature_cols, feat_idx):
            cell = row[j].strip()
            cat = schema.categorical.get(name)
            if cat is not None:
                if cell in na:
                    raise DataError(f"{source}:{line_no}: missing categorical value in {name!r}")
                if cell not in cat.categories:
                    raise DataError(f"{source}:{line_no}: unknown category {cell!r} in {name!r}")
                k = cat.categories.index(cell)
                if cat.encoding == "ordinal":
                    values.append(float(k))
                    mask.append(False)
                else:
                    onehot = [1.0 if i == k else 0.0 for i in range(len(cat.categories))]
                    if cat.drop_first:
                        onehot = onehot[1:]
                    values.extend(onehot)
                    mask.extend([False] * len(onehot))
                continue
            if cell in na:
                values.append(math.nan)
                mask.append(True)
                continue
            try:
                values.append(float(cell))
            except ValueError:
                raise DataError(f"{source}:{line_no}: non-numeric value {cell!r} in {name!r}") from None
            mask.append(False)
        feats.append(values)
        masks.append(mask)
        labels.append(y)
        if group_idx is not None:
            groups.append(row[group_idx].strip())

    n, d = len(labels), len(out_names)
    features = np.array(feats, dtype=np.float64).reshape(n, d)
    missing = np.array(masks, dtype=bool).reshape(n, d)
    group_codes, group_names = None, ()
    if group_idx is not None:
        group_names = tuple(sorted(set(groups), key=_natural_key))
        lookup = {g: i for i, g in enumerate(group_names)}
        group_codes = np.array([lookup[g] for g in groups], dtype=np.int64)
    return Dataset(
        features=features,
        labels=np.array(labels, dtype=np.int64),
        feature_names=tuple(out_names),
        missing_mask=missing,
        provenance=schema.provenance,
        groups=group_codes,
        group_names=group_names,
    )


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


# ---------------------------------------------------------------- cleaning


def impute_median(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset]]:
    """Fill missing cells with per-feature medians computed on ``train`` only."""
    if len(train) == 0:
        raise DataError("cannot impute from an empty training set")
    if not train.missing_mask.any() and not any(o.missing_mask.any() for o in others):
        return train, list(others)
    observed = np.where(train.missing_mask, np.nan, train.features)
    all_missing = train.missing_mask.all(axis=0)
    if all_missing.any():
        names = [train.feature_names[j] for j in np.flatnonzero(all_missing)]
        raise DataError(f"feature(s) entirely missing in training data: {names[:5]}")
    medians = np.nanmedian(observed, axis=0)

    def fill(ds: Dataset) -> Dataset:
        x = np.where(ds.missing_mask, medians, ds.features)
        return ds.replace(features=x, missing_mask=np.zeros_like(ds.missing_mask))

    return fill(train), [fill(o) for o in others]


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (x - self.mean) / safe, 0.0)


def standardize(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset], ScalerStats]:
    """Z-score every feature with train statistics; constant columns become zeros."""
    stats = ScalerStats(train.features.mean(axis=0), train.features.std(axis=0))
    out = [train.replace(features=stats.transform(train.features))]
    out += [o.replace(features=stats.transform(o.features)) for o in others]
    return out[0], out[1:], stats


def absent_group_features(ds: Dataset) -> np.ndarray | None:
    """bool[G x D]: True where every row of group g is missing feature j."""
    if ds.groups is None:
        return None
    n_groups = len(ds.group_names)
    absent = np.zeros((n_groups, ds.n_features), dtype=bool)
    for g in range(n_groups):
        rows = ds.groups == g
        if rows.any():
            absent[g] = ds.missing_mask[rows].all(axis=0)
    return absent


def zero_absent_features(ds: Dataset, absent: np.ndarray | None) -> Dataset:
    """Set features that a group never records to 0 (applied after standardizing)."""
    if absent is None or ds.groups is None or not absent.any():
        return ds
    x = ds.features.copy()
    x[absent[ds.groups]] = 0.0
    return ds.replace(features=x)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    stratified: bool = True
    seed: int = 0

    def fractions(self) -> tuple[float, float, float]:
        return (self.train_frac, self.val_frac, self.test_frac)

    def validate(self, allow_empty_test: bool = False) -> None:
        fr = self.fractions()
        lo_ok = [0 < f < 1 for f in fr]
        if allow_empty_test and self.test_frac == 0:
            lo_ok[2] = True
        if not all(lo_ok):
            raise DataError(f"split fractions must each lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fr)}")


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    indices: tuple[np.ndarray, np.ndarray, np.ndarray]


def largest_remainder(n: int, fractions: Sequence[float]) -> np.ndarray:
    """Integer counts summing to ``n`` closest to ``n * fractions`` (ties to the earlier slot)."""
    fr = np.asarray(fractions, dtype=np.float64)
    fr = fr / fr.sum()
    exact = n * fr
    counts = np.floor(exact + 1e-9).astype(np.int64)
    short = n - int(counts.sum())
    if short > 0:
        rem = exact - counts
        order = np.argsort(-rem, kind="stable")
        counts[order[:short]] += 1
    return counts


def split(ds: Dataset, spec: SplitSpec) -> Splits:
    """Disjoint train/val/test split, optionally stratified by label."""
    allow_empty_test = spec.test_frac == 0
    spec.validate(allow_empty_test=allow_empty_test)
    n = len(ds)
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    fr = spec.fractions()
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.stratified:
        for cls in (0, 1):
            idx = np.flatnonzero(ds.labels == cls)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            counts = largest_remainder(idx.size, fr)
            for k in range(3):
                if fr[k] > 0 and counts[k] == 0:
                    raise DataError(f"stratified split leaves split {k} without class {cls} "
                                    f"({idx.size} samples of that class)")
            bounds = np.cumsum(counts)[:-1]
            for k, chunk in enumerate(np.split(idx, bounds)):
                parts[k].append(chunk)
    else:
        idx = rng.permutation(n)
        bounds = np.cumsum(largest_remainder(n, fr))[:-1]
        for k, chunk in enumerate(np.split(idx, bounds)):
            parts[k].append(chunk)
    index_sets = tuple(np.sort(np.concatenate(p)) if p else np.zeros(0, np.int64) for p in parts)
    return Splits(*(ds.subset(i) for i in index_sets), indices=index_sets)


# ---------------------------------------------------------------- SMOTE


@dataclass(frozen=True)
class ResampleSpec:
    method: str = "smote"  # "none" | "smote"
    k_neighbors: int = 5
    target_minority_ratio: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("none", "smote"):
            raise DataError(f"unknown resample method {self.method!r}")
        if self.k_neighbors < 1:
            raise DataError("k_neighbors must be >= 1")
        if not 0 < self.target_minority_ratio <= 1:
            raise DataError("target_minority_ratio must lie in (0, 1]")


def nearest_neighbors(x: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest other rows of ``x`` (Euclidean, ties by index)."""
    m = x.shape[0]
    sq = (x * x).sum(axis=1)
    out = np.empty((m, k), dtype=np.int64)
    for start in range(0, m, chunk):
        stop = min(start + chunk, m)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * x[start:stop] @ x.T
        d2 = np.maximum(d2, 0.0)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def smote(ds: Dataset, spec: ResampleSpec) -> Dataset:
    """Oversample the minority class until it reaches ``ratio * majority``.

    Synthetic rows ``x_i + lam * (x_nn - x_i)`` are appended after the
    original rows; ``x_nn`` is one of the ``k`` nearest minority neighbours of
    ``x_i`` and ``lam ~ U(0, 1)``.  Base samples are visited round-robin over
    a seeded permutation of the minority class.
    """
    spec.validate()
    if spec.method == "none":
        return ds
    counts = np.bincount(ds.labels, minlength=2)
    minority = int(np.argmin(counts)) if counts[0] != counts[1] else 1
    majority_n = int(counts[1 - minority])
    min_idx = np.flatnonzero(ds.labels == minority)
    m = min_idx.size
    if m < 2:
        raise DataError(f"SMOTE needs at least 2 minority samples, got {m}")
    target = math.ceil(spec.target_minority_ratio * majority_n - 1e-9)
    n_new = target - m
    if n_new <= 0:
        return ds

    x_min = ds.features[min_idx]
    k = min(spec.k_neighbors, m - 1)
    nn = nearest_neighbors(x_min, k)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    base = rng.permutation(m)[np.arange(n_new) % m]
    pick = nn[base, rng.integers(0, k, size=n_new)]
    lam = rng.random(n_new)[:, None]
    synth = x_min[base] + lam * (x_min[pick] - x_min[base])

    groups = None
    if ds.groups is not None:
        groups = np.concatenate([ds.groups, ds.groups[min_idx[base]]])
    return ds.replace(
        features=np.concatenate([ds.features, synth]),
        labels=np.concatenate([ds.labels, np.full(n_new, minority, dtype=np.int64)]),
        missing_mask=np.concatenate([ds.missing_mask, np.zeros(synth.shape, dtype=bool)]),
        groups=groups,
    )


def class_counts(labels: np.ndarray) -> tuple[int, int]:
    c = np.bincount(np.asarray(labels, dtype=np.int64), minlength=2)
    return int(c[0]), int(c[1])

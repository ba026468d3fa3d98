"""Assignment of training samples to simulated clients."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, largest_remainder
from .errors import PartitionError
from .rng import dirichlet_sample

SCHEMES = ("iid", "feature_skew_pca", "quantity_skew_dirichlet", "natural")

POWER_TOL = 1e-9
POWER_MAX_ITER = 1000
DIRICHLET_RETRIES = 100


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "iid"
    num_clients: int = 5
    alpha: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise PartitionError(f"unknown partition scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if self.scheme == "quantity_skew_dirichlet" and not self.alpha > 0:
            raise PartitionError("Dirichlet alpha must be positive")


@dataclass
class PartitionPlan:
    scheme: str
    clients: list[np.ndarray]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> list[int]:
        return [int(c.size) for c in self.clients]

    def check(self, n: int) -> None:
        """Raise unless the plan is a partition of ``range(n)`` with no empty client."""
        if any(c.size == 0 for c in self.clients):
            raise PartitionError("partition plan has an empty client")
        allidx = np.concatenate(self.clients) if self.clients else np.zeros(0, np.int64)
        if allidx.size != n or not np.array_equal(np.sort(allidx), np.arange(n)):
            raise PartitionError("partition plan is not an exact partition of the index range")

    def to_json(self) -> dict:
        meta = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.meta.items()}
        return {"scheme": self.scheme, "seed": self.seed, "clients": [c.tolist() for c in self.clients],
                "meta": meta}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def from_json(cls, obj: dict) -> PartitionPlan:
        return cls(obj["scheme"], [np.asarray(c, dtype=np.int64) for c in obj["clients"]],
                   obj.get("seed"), obj.get("meta", {}))


def partition_iid(n: int, k: int, seed: int) -> PartitionPlan:
    """Random permutation cut into ``k`` blocks whose sizes differ by at most one."""
    if k < 1:
        raise PartitionError("need at least one client")
    if n < k:
        raise PartitionError(f"cannot split {n} samples among {k} clients")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return PartitionPlan("iid", [np.sort(b) for b in np.array_split(perm, k)], seed)


def first_principal_component(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Leading eigenvector of the covariance of ``x`` by power iteration.

    Returns ``(direction, mean, iterations)``.  The sign is fixed so that the
    loading with the largest magnitude is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(x.shape[0] - 1, 1)
    if not np.any(np.abs(cov) > 0):
        raise PartitionError("degenerate covariance: all rows are identical")
    # start from the covariance column with the largest norm; it cannot be
    # orthogonal to the leading eigenvector unless that column is zero
    v = cov[:, int(np.argmax(np.linalg.norm(cov, axis=0)))].copy()
    v /= np.linalg.norm(v)
    it = 0
    for it in range(1, POWER_MAX_ITER + 1):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            break
        w /= norm
        if np.dot(w, v) < 0:
            w = -w
        done = np.linalg.norm(w - v) < POWER_TOL
        v = w
        if done:
            break
    if v[int(np.argmax(np.abs(v)))] < 0:
        v = -v
    return v, mean, it


def partition_feature_skew(ds: Dataset | np.ndarray, k: int) -> PartitionPlan:
    """Sort by first-principal-component score and cut into ``k`` contiguous blocks."""
    x = ds.features if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise PartitionError("need at least one client")
    if n < k:
        raise PartitionError(f"cannot split {n} samples among {k} clients")
    direction, mean, iters = first_principal_component(x)
    scores = (x - mean) @ direction
    order = np.argsort(scores, kind="stable")
    blocks = np.array_split(order, k)
    cuts = [float(0.5 * (scores[a[-1]] + scores[b[0]])) for a, b in zip(blocks[:-1], blocks[1:])]
    return PartitionPlan(
        "feature_skew_pca",
        [np.sort(b) for b in blocks],
        None,
        {"direction": direction, "mean": mean, "cut_points": cuts, "power_iterations": iters},
    )


def assign_by_pc1(plan: PartitionPlan, x: np.ndarray) -> list[np.ndarray]:
    """Route held-out rows to clients using the plan's PC1 direction and cut points."""
    scores = (np.asarray(x) - np.asarray(plan.meta["mean"])) @ np.asarray(plan.meta["direction"])
    client = np.searchsorted(np.asarray(plan.meta["cut_points"], dtype=float), scores, side="right")
    return [np.flatnonzero(client == c) for c in range(plan.num_clients)]


def partition_quantity_skew(n: int, k: int, alpha: float, seed: int) -> PartitionPlan:
    """Dirichlet(alpha) client proportions, largest-remainder counts, shuffled indices."""
    if k < 1:
        raise PartitionError("need at least one client")
    if n < k:
        raise PartitionError(f"cannot split {n} samples among {k} clients")
    if not alpha > 0:
        raise PartitionError("alpha must be positive")
    rng = np.random.Generator(np.random.PCG64(seed))
    for attempt in range(DIRICHLET_RETRIES):
        props = dirichlet_sample(rng, alpha, k)
        counts = largest_remainder(n, props) if props.sum() > 0 else np.zeros(k, np.int64)
        if np.all(counts >= 1):
            break
    else:
        raise PartitionError(f"Dirichlet draw left a client empty in {DIRICHLET_RETRIES} attempts "
                             f"(n={n}, k={k}, alpha={alpha})")
    perm = rng.permutation(n)
    blocks = np.split(perm, np.cumsum(counts)[:-1])
    return PartitionPlan(
        "quantity_skew_dirichlet",
        [np.sort(b) for b in blocks],
        seed,
        {"alpha": alpha, "proportions": props, "counts": counts.tolist(), "redraws": attempt},
    )


def partition_natural(ds: Dataset) -> PartitionPlan:
    """One client per group, in group order."""
    if ds.groups is None:
        raise PartitionError("dataset has no group column for natural partitioning")
    present = np.unique(ds.groups)
    clients = [np.flatnonzero(ds.groups == g) for g in present]
    names = [ds.group_names[g] if g < len(ds.group_names) else str(g) for g in present]
    return PartitionPlan("natural", clients, None, {"groups": names, "group_codes": present.tolist()})


def make_plan(ds: Dataset, spec: PartitionSpec) -> PartitionPlan:
    spec.validate()
    n, k = len(ds), spec.num_clients
    if spec.scheme == "iid":
        plan = partition_iid(n, k, spec.seed)
    elif spec.scheme == "feature_skew_pca":
        plan = partition_feature_skew(ds, k)
    elif spec.scheme == "quantity_skew_dirichlet":
        plan = partition_quantity_skew(n, k, spec.alpha, spec.seed)
    else:
        plan = partition_natural(ds)
        if plan.num_clients != k:
            raise PartitionError(f"natural partition has {plan.num_clients} groups but "
                                 f"num_clients = {k}")
    plan.check(n)
    return plan


def route_holdout(plan: PartitionPlan, ds: Dataset, seed: int) -> list[np.ndarray]:
    """Client-local slices of a held-out split, following the plan's scheme.

    Used for per-client evaluation (fairness).  IID slices are an even random
    split, PCA slices use the training cut points, Dirichlet slices reuse the
    training proportions and natural slices use the group column.  Slices may
    be empty for small held-out sets.
    """
    n, k = len(ds), plan.num_clients
    if plan.scheme == "feature_skew_pca":
        return assign_by_pc1(plan, ds.features)
    if plan.scheme == "natural":
        if ds.groups is None:
            raise PartitionError("held-out split has no group column")
        return [np.flatnonzero(ds.groups == g) for g in plan.meta["group_codes"]]
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    if plan.scheme == "quantity_skew_dirichlet":
        counts = largest_remainder(n, np.asarray(plan.meta["proportions"]))
        return [np.sort(b) for b in np.split(perm, np.cumsum(counts)[:-1])]
    return [np.sort(b) for b in np.array_split(perm, k)]

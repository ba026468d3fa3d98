"""Seeded synthetic stand-ins for the four dataset families.

Each generator emits a raw CSV-shaped table (header + string rows) laid out
like the real files, so the same table can be written to disk and read back
through :func:`flbench.data.load_csv` with the family's schema.  Labels are
assigned by ranking a noisy linear risk score and marking the top
``round(pos_rate * n)`` rows positive; the feature layouts are realistic but
the class structure is not meant to mimic the real data.
"""

from __future__ import annotations

import csv
import string
from pathlib import Path

import numpy as np

from .data import SCHEMAS, SMART_IDS, Dataset, largest_remainder, parse_rows
from .errors import DataError

FLADI_GROUP_SIZES = (807, 1198, 1166, 1110)
KINDS = tuple(SCHEMAS)


def _top_k_labels(score: np.ndarray, pos_rate: float) -> np.ndarray:
    n_pos = int(round(pos_rate * score.size))
    y = np.zeros(score.size, dtype=np.int64)
    if n_pos > 0:
        y[np.argsort(-score, kind="stable")[:n_pos]] = 1
    return y


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ai4i(n: int, pos_rate: float, rng: np.random.Generator):
    types = rng.choice(np.array(["L", "M", "H"]), size=n, p=[0.5, 0.3, 0.2])
    air = 300.0 + 2.0 * rng.standard_normal(n)
    process = air + 10.0 + rng.standard_normal(n)
    speed = np.maximum(1168.0, 1540.0 + 180.0 * rng.standard_normal(n))
    torque = np.maximum(3.8, 40.0 + 10.0 * rng.standard_normal(n))
    wear = rng.integers(0, 254, size=n).astype(float)
    power = torque * speed * 2 * np.pi / 60
    modes = np.stack([
        (wear - 200) / 20,                        # tool wear
        (8.6 - (process - air)) + (1380 - speed) / 100,  # heat dissipation
        np.abs(power - 6250) / 1500 - 1.5,         # power
        wear * torque / 11000 - 1,                 # overstrain
    ], axis=1)
    score = modes.max(axis=1) + 0.3 * rng.standard_normal(n)
    y = _top_k_labels(score, pos_rate)
    mode = np.argmax(modes, axis=1)
    header = ["UDI", "Product ID", "Type", "Air temperature [K]", "Process temperature [K]",
              "Rotational speed [rpm]", "Torque [Nm]", "Tool wear [min]", "Machine failure",
              "TWF", "HDF", "PWF", "OSF", "RNF"]
    rows = []
    for i in range(n):
        flags = ["0"] * 5
        if y[i]:
            flags[mode[i]] = "1"
        rows.append([str(i + 1), f"{types[i]}{10000 + i}", str(types[i]), f"{air[i]:.1f}",
                     f"{process[i]:.1f}", str(int(round(speed[i]))), f"{torque[i]:.1f}",
                     str(int(wear[i])), str(int(y[i])), *flags])
    return header, rows


def _scania_names(d: int) -> list[str]:
    letters = [a + b for a in string.ascii_lowercase for b in string.ascii_lowercase]
    return [f"{letters[j // 10]}_{j % 10:03d}" for j in range(d)]


def _scania(n: int, d: int, pos_rate: float, rng: np.random.Generator):
    x = np.abs(rng.standard_normal((n, d))) * rng.uniform(1, 1e4, size=d)
    w = rng.standard_normal(d) / np.sqrt(d)
    score = (np.log1p(x) @ w) + 0.5 * rng.standard_normal(n)
    y = _top_k_labels(score, pos_rate)
    missing = rng.random((n, d)) < rng.uniform(0.0, 0.1, size=d)
    header = ["class", *_scania_names(d)]
    rows = []
    for i in range(n):
        cells = ["na" if missing[i, j] else _fmt(round(x[i, j])) for j in range(d)]
        rows.append(["pos" if y[i] else "neg", *cells])
    return header, rows


def _harddrive(n: int, pos_rate: float, rng: np.random.Generator):
    raw = rng.poisson(rng.uniform(0.1, 5.0, size=len(SMART_IDS)), size=(n, len(SMART_IDS))).astype(float)
    raw[:, SMART_IDS.index(194)] = 20 + 10 * rng.random(n)  # temperature
    raw[:, SMART_IDS.index(7)] = rng.integers(0, 10**6, size=n)  # seek errors
    risky = [SMART_IDS.index(i) for i in (5, 187, 197, 198)]
    score = np.log1p(raw[:, risky]).sum(axis=1) + 0.5 * rng.standard_normal(n)
    y = _top_k_labels(score, pos_rate)
    blank = rng.random((n, len(SMART_IDS))) < 0.01
    header = ["date", "serial_number", "model", "capacity_bytes", "failure"]
    for i in SMART_IDS:
        header += [f"smart_{i}_normalized", f"smart_{i}_raw"]
    rows = []
    for r in range(n):
        row = ["2020-01-01", f"SN{r:08d}", "ST4000DM000", "4000787030016", str(int(y[r]))]
        for j in range(len(SMART_IDS)):
            val = "" if blank[r, j] else _fmt(raw[r, j])
            row += ["100", val]
        rows.append(row)
    return header, rows


def _fladi(n: int, d: int, pos_rate: float, rng: np.random.Generator):
    sizes = largest_remainder(n, FLADI_GROUP_SIZES)
    n_groups = len(sizes)
    # each group lacks a small, different subset of features
    active = rng.random((n_groups, d)) >= 0.08
    active[rng.integers(0, n_groups, size=d), np.arange(d)] = True
    w = rng.standard_normal(d) / np.sqrt(d)
    header = ["group", *[f"f_{j:03d}" for j in range(d)], "label"]
    rows = []
    for g in range(n_groups):
        m = int(sizes[g])
        shift = 0.5 * rng.standard_normal(d)
        x = rng.standard_normal((m, d)) + shift
        score = (x * active[g]) @ w + 0.5 * rng.standard_normal(m)
        y = _top_k_labels(score, pos_rate)
        for i in range(m):
            cells = [_fmt(x[i, j]) if active[g, j] else "" for j in range(d)]
            rows.append([f"variant_{g + 1}", *cells, str(int(y[i]))])
    return header, rows


def _synthetic(n: int, d: int, pos_rate: float, rng: np.random.Generator):
    mix = rng.standard_normal((d, d)) / np.sqrt(d)
    x = rng.standard_normal((n, d)) @ (np.eye(d) + mix)
    w = rng.standard_normal(d)
    score = x @ w + 0.5 * rng.standard_normal(n)
    y = _top_k_labels(score, pos_rate)
    header = [*[f"x_{j:03d}" for j in range(d)], "label"]
    rows = [[*(_fmt(v) for v in x[i]), str(int(y[i]))] for i in range(n)]
    return header, rows


_DEFAULT_D = {"Scania": 170, "FLADI-like": 138, "Synthetic": 8}


def fixture_table(kind: str, n: int, d: int | None = None, pos_rate: float = 0.2,
                  seed: int = 0) -> tuple[list[str], list[list[str]]]:
    """Raw header and rows for a synthetic file of the given family.

    ``d`` is ignored for AI4I2020 and HardDrive, whose column sets are fixed.
    """
    if kind not in KINDS:
        raise DataError(f"unknown fixture kind {kind!r}; choose from {KINDS}")
    if n < 20:
        raise DataError(f"fixtures need n >= 20, got {n}")
    if not 0 <= pos_rate < 1:
        raise DataError(f"pos_rate must lie in [0, 1), got {pos_rate}")
    d = d or _DEFAULT_D.get(kind, 0)
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == "AI4I2020":
        return _ai4i(n, pos_rate, rng)
    if kind == "Scania":
        return _scania(n, d, pos_rate, rng)
    if kind == "HardDrive":
        return _harddrive(n, pos_rate, rng)
    if kind == "FLADI-like":
        return _fladi(n, d, pos_rate, rng)
    return _synthetic(n, d, pos_rate, rng)


def synth_fixture(kind: str, n: int, d: int | None = None, pos_rate: float = 0.2,
                  seed: int = 0) -> Dataset:
    """Synthetic :class:`Dataset` parsed through the family's schema."""
    header, rows = fixture_table(kind, n, d, pos_rate, seed)
    return parse_rows(header, rows, SCHEMAS[kind], source=f"<fixture {kind}>")


def write_fixture_csv(path: str | Path, kind: str, n: int, d: int | None = None,
                      pos_rate: float = 0.2, seed: int = 0) -> Path:
    header, rows = fixture_table(kind, n, d, pos_rate, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if kind == "Scania":
            fh.write("This file is part of a synthetic stand-in for the APS failure data.\n\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path

"""Shared builders for tests that need labelled rows without running the solver."""

from __future__ import annotations

import numpy as np

from branchsel.datagen import DataPoint, Dataset, compute_label
from branchsel.features import FEATURE_NAMES, RawFeatureVector

LIMIT = 200_000


def row_with_label(iid: str, seed: int, feats: RawFeatureVector, label: float, base: int = 400) -> DataPoint:
    """Row whose work counts reproduce ``label`` up to integer rounding."""
    if label >= 0:
        wp = base
        wm = int(round((wp + 10) * 10**label - 10))
    else:
        wm = base
        wp = int(round((wm + 10) * 10**-label - 10))
    lab, _ = compute_label(wm, wp, "OPTIMAL", "OPTIMAL", LIMIT)
    return DataPoint(iid, seed, feats, wm, wp, "OPTIMAL", "OPTIMAL", lab, nodes_mixed=5, nodes_preferint=5)


def toy_dataset(n_instances: int = 60, permutations: int = 2, seed: int = 0,
                signal: str | None = "pct_int_vars") -> Dataset:
    """Random raw features; the label follows ``signal`` (or pure noise when None)."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        base = rng.uniform(0, 1, len(FEATURE_NAMES))
        for p in range(permutations):
            vals = base + rng.normal(0, 0.02, len(FEATURE_NAMES))
            vals = np.abs(vals)
            feats = RawFeatureVector(tuple(float(v) for v in vals), (False,) * len(FEATURE_NAMES))
            if signal is None:
                lab = float(rng.normal(0, 0.3))
            else:
                lab = 1.5 * (vals[FEATURE_NAMES.index(signal)] - 0.5) + float(rng.normal(0, 0.05))
            rows.append(row_with_label(f"inst{i:03d}", p, feats, lab))
    return Dataset(rows, {"source": "toy"})


# acceptance bookkeeping: one line per criterion, printed at the end of the run
CRITERIA: dict[int, tuple[bool, str]] = {}


def record(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")

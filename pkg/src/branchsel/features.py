"""Root-node feature vector, its log scaling, and the imputer/standardiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bnb import RootSbStats
from .expr import count_quadratic_elements, dag_stats
from .instance import Instance, PresolveSummary
from .relax import RootRelaxInfo, cut_coeff_spread

FEATURE_NAMES = (
    "pct_quadr_elements",
    "pct_int_vars",
    "pct_eq_cons",
    "pct_nonlin_cons",
    "n_int_viols",
    "n_nonlin_viols",
    "n_spat_branch_ent_fixed",
    "avg_work_sblp_int",
    "avg_work_sblp_spat",
    "avg_rel_bnd_chng_sblp_int",
    "avg_rel_bnd_chng_sblp_spat",
    "avg_coeff_spread_conv_cuts",
    "nodes_in_dag",
    "pct_vars_dag",
    "pct_vars_dag_unbnd",
    "pct_vars_dag_int",
    "pct_quadr_nodes_dag",
)
N_FEATURES = len(FEATURE_NAMES)

# the branching-effect group is log10(value + 1) scaled
EFFECT_FEATURES = FEATURE_NAMES[4:12]


class NegativeValueError(ValueError):
    pass


class AlreadyScaledError(RuntimeError):
    pass


class MissingFeatureError(KeyError):
    pass


@dataclass(frozen=True)
class RawFeatureVector:
    values: tuple[float, ...]
    missing: tuple[bool, ...]
    names: tuple[str, ...] = FEATURE_NAMES
    scaled: bool = False

    def __post_init__(self):
        if not len(self.values) == len(self.missing) == len(self.names):
            raise ValueError("feature vector length mismatch")

    def __getitem__(self, name: str) -> float | None:
        i = self.names.index(name)
        return None if self.missing[i] else self.values[i]

    def as_dict(self) -> dict[str, float | None]:
        return {n: self[n] for n in self.names}

    def mask_string(self) -> str:
        return "".join("1" if m else "0" for m in self.missing)

    def with_feature(self, name: str, value: float) -> "RawFeatureVector":
        return RawFeatureVector(self.values + (float(value),), self.missing + (False,),
                                self.names + (name,), self.scaled)

    @classmethod
    def from_dict(cls, d: dict[str, float | None], scaled: bool = False) -> "RawFeatureVector":
        names = tuple(d)
        vals = tuple(0.0 if d[k] is None else float(d[k]) for k in names)
        return cls(vals, tuple(d[k] is None for k in names), names, scaled)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def extract_features(original: Instance, presolved: Instance, summary: PresolveSummary,
                     root: RootRelaxInfo | None, sb: RootSbStats) -> RawFeatureVector:
    """All 17 raw features.

    ``original`` supplies the pre-presolve denominators n and m; everything
    else is read from the presolved instance, the root relaxation and the
    strong-branching statistics.
    """
    n, m = original.n, original.m
    dags = [c.dag for c in presolved.nonlinear]
    ds = dag_stats(dags, presolved)
    n_tilde = summary.n_tilde
    int_after = sum(v.is_integer and not v.fixed for v in presolved.variables)
    eq_cons = sum(c.sense == "eq" for c in original.linear) + sum(c.origin == "eq" for c in original.nonlinear)

    cuts = root.cuts_added if root is not None else []
    spread = float(np.mean([cut_coeff_spread(c) for c in cuts])) if cuts else None

    vals: dict[str, float | None] = {
        "pct_quadr_elements": _ratio(count_quadratic_elements(dags), n),
        "pct_int_vars": _ratio(int_after, n_tilde),
        "pct_eq_cons": _ratio(eq_cons, m),
        "pct_nonlin_cons": _ratio(len(original.nonlinear), m),
        "n_int_viols": float(sb.n_int_viols),
        "n_nonlin_viols": float(sb.n_nonlin_viols),
        "n_spat_branch_ent_fixed": float(sb.spat_entities_fixed),
        "avg_work_sblp_int": sb.avg_work_int,
        "avg_work_sblp_spat": sb.avg_work_spat,
        "avg_rel_bnd_chng_sblp_int": sb.avg_rel_bnd_chng_int,
        "avg_rel_bnd_chng_sblp_spat": sb.avg_rel_bnd_chng_spat,
        "avg_coeff_spread_conv_cuts": spread,
        "nodes_in_dag": _ratio(ds.operator_node_count, ds.operator_node_count + summary.m_tilde_nonzeros),
        "pct_vars_dag": _ratio(ds.vars_in_dag, n_tilde),
        "pct_vars_dag_unbnd": _ratio(ds.unbounded_vars_in_dag, ds.vars_in_dag),
        "pct_vars_dag_int": _ratio(ds.int_vars_in_dag, ds.vars_in_dag),
        "pct_quadr_nodes_dag": _ratio(ds.quadratic_operator_node_count, ds.nonlinear_operator_node_count),
    }
    return RawFeatureVector.from_dict(vals)


def scale_features(raw: RawFeatureVector) -> RawFeatureVector:
    """log10(value + 1) on the branching-effect group; ratios pass through."""
    if raw.scaled:
        raise AlreadyScaledError("feature vector is already scaled")
    vals = list(raw.values)
    for i, name in enumerate(raw.names):
        if name in EFFECT_FEATURES and not raw.missing[i]:
            if vals[i] < 0:
                raise NegativeValueError(f"{name} = {vals[i]} cannot be log-scaled")
            vals[i] = math.log10(vals[i] + 1.0)
    return RawFeatureVector(tuple(vals), raw.missing, raw.names, True)


@dataclass(frozen=True)
class Preprocessor:
    names: tuple[str, ...]
    impute: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    flat: tuple[bool, ...]
    fitted_on: int

    def apply(self, v: RawFeatureVector) -> np.ndarray:
        return apply(self, v)

    def transform_matrix(self, values: np.ndarray, missing: np.ndarray) -> np.ndarray:
        X = np.where(missing, self.impute, values)
        return (X - self.mean) / self.std


def _matrix(rows, names) -> tuple[np.ndarray, np.ndarray]:
    vals = np.empty((len(rows), len(names)))
    miss = np.empty((len(rows), len(names)), dtype=bool)
    cache: dict[tuple[str, ...], list[int]] = {}
    for r, row in enumerate(rows):
        idx = cache.get(row.names)
        if idx is None:
            try:
                idx = cache[row.names] = [row.names.index(n) for n in names]
            except ValueError as e:
                raise MissingFeatureError(str(e)) from None
        vals[r] = [row.values[i] for i in idx]
        miss[r] = [row.missing[i] for i in idx]
    return vals, miss


def fit_preprocessor(train, names=None) -> Preprocessor:
    """Training-mean imputation, then z-scoring; fit on training rows only."""
    train = list(train)
    if not train:
        raise ValueError("cannot fit a preprocessor on zero rows")
    names = tuple(train[0].names if names is None else names)
    vals, miss = _matrix(train, names)
    present = ~miss
    cnt = present.sum(axis=0)
    impute = np.where(cnt > 0, np.where(present, vals, 0.0).sum(axis=0) / np.maximum(cnt, 1), 0.0)
    X = np.where(miss, impute, vals)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(flat, 1.0, std)
    return Preprocessor(names, impute, mean, std, tuple(bool(f) for f in flat), len(train))


def apply(pre: Preprocessor, v: RawFeatureVector) -> np.ndarray:
    vals, miss = _matrix([v], pre.names)
    out = pre.transform_matrix(vals, miss)[0]
    return np.where(np.array(pre.flat), 0.0, out)


def transform(pre: Preprocessor, rows) -> np.ndarray:
    rows = list(rows)
    vals, miss = _matrix(rows, pre.names)
    out = pre.transform_matrix(vals, miss)
    return np.where(np.array(pre.flat), 0.0, out)

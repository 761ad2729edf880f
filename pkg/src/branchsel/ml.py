"""Least-squares and random-forest label regressors, importances and the reduction sweep."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import Dataset
from .evaluation import EvalReport, evaluate_rows, split
from .features import MissingFeatureError, Preprocessor, RawFeatureVector, fit_preprocessor, scale_features, transform

RIDGE = 1e-8
COND_LIMIT = 1e12
N_TREES = 100
MAX_DEPTH = 5
MIN_NODE = 5
DEFAULT_SEEDS = tuple(range(1, 101))


class DegenerateDataError(ValueError):
    pass


class MismatchedFeatureSetError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearModel:
    coefficients: np.ndarray
    intercept: float
    active_features: tuple[str, ...]
    preprocessor: Preprocessor | None = None
    ridge_used: bool = False

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients + self.intercept


def _default_names(d: int) -> tuple[str, ...]:
    return tuple(f"f{i}" for i in range(d))


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise DegenerateDataError("no training rows")
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    return X, y


def fit_linear(X, y, names: Sequence[str] | None = None) -> LinearModel:
    """OLS with intercept via the normal equations; ridge 1e-8 when the Gram matrix is singular."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    G = A.T @ A
    rhs = A.T @ y
    ridge = False
    try:
        singular = d > 0 and np.linalg.cond(G) > COND_LIMIT
        beta = None if singular else np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        beta = None
    if beta is None:
        ridge = True
        pen = np.full(d + 1, RIDGE)
        pen[0] = 0.0
        beta = np.linalg.solve(G + np.diag(pen), rhs)
    return LinearModel(beta[1:].copy(), float(beta[0]), tuple(names or _default_names(d)), ridge_used=ridge)


# ---------------------------------------------------------------------------
# forest


@dataclass
class Tree:
    """Arrays indexed by node id; ``feature == -1`` marks a leaf. Nodes are in pre-order."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: np.ndarray

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            f = self.feature[node[idx]]
            go_left = X[idx, f] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
            active = self.feature[node] >= 0
        return self.value[node]


def _best_split(X: np.ndarray, y: np.ndarray, feats: Sequence[int]) -> tuple[int, float, float] | None:
    """(feature, threshold, child SSE) minimising the children's summed squared deviation."""
    n = len(y)
    best = None
    for f in feats:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        distinct = xs[1:] > xs[:-1]
        if not distinct.any():
            continue
        cs, cs2 = np.cumsum(ys), np.cumsum(ys * ys)
        nl = np.arange(1, n)
        sl, s2l = cs[:-1], cs2[:-1]
        sr, s2r = cs[-1] - sl, cs2[-1] - s2l
        sse = (s2l - sl * sl / nl) + (s2r - sr * sr / (n - nl))
        sse = np.where(distinct, sse, np.inf)
        i = int(np.argmin(sse))
        if best is None or sse[i] < best[2]:
            best = (f, 0.5 * (xs[i] + xs[i + 1]), float(sse[i]))
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int,
             max_depth: int = MAX_DEPTH, min_node: int = MIN_NODE,
             mdi: np.ndarray | None = None) -> Tree:
    """CART regression tree grown depth-first; ``mdi`` accumulates weighted impurity decrease."""
    d = X.shape[1]
    n_root = len(y)
    cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "left", "right", "value", "depth")}

    def grow(idx: np.ndarray, depth: int) -> int:
        me = len(cols["value"])
        for k, v in (("feature", -1), ("threshold", 0.0), ("left", -1), ("right", -1),
                     ("value", float(y[idx].mean())), ("depth", depth)):
            cols[k].append(v)
        yy = y[idx]
        sse = float(((yy - yy.mean()) ** 2).sum())
        if depth >= max_depth or len(idx) < min_node or sse <= 1e-12 * max(1.0, float(yy @ yy)):
            return me
        feats = np.sort(rng.choice(d, size=max_features, replace=False))
        found = _best_split(X[idx], yy, feats)
        if found is None:
            return me
        f, thr, child_sse = found
        if mdi is not None:
            mdi[f] += max(sse - child_sse, 0.0) / n_root
        mask = X[idx, f] <= thr
        cols["feature"][me], cols["threshold"][me] = int(f), float(thr)
        cols["left"][me] = grow(idx[mask], depth + 1)
        cols["right"][me] = grow(idx[~mask], depth + 1)
        return me

    grow(np.arange(n_root), 0)
    return Tree(np.array(cols["feature"], dtype=int), np.array(cols["threshold"], dtype=float),
                np.array(cols["left"], dtype=int), np.array(cols["right"], dtype=int),
                np.array(cols["value"], dtype=float), np.array(cols["depth"], dtype=int))


@dataclass
class ForestModel:
    trees: list[Tree]
    n_trees: int
    max_depth: int
    master_seed: int
    active_features: tuple[str, ...]
    preprocessor: Preprocessor | None = None
    mdi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.mean([t.predict_matrix(X) for t in self.trees], axis=0)


def fit_forest(X, y, n_trees: int = N_TREES, max_depth: int = MAX_DEPTH, seed: int = 0,
               names: Sequence[str] | None = None, min_node: int = MIN_NODE) -> ForestModel:
    """Bootstrap-aggregated CART trees; tree t draws from ``default_rng([seed, t])``."""
    X, y = _check_xy(X, y)
    n, d = X.shape
    if d == 0:
        raise DegenerateDataError("no features")
    k = math.ceil(d / 3)
    mdi = np.zeros(d)
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        boot = rng.integers(0, n, n)
        trees.append(fit_tree(X[boot], y[boot], rng, k, max_depth, min_node, mdi))
    total = mdi.sum()
    mdi = mdi / total if total > 0 else mdi
    return ForestModel(trees, n_trees, max_depth, seed, tuple(names or _default_names(d)), mdi=mdi)


Model = LinearModel | ForestModel


# ---------------------------------------------------------------------------
# training and prediction on feature vectors


def _prepared(rows: Sequence[RawFeatureVector]) -> list[RawFeatureVector]:
    return [r if r.scaled else scale_features(r) for r in rows]


def train(kind: str, features: Sequence[RawFeatureVector], labels: Sequence[float],
          active: Sequence[str] | None = None, seed: int = 0, n_trees: int = N_TREES) -> Model:
    """Scale, fit the preprocessor on these rows only, then fit the regressor."""
    rows = _prepared(features)
    if not rows:
        raise DegenerateDataError("no training rows")
    names = tuple(active) if active is not None else rows[0].names
    pre = fit_preprocessor(rows, names)
    X = transform(pre, rows)
    if kind == "linear":
        model: Model = fit_linear(X, labels, names)
    elif kind == "forest":
        model = fit_forest(X, labels, n_trees=n_trees, seed=seed, names=names)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    model.preprocessor = pre
    return model


def _design(model: Model, rows: Sequence[RawFeatureVector]) -> np.ndarray:
    rows = _prepared(rows)
    if model.preprocessor is None:
        out = np.empty((len(rows), len(model.active_features)))
        for i, r in enumerate(rows):
            for j, name in enumerate(model.active_features):
                if name not in r.names:
                    raise MissingFeatureError(name)
                v = r[name]
                out[i, j] = 0.0 if v is None else v
        return out
    for r in rows:
        missing = [n for n in model.active_features if n not in r.names]
        if missing:
            raise MissingFeatureError(missing[0])
    return transform(model.preprocessor, rows)


def predict(model: Model, x: RawFeatureVector) -> float:
    return float(model.predict_matrix(_design(model, [x]))[0])


def predict_many(model: Model, rows: Sequence[RawFeatureVector]) -> np.ndarray:
    if not rows:
        return np.zeros(0)
    return model.predict_matrix(_design(model, rows))


# ---------------------------------------------------------------------------
# importance


@dataclass(frozen=True)
class ImportanceRanking:
    """Feature names in rank order, most important first, with their scores."""

    names: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.scores):
            raise ValueError("names and scores differ in length")


def importance(model: Model) -> ImportanceRanking:
    """|coefficient| for linear models, normalised MDI for forests; ties keep feature order."""
    raw = np.abs(model.coefficients) if isinstance(model, LinearModel) else np.asarray(model.mdi)
    order = sorted(range(len(raw)), key=lambda i: (-raw[i], i))
    return ImportanceRanking(tuple(model.active_features[i] for i in order), tuple(float(raw[i]) for i in order))


def aggregate_rankings(rankings: Sequence[ImportanceRanking]) -> ImportanceRanking:
    """Sum of rank positions (0 = best) per feature; ascending, ties by name.

    The returned scores are the position sums, so lower is better.
    """
    if not rankings:
        raise ValueError("no rankings to aggregate")
    names = set(rankings[0].names)
    total = {n: 0 for n in names}
    for r in rankings:
        if set(r.names) != names or len(r.names) != len(names):
            raise MismatchedFeatureSetError("rankings cover different feature sets")
        for pos, n in enumerate(r.names):
            total[n] += pos
    order = sorted(names, key=lambda n: (total[n], n))
    return ImportanceRanking(tuple(order), tuple(float(total[n]) for n in order))


# ---------------------------------------------------------------------------
# reduction sweep


@dataclass
class CurveRow:
    d: int
    acc: float
    acc_large: float
    sgm_ratio: float
    sgm_virtual_best: float
    features: tuple[str, ...] = ()
    dropped: str | None = None


CURVE_COLUMNS = ("d", "acc", "acc_large", "sgm_ratio", "sgm_virtual_best")


def run_seed(dataset: Dataset, kind: str, active: Sequence[str], seed: int,
             split_mode: str = "instance", n_trees: int = N_TREES) -> tuple[EvalReport, ImportanceRanking]:
    """Split with ``seed``, train on the train side, score the test side."""
    train_ds, test_ds = split(dataset, seed, mode=split_mode)
    model = train(kind, [r.features for r in train_ds.rows], [r.label for r in train_ds.rows],
                  active, seed, n_trees)
    preds = predict_many(model, [r.features for r in test_ds.rows])
    return evaluate_rows(preds, test_ds.rows, seed), importance(model)


def _seed_job(args):
    return run_seed(*args)


def _nanmean(v: Sequence[float]) -> float:
    a = np.asarray(v, dtype=float)
    a = a[~np.isnan(a)]
    return float(a.mean()) if a.size else math.nan


def feature_reduction_experiment(dataset: Dataset, model_kind: str = "linear",
                                 seeds: Sequence[int] = DEFAULT_SEEDS, features: Sequence[str] | None = None,
                                 jobs: int = 1, split_mode: str = "instance",
                                 n_trees: int = N_TREES) -> list[CurveRow]:
    """Retrain over all seeds, record mean test metrics, drop the aggregate last feature, repeat down to d=1."""
    if not dataset.rows:
        raise DegenerateDataError("empty dataset")
    active = list(features if features is not None else dataset.rows[0].features.names)
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    curve = []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while active:
            tasks = [(dataset, model_kind, tuple(active), s, split_mode, n_trees) for s in seeds]
            results = list(pool.map(_seed_job, tasks)) if pool else [_seed_job(t) for t in tasks]
            reports = [r for r, _ in results]
            ranking = aggregate_rankings([rk for _, rk in results])
            row = CurveRow(
                len(active),
                _nanmean([r.overall_accuracy for r in reports]),
                _nanmean([r.large_label_accuracy for r in reports]),
                _nanmean([r.sgm_predicted_ratio for r in reports]),
                _nanmean([r.sgm_virtual_best_ratio for r in reports]),
                tuple(active),
            )
            if len(active) > 1:
                row.dropped = ranking.names[-1]
                active.remove(row.dropped)
            else:
                active = []
            curve.append(row)
    finally:
        if pool:
            pool.shutdown()
    return curve


# ---------------------------------------------------------------------------
# model file


def _floats(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def save_model(model: Model, header: str = "") -> str:
    """Versioned ``model v1`` text; ``header`` (comment lines) is written first."""
    pre = model.preprocessor
    if pre is None:
        raise ValueError("only trained models with a preprocessor can be saved")
    kind = "linear" if isinstance(model, LinearModel) else "forest"
    out = [header.rstrip("\n")] if header else []
    out += [
        "model v1",
        f"kind {kind}",
        "features " + " ".join(model.active_features),
        f"fitted_on {pre.fitted_on}",
        "impute " + _floats(pre.impute),
        "mean " + _floats(pre.mean),
        "std " + _floats(pre.std),
        "flat " + " ".join("1" if f else "0" for f in pre.flat),
    ]
    if isinstance(model, LinearModel):
        out += [f"intercept {float(model.intercept)!r}", "coef " + _floats(model.coefficients)]
    else:
        out += [f"n_trees {model.n_trees}", f"max_depth {model.max_depth}", f"seed {model.master_seed}",
                "mdi " + _floats(model.mdi)]
        for t, tree in enumerate(model.trees):
            out.append(f"tree {t} {len(tree.value)}")
            for i in range(len(tree.value)):
                if tree.feature[i] < 0:
                    out.append(f"leaf {float(tree.value[i])!r}")
                else:
                    out.append(f"split {int(tree.feature[i])} {float(tree.threshold[i])!r} "
                               f"{float(tree.value[i])!r}")
    return "\n".join(out) + "\n"


def _parse_tree(lines: list[str]) -> Tree:
    cols: dict[str, list] = {k: [] for k in ("feature", "threshold", "left", "right", "value", "depth")}
    pos = 0

    def read(depth: int) -> int:
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("truncated tree")
        tok = lines[pos].split()
        pos += 1
        me = len(cols["value"])
        leaf = tok[0] == "leaf"
        if tok[0] not in ("leaf", "split"):
            raise ModelFormatError(f"bad tree line {lines[pos - 1]!r}")
        cols["feature"].append(-1 if leaf else int(tok[1]))
        cols["threshold"].append(0.0 if leaf else float(tok[2]))
        cols["value"].append(float(tok[1] if leaf else tok[3]))
        cols["depth"].append(depth)
        cols["left"].append(-1)
        cols["right"].append(-1)
        if not leaf:
            cols["left"][me] = read(depth + 1)
            cols["right"][me] = read(depth + 1)
        return me

    read(0)
    if pos != len(lines):
        raise ModelFormatError("tree node count mismatch")
    return Tree(np.array(cols["feature"], dtype=int), np.array(cols["threshold"], dtype=float),
                np.array(cols["left"], dtype=int), np.array(cols["right"], dtype=int),
                np.array(cols["value"], dtype=float), np.array(cols["depth"], dtype=int))


def load_model(text: str) -> Model:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].strip() != "model v1":
        raise ModelFormatError("not a 'model v1' file")
    fields: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("tree "):
        key, _, rest = lines[i].partition(" ")
        fields[key] = rest
        i += 1
    try:
        names = tuple(fields["features"].split())
        vec = lambda k: np.array([float(v) for v in fields[k].split()])  # noqa: E731
        pre = Preprocessor(names, vec("impute"), vec("mean"), vec("std"),
                           tuple(f == "1" for f in fields["flat"].split()), int(fields["fitted_on"]))
        if fields["kind"] == "linear":
            return LinearModel(vec("coef"), float(fields["intercept"]), names, pre)
        if fields["kind"] != "forest":
            raise ModelFormatError(f"unknown model kind {fields['kind']!r}")
        trees = []
        while i < len(lines):
            _, _, count = lines[i].split()
            n = int(count)
            trees.append(_parse_tree(lines[i + 1:i + 1 + n]))
            i += 1 + n
        return ForestModel(trees, int(fields["n_trees"]), int(fields["max_depth"]), int(fields["seed"]),
                           names, pre, vec("mdi"))
    except (KeyError, ValueError) as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {e}") from None

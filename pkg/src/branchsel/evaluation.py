"""Accuracy, shifted geometric means, runtime ratios, splitting and reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bnb import BranchRule
from .datagen import DataPoint, Dataset

SGM_SHIFT = 10.0
LARGE_FACTOR = 4.0
DEFAULT_RULE = BranchRule.MIXED
SELECTABLE_RULES = (BranchRule.MIXED, BranchRule.PREFER_INT)


class EmptyInputError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, seed: int, train_fraction: float = 0.8,
          mode: str = "instance") -> tuple[Dataset, Dataset]:
    """Seeded train/test split; ``mode="instance"`` keeps an instance's permutations together."""
    if len(dataset) < 5:
        raise ValueError("split needs at least 5 rows")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be within (0, 1)")
    rng = np.random.default_rng(seed)
    if mode == "instance":
        ids = sorted({r.instance_id for r in dataset.rows})
    elif mode == "row":
        ids = sorted(r.key for r in dataset.rows)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    order = rng.permutation(len(ids))
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    train_ids = {ids[i] for i in order[:n_train]}
    key = (lambda r: r.instance_id) if mode == "instance" else (lambda r: r.key)
    train = [r for r in dataset.rows if key(r) in train_ids]
    test = [r for r in dataset.rows if key(r) not in train_ids]
    return Dataset(train, dict(dataset.provenance)), Dataset(test, dict(dataset.provenance))


# ---------------------------------------------------------------------------
# metrics


def sgm(values: Sequence[float], shift: float = SGM_SHIFT) -> float:
    """Shifted geometric mean, computed in log space."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise EmptyInputError("sgm of an empty vector")
    if np.any(v < 0):
        raise ValueError("sgm expects nonnegative values")
    return float(np.exp(np.mean(np.log(v + shift))) - shift)


def accuracy(predictions: Sequence[float], labels: Sequence[float], large_threshold: float | None = None,
             count_ties: bool = True) -> float:
    """Share of rows whose predicted sign matches the label's sign.

    A zero label is a tie and counts as correct, unless ``count_ties`` is
    off, in which case ties are dropped. ``large_threshold`` is a factor:
    only rows with ``|label| > log10(large_threshold)`` are scored. Returns
    nan when no row is scored.
    """
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape:
        raise LengthMismatchError(f"{p.size} predictions for {y.size} labels")
    keep = np.ones(y.shape, dtype=bool)
    if large_threshold is not None:
        keep &= np.abs(y) > math.log10(large_threshold)
    if not count_ties:
        keep &= y != 0
    if not keep.any():
        return math.nan
    p, y = p[keep], y[keep]
    correct = (y == 0) | (np.sign(p) == np.sign(y))
    return float(correct.mean())


def decide(predictions: Sequence[float]) -> list[BranchRule]:
    """Positive predicted label picks PREFER_INT; otherwise the default MIXED."""
    return [BranchRule.PREFER_INT if p > 0 else BranchRule.MIXED for p in predictions]


@dataclass
class RuntimeScore:
    predicted: float
    virtual_best: float
    per_rule: dict[BranchRule, float]


def sgm_runtime_score(decisions: Sequence[BranchRule], rows: Sequence[DataPoint],
                      default_rule: BranchRule = DEFAULT_RULE) -> RuntimeScore:
    """sgm of work under the chosen rules over sgm of work under ``default_rule``."""
    if len(decisions) != len(rows):
        raise LengthMismatchError(f"{len(decisions)} decisions for {len(rows)} rows")
    if not rows:
        raise EmptyInputError("no rows to score")
    base = sgm([r.work(default_rule) for r in rows])
    base = base if base > 0 else 1.0

    def ratio(works) -> float:
        return sgm(works) / base

    per_rule = {rule: ratio([r.work(rule) for r in rows]) for rule in SELECTABLE_RULES}
    best = ratio([min(r.work(rule) for rule in SELECTABLE_RULES) for r in rows])
    return RuntimeScore(ratio([r.work(d) for r, d in zip(rows, decisions)]), best, per_rule)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    overall_accuracy: float
    large_label_accuracy: float
    sgm_predicted_ratio: float
    sgm_virtual_best_ratio: float
    sgm_per_rule_ratios: dict[BranchRule, float] = field(default_factory=dict)
    n_test_rows: int = 0
    seed: int = 0


def evaluate_rows(predictions: Sequence[float], rows: Sequence[DataPoint], seed: int = 0,
                  count_ties: bool = True) -> EvalReport:
    labels = [r.label for r in rows]
    score = sgm_runtime_score(decide(predictions), rows)
    return EvalReport(
        accuracy(predictions, labels, count_ties=count_ties),
        accuracy(predictions, labels, LARGE_FACTOR, count_ties=count_ties),
        score.predicted,
        score.virtual_best,
        score.per_rule,
        len(rows),
        seed,
    )


@dataclass
class Summary:
    mean: dict[str, float]
    std: dict[str, float]
    n: int


_METRICS = ("overall_accuracy", "large_label_accuracy", "sgm_predicted_ratio", "sgm_virtual_best_ratio")


def summarize(reports: Sequence[EvalReport]) -> Summary:
    """Mean and population standard deviation of each metric across seeds (nan entries skipped)."""
    if not reports:
        raise EmptyInputError("no reports to summarize")
    mean, std = {}, {}
    for m in _METRICS:
        v = np.array([getattr(r, m) for r in reports], dtype=float)
        v = v[~np.isnan(v)]
        mean[m] = float(v.mean()) if v.size else math.nan
        std[m] = float(v.std()) if v.size else math.nan
    return Summary(mean, std, len(reports))


_ROWS = (
    ("Accuracy", "Overall", "overall_accuracy", True),
    ("Accuracy", "LargeLabel", "large_label_accuracy", True),
    ("Time factor", "Predicted", "sgm_predicted_ratio", False),
    ("Time factor", "Virtual Best", "sgm_virtual_best_ratio", False),
)


def _cell(v: float, pct: bool) -> str:
    if v is None or math.isnan(v):
        return "-"
    return f"{100 * v:.1f}%" if pct else f"{v:.3f}"


def format_report(train: EvalReport | None, test: EvalReport) -> str:
    """Aligned text table with Train and Test columns; a missing train report prints dashes."""
    lines = [f"{'':<12} {'':<13} {'Train':>8} {'Test':>8}"]
    last = None
    for group, name, attr, pct in _ROWS:
        label = group if group != last else ""
        last = group
        left = _cell(getattr(train, attr), pct) if train is not None else "-"
        lines.append(f"{label:<12} {name:<13} {left:>8} {_cell(getattr(test, attr), pct):>8}")
    left = train.n_test_rows if train is not None else "-"
    lines.append(f"{'Rows':<12} {'':<13} {left:>8} {test.n_test_rows:>8}")
    return "\n".join(lines) + "\n"


def report_csv(train: EvalReport | None, test: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "train", "test"])

    def g(rep, value):
        return "" if rep is None else format(value(rep), ".9g")

    for _, _, attr, _ in _ROWS:
        w.writerow([attr, g(train, lambda r: getattr(r, attr)), g(test, lambda r: getattr(r, attr))])
    for rule in SELECTABLE_RULES:
        w.writerow([f"sgm_ratio_{rule.value}", g(train, lambda r: r.sgm_per_rule_ratios[rule]),
                    g(test, lambda r: r.sgm_per_rule_ratios[rule])])
    w.writerow(["n_rows", "" if train is None else train.n_test_rows, test.n_test_rows])
    return buf.getvalue()

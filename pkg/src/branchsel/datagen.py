"""Synthetic MINLP families, paired solves and the labelled dataset."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .bnb import BranchRule, SolveStatus, solve
from .features import FEATURE_NAMES, RawFeatureVector, extract_features
from .instance import Instance, InfeasibleError, ValidationError, parse_instance, permute, presolve

log = logging.getLogger(__name__)

LABEL_SHIFT = 10.0


class Family(Enum):
    BILINEAR_KNAPSACK = "bilinear_knapsack"
    CONCAVE_MIN = "concave_min"
    MIXED_QP = "mixed_qp"
    BOXQP_INT = "boxqp_int"


MAX_SIZE = 30


def _num(v: float) -> str:
    return repr(round(float(v), 3))


def _sum(terms: Sequence[str]) -> str:
    return terms[0] if len(terms) == 1 else f"(+ {' '.join(terms)})"


SMALL_SIZE = 9


def _split(size: int, rng: np.random.Generator) -> tuple[int, int]:
    """(integer, continuous) counts with one continuous slot held back for an auxiliary.

    Sizes up to ``SMALL_SIZE`` keep at most 3 continuous and 6 integer variables.
    """
    frac = rng.uniform(0.2, 0.6)
    n_cont = min(max(2, int(round(size * frac))), size - 1)
    if size <= SMALL_SIZE:
        n_cont = min(max(n_cont, size - 6), 3)
    return size - n_cont, n_cont - 1


def _pairs(names: Sequence[str], count: int, rng: np.random.Generator) -> list[tuple[str, str]]:
    if len(names) < 2 or count < 1:
        return []
    out = set()
    for _ in range(count):
        a, b = sorted(rng.choice(len(names), 2, replace=False))
        out.add((names[a], names[b]))
    return sorted(out)


def _bilinear_knapsack(size: int, rng: np.random.Generator) -> list[str]:
    n_int, n_y = _split(size, rng)
    ub = rng.integers(1, 4, n_int)
    xs = [f"x{i}" for i in range(n_int)]
    ys = [f"y{j}" for j in range(n_y)]
    lines = [f"var {x} 0 {int(u)} int" for x, u in zip(xs, ub)]
    lines += [f"var {y} 0 1 cont" for y in ys]
    lines.append(f"var r 0 {_num(20 * size)} cont")
    w = rng.integers(2, 10, n_int)
    cap = max(int(w.max()), int(rng.uniform(0.3, 0.7) * float(w @ ub)))
    lines.append(f"lin cap le {cap} : " + " ".join(f"{int(wi)} {x}" for wi, x in zip(w, xs)))
    if n_y > 1:
        lines.append(f"lin ybudget le {_num(rng.uniform(0.4, 0.8) * n_y)} : " + " ".join(f"1 {y}" for y in ys))
    terms = []
    for y in ys:
        partners = rng.choice(n_int, size=min(n_int, int(rng.integers(1, 3))), replace=False)
        for i in sorted(partners):
            terms.append(f"(* {_num(rng.uniform(1, 5))} (* {xs[i]} {y}))")
        if rng.random() < 0.3:
            # activity only runs where something was bought
            lines.append(f"lin need_{y} le 0 : 1 {y} -1 {xs[int(partners[0])]}")
    # synergies between continuous activities and convex rewards need spatial work
    synergy = rng.uniform(0.0, 1.0)
    for a, b in _pairs(ys, int(round(synergy * n_y)), rng):
        terms.append(f"(* {_num(rng.uniform(0.5, 4))} (* {a} {b}))")
    for y in ys:
        if rng.random() < 0.5 * synergy:
            terms.append(f"(* {_num(rng.uniform(0.5, 3))} (sq {y}))")
    lines.append(f"nl rev le 0 : (- r {_sum(terms)})")
    obj = ["-1 r"] + [f"{_num(rng.uniform(0.5, 3))} {x}" for x in xs]
    obj += [f"{_num(rng.uniform(0, 2))} {y}" for y in ys]
    lines.append("obj min : " + " ".join(obj))
    return lines


def _concave_min(size: int, rng: np.random.Generator) -> list[str]:
    n_int, n_f = _split(size, rng)
    n_f = max(1, min(n_f, n_int))
    n_z = n_int
    lines = [f"var z{i} 0 {2 if i < n_f else int(rng.integers(1, 3))} int" for i in range(n_z)]
    caps = rng.uniform(2, 6, n_f)
    lines += [f"var f{j} 0 {_num(caps[j])} cont" for j in range(n_f)]
    lines.append("var t -inf +inf cont")
    demand = rng.uniform(0.3, 0.8) * float(caps.sum())
    lines.append(f"lin demand ge {_num(demand)} : " + " ".join(f"1 f{j}" for j in range(n_f)))
    for j in range(n_f):
        # flow j needs open facility j (modules of capacity caps[j]/2)
        lines.append(f"lin open{j} le 0 : 1 f{j} {_num(-caps[j] / 2)} z{j}")
    for i in range(n_f, n_z):
        j = int(rng.integers(0, n_f))
        # z_i needs z_j open
        lines.append(f"lin link{i} le 0 : 1 z{i} -1 z{j}")
    curvature = rng.uniform(0.2, 1.0)
    terms = []
    for j in range(n_f):
        if rng.random() < 0.5:
            terms.append(f"(* {_num(rng.uniform(1, 6) * curvature)} (log (+ 1 f{j})))")
            terms.append(f"(* {_num(rng.uniform(0.2, 1.0) * (1 - curvature))} f{j})")
        else:
            a = rng.uniform(1, 3)
            b = rng.uniform(0.1, 0.45) * curvature * a / caps[j]
            terms.append(f"(- (* {_num(a)} f{j}) (* {_num(b)} (sq f{j})))")
    for a, b in _pairs([f"f{j}" for j in range(n_f)], int(rng.integers(0, n_f)), rng):
        # economies of scope between flows
        terms.append(f"(* {_num(-rng.uniform(0.05, 0.3) * curvature)} (* {a} {b}))")
    lines.append(f"nl cost le 0 : (- {_sum(terms)} t)")
    obj = ["1 t"] + [f"{_num(rng.uniform(0.5, 4))} z{i}" for i in range(n_z)]
    lines.append("obj min : " + " ".join(obj))
    return lines


def _mixed_qp(size: int, rng: np.random.Generator) -> list[str]:
    n_int, n_y = _split(size, rng)
    xs = [f"x{i}" for i in range(n_int)]
    ys = [f"y{j}" for j in range(n_y)]
    ub = [int(u) for u in rng.integers(1, 3, n_int)] + [2] * n_y
    lines = [f"var {x} -1 {u} int" for x, u in zip(xs, ub)]
    lines += [f"var {y} -1 2 cont" for y in ys]
    lines.append("var t -inf +inf cont")
    allv = xs + ys
    sel = sorted(rng.choice(len(allv), size=max(1, len(allv) // 2), replace=False))
    top = sum(ub[i] for i in sel)
    lines.append(f"lin cover ge {_num(rng.uniform(-1, 0.5) * top)} : " + " ".join(f"1 {allv[i]}" for i in sel))
    if n_int >= 2 and rng.random() < 0.5:
        a, b = rng.choice(n_int, 2, replace=False)
        lines.append(f"lin bal eq {int(rng.integers(0, 2))} : 1 x{a} -1 x{b}")
    terms = [f"(* {_num(rng.uniform(-2, 2))} {v})" for v in allv]
    for x in xs:
        if rng.random() < 0.7:
            terms.append(f"(* {_num(rng.uniform(0.1, 1))} (sq {x}))")
    mix = rng.uniform(0.0, 1.0)
    for a, b in _pairs(allv, int(round((0.3 + mix) * len(allv) / 2)), rng):
        terms.append(f"(* {_num(rng.uniform(-2, 2))} (* {a} {b}))")
    for a, b in _pairs(ys, int(round(mix * n_y)), rng):
        terms.append(f"(* {_num(rng.uniform(-2, 2))} (* {a} {b}))")
    for y in ys:
        r = rng.random()
        if r < 0.5 * mix + 0.1:
            terms.append(f"(* {_num(rng.uniform(-1.5, -0.3))} (sq {y}))")
        elif r < 0.8:
            terms.append(f"(* {_num(rng.uniform(0.1, 0.5))} (exp {y}))")
    lines.append(f"nl obj le 0 : (- {_sum(terms)} t)")
    lines.append("obj min : 1 t")
    return lines


def _boxqp_int(size: int, rng: np.random.Generator) -> list[str]:
    n_int, n_y = _split(size, rng)
    xs = [f"x{i}" for i in range(n_int)]
    ys = [f"y{j}" for j in range(n_y)]
    lines = [f"var {x} 0 {int(rng.integers(1, 4))} int" for x in xs]
    lines += [f"var {y} 0 1 cont" for y in ys]
    lines.append("var t -inf +inf cont")
    allv = xs + ys
    density = rng.uniform(0.1, 0.5)
    terms = [f"(* {_num(rng.uniform(-3, 1))} {v})" for v in allv]
    for a in range(len(allv)):
        for b in range(a + 1, len(allv)):
            # continuous pairs are denser so the nonconvex share varies with the split
            p = density * (2.0 if a >= n_int else 1.0)
            if rng.random() < p:
                terms.append(f"(* {_num(rng.uniform(-2, 2))} (* {allv[a]} {allv[b]}))")
        if rng.random() < 0.5:
            terms.append(f"(* {_num(rng.uniform(-1, 1))} (sq {allv[a]}))")
    lines.append(f"nl obj le 0 : (- {_sum(terms)} t)")
    if rng.random() < 0.6:
        lines.append(f"lin card le {_num(max(1.0, 0.4 * len(allv)))} : " + " ".join(f"1 {v}" for v in allv))
    lines.append("obj min : 1 t")
    return lines


_GENERATORS = {
    Family.BILINEAR_KNAPSACK: _bilinear_knapsack,
    Family.CONCAVE_MIN: _concave_min,
    Family.MIXED_QP: _mixed_qp,
    Family.BOXQP_INT: _boxqp_int,
}


def instance_text(family: Family, size: int, seed: int) -> str:
    if not 3 <= size <= MAX_SIZE:
        raise ValueError(f"size must be within [3, {MAX_SIZE}]")
    fam = Family(family)
    rng = np.random.default_rng([seed, list(Family).index(fam), size])
    body = _GENERATORS[fam](size, rng)
    # declarations first, then objective, rows, constraints
    order = {"var": 0, "obj": 1, "lin": 2, "nl": 3}
    body.sort(key=lambda line: order[line.split()[0]])
    return "\n".join([f"minlp {fam.value}_{size}_{seed}", *body]) + "\n"


def gen_synthetic(family: Family, size: int, seed: int) -> Instance:
    return parse_instance(instance_text(family, size, seed))


CORPUS_SIZES = (5, 16)
_SEED_STRIDE = 10_000


def corpus_specs(families: Sequence[Family], count: int, seed: int) -> list[tuple[Family, int, int]]:
    """(family, size, instance seed) triples; families cycle, sizes are drawn from ``seed``.

    Instance seeds are ``seed * 10000 + i``, so corpora built from different
    master seeds never share an instance.
    """
    if not families:
        raise ValueError("at least one family is required")
    if not 0 <= count < _SEED_STRIDE:
        raise ValueError(f"count must be within [0, {_SEED_STRIDE})")
    rng = np.random.default_rng(seed)
    sizes = rng.integers(CORPUS_SIZES[0], CORPUS_SIZES[1] + 1, count)
    return [(Family(families[i % len(families)]), int(sizes[i]), seed * _SEED_STRIDE + i) for i in range(count)]


def gen_corpus(families: Sequence[Family], count: int, seed: int) -> list[tuple[str, str]]:
    """(file name, instance text) pairs."""
    out = []
    for i, (fam, size, s) in enumerate(corpus_specs(families, count, seed)):
        out.append((f"{i:05d}_{fam.value}_{size}_{s}.minlp", instance_text(fam, size, s)))
    return out


# ---------------------------------------------------------------------------
# dataset


class RowError(Enum):
    ROOT_SOLVED = "ROOT_SOLVED"
    BOTH_WORK_LIMIT = "BOTH_WORK_LIMIT"
    FEATURE_ERROR = "FEATURE_ERROR"


@dataclass
class DataPoint:
    instance_id: str
    permutation_seed: int
    features: RawFeatureVector | None
    work_mixed: int
    work_preferint: int
    status_mixed: str
    status_preferint: str
    label: float | None = None
    censored: bool = False
    nodes_mixed: int = 0
    nodes_preferint: int = 0
    objective_mixed: float | None = None
    objective_preferint: float | None = None
    error: str | None = None

    @property
    def key(self) -> tuple[str, int]:
        return (self.instance_id, self.permutation_seed)

    def work(self, rule: BranchRule) -> int:
        return self.work_preferint if rule is BranchRule.PREFER_INT else self.work_mixed


@dataclass
class Dataset:
    rows: list[DataPoint]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    def check_unique(self) -> None:
        keys = Counter(r.key for r in self.rows)
        dup = [k for k, c in keys.items() if c > 1]
        if dup:
            raise ValidationError(f"duplicate (instance, permutation) rows: {dup[:3]}")


FILTERED = None


def compute_label(work_mixed: int, work_preferint: int, status_mixed, status_preferint,
                  work_limit: int) -> tuple[float | None, bool]:
    """log10((work_mixed + 10) / (work_preferint + 10)); (None, False) when filtered.

    Positive labels mean PreferInt is faster.
    """
    lim_m = str(getattr(status_mixed, "value", status_mixed)) == SolveStatus.WORK_LIMIT.value
    lim_p = str(getattr(status_preferint, "value", status_preferint)) == SolveStatus.WORK_LIMIT.value
    if lim_m and lim_p:
        return FILTERED, False
    wm = work_limit if lim_m else work_mixed
    wp = work_limit if lim_p else work_preferint
    return math.log10((wm + LABEL_SHIFT) / (wp + LABEL_SHIFT)), lim_m or lim_p


def solve_row(instance: Instance, perm_seed: int, work_limit: int) -> DataPoint:
    """Both rules on one permuted instance; features from the MIXED root."""
    iid = instance.name
    try:
        inst = permute(instance, perm_seed)
        pre, summary = presolve(inst)
    except InfeasibleError as e:
        return DataPoint(iid, perm_seed, None, 0, 0, "INFEASIBLE", "INFEASIBLE", nodes_mixed=1,
                         nodes_preferint=1, error=f"presolve: {e}")
    mixed = solve(pre, BranchRule.MIXED, work_limit)
    feats, err = None, None
    try:
        feats = extract_features(inst, pre, summary, mixed.root, mixed.sb)
    except (ValueError, ArithmeticError) as e:
        err = f"features: {e}"
    pint = solve(pre, BranchRule.PREFER_INT, work_limit)
    label, censored = compute_label(mixed.work, pint.work, mixed.status, pint.status, work_limit)
    return DataPoint(iid, perm_seed, feats, mixed.work, pint.work, mixed.status.value, pint.status.value,
                     label, censored, mixed.nodes, pint.nodes, mixed.objective, pint.objective, err)


def _row_job(args):
    text, seed, work_limit = args
    return solve_row(parse_instance(text), seed, work_limit)


def generate_dataset(instances: Iterable[Instance], permutations: int = 2, work_limit: int = 200_000,
                     jobs: int = 1, provenance: dict | None = None) -> Dataset:
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    from .instance import write_instance

    tasks = [(write_instance(inst), s, work_limit) for inst in instances for s in range(permutations)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_row_job, tasks, chunksize=1))
    else:
        rows = [_row_job(t) for t in tasks]
    rows.sort(key=lambda r: r.key)
    return Dataset(rows, dict(provenance or {}))


def filter_dataset(dataset: Dataset) -> tuple[Dataset, Counter]:
    """Drop root-solved, doubly censored and feature-error rows; counts per reason."""
    dataset.check_unique()
    kept, reasons = [], Counter()
    for r in dataset.rows:
        if r.error is not None or r.features is None:
            reasons[RowError.FEATURE_ERROR.value] += 1
        elif r.nodes_mixed <= 1 or r.nodes_preferint <= 1:
            reasons[RowError.ROOT_SOLVED.value] += 1
        elif r.label is None:
            reasons[RowError.BOTH_WORK_LIMIT.value] += 1
        else:
            kept.append(r)
    for reason, cnt in sorted(reasons.items()):
        log.info("filtered %d rows: %s", cnt, reason)
    return Dataset(kept, dict(dataset.provenance)), reasons


# ---------------------------------------------------------------------------
# CSV


CSV_HEADER = ("instance_id", "permutation_seed", *FEATURE_NAMES, "missing_mask", "work_mixed",
              "work_preferint", "status_mixed", "status_preferint", "censored", "label")


def _g9(v: float) -> str:
    return format(float(v), ".9g")


def provenance_block(provenance: dict) -> str:
    return "".join(f"# {k}: {provenance[k]}\n" for k in provenance)


def dataset_to_csv(dataset: Dataset) -> str:
    """Canonical CSV; features beyond the standard 17 become trailing columns."""
    extra: list[str] = []
    for r in dataset.rows:
        extra += [n for n in r.features.names if n not in FEATURE_NAMES and n not in extra]
    buf = io.StringIO()
    buf.write(provenance_block(dataset.provenance))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER + tuple(extra))
    for r in dataset.rows:
        f = r.features
        vals = []
        for n in (*FEATURE_NAMES, *extra):
            v = f[n] if n in f.names else None
            vals.append("" if v is None else _g9(v))
        mask = "".join("1" if f[n] is None else "0" for n in FEATURE_NAMES)
        w.writerow([r.instance_id, r.permutation_seed, *vals[:len(FEATURE_NAMES)], mask, r.work_mixed,
                    r.work_preferint, r.status_mixed, r.status_preferint, int(r.censored), _g9(r.label),
                    *vals[len(FEATURE_NAMES):]])
    return buf.getvalue()


def read_csv_text(text: str) -> tuple[list[str], list[dict[str, str]], dict]:
    """Header, rows and provenance of a ``#``-prefixed CSV."""
    prov: dict[str, str] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition(":")
            prov[k.strip()] = v.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    return list(reader.fieldnames or []), list(reader), prov


def dataset_from_csv(text: str) -> Dataset:
    header, records, prov = read_csv_text(text)
    absent = [h for h in CSV_HEADER if h not in header]
    if absent:
        raise ValidationError(f"dataset CSV lacks columns {absent}")
    extra = [h for h in header if h not in CSV_HEADER]
    names = FEATURE_NAMES + tuple(extra)
    rows = []
    for rec in records:
        mask = rec["missing_mask"]
        if len(mask) != len(FEATURE_NAMES) or set(mask) - {"0", "1"}:
            raise ValidationError(f"bad missing_mask {mask!r}")
        missing = tuple(c == "1" for c in mask) + (False,) * len(extra)
        vals = tuple(0.0 if (i < len(mask) and mask[i] == "1") else float(rec[n]) for i, n in enumerate(names))
        feats = RawFeatureVector(vals, missing, names)
        rows.append(DataPoint(rec["instance_id"], int(rec["permutation_seed"]), feats,
                              int(rec["work_mixed"]), int(rec["work_preferint"]), rec["status_mixed"],
                              rec["status_preferint"], float(rec["label"]), rec["censored"] == "1",
                              # stored rows already passed the root-solved filter
                              nodes_mixed=2, nodes_preferint=2))
    ds = Dataset(rows, prov)
    ds.check_unique()
    return ds

"""Command-line entry point: corpus, dataset, training, evaluation, reduction sweep, solving."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .bnb import DEFAULT_WORK_LIMIT, BranchRule, SolveStatus, solve
from .datagen import (
    Family,
    dataset_from_csv,
    dataset_to_csv,
    filter_dataset,
    gen_corpus,
    generate_dataset,
    provenance_block,
)
from .evaluation import (
    SELECTABLE_RULES,
    evaluate_rows,
    format_report,
    report_csv,
    sgm,
    split,
)
from .instance import parse_instance, presolve
from .ml import CURVE_COLUMNS, feature_reduction_experiment, load_model, predict_many, save_model, train

log = logging.getLogger("branchsel")

CORPUS_MANIFEST = "corpus.txt"
RULE_NAMES = {r.value: r for r in BranchRule}


class UsageError(Exception):
    """Bad flag value; reported with exit code 2."""


# ---------------------------------------------------------------------------
# helpers


def parse_seeds(text: str) -> list[int]:
    """``"1..100"``, ``"3"`` or ``"1,4,9"``."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--seeds: cannot parse {text!r}") from None


def parse_families(text: str) -> list[Family]:
    if text == "all":
        return list(Family)
    try:
        return [Family(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--families: unknown family in {text!r}; choose from "
                         f"{', '.join(f.value for f in Family)}") from None


def parse_features(text: str, available: Sequence[str]) -> list[str]:
    if text == "all":
        return list(available)
    names = [v.strip() for v in text.split(",") if v.strip()]
    unknown = [n for n in names if n not in available]
    if unknown or not names:
        raise UsageError(f"--features: unknown feature(s) {unknown or text!r}")
    return names


def _provenance(command: str, config: dict) -> dict:
    prov = {"tool": f"branchsel {__version__}", "command": command}
    prov.update({k: config[k] for k in sorted(config)})
    return prov


def _write(path: str, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8", newline="\n")


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _corpus_files(corpus: str) -> list[Path]:
    root = Path(corpus)
    if not root.is_dir():
        raise UsageError(f"--corpus: {corpus!r} is not a directory")
    files = sorted(root.glob("*.minlp"))
    if not files:
        raise UsageError(f"--corpus: no .minlp files in {corpus!r}")
    return files


def _corpus_provenance(corpus: str) -> dict:
    manifest = Path(corpus) / CORPUS_MANIFEST
    out = {}
    if manifest.exists():
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if line.startswith("# ") and ":" in line:
                k, _, v = line[2:].partition(":")
                if k.strip() in ("families", "count", "seed"):
                    out[f"corpus_{k.strip()}"] = v.strip()
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    inst = parse_instance(_read(args.file))
    pre, summary = presolve(inst)
    st = solve(pre, RULE_NAMES[args.rule], args.work_limit)
    print(f"status {st.status.value}")
    print(f"objective {'none' if st.objective is None else format(st.objective, '.9g')}")
    print(f"dual_bound {format(st.dual_bound, '.9g')}")
    print(f"work {st.work}")
    print(f"nodes {st.nodes}")
    if st.x is not None:
        print("x " + " ".join(f"{v.name}={format(val, '.9g')}" for v, val in zip(pre.variables, st.x)))
    return 0


def cmd_gen_corpus(args) -> int:
    families = parse_families(args.families)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = gen_corpus(families, args.count, args.seed)
    for name, text in files:
        _write(str(out / name), text)
    prov = _provenance("gen-corpus", {"families": ",".join(f.value for f in families), "count": args.count,
                                      "seed": args.seed})
    _write(str(out / CORPUS_MANIFEST), provenance_block(prov) + "".join(f"{n}\n" for n, _ in files))
    print(f"wrote {len(files)} instances to {out}")
    return 0


def cmd_make_dataset(args) -> int:
    if args.permutations < 1:
        raise UsageError("--permutations must be >= 1")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    instances = [parse_instance(_read(str(f))) for f in _corpus_files(args.corpus)]
    config = {"corpus": args.corpus, "permutations": args.permutations, "work_limit": args.work_limit,
              "instances": len(instances), **_corpus_provenance(args.corpus)}
    raw = generate_dataset(instances, args.permutations, args.work_limit, args.jobs)
    kept, reasons = filter_dataset(raw)
    for reason, cnt in sorted(reasons.items()):
        print(f"filtered {cnt} rows: {reason}", file=sys.stderr)
    config["rows_generated"] = len(raw)
    config["rows_kept"] = len(kept)
    config["filtered"] = ",".join(f"{k}={v}" for k, v in sorted(reasons.items())) or "none"
    kept.provenance = _provenance("make-dataset", config)
    _write(args.out, dataset_to_csv(kept))
    print(f"wrote {len(kept)} rows to {args.out}")
    return 0


def _load_dataset(path: str):
    ds = dataset_from_csv(_read(path))
    if len(ds) == 0:
        raise UsageError(f"--data: {path!r} has no rows")
    return ds


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    names = parse_features(args.features, ds.rows[0].features.names)
    rows = ds.rows if args.all_rows else split(ds, args.seed, mode=args.split_mode)[0].rows
    model = train(args.model, [r.features for r in rows], [r.label for r in rows], names, args.seed, args.n_trees)
    prov = _provenance("train", {"data": args.data, "model": args.model, "seed": args.seed,
                                 "features": ",".join(names), "train_rows": len(rows),
                                 "split": "all" if args.all_rows else args.split_mode,
                                 "dataset_tool": ds.provenance.get("tool", "unknown")})
    _write(args.out, save_model(model, provenance_block(prov)))
    print(f"trained {args.model} model on {len(rows)} rows with {len(names)} features")
    return 0


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args.data)
    model = load_model(_read(args.model))
    parts = [None, ds] if args.all_rows else list(split(ds, args.split_seed, mode=args.split_mode))
    reports = []
    for part in parts:
        if part is None:
            reports.append(None)
            continue
        preds = predict_many(model, [r.features for r in part.rows])
        reports.append(evaluate_rows(preds, part.rows, args.split_seed))
    text = format_report(*reports)
    sys.stdout.write(text)
    for rule in SELECTABLE_RULES:
        train_part = "-" if reports[0] is None else f"{reports[0].sgm_per_rule_ratios[rule]:.3f}"
        print(f"fixed {rule.value}: train {train_part} test {reports[1].sgm_per_rule_ratios[rule]:.3f}")
    if args.csv:
        prov = _provenance("evaluate", {"data": args.data, "model": args.model, "split_seed": args.split_seed,
                                        "split": "all" if args.all_rows else args.split_mode})
        _write(args.csv, provenance_block(prov) + report_csv(*reports))
    return 0


def curve_csv(curve, provenance: dict) -> str:
    buf = io.StringIO()
    buf.write(provenance_block(provenance))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in curve:
        w.writerow([row.d] + [format(getattr(row, c), ".9g") for c in CURVE_COLUMNS[1:]])
    return buf.getvalue()


def cmd_reduce(args) -> int:
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    seeds = parse_seeds(args.seeds)
    if not seeds:
        raise UsageError("--seeds: empty seed list")
    ds = _load_dataset(args.data)
    names = parse_features(args.features, ds.rows[0].features.names)
    curve = feature_reduction_experiment(ds, args.model_kind, seeds, names, args.jobs, args.split_mode,
                                         args.n_trees)
    prov = _provenance("reduce", {"data": args.data, "model_kind": args.model_kind, "seeds": args.seeds,
                                  "split": args.split_mode, "features": ",".join(names),
                                  "drop_order": ",".join(r.dropped for r in curve if r.dropped)})
    _write(args.out, curve_csv(curve, prov))
    print(f"wrote {len(curve)} rows to {args.out}")
    return 0


def cmd_compare_rules(args) -> int:
    files = _corpus_files(args.corpus)
    rules = list(BranchRule)
    works = {r: [] for r in rules}
    limits = {r: 0 for r in rules}
    for f in files:
        pre, _ = presolve(parse_instance(_read(str(f))))
        for r in rules:
            st = solve(pre, r, args.work_limit)
            works[r].append(st.work)
            limits[r] += st.status is SolveStatus.WORK_LIMIT
    base = sgm(works[BranchRule.MIXED]) or 1.0
    lines = [f"{'rule':<14} {'sgm_work':>12} {'ratio':>8} {'limit_hits':>10}"]
    rows = []
    for r in rules:
        s = sgm(works[r])
        rows.append((r.value, s, s / base, limits[r]))
        lines.append(f"{r.value:<14} {s:>12.1f} {s / base:>8.3f} {limits[r]:>10}")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.out:
        buf = io.StringIO()
        buf.write(provenance_block(_provenance("compare-rules", {"corpus_files": len(files),
                                                                 "work_limit": args.work_limit,
                                                                 **_corpus_provenance(args.corpus)})))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rule", "sgm_work", "ratio_vs_mixed", "work_limit_hits"])
        for name, s, ratio, hits in rows:
            w.writerow([name, format(s, ".9g"), format(ratio, ".9g"), hits])
        _write(args.out, buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="branchsel", description=__doc__)
    p.add_argument("--version", action="version", version=f"branchsel {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve one instance file")
    s.add_argument("file")
    s.add_argument("--rule", choices=sorted(RULE_NAMES), default="mixed")
    s.add_argument("--work-limit", type=int, default=DEFAULT_WORK_LIMIT)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("gen-corpus", help="write a synthetic instance corpus")
    s.add_argument("--families", default="all", help="comma list or 'all'")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("make-dataset", help="paired solves, features and labels for a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--permutations", type=int, default=2)
    s.add_argument("--work-limit", type=int, default=DEFAULT_WORK_LIMIT)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_make_dataset)

    split_flag = dict(choices=("instance", "row"), default="instance")

    s = sub.add_parser("train", help="fit a label regressor")
    s.add_argument("--data", required=True)
    s.add_argument("--model", choices=("linear", "forest"), default="linear")
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--features", default="all", help="comma list or 'all'")
    s.add_argument("--out", required=True)
    s.add_argument("--all-rows", action="store_true", help="train on every row instead of the seed's train split")
    s.add_argument("--split-mode", **split_flag)
    s.add_argument("--n-trees", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a saved model on a dataset split")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--split-seed", type=int, default=1)
    s.add_argument("--split-mode", **split_flag)
    s.add_argument("--csv", help="also write the report as CSV")
    s.add_argument("--all-rows", action="store_true", help="score every row as test data (frozen model)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("reduce", help="iterative feature-reduction sweep")
    s.add_argument("--data", required=True)
    s.add_argument("--model-kind", choices=("linear", "forest"), default="linear")
    s.add_argument("--seeds", default="1..100")
    s.add_argument("--features", default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--split-mode", **split_flag)
    s.add_argument("--n-trees", type=int, default=100)
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("compare-rules", help="sgm work of every fixed rule on a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--work-limit", type=int, default=DEFAULT_WORK_LIMIT)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare_rules)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"branchsel {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError) as e:
        print(f"branchsel {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

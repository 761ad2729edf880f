"""MINLP instance model, text format, permutation and a light presolve."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .expr import (
    INF,
    DagBuilder,
    DomainError,
    ExprDag,
    ExprNode,
    Interval,
    Op,
    _OP_TOKENS,
    format_prefix,
    node_intervals,
)

SENSES = ("le", "ge", "eq")


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class ValidationError(ValueError):
    pass


class InfeasibleError(Exception):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    lb: float
    ub: float
    is_integer: bool = False

    @property
    def fixed(self) -> bool:
        return self.lb == self.ub


@dataclass(frozen=True)
class LinearConstraint:
    name: str
    coefs: tuple[tuple[int, float], ...]
    sense: str
    rhs: float


@dataclass(frozen=True)
class NonlinearConstraint:
    """``g(x) <= 0`` where g is ``dag`` evaluated at ``root``.

    An equation is stored as two entries sharing the same dag, with
    ``origin == "eq"``; the second root negates the first.
    """

    name: str
    dag: ExprDag
    root: int
    origin: str = "le"


@dataclass(frozen=True)
class Instance:
    name: str
    variables: tuple[Variable, ...]
    objective: tuple[tuple[int, float], ...]
    linear: tuple[LinearConstraint, ...] = ()
    nonlinear: tuple[NonlinearConstraint, ...] = ()

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def m(self) -> int:
        return len(self.linear) + len(self.nonlinear)

    def bounds(self) -> np.ndarray:
        return np.array([(v.lb, v.ub) for v in self.variables], dtype=float).reshape(-1, 2)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n)
        for j, a in self.objective:
            c[j] += a
        return c

    def integer_mask(self) -> np.ndarray:
        return np.array([v.is_integer for v in self.variables], dtype=bool)

    def validate(self) -> None:
        n = self.n
        names = [v.name for v in self.variables]
        if len(set(names)) != n:
            raise ValidationError("duplicate variable names")
        for v in self.variables:
            if not v.lb <= v.ub:
                raise ValidationError(f"variable {v.name}: lb > ub")
        for row in (self.objective, *(c.coefs for c in self.linear)):
            idx = [j for j, _ in row]
            if len(set(idx)) != len(idx):
                raise ValidationError("duplicate index within a row")
            if any(not 0 <= j < n for j in idx):
                raise ValidationError("row index out of range")
        for c in self.nonlinear:
            if any(j >= n for j in c.dag.var_indices):
                raise ValidationError(f"constraint {c.name}: unknown variable")


def structurally_equal(a: Instance, b: Instance) -> bool:
    """Equality of everything except DAG node ordering."""
    if (a.name, a.variables, a.objective, a.linear) != (b.name, b.variables, b.objective, b.linear):
        return False
    if len(a.nonlinear) != len(b.nonlinear):
        return False
    names = [v.name for v in a.variables]
    for ca, cb in zip(a.nonlinear, b.nonlinear):
        if (ca.name, ca.origin) != (cb.name, cb.origin):
            return False
        if format_prefix(ca.dag, ca.root, names) != format_prefix(cb.dag, cb.root, names):
            return False
    return True


# ---------------------------------------------------------------------------
# parsing


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def _number(tok: str) -> float | None:
    try:
        return float(tok)
    except ValueError:
        return None


def _bound(tok: str, lineno: int) -> float:
    if tok in ("-inf", "+inf", "inf"):
        return -INF if tok == "-inf" else INF
    v = _number(tok)
    if v is None or math.isnan(v):
        raise ParseError(lineno, f"bad bound {tok!r}")
    return v


class _ExprParser:
    def __init__(self, text: str, lineno: int, var_index: dict[str, int], builder: DagBuilder):
        self.toks = _TOKEN.findall(text)
        self.pos = 0
        self.lineno = lineno
        self.vars = var_index
        self.b = builder

    def fail(self, msg: str):
        raise ParseError(self.lineno, msg)

    def next(self) -> str:
        if self.pos >= len(self.toks):
            self.fail("unexpected end of expression")
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def parse(self) -> int:
        node = self.expr()
        if self.pos != len(self.toks):
            self.fail(f"trailing tokens after expression: {self.toks[self.pos]!r}")
        return node

    def expr(self) -> int:
        tok = self.next()
        if tok == ")":
            self.fail("unexpected ')'")
        if tok != "(":
            v = _number(tok)
            if v is not None:
                if not math.isfinite(v):
                    self.fail(f"non-finite literal {tok!r}")
                return self.b.const(v)
            if tok not in self.vars:
                raise ValidationError(f"line {self.lineno}: unknown variable {tok!r}")
            return self.b.var(self.vars[tok])
        name = self.next()
        op = _OP_TOKENS.get(name)
        if op is None:
            self.fail(f"unknown operator {name!r}")
        args: list[int] = []
        k = 0
        while True:
            if self.pos >= len(self.toks):
                self.fail("missing ')'")
            if self.toks[self.pos] == ")":
                self.pos += 1
                break
            if op is Op.POWK and len(args) == 1 and not k:
                ktok = self.next()
                if not re.fullmatch(r"\d+", ktok) or int(ktok) < 2:
                    self.fail(f"pow exponent must be an integer >= 2, got {ktok!r}")
                k = int(ktok)
                continue
            args.append(self.expr())
        if op is Op.SUM:
            if len(args) < 2:
                self.fail("'+' needs at least two arguments")
            return self.b.op(Op.SUM, *args)
        if op is Op.MUL:
            if len(args) < 2:
                self.fail("'*' needs at least two arguments")
            node = args[0]
            for a in args[1:]:
                node = self.b.op(Op.MUL, node, a)
            return node
        if op is Op.SUB:
            if len(args) != 2:
                self.fail("'-' takes exactly two arguments")
            return self.b.op(Op.SUB, *args)
        if len(args) != 1:
            self.fail(f"{name!r} takes one argument")
        if op is Op.POWK:
            if not k:
                self.fail("pow needs an exponent")
            return self.b.op(Op.POWK, args[0], k=k)
        return self.b.op(op, args[0])


def parse_instance(text: str | bytes) -> Instance:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    name = None
    variables: list[Variable] = []
    var_index: dict[str, int] = {}
    objective: tuple[tuple[int, float], ...] = ()
    linear: list[LinearConstraint] = []
    nonlinear: list[NonlinearConstraint] = []
    cons_names: set[str] = set()

    def linear_terms(toks: list[str], lineno: int) -> tuple[tuple[int, float], ...]:
        if len(toks) % 2:
            raise ParseError(lineno, "linear terms come in <coef> <var> pairs")
        terms: dict[int, float] = {}
        for i in range(0, len(toks), 2):
            a = _number(toks[i])
            if a is None or not math.isfinite(a):
                raise ParseError(lineno, f"bad coefficient {toks[i]!r}")
            if toks[i + 1] not in var_index:
                raise ValidationError(f"line {lineno}: unknown variable {toks[i + 1]!r}")
            j = var_index[toks[i + 1]]
            if j in terms:
                raise ValidationError(f"line {lineno}: variable {toks[i + 1]!r} repeated in row")
            terms[j] = a
        return tuple(terms.items())

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, tail = line.partition(":")
        toks = head.split()
        kw = toks[0]
        if name is None and kw != "minlp":
            raise ParseError(lineno, "file must start with 'minlp <name>'")
        if kw == "minlp":
            if name is not None or len(toks) != 2 or tail:
                raise ParseError(lineno, "malformed header")
            name = toks[1]
        elif kw == "var":
            if len(toks) != 5 or toks[4] not in ("cont", "int") or tail:
                raise ParseError(lineno, "expected: var <name> <lb> <ub> <cont|int>")
            vname = toks[1]
            if _number(vname) is not None:
                raise ParseError(lineno, f"variable name {vname!r} looks numeric")
            if vname in var_index:
                raise ValidationError(f"line {lineno}: duplicate variable {vname!r}")
            lb, ub = _bound(toks[2], lineno), _bound(toks[3], lineno)
            if lb > ub:
                raise ValidationError(f"line {lineno}: lb > ub for {vname!r}")
            var_index[vname] = len(variables)
            variables.append(Variable(vname, lb, ub, toks[4] == "int"))
        elif kw == "obj":
            if toks != ["obj", "min"] or ":" not in line:
                raise ParseError(lineno, "expected: obj min : <coef> <var> ...")
            objective = linear_terms(tail.split(), lineno)
        elif kw in ("lin", "nl"):
            if len(toks) != 4 or ":" not in line or toks[2] not in SENSES:
                raise ParseError(lineno, f"expected: {kw} <name> <le|ge|eq> <rhs> : ...")
            cname, sense = toks[1], toks[2]
            rhs = _number(toks[3])
            if rhs is None or not math.isfinite(rhs):
                raise ParseError(lineno, f"bad rhs {toks[3]!r}")
            if cname in cons_names:
                raise ValidationError(f"line {lineno}: duplicate constraint {cname!r}")
            cons_names.add(cname)
            if kw == "lin":
                linear.append(LinearConstraint(cname, linear_terms(tail.split(), lineno), sense, rhs))
                continue
            b = DagBuilder()
            e = _ExprParser(tail, lineno, var_index, b).parse()
            if sense == "ge":
                root = b.op(Op.NEG, e) if rhs == 0 else b.op(Op.SUB, b.const(rhs), e)
                nonlinear.append(NonlinearConstraint(cname, b.build([root]), root, "le"))
                continue
            root = e if rhs == 0 else b.op(Op.SUB, e, b.const(rhs))
            if sense == "le":
                nonlinear.append(NonlinearConstraint(cname, b.build([root]), root, "le"))
            else:
                neg = b.op(Op.NEG, root)
                dag = b.build([root, neg])
                nonlinear.append(NonlinearConstraint(cname, dag, root, "eq"))
                nonlinear.append(NonlinearConstraint(cname, dag, neg, "eq"))
        else:
            raise ParseError(lineno, f"unknown keyword {kw!r}")
    if name is None:
        raise ParseError(1, "empty instance file")
    inst = Instance(name, tuple(variables), objective, tuple(linear), tuple(nonlinear))
    inst.validate()
    return inst


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return repr(float(v))


def write_instance(inst: Instance) -> str:
    names = [v.name for v in inst.variables]
    out = [f"minlp {inst.name}"]
    for v in inst.variables:
        out.append(f"var {v.name} {_fmt(v.lb)} {_fmt(v.ub)} {'int' if v.is_integer else 'cont'}")
    if inst.objective:
        out.append("obj min : " + " ".join(f"{_fmt(a)} {names[j]}" for j, a in inst.objective))
    for c in inst.linear:
        terms = " ".join(f"{_fmt(a)} {names[j]}" for j, a in c.coefs)
        out.append(f"lin {c.name} {c.sense} {_fmt(c.rhs)} : {terms}".rstrip())
    written: set[int] = set()
    for c in inst.nonlinear:
        if c.origin == "eq":
            if id(c.dag) in written:
                continue
            written.add(id(c.dag))
        sense = "eq" if c.origin == "eq" else "le"
        out.append(f"nl {c.name} {sense} 0 : {format_prefix(c.dag, c.root, names)}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# permutation


def _nl_groups(inst: Instance) -> list[list[int]]:
    groups: list[list[int]] = []
    owner: dict[int, int] = {}
    for i, c in enumerate(inst.nonlinear):
        if c.origin == "eq" and id(c.dag) in owner:
            groups[owner[id(c.dag)]].append(i)
            continue
        owner[id(c.dag)] = len(groups)
        groups.append([i])
    return groups


@dataclass(frozen=True)
class Permutation:
    """``order[k]`` is the old position placed at new position ``k``."""

    variables: tuple[int, ...]
    linear: tuple[int, ...]
    nl_groups: tuple[int, ...]

    def inverse(self) -> "Permutation":
        inv = lambda p: tuple(int(i) for i in np.argsort(p))
        return Permutation(inv(self.variables), inv(self.linear), inv(self.nl_groups))


def make_permutation(inst: Instance, seed: int) -> Permutation:
    ng = len(_nl_groups(inst))
    if seed == 0:
        return Permutation(tuple(range(inst.n)), tuple(range(len(inst.linear))), tuple(range(ng)))
    rng = np.random.default_rng(seed)
    perm = lambda k: tuple(int(i) for i in rng.permutation(k))
    return Permutation(perm(inst.n), perm(len(inst.linear)), perm(ng))


def _remap_dag(dag: ExprDag, new_index: Sequence[int]) -> ExprDag:
    nodes = tuple(
        replace(nd, index=new_index[nd.index]) if nd.op is Op.VAR else nd for nd in dag.nodes
    )
    return ExprDag(nodes, dag.roots)


def apply_permutation(inst: Instance, p: Permutation) -> Instance:
    new_index = [0] * inst.n
    for new, old in enumerate(p.variables):
        new_index[old] = new
    remap = lambda row: tuple((new_index[j], a) for j, a in row)
    variables = tuple(inst.variables[old] for old in p.variables)
    linear = tuple(
        replace(inst.linear[old], coefs=remap(inst.linear[old].coefs)) for old in p.linear
    )
    groups = _nl_groups(inst)
    nonlinear: list[NonlinearConstraint] = []
    for old in p.nl_groups:
        members = [inst.nonlinear[i] for i in groups[old]]
        dag = _remap_dag(members[0].dag, new_index)
        nonlinear.extend(replace(c, dag=dag) for c in members)
    return Instance(inst.name, variables, remap(inst.objective), linear, tuple(nonlinear))


def permute(inst: Instance, seed: int) -> Instance:
    """Seeded reordering of variables and constraints; seed 0 is the identity."""
    if seed == 0:
        return inst
    return apply_permutation(inst, make_permutation(inst, seed))


# ---------------------------------------------------------------------------
# presolve


@dataclass(frozen=True)
class PresolveSummary:
    n_tilde: int
    m_tilde_nonzeros: int
    fixed_variables: int
    rounds: int


_FEAS_TOL = 1e-9
_INT_TOL = 1e-6
_CHANGE_TOL = 1e-9
_MAX_ROUNDS = 10


class _Bounds:
    def __init__(self, lo: np.ndarray, hi: np.ndarray, is_int: np.ndarray):
        self.lo, self.hi, self.is_int = lo, hi, is_int
        self.change = 0.0

    def _gain(self, old: float, new: float) -> float:
        if math.isinf(old):
            return INF
        return abs(new - old) / max(1.0, abs(old))

    def tighten_lo(self, j: int, v: float) -> None:
        if self.is_int[j]:
            v = math.ceil(v - _INT_TOL)
        if v > self.lo[j] and self._gain(self.lo[j], v) > _CHANGE_TOL:
            self.change = max(self.change, self._gain(self.lo[j], v))
            self.lo[j] = v
            self._check(j)

    def tighten_hi(self, j: int, v: float) -> None:
        if self.is_int[j]:
            v = math.floor(v + _INT_TOL)
        if v < self.hi[j] and self._gain(self.hi[j], v) > _CHANGE_TOL:
            self.change = max(self.change, self._gain(self.hi[j], v))
            self.hi[j] = v
            self._check(j)

    def _check(self, j: int) -> None:
        lo, hi = self.lo[j], self.hi[j]
        if lo > hi:
            if lo - hi <= _FEAS_TOL * max(1.0, abs(lo)) and not self.is_int[j]:
                self.lo[j] = self.hi[j] = 0.5 * (lo + hi)
            else:
                raise InfeasibleError(f"empty domain for variable {j}: [{lo}, {hi}]")


def _propagate_row(coefs, rhs: float, bd: _Bounds) -> None:
    """Bound tightening for ``sum a_j x_j <= rhs``."""
    contrib = []
    finite_sum, ninf, inf_j = 0.0, 0, -1
    for j, a in coefs:
        c = a * (bd.lo[j] if a > 0 else bd.hi[j])
        contrib.append(c)
        if math.isinf(c):
            ninf += 1
            inf_j = j
        else:
            finite_sum += c
    if ninf == 0 and finite_sum > rhs + _FEAS_TOL * max(1.0, abs(rhs)):
        raise InfeasibleError(f"row minimum activity {finite_sum} exceeds rhs {rhs}")
    if ninf > 1:
        return
    for (j, a), c in zip(coefs, contrib):
        if ninf == 1:
            if j != inf_j:
                continue
            resid = finite_sum
        else:
            resid = finite_sum - c
        bound = (rhs - resid) / a
        if a > 0:
            bd.tighten_hi(j, bound)
        else:
            bd.tighten_lo(j, bound)


def _idiv(r: Interval, b: Interval) -> Interval | None:
    if b.lo <= 0 <= b.hi or math.isinf(b.lo) or math.isinf(b.hi):
        return None
    q = []
    for u in (r.lo, r.hi):
        for v in (b.lo, b.hi):
            q.append(u / v)
    if any(math.isnan(t) for t in q):
        return None
    return Interval(min(q), max(q))


def _root(v: float, k: int) -> float:
    if math.isinf(v):
        return v
    return math.copysign(abs(v) ** (1.0 / k), v)


def _meet(a: Interval, b: Interval | None) -> Interval:
    if b is None:
        return a
    lo = a.lo if math.isnan(b.lo) else max(a.lo, b.lo)
    hi = a.hi if math.isnan(b.hi) else min(a.hi, b.hi)
    return Interval(lo, hi)


def _propagate_dag(c: NonlinearConstraint, bd: _Bounds) -> None:
    """Forward/backward interval propagation of ``g(x) <= 0`` into variable bounds."""
    dag = c.dag
    box = np.column_stack([bd.lo, bd.hi])
    try:
        fw = node_intervals(dag, box, c.root)
    except DomainError:
        raise InfeasibleError(f"constraint {c.name}: domain empty") from None
    if fw[c.root].lo > _FEAS_TOL * max(1.0, abs(fw[c.root].lo)):
        raise InfeasibleError(f"constraint {c.name} cannot be satisfied")
    iv = list(fw)
    iv[c.root] = _meet(iv[c.root], Interval(-INF, 0.0))
    for i in reversed(dag.reachable(c.root)):
        node = dag.nodes[i]
        r = iv[i]
        if r.lo > r.hi:
            return  # numerical crossing; skip rather than declare infeasible
        ch = node.children
        op = node.op
        if op is Op.VAR:
            if math.isfinite(r.lo):
                bd.tighten_lo(node.index, r.lo)
            if math.isfinite(r.hi):
                bd.tighten_hi(node.index, r.hi)
        elif op is Op.SUM:
            for c_ in ch:
                lo = r.lo - sum(iv[o].hi for o in ch if o != c_)
                hi = r.hi - sum(iv[o].lo for o in ch if o != c_)
                if not (math.isnan(lo) or math.isnan(hi)):
                    iv[c_] = _meet(iv[c_], Interval(lo, hi))
        elif op is Op.SUB:
            a, b = iv[ch[0]], iv[ch[1]]
            iv[ch[0]] = _meet(a, Interval(r.lo + b.lo, r.hi + b.hi))
            iv[ch[1]] = _meet(b, Interval(a.lo - r.hi, a.hi - r.lo))
        elif op is Op.NEG:
            iv[ch[0]] = _meet(iv[ch[0]], Interval(-r.hi, -r.lo))
        elif op is Op.MUL:
            a, b = iv[ch[0]], iv[ch[1]]
            iv[ch[0]] = _meet(a, _idiv(r, b))
            iv[ch[1]] = _meet(b, _idiv(r, iv[ch[0]]))
        elif op is Op.SQUARE or (op is Op.POWK and node.k % 2 == 0):
            k = 2 if op is Op.SQUARE else node.k
            if r.hi < 0:
                raise InfeasibleError(f"constraint {c.name}: even power below zero")
            top = _root(r.hi, k)
            a = iv[ch[0]]
            cand = Interval(-top, top)
            if r.lo > 0:
                bot = _root(r.lo, k)
                if a.lo > -bot:
                    cand = Interval(bot, top)
                elif a.hi < bot:
                    cand = Interval(-top, -bot)
            iv[ch[0]] = _meet(a, cand)
        elif op is Op.POWK:
            iv[ch[0]] = _meet(iv[ch[0]], Interval(_root(r.lo, node.k), _root(r.hi, node.k)))
        elif op is Op.EXP:
            if r.hi <= 0:
                raise InfeasibleError(f"constraint {c.name}: exp bounded above by {r.hi}")
            lo = math.log(r.lo) if r.lo > 0 else -INF
            hi = math.log(r.hi) if math.isfinite(r.hi) else INF
            iv[ch[0]] = _meet(iv[ch[0]], Interval(lo, hi))
        elif op is Op.LOG:
            lo = math.exp(r.lo) if r.lo < 700 else INF
            hi = math.exp(r.hi) if r.hi < 700 else INF
            iv[ch[0]] = _meet(iv[ch[0]], Interval(lo, hi))


def presolve(inst: Instance) -> tuple[Instance, PresolveSummary]:
    """Bound propagation, integer rounding and fixing; at most 10 rounds."""
    is_int = inst.integer_mask()
    bd = _Bounds(inst.bounds()[:, 0].copy(), inst.bounds()[:, 1].copy(), is_int)
    for j in np.flatnonzero(is_int):
        bd.tighten_lo(j, bd.lo[j])
        bd.tighten_hi(j, bd.hi[j])
    rows = [(c.name, list(c.coefs), c.sense, c.rhs) for c in inst.linear]
    rounds = 0
    for rounds in range(1, _MAX_ROUNDS + 1):
        bd.change = 0.0
        for _, coefs, sense, rhs in rows:
            if sense in ("le", "eq"):
                _propagate_row(coefs, rhs, bd)
            if sense in ("ge", "eq"):
                _propagate_row([(j, -a) for j, a in coefs], -rhs, bd)
        for c in inst.nonlinear:
            _propagate_dag(c, bd)
        changed = bd.change > _CHANGE_TOL
        # fix and substitute
        fixed = bd.hi - bd.lo <= _CHANGE_TOL * np.maximum(1.0, np.abs(bd.lo))
        bd.hi[fixed] = bd.lo[fixed]
        new_rows = []
        for name, coefs, sense, rhs in rows:
            keep = []
            for j, a in coefs:
                if fixed[j]:
                    rhs -= a * bd.lo[j]
                    changed = True
                else:
                    keep.append((j, a))
            if not keep:
                tol = 1e-9 * max(1.0, abs(rhs))
                ok = {"le": rhs >= -tol, "ge": rhs <= tol, "eq": abs(rhs) <= tol}[sense]
                if not ok:
                    raise InfeasibleError(f"row {name} violated after fixing")
                continue
            new_rows.append((name, keep, sense, rhs))
        rows = new_rows
        if not changed:
            break
    variables = tuple(
        replace(v, lb=float(bd.lo[j]), ub=float(bd.hi[j])) for j, v in enumerate(inst.variables)
    )
    linear = tuple(LinearConstraint(name, tuple(coefs), sense, float(rhs)) for name, coefs, sense, rhs in rows)
    out = Instance(inst.name, variables, inst.objective, linear, inst.nonlinear)
    n_fixed = sum(v.fixed for v in variables)
    summary = PresolveSummary(
        n_tilde=inst.n - n_fixed,
        m_tilde_nonzeros=sum(len(c.coefs) for c in linear),
        fixed_variables=n_fixed,
        rounds=rounds,
    )
    return out, summary

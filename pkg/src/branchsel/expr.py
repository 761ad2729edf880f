"""Expression DAGs for factorable functions.

Each DAG stores its nodes in topological order (children before parents).
Variable nodes are deduplicated per DAG, so a variable index appears at most
once. Evaluation, natural interval extension and reverse-mode gradients all
walk the node list once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

INF = math.inf


class DomainError(ValueError):
    """Raised when a function is evaluated outside its domain."""


class Op(Enum):
    CONST = "const"
    VAR = "var"
    SUM = "+"
    SUB = "-"
    NEG = "neg"
    MUL = "*"
    SQUARE = "sq"
    POWK = "pow"
    EXP = "exp"
    LOG = "log"


_UNARY = {Op.NEG, Op.EXP, Op.LOG, Op.SQUARE, Op.POWK}
_BINARY = {Op.SUB, Op.MUL}


class Interval(NamedTuple):
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, v: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= v <= self.hi + tol


@dataclass(frozen=True)
class ExprNode:
    op: Op
    children: tuple[int, ...] = ()
    value: float = 0.0  # CONST payload
    index: int = -1  # VAR payload
    k: int = 0  # POWK exponent


@dataclass(frozen=True)
class ExprDag:
    nodes: tuple[ExprNode, ...]
    roots: tuple[int, ...]

    def __post_init__(self):
        seen_vars = set()
        for i, node in enumerate(self.nodes):
            for c in node.children:
                if not 0 <= c < i:
                    raise ValueError(f"node {i}: child {c} breaks topological order")
            nc = len(node.children)
            if node.op in (Op.CONST, Op.VAR) and nc:
                raise ValueError(f"node {i}: leaf with children")
            if node.op in _UNARY and nc != 1:
                raise ValueError(f"node {i}: {node.op.name} needs 1 child")
            if node.op in _BINARY and nc != 2:
                raise ValueError(f"node {i}: {node.op.name} needs 2 children")
            if node.op is Op.SUM and nc < 2:
                raise ValueError(f"node {i}: SUM needs >= 2 children")
            if node.op is Op.CONST and not math.isfinite(node.value):
                raise ValueError(f"node {i}: non-finite constant")
            if node.op is Op.POWK and node.k < 2:
                raise ValueError(f"node {i}: POWK exponent must be >= 2")
            if node.op is Op.VAR:
                if node.index < 0:
                    raise ValueError(f"node {i}: negative variable index")
                if node.index in seen_vars:
                    raise ValueError(f"duplicate variable node for x{node.index}")
                seen_vars.add(node.index)
        for r in self.roots:
            if not 0 <= r < len(self.nodes):
                raise ValueError(f"root {r} out of range")

    @cached_property
    def var_indices(self) -> tuple[int, ...]:
        return tuple(sorted(n.index for n in self.nodes if n.op is Op.VAR))

    @cached_property
    def subtree_vars(self) -> tuple[frozenset[int], ...]:
        """Variable indices below each node."""
        out: list[frozenset[int]] = []
        for node in self.nodes:
            if node.op is Op.VAR:
                out.append(frozenset((node.index,)))
            elif node.children:
                out.append(frozenset().union(*(out[c] for c in node.children)))
            else:
                out.append(frozenset())
        return tuple(out)

    def reachable(self, root: int) -> list[int]:
        """Node indices reachable from ``root`` in topological order."""
        mark = [False] * len(self.nodes)
        mark[root] = True
        for i in range(root, -1, -1):
            if mark[i]:
                for c in self.nodes[i].children:
                    mark[c] = True
        return [i for i, m in enumerate(mark) if m]


class DagBuilder:
    """Incrementally build an ExprDag; variable nodes are shared."""

    def __init__(self):
        self.nodes: list[ExprNode] = []
        self._vars: dict[int, int] = {}

    def _add(self, node: ExprNode) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def const(self, value: float) -> int:
        return self._add(ExprNode(Op.CONST, value=float(value)))

    def var(self, index: int) -> int:
        if index not in self._vars:
            self._vars[index] = self._add(ExprNode(Op.VAR, index=index))
        return self._vars[index]

    def op(self, op: Op, *children: int, k: int = 0) -> int:
        return self._add(ExprNode(op, tuple(children), k=k))

    def build(self, roots: Sequence[int]) -> ExprDag:
        return ExprDag(tuple(self.nodes), tuple(roots))


# ---------------------------------------------------------------------------
# point evaluation


def _safe_exp(v: float) -> float:
    try:
        return math.exp(v)
    except OverflowError:
        return INF


def node_values(dag: ExprDag, x: Sequence[float], upto: int | None = None) -> list[float]:
    """Values of nodes ``0..upto`` at ``x``; raises DomainError."""
    last = len(dag.nodes) - 1 if upto is None else upto
    vals = [0.0] * (last + 1)
    nodes = dag.nodes
    for i in range(last + 1):
        node = nodes[i]
        op = node.op
        ch = node.children
        if op is Op.VAR:
            v = float(x[node.index])
        elif op is Op.CONST:
            v = node.value
        elif op is Op.SUM:
            v = 0.0
            for c in ch:
                v += vals[c]
        elif op is Op.SUB:
            v = vals[ch[0]] - vals[ch[1]]
        elif op is Op.NEG:
            v = -vals[ch[0]]
        elif op is Op.MUL:
            v = vals[ch[0]] * vals[ch[1]]
        elif op is Op.SQUARE:
            v = vals[ch[0]] ** 2
        elif op is Op.POWK:
            try:
                v = vals[ch[0]] ** node.k
            except OverflowError:
                raise DomainError(f"overflow in pow at node {i}") from None
        elif op is Op.EXP:
            v = _safe_exp(vals[ch[0]])
        elif op is Op.LOG:
            a = vals[ch[0]]
            if not a > 0:
                raise DomainError(f"log of non-positive value {a} at node {i}")
            v = math.log(a)
        else:  # pragma: no cover
            raise AssertionError(op)
        if not math.isfinite(v):
            raise DomainError(f"non-finite intermediate at node {i}")
        vals[i] = v
    return vals


def evaluate(dag: ExprDag, root: int, x: Sequence[float]) -> float:
    return node_values(dag, x, root)[root]


def evaluate_batch(dag: ExprDag, root: int, X: np.ndarray) -> np.ndarray:
    """Vectorised evaluation over the rows of ``X``; NaN marks domain errors."""
    X = np.asarray(X, dtype=float)
    vals: list[np.ndarray | None] = [None] * (root + 1)
    need = set(dag.reachable(root))
    with np.errstate(all="ignore"):
        for i in range(root + 1):
            if i not in need:
                continue
            node = dag.nodes[i]
            ch = node.children
            op = node.op
            if op is Op.VAR:
                v = X[:, node.index]
            elif op is Op.CONST:
                v = np.full(X.shape[0], node.value)
            elif op is Op.SUM:
                v = sum(vals[c] for c in ch)
            elif op is Op.SUB:
                v = vals[ch[0]] - vals[ch[1]]
            elif op is Op.NEG:
                v = -vals[ch[0]]
            elif op is Op.MUL:
                v = vals[ch[0]] * vals[ch[1]]
            elif op is Op.SQUARE:
                v = vals[ch[0]] ** 2
            elif op is Op.POWK:
                v = vals[ch[0]] ** node.k
            elif op is Op.EXP:
                v = np.exp(vals[ch[0]])
            else:
                a = vals[ch[0]]
                v = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), np.nan)
            vals[i] = np.where(np.isfinite(v), v, np.nan)
    return vals[root]


def gradient(dag: ExprDag, root: int, x: Sequence[float], n: int | None = None) -> np.ndarray:
    """Reverse-mode gradient with respect to all ``n`` instance variables."""
    vals = node_values(dag, x, root)
    n = len(x) if n is None else n
    adj = [0.0] * (root + 1)
    adj[root] = 1.0
    grad = np.zeros(n)
    for i in range(root, -1, -1):
        a = adj[i]
        if a == 0.0:
            continue
        node = dag.nodes[i]
        ch = node.children
        op = node.op
        if op is Op.VAR:
            grad[node.index] += a
        elif op is Op.SUM:
            for c in ch:
                adj[c] += a
        elif op is Op.SUB:
            adj[ch[0]] += a
            adj[ch[1]] -= a
        elif op is Op.NEG:
            adj[ch[0]] -= a
        elif op is Op.MUL:
            adj[ch[0]] += a * vals[ch[1]]
            adj[ch[1]] += a * vals[ch[0]]
        elif op is Op.SQUARE:
            adj[ch[0]] += a * 2.0 * vals[ch[0]]
        elif op is Op.POWK:
            adj[ch[0]] += a * node.k * vals[ch[0]] ** (node.k - 1)
        elif op is Op.EXP:
            adj[ch[0]] += a * vals[i]
        elif op is Op.LOG:
            adj[ch[0]] += a / vals[ch[0]]
    return grad


# ---------------------------------------------------------------------------
# interval arithmetic


def _mul(a: float, b: float) -> float:
    # 0 * inf = 0 for bound products
    if a == 0.0 or b == 0.0:
        return 0.0
    return a * b


def imul(a: Interval, b: Interval) -> Interval:
    p = (_mul(a.lo, b.lo), _mul(a.lo, b.hi), _mul(a.hi, b.lo), _mul(a.hi, b.hi))
    return Interval(min(p), max(p))


def ipow(a: Interval, k: int) -> Interval:
    def pw(v: float) -> float:
        try:
            return v**k
        except OverflowError:
            return math.copysign(INF, v) if k % 2 else INF

    if k % 2:
        return Interval(pw(a.lo), pw(a.hi))
    if a.lo >= 0:
        return Interval(pw(a.lo), pw(a.hi))
    if a.hi <= 0:
        return Interval(pw(a.hi), pw(a.lo))
    return Interval(0.0, max(pw(a.lo), pw(a.hi)))


def ilog(a: Interval) -> Interval:
    if a.hi <= 0:
        raise DomainError(f"log of interval {tuple(a)} with no positive part")
    lo = math.log(a.lo) if a.lo > 0 else -INF
    hi = math.log(a.hi) if a.hi < INF else INF
    return Interval(lo, hi)


def node_intervals(dag: ExprDag, box, upto: int | None = None) -> list[Interval]:
    """Natural interval extension for nodes ``0..upto`` over ``box``."""
    last = len(dag.nodes) - 1 if upto is None else upto
    out: list[Interval] = [Interval(0.0, 0.0)] * (last + 1)
    for i in range(last + 1):
        node = dag.nodes[i]
        op = node.op
        ch = node.children
        if op is Op.VAR:
            b = box[node.index]
            r = Interval(float(b[0]), float(b[1]))
        elif op is Op.CONST:
            r = Interval(node.value, node.value)
        elif op is Op.SUM:
            lo = hi = 0.0
            for c in ch:
                lo += out[c].lo
                hi += out[c].hi
            r = Interval(lo, hi)
        elif op is Op.SUB:
            a, b = out[ch[0]], out[ch[1]]
            r = Interval(a.lo - b.hi, a.hi - b.lo)
        elif op is Op.NEG:
            a = out[ch[0]]
            r = Interval(-a.hi, -a.lo)
        elif op is Op.MUL:
            r = imul(out[ch[0]], out[ch[1]])
        elif op is Op.SQUARE:
            r = ipow(out[ch[0]], 2)
        elif op is Op.POWK:
            r = ipow(out[ch[0]], node.k)
        elif op is Op.EXP:
            a = out[ch[0]]
            r = Interval(_safe_exp(a.lo), _safe_exp(a.hi))
        elif op is Op.LOG:
            r = ilog(out[ch[0]])
        else:  # pragma: no cover
            raise AssertionError(op)
        out[i] = r
    return out


def interval_eval(dag: ExprDag, root: int, box) -> Interval:
    """Enclosure of ``{f(x) : x in box}``; ``box[i]`` is an (lo, hi) pair."""
    return node_intervals(dag, box, root)[root]


# ---------------------------------------------------------------------------
# structural statistics


@dataclass(frozen=True)
class DagStats:
    operator_node_count: int = 0
    quadratic_operator_node_count: int = 0
    nonlinear_operator_node_count: int = 0
    vars_in_dag: int = 0
    int_vars_in_dag: int = 0
    unbounded_vars_in_dag: int = 0


def _is_nonlinear_op(dag: ExprDag, node: ExprNode) -> bool:
    if node.op is Op.MUL:
        return all(dag.nodes[c].op is not Op.CONST for c in node.children)
    return node.op in (Op.SQUARE, Op.POWK, Op.EXP, Op.LOG)


def _is_quadratic_op(dag: ExprDag, node: ExprNode) -> bool:
    if node.op is Op.SQUARE or (node.op is Op.POWK and node.k == 2):
        return True
    return node.op is Op.MUL and _is_nonlinear_op(dag, node)


def _unique(dags: Iterable[ExprDag]) -> list[ExprDag]:
    seen, out = set(), []
    for d in dags:
        if id(d) not in seen:
            seen.add(id(d))
            out.append(d)
    return out


def dag_stats(dags: Iterable[ExprDag], instance) -> DagStats:
    """Counts over the union of ``dags``; variables are counted once.

    Variables fixed by presolve (lb == ub) are not counted as DAG variables.
    """
    ops = quad = nonlin = 0
    var_ids: set[int] = set()
    for dag in _unique(dags):
        for node in dag.nodes:
            if node.op is Op.VAR:
                var_ids.add(node.index)
            elif node.op is not Op.CONST:
                ops += 1
                if _is_nonlinear_op(dag, node):
                    nonlin += 1
                if _is_quadratic_op(dag, node):
                    quad += 1
    ints = unbnd = nvars = 0
    for j in var_ids:
        v = instance.variables[j]
        if v.lb == v.ub:
            continue
        nvars += 1
        ints += v.is_integer
        unbnd += math.isinf(v.lb) or math.isinf(v.ub)
    return DagStats(ops, quad, nonlin, nvars, ints, unbnd)


def count_quadratic_elements(dags: Iterable[ExprDag]) -> int:
    """Degree-2 monomial occurrences: sq(x), pow(x, 2) and x*y over variables."""
    count = 0
    for dag in _unique(dags):
        for node in dag.nodes:
            kids = [dag.nodes[c].op for c in node.children]
            if node.op is Op.SQUARE or (node.op is Op.POWK and node.k == 2):
                count += kids[0] is Op.VAR
            elif node.op is Op.MUL:
                count += kids[0] is Op.VAR and kids[1] is Op.VAR
    return count


# ---------------------------------------------------------------------------
# prefix notation


_OP_TOKENS = {"+": Op.SUM, "-": Op.SUB, "neg": Op.NEG, "*": Op.MUL, "sq": Op.SQUARE,
              "pow": Op.POWK, "exp": Op.EXP, "log": Op.LOG}


def format_prefix(dag: ExprDag, root: int, names: Sequence[str]) -> str:
    """Render the tree below ``root`` in the instance file's prefix grammar."""
    memo: dict[int, str] = {}
    for i in dag.reachable(root):
        node = dag.nodes[i]
        if node.op is Op.VAR:
            s = names[node.index]
        elif node.op is Op.CONST:
            s = repr(node.value)
        else:
            args = " ".join(memo[c] for c in node.children)
            if node.op is Op.POWK:
                args += f" {node.k}"
            s = f"({node.op.value} {args})"
        memo[i] = s
    return memo[root]

"""Root LP relaxation and outer-approximation / envelope cut separation.

A cut for ``g(x) <= 0`` is ``L(x) <= 0`` where ``L`` is an affine
underestimator of ``g`` over the current box, built bottom-up over the DAG:
tangents for the convex side of an atom, secants for the concave side and
McCormick inequalities for products. Each atom estimator is composed with the
affine bounds of its argument, choosing the under- or over-estimator of the
argument by the sign of the slope, so validity holds on the whole box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .expr import DomainError, ExprDag, Interval, Op, node_intervals
from .instance import Instance
from .lp import Basis, LpModel, LpSolution, LpStatus, lp_add_rows, lp_solve

VIOLATION_TOL = 1e-6
ROUND_LIMIT = 10
BOUND_GUARD = 1e6
_TINY_COEF = 1e-10


class CutOrigin(Enum):
    TANGENT_CONVEX = "tangent_convex"
    SECANT_CONCAVE = "secant_concave"
    MCCORMICK_BILINEAR = "mccormick_bilinear"


@dataclass(frozen=True)
class Cut:
    """``row @ x <= rhs``; ``row`` is dense over the instance variables."""

    row: np.ndarray
    rhs: float
    origin: CutOrigin
    constraint: int = -1

    def violation(self, x) -> float:
        return float(self.row @ np.asarray(x, float) - self.rhs)

    def sparse(self) -> list[tuple[int, float]]:
        return [(int(j), float(self.row[j])) for j in np.flatnonzero(self.row)]


@dataclass
class ConstraintCheck:
    """Separation outcome for one nonlinear constraint at a point."""

    index: int
    violation: float  # g(x), +inf outside the domain
    separable: bool
    cut: Cut | None
    culprits: frozenset[int]  # variables whose box drives the relaxation gap
    gaps: dict[int, float] = field(default_factory=dict)  # estimator gap attributed per culprit
    convex_vars: frozenset[int] = frozenset()  # variables under tangent atoms


# ---------------------------------------------------------------------------
# affine estimators


class _Affine:
    __slots__ = ("a", "c", "origins", "culprits", "convex")

    def __init__(self, a: np.ndarray, c: float, origins=frozenset(), culprits=None, convex=frozenset()):
        self.a, self.c = a, c
        self.origins = origins
        self.culprits: dict[int, float] = culprits or {}
        self.convex = convex

    def at(self, x: np.ndarray) -> float:
        return float(self.a @ x) + self.c

    def scaled(self, s: float, const: float = 0.0) -> "_Affine":
        return _Affine(self.a * s, self.c * s + const, self.origins,
                       {j: g * abs(s) for j, g in self.culprits.items()}, self.convex)

    @staticmethod
    def add(parts: list["_Affine"], signs: list[float]) -> "_Affine":
        a = sum(p.a * s for p, s in zip(parts, signs))
        c = sum(p.c * s for p, s in zip(parts, signs))
        return _Affine(a, c, frozenset().union(*(p.origins for p in parts)),
                       _merge(*(p.culprits for p in parts)), frozenset().union(*(p.convex for p in parts)))


def _merge(*gaps: dict[int, float]) -> dict[int, float]:
    out: dict[int, float] = {}
    for g in gaps:
        for j, v in g.items():
            out[j] = out.get(j, 0.0) + v
    return out


class _Estimator:
    """Memoised under/over affine estimators for one DAG at a point and box."""

    def __init__(self, dag: ExprDag, x: np.ndarray, box, n: int, is_int=None):
        self.dag, self.x, self.n = dag, x, n
        self.is_int = np.zeros(n, bool) if is_int is None else is_int
        self.iv = node_intervals(dag, box)
        self.vals = self._values(x)
        self.memo: dict[tuple[int, bool], _Affine | None] = {}

    def _values(self, x):
        out = []
        for i, node in enumerate(self.dag.nodes):
            ch = node.children
            op = node.op
            try:
                if op is Op.VAR:
                    v = float(x[node.index])
                elif op is Op.CONST:
                    v = node.value
                elif op is Op.SUM:
                    v = sum(out[c] for c in ch)
                elif op is Op.SUB:
                    v = out[ch[0]] - out[ch[1]]
                elif op is Op.NEG:
                    v = -out[ch[0]]
                elif op is Op.MUL:
                    v = out[ch[0]] * out[ch[1]]
                elif op is Op.SQUARE:
                    v = out[ch[0]] ** 2
                elif op is Op.POWK:
                    v = out[ch[0]] ** node.k
                elif op is Op.EXP:
                    v = math.exp(out[ch[0]]) if out[ch[0]] < 700 else math.inf
                else:
                    v = math.log(out[ch[0]]) if out[ch[0]] > 0 else math.nan
            except (OverflowError, TypeError):
                v = math.nan
            out.append(v)
        return out

    def get(self, i: int, under: bool) -> _Affine | None:
        key = (i, under)
        if key not in self.memo:
            self.memo[key] = self._build(i, under)
        return self.memo[key]

    def _compose(self, child: int, slope: float, const: float, under: bool,
                 origin: CutOrigin, gap: float | None) -> _Affine | None:
        """Bound ``const + slope * u`` (u = child value) from the given side.

        ``gap`` is the atom's estimator error at the point; when given, the
        child's variables are recorded as culprits carrying that error.
        """
        if not (math.isfinite(slope) and math.isfinite(const)):
            return None
        if slope == 0.0:
            base = _Affine(np.zeros(self.n), const)
        else:
            need_under = (slope > 0) == under
            inner = self.get(child, need_under)
            if inner is None:
                return None
            base = inner.scaled(slope, const)
        if gap is None:
            convex = base.convex
            if origin is CutOrigin.TANGENT_CONVEX:
                convex = convex | self.dag.subtree_vars[child]
            return _Affine(base.a, base.c, base.origins | {origin}, base.culprits, convex)
        own = {j: abs(gap) for j in self.dag.subtree_vars[child]}
        return _Affine(base.a, base.c, base.origins | {origin}, _merge(base.culprits, own), base.convex)

    def _build(self, i: int, under: bool) -> _Affine | None:
        node = self.dag.nodes[i]
        op, ch = node.op, node.children
        n = self.n
        if op is Op.VAR:
            a = np.zeros(n)
            a[node.index] = 1.0
            return _Affine(a, 0.0)
        if op is Op.CONST:
            return _Affine(np.zeros(n), node.value)
        if op is Op.SUM:
            parts = [self.get(c, under) for c in ch]
            return None if any(p is None for p in parts) else _Affine.add(parts, [1.0] * len(parts))
        if op is Op.SUB:
            p, q = self.get(ch[0], under), self.get(ch[1], not under)
            return None if p is None or q is None else _Affine.add([p, q], [1.0, -1.0])
        if op is Op.NEG:
            p = self.get(ch[0], not under)
            return None if p is None else p.scaled(-1.0)
        if op is Op.MUL:
            return self._product(i, under)
        return self._univariate(i, under)

    def _univariate(self, i: int, under: bool) -> _Affine | None:
        node = self.dag.nodes[i]
        child = node.children[0]
        L, U = self.iv[child]
        u = self.vals[child]
        op = node.op
        if op is Op.SQUARE or op is Op.POWK:
            k = 2 if op is Op.SQUARE else node.k
            f = lambda v: v**k
            df = lambda v: k * v ** (k - 1)
            if k % 2 == 0 or L >= 0:
                convex = True
            elif U <= 0:
                convex = False
            else:
                return None
        elif op is Op.EXP:
            f = df = lambda v: math.exp(v) if v < 700 else math.inf
            convex = True
        else:  # LOG
            f = math.log
            df = lambda v: 1.0 / v
            convex = False
            L = max(L, 0.0)
        tangent_side = under if convex else not under
        if tangent_side:
            if math.isnan(u):
                u = L if math.isfinite(L) else 0.0
            u0 = min(max(u, L), U)
            if op is Op.LOG and u0 <= 0:
                u0 = min(1e-8, U) if U > 0 else 1e-8
            try:
                fu, s = f(u0), df(u0)
            except (OverflowError, ValueError, ZeroDivisionError):
                return None
            return self._compose(child, s, fu - s * u0, under, CutOrigin.TANGENT_CONVEX, None)
        # secant side
        if not (math.isfinite(L) and math.isfinite(U)):
            return None
        if op is Op.LOG and L <= 0:
            return None
        try:
            fL, fU = f(L), f(U)
        except (OverflowError, ValueError):
            return None
        if U - L <= 1e-12:
            return self._compose(child, 0.0, max(fL, fU) if not under else min(fL, fU), under,
                                 CutOrigin.SECANT_CONCAVE, None)
        s = (fU - fL) / (U - L)
        gap = 0.0
        if math.isfinite(self.vals[i]):
            gap = self.vals[i] - (fL + s * (min(max(u, L), U) - L))
        return self._compose(child, s, fL - s * L, under, CutOrigin.SECANT_CONCAVE, gap)

    def _integer_var(self, i: int) -> bool:
        node = self.dag.nodes[i]
        return node.op is Op.VAR and bool(self.is_int[node.index])

    def _product(self, i: int, under: bool) -> _Affine | None:
        ca, cb = self.dag.nodes[i].children
        A, B = self.iv[ca], self.iv[cb]
        # a point-valued factor makes the product linear
        for (p, P), (q, _) in (((ca, A), (cb, B)), ((cb, B), (ca, A))):
            if P.lo == P.hi:
                return self._compose(q, P.lo, 0.0, under, CutOrigin.MCCORMICK_BILINEAR, None)
        if not all(map(math.isfinite, (A.lo, A.hi, B.lo, B.hi))):
            return None
        if under:
            cands = [(A.lo, B.lo), (A.hi, B.hi)]
        else:
            cands = [(A.hi, B.lo), (A.lo, B.hi)]
        best, best_val = None, None
        ua, ub = self.vals[ca], self.vals[cb]
        # fixing an integer factor makes the product exact, so it takes the whole gap
        int_a, int_b = self._integer_var(ca), self._integer_var(cb)
        share_a = 0.0 if int_b and not int_a else 1.0
        share_b = 0.0 if int_a and not int_b else 1.0
        for aa, bb in cands:
            # a*b >= (or <=) bb*a + aa*b - aa*bb; error (a - aa)(b - bb)
            gap = (ua - aa) * (ub - bb) if math.isfinite(ua * ub) else 0.0
            pa = self._compose(ca, bb, 0.0, under, CutOrigin.MCCORMICK_BILINEAR, gap * share_a)
            pb = self._compose(cb, aa, -aa * bb, under, CutOrigin.MCCORMICK_BILINEAR, gap * share_b)
            if pa is None or pb is None:
                continue
            est = _Affine.add([pa, pb], [1.0, 1.0])
            v = est.at(self.x)
            if best is None or (v > best_val if under else v < best_val):
                best, best_val = est, v
        return best


# ---------------------------------------------------------------------------
# separation


_ORIGIN_PRIORITY = (CutOrigin.MCCORMICK_BILINEAR, CutOrigin.SECANT_CONCAVE, CutOrigin.TANGENT_CONVEX)


def _finalize_cut(est: _Affine, box, k: int) -> Cut:
    a = est.a.copy()
    rhs = -est.c
    scale = np.abs(a).max() if a.size else 0.0
    for j in np.flatnonzero((np.abs(a) > 0) & (np.abs(a) < _TINY_COEF * max(scale, 1.0))):
        # drop a negligible term by bounding it, keeping validity
        lo, hi = box[j]
        worst = a[j] * (lo if a[j] > 0 else hi)
        if math.isfinite(worst):
            rhs -= worst
            a[j] = 0.0
    origin = next((o for o in _ORIGIN_PRIORITY if o in est.origins), CutOrigin.TANGENT_CONVEX)
    return Cut(a, float(rhs), origin, k)


def check_constraints(instance: Instance, point, box) -> list[ConstraintCheck]:
    """Violation, cut and culprit variables for every violated constraint."""
    x = np.asarray(point, dtype=float)
    n = instance.n
    is_int = instance.integer_mask()
    out: list[ConstraintCheck] = []
    estimators: dict[int, _Estimator] = {}
    for k, con in enumerate(instance.nonlinear):
        dag = con.dag
        key = id(dag)
        if key not in estimators:
            try:
                estimators[key] = _Estimator(dag, x, box, n, is_int)
            except DomainError:
                out.append(ConstraintCheck(k, math.inf, False, None, dag.subtree_vars[con.root]))
                continue
        est = estimators[key]
        g = est.vals[con.root]
        g = math.inf if math.isnan(g) else g
        if g <= VIOLATION_TOL:
            continue
        aff = est.get(con.root, True)
        if aff is None:
            out.append(ConstraintCheck(k, g, False, None, dag.subtree_vars[con.root]))
            continue
        cut = _finalize_cut(aff, box, k)
        if cut.violation(x) <= VIOLATION_TOL:
            cut = None
        culprits = frozenset(aff.culprits) or dag.subtree_vars[con.root]
        out.append(ConstraintCheck(k, g, True, cut, culprits, dict(aff.culprits), aff.convex))
    return out


def separate_cuts(instance: Instance, point, box) -> list[Cut]:
    return [c.cut for c in check_constraints(instance, point, box) if c.cut is not None]


def cut_coeff_spread(cut: Cut) -> float:
    mags = np.abs(cut.row[cut.row != 0])
    if mags.size == 0:
        raise ValueError("cut has no nonzero coefficient")
    return float(np.log10(mags.max() / mags.min()))


# ---------------------------------------------------------------------------
# root relaxation


@dataclass
class RootRelaxInfo:
    model: LpModel
    cuts_added: list[Cut]
    rounds: int
    lp_solution: LpSolution
    basis: Basis | None = None
    pivots: int = 0
    bounds_history: list[float] = field(default_factory=list)


def lp_bounds(box) -> tuple[np.ndarray, np.ndarray]:
    box = np.asarray(box, dtype=float)
    return np.clip(box[:, 0], -BOUND_GUARD, BOUND_GUARD), np.clip(box[:, 1], -BOUND_GUARD, BOUND_GUARD)


def base_model(instance: Instance, box) -> LpModel:
    n = instance.n
    rows = []
    for c in instance.linear:
        a = np.zeros(n)
        for j, v in c.coefs:
            a[j] = v
        rows.append((a, c.sense, c.rhs))
    lo, hi = lp_bounds(box)
    return LpModel.build(instance.objective_vector(), rows, lo, hi)


def cut_rows(cuts) -> list:
    return [(c.row, "le", c.rhs) for c in cuts]


def build_root_relaxation(instance: Instance, box, round_limit: int = ROUND_LIMIT,
                          pivot_limit: int = 50000) -> RootRelaxInfo:
    model = base_model(instance, box)
    sol, basis = lp_solve(model, None, pivot_limit)
    pivots = sol.pivots
    cuts: list[Cut] = []
    history = [sol.objective]
    rounds = 0
    while sol.status is LpStatus.OPTIMAL and rounds < round_limit:
        new = separate_cuts(instance, sol.x, box)
        if not new:
            break
        rounds += 1
        cuts.extend(new)
        model = lp_add_rows(model, cut_rows(new))
        sol, basis = lp_solve(model, basis, pivot_limit)
        pivots += sol.pivots
        history.append(sol.objective)
    return RootRelaxInfo(model, cuts, rounds, sol, basis, pivots, history)

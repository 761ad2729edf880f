"""LP-based spatial branch-and-bound with selectable integer/spatial priority.

Work is the deterministic effort counter used in place of wall-clock time:
simplex iterations of every LP solved (node LPs, cut rounds and root strong
branching) plus a surcharge of 10 per processed node.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .instance import Instance
from .lp import Basis, LpModel, LpSolution, LpStatus, NumericsError, lp_solve, with_bounds
from .relax import (
    BOUND_GUARD,
    ROUND_LIMIT,
    ConstraintCheck,
    Cut,
    RootRelaxInfo,
    build_root_relaxation,
    check_constraints,
    cut_rows,
    lp_bounds,
)
from .lp import lp_add_rows

log = logging.getLogger(__name__)

INT_TOL = 1e-6
FEAS_TOL = 1e-6
PRUNE_TOL = 1e-7
NODE_WORK = 10
MIN_SPATIAL_WIDTH = 1e-4
SPATIAL_SCORE_FLOOR = 0.01
GAP_EPS = 1e-7
CUT_SHARE = 0.5
SB_K_MAX = 10
SB_PIVOT_CAP = 200
DEFAULT_WORK_LIMIT = 200_000


class BranchRule(Enum):
    PREFER_INT = "preferint"
    MIXED = "mixed"
    PREFER_SPATIAL = "preferspatial"


class CandKind(Enum):
    INTEGER = "INTEGER"
    SPATIAL = "SPATIAL"


class SolveStatus(Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    WORK_LIMIT = "WORK_LIMIT"


class EmptyCandidatesError(ValueError):
    pass


class DegenerateBranchError(ValueError):
    pass


@dataclass
class BranchCandidate:
    var: int
    kind: CandKind
    violation: float
    score: float


@dataclass
class RootSbStats:
    avg_rel_bnd_chng_int: float | None = None
    avg_rel_bnd_chng_spat: float | None = None
    avg_work_int: float | None = None
    avg_work_spat: float | None = None
    spat_entities_fixed: int = 0
    n_int_viols: int = 0
    n_nonlin_viols: int = 0
    pivots: int = 0


@dataclass
class SolveStats:
    status: SolveStatus
    objective: float | None
    work: int
    nodes: int
    root: RootRelaxInfo | None = None
    sb: RootSbStats = field(default_factory=RootSbStats)
    x: np.ndarray | None = None
    dual_bound: float = -math.inf
    pivots: int = 0


def _fractionality(v: float) -> float:
    return min(v - math.floor(v), math.ceil(v) - v)


def detect_candidates(instance: Instance, node_box, lp_solution: LpSolution,
                      checks: list[ConstraintCheck] | None = None,
                      exhausted: bool = False) -> list[BranchCandidate]:
    """Integer candidates (fractional LP values) and spatial candidates.

    Spatial candidates are the variables driving the relaxation gap of each
    nonlinear constraint still violated at the LP point once cutting stops
    paying off there: no violated cut, a cut that removes at most
    ``CUT_SHARE`` of the violation, or ``exhausted``. Integer-typed variables
    qualify only when their LP value is integral.
    """
    x = lp_solution.x
    box = np.asarray(node_box, dtype=float)
    if checks is None:
        checks = check_constraints(instance, x, box)
    cands: dict[int, BranchCandidate] = {}
    is_int = instance.integer_mask()
    for j in np.flatnonzero(is_int):
        f = _fractionality(x[j])
        if f > INT_TOL:
            cands[int(j)] = BranchCandidate(int(j), CandKind.INTEGER, f, f)

    def branchable(j: int) -> bool:
        lo, hi = box[j]
        if is_int[j]:
            return j not in cands and hi - lo >= 1
        return hi - lo > MIN_SPATIAL_WIDTH * (1.0 + abs(x[j]))

    spatial: dict[int, float] = {}
    score: dict[int, float] = {}
    for chk in checks:
        if chk.cut is not None and not exhausted and chk.cut.violation(x) > CUT_SHARE * chk.violation:
            continue  # cutting still removes most of the violation
        viol = 1.0 if math.isinf(chk.violation) else chk.violation / (1.0 + chk.violation)
        gaps = chk.gaps
        pool = [j for j in sorted(chk.culprits) if branchable(j) and gaps.get(j, 1.0) > GAP_EPS]
        top = max((gaps.get(j, 1.0) for j in pool), default=0.0)
        if not pool:
            # the gap sits in tangent atoms; a branch there only buys another cut round
            pool = [j for j in sorted(chk.convex_vars) if branchable(j)]
            top = 0.0
        for j in pool:
            # share of the relaxation gap carried by j, floored so every culprit stays eligible
            w = max(gaps.get(j, 1.0) / top, SPATIAL_SCORE_FLOOR) if top > 0 else SPATIAL_SCORE_FLOOR
            spatial[j] = max(spatial.get(j, 0.0), viol)
            score[j] = max(score.get(j, 0.0), viol * w)
    for j in sorted(spatial):
        if j not in cands:
            cands[j] = BranchCandidate(j, CandKind.SPATIAL, spatial[j], score[j])
    return [cands[j] for j in sorted(cands)]


def root_candidates(instance: Instance, box, sol: LpSolution,
                    checks: list[ConstraintCheck] | None = None) -> list[BranchCandidate]:
    """Candidates after root cutting; cuts that could not be added count as exhausted."""
    cands = detect_candidates(instance, box, sol, checks)
    return cands or detect_candidates(instance, box, sol, checks, exhausted=True)


def _best(cands: list[BranchCandidate]) -> BranchCandidate:
    return min(cands, key=lambda c: (-c.score, c.var))


def select_branching(rule: BranchRule, candidates: list[BranchCandidate]) -> BranchCandidate:
    if not candidates:
        raise EmptyCandidatesError("no branching candidates")
    ints = [c for c in candidates if c.kind is CandKind.INTEGER]
    spat = [c for c in candidates if c.kind is CandKind.SPATIAL]
    if rule is BranchRule.PREFER_INT:
        return _best(ints or spat)
    if rule is BranchRule.PREFER_SPATIAL:
        return _best(spat or ints)
    return _best(candidates)


def branch(node_box, cand: BranchCandidate, lp_solution: LpSolution,
           is_integer: bool | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Split ``node_box`` on ``cand.var``; returns (down, up) boxes."""
    box = np.asarray(node_box, dtype=float)
    j = cand.var
    lo, hi = box[j]
    v = float(lp_solution.x[j])
    down, up = box.copy(), box.copy()
    if cand.kind is CandKind.INTEGER:
        down[j, 1] = math.floor(v)
        up[j, 0] = math.ceil(v)
    else:
        if math.isfinite(lo) and math.isfinite(hi):
            w = hi - lo
            p = min(max(v, lo + 0.2 * w), hi - 0.2 * w)
        else:
            p = max(min(v, BOUND_GUARD), -BOUND_GUARD)
            if math.isfinite(lo):
                p = max(p, lo + 1.0)
            if math.isfinite(hi):
                p = min(p, hi - 1.0)
        integral = is_integer if is_integer is not None else False
        if integral:
            f = math.floor(p)
            if f >= hi:
                f = hi - 1
            down[j, 1], up[j, 0] = f, f + 1
        else:
            down[j, 1], up[j, 0] = p, p
    if np.array_equal(down, box) or np.array_equal(up, box) or down[j, 0] > down[j, 1] or up[j, 0] > up[j, 1]:
        raise DegenerateBranchError(f"branching on variable {j} does not split [{lo}, {hi}]")
    return down, up


def _child_delta(model: LpModel, box: np.ndarray, basis: Basis | None, z: float,
                 pivot_cap: int) -> tuple[float, int, bool]:
    lo, hi = lp_bounds(box)
    try:
        sol, _ = lp_solve(with_bounds(model, lo, hi), basis, pivot_cap)
    except NumericsError:
        return 0.0, 0, False
    if sol.status is LpStatus.INFEASIBLE:
        return 1.0 + abs(z), sol.pivots, True
    if sol.status is LpStatus.OPTIMAL:
        return max(0.0, sol.objective - z), sol.pivots, False
    return 0.0, sol.pivots, False


def strong_branch_root(instance: Instance, root: RootRelaxInfo,
                       candidates: list[BranchCandidate] | None = None, box=None,
                       k_max: int = SB_K_MAX, pivot_cap: int = SB_PIVOT_CAP) -> RootSbStats:
    """Trial-solve both children of the leading root candidates of each kind.

    Candidate scores are overwritten in place with the product of the two
    bound changes, relative to ``(1 + |root objective|)**2``, so the two
    kinds share one scale; candidates not evaluated get score 0.
    """
    box = instance.bounds() if box is None else np.asarray(box, dtype=float)
    sol = root.lp_solution
    if candidates is None:
        candidates = root_candidates(instance, box, sol)
    z = sol.objective
    norm = 1.0 + abs(z)
    is_int = instance.integer_mask()
    stats = RootSbStats(
        n_int_viols=sum(c.kind is CandKind.INTEGER for c in candidates),
        n_nonlin_viols=sum(c.kind is CandKind.SPATIAL for c in candidates),
    )
    for c in candidates:
        c.score = 0.0
    for kind in (CandKind.INTEGER, CandKind.SPATIAL):
        pool = sorted((c for c in candidates if c.kind is kind), key=lambda c: (-c.violation, c.var))
        rel, work = [], []
        for cand in pool[:k_max]:
            try:
                down, up = branch(box, cand, sol, bool(is_int[cand.var]))
            except DegenerateBranchError:
                continue
            d_dn, p_dn, inf_dn = _child_delta(root.model, down, root.basis, z, pivot_cap)
            d_up, p_up, inf_up = _child_delta(root.model, up, root.basis, z, pivot_cap)
            stats.pivots += p_dn + p_up
            work.extend((p_dn, p_up))
            rel.append(min(d_dn, d_up) / norm)
            cand.score = min(1.0, max(d_dn, 1e-8) * max(d_up, 1e-8) / norm**2)
            if kind is CandKind.SPATIAL and inf_dn != inf_up:
                stats.spat_entities_fixed += 1
        if rel:
            avg_rel, avg_work = float(np.mean(rel)), float(np.mean(work))
            if kind is CandKind.INTEGER:
                stats.avg_rel_bnd_chng_int, stats.avg_work_int = avg_rel, avg_work
            else:
                stats.avg_rel_bnd_chng_spat, stats.avg_work_spat = avg_rel, avg_work
    return stats


# ---------------------------------------------------------------------------
# tree search


@dataclass
class _Node:
    box: np.ndarray
    cuts: tuple[Cut, ...]
    bound: float
    basis: Basis | None
    depth: int = 0


def is_feasible_point(instance: Instance, x: np.ndarray, checks: list[ConstraintCheck]) -> bool:
    if checks:
        return False
    is_int = instance.integer_mask()
    return all(_fractionality(x[j]) <= INT_TOL for j in np.flatnonzero(is_int))


class _Search:
    def __init__(self, instance: Instance, rule: BranchRule, work_limit: int):
        self.inst = instance
        self.rule = rule
        self.work_limit = work_limit
        self.is_int = instance.integer_mask()
        self.c = instance.objective_vector()
        self.pivots = 0
        self.sb_pivots = 0
        self.nodes = 0
        self.incumbent: float = math.inf
        self.x_best: np.ndarray | None = None
        self.heap: list = []
        self.counter = 0
        self.base: LpModel | None = None

    @property
    def work(self) -> int:
        return self.pivots + NODE_WORK * self.nodes + self.sb_pivots

    def _prunable(self, bound: float) -> bool:
        return bound >= self.incumbent - PRUNE_TOL

    def _push(self, node: _Node) -> None:
        heapq.heappush(self.heap, (node.bound, self.counter, node))
        self.counter += 1

    def _solve_lp(self, model: LpModel, basis: Basis | None):
        try:
            sol, b = lp_solve(model, basis)
        except NumericsError:
            try:
                sol, b = lp_solve(model, None)
            except NumericsError:
                return None, None
        self.pivots += sol.pivots
        return sol, b

    def _model_for(self, node: _Node) -> LpModel:
        extra = cut_rows(node.cuts)
        model = lp_add_rows(self.base, extra) if extra else self.base
        lo, hi = lp_bounds(node.box)
        return with_bounds(model, lo, hi)

    def _update_incumbent(self, x: np.ndarray) -> None:
        val = float(self.c @ x)
        if val < self.incumbent:
            self.incumbent = val
            self.x_best = x.copy()

    def _branch_children(self, node: _Node, cands, sol: LpSolution, bound: float, basis, cuts) -> None:
        order = list(cands)
        while order:
            cand = select_branching(self.rule, order)
            try:
                down, up = branch(node.box, cand, sol, bool(self.is_int[cand.var]))
            except DegenerateBranchError:
                order.remove(cand)
                continue
            for child in (down, up):
                self._push(_Node(child, cuts, bound, basis, node.depth + 1))
            return
        log.debug("node dropped: no usable branching candidate")

    def run(self) -> SolveStats:
        inst = self.inst
        box = inst.bounds()
        root = build_root_relaxation(inst, box)
        self.pivots += root.pivots
        self.nodes = 1
        sol = root.lp_solution
        sb = RootSbStats()
        if sol.status is not LpStatus.OPTIMAL:
            status = SolveStatus.INFEASIBLE if sol.status is LpStatus.INFEASIBLE else SolveStatus.WORK_LIMIT
            return SolveStats(status, None, self.work, self.nodes, root, sb, pivots=self.pivots)
        self.base = root.model
        checks = check_constraints(inst, sol.x, box)
        cands = root_candidates(inst, box, sol, checks)
        if is_feasible_point(inst, sol.x, checks):
            self._update_incumbent(sol.x)
        elif cands:
            sb = strong_branch_root(inst, root, cands, box)
            self.sb_pivots += sb.pivots
            root_node = _Node(box, (), sol.objective, root.basis)
            self._branch_children(root_node, cands, sol, sol.objective, root.basis, ())
        while self.heap:
            if self.work > self.work_limit:
                return SolveStats(SolveStatus.WORK_LIMIT,
                                  None if self.x_best is None else self.incumbent,
                                  self.work, self.nodes, root, sb, self.x_best,
                                  min(self.heap[0][0], self.incumbent), self.pivots)
            bound, _, node = heapq.heappop(self.heap)
            if self._prunable(bound):
                continue
            self.nodes += 1
            self._process(node)
        status = SolveStatus.OPTIMAL if self.x_best is not None else SolveStatus.INFEASIBLE
        obj = None if self.x_best is None else self.incumbent
        dual = obj if obj is not None else math.inf
        return SolveStats(status, obj, self.work, self.nodes, root, sb, self.x_best, dual, self.pivots)

    def _evaluate(self, node: _Node):
        """LP plus cut rounds at ``node``; (sol, basis, bound, cuts, cands) or None when closed."""
        model = self._model_for(node)
        sol, basis = self._solve_lp(model, node.basis)
        if sol is None or sol.status is LpStatus.INFEASIBLE:
            return None
        if sol.status is not LpStatus.OPTIMAL:
            log.debug("node LP status %s; dropped", sol.status)
            return None
        bound = max(node.bound, sol.objective)
        if self._prunable(bound):
            return None
        cuts = node.cuts
        new = [c.cut for c in check_constraints(self.inst, sol.x, node.box) if c.cut is not None]
        if new:
            cuts = cuts + tuple(new)
            model = lp_add_rows(model, cut_rows(new))
            sol2, basis2 = self._solve_lp(model, basis)
            if sol2 is None:
                return None
            if sol2.status is LpStatus.INFEASIBLE:
                return None
            if sol2.status is LpStatus.OPTIMAL:
                sol, basis = sol2, basis2
                bound = max(bound, sol.objective)
                if self._prunable(bound):
                    return None
        for extra_round in range(ROUND_LIMIT + 1):
            checks = check_constraints(self.inst, sol.x, node.box)
            if is_feasible_point(self.inst, sol.x, checks):
                self._update_incumbent(sol.x)
                return None
            cands = detect_candidates(self.inst, node.box, sol, checks)
            new = [c.cut for c in checks if c.cut is not None]
            if cands or not new or extra_round == ROUND_LIMIT:
                break
            # nothing to branch on yet: keep cutting
            cuts = cuts + tuple(new)
            model = lp_add_rows(model, cut_rows(new))
            sol2, basis2 = self._solve_lp(model, basis)
            if sol2 is None or sol2.status is LpStatus.INFEASIBLE:
                return None
            if sol2.status is not LpStatus.OPTIMAL:
                break
            sol, basis = sol2, basis2
            bound = max(bound, sol.objective)
            if self._prunable(bound):
                return None
        if not cands:
            cands = detect_candidates(self.inst, node.box, sol, checks, exhausted=True)
        if not cands:
            log.debug("unresolvable node at depth %d dropped", node.depth)
            return None
        return sol, basis, bound, cuts, cands

    def _process(self, node: _Node) -> None:
        res = self._evaluate(node)
        if res is not None:
            sol, basis, bound, cuts, cands = res
            self._branch_children(node, cands, sol, bound, basis, cuts)


def solve(instance: Instance, rule: BranchRule, work_limit: int = DEFAULT_WORK_LIMIT) -> SolveStats:
    """Branch-and-bound on a presolved instance with a fixed branching rule."""
    return _Search(instance, rule, work_limit).run()

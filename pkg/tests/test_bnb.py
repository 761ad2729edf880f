from __future__ import annotations

import itertools

import numpy as np
import pytest

from branchsel.bnb import (
    BranchCandidate,
    BranchRule,
    CandKind,
    DegenerateBranchError,
    EmptyCandidatesError,
    SolveStatus,
    branch,
    detect_candidates,
    select_branching,
    solve,
    strong_branch_root,
)
from branchsel.datagen import Family, gen_synthetic
from branchsel.instance import parse_instance
from branchsel.lp import LpSolution, LpStatus
from branchsel.relax import build_root_relaxation
from oracles import minlp_oracle

RULES = list(BranchRule)


def lp_point(*x):
    return LpSolution(LpStatus.OPTIMAL, np.array(x, float), 0.0, 0)


def cand(var, kind, score):
    return BranchCandidate(var, kind, score, score)


# candidates and selection ----------------------------------------------------


def test_integral_point_has_no_candidates():
    inst = parse_instance("minlp a\nvar x 0 3 int\nobj min : 1 x\n")
    assert detect_candidates(inst, inst.bounds(), lp_point(2.0)) == []


def test_fractional_integer_candidate():
    inst = parse_instance("minlp a\nvar x 0 3 int\nobj min : 1 x\n")
    (c,) = detect_candidates(inst, inst.bounds(), lp_point(0.5))
    assert c.kind is CandKind.INTEGER and c.violation == pytest.approx(0.5)


def test_violated_bilinear_gives_spatial_candidates():
    inst = parse_instance("minlp a\nvar x 0 1 cont\nvar y 0 1 cont\nvar t -inf +inf cont\n"
                          "obj min : -1 t\nnl c le 0 : (- t (* x y))\n")
    cands = detect_candidates(inst, inst.bounds(), lp_point(0.5, 0.5, 0.5))
    assert {c.var for c in cands} == {0, 1}
    assert all(c.kind is CandKind.SPATIAL for c in cands)


def test_select_prefer_int_takes_integer():
    cs = [cand(0, CandKind.INTEGER, 0.1), cand(1, CandKind.SPATIAL, 0.9)]
    assert select_branching(BranchRule.PREFER_INT, cs).var == 0
    assert select_branching(BranchRule.PREFER_SPATIAL, cs).var == 1


def test_select_mixed_takes_best_score():
    cs = [cand(0, CandKind.INTEGER, 0.1), cand(1, CandKind.SPATIAL, 0.9)]
    assert select_branching(BranchRule.MIXED, cs).var == 1
    cs[0].score = 0.95
    assert select_branching(BranchRule.MIXED, cs).var == 0


def test_select_falls_back_to_other_kind():
    spat = [cand(3, CandKind.SPATIAL, 0.2)]
    ints = [cand(4, CandKind.INTEGER, 0.2)]
    assert select_branching(BranchRule.PREFER_INT, spat).var == 3
    assert select_branching(BranchRule.PREFER_SPATIAL, ints).var == 4


def test_select_ties_break_on_lowest_index():
    cs = [cand(5, CandKind.SPATIAL, 0.3), cand(2, CandKind.SPATIAL, 0.3)]
    assert select_branching(BranchRule.MIXED, cs).var == 2


def test_select_empty_raises():
    with pytest.raises(EmptyCandidatesError):
        select_branching(BranchRule.MIXED, [])


# branching -----------------------------------------------------------------


def test_integer_branch():
    down, up = branch(np.array([[0.0, 5.0]]), cand(0, CandKind.INTEGER, 0.3), lp_point(2.3))
    assert down.tolist() == [[0.0, 2.0]] and up.tolist() == [[3.0, 5.0]]


@pytest.mark.parametrize("v, point", [(0.5, 0.5), (0.01, 0.2), (0.99, 0.8)])
def test_spatial_branch_point_is_clamped(v, point):
    down, up = branch(np.array([[0.0, 1.0]]), cand(0, CandKind.SPATIAL, 0.1), lp_point(v))
    assert down[0, 1] == pytest.approx(point) and up[0, 0] == pytest.approx(point)


def test_spatial_branch_on_integer_variable_stays_integral():
    down, up = branch(np.array([[0.0, 4.0]]), cand(0, CandKind.SPATIAL, 0.1), lp_point(2.0), True)
    assert down[0, 1] == 2.0 and up[0, 0] == 3.0


def test_spatial_branch_on_half_open_box():
    down, up = branch(np.array([[0.0, np.inf]]), cand(0, CandKind.SPATIAL, 0.1), lp_point(0.0))
    assert down[0, 1] == up[0, 0] == 1.0


def test_degenerate_branch_raises():
    with pytest.raises(DegenerateBranchError):
        branch(np.array([[2.0, 2.0]]), cand(0, CandKind.SPATIAL, 0.1), lp_point(2.0), True)


# whole solves --------------------------------------------------------------

KNAPSACK = """\
minlp knap
var a 0 1 int
var b 0 1 int
var c 0 1 int
var d 0 1 int
obj min : -10 a -13 b -7 c -8 d
lin cap le 10 : 4 a 6 b 3 c 5 d
"""


@pytest.mark.parametrize("rule", RULES)
def test_knapsack_matches_enumeration(rule):
    best = min(
        -10 * a - 13 * b - 7 * c - 8 * d
        for a, b, c, d in itertools.product((0, 1), repeat=4)
        if 4 * a + 6 * b + 3 * c + 5 * d <= 10
    )
    st = solve(parse_instance(KNAPSACK), rule)
    assert st.status is SolveStatus.OPTIMAL and st.objective == pytest.approx(best)


@pytest.mark.parametrize("rule", RULES)
def test_bilinear_square(rule):
    inst = parse_instance("minlp a\nvar x 0 1 cont\nvar y 0 1 cont\nvar t -10 10 cont\n"
                          "obj min : 1 t\nnl c le 0 : (- (neg (* x y)) t)\n")
    st = solve(inst, rule)
    assert st.status is SolveStatus.OPTIMAL
    assert st.objective == pytest.approx(-1.0, abs=1e-6)
    assert st.dual_bound <= st.objective + 1e-9


@pytest.mark.parametrize("rule", RULES)
def test_infeasible_root(rule):
    inst = parse_instance("minlp a\nvar x 0 1 int\nobj min : 1 x\nlin r ge 2 : 1 x\n")
    st = solve(inst, rule)
    assert st.status is SolveStatus.INFEASIBLE and st.nodes == 1


def test_work_limit_status():
    inst = gen_synthetic(Family.BOXQP_INT, 14, 0)
    st = solve(inst, BranchRule.MIXED, work_limit=50)
    assert st.status is SolveStatus.WORK_LIMIT
    assert st.work >= 50


def test_solve_is_deterministic():
    inst = gen_synthetic(Family.MIXED_QP, 10, 2)
    a, b = solve(inst, BranchRule.MIXED), solve(inst, BranchRule.MIXED)
    assert (a.work, a.nodes, a.objective) == (b.work, b.nodes, b.objective)


@pytest.mark.parametrize("family", list(Family))
@pytest.mark.parametrize("seed", [0, 1])
def test_small_instances_match_brute_force(family, seed):
    inst = gen_synthetic(family, 5, seed)
    ref = minlp_oracle(inst)
    for rule in (BranchRule.PREFER_INT, BranchRule.MIXED):
        st = solve(inst, rule)
        assert st.status is SolveStatus.OPTIMAL
        assert st.objective == pytest.approx(ref, abs=1e-3 * (1 + abs(ref)))


# strong branching at the root ------------------------------------------------


def test_strong_branching_fixes_spatial_entity():
    # root LP sits at y = 0.05; the branch point is clamped to 0.2, and the
    # row y <= 0.1 leaves the up child empty
    inst = parse_instance("minlp a\nvar x 0 10 cont\nvar y 0 1 cont\nobj min : 1 x 1 y\n"
                          "lin cap le 0.1 : 1 y\nnl c ge 0.5 : (* x y)\n")
    root = build_root_relaxation(inst, inst.bounds())
    sb = strong_branch_root(inst, root)
    assert sb.n_nonlin_viols >= 1
    assert sb.spat_entities_fixed >= 1
    assert sb.avg_rel_bnd_chng_spat is not None and sb.avg_rel_bnd_chng_int is None


def test_strong_branching_integer_stats():
    inst = gen_synthetic(Family.BILINEAR_KNAPSACK, 10, 1)
    root = build_root_relaxation(inst, inst.bounds())
    sb = strong_branch_root(inst, root)
    assert sb.n_int_viols >= 1
    assert sb.avg_rel_bnd_chng_int >= 0 and sb.avg_work_int >= 0

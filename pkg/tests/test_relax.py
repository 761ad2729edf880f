from __future__ import annotations

import numpy as np
import pytest

from branchsel.datagen import Family, gen_synthetic
from branchsel.instance import parse_instance
from branchsel.lp import LpStatus
from branchsel.relax import (
    Cut,
    CutOrigin,
    build_root_relaxation,
    check_constraints,
    cut_coeff_spread,
    separate_cuts,
)
from oracles import constraint_samples

SQUARE = "minlp a\nvar x -2 3 cont\nvar t -inf +inf cont\nobj min : 1 t\nnl c le 0 : (- (sq x) t)\n"
BILINEAR = "minlp a\nvar x 0 1 cont\nvar y 0 1 cont\nvar t -inf +inf cont\nobj min : -1 t\nnl c le 0 : (- (* x y) t)\n"


def test_tangent_for_convex_square():
    inst = parse_instance(SQUARE)
    (cut,) = separate_cuts(inst, [1.0, 0.0], inst.bounds())
    assert cut.origin is CutOrigin.TANGENT_CONVEX
    assert cut.row.tolist() == [2.0, -1.0] and cut.rhs == 1.0


def test_mccormick_for_bilinear():
    inst = parse_instance(BILINEAR)
    (cut,) = separate_cuts(inst, [1.0, 1.0, 0.0], inst.bounds())
    assert cut.origin is CutOrigin.MCCORMICK_BILINEAR
    assert cut.row.tolist() == [1.0, 1.0, -1.0] and cut.rhs == 1.0
    assert cut.violation([1.0, 1.0, 0.0]) == 1.0


def test_secant_for_concave_term():
    inst = parse_instance("minlp a\nvar x 0 2 cont\nvar t -inf +inf cont\nobj min : 1 t\n"
                          "nl c le 0 : (- (neg (sq x)) t)\n")
    (cut,) = separate_cuts(inst, [1.0, -4.0], inst.bounds())
    assert cut.origin is CutOrigin.SECANT_CONCAVE
    # secant of -x^2 over [0, 2] is -2x, so the cut is -2x - t <= 0
    assert cut.row.tolist() == pytest.approx([-2.0, -1.0]) and cut.rhs == pytest.approx(0.0)


def test_feasible_point_gives_no_cut():
    inst = parse_instance(SQUARE)
    assert separate_cuts(inst, [1.0, 5.0], inst.bounds()) == []
    assert check_constraints(inst, [1.0, 5.0], inst.bounds()) == []


def test_gap_inside_envelope_names_culprits_without_cut():
    # at the box centre the McCormick envelope equals t, so only branching helps
    inst = parse_instance(BILINEAR)
    (chk,) = check_constraints(inst, [0.5, 0.5, 0.0], inst.bounds())
    assert chk.violation == pytest.approx(0.25)
    assert chk.cut is None
    assert chk.culprits == {0, 1}


@pytest.mark.parametrize(
    "row, spread",
    [([1.0, 1.0], 0.0), ([100.0, 1.0], 2.0), ([2.0, -0.5, 1.0], 0.60206)],
)
def test_cut_coeff_spread(row, spread):
    cut = Cut(np.array(row), 0.0, CutOrigin.TANGENT_CONVEX)
    assert cut_coeff_spread(cut) == pytest.approx(spread, abs=1e-5)


def test_cut_coeff_spread_rejects_empty_row():
    with pytest.raises(ValueError):
        cut_coeff_spread(Cut(np.zeros(2), 0.0, CutOrigin.TANGENT_CONVEX))


def test_linear_instance_has_no_cuts():
    inst = parse_instance("minlp a\nvar x 0 4 int\nvar y 0 4 cont\nobj min : -1 x -1 y\n"
                          "lin r le 5.5 : 1 x 2 y\n")
    info = build_root_relaxation(inst, inst.bounds())
    assert info.cuts_added == [] and info.rounds == 0
    assert info.lp_solution.objective == pytest.approx(-4.75)


@pytest.mark.parametrize("family", list(Family))
def test_root_bound_is_monotone(family):
    for seed in range(3):
        inst = gen_synthetic(family, 10, seed)
        info = build_root_relaxation(inst, inst.bounds())
        assert info.lp_solution.status is LpStatus.OPTIMAL
        h = info.bounds_history
        assert all(b >= a - 1e-9 * (1 + abs(a)) for a, b in zip(h, h[1:]))
        assert info.rounds <= 10


@pytest.mark.parametrize("family", list(Family))
def test_root_cuts_are_valid_on_sampled_points(family):
    rng = np.random.default_rng(0)
    for seed in range(2):
        inst = gen_synthetic(family, 8, seed)
        box = inst.bounds()
        info = build_root_relaxation(inst, box)
        assert info.cuts_added
        for cut in info.cuts_added:
            pts = constraint_samples(inst, cut.constraint, box, rng, 400)
            assert len(pts) > 100
            lhs = pts @ cut.row
            tol = 1e-9 * (1 + np.abs(pts) @ np.abs(cut.row) + abs(cut.rhs))
            assert np.all(lhs <= cut.rhs + tol)

from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import linprog

from branchsel.lp import DimensionError, LpModel, LpStatus, lp_add_rows, lp_set_bounds, lp_solve
from oracles import lp_vertex_oracle, random_box_lp


def unit_square():
    return LpModel.build([-1.0, -1.0], [([1.0, 1.0], "le", 1.0)], lo=[0, 0], hi=[1, 1])


def test_simple_optimum():
    sol, _ = lp_solve(unit_square())
    assert sol.status is LpStatus.OPTIMAL
    assert sol.objective == pytest.approx(-1.0, abs=1e-12)


def test_infeasible():
    m = LpModel.build([1.0], [([1.0], "ge", 2.0)], lo=[0], hi=[1])
    assert lp_solve(m)[0].status is LpStatus.INFEASIBLE


def test_unbounded():
    m = LpModel.build([-1.0], [], lo=[0])
    assert lp_solve(m)[0].status is LpStatus.UNBOUNDED


def test_add_cut_then_warm_start():
    m = unit_square()
    _, basis = lp_solve(m)
    cut = lp_add_rows(m, [([1.0, 1.0], "le", 0.5)])
    sol, _ = lp_solve(cut, warm_basis=basis)
    assert sol.objective == pytest.approx(-0.5, abs=1e-12)


def test_fix_bound_keeps_optimum():
    m = unit_square()
    _, basis = lp_solve(m)
    sol, _ = lp_solve(lp_set_bounds(m, 0, (0.3, 0.3)), warm_basis=basis)
    assert sol.objective == pytest.approx(-1.0, abs=1e-12)
    assert sol.x[0] == pytest.approx(0.3)


def test_pivot_counts_are_deterministic():
    rng = np.random.default_rng(3)
    for _ in range(20):
        c, A, senses, b, lo, hi = random_box_lp(rng)
        m = LpModel.build(c, zip(A, senses, b), lo, hi)
        a, b_ = lp_solve(m)[0], lp_solve(m)[0]
        assert a.pivots == b_.pivots and a.status is b_.status


def test_dimension_errors():
    with pytest.raises(DimensionError):
        lp_add_rows(unit_square(), [([1.0], "le", 1.0)])
    with pytest.raises(DimensionError):
        LpModel.build([1.0, 2.0], [], lo=[0.0])
    with pytest.raises(ValueError):
        lp_solve(unit_square(), pivot_limit=0)


def test_iteration_limit_reported():
    rng = np.random.default_rng(5)
    for _ in range(50):
        c, A, senses, b, lo, hi = random_box_lp(rng)
        sol, _ = lp_solve(LpModel.build(c, zip(A, senses, b), lo, hi), pivot_limit=1)
        assert sol.status in (LpStatus.OPTIMAL, LpStatus.INFEASIBLE, LpStatus.ITER_LIMIT)


@pytest.mark.parametrize("seed", range(4))
def test_matches_vertex_oracle_and_highs(seed):
    rng = np.random.default_rng(100 + seed)
    for _ in range(40):
        c, A, senses, b, lo, hi = random_box_lp(rng)
        sol, _ = lp_solve(LpModel.build(c, zip(A, senses, b), lo, hi))
        status, val = lp_vertex_oracle(c, A, senses, b, lo, hi)
        assert sol.status.value == status
        ub = [(A[i], b[i]) if s == "le" else (-A[i], -b[i]) for i, s in enumerate(senses) if s != "eq"]
        eq = [(A[i], b[i]) for i, s in enumerate(senses) if s == "eq"]
        ref = linprog(
            c,
            A_ub=np.array([r for r, _ in ub]) if ub else None,
            b_ub=[v for _, v in ub] if ub else None,
            A_eq=np.array([r for r, _ in eq]) if eq else None,
            b_eq=[v for _, v in eq] if eq else None,
            bounds=list(zip(lo, hi)),
            method="highs",
        )
        assert (ref.status == 0) == (status == "OPTIMAL")
        if status == "OPTIMAL":
            assert sol.objective == pytest.approx(val, abs=1e-6)
            assert ref.fun == pytest.approx(val, abs=1e-6)
            # the returned point is primal feasible
            x = sol.x
            assert np.all(x >= lo - 1e-7) and np.all(x <= hi + 1e-7)
            act = A @ x
            for i, s in enumerate(senses):
                if s == "le":
                    assert act[i] <= b[i] + 1e-7
                elif s == "ge":
                    assert act[i] >= b[i] - 1e-7
                else:
                    assert act[i] == pytest.approx(b[i], abs=1e-7)

"""Dense bounded-variable primal simplex.

Rows ``a x (<=|>=|=) b`` get one slack each, ``a x + s = b``, with slack
bounds encoding the sense. Phase 1 minimises the sum of bound violations of
the basic variables, so any basis (slack or warm) is a valid start.
Pricing is Dantzig with smallest-index ties, switching to Bland's rule after
a run of degenerate pivots. Every iteration (pivot or bound flip) counts as
one unit of work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

FEAS_TOL = 1e-7
OPT_TOL = 1e-9
PIVOT_LIMIT = 50000
_PIV_TOL = 1e-9
_REFACTOR_EVERY = 40
_BLAND_AFTER = 30

# nonbasic/basic status codes
LOWER, UPPER, BASIC, FREE = 0, 1, 2, 3


class LpStatus(Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"
    ITER_LIMIT = "ITER_LIMIT"


class NumericsError(ArithmeticError):
    pass


class DimensionError(ValueError):
    pass


_SLACK_BOUNDS = {"le": (0.0, np.inf), "ge": (-np.inf, 0.0), "eq": (0.0, 0.0)}


@dataclass(frozen=True)
class LpModel:
    objective: np.ndarray
    A: np.ndarray
    senses: tuple[str, ...]
    rhs: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def build(cls, objective, rows=(), lo=None, hi=None) -> "LpModel":
        """``rows`` is an iterable of ``(coefficients, sense, rhs)``."""
        c = np.asarray(objective, dtype=float)
        n = c.size
        rows = list(rows)
        A = np.array([r[0] for r in rows], dtype=float).reshape(len(rows), n)
        senses = tuple(r[1] for r in rows)
        rhs = np.array([r[2] for r in rows], dtype=float)
        lo = np.zeros(n) if lo is None else np.asarray(lo, dtype=float)
        hi = np.full(n, np.inf) if hi is None else np.asarray(hi, dtype=float)
        model = cls(c, A, senses, rhs, lo.copy(), hi.copy())
        model.check()
        return model

    @property
    def n(self) -> int:
        return self.objective.size

    @property
    def m(self) -> int:
        return self.rhs.size

    def check(self) -> None:
        if self.A.shape != (self.m, self.n) or self.lo.shape != (self.n,) or self.hi.shape != (self.n,):
            raise DimensionError("inconsistent LP dimensions")
        if not np.all(np.isfinite(self.rhs)):
            raise ValueError("non-finite rhs")
        if np.any(self.lo > self.hi):
            raise ValueError("column lower bound above upper bound")
        if any(s not in _SLACK_BOUNDS for s in self.senses):
            raise ValueError("unknown row sense")


@dataclass(frozen=True)
class Basis:
    """Status per column (structurals then slacks)."""

    status: tuple[int, ...]
    n: int

    @property
    def m(self) -> int:
        return len(self.status) - self.n


@dataclass
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    pivots: int
    slacks: np.ndarray = field(default_factory=lambda: np.zeros(0))


def lp_add_rows(model: LpModel, rows) -> LpModel:
    rows = list(rows)
    if not rows:
        return model
    A = np.array([r[0] for r in rows], dtype=float)
    if A.ndim != 2 or A.shape[1] != model.n:
        raise DimensionError(f"rows must have {model.n} coefficients")
    rhs = np.array([r[2] for r in rows], dtype=float)
    out = LpModel(model.objective, np.vstack([model.A, A]), model.senses + tuple(r[1] for r in rows),
                  np.concatenate([model.rhs, rhs]), model.lo, model.hi)
    out.check()
    return out


def lp_set_bounds(model: LpModel, var: int, bounds) -> LpModel:
    if not 0 <= var < model.n:
        raise IndexError(f"column {var} out of range")
    lo, hi = float(bounds[0]), float(bounds[1])
    if lo > hi:
        raise ValueError("lo > hi")
    new_lo, new_hi = model.lo.copy(), model.hi.copy()
    new_lo[var], new_hi[var] = lo, hi
    return LpModel(model.objective, model.A, model.senses, model.rhs, new_lo, new_hi)


def with_bounds(model: LpModel, lo: np.ndarray, hi: np.ndarray) -> LpModel:
    return LpModel(model.objective, model.A, model.senses, model.rhs, np.asarray(lo, float), np.asarray(hi, float))


class _Simplex:
    def __init__(self, model: LpModel, basis: Basis | None):
        m, n = model.m, model.n
        self.m, self.n, self.N = m, n, n + m
        self.M = np.hstack([model.A, np.eye(m)])
        self.b = model.rhs
        slo = np.array([_SLACK_BOUNDS[s][0] for s in model.senses])
        shi = np.array([_SLACK_BOUNDS[s][1] for s in model.senses])
        self.lo = np.concatenate([model.lo, slo])
        self.hi = np.concatenate([model.hi, shi])
        self.cost = np.concatenate([model.objective, np.zeros(m)])
        self.pivots = 0
        if basis is None or not self._load(basis):
            self._load(None)

    def _load(self, basis: Basis | None) -> bool:
        n, m, N = self.n, self.m, self.N
        if basis is None:
            status = np.full(N, LOWER)
            status[n:] = BASIC
        else:
            if basis.n != n or basis.m > m:
                return False
            status = np.array(basis.status + (BASIC,) * (m - basis.m))
        basic = np.flatnonzero(status == BASIC)
        if basic.size != m:
            return False
        # repair nonbasic statuses against current bounds
        z = np.zeros(N)
        for j in np.flatnonzero(status != BASIC):
            lo, hi = self.lo[j], self.hi[j]
            st = status[j]
            if st == UPPER and np.isfinite(hi):
                z[j] = hi
            elif np.isfinite(lo):
                status[j], z[j] = LOWER, lo
            elif np.isfinite(hi):
                status[j], z[j] = UPPER, hi
            else:
                status[j], z[j] = FREE, 0.0
        self.status, self.basic, self.z = status, basic, z
        return self._refactor()

    def _refactor(self) -> bool:
        B = self.M[:, self.basic]
        try:
            self.T = np.linalg.solve(B, self.M)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(self.T)):
            return False
        nb = self.status != BASIC
        resid = self.b - self.M[:, nb] @ self.z[nb]
        self.z[self.basic] = np.linalg.solve(B, resid)
        return True

    def basis(self) -> Basis:
        return Basis(tuple(int(s) for s in self.status), self.n)

    def run(self, pivot_limit: int) -> LpStatus:
        since_refactor = 0
        degenerate = 0
        confirmations = 0
        lo, hi = self.lo, self.hi
        while True:
            if since_refactor >= _REFACTOR_EVERY:
                if not self._refactor():
                    raise NumericsError("basis became singular")
                since_refactor = 0
            basic = self.basic
            xB = self.z[basic]
            lB, uB = lo[basic], hi[basic]
            below = xB < lB - FEAS_TOL
            above = xB > uB + FEAS_TOL
            phase1 = bool(below.any() or above.any())
            if phase1:
                cB = above.astype(float) - below.astype(float)
                d = -(cB @ self.T)
            else:
                cB = self.cost[basic]
                d = self.cost - cB @ self.T
            st = self.status
            inc = ((st == LOWER) | (st == FREE)) & (d < -OPT_TOL) & (hi > lo)
            dec = ((st == UPPER) | (st == FREE)) & (d > OPT_TOL) & (hi > lo)
            elig = inc | dec
            if not elig.any():
                # confirm on a fresh factorisation before declaring the outcome
                if since_refactor and confirmations < 3:
                    confirmations += 1
                    if not self._refactor():
                        raise NumericsError("basis became singular")
                    since_refactor = 0
                    continue
                return LpStatus.INFEASIBLE if phase1 else LpStatus.OPTIMAL
            if self.pivots >= pivot_limit:
                return LpStatus.ITER_LIMIT
            cand = np.flatnonzero(elig)
            if degenerate >= _BLAND_AFTER:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            delta = 1.0 if inc[j] else -1.0
            alpha = delta * self.T[:, j]
            ratios = np.full(self.m, np.inf)
            target = np.zeros(self.m)
            decr = alpha > _PIV_TOL
            incr = alpha < -_PIV_TOL
            # decreasing basics
            t1 = np.where(xB > uB + FEAS_TOL, uB, np.where(xB < lB - FEAS_TOL, -np.inf, lB))
            # increasing basics
            t2 = np.where(xB < lB - FEAS_TOL, lB, np.where(xB > uB + FEAS_TOL, np.inf, uB))
            with np.errstate(invalid="ignore", divide="ignore"):
                r1 = (xB - t1) / alpha
                r2 = (t2 - xB) / -alpha
            ok1 = decr & np.isfinite(t1)
            ok2 = incr & np.isfinite(t2)
            ratios[ok1] = r1[ok1]
            target[ok1] = t1[ok1]
            ratios[ok2] = r2[ok2]
            target[ok2] = t2[ok2]
            np.maximum(ratios, 0.0, out=ratios)
            t_flip = hi[j] - lo[j]
            tmin = ratios.min() if self.m else np.inf
            if not np.isfinite(min(tmin, t_flip)):
                if phase1:
                    raise NumericsError("unbounded phase-1 direction")
                return LpStatus.UNBOUNDED
            self.pivots += 1
            since_refactor += 1
            confirmations = 0
            if t_flip <= tmin:
                t = t_flip
                self.z[basic] = xB - t * alpha
                self.z[j] = hi[j] if delta > 0 else lo[j]
                self.status[j] = UPPER if delta > 0 else LOWER
                degenerate = 0
                continue
            ties = np.flatnonzero(ratios <= tmin + 1e-12)
            if degenerate >= _BLAND_AFTER:
                r = int(ties[np.argmin(basic[ties])])
            else:
                mag = np.abs(alpha[ties])
                best = ties[mag >= mag.max() * (1 - 1e-9)]
                r = int(best[np.argmin(basic[best])])
            t = ratios[r]
            degenerate = degenerate + 1 if t <= 1e-12 else 0
            leave = int(basic[r])
            self.z[basic] = xB - t * alpha
            self.z[j] += delta * t
            self.z[leave] = target[r]
            self.status[leave] = LOWER if target[r] == lo[leave] else UPPER
            self.status[j] = BASIC
            self.basic[r] = j
            # tableau update
            T = self.T
            piv = T[r, j]
            T[r] /= piv
            col = T[:, j].copy()
            col[r] = 0.0
            T -= np.outer(col, T[r])


def lp_solve(model: LpModel, warm_basis: Basis | None = None,
             pivot_limit: int = PIVOT_LIMIT) -> tuple[LpSolution, Basis]:
    if pivot_limit < 1:
        raise ValueError("pivot_limit must be >= 1")
    sx = _Simplex(model, warm_basis)
    status = sx.run(pivot_limit)
    x = sx.z[: model.n].copy()
    obj = float(model.objective @ x) if status is LpStatus.OPTIMAL else float("nan")
    sol = LpSolution(status, x, obj, sx.pivots, model.rhs - model.A @ x)
    return sol, sx.basis()

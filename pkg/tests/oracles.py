"""Independent reference solvers used by the tests.

Nothing here calls the package's LP, relaxation or branch-and-bound code;
only the instance/DAG evaluators are shared.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from branchsel.expr import Op, evaluate_batch
from branchsel.instance import Instance


# ---------------------------------------------------------------------------
# LP: brute-force vertex enumeration


def lp_vertex_oracle(c, A, senses, b, lo, hi):
    """Optimum of ``min c x, A x (sense) b, lo <= x <= hi`` over finite boxes.

    A vertex has n independent tight constraints, and no column can use both
    of its bounds, so every vertex arises from k tight rows, k free columns
    and the remaining columns at one of their bounds. All such systems are
    solved in batches. Returns ``(status, value)`` with status "OPTIMAL" or
    "INFEASIBLE".
    """
    c = np.asarray(c, float)
    n = c.size
    A = np.asarray(A, float).reshape(-1, n)
    b = np.asarray(b, float)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    m = len(b)
    best = math.inf
    for k in range(min(m, n) + 1):
        combos = list(itertools.combinations(range(m), k))
        rows = np.array(combos, dtype=int).reshape(len(combos), k)
        bits = np.array(list(itertools.product((0, 1), repeat=n - k)), dtype=bool).reshape(2 ** (n - k), n - k)
        for free in itertools.combinations(range(n), k):
            free = list(free)
            fixed = [j for j in range(n) if j not in free]
            xfix = np.where(bits, hi[fixed], lo[fixed])  # (B, n-k)
            X = np.empty((len(rows), len(bits), n))
            X[:, :, fixed] = xfix[None]
            if k:
                M = A[rows][:, :, free]  # (S, k, k)
                ok = np.abs(np.linalg.det(M)) > 1e-9
                if not ok.any():
                    continue
                rhs = b[rows][:, None, :] - xfix @ A[rows][:, :, fixed].transpose(0, 2, 1)  # (S, B, k)
                sol = np.linalg.solve(M[ok], rhs[ok].transpose(0, 2, 1)).transpose(0, 2, 1)
                X = X[ok]
                X[:, :, free] = sol
            pts = X.reshape(-1, n)
            feas = _lp_feasible(pts, A, senses, b, lo, hi)
            if feas.any():
                best = min(best, float((pts[feas] @ c).min()))
    if best == math.inf:
        return "INFEASIBLE", math.nan
    return "OPTIMAL", best


def random_box_lp(rng: np.random.Generator, max_n: int = 4, max_m: int = 4):
    """LP in a finite box with 1..max_n columns and 1..max_m rows of mixed senses.

    Most are feasible by construction; a fifth get a random rhs. Returns
    ``(c, A, senses, b, lo, hi)``.
    """
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    c = rng.integers(-5, 6, n).astype(float)
    A = rng.integers(-4, 5, (m, n)).astype(float)
    senses = tuple(rng.choice(["le", "ge", "eq"], p=[0.5, 0.35, 0.15]) for _ in range(m))
    lo = rng.integers(-3, 1, n).astype(float)
    hi = lo + rng.integers(1, 5, n)
    if rng.random() < 0.2:
        b = rng.integers(-6, 7, m).astype(float)  # often infeasible
    else:
        # anchor the rows at a half-integral point of the box so it stays feasible
        x0 = np.round(2 * rng.uniform(lo, hi)) / 2
        slack = rng.integers(0, 4, m)
        sign = np.array([{"le": 1, "ge": -1, "eq": 0}[s] for s in senses])
        b = A @ x0 + sign * slack
    return c, A, senses, b, lo, hi


def _lp_feasible(X, A, senses, b, lo, hi, tol=1e-7):
    act = X @ A.T
    ok = np.all(X >= lo - tol, axis=1) & np.all(X <= hi + tol, axis=1)
    for i, s in enumerate(senses):
        if s == "le":
            ok &= act[:, i] <= b[i] + tol
        elif s == "ge":
            ok &= act[:, i] >= b[i] - tol
        else:
            ok &= np.abs(act[:, i] - b[i]) <= tol
    return ok


# ---------------------------------------------------------------------------
# MINLP: integer enumeration x continuous grid, then local polish


@dataclass
class _Epigraph:
    var: int
    con: int
    sign: float  # g = sign * (a(x) - t) with t's coefficient -sign


def _find_epigraph(inst: Instance, cont: list[int]) -> _Epigraph | None:
    c = inst.objective_vector()
    in_linear = {j for row in inst.linear for j, a in row.coefs if a != 0}
    for j in cont:
        if c[j] == 0 or j in in_linear:
            continue
        users = [k for k, con in enumerate(inst.nonlinear) if j in con.dag.subtree_vars[con.root]]
        if len(users) != 1:
            continue
        con = inst.nonlinear[users[0]]
        root = con.dag.nodes[con.root]
        if root.op is not Op.SUB:
            continue
        left, right = (con.dag.nodes[i] for i in root.children)
        if right.op is Op.VAR and right.index == j and j not in con.dag.subtree_vars[root.children[0]]:
            return _Epigraph(j, users[0], 1.0)  # a - t <= 0
        if left.op is Op.VAR and left.index == j and j not in con.dag.subtree_vars[root.children[1]]:
            return _Epigraph(j, users[0], -1.0)  # t - a <= 0
    return None


class MinlpOracle:
    """Global optimum of a tiny MINLP by brute force.

    Integer assignments are enumerated; an epigraph-style continuous
    variable is eliminated analytically; the remaining (at most two)
    continuous variables are gridded and the best grid points polished with
    SLSQP.
    """

    def __init__(self, inst: Instance, grid: int = 41, polish: int = 10, max_assignments: int = 20000):
        self.inst = inst
        self.grid, self.polish = grid, polish
        self.c = inst.objective_vector()
        self.box = inst.bounds()
        self.is_int = inst.integer_mask()
        self.ints = [int(j) for j in np.flatnonzero(self.is_int)]
        cont = [int(j) for j in np.flatnonzero(~self.is_int)]
        self.epi = _find_epigraph(inst, cont)
        self.free = [j for j in cont if self.epi is None or j != self.epi.var]
        if len(self.free) > 2:
            raise ValueError("oracle handles at most two non-eliminated continuous variables")
        ranges = [np.arange(math.ceil(self.box[j, 0]), math.floor(self.box[j, 1]) + 1) for j in self.ints]
        count = int(np.prod([len(r) for r in ranges])) if ranges else 1
        if count > max_assignments:
            raise ValueError(f"{count} integer assignments is too many")
        self.assignments = (np.array(list(itertools.product(*ranges)), dtype=float)
                            if ranges else np.zeros((1, 0)))
        for row in inst.linear:
            if row.sense == "eq" and any(not self.is_int[j] for j, _ in row.coefs):
                raise ValueError("continuous equality rows are not supported")
        for j in self.free:
            if not np.all(np.isfinite(self.box[j])):
                raise ValueError("gridded variables need finite bounds")

    # evaluation -------------------------------------------------------

    def _objective_and_violation(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Objective (epigraph variable set optimally) and max violation per row of X."""
        inst = self.inst
        viol = np.zeros(len(X))
        for row in inst.linear:
            act = sum(a * X[:, j] for j, a in row.coefs) if row.coefs else np.zeros(len(X))
            if row.sense == "le":
                v = act - row.rhs
            elif row.sense == "ge":
                v = row.rhs - act
            else:
                v = np.abs(act - row.rhs)
            viol = np.maximum(viol, v)
        obj = X @ self.c
        for k, con in enumerate(inst.nonlinear):
            g = evaluate_batch(con.dag, con.root, X)
            g = np.where(np.isnan(g), np.inf, g)
            if self.epi is not None and k == self.epi.con:
                continue
            viol = np.maximum(viol, g)
        if self.epi is not None:
            j = self.epi.var
            con = inst.nonlinear[self.epi.con]
            Z = X.copy()
            Z[:, j] = 0.0
            a = self.epi.sign * evaluate_batch(con.dag, con.root, Z)
            a = np.where(np.isnan(a), np.inf * self.epi.sign, a)
            lo, hi = self.box[j]
            cj = self.c[j]
            if self.epi.sign > 0:  # t >= a
                if cj > 0:
                    t = np.maximum(a, lo)
                else:
                    t = np.full(len(X), hi)
                viol = np.maximum(viol, t - hi)
            else:  # t <= a
                if cj < 0:
                    t = np.minimum(a, hi)
                else:
                    t = np.full(len(X), lo)
                viol = np.maximum(viol, lo - t)
            with np.errstate(invalid="ignore"):
                obj = obj + cj * (t - X[:, j])
            obj = np.where(np.isfinite(t), obj, np.inf)
        return obj, viol

    def _points(self, assign: np.ndarray, free_vals: np.ndarray) -> np.ndarray:
        X = np.zeros((len(free_vals), self.inst.n))
        X[:, self.ints] = assign
        if self.free:
            X[:, self.free] = free_vals
        return X

    # search -----------------------------------------------------------

    def _free_lines(self, block: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Lines ``w . y = r`` (one r per assignment) from linear rows and bounds."""
        pos = {j: k for k, j in enumerate(self.free)}
        out = []
        for row in self.inst.linear:
            w = np.zeros(len(self.free))
            r = np.full(len(block), row.rhs)
            for j, a in row.coefs:
                if j in pos:
                    w[pos[j]] += a
                else:
                    r = r - a * block[:, self.ints.index(j)]
            if np.any(w != 0):
                out.append((w, r))
        for k, j in enumerate(self.free):
            e = np.eye(len(self.free))[k]
            out += [(e, np.full(len(block), self.box[j, 0])), (e, np.full(len(block), self.box[j, 1]))]
        return out

    def _candidates(self, block: np.ndarray, G: np.ndarray) -> np.ndarray:
        """Grid points plus points on every line and every pairwise vertex, shape (B, P, d)."""
        B, d = len(block), len(self.free)
        parts = [np.broadcast_to(G, (B, *G.shape))]
        lines = self._free_lines(block)
        axes = [np.linspace(self.box[j, 0], self.box[j, 1], self.grid) for j in self.free]
        for w, r in lines:
            if d == 1:
                parts.append((r / w[0])[:, None, None])
                continue
            for k in range(2):
                o = 1 - k
                if w[o] == 0:
                    continue
                pts = np.empty((B, len(axes[k]), 2))
                pts[:, :, k] = axes[k]
                pts[:, :, o] = (r[:, None] - w[k] * axes[k][None, :]) / w[o]
                parts.append(pts)
        if d == 2:
            for (w1, r1), (w2, r2) in itertools.combinations(lines, 2):
                M = np.array([w1, w2])
                if abs(np.linalg.det(M)) < 1e-12:
                    continue
                parts.append(np.linalg.solve(M, np.stack([r1, r2]))[None].transpose(2, 0, 1).reshape(B, 1, 2))
        out = np.concatenate(parts, axis=1)
        lo, hi = self.box[self.free, 0], self.box[self.free, 1]
        return np.clip(out, lo, hi)

    def solve(self, tol: float = 1e-7) -> float:
        axes = [np.linspace(self.box[j, 0], self.box[j, 1], self.grid) for j in self.free]
        G = np.array(list(itertools.product(*axes))) if axes else np.zeros((1, 0))
        scored = []
        step = max(1, 150000 // (len(G) + 4 * self.grid * (len(self.inst.linear) + 4)))
        for start in range(0, len(self.assignments), step):
            block = self.assignments[start:start + step]
            C = self._candidates(block, G) if self.free else np.zeros((len(block), 1, 0))
            P = C.shape[1]
            pts = np.zeros((len(block) * P, self.inst.n))
            pts[:, self.ints] = np.repeat(block, P, axis=0)
            if self.free:
                pts[:, self.free] = C.reshape(-1, len(self.free))
            obj, viol = self._objective_and_violation(pts)
            obj = np.where(viol <= tol, obj, np.inf)
            per = obj.reshape(len(block), P)
            best_idx = per.argmin(axis=1)
            for a, i in enumerate(best_idx):
                scored.append((float(per[a, i]), start + a, C[a, i]))
        best = min(s[0] for s in scored)
        if not self.free:
            return best
        order = sorted(scored, key=lambda s: s[0])
        for _, a, y0 in order[: self.polish]:
            best = min(best, self._polish(self.assignments[a], y0, tol))
        return best

    def _polish(self, assign: np.ndarray, y0: np.ndarray, tol: float) -> float:
        def fobj(y):
            o, _ = self._objective_and_violation(self._points(assign, y[None, :]))
            return float(o[0]) if math.isfinite(o[0]) else 1e12

        cons = []
        inst = self.inst
        for row in inst.linear:
            if row.sense == "eq":
                continue
            sgn = 1.0 if row.sense == "le" else -1.0

            def lin(y, row=row, sgn=sgn):
                x = self._points(assign, y[None, :])[0]
                return sgn * (row.rhs - sum(a * x[j] for j, a in row.coefs))

            cons.append({"type": "ineq", "fun": lin})
        for k, con in enumerate(inst.nonlinear):
            if self.epi is not None and k == self.epi.con:
                continue

            def nl(y, con=con):
                x = self._points(assign, y[None, :])
                v = evaluate_batch(con.dag, con.root, x)[0]
                return -v if math.isfinite(v) else -1e6

            cons.append({"type": "ineq", "fun": nl})
        bounds = [tuple(self.box[j]) for j in self.free]
        res = minimize(fobj, np.asarray(y0, float), method="SLSQP", bounds=bounds, constraints=cons,
                       options={"ftol": 1e-13, "maxiter": 300})
        y = np.clip(res.x, [b[0] for b in bounds], [b[1] for b in bounds])
        obj, viol = self._objective_and_violation(self._points(assign, y[None, :]))
        return float(obj[0]) if viol[0] <= tol else math.inf


def minlp_oracle(inst: Instance, **kw) -> float:
    return MinlpOracle(inst, **kw).solve()


# ---------------------------------------------------------------------------
# sampling points that satisfy one nonlinear constraint


def _lone_variable(con) -> tuple[int, float] | None:
    """``(j, s)`` when the root is ``a - x_j`` (s=+1) or ``x_j - a`` (s=-1) with j absent from a."""
    root = con.dag.nodes[con.root]
    if root.op is not Op.SUB:
        return None
    left, right = root.children
    for side, other, s in ((right, left, 1.0), (left, right, -1.0)):
        node = con.dag.nodes[side]
        if node.op is Op.VAR and node.index not in con.dag.subtree_vars[other]:
            return node.index, s
    return None


def constraint_samples(inst: Instance, k: int, box, rng: np.random.Generator, count: int,
                       clip: float = 50.0) -> np.ndarray:
    """Up to ``count`` points of ``box`` with ``g_k(x) <= 0``.

    Infinite bounds are clipped to ``+-clip``; about 30% of coordinates sit
    on a bound. If the constraint has a lone
    epigraph-style variable, half the points put it exactly on the surface
    ``g_k = 0``, which is where an invalid cut would show first.
    """
    con = inst.nonlinear[k]
    box = np.clip(np.asarray(box, float), -clip, clip)
    X = rng.uniform(box[:, 0], box[:, 1], size=(count, len(box)))
    # envelope cuts are tight on faces of the box, so snap some coordinates there
    snap = rng.random(X.shape) < 0.3
    X = np.where(snap, np.where(rng.random(X.shape) < 0.5, box[:, 0], box[:, 1]), X)
    lone = _lone_variable(con)
    if lone is not None:
        j, s = lone
        Z = X.copy()
        Z[:, j] = 0.0
        a = s * evaluate_batch(con.dag, con.root, Z)  # surface value of x_j
        slack = np.where(rng.random(count) < 0.5, 0.0, rng.exponential(1.0, count))
        X[:, j] = np.clip(a + s * slack, box[j, 0], box[j, 1])
    g = evaluate_batch(con.dag, con.root, X)
    return X[np.nan_to_num(g, nan=np.inf) <= 0.0]

"""Dense bounded-variable simplex.

Problems are small (a few hundred columns at most) and every structural
variable lives in a finite box, so a dense tableau is used throughout.
Cold solves run a two-phase primal simplex; :class:`Simplex` instances can
afterwards be copied, have variable bounds changed and be re-optimised with
the dual simplex, which is how branch-and-bound reuses parent solutions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

LE, EQ, GE = -1, 0, 1
FEAS_TOL = 1e-7
_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9
_REFACTOR_EVERY = 60
_BLAND_AFTER = 1000

BASIC, AT_LOWER, AT_UPPER = 0, -1, 1

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"


class LpError(RuntimeError):
    """Numerical stall (iteration cap exceeded) or an ill-posed problem."""


@dataclass
class LpProblem:
    """``min/max c.x`` s.t. ``A x (<=,=,>=) b`` and ``lo <= x <= hi``.

    ``senses`` holds -1 for <=, 0 for =, +1 for >=.
    """

    c: np.ndarray
    A: np.ndarray
    senses: np.ndarray
    b: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    maximize: bool = False

    def __post_init__(self) -> None:
        self.c = np.asarray(self.c, dtype=float)
        n = len(self.c)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.senses = np.asarray(self.senses, dtype=int).reshape(-1)
        self.lo = np.asarray(self.lo, dtype=float).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=float).reshape(-1)
        m = self.A.shape[0]
        if self.b.shape != (m,) or self.senses.shape != (m,):
            raise LpError("constraint data has inconsistent shapes")
        if self.lo.shape != (n,) or self.hi.shape != (n,):
            raise LpError("bound vectors must match the number of variables")
        if not (np.isfinite(self.lo).all() and np.isfinite(self.hi).all()):
            raise LpError("every variable needs finite bounds")
        if not np.isin(self.senses, (LE, EQ, GE)).all():
            raise LpError("senses must be -1, 0 or +1")

    def violation(self, x: np.ndarray) -> float:
        """Largest bound or row violation of ``x``."""
        r = self.A @ x - self.b
        row = np.where(self.senses == LE, np.maximum(r, 0),
                       np.where(self.senses == GE, np.maximum(-r, 0), np.abs(r)))
        box = np.maximum(self.lo - x, 0) + np.maximum(x - self.hi, 0)
        return float(max(row.max(initial=0.0), box.max(initial=0.0)))


@dataclass
class LpSolution:
    status: str
    objective: float = float("nan")
    x: np.ndarray | None = None
    infeasibility: float = 0.0
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class Simplex:
    """Tableau state for one LP; cheap to :meth:`copy` for warm starts.

    Columns are the free structural variables (fixed ones are folded into the
    right-hand side at construction), then one slack per inequality row, then
    one artificial per row that needed it for phase 1.
    """

    T: np.ndarray              # B^-1 [A_free | S | R]
    x: np.ndarray              # value of every column
    lo: np.ndarray
    hi: np.ndarray
    cost: np.ndarray           # minimisation cost of every column
    basis: np.ndarray          # column basic in each row
    state: np.ndarray          # BASIC / AT_LOWER / AT_UPPER per column
    free: np.ndarray           # original index of each free structural column
    fixed_value: np.ndarray    # value of every original variable
    A_full: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    n_slack: int = 0
    n_art: int = 0
    sign: float = 1.0          # -1 for maximisation
    obj_const: float = 0.0     # objective contribution of eliminated variables
    iterations: int = 0
    since_refactor: int = 0

    @classmethod
    def from_problem(cls, p: LpProblem) -> Simplex:
        m, n = p.A.shape
        fixed = p.lo == p.hi
        free = np.flatnonzero(~fixed)
        rhs = p.b - p.A[:, fixed] @ p.lo[fixed]
        A_free = p.A[:, free]
        x_free = p.lo[free].copy()
        resid = rhs - A_free @ x_free

        ineq = np.flatnonzero(p.senses != EQ)
        ns = len(ineq)
        S = np.zeros((m, ns))
        S[ineq, np.arange(ns)] = 1.0
        s_lo = np.where(p.senses[ineq] == LE, 0.0, -np.inf)
        s_hi = np.where(p.senses[ineq] == LE, np.inf, 0.0)
        s_val = resid[ineq]
        ok = (s_val >= s_lo) & (s_val <= s_hi)
        s_x = np.where(ok, s_val, np.where(s_val < s_lo, s_lo, s_hi))

        slack_of_row = np.full(m, -1)
        slack_of_row[ineq] = np.arange(ns)
        need_art = np.ones(m, dtype=bool)
        need_art[ineq[ok]] = False
        art_rows = np.flatnonzero(need_art)
        na = len(art_rows)
        srow = slack_of_row[art_rows]
        s_pad = np.append(s_x, 0.0)  # index -1 -> 0 for rows without a slack
        art_resid = resid[art_rows] - s_pad[srow]
        art_sign = np.where(art_resid >= 0, 1.0, -1.0)
        R = np.zeros((m, na))
        R[art_rows, np.arange(na)] = art_sign

        nf = len(free)
        A_full = np.hstack([A_free, S, R])
        lo = np.concatenate([p.lo[free], s_lo, np.zeros(na)])
        hi = np.concatenate([p.hi[free], s_hi, np.full(na, np.inf)])
        x = np.concatenate([x_free, s_x, np.abs(art_resid)])
        sign = -1.0 if p.maximize else 1.0
        cost = np.concatenate([sign * p.c[free], np.zeros(ns + na)])

        state = np.full(nf + ns + na, AT_LOWER, dtype=int)
        state[nf:nf + ns][(~ok) & (s_x == s_hi)] = AT_UPPER
        basis = np.empty(m, dtype=int)
        basis[ineq[ok]] = nf + np.flatnonzero(ok)
        basis[art_rows] = nf + ns + np.arange(na)
        state[basis] = BASIC
        diag = np.ones(m)
        diag[art_rows] = art_sign
        T = A_full / diag[:, None]
        return cls(T=T, x=x, lo=lo, hi=hi, cost=cost, basis=basis, state=state, free=free,
                   fixed_value=p.lo.copy(), A_full=A_full, rhs=rhs, n_slack=ns, n_art=na,
                   sign=sign, obj_const=float(p.c[fixed] @ p.lo[fixed]))

    def copy(self) -> Simplex:
        return Simplex(T=self.T.copy(), x=self.x.copy(), lo=self.lo.copy(), hi=self.hi.copy(),
                       cost=self.cost, basis=self.basis.copy(), state=self.state.copy(),
                       free=self.free, fixed_value=self.fixed_value, A_full=self.A_full,
                       rhs=self.rhs, n_slack=self.n_slack, n_art=self.n_art, sign=self.sign,
                       obj_const=self.obj_const, iterations=self.iterations,
                       since_refactor=self.since_refactor)

    @property
    def n_free(self) -> int:
        return len(self.free)

    def _cap(self) -> int:
        m, n = self.T.shape
        return 50 * (m + n)

    def solve(self) -> LpSolution:
        """Two-phase primal simplex from the construction basis."""
        if self.n_art:
            art = np.arange(self.n_free + self.n_slack, self.T.shape[1])
            phase1 = np.zeros(self.T.shape[1])
            phase1[art] = 1.0
            self._primal(phase1)
            infeas = float(self.x[art].sum())
            if infeas > FEAS_TOL:
                return LpSolution(INFEASIBLE, infeasibility=infeas, iterations=self.iterations)
            self.hi[art] = 0.0
            nb = art[self.state[art] != BASIC]
            self.x[nb] = 0.0
            self.state[nb] = AT_LOWER
        self._primal(self.cost)
        return self._finish()

    def reoptimize(self) -> LpSolution:
        """Dual simplex after bound changes; needs a dual-feasible basis."""
        if self._dual(self.cost) == INFEASIBLE:
            return LpSolution(INFEASIBLE, iterations=self.iterations)
        self._primal(self.cost)
        return self._finish()

    def set_objective(self, c: np.ndarray, maximize: bool = False) -> None:
        """Replace the structural objective; follow with :meth:`resolve`."""
        c = np.asarray(c, dtype=float)
        self.sign = -1.0 if maximize else 1.0
        cost = np.zeros(self.T.shape[1])
        cost[: self.n_free] = self.sign * c[self.free]
        self.cost = cost
        fixed = np.ones(len(c), dtype=bool)
        fixed[self.free] = False
        self.obj_const = float(c[fixed] @ self.fixed_value[fixed])

    def resolve(self) -> LpSolution:
        """Primal simplex from the current primal-feasible basis."""
        self._primal(self.cost)
        return self._finish()

    def set_bounds(self, var: int, lo: float, hi: float) -> None:
        """Change the bounds of original structural variable ``var``."""
        pos = int(np.searchsorted(self.free, var))
        if pos >= self.n_free or self.free[pos] != var:
            raise LpError(f"variable {var} was eliminated as fixed")
        self.lo[pos], self.hi[pos] = lo, hi
        if self.state[pos] != BASIC:
            new = lo if self.state[pos] == AT_LOWER else hi
            step = new - self.x[pos]
            if step:
                self.x[self.basis] -= self.T[:, pos] * step
                self.x[pos] = new

    def structural(self) -> np.ndarray:
        out = self.fixed_value.copy()
        out[self.free] = self.x[: self.n_free]
        return out

    def _finish(self) -> LpSolution:
        self._refactor()
        if self._primal_infeasibility() > FEAS_TOL:
            if self._dual(self.cost) == INFEASIBLE:
                return LpSolution(INFEASIBLE, iterations=self.iterations)
            self._refactor()
        xs = self.x[: self.n_free]
        obj = self.sign * float(self.cost[: self.n_free] @ xs) + self.obj_const
        return LpSolution(OPTIMAL, obj, self.structural(), iterations=self.iterations)

    def _primal_infeasibility(self) -> float:
        xb = self.x[self.basis]
        return float(max(np.max(self.lo[self.basis] - xb, initial=0.0),
                         np.max(xb - self.hi[self.basis], initial=0.0)))

    def _refactor(self) -> None:
        B = self.A_full[:, self.basis]
        try:
            self.T = np.linalg.solve(B, self.A_full)
            nb = self.state != BASIC
            self.x[self.basis] = np.linalg.solve(B, self.rhs - self.A_full[:, nb] @ self.x[nb])
        except np.linalg.LinAlgError:
            raise LpError("singular basis") from None
        self.since_refactor = 0

    def _pivot(self, r: int, j: int) -> None:
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = j
        self.state[j] = BASIC
        self.iterations += 1
        self.since_refactor += 1
        if self.iterations > self._cap():
            raise LpError("numerical stall: iteration cap exceeded")

    def _maybe_refactor(self) -> None:
        if self.since_refactor >= _REFACTOR_EVERY:
            self._refactor()

    def _primal(self, cost: np.ndarray) -> None:
        degenerate = 0
        bland = False
        lo, hi = self.lo, self.hi
        movable = hi > lo
        st = self.state
        while True:
            d = cost - cost[self.basis] @ self.T
            elig = movable & (((st == AT_LOWER) & (d < -_COST_TOL)) |
                              ((st == AT_UPPER) & (d > _COST_TOL)))
            cand = np.flatnonzero(elig)
            if not len(cand):
                return
            j = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            sgn = 1.0 if st[j] == AT_LOWER else -1.0
            g = sgn * self.T[:, j]
            xb = self.x[self.basis]
            lb, ub = lo[self.basis], hi[self.basis]
            t = np.full(len(g), np.inf)
            dec = g > _PIVOT_TOL
            inc = g < -_PIVOT_TOL
            t[dec] = (xb[dec] - lb[dec]) / g[dec]
            t[inc] = (ub[inc] - xb[inc]) / (-g[inc])
            np.maximum(t, 0.0, out=t)
            t_flip = hi[j] - lo[j]
            tmin = t.min(initial=np.inf)
            if t_flip <= tmin:
                if not np.isfinite(t_flip):
                    raise LpError("unbounded direction in a box-bounded problem")
                self.x[self.basis] = xb - t_flip * g
                if sgn > 0:
                    self.x[j], st[j] = hi[j], AT_UPPER
                else:
                    self.x[j], st[j] = lo[j], AT_LOWER
                continue
            ties = np.flatnonzero(t <= tmin + 1e-12)
            if bland:
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                r = int(ties[np.argmax(np.abs(g[ties]))])
            leaving = int(self.basis[r])
            self.x[self.basis] = xb - tmin * g
            self.x[j] += sgn * tmin
            if g[r] > 0:
                self.x[leaving], new_state = lo[leaving], AT_LOWER
            else:
                self.x[leaving], new_state = hi[leaving], AT_UPPER
            self._pivot(r, j)
            st[leaving] = new_state
            self._maybe_refactor()
            if tmin <= 1e-12:
                degenerate += 1
                if degenerate > _BLAND_AFTER:
                    bland = True
            else:
                degenerate = 0

    def _dual(self, cost: np.ndarray) -> str:
        lo, hi = self.lo, self.hi
        movable = hi > lo
        st = self.state
        while True:
            xb = self.x[self.basis]
            below = lo[self.basis] - xb
            above = xb - hi[self.basis]
            viol = np.maximum(below, above)
            r = int(np.argmax(viol))
            if viol[r] <= FEAS_TOL:
                return OPTIMAL
            row = self.T[r]
            if below[r] > 0:
                bound = lo[self.basis[r]]
                elig = movable & (((st == AT_LOWER) & (row < -_PIVOT_TOL)) |
                                  ((st == AT_UPPER) & (row > _PIVOT_TOL)))
            else:
                bound = hi[self.basis[r]]
                elig = movable & (((st == AT_LOWER) & (row > _PIVOT_TOL)) |
                                  ((st == AT_UPPER) & (row < -_PIVOT_TOL)))
            cand = np.flatnonzero(elig)
            if not len(cand):
                return INFEASIBLE
            d = cost[cand] - cost[self.basis] @ self.T[:, cand]
            ratio = np.abs(d) / np.abs(row[cand])
            ties = cand[ratio <= ratio.min() + 1e-12]
            j = int(ties[np.argmax(np.abs(row[ties]))])
            leaving = int(self.basis[r])
            step = (xb[r] - bound) / row[j]
            self.x[self.basis] = xb - step * self.T[:, j]
            self.x[j] += step
            self.x[leaving] = bound
            self._pivot(r, j)
            st[leaving] = AT_LOWER if below[r] > 0 else AT_UPPER
            self._maybe_refactor()


def lp_solve(problem: LpProblem) -> LpSolution:
    """Cold-solve ``problem`` with the two-phase bounded primal simplex."""
    if problem.A.shape[0] == 0:
        c = problem.c * (-1.0 if problem.maximize else 1.0)
        x = np.where(c < 0, problem.hi, problem.lo)
        return LpSolution(OPTIMAL, float(problem.c @ x), x)
    return Simplex.from_problem(problem).solve()

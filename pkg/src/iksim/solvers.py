"""Self-contained dense solvers.

* :func:`solve_qp` - primal active-set method for convex QPs with two-sided
  rows and variable bounds. Supports warm starts (previous solution and
  working set), which the controllers exploit heavily.
* :func:`solve_nlp` / :func:`solve_sqp` - SQP with a damped-BFGS Hessian
  approximation and an L1-merit line search; the QP subproblems reuse the
  active-set solver.

Conventions: the QP objective is ``0.5 x'Hx + g'x``; equality rows are
encoded as ``lb == ub``. Tolerances: feasibility 1e-8, stationarity 1e-8,
NLP KKT 1e-6.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from .exprgraph import Expr, VarSymbol

__all__ = [
    "QuadraticProgram",
    "NonlinearProgram",
    "SolveResult",
    "solve_qp",
    "solve_nlp",
    "solve_sqp",
    "FEAS_TOL",
    "STAT_TOL",
    "NLP_KKT_TOL",
]

FEAS_TOL = 1e-8
STAT_TOL = 1e-8
NLP_KKT_TOL = 1e-6
_STEP_TOL = 1e-11


@dataclass
class QuadraticProgram:
    """min 0.5 x'Hx + g'x  s.t.  lb_A <= Ax <= ub_A, lb_x <= x <= ub_x."""

    H: np.ndarray
    g: np.ndarray
    A: np.ndarray | None = None
    lb_A: np.ndarray | None = None
    ub_A: np.ndarray | None = None
    lb_x: np.ndarray | None = None
    ub_x: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {self.H.shape}")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-10:
            raise ValueError("H must be symmetric to 1e-10")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.lb_A = np.zeros(0)
            self.ub_A = np.zeros(0)
        else:
            self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
            self.lb_A = np.asarray(self.lb_A, dtype=float).ravel()
            self.ub_A = np.asarray(self.ub_A, dtype=float).ravel()
            if self.lb_A.size != self.A.shape[0] or self.ub_A.size != self.A.shape[0]:
                raise ValueError("constraint bounds do not match A")
        self.lb_x = (np.full(n, -np.inf) if self.lb_x is None
                     else np.asarray(self.lb_x, dtype=float).ravel())
        self.ub_x = (np.full(n, np.inf) if self.ub_x is None
                     else np.asarray(self.ub_x, dtype=float).ravel())
        if self.lb_x.size != n or self.ub_x.size != n:
            raise ValueError("variable bounds do not match x")
        if np.any(self.lb_A > self.ub_A + 1e-12) or np.any(self.lb_x > self.ub_x + 1e-12):
            raise ValueError("lower bounds must not exceed upper bounds")

    @property
    def n(self) -> int:
        return self.g.size


@dataclass
class NonlinearProgram:
    """min cost(x)  s.t.  lb_i <= g_i(x) <= ub_i, all functions of `decision`."""

    decision: VarSymbol
    cost: Expr
    constraints: list[tuple[Expr, np.ndarray, np.ndarray]] = field(default_factory=list)
    x0: np.ndarray | None = None


@dataclass
class SolveResult:
    x_star: np.ndarray
    objective: float
    status: str  # optimal | max-iterations | infeasible | line-search-failure
    iterations: int
    kkt_residual: float
    multipliers: np.ndarray | None = None
    working_set: tuple | None = None


def _row_violation(R, rlb, rub, x):
    rx = R @ x
    return np.maximum(np.maximum(rlb - rx, rx - rub), 0.0)


def _kkt_solve(H, C, rhs_top, rhs_bot):
    n = H.shape[0]
    w = C.shape[0]
    K = np.zeros((n + w, n + w))
    K[:n, :n] = H
    if w:
        K[:n, n:] = C.T
        K[n:, :n] = C
    rhs = np.concatenate([rhs_top, rhs_bot])
    try:
        sol = np.linalg.solve(K, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _active_set_core(H, g, R, rlb, rub, x, W, max_iterations):
    """Primal active-set loop. x must be feasible; W holds (row, side) pairs
    with side 0 for equality rows (never dropped), -1 lower, +1 upper."""
    m = R.shape[0]
    eq = rub - rlb <= 1e-12
    iters = 0
    Wrows = [w[0] for w in W]
    while iters < max_iterations:
        iters += 1
        C = R[Wrows] if Wrows else np.zeros((0, x.size))
        p, lam = _kkt_solve(H, C, -(H @ x + g), np.zeros(len(Wrows)))
        if np.max(np.abs(p), initial=0.0) <= _STEP_TOL:
            # stationary on the working set: verify multiplier signs
            worst, worst_k = -1e-10, -1
            for k, (row, side) in enumerate(W):
                if side == 0:
                    continue
                bad = -lam[k] if side > 0 else lam[k]
                if bad > worst:
                    worst, worst_k = bad, k
            if worst_k < 0:
                x, lam = _polish(H, g, R, rlb, rub, x, W, lam)
                mult = np.zeros(m)
                for k, (row, side) in enumerate(W):
                    mult[row] = lam[k]
                return x, W, mult, iters, "optimal"
            del W[worst_k]
            del Wrows[worst_k]
            continue
        # ratio test against rows not in the working set
        in_w = set(Wrows)
        alpha, blocking = 1.0, None
        rx = R @ x
        rp = R @ p
        for row in range(m):
            if row in in_w:
                continue
            if rp[row] > 1e-12 and np.isfinite(rub[row]):
                limit = (rub[row] - rx[row]) / rp[row]
                side = 1
            elif rp[row] < -1e-12 and np.isfinite(rlb[row]):
                limit = (rlb[row] - rx[row]) / rp[row]
                side = -1
            else:
                continue
            if limit < alpha:
                alpha, blocking = max(limit, 0.0), (row, 0 if eq[row] else side)
        x = x + alpha * p
        if blocking is not None:
            W.append(blocking)
            Wrows.append(blocking[0])
        elif alpha >= 1.0:
            # full step taken with nothing blocking; loop to re-check optimality
            continue
    mult = np.zeros(m)
    C = R[Wrows] if Wrows else np.zeros((0, x.size))
    _, lam = _kkt_solve(H, C, -(H @ x + g), np.zeros(len(Wrows)))
    for k, (row, side) in enumerate(W):
        mult[row] = lam[k]
    return x, W, mult, iters, "max-iterations"


def _polish(H, g, R, rlb, rub, x, W, lam):
    """Re-solve the equality-constrained QP on the final working set in
    absolute form; step-based iterates accumulate ~1e-7 drift off the
    active bounds."""
    if not W:
        return x, lam
    rows = [w[0] for w in W]
    C = R[rows]
    b = np.array([rlb[row] if side <= 0 else rub[row] for row, side in W])
    x_p, lam_p = _kkt_solve(H, C, -g, b)
    ok = (np.all(np.isfinite(x_p))
          and np.max(_row_violation(R, rlb, rub, x_p), initial=0.0)
          <= np.max(_row_violation(R, rlb, rub, x), initial=0.0) + 1e-12)
    if ok:
        return x_p, lam_p
    return x, lam


def _phase1(R, rlb, rub, x_guess):
    """Find a feasible point by minimizing squared elastic slacks."""
    n = x_guess.size
    m = R.shape[0]
    viol = _row_violation(R, rlb, rub, x_guess)
    s0 = viol + 1.0
    # variables z = [x; s]; rows: R x - s <= ub, R x + s >= lb, s >= 0
    Z = np.zeros((2 * m, n + m))
    zlb = np.full(2 * m, -np.inf)
    zub = np.full(2 * m, np.inf)
    Z[:m, :n] = R
    Z[:m, n:] = -np.eye(m)
    zub[:m] = rub
    Z[m:, :n] = R
    Z[m:, n:] = np.eye(m)
    zlb[m:] = rlb
    lbz = np.concatenate([np.full(n, -np.inf), np.zeros(m)])
    ubz = np.full(n + m, np.inf)
    Rz = np.vstack([Z, np.eye(n + m)])
    rlbz = np.concatenate([zlb, lbz])
    rubz = np.concatenate([zub, ubz])
    Hz = np.zeros((n + m, n + m))
    Hz[:n, :n] = 1e-8 * np.eye(n)
    Hz[n:, n:] = 2.0 * np.eye(m)
    z0 = np.concatenate([x_guess, s0])
    z, _, _, iters, _ = _active_set_core(Hz, np.zeros(n + m), Rz, rlbz, rubz,
                                         z0, [], max_iterations=50 + 4 * (n + m))
    return z[:n], iters


def _unify_rows(p: QuadraticProgram):
    n = p.n
    has_bounds = np.any(np.isfinite(p.lb_x)) or np.any(np.isfinite(p.ub_x))
    if has_bounds:
        R = np.vstack([p.A, np.eye(n)])
        rlb = np.concatenate([p.lb_A, p.lb_x])
        rub = np.concatenate([p.ub_A, p.ub_x])
    else:
        R, rlb, rub = p.A, p.lb_A, p.ub_A
    return R, rlb, rub


def solve_qp(p: QuadraticProgram, x0=None, working_set=None,
             max_iterations: int = 200, check: bool = True) -> SolveResult:
    """Solve a convex QP. Reports infeasibility instead of raising.

    ``x0``/``working_set`` warm-start the solve; pass ``SolveResult.x_star``
    and ``SolveResult.working_set`` from a previous call.
    """
    n = p.n
    H = p.H
    if check:
        w = np.linalg.eigvalsh((H + H.T) / 2.0)
        if w[0] < -1e-10:
            raise ValueError(f"H is not PSD (min eigenvalue {w[0]:.3e})")
        if w[0] < 1e-10:
            H = H + (1e-10 - min(w[0], 0.0) + 1e-12) * np.eye(n)
    R, rlb, rub = _unify_rows(p)
    m = R.shape[0]
    eq = rub - rlb <= 1e-12

    total_iters = 0
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel().copy()
    x = np.clip(x, p.lb_x, p.ub_x)
    scale = 1.0 + max(np.max(np.abs(rlb[np.isfinite(rlb)]), initial=0.0),
                      np.max(np.abs(rub[np.isfinite(rub)]), initial=0.0))
    if m and np.max(_row_violation(R, rlb, rub, x), initial=0.0) > FEAS_TOL * scale:
        x, it1 = _phase1(R, rlb, rub, x)
        total_iters += it1
        if np.max(_row_violation(R, rlb, rub, x), initial=0.0) > 1e-6 * scale:
            return SolveResult(x_star=x, objective=float("nan"), status="infeasible",
                               iterations=total_iters, kkt_residual=float("inf"))

    # working set: all equality rows, plus warm-start rows still active at x
    W: list[tuple[int, int]] = [(row, 0) for row in range(m) if eq[row]]
    have = {row for row, _ in W}
    if working_set:
        rx = R @ x
        for row, side in working_set:
            if row < m and row not in have and not eq[row]:
                bound = rub[row] if side > 0 else rlb[row]
                if np.isfinite(bound) and abs(rx[row] - bound) <= 1e-7 * scale:
                    W.append((int(row), int(side)))
                    have.add(row)

    x, W, mult, iters, status = _active_set_core(H, p.g, R, rlb, rub, x, W,
                                                 max_iterations)
    total_iters += iters
    obj = 0.5 * float(x @ p.H @ x) + float(p.g @ x)
    stat = np.max(np.abs(H @ x + p.g + R.T @ mult), initial=0.0)
    feas = np.max(_row_violation(R, rlb, rub, x), initial=0.0)
    comp = 0.0
    rx = R @ x
    for row in range(m):
        if mult[row] != 0.0 and not eq[row]:
            gap = min(abs(rx[row] - rlb[row]) if np.isfinite(rlb[row]) else np.inf,
                      abs(rub[row] - rx[row]) if np.isfinite(rub[row]) else np.inf)
            comp = max(comp, abs(mult[row]) * gap)
    kkt = max(stat, feas, comp)
    if status == "optimal" and kkt > max(STAT_TOL * (1.0 + np.abs(mult).max(initial=0.0)
                                                     + np.abs(p.g).max(initial=0.0)), 1e-6):
        status = "max-iterations"
    return SolveResult(x_star=x, objective=obj, status=status, iterations=total_iters,
                       kkt_residual=float(kkt), multipliers=mult,
                       working_set=tuple(W))


# ----------------------------------------------------------------------
# SQP


def solve_sqp(f_and_grad, cons, x0, max_iterations: int = 100,
              tol: float = NLP_KKT_TOL, B0=None, qp_ws=None):
    """Line-search SQP with damped BFGS.

    ``f_and_grad(x) -> (float, np.ndarray)``;
    ``cons(x) -> (values, jacobian, lb, ub)`` with values (m,), jacobian
    (m, n); ``cons`` may be None for unconstrained problems.
    Returns ``(SolveResult, B, qp_ws)`` so callers can warm-start the next,
    closely related problem.
    """
    x = np.asarray(x0, dtype=float).ravel().copy()
    n = x.size
    B = np.eye(n) if B0 is None else np.asarray(B0, dtype=float).copy()
    fval, grad = f_and_grad(x)
    if cons is not None:
        gval, J, clb, cub = cons(x)
    else:
        gval = np.zeros(0)
        J = np.zeros((0, n))
        clb = cub = np.zeros(0)
    nu = 1.0
    lam = np.zeros(gval.size)
    status = "max-iterations"
    iters = 0
    kkt = float("inf")

    def merit(fv, gv):
        return fv + nu * float(np.sum(np.maximum(np.maximum(clb - gv, gv - cub), 0.0)))

    for iters in range(1, max_iterations + 1):
        viol = float(np.max(np.maximum(np.maximum(clb - gval, gval - cub), 0.0),
                            initial=0.0))
        stat = float(np.max(np.abs(grad + J.T @ lam), initial=0.0))
        kkt = max(stat, viol)
        if kkt <= tol:
            status = "optimal"
            break
        qp = QuadraticProgram(B, grad, J if J.size else None,
                              clb - gval if J.size else None,
                              cub - gval if J.size else None)
        res = solve_qp(qp, x0=np.zeros(n), working_set=qp_ws,
                       max_iterations=50 + 10 * n, check=False)
        if res.status == "infeasible":
            p, lam_new = _restoration_direction(B, grad, J, clb - gval, cub - gval)
        else:
            p = res.x_star
            lam_new = res.multipliers[:J.shape[0]] if res.multipliers is not None else lam
            qp_ws = res.working_set
        lam = lam_new
        step = float(np.max(np.abs(p), initial=0.0))
        if step <= 1e-12:
            status = "optimal" if kkt <= 10 * tol else "max-iterations"
            if status == "optimal":
                break
            # stationary for the subproblem but not converged: bail out
            break
        nu = max(nu, 2.0 * float(np.max(np.abs(lam), initial=0.0)) + 1e-4)
        phi0 = merit(fval, gval)
        viol_l1 = float(np.sum(np.maximum(np.maximum(clb - gval, gval - cub), 0.0)))
        D = float(grad @ p) - nu * viol_l1
        alpha = 1.0
        ls_ok = False
        for _ in range(40):
            x_new = x + alpha * p
            f_new, grad_new = f_and_grad(x_new)
            if cons is not None:
                g_new, J_new, _, _ = cons(x_new)
            else:
                g_new, J_new = gval, J
            if np.isfinite(f_new) and merit(f_new, g_new) <= phi0 + 1e-4 * alpha * D:
                ls_ok = True
                break
            alpha *= 0.5
        if not ls_ok:
            status = "line-search-failure"
            break
        s = alpha * p
        y = (grad_new + J_new.T @ lam) - (grad + J.T @ lam)
        sBs = float(s @ B @ s)
        sy = float(s @ y)
        if sBs > 1e-14:
            if sy < 0.2 * sBs:  # Powell damping keeps B positive definite
                theta = 0.8 * sBs / (sBs - sy)
                y = theta * y + (1.0 - theta) * (B @ s)
                sy = float(s @ y)
            if sy > 1e-14:
                Bs = B @ s
                B = B + np.outer(y, y) / sy - np.outer(Bs, Bs) / sBs
        x, fval, grad, gval, J = x_new, f_new, grad_new, g_new, J_new

    result = SolveResult(x_star=x, objective=float(fval), status=status,
                         iterations=iters, kkt_residual=float(kkt),
                         multipliers=lam)
    return result, B, qp_ws


def _restoration_direction(B, grad, J, rlb, rub):
    """Elastic step when the linearized constraints are inconsistent."""
    m, n = J.shape
    big = 1e4 * (1.0 + float(np.max(np.abs(grad), initial=0.0)))
    Hz = np.zeros((n + m, n + m))
    Hz[:n, :n] = B
    Hz[n:, n:] = 1e-6 * np.eye(m)
    gz = np.concatenate([grad, big * np.ones(m)])
    Az = np.zeros((2 * m, n + m))
    Az[:m, :n] = J
    Az[:m, n:] = -np.eye(m)
    Az[m:, :n] = J
    Az[m:, n:] = np.eye(m)
    lbz = np.concatenate([np.full(m, -np.inf), rlb])
    ubz = np.concatenate([rub, np.full(m, np.inf)])
    lb_x = np.concatenate([np.full(n, -np.inf), np.zeros(m)])
    qp = QuadraticProgram(Hz, gz, Az, lbz, ubz, lb_x=lb_x)
    res = solve_qp(qp, check=False, max_iterations=100 + 10 * (n + m))
    lam = (res.multipliers[:m] if res.multipliers is not None else np.zeros(m))
    return res.x_star[:n], lam


def solve_nlp(p: NonlinearProgram, max_iterations: int = 100,
              tol: float = NLP_KKT_TOL) -> SolveResult:
    """Solve an expression-defined NLP with the SQP core."""
    sym = p.decision if isinstance(p.decision, VarSymbol) else p.decision.var
    n = sym.shape[0]
    if p.cost.shape != (1, 1):
        raise ValueError("cost must be scalar")
    for e, _, _ in p.constraints:
        extra = eg.free_variables(e) - {sym}
        if extra:
            raise ValueError(
                f"constraint depends on {sorted(s.name for s in extra)}; "
                "pre-substitute everything except the decision variable"
            )
    extra = eg.free_variables(p.cost) - {sym}
    if extra:
        raise ValueError(f"cost depends on non-decision symbols {sorted(s.name for s in extra)}")

    outputs = [p.cost, eg.jacobian(p.cost, sym)]
    bounds = []
    for e, lb, ub in p.constraints:
        outputs.append(e)
        outputs.append(eg.jacobian(e, sym))
        lb = np.asarray(lb, dtype=float).ravel()
        ub = np.asarray(ub, dtype=float).ravel()
        if lb.size == 1:
            lb = np.full(e.shape[0], lb[0])
        if ub.size == 1:
            ub = np.full(e.shape[0], ub[0])
        bounds.append((lb, ub))
    fn = eg.compile_function([sym], outputs, name="nlp_funcs")
    clb = np.concatenate([b[0] for b in bounds]) if bounds else np.zeros(0)
    cub = np.concatenate([b[1] for b in bounds]) if bounds else np.zeros(0)

    def f_and_grad(x):
        out = fn(x)
        return float(out[0][0, 0]), out[1].ravel()

    cons = None
    if p.constraints:
        def cons(x):
            out = fn(x)
            vals = np.concatenate([out[2 + 2 * i].ravel()
                                   for i in range(len(p.constraints))])
            jac = np.vstack([out[3 + 2 * i] for i in range(len(p.constraints))])
            return vals, jac, clb, cub

    x0 = np.zeros(n) if p.x0 is None else np.asarray(p.x0, dtype=float).ravel()
    result, _, _ = solve_sqp(f_and_grad, cons, x0, max_iterations=max_iterations,
                             tol=tol)
    return result

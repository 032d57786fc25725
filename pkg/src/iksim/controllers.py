"""The four controller formulations.

* reactive QP: one convex QP per control step over (qdot, xdot, slack),
* reactive NLP: same constraint rows with a user cost expression,
* multiple-shooting MPC: the NLP transcribed along a prediction horizon
  with Euler shooting-gap equalities,
* null-space task-priority (pinv): strict priorities, set constraints
  activated through the extended-tangent-cone test and null-space
  projection.

Constraint rows follow the convergence convention that the commanded
output-function derivative lies in ``[-K(e - e_lo), -K(e - e_hi)]`` for set
constraints (positive toward the set from below, negative from above) and
equals ``-K e`` / ``+target`` for equality / velocity-equality constraints,
minus the explicit time dependence in every case.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import exprgraph as eg
from . import solvers as sv
from .exprgraph import Expr, VarSymbol
from .tasks import Constraint, SkillSpecification, VariableSet, constraint_jacobians

__all__ = [
    "ControllerOptions",
    "ControlStepResult",
    "ControllerError",
    "InitializationError",
    "velocity_symbols",
    "ConstraintFunctions",
    "ConstraintState",
    "assemble_constraint_rows",
    "damped_pinv",
    "activation_matrix",
    "in_tangent_cone",
    "null_space_projector",
    "pinv_modes",
    "compile_qp",
    "compile_nlp",
    "compile_mpc",
    "compile_pinv",
    "initialize",
]


class ControllerError(RuntimeError):
    pass


class InitializationError(ControllerError):
    pass


@dataclass(frozen=True)
class ControllerOptions:
    """Shared controller tuning knobs (see module docstring for roles)."""

    weight_robot: object = None
    weight_virtual: object = None
    regularization: float = 0.1
    damping: float = 1e-7
    horizon: int = 10
    timestep: float | None = None
    activation_epsilon: float = 1e-9
    tangent_cone_1d_mode: str = "figure2"

    def __post_init__(self):
        if self.regularization <= 0:
            raise ValueError("regularization must be > 0")
        if self.damping <= 0:
            raise ValueError("damping must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.activation_epsilon < 0:
            raise ValueError("activation_epsilon must be >= 0")
        if self.tangent_cone_1d_mode not in ("verbatim", "figure2"):
            raise ValueError("tangent_cone_1d_mode must be 'verbatim' or 'figure2'")


@dataclass
class ControlStepResult:
    qdot: np.ndarray
    xdot: np.ndarray
    slack: np.ndarray
    mode: int = 0
    solve_time: float = 0.0
    status: str = "optimal"

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _weight_matrix(w, n: int, name: str) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 0))
    if w is None:
        return np.eye(n)
    arr = np.asarray(w, dtype=float)
    if arr.ndim == 0:
        arr = float(arr) * np.eye(n)
    elif arr.ndim == 1:
        if arr.size != n:
            raise ValueError(f"{name}: expected {n} diagonal weights, got {arr.size}")
        arr = np.diag(arr)
    if arr.shape != (n, n):
        raise ValueError(f"{name}: expected {n}x{n}, got {arr.shape}")
    if np.max(np.abs(arr - arr.T)) > 1e-10 or np.min(np.linalg.eigvalsh(arr)) <= 0:
        raise ValueError(f"{name} must be symmetric positive definite")
    return arr


@lru_cache(maxsize=None)
def _velocity_symbols_cached(variables: VariableSet):
    u = eg.Universe()
    qd = u.variable(variables.robot.name + "_dot", variables.robot.shape)
    xd = None
    if variables.virtual is not None:
        xd = u.variable(variables.virtual.name + "_dot", variables.virtual.shape)
    return qd, xd


def velocity_symbols(variables: VariableSet):
    """(qdot, xdot) variable expressions for building velocity-level costs.

    Cached per VariableSet, so cost expressions and controllers agree on the
    symbols.
    """
    return _velocity_symbols_cached(variables)


# ----------------------------------------------------------------------
# compiled constraint numerics


@dataclass
class ConstraintState:
    """Numeric snapshot of one constraint at a controller state."""

    constraint: Constraint
    e: np.ndarray          # (n_e,)
    de_dt: np.ndarray      # (n_e,)
    jac: np.ndarray        # (n_e, n_q + n_x)
    gain: object           # float scalar or (n_e, n_e) matrix, None for velocity kinds
    lo: np.ndarray | None  # set bounds / velocity bounds
    hi: np.ndarray | None
    target: np.ndarray | None

    def gain_times(self, v: np.ndarray) -> np.ndarray:
        if isinstance(self.gain, float):
            return self.gain * v
        return self.gain @ v


class ConstraintFunctions:
    """One compiled function per skill returning every constraint's value,
    time derivative, Jacobian, and any expression-valued gain/bound/target."""

    def __init__(self, skill: SkillSpecification):
        self.skill = skill
        vs = skill.variables
        self.inputs = vs.all_symbols()
        outputs: list[Expr] = []
        self._plan = []
        for c in skill.constraints:
            d_t, d_q, d_x = constraint_jacobians(c, vs)
            slot = {"base": len(outputs)}
            outputs.extend([c.expression, d_t, d_q])
            n_out = 3
            if d_x is not None:
                outputs.append(d_x)
                slot["has_x"] = True
                n_out += 1
            else:
                slot["has_x"] = False
            for name in ("gain", "set_min", "set_max", "target"):
                val = getattr(c, name)
                if isinstance(val, Expr):
                    slot[name] = len(outputs)
                    outputs.append(val)
                    n_out += 1
                else:
                    slot[name] = None
            slot["count"] = n_out
            self._plan.append(slot)
        self.fn = eg.compile_function(self.inputs, outputs, name="constraint_funcs")
        self.n_v = vs.n_robot + vs.n_virtual

    def _args(self, t, q, x, y):
        vs = self.skill.variables
        args = [np.atleast_1d(np.asarray(t, dtype=float)), q]
        if vs.virtual is not None:
            args.append(x if x is not None else np.zeros(vs.n_virtual))
        if vs.input is not None:
            if y is None:
                raise ControllerError("skill has an input variable but no input value given")
            args.append(y)
        return args

    def evaluate(self, t, q, x=None, y=None) -> list[ConstraintState]:
        out = self.fn(*self._args(t, q, x, y))
        states = []
        for c, slot in zip(self.skill.constraints, self._plan):
            b = slot["base"]
            e = out[b].ravel()
            de_dt = out[b + 1].ravel()
            jac_q = out[b + 2]
            if slot["has_x"]:
                jac = np.hstack([jac_q, out[b + 3]])
            else:
                jac = jac_q
            gain = c.gain
            if slot["gain"] is not None:
                gain = float(out[slot["gain"]][0, 0])
            elif isinstance(gain, (int, float)):
                gain = float(gain)
            lo = c.set_min
            hi = c.set_max
            if slot["set_min"] is not None:
                lo = out[slot["set_min"]]
            if slot["set_max"] is not None:
                hi = out[slot["set_max"]]
            target = c.target
            if slot["target"] is not None:
                target = out[slot["target"]]
            states.append(ConstraintState(
                constraint=c, e=e, de_dt=de_dt, jac=jac, gain=gain,
                lo=None if lo is None else np.asarray(lo, dtype=float).ravel(),
                hi=None if hi is None else np.asarray(hi, dtype=float).ravel(),
                target=None if target is None else np.asarray(target, dtype=float).ravel(),
            ))
        return states


def assemble_constraint_rows(c: Constraint, state: ConstraintState):
    """Rows over (qdot, xdot): returns (A, lb, ub).

    equality:          A v = -K e - de/dt
    set:               -K(e - lo) - de/dt <= A v <= -K(e - hi) - de/dt
    velocity-equality: A v = target - de/dt
    velocity-set:      lo - de/dt <= A v <= hi - de/dt
    Soft constraints additionally receive a +slack column block, added by
    the controller assembly (the slack enters the row as ``A v + eps``).
    """
    A = state.jac
    ff = -state.de_dt
    if c.kind == "equality":
        rhs = -state.gain_times(state.e) + ff
        return A, rhs, rhs.copy()
    if c.kind == "set":
        lb = -state.gain_times(state.e - state.lo) + ff
        ub = -state.gain_times(state.e - state.hi) + ff
        return A, lb, ub
    if c.kind == "velocity-equality":
        rhs = state.target + ff
        return A, rhs, rhs.copy()
    if c.kind == "velocity-set":
        return A, state.lo + ff, state.hi + ff
    raise AssertionError(c.kind)


# ----------------------------------------------------------------------
# small numeric operators


def damped_pinv(M: np.ndarray, lam: float) -> np.ndarray:
    """Damped pseudo-inverse: Mt (M Mt + lam I)^-1 for wide M,
    (Mt M + lam I)^-1 Mt for tall M."""
    if lam <= 0:
        raise ValueError("damping factor must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    m, n = M.shape
    if m <= n:
        return np.linalg.solve(M @ M.T + lam * np.eye(m), M).T
    return np.linalg.solve(M.T @ M + lam * np.eye(n), M.T)


def activation_matrix(e, e_l, e_u, activation_epsilon: float = 1e-9) -> np.ndarray:
    """Diagonal 0/1 selector of the out-of-bounds components."""
    e = np.asarray(e, dtype=float).ravel()
    e_l = np.asarray(e_l, dtype=float).ravel()
    e_u = np.asarray(e_u, dtype=float).ravel()
    s = (e < e_l - activation_epsilon) | (e > e_u + activation_epsilon)
    return np.diag(s.astype(float))


_COS45 = np.cos(np.pi / 4.0)


def in_tangent_cone(e, e_l, e_u, edot, activation_epsilon: float = 1e-9,
                    mode_1d: str = "figure2") -> bool:
    """Extended tangent-cone membership for a set constraint.

    Multidimensional rule: with d = sign(e-e_l) + sign(e-e_u), inside the
    bounds always passes; at a corner (componentwise sign agreement) the
    velocity must lie in a 45-degree cone around -d; on a face/edge it must
    satisfy d . edot < 0. For one-dimensional constraints the default
    ``figure2`` mode passes exactly when inside, or outside with the
    velocity pointing back toward the set; ``verbatim`` applies the
    multidimensional rule unchanged.
    """
    e = np.asarray(e, dtype=float).ravel()
    e_l = np.asarray(e_l, dtype=float).ravel()
    e_u = np.asarray(e_u, dtype=float).ravel()
    edot = np.asarray(edot, dtype=float).ravel()
    if np.all(e >= e_l - activation_epsilon) and np.all(e <= e_u + activation_epsilon):
        return True
    if e.size == 1 and mode_1d == "figure2":
        if e[0] < e_l[0] and edot[0] > 0:
            return True
        if e[0] > e_u[0] and edot[0] < 0:
            return True
        return False
    sl = np.sign(e - e_l)
    su = np.sign(e - e_u)
    d = sl + su
    in_crnr = bool(np.all(sl == su))
    if in_crnr:
        return bool(abs(-(d @ edot)) < np.linalg.norm(d) * np.linalg.norm(edot) * _COS45)
    return bool(d @ edot < 0.0)


def null_space_projector(J_full: np.ndarray, lam: float,
                         J_activated: np.ndarray | None = None) -> np.ndarray:
    """N = I - damped_pinv(J_full) @ J_activated (activated defaults to full)."""
    J_full = np.atleast_2d(J_full)
    if J_full.size == 0:
        raise ValueError("stacked task matrix must be non-empty")
    if J_activated is None:
        J_activated = J_full
    n = J_full.shape[1]
    return np.eye(n) - damped_pinv(J_full, lam) @ np.atleast_2d(J_activated)


# ----------------------------------------------------------------------
# shared assembly for the optimization controllers


class _RowAssembler:
    """Stacks constraint rows and the soft-slack column pattern."""

    def __init__(self, skill: SkillSpecification):
        self.skill = skill
        self.n_v = skill.n_robot + skill.n_virtual
        self.n_slack = skill.n_slack
        offsets = []
        off = 0
        for c in skill.constraints:
            if c.is_soft:
                offsets.append(off)
                off += c.n_e
            else:
                offsets.append(None)
        self.slack_offsets = offsets
        self.slack_weights = np.concatenate(
            [np.full(c.n_e, c.slack_weight) for c in skill.constraints if c.is_soft]
        ) if self.n_slack else np.zeros(0)
        self.m = sum(c.n_e for c in skill.constraints)

    def assemble(self, states: list[ConstraintState]):
        nv, ns = self.n_v, self.n_slack
        A = np.zeros((self.m, nv + ns))
        lb = np.empty(self.m)
        ub = np.empty(self.m)
        r = 0
        for c, state, s_off in zip(self.skill.constraints, states, self.slack_offsets):
            Ab, lo, hi = assemble_constraint_rows(c, state)
            n_e = c.n_e
            A[r:r + n_e, :nv] = Ab
            if s_off is not None:
                A[r:r + n_e, nv + s_off:nv + s_off + n_e] = np.eye(n_e)
            lb[r:r + n_e] = lo
            ub[r:r + n_e] = hi
            r += n_e
        return A, lb, ub


def _repair_candidate(A, lb, ub, nv, ns, v):
    """Pick slacks so soft rows hold at v; None if a hard row is violated."""
    z = np.concatenate([v, np.zeros(ns)])
    r = A[:, :nv] @ v
    for i in range(A.shape[0]):
        srow = A[i, nv:]
        j = np.nonzero(srow)[0]
        if j.size:
            eps = min(max(0.0, lb[i] - r[i]), ub[i] - r[i])
            z[nv + j[0]] = eps
            r_i = r[i] + eps
        else:
            r_i = r[i]
        if r_i < lb[i] - 1e-9 or r_i > ub[i] + 1e-9:
            return None
    return z


class _BaseController:
    kind = "base"

    def __init__(self, skill: SkillSpecification, options: ControllerOptions):
        if not skill.constraints:
            raise ValueError("cannot compile a controller for a skill with no constraints")
        self.skill = skill
        self.options = options
        self.functions = ConstraintFunctions(skill)
        self.n_q = skill.n_robot
        self.n_x = skill.n_virtual
        self.last_states = None

    def __repr__(self):
        return f"{type(self).__name__}<{self.skill.label}>"

    def initialize(self, t0, q0, y0=None, x0=None):
        return initialize(self, t0, q0, y0=y0, x0=x0)


class QPController(_BaseController):
    """Reactive QP controller (soft slacks, warm-started active set)."""

    kind = "qp"

    def __init__(self, skill, options):
        super().__init__(skill, options)
        self.assembler = _RowAssembler(skill)
        c = options.regularization
        Wq = _weight_matrix(options.weight_robot, self.n_q, "weight_robot")
        Wx = _weight_matrix(options.weight_virtual, self.n_x, "weight_virtual")
        n = self.n_q + self.n_x + skill.n_slack
        H = np.zeros((n, n))
        H[:self.n_q, :self.n_q] = 2.0 * c * Wq
        H[self.n_q:self.n_q + self.n_x, self.n_q:self.n_q + self.n_x] = 2.0 * c * Wx
        if skill.n_slack:
            H[-skill.n_slack:, -skill.n_slack:] = (
                2.0 * (1.0 + c) * np.diag(self.assembler.slack_weights))
        self.H = H
        self._ws = None
        self._last = None

    def step(self, t, q, x=None, y=None) -> ControlStepResult:
        tic = time.perf_counter()
        states = self.functions.evaluate(t, q, x, y)
        self.last_states = states
        A, lb, ub = self.assembler.assemble(states)
        nv = self.n_q + self.n_x
        ns = self.skill.n_slack
        v_prev = self._last if self._last is not None else np.zeros(nv)
        x0 = _repair_candidate(A, lb, ub, nv, ns, v_prev)
        if x0 is None:
            x0 = _repair_candidate(A, lb, ub, nv, ns, np.zeros(nv))
        qp = sv.QuadraticProgram(self.H, np.zeros(self.H.shape[0]), A, lb, ub)
        res = sv.solve_qp(qp, x0=x0, working_set=self._ws, check=False)
        toc = time.perf_counter()
        if res.status == "optimal":
            self._ws = res.working_set
            self._last = res.x_star[:nv]
        z = res.x_star
        return ControlStepResult(
            qdot=z[:self.n_q].copy(), xdot=z[self.n_q:nv].copy(),
            slack=z[nv:].copy(), mode=0, solve_time=toc - tic, status=res.status)


def compile_qp(skill: SkillSpecification, options: ControllerOptions | None = None,
               ) -> QPController:
    return QPController(skill, options or ControllerOptions())


def _check_cost(skill: SkillSpecification, cost: Expr):
    if cost.shape != (1, 1):
        raise ValueError("cost must be a scalar expression")
    qd, xd = velocity_symbols(skill.variables)
    free = eg.free_variables(cost)
    if qd.var not in free:
        raise ValueError("cost must depend on the robot velocity symbol")
    if xd is not None and xd.var not in free:
        raise ValueError("cost must depend on the virtual velocity symbol")
    allowed = set(skill.variables.all_symbols()) | {qd.var}
    if xd is not None:
        allowed.add(xd.var)
    extra = free - allowed
    if extra:
        raise ValueError(f"cost uses unknown symbols {sorted(s.name for s in extra)}")
    return qd, xd


class NLPController(_BaseController):
    """Reactive NLP controller: QP rows plus a user cost expression."""

    kind = "nlp"

    def __init__(self, skill, cost, options):
        super().__init__(skill, options)
        self.assembler = _RowAssembler(skill)
        qd, xd = _check_cost(skill, cost)
        self.cost_expr = cost
        vs = skill.variables
        inputs = vs.all_symbols() + [qd]
        grads = [cost, eg.jacobian(cost, qd)]
        if xd is not None:
            inputs.append(xd)
            grads.append(eg.jacobian(cost, xd))
        # second derivatives of the cost seed the BFGS matrix: the slack
        # block is exactly quadratic and the velocity blocks usually are,
        # so the first subproblem is already well scaled
        hess = [eg.jacobian(eg.transpose(eg.jacobian(cost, qd)), qd)]
        if xd is not None:
            hess.append(eg.jacobian(eg.transpose(eg.jacobian(cost, xd)), xd))
        self._cost_hess_fn = eg.compile_function(inputs, hess, name="nlp_cost_hess")
        self._cost_fn = eg.compile_function(inputs, grads, name="nlp_cost")
        self._has_x = xd is not None
        self._has_y = vs.input is not None
        self._B = None
        self._qp_ws = None
        self._last = None

    def _initial_hessian(self, t, q, x, y):
        nv = self.n_q + self.n_x
        n = nv + self.skill.n_slack
        c = self.options.regularization
        B = np.eye(n)
        out = self._cost_hess_fn(*self._cost_args(t, q, x, y,
                                                  np.zeros(self.n_q),
                                                  np.zeros(self.n_x)))
        B[:self.n_q, :self.n_q] = _clamp_pd(c * out[0])
        if self._has_x:
            B[self.n_q:nv, self.n_q:nv] = _clamp_pd(c * out[1])
        if self.skill.n_slack:
            B[nv:, nv:] = np.diag(2.0 * (1.0 + c) * self.assembler.slack_weights)
        return B

    def _cost_args(self, t, q, x, y, qdot, xdot):
        args = [np.atleast_1d(float(t)), q]
        if self.n_x:
            args.append(x if x is not None else np.zeros(self.n_x))
        if self._has_y:
            args.append(y)
        args.append(qdot)
        if self._has_x:
            args.append(xdot)
        return args

    def step(self, t, q, x=None, y=None) -> ControlStepResult:
        tic = time.perf_counter()
        states = self.functions.evaluate(t, q, x, y)
        self.last_states = states
        A, lb, ub = self.assembler.assemble(states)
        nv = self.n_q + self.n_x
        ns = self.skill.n_slack
        n = nv + ns
        c = self.options.regularization
        w_slack = 2.0 * (1.0 + c) * self.assembler.slack_weights

        def f_and_grad(z):
            qdot = z[:self.n_q]
            xdot = z[self.n_q:nv]
            eps = z[nv:]
            out = self._cost_fn(*self._cost_args(t, q, x, y, qdot, xdot))
            fval = c * float(out[0][0, 0]) + 0.5 * float(eps @ (w_slack * eps))
            grad = np.empty(n)
            grad[:self.n_q] = c * out[1].ravel()
            if self._has_x:
                grad[self.n_q:nv] = c * out[2].ravel()
            grad[nv:] = w_slack * eps
            return fval, grad

        def cons(z):
            return A @ z, A, lb, ub

        z0 = _repair_candidate(A, lb, ub, nv, ns,
                               self._last if self._last is not None else np.zeros(nv))
        if z0 is None:
            z0 = np.zeros(n)
        res, self._B, self._qp_ws = sv.solve_sqp(
            f_and_grad, cons, z0, max_iterations=60, B0=self._B, qp_ws=self._qp_ws)
        toc = time.perf_counter()
        z = res.x_star
        if res.status == "optimal":
            self._last = z[:nv]
        return ControlStepResult(
            qdot=z[:self.n_q].copy(), xdot=z[self.n_q:nv].copy(), slack=z[nv:].copy(),
            mode=0, solve_time=toc - tic, status=res.status)


def compile_nlp(skill: SkillSpecification, cost: Expr,
                options: ControllerOptions | None = None) -> NLPController:
    return NLPController(skill, cost, options or ControllerOptions())


class MPCController(_BaseController):
    """Multiple-shooting MPC over decision blocks
    [qdot_k, xdot_k, eps_k, q_{k+1}, x_{k+1}] for k in [0, horizon)."""

    kind = "mpc"

    def __init__(self, skill, cost, options):
        if skill.variables.input is not None:
            raise ValueError("the predictive controller does not support input variables")
        if options.timestep is None or options.timestep <= 0:
            raise ValueError("MPC needs a positive options.timestep")
        super().__init__(skill, options)
        qd, xd = _check_cost(skill, cost)
        self.cost_expr = cost
        vs = skill.variables
        self.n_h = options.horizon
        self.dt = options.timestep

        # one node function shared by every shooting interval: rows have the
        # slack and bound terms stripped (both are linear/constant and are
        # assembled numerically)
        inputs = [vs.time, vs.robot]
        if vs.virtual is not None:
            inputs.append(vs.virtual)
        inputs.append(qd)
        if xd is not None:
            inputs.append(xd)
        diff_syms = [vs.robot, qd] + ([vs.virtual, xd] if xd is not None else [])
        outputs: list[Expr] = []
        plan = []
        for cst in skill.constraints:
            d_t, d_q, d_x = constraint_jacobians(cst, vs)
            r = d_t + d_q @ qd
            if d_x is not None:
                r = r + d_x @ xd
            rows = []
            if cst.kind == "equality":
                r = r + _gain_expr_times(cst.gain, cst.expression)
                rows.append((r, np.zeros(cst.n_e), np.zeros(cst.n_e)))
            elif cst.kind == "set":
                if isinstance(cst.gain, Expr) or isinstance(cst.set_min, Expr) \
                        or isinstance(cst.set_max, Expr):
                    lo = cst.set_min if isinstance(cst.set_min, Expr) else eg.constant(cst.set_min)
                    hi = cst.set_max if isinstance(cst.set_max, Expr) else eg.constant(cst.set_max)
                    r_lo = r + _gain_expr_times(cst.gain, cst.expression - lo)
                    r_hi = r + _gain_expr_times(cst.gain, cst.expression - hi)
                    rows.append((r_lo, np.zeros(cst.n_e), np.full(cst.n_e, np.inf)))
                    rows.append((r_hi, np.full(cst.n_e, -np.inf), np.zeros(cst.n_e)))
                else:
                    r = r + _gain_expr_times(cst.gain, cst.expression)
                    k = cst.gain if isinstance(cst.gain, float) else np.diag(cst.gain)
                    rows.append((r, (k * cst.set_min.ravel()), (k * cst.set_max.ravel())))
            elif cst.kind == "velocity-equality":
                tgt = cst.target if isinstance(cst.target, Expr) else eg.constant(cst.target)
                rows.append((r - tgt, np.zeros(cst.n_e), np.zeros(cst.n_e)))
            else:  # velocity-set
                lo = cst.set_min
                hi = cst.set_max
                if isinstance(lo, Expr) or isinstance(hi, Expr):
                    lo = lo if isinstance(lo, Expr) else eg.constant(lo)
                    hi = hi if isinstance(hi, Expr) else eg.constant(hi)
                    rows.append((r - lo, np.zeros(cst.n_e), np.full(cst.n_e, np.inf)))
                    rows.append((r - hi, np.full(cst.n_e, -np.inf), np.zeros(cst.n_e)))
                else:
                    rows.append((r, lo.ravel().copy(), hi.ravel().copy()))
            for r_expr, lo_b, hi_b in rows:
                slot = len(outputs)
                outputs.append(r_expr)
                jslots = []
                for s in diff_syms:
                    jslots.append(len(outputs))
                    outputs.append(eg.jacobian(r_expr, s))
                plan.append({"constraint": cst, "value": slot, "jacs": jslots,
                             "lb": lo_b, "ub": hi_b, "n": cst.n_e,
                             "soft": cst.is_soft})
        self._cost_slot = len(outputs)
        outputs.append(cost)
        self._cost_jacs = []
        for s in diff_syms:
            self._cost_jacs.append(len(outputs))
            outputs.append(eg.jacobian(cost, s))
        self._node_fn = eg.compile_function(inputs, outputs, name="mpc_node")
        self._plan = plan
        self._diff_syms = diff_syms

        nq, nx = self.n_q, self.n_x
        self.n_eps = skill.n_slack
        self.block = 2 * nq + 2 * nx + self.n_eps
        self.n_dec = self.n_h * self.block
        self.m_node = sum(p["n"] for p in plan)
        self.m_total = self.n_h * (self.m_node + nq + nx)
        # one eps segment per soft constraint, shared by the (possibly two)
        # rows that constraint contributes
        eps_offsets = {}
        off = 0
        for cst in skill.constraints:
            if cst.is_soft:
                eps_offsets[id(cst)] = off
                off += cst.n_e
        self._slack_off = [eps_offsets.get(id(p["constraint"])) if p["soft"] else None
                           for p in plan]
        w = []
        for cst in skill.constraints:
            if cst.is_soft:
                w.extend([cst.slack_weight] * cst.n_e)
        self.w_eps = np.asarray(w)
        self._B = None
        self._qp_ws = None
        self._prev = None

    def _node(self, tk, qk, xk, qdk, xdk):
        args = [np.atleast_1d(tk), qk]
        if self.n_x:
            args.append(xk)
        args.append(qdk)
        if self.n_x:
            args.append(xdk)
        return self._node_fn(*args)

    def _slices(self, k):
        nq, nx = self.n_q, self.n_x
        b = k * self.block
        return {
            "qd": slice(b, b + nq),
            "xd": slice(b + nq, b + nq + nx),
            "eps": slice(b + nq + nx, b + nq + nx + self.n_eps),
            "q1": slice(b + nq + nx + self.n_eps, b + 2 * nq + nx + self.n_eps),
            "x1": slice(b + 2 * nq + nx + self.n_eps, b + 2 * nq + 2 * nx + self.n_eps),
        }

    def step(self, t, q, x=None, y=None) -> ControlStepResult:
        if y is not None and np.asarray(y).size:
            raise ControllerError("the predictive controller does not accept inputs")
        tic = time.perf_counter()
        nq, nx, neps = self.n_q, self.n_x, self.n_eps
        q = np.asarray(q, dtype=float).ravel()
        x = np.zeros(0) if x is None else np.asarray(x, dtype=float).ravel()
        t = float(t)
        n = self.n_dec
        c = self.options.regularization
        dt = self.dt

        lb = np.empty(self.m_total)
        ub = np.empty(self.m_total)
        row = 0
        for k in range(self.n_h):
            for p in self._plan:
                lb[row:row + p["n"]] = p["lb"]
                ub[row:row + p["n"]] = p["ub"]
                row += p["n"]
            lb[row:row + nq + nx] = 0.0
            ub[row:row + nq + nx] = 0.0
            row += nq + nx

        def states_of(z):
            qs = [q]
            xs = [x]
            for k in range(self.n_h):
                s = self._slices(k)
                qs.append(z[s["q1"]])
                xs.append(z[s["x1"]])
            return qs, xs

        def cons(z):
            g = np.empty(self.m_total)
            J = np.zeros((self.m_total, n))
            qs, xs = states_of(z)
            row = 0
            for k in range(self.n_h):
                s = self._slices(k)
                tk = t + k * dt
                out = self._node(tk, qs[k], xs[k], z[s["qd"]], z[s["xd"]])
                prev = None if k == 0 else self._slices(k - 1)
                for p, s_off in zip(self._plan, self._slack_off):
                    ne = p["n"]
                    val = out[p["value"]].ravel().copy()
                    if s_off is not None:
                        val += z[s["eps"]][s_off:s_off + ne]
                    g[row:row + ne] = val
                    jacs = [out[j] for j in p["jacs"]]
                    # diff_syms order: q, qd[, x, xd]
                    J[row:row + ne, s["qd"]] = jacs[1]
                    if nx:
                        J[row:row + ne, s["xd"]] = jacs[3]
                    if k > 0:
                        J[row:row + ne, prev["q1"]] = jacs[0]
                        if nx:
                            J[row:row + ne, prev["x1"]] = jacs[2]
                    if s_off is not None:
                        J[row:row + ne,
                          s["eps"].start + s_off:s["eps"].start + s_off + ne] = np.eye(ne)
                    row += ne
                # shooting gaps: q_{k+1} - (q_k + dt qd_k) = 0
                g[row:row + nq] = z[s["q1"]] - (qs[k] + dt * z[s["qd"]])
                J[row:row + nq, s["q1"]] = np.eye(nq)
                J[row:row + nq, s["qd"]] = -dt * np.eye(nq)
                if k > 0:
                    J[row:row + nq, prev["q1"]] = -np.eye(nq)
                row += nq
                if nx:
                    g[row:row + nx] = z[s["x1"]] - (xs[k] + dt * z[s["xd"]])
                    J[row:row + nx, s["x1"]] = np.eye(nx)
                    J[row:row + nx, s["xd"]] = -dt * np.eye(nx)
                    if k > 0:
                        J[row:row + nx, prev["x1"]] = -np.eye(nx)
                    row += nx
            return g, J, lb, ub

        w_eps = 2.0 * (1.0 + c) * self.w_eps if neps else np.zeros(0)

        def f_and_grad(z):
            qs, xs = states_of(z)
            f = 0.0
            grad = np.zeros(n)
            for k in range(self.n_h):
                s = self._slices(k)
                tk = t + k * dt
                out = self._node(tk, qs[k], xs[k], z[s["qd"]], z[s["xd"]])
                f += c * float(out[self._cost_slot][0, 0])
                jacs = [out[j] for j in self._cost_jacs]
                grad[s["qd"]] += c * jacs[1].ravel()
                if nx:
                    grad[s["xd"]] += c * jacs[3].ravel()
                if k > 0:
                    prev = self._slices(k - 1)
                    grad[prev["q1"]] += c * jacs[0].ravel()
                    if nx:
                        grad[prev["x1"]] += c * jacs[2].ravel()
                if neps:
                    eps = z[s["eps"]]
                    f += 0.5 * float(eps @ (w_eps * eps))
                    grad[s["eps"]] += w_eps * eps
            return f, grad

        z0 = self._initial_guess(t, q, x)
        res, self._B, self._qp_ws = sv.solve_sqp(
            f_and_grad, cons, z0, max_iterations=40, B0=self._B, qp_ws=self._qp_ws)
        toc = time.perf_counter()
        z = res.x_star
        if res.status == "optimal":
            self._prev = z.copy()
        s0 = self._slices(0)
        return ControlStepResult(
            qdot=z[s0["qd"]].copy(), xdot=z[s0["xd"]].copy(),
            slack=z[s0["eps"]].copy(), mode=0, solve_time=toc - tic,
            status=res.status)

    def _initial_guess(self, t, q, x):
        """Shift the previous trajectory one interval and re-roll the states
        so the shooting gaps hold exactly."""
        n = self.n_dec
        z = np.zeros(n)
        if self._prev is not None:
            z[:n - self.block] = self._prev[self.block:]
            z[n - self.block:] = self._prev[n - self.block:]
        qk, xk = q, x
        for k in range(self.n_h):
            s = self._slices(k)
            qk = qk + self.dt * z[s["qd"]]
            xk = xk + self.dt * z[s["xd"]]
            z[s["q1"]] = qk
            z[s["x1"]] = xk
        return z


def compile_mpc(skill: SkillSpecification, cost: Expr,
                options: ControllerOptions | None = None) -> MPCController:
    return MPCController(skill, cost, options or ControllerOptions())


def _gain_expr_times(gain, vec: Expr) -> Expr:
    if isinstance(gain, Expr):
        return gain * vec
    if isinstance(gain, float):
        return gain * vec
    return eg.constant(gain) @ vec


# ----------------------------------------------------------------------
# null-space task-priority controller


def pinv_modes(n_set: int) -> list[tuple[bool, ...]]:
    """Activation combinations ordered by active count, then by the pattern
    value with the first set as most significant bit (Table-I order)."""
    masks = []
    for m in range(2 ** n_set):
        bits = tuple(bool((m >> (n_set - 1 - i)) & 1) for i in range(n_set))
        masks.append(bits)
    masks.sort(key=lambda b: (sum(b), tuple(int(v) for v in b)))
    return masks


class PinvController(_BaseController):
    """Set-based task-priority controller with Table-I mode search."""

    kind = "pinv"

    def __init__(self, skill, options):
        for c in skill.constraints:
            if c.kind == "velocity-set":
                raise ValueError(
                    "the null-space controller does not support velocity-set constraints")
        super().__init__(skill, options)
        self.set_indices = [i for i, c in enumerate(skill.constraints)
                            if c.kind == "set"]
        self.modes = pinv_modes(len(self.set_indices))
        self.last_cone_evaluations = 0

    def _mode_command(self, states, active: dict[int, bool]):
        lam = self.options.damping
        eps = self.options.activation_epsilon
        nv = self.n_q + self.n_x
        v = np.zeros(nv)
        full_stack: list[np.ndarray] = []
        act_stack: list[np.ndarray] = []
        for i, s in enumerate(states):
            c = s.constraint
            if c.kind == "set":
                if active.get(i, False):
                    S = activation_matrix(s.e, s.lo, s.hi, eps)
                    full_stack.append(s.jac)
                    act_stack.append(S @ s.jac)
                continue
            if c.kind == "equality":
                vd = -damped_pinv(s.jac, lam) @ (s.gain_times(s.e) + s.de_dt)
            else:  # velocity-equality
                vd = damped_pinv(s.jac, lam) @ (s.target - s.de_dt)
            if full_stack:
                N = null_space_projector(np.vstack(full_stack), lam,
                                         np.vstack(act_stack))
                v = v + N @ vd
            else:
                v = v + vd
            full_stack.append(s.jac)
            act_stack.append(s.jac)
        return v

    def step(self, t, q, x=None, y=None) -> ControlStepResult:
        tic = time.perf_counter()
        states = self.functions.evaluate(t, q, x, y)
        self.last_states = states
        eps = self.options.activation_epsilon
        mode_1d = self.options.tangent_cone_1d_mode
        self.last_cone_evaluations = 0
        chosen = None
        v = np.zeros(self.n_q + self.n_x)
        for mode_no, bits in enumerate(self.modes, start=1):
            active = {idx: on for idx, on in zip(self.set_indices, bits)}
            v_try = self._mode_command(states, active)
            ok = True
            for idx, on in zip(self.set_indices, bits):
                if on:
                    continue
                s = states[idx]
                edot = s.de_dt + s.jac @ v_try
                self.last_cone_evaluations += 1
                if not in_tangent_cone(s.e, s.lo, s.hi, edot, eps, mode_1d):
                    ok = False
                    break
            if ok:
                chosen = mode_no
                v = v_try
                break
        toc = time.perf_counter()
        if chosen is None:
            return ControlStepResult(
                qdot=np.zeros(self.n_q), xdot=np.zeros(self.n_x),
                slack=np.zeros(0), mode=0, solve_time=toc - tic,
                status="no-admissible-mode")
        return ControlStepResult(
            qdot=v[:self.n_q].copy(), xdot=v[self.n_q:].copy(), slack=np.zeros(0),
            mode=chosen, solve_time=toc - tic, status="optimal")


def compile_pinv(skill: SkillSpecification,
                 options: ControllerOptions | None = None) -> PinvController:
    return PinvController(skill, options or ControllerOptions())


# ----------------------------------------------------------------------
# initialization (virtual variables and slack at t0)


def initialize(controller, t0, q0, y0=None, x0=None):
    """Initial (x0, eps0) for a compiled controller.

    Optimization controllers: x0 minimizes the position-level weighted
    residual of the constraints at q0 (hard set constraints enforced), then
    eps0 comes from solving the velocity-level problem with qdot pinned to
    zero. The pinv controller takes x0 from the caller and validates set
    membership instead (it has no optimization stage).
    """
    skill = controller.skill
    vs = skill.variables
    q0 = np.asarray(q0, dtype=float).ravel()
    n_x = vs.n_virtual

    if controller.kind == "pinv":
        if n_x and x0 is None:
            raise InitializationError(
                "the null-space controller needs an explicit virtual-variable start")
        x_val = np.zeros(0) if not n_x else np.asarray(x0, dtype=float).ravel()
        states = controller.functions.evaluate(t0, q0, x_val if n_x else None, y0)
        eps = controller.options.activation_epsilon
        for s in states:
            if s.constraint.kind == "set":
                if np.any(s.e < s.lo - eps) or np.any(s.e > s.hi + eps):
                    raise InitializationError(
                        f"set constraint {s.constraint.label!r} violated at the "
                        "start configuration; the controller must start inside the sets")
        return x_val, np.zeros(0)

    if n_x:
        if x0 is None:
            x0 = _position_level_x0(skill, t0, q0, y0)
        else:
            x0 = np.asarray(x0, dtype=float).ravel()
    else:
        x0 = np.zeros(0)

    states = controller.functions.evaluate(t0, q0, x0 if n_x else None, y0)
    assembler = _RowAssembler(skill)
    A, lb, ub = assembler.assemble(states)
    nv = assembler.n_v
    ns = assembler.n_slack
    # pin qdot to zero: drop its columns
    A_red = A[:, skill.n_robot:]
    n_red = A_red.shape[1]
    H = np.zeros((n_red, n_red))
    c = controller.options.regularization
    if n_x:
        Wx = _weight_matrix(controller.options.weight_virtual, n_x, "weight_virtual")
        H[:n_x, :n_x] = 2.0 * c * Wx
    if ns:
        H[n_x:, n_x:] = 2.0 * (1.0 + c) * np.diag(assembler.slack_weights)
    res = sv.solve_qp(sv.QuadraticProgram(H, np.zeros(n_red), A_red, lb, ub),
                      check=False)
    if res.status != "optimal":
        raise InitializationError(f"initialization solve failed: {res.status}")
    return x0, res.x_star[n_x:]


def _position_level_x0(skill: SkillSpecification, t0, q0, y0):
    """Choose x0 minimizing the weighted position-level residual at q0."""
    vs = skill.variables
    u = eg.Universe()
    xsym = u.variable("x_init", vs.virtual.shape)
    subs = {vs.time: eg.constant(float(t0)), vs.robot: eg.constant(q0),
            vs.virtual: xsym}
    if vs.input is not None:
        if y0 is None:
            raise InitializationError("skill has inputs; initialization needs y0")
        subs[vs.input] = eg.constant(np.asarray(y0, dtype=float).reshape(-1, 1))
    cost = 1e-6 * eg.dot(xsym, xsym)
    cons = []
    for c in skill.constraints:
        e_sub = eg.substitute(c.expression, subs)
        if c.kind == "equality":
            cost = cost + c.slack_weight * eg.dot(e_sub, e_sub)
        elif c.kind == "set" and not isinstance(c.set_min, Expr) \
                and not isinstance(c.set_max, Expr):
            if vs.virtual in eg.free_variables(c.expression):
                cons.append((e_sub, c.set_min.ravel(), c.set_max.ravel()))
    nlp = sv.NonlinearProgram(xsym.var, cost, cons, np.zeros(vs.n_virtual))
    res = sv.solve_nlp(nlp)
    if res.status not in ("optimal", "max-iterations"):
        raise InitializationError(f"virtual-variable initialization failed: {res.status}")
    return res.x_star

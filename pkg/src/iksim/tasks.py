"""Constraint and skill specification.

A task pairs an output expression with a control objective. Four kinds are
supported: holding an expression at zero (``equality``), keeping it inside
bounds (``set``), following a target derivative (``velocity-equality``) and
bounding the derivative (``velocity-set``). A skill is a labeled,
priority-sorted collection of constraints sharing one set of variables.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import exprgraph as eg
from .exprgraph import Expr, VarSymbol, ShapeError

__all__ = [
    "KINDS",
    "VariableSet",
    "Constraint",
    "SkillSpecification",
    "new_constraint",
    "equality_constraint",
    "set_constraint",
    "velocity_equality_constraint",
    "velocity_set_constraint",
    "new_skill",
    "constraint_jacobians",
]

KINDS = ("equality", "set", "velocity-equality", "velocity-set")

DEFAULT_SLACK_WEIGHT = 100.0


def _symbol_of(x) -> VarSymbol:
    if isinstance(x, Expr):
        if x.kind != "variable":
            raise ValueError("expected a variable expression")
        return x.var
    if isinstance(x, VarSymbol):
        return x
    raise TypeError(f"expected VarSymbol or variable Expr, got {type(x).__name__}")


@dataclass(frozen=True)
class VariableSet:
    """The symbols for time t, robot q, virtual x, and input y."""

    time: VarSymbol
    robot: VarSymbol
    virtual: VarSymbol | None = None
    input: VarSymbol | None = None

    def __post_init__(self):
        object.__setattr__(self, "time", _symbol_of(self.time))
        object.__setattr__(self, "robot", _symbol_of(self.robot))
        for name in ("virtual", "input"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _symbol_of(v))
        if self.time.shape != (1, 1):
            raise ShapeError("time variable must be scalar")
        if self.robot.shape[1] != 1 or self.robot.shape[0] < 1:
            raise ShapeError("robot variable must be a column vector with n_q >= 1")
        syms = [self.time, self.robot]
        for v in (self.virtual, self.input):
            if v is not None:
                if v.shape[1] != 1:
                    raise ShapeError(f"{v.name} must be a column vector")
                syms.append(v)
        if len({id(s) for s in syms}) != len(syms):
            raise ValueError("variable symbols must be distinct")

    @property
    def n_robot(self) -> int:
        return self.robot.shape[0]

    @property
    def n_virtual(self) -> int:
        return self.virtual.shape[0] if self.virtual is not None else 0

    @property
    def n_input(self) -> int:
        return self.input.shape[0] if self.input is not None else 0

    def all_symbols(self) -> list[VarSymbol]:
        out = [self.time, self.robot]
        if self.virtual is not None:
            out.append(self.virtual)
        if self.input is not None:
            out.append(self.input)
        return out


def _as_bound(value, n_e: int, what: str):
    """Bounds and targets may be numeric constants or expressions."""
    if isinstance(value, Expr):
        if value.shape != (n_e, 1):
            raise ShapeError(f"{what} must have shape ({n_e}, 1), got {value.shape}")
        return value
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.size == 1 and n_e > 1:
        arr = np.full(n_e, arr[0])
    if arr.size != n_e:
        raise ShapeError(f"{what} must have {n_e} entries, got {arr.size}")
    return arr.reshape(n_e, 1)


@dataclass(frozen=True)
class Constraint:
    """One task: output expression + control objective.

    ``gain`` applies to equality and set kinds and may be a positive scalar,
    a constant positive-definite matrix, or a scalar expression over the
    skill variables. Set kinds carry ``set_min``/``set_max``;
    velocity-equality carries ``target``; velocity-set carries bounds but no
    gain. ``priority`` matters to the null-space controller only, while
    soft/hard and ``slack_weight`` matter to the optimization controllers.
    """

    label: str
    kind: str
    expression: Expr
    gain: object = None
    set_min: object = None
    set_max: object = None
    target: object = None
    constraint_type: str = "soft"
    priority: int = 0
    slack_weight: float = DEFAULT_SLACK_WEIGHT

    @property
    def n_e(self) -> int:
        return self.expression.shape[0]

    @property
    def is_soft(self) -> bool:
        return self.constraint_type == "soft"


def new_constraint(label, kind, expression, gain=None, set_min=None, set_max=None,
                   target=None, constraint_type="soft", priority=0,
                   slack_weight=None) -> Constraint:
    """Validate and build a constraint; raises on any field/kind mismatch."""
    if kind not in KINDS:
        raise ValueError(f"unknown constraint kind {kind!r}; expected one of {KINDS}")
    if not isinstance(expression, Expr):
        raise TypeError("expression must be an Expr")
    if expression.shape[1] != 1:
        raise ShapeError(f"constraint expression must be a column vector, got {expression.shape}")
    if constraint_type not in ("soft", "hard"):
        raise ValueError("constraint_type must be 'soft' or 'hard'")
    if priority < 0:
        raise ValueError("priority must be >= 0")
    n_e = expression.shape[0]

    uses_gain = kind in ("equality", "set")
    if uses_gain:
        if gain is None:
            gain = 1.0
        gain = _validate_gain(gain, n_e, kind)
    elif gain is not None:
        raise ValueError(f"{kind} constraints take no gain")

    if kind == "set":
        if set_min is None or set_max is None:
            raise ValueError("set constraints need set_min and set_max")
        set_min = _as_bound(set_min, n_e, "set_min")
        set_max = _as_bound(set_max, n_e, "set_max")
        _check_bound_order(set_min, set_max)
    elif kind == "velocity-set":
        if set_min is None or set_max is None:
            raise ValueError("velocity-set constraints need set_min and set_max")
        set_min = _as_bound(set_min, n_e, "set_min")
        set_max = _as_bound(set_max, n_e, "set_max")
        _check_bound_order(set_min, set_max)
    elif set_min is not None or set_max is not None:
        raise ValueError(f"{kind} constraints take no set bounds")

    if kind == "velocity-equality":
        if target is None:
            raise ValueError("velocity-equality constraints need a target")
        target = _as_bound(target, n_e, "target")
        if not isinstance(target, Expr):
            target = eg.constant(target)
    elif target is not None:
        raise ValueError(f"{kind} constraints take no target")

    if slack_weight is None:
        slack_weight = DEFAULT_SLACK_WEIGHT
    if slack_weight <= 0:
        raise ValueError("slack_weight must be positive")

    return Constraint(label=label, kind=kind, expression=expression, gain=gain,
                      set_min=set_min, set_max=set_max, target=target,
                      constraint_type=constraint_type, priority=int(priority),
                      slack_weight=float(slack_weight))


def _validate_gain(gain, n_e: int, kind: str):
    if isinstance(gain, Expr):
        if gain.shape != (1, 1):
            raise ValueError("expression gains must be scalar")
        return gain
    arr = np.asarray(gain, dtype=float)
    if arr.ndim == 0:
        if arr <= 0:
            raise ValueError("scalar gain must be positive")
        return float(arr)
    if arr.shape != (n_e, n_e):
        raise ShapeError(f"matrix gain must be {n_e}x{n_e}, got {arr.shape}")
    if np.max(np.abs(arr - arr.T)) > 1e-10:
        raise ValueError("matrix gain must be symmetric")
    if np.min(np.linalg.eigvalsh(arr)) <= 0:
        raise ValueError("matrix gain must be positive definite")
    if kind == "set" and np.max(np.abs(arr - np.diag(np.diag(arr)))) > 1e-12:
        raise ValueError("set-constraint matrix gains must be diagonal")
    return arr


def _check_bound_order(lo, hi):
    if not isinstance(lo, Expr) and not isinstance(hi, Expr):
        if np.any(lo > hi):
            raise ValueError("set_min must be <= set_max elementwise")


def equality_constraint(label, expression, gain=1.0, constraint_type="soft",
                        priority=0, slack_weight=None) -> Constraint:
    return new_constraint(label, "equality", expression, gain=gain,
                          constraint_type=constraint_type, priority=priority,
                          slack_weight=slack_weight)


def set_constraint(label, expression, set_min, set_max, gain=1.0,
                   constraint_type="soft", priority=0, slack_weight=None) -> Constraint:
    return new_constraint(label, "set", expression, gain=gain, set_min=set_min,
                          set_max=set_max, constraint_type=constraint_type,
                          priority=priority, slack_weight=slack_weight)


def velocity_equality_constraint(label, expression, target, constraint_type="soft",
                                 priority=0, slack_weight=None) -> Constraint:
    return new_constraint(label, "velocity-equality", expression, target=target,
                          constraint_type=constraint_type, priority=priority,
                          slack_weight=slack_weight)


def velocity_set_constraint(label, expression, set_min, set_max,
                            constraint_type="hard", priority=0,
                            slack_weight=None) -> Constraint:
    return new_constraint(label, "velocity-set", expression, set_min=set_min,
                          set_max=set_max, constraint_type=constraint_type,
                          priority=priority, slack_weight=slack_weight)


@dataclass(frozen=True)
class SkillSpecification:
    """Named constraint collection, sorted ascending by priority (stable)."""

    label: str
    variables: VariableSet
    constraints: tuple[Constraint, ...]
    n_slack: int

    @property
    def n_robot(self) -> int:
        return self.variables.n_robot

    @property
    def n_virtual(self) -> int:
        return self.variables.n_virtual

    def soft_constraints(self):
        return [c for c in self.constraints if c.is_soft]


def new_skill(label: str, variables: VariableSet, constraints) -> SkillSpecification:
    """Assemble a skill; validates symbol coverage and computes slack size."""
    constraints = list(constraints)
    if not constraints:
        raise ValueError("a skill needs at least one constraint")
    allowed = set(variables.all_symbols())
    for c in constraints:
        exprs = [c.expression]
        for extra in (c.gain, c.set_min, c.set_max, c.target):
            if isinstance(extra, Expr):
                exprs.append(extra)
        for e in exprs:
            for sym in eg.free_variables(e):
                if sym not in allowed:
                    raise ValueError(
                        f"constraint {c.label!r} uses symbol {sym.name!r} which is "
                        f"not in the skill's variable set"
                    )
    ordered = sorted(constraints, key=lambda c: c.priority)  # stable
    n_slack = sum(c.n_e for c in ordered if c.is_soft)
    return SkillSpecification(label=label, variables=variables,
                              constraints=tuple(ordered), n_slack=n_slack)


def constraint_jacobians(c: Constraint, v: VariableSet):
    """(de/dt, de/dq, de/dx) expressions; the input derivative is never formed.

    de/dx is None when the skill has no virtual variable.
    """
    e = c.expression
    d_t = eg.jacobian(e, v.time)
    d_q = eg.jacobian(e, v.robot)
    d_x = eg.jacobian(e, v.virtual) if v.virtual is not None else None
    return d_t, d_q, d_x

"""Built-in scenarios and scenario-file handling.

Each builder returns a :class:`SkillBundle` (skill, optional velocity-level
cost, default start configuration, simulator velocity limit). Builders take
the controller kind because some defaults are controller-dependent (the
predictive controller gets set gain 1 where the reactive ones use 100, and
the null-space controller cannot carry velocity-set constraints, so speed
limits fall to the simulator clamp instead).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import dsl, exprgraph as eg, kinematics as kin, tasks as tk
from .controllers import ControllerOptions, velocity_symbols
from .exprgraph import Expr

__all__ = [
    "ScenarioError",
    "RobotContext",
    "SkillBundle",
    "Scenario",
    "builder_names",
    "builder_info",
    "build_scenario",
    "load_robot",
    "scenario_from_config",
    "InputTrace",
]

TWO_PI = 2.0 * math.pi
SPEED_LIMIT_DEFAULT = math.pi / 5.0


class ScenarioError(ValueError):
    pass


@dataclass
class RobotContext:
    """A loaded robot plus the symbols and FK expressions builders share."""

    model: kin.RobotModel
    root: str
    tip: str
    universe: eg.Universe
    t: Expr
    q: Expr

    @classmethod
    def create(cls, model: kin.RobotModel, root: str, tip: str,
               n_input: int = 0) -> "RobotContext":
        u = eg.Universe()
        t = u.variable("t")
        n_q = len(model.actuated_joints(root, tip))
        q = u.variable("q", (n_q, 1))
        ctx = cls(model=model, root=root, tip=tip, universe=u, t=t, q=q)
        ctx.y = u.variable("y", (n_input, 1)) if n_input else None
        return ctx

    @property
    def n_q(self) -> int:
        return self.q.shape[0]

    def fk(self) -> Expr:
        if not hasattr(self, "_fk"):
            self._fk = kin.fk_transform(self.model, self.root, self.tip, self.q)
        return self._fk

    def fk_pos(self) -> Expr:
        return self.fk()[0:3, 3]

    def fk_rot(self) -> Expr:
        return self.fk()[0:3, 0:3]

    def fk_dq(self) -> Expr:
        if not hasattr(self, "_fk_dq"):
            self._fk_dq = kin.fk_dualquat(self.model, self.root, self.tip, self.q)
        return self._fk_dq

    def variable_set(self) -> tk.VariableSet:
        return tk.VariableSet(time=self.t, robot=self.q,
                              input=getattr(self, "y", None))

    def dsl_functions(self) -> dict:
        fns = dsl.default_functions()

        def _expects_q(builder):
            def wrapped(arg):
                if arg.kind != "variable" or arg.var is not self.q.var:
                    raise ValueError("expects the robot variable q")
                return builder()
            return wrapped

        fns["fk_pos"] = _expects_q(self.fk_pos)
        fns["fk_rot"] = _expects_q(self.fk_rot)
        fns["fk_dq"] = _expects_q(self.fk_dq)
        return fns


@dataclass
class SkillBundle:
    skill: tk.SkillSpecification
    cost: Expr | None = None
    q0: np.ndarray | None = None
    x0: np.ndarray | None = None
    velocity_limit: np.ndarray | None = None
    references: dict = field(default_factory=dict)


@dataclass
class Scenario:
    """A fully resolved scenario, ready to run."""

    name: str
    robot: RobotContext
    builder: str
    params: dict
    controller_kind: str
    controller_options: ControllerOptions
    duration: float
    dt: float
    q0: np.ndarray
    bundle: SkillBundle
    input_trace: "InputTrace | None" = None
    velocity_limit: np.ndarray | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ScenarioError("dt must be > 0")
        if self.duration < 0 or (self.duration and self.duration < self.dt):
            raise ScenarioError("duration must be 0 or >= dt")
        if self.q0.size != self.robot.n_q:
            raise ScenarioError(
                f"q0 has {self.q0.size} entries, robot has {self.robot.n_q} joints")


class InputTrace:
    """Time-stamped input table with zero-order hold sampling."""

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = np.asarray(times, dtype=float).ravel()
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.times.size:
            raise ScenarioError("input trace values must be one row per time stamp")
        if np.any(np.diff(self.times) < 0):
            raise ScenarioError("input trace time stamps must be monotone")

    @classmethod
    def from_csv_text(cls, text: str) -> "InputTrace":
        rows = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not rows:
            raise ScenarioError("empty input trace")
        header = [c.strip() for c in rows[0].split(",")]
        if header[0] != "t":
            raise ScenarioError("input trace header must start with 't'")
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]])
        if data.ndim != 2 or data.shape[1] != len(header):
            raise ScenarioError("input trace rows do not match the header")
        return cls(data[:, 0], data[:, 1:])

    @classmethod
    def from_file(cls, path) -> "InputTrace":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv_text(fh.read())

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def sample(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right") - 1)
        idx = max(idx, 0)
        return self.values[idx]


# ----------------------------------------------------------------------
# builders


def _tracking_trajectory_bounded(t: Expr) -> Expr:
    s = eg.sin(0.1 * t)
    c = eg.cos(0.1 * t)
    return eg.vertcat(0.5 * s * s + 0.2,
                      0.5 * c + 0.25 * s,
                      0.5 * s * c + 0.7)


def _circle_trajectory(t: Expr) -> Expr:
    return eg.vertcat(0.1 * eg.cos(0.05 * t - 0.5 * math.pi) + 0.45,
                      0.1 * eg.sin(0.05 * t - 0.5 * math.pi) + 0.4,
                      eg.constant(0.3))


def _default_cost(ctx: RobotContext, vs: tk.VariableSet) -> Expr:
    qd, _ = velocity_symbols(vs)
    return eg.dot(qd, qd)


def build_frame_matching(ctx: RobotContext, params: dict, controller_kind: str,
                         dt: float) -> SkillBundle:
    representation = params.get("representation", "matrix")
    p_des = np.asarray(params.get("p_des", [0.5, 0.0, 0.5]), dtype=float)
    roll = float(params.get("roll", 5.0 * math.pi / 180.0))
    gain = float(params.get("gain", 1.0))
    set_gain = float(params.get("set_gain", 100.0))
    speed = float(params.get("speed_limit", SPEED_LIMIT_DEFAULT))
    joint_range = float(params.get("joint_range", TWO_PI))

    R_des = kin.rpy_to_rotation(roll, 0.0, 0.0)
    if representation == "matrix":
        e = eg.vertcat(ctx.fk_pos() - eg.constant(p_des.reshape(3, 1)),
                       kin.rotation_frobenius_error(ctx.fk_rot(), R_des))
    elif representation == "dq":
        T_des = np.eye(4)
        T_des[:3, :3] = R_des
        T_des[:3, 3] = p_des
        dq_des = kin.dq_from_transform(T_des)
        M = kin.hamilton_minus(dq_des) @ kin.dq_conjugate_matrix()
        e = eg.constant(M) @ (eg.constant(dq_des.reshape(8, 1)) - ctx.fk_dq())
    else:
        raise ScenarioError(f"unknown representation {representation!r}")

    vs = ctx.variable_set()
    constraints = [
        tk.set_constraint("joint_box", ctx.q, -joint_range, joint_range,
                          gain=set_gain, constraint_type="hard", priority=1),
        tk.equality_constraint("frame_error", e, gain=gain,
                               constraint_type="soft", priority=3),
    ]
    if controller_kind != "pinv":
        constraints.insert(1, tk.velocity_set_constraint(
            "speed_box", ctx.q, -speed, speed, constraint_type="hard", priority=2))
    skill = tk.new_skill(f"frame_matching_{representation}", vs, constraints)
    return SkillBundle(
        skill=skill, cost=_default_cost(ctx, vs),
        q0=np.asarray(params.get("q0", UR5_Q0_FRAME), dtype=float),
        velocity_limit=np.full(ctx.n_q, speed),
        references={"p_des": p_des, "R_des": R_des, "representation": representation})


def build_bounded_workspace(ctx: RobotContext, params: dict, controller_kind: str,
                            dt: float) -> SkillBundle:
    mode = params.get("mode", "multidim")
    default_gain = 1.0 if controller_kind == "mpc" else 100.0
    set_gain = float(params.get("set_gain", default_gain))
    gain = float(params.get("gain", 1.0))
    p_l = np.asarray(params.get("p_min", [0.1, -0.5, 0.3]), dtype=float)
    p_u = np.asarray(params.get("p_max", [0.5, 0.4, 0.85]), dtype=float)

    p = ctx.fk_pos()
    p_des = _tracking_trajectory_bounded(ctx.t)
    vs = ctx.variable_set()
    constraints = []
    if mode == "multidim":
        constraints.append(tk.set_constraint(
            "box", p, p_l, p_u, gain=set_gain, constraint_type="hard", priority=1))
    elif mode == "per_axis":
        for i, axis in enumerate("xyz"):
            constraints.append(tk.set_constraint(
                f"box_{axis}", p[i], [p_l[i]], [p_u[i]], gain=set_gain,
                constraint_type="hard", priority=i))
    else:
        raise ScenarioError(f"unknown set mode {mode!r}")
    constraints.append(tk.equality_constraint(
        "tracking", p - p_des, gain=gain, constraint_type="soft", priority=3))
    skill = tk.new_skill(f"bounded_workspace_{mode}", vs, constraints)
    return SkillBundle(
        skill=skill, cost=_default_cost(ctx, vs),
        q0=np.asarray(params.get("q0", UR5_Q0_BOX), dtype=float),
        references={"p_min": p_l, "p_max": p_u})


def build_manipulability(ctx: RobotContext, params: dict, controller_kind: str,
                         dt: float) -> SkillBundle:
    alpha = float(params.get("alpha", 500.0))
    slack_weight = float(params.get("slack_weight", 2000.0))
    gain = float(params.get("gain", 1.0))
    set_gain = float(params.get("set_gain", 10.0))

    lo, hi = ctx.model.joint_limits(ctx.root, ctx.tip)
    if not np.all(np.isfinite(lo)):
        raise ScenarioError("manipulability scenario needs joint limits on the model")
    p = ctx.fk_pos()
    p_des = _circle_trajectory(ctx.t)
    vs = ctx.variable_set()
    constraints = [
        tk.set_constraint("joint_limits", ctx.q, lo, hi, gain=set_gain,
                          constraint_type="hard", priority=1),
        tk.equality_constraint("tracking", p - p_des, gain=gain,
                               constraint_type="soft", priority=3,
                               slack_weight=slack_weight),
    ]
    skill = tk.new_skill("manipulability", vs, constraints)

    qd, _ = velocity_symbols(vs)
    J_p = eg.jacobian(p, ctx.q)
    # manipulability of the next configuration; squaring removes the sqrt
    J_next = eg.substitute(J_p, {ctx.q.var: ctx.q + dt * qd})
    m_sq = eg.det(J_next @ J_next.T)
    cost = eg.dot(qd, qd) - alpha * m_sq
    return SkillBundle(
        skill=skill, cost=cost,
        q0=np.asarray(params.get("q0", IIWA_Q0_CIRCLE), dtype=float),
        references={"alpha": alpha, "position_jacobian": J_p})


def build_marker_tracking(ctx: RobotContext, params: dict, controller_kind: str,
                          dt: float) -> SkillBundle:
    if getattr(ctx, "y", None) is None or ctx.y.shape != (3, 1):
        raise ScenarioError("marker tracking needs a 3-dimensional input variable")
    gain = float(params.get("gain", 1.0))
    speed = float(params.get("speed_limit", 3.0))
    vs = ctx.variable_set()
    constraints = [
        tk.equality_constraint("marker", ctx.fk_pos() - ctx.y, gain=gain,
                               constraint_type="soft", priority=3),
    ]
    if controller_kind != "pinv":
        constraints.insert(0, tk.velocity_set_constraint(
            "speed_box", ctx.q, -speed, speed, constraint_type="hard", priority=1))
    skill = tk.new_skill("marker_tracking", vs, constraints)
    return SkillBundle(
        skill=skill, cost=_default_cost(ctx, vs),
        q0=np.asarray(params.get("q0", UR5_Q0_FRAME), dtype=float),
        velocity_limit=np.full(ctx.n_q, speed))


def build_compliance_sim(ctx: RobotContext, params: dict, controller_kind: str,
                         dt: float) -> SkillBundle:
    if getattr(ctx, "y", None) is None or ctx.y.shape != (6, 1):
        raise ScenarioError("compliance needs a 6-dimensional wrench input [f; tau]")
    k_f = float(params.get("k_f", 0.01))
    k_t = float(params.get("k_t", 0.1))
    set_gain = float(params.get("set_gain", 100.0))
    p_l = np.asarray(params.get("p_min", [-0.7, -0.4, -0.2]), dtype=float)
    p_u = np.asarray(params.get("p_max", [-0.3, 0.5, 0.5]), dtype=float)

    f = ctx.y[0:3]
    tau = ctx.y[3:6]
    Q_r = ctx.fk_dq()[0:4]
    # translational compliance in world frame, rotational via the quaternion
    # derivative 0.5 * (Q_r (x) [tau; 0]) scaled by the damping factor
    v_target = k_f * (ctx.fk_rot() @ f)
    tau_pure = eg.vertcat(tau, eg.constant(0.0))
    qdot_target = (0.5 * k_t) * (kin.quat_hamilton_minus_expr(tau_pure) @ Q_r)
    expression = eg.vertcat(ctx.fk_pos(), Q_r)
    target = eg.vertcat(v_target, qdot_target)

    vs = ctx.variable_set()
    constraints = [
        tk.set_constraint("box", ctx.fk_pos(), p_l, p_u, gain=set_gain,
                          constraint_type="hard", priority=1),
        tk.velocity_equality_constraint("comply", expression, target=target,
                                        constraint_type="soft", priority=3),
    ]
    skill = tk.new_skill("compliance", vs, constraints)
    return SkillBundle(
        skill=skill, cost=_default_cost(ctx, vs),
        q0=np.asarray(params.get("q0", UR5_Q0_COMPLIANCE), dtype=float),
        references={"k_f": k_f, "k_t": k_t, "p_min": p_l, "p_max": p_u})


def build_custom(ctx: RobotContext, params: dict, controller_kind: str,
                 dt: float) -> SkillBundle:
    spec = params.get("constraints")
    if not spec:
        raise ScenarioError("custom scenario needs a 'constraints' list")
    vs = ctx.variable_set()
    qd, xd = velocity_symbols(vs)
    names = {sym.name: Expr._variable(sym) for sym in vs.all_symbols()}
    fns = ctx.dsl_functions()

    def parse(text):
        return dsl.parse_expression(text, names, fns)

    def parse_value(v, what):
        if isinstance(v, str):
            return parse(v)
        return v

    constraints = []
    for i, cdef in enumerate(spec):
        kind = cdef.get("kind", "equality")
        label = cdef.get("label", f"constraint_{i}")
        if "expression" not in cdef:
            raise ScenarioError(f"constraint {label!r} has no expression")
        expr = parse(cdef["expression"])
        constraints.append(tk.new_constraint(
            label, kind, expr,
            gain=parse_value(cdef.get("gain"), "gain") if kind in ("equality", "set") else None,
            set_min=parse_value(cdef.get("set_min"), "set_min"),
            set_max=parse_value(cdef.get("set_max"), "set_max"),
            target=parse_value(cdef.get("target"), "target"),
            constraint_type=cdef.get("constraint_type", "soft"),
            priority=cdef.get("priority", 0),
            slack_weight=cdef.get("slack_weight"),
        ))
    skill = tk.new_skill(params.get("label", "custom"), vs, constraints)
    cost = _default_cost(ctx, vs)
    if "cost" in params:
        cost_names = dict(names)
        cost_names[qd.var.name] = qd
        if xd is not None:
            cost_names[xd.var.name] = xd
        cost = dsl.parse_expression(params["cost"], cost_names, fns)
    q0 = params.get("q0")
    return SkillBundle(skill=skill, cost=cost,
                       q0=None if q0 is None else np.asarray(q0, dtype=float))


# start configurations for the bundled robots, solved offline so the
# end-effector begins at a sensible pose for each scenario:
# frame:      p ~ (0.10, -0.45, 0.30), 0.63 m from the target frame
# box:        p ~ (0.20,  0.35, 0.70), inside the workspace box
# compliance: p ~ (-0.50, 0.05, 0.15), inside the safety box
# circle:     p ~ (0.45,  0.30, 0.30), on the circular path at t = 0
UR5_Q0_FRAME = np.array([1.4023, -1.5682, 1.8793, -1.3145, -0.6718, 0.2])
UR5_Q0_BOX = np.array([1.298, -2.7376, 0.8932, -0.9977, -1.7012, 0.0])
UR5_Q0_COMPLIANCE = np.array([-3.0171, -1.8771, -1.8781, -1.4784, 1.5405, 0.0])
IIWA_Q0_CIRCLE = np.array([0.5933, 0.6484, -0.0059, -1.6603, -0.001, 0.9018, 0.0])

_BUILDERS = {
    "frame_matching": (build_frame_matching,
                       "Match a desired end-effector frame (matrix or dual-quaternion error)"),
    "bounded_workspace": (build_bounded_workspace,
                          "Track a Cartesian trajectory while staying inside a box"),
    "manipulability": (build_manipulability,
                       "Track a circle while maximizing the velocity-ellipsoid volume"),
    "marker_tracking": (build_marker_tracking,
                        "Track an externally supplied marker position (input variable)"),
    "compliance_sim": (build_compliance_sim,
                       "Velocity-resolved force/torque compliance inside a safety box"),
    "custom": (build_custom, "Constraints written in the scenario-file expression DSL"),
}

_INPUT_WIDTH = {"marker_tracking": 3, "compliance_sim": 6}

_DEFAULT_ROBOT = {
    "frame_matching": "ur5",
    "bounded_workspace": "ur5",
    "marker_tracking": "ur5",
    "compliance_sim": "ur5",
    "manipulability": "iiwa14",
}


def builder_names() -> list[str]:
    return sorted(_BUILDERS)


def builder_info() -> list[dict]:
    return [{"name": n, "description": _BUILDERS[n][1],
             "default_robot": _DEFAULT_ROBOT.get(n)}
            for n in builder_names()]


def build_scenario(name: str, ctx: RobotContext, params: dict | None = None,
                   controller_kind: str = "qp", dt: float = 0.008) -> SkillBundle:
    """Instantiate a named builder for a robot context."""
    if name not in _BUILDERS:
        raise ScenarioError(f"unknown scenario builder {name!r}; have {builder_names()}")
    builder, _ = _BUILDERS[name]
    params = dict(params or {})
    bundle = builder(ctx, params, controller_kind, dt)
    return bundle


def input_width(builder: str, params: dict | None = None) -> int:
    if builder == "custom":
        return int((params or {}).get("input_dim", 0))
    return _INPUT_WIDTH.get(builder, 0)


# ----------------------------------------------------------------------
# scenario files


def load_robot(robot_cfg: dict, base_dir=None, n_input: int = 0) -> RobotContext:
    rtype = robot_cfg.get("type", "dh")
    source = robot_cfg.get("source")
    if source is None:
        raise ScenarioError("robot.source is required")
    root = robot_cfg.get("root", "base_link")
    tip = robot_cfg.get("tip", "tool0")

    def _resolve(text_or_path):
        if isinstance(text_or_path, str) and "\n" not in text_or_path \
                and not text_or_path.lstrip().startswith(("<", "{")):
            path = text_or_path
            if base_dir is not None and not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            if not os.path.exists(path):
                raise ScenarioError(f"robot source file not found: {text_or_path}")
            with open(path, "r", encoding="utf-8") as fh:
                return fh.read()
        return text_or_path

    if source in kin.builtin_model_names():
        model = kin.load_builtin_model(source, form="urdf" if rtype == "urdf" else "dh")
    elif rtype == "dh":
        rows, name = kin.load_dh_json(_resolve(source))
        model = kin.dh_to_model(rows, name)
    elif rtype == "urdf":
        model = kin.parse_urdf(_resolve(source))
    else:
        raise ScenarioError(f"unknown robot type {rtype!r}")
    if root not in model.links or tip not in model.links:
        raise ScenarioError(f"model has no links {root!r}/{tip!r}")
    return RobotContext.create(model, root, tip, n_input=n_input)


def scenario_from_config(config: dict, base_dir=None) -> Scenario:
    """Resolve a scenario-file dictionary into a runnable Scenario."""
    try:
        name = config.get("name", "scenario")
        builder = config["builder"]
        controller_cfg = config.get("controller", {})
        controller_kind = controller_cfg.get("kind", "qp")
        if controller_kind not in ("qp", "nlp", "mpc", "pinv"):
            raise ScenarioError(f"unknown controller kind {controller_kind!r}")
        params = dict(config.get("params", {}))
        duration = float(config.get("duration_s", 10.0))
        dt = float(config.get("dt_s", 0.008))

        robot_cfg = dict(config.get("robot") or {})
        if not robot_cfg:
            default = _DEFAULT_ROBOT.get(builder)
            if default is None:
                raise ScenarioError("scenario needs a robot section")
            robot_cfg = {"type": "dh", "source": default}
        ctx = load_robot(robot_cfg, base_dir,
                         n_input=input_width(builder, params))

        opts_cfg = dict(controller_cfg.get("options", {}))
        if controller_kind == "mpc" and "timestep" not in opts_cfg:
            opts_cfg["timestep"] = dt
        options = ControllerOptions(**opts_cfg)

        bundle = build_scenario(builder, ctx, params, controller_kind, dt)

        q0 = config.get("q0", None)
        if q0 is None:
            if bundle.q0 is None:
                raise ScenarioError("scenario needs q0 (builder has no default)")
            q0 = bundle.q0
        q0 = np.asarray(q0, dtype=float).ravel()

        trace = None
        trace_cfg = config.get("input_trace")
        if trace_cfg is not None:
            if isinstance(trace_cfg, str):
                path = trace_cfg
                if base_dir is not None and not os.path.isabs(path):
                    path = os.path.join(base_dir, path)
                trace = InputTrace.from_file(path)
            elif isinstance(trace_cfg, dict) and "csv" in trace_cfg:
                trace = InputTrace.from_csv_text(trace_cfg["csv"])
            else:
                raise ScenarioError("input_trace must be a path or {'csv': text}")
        needed = input_width(builder, params)
        if needed and trace is None:
            raise ScenarioError(f"builder {builder!r} needs an input trace")
        if trace is not None and needed and trace.width != needed:
            raise ScenarioError(
                f"input trace has {trace.width} columns, builder needs {needed}")

        vlim = config.get("velocity_limit", None)
        if vlim is not None:
            vlim = np.asarray(vlim, dtype=float).ravel()
            if vlim.size == 1:
                vlim = np.full(ctx.n_q, float(vlim))
            if np.any(vlim < 0):
                raise ScenarioError("velocity_limit must be non-negative")
        else:
            vlim = bundle.velocity_limit

        x0 = config.get("x0")
        if x0 is not None:
            x0 = np.asarray(x0, dtype=float).ravel()
        elif bundle.x0 is not None:
            x0 = bundle.x0

        return Scenario(name=name, robot=ctx, builder=builder, params=params,
                        controller_kind=controller_kind, controller_options=options,
                        duration=duration, dt=dt, q0=q0, bundle=bundle,
                        input_trace=trace, velocity_limit=vlim, x0=x0)
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"bad scenario config: {exc}") from exc


def load_scenario_file(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    return scenario_from_config(config, base_dir=os.path.dirname(os.path.abspath(path)))

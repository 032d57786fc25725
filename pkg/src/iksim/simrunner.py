"""Scenario execution: Euler simulation at joint-velocity level.

Commanded velocities are applied directly (the robot is assumed to track
velocity setpoints within one control period), optionally clamped
elementwise by the scenario's velocity limit, and integrated with forward
Euler. Inputs are sampled with zero-order hold. Each step is logged with
per-constraint error norms and the solver wall time.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import controllers as ct
from .scenarios import Scenario

__all__ = [
    "euler_step",
    "clamp_velocity",
    "TrajectoryRecord",
    "RuntimeStats",
    "ScenarioAborted",
    "compile_controller",
    "run_scenario",
    "write_trajectory",
    "read_trajectory",
    "write_stats",
]


def euler_step(q: np.ndarray, qdot: np.ndarray, dt: float) -> np.ndarray:
    """q + qdot * dt."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    return np.asarray(q, dtype=float) + np.asarray(qdot, dtype=float) * dt


def clamp_velocity(qdot: np.ndarray, limit: np.ndarray) -> np.ndarray:
    """Elementwise clamp to [-limit, limit]."""
    limit = np.asarray(limit, dtype=float)
    if np.any(limit < 0):
        raise ValueError("velocity limits must be non-negative")
    return np.clip(np.asarray(qdot, dtype=float), -limit, limit)


@dataclass
class TrajectoryRecord:
    """Time-indexed log of a run. One row per control step plus a final
    state-only row."""

    time: list = field(default_factory=list)
    q: list = field(default_factory=list)
    qdot: list = field(default_factory=list)
    x: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    slack_norm: list = field(default_factory=list)
    mode: list = field(default_factory=list)
    solve_time: list = field(default_factory=list)
    error_labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.time)

    def as_arrays(self) -> dict:
        return {
            "t": np.asarray(self.time),
            "q": np.asarray(self.q),
            "qdot": np.asarray(self.qdot),
            "x": np.asarray(self.x),
            "errors": np.asarray(self.errors),
            "slack_norm": np.asarray(self.slack_norm),
            "mode": np.asarray(self.mode),
            "solve_time": np.asarray(self.solve_time),
        }


@dataclass
class RuntimeStats:
    initial_solve: float
    average_solve: float
    max_solve: float
    steps: int


class ScenarioAborted(RuntimeError):
    """Controller failure mid-run; carries the partial trajectory."""

    def __init__(self, message: str, record: TrajectoryRecord,
                 stats: RuntimeStats | None):
        super().__init__(message)
        self.record = record
        self.stats = stats


def compile_controller(scenario: Scenario):
    bundle = scenario.bundle
    kind = scenario.controller_kind
    opts = scenario.controller_options
    if kind == "qp":
        return ct.compile_qp(bundle.skill, opts)
    if kind == "nlp":
        if bundle.cost is None:
            raise ValueError("NLP controller needs a cost expression")
        return ct.compile_nlp(bundle.skill, bundle.cost, opts)
    if kind == "mpc":
        if bundle.cost is None:
            raise ValueError("MPC controller needs a cost expression")
        return ct.compile_mpc(bundle.skill, bundle.cost, opts)
    if kind == "pinv":
        return ct.compile_pinv(bundle.skill, opts)
    raise ValueError(f"unknown controller kind {kind!r}")


def _constraint_error(state: ct.ConstraintState, v_cmd: np.ndarray) -> float:
    c = state.constraint
    if c.kind == "equality":
        return float(np.linalg.norm(state.e))
    if c.kind == "set":
        over = np.maximum(np.maximum(state.lo - state.e, state.e - state.hi), 0.0)
        return float(np.linalg.norm(over))
    edot = state.de_dt + state.jac @ v_cmd
    if c.kind == "velocity-equality":
        return float(np.linalg.norm(edot - state.target))
    over = np.maximum(np.maximum(state.lo - edot, edot - state.hi), 0.0)
    return float(np.linalg.norm(over))


def run_scenario(scenario: Scenario):
    """Run a scenario to completion; returns (TrajectoryRecord, RuntimeStats).

    Raises :class:`ScenarioAborted` (with the partial record attached) if
    the controller reports failure at any step.
    """
    controller = compile_controller(scenario)
    skill = scenario.bundle.skill
    n_q = skill.n_robot
    n_x = skill.n_virtual
    q = np.asarray(scenario.q0, dtype=float).copy()
    t = 0.0
    trace = scenario.input_trace
    has_input = skill.variables.input is not None

    def sample_y(at):
        return trace.sample(at) if (trace is not None and has_input) else None

    x = np.zeros(n_x)
    if n_x or scenario.controller_kind == "pinv":
        x0v, _ = controller.initialize(t, q, y0=sample_y(t), x0=scenario.x0)
        x = np.asarray(x0v, dtype=float)

    record = TrajectoryRecord(error_labels=[c.label for c in skill.constraints])
    steps = int(round(scenario.duration / scenario.dt)) if scenario.duration else 0
    solve_times = []

    def log_row(t_now, q_now, x_now, cmd_q, cmd_x, slack, mode, solve_s, states):
        v = np.concatenate([cmd_q, cmd_x])
        record.time.append(t_now)
        record.q.append(q_now.copy())
        record.qdot.append(np.asarray(cmd_q, dtype=float).copy())
        record.x.append(np.asarray(x_now, dtype=float).copy())
        record.errors.append([_constraint_error(s, v) for s in states])
        record.slack_norm.append(float(np.linalg.norm(slack)))
        record.mode.append(mode)
        record.solve_time.append(solve_s)

    for _ in range(steps):
        y = sample_y(t)
        result = controller.step(t, q, x if n_x else None, y)
        if not result.ok:
            raise ScenarioAborted(
                f"controller reported {result.status!r} at t={t:.6g}",
                record, _stats(solve_times))
        qdot = result.qdot
        if scenario.velocity_limit is not None:
            qdot = clamp_velocity(qdot, scenario.velocity_limit)
        states = getattr(controller, "last_states", None)
        if states is None:
            states = controller.functions.evaluate(t, q, x if n_x else None, y)
        log_row(t, q, x, qdot, result.xdot, result.slack, result.mode,
                result.solve_time, states)
        solve_times.append(result.solve_time)
        q = euler_step(q, qdot, scenario.dt)
        if n_x:
            x = euler_step(x, result.xdot, scenario.dt)
        t += scenario.dt

    # final state-only row
    states = controller.functions.evaluate(t, q, x if n_x else None, sample_y(t))
    log_row(t, q, x, np.zeros(n_q), np.zeros(n_x), np.zeros(0),
            record.mode[-1] if record.mode else 0, 0.0, states)
    return record, _stats(solve_times)


def _stats(solve_times) -> RuntimeStats:
    if not solve_times:
        return RuntimeStats(0.0, 0.0, 0.0, 0)
    arr = np.asarray(solve_times)
    return RuntimeStats(initial_solve=float(arr[0]), average_solve=float(arr.mean()),
                        max_solve=float(arr.max()), steps=int(arr.size))


# ----------------------------------------------------------------------
# output


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def trajectory_csv_lines(record: TrajectoryRecord):
    n_q = len(record.q[0]) if record.q else 0
    n_x = len(record.x[0]) if record.x else 0
    header = (["t"]
              + [f"q_{i}" for i in range(n_q)]
              + [f"qdot_{i}" for i in range(n_q)]
              + [f"x_{i}" for i in range(n_x)]
              + [f"err_{lbl}" for lbl in record.error_labels]
              + ["slack_norm", "mode", "solve_time_s"])
    yield ",".join(header)
    for i in range(len(record)):
        row = ([_fmt(record.time[i])]
               + [_fmt(v) for v in record.q[i]]
               + [_fmt(v) for v in record.qdot[i]]
               + [_fmt(v) for v in record.x[i]]
               + [_fmt(v) for v in record.errors[i]]
               + [_fmt(record.slack_norm[i]), str(int(record.mode[i])),
                  _fmt(record.solve_time[i])])
        yield ",".join(row)


def write_trajectory(record: TrajectoryRecord, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in trajectory_csv_lines(record):
            fh.write(line + "\n")


def read_trajectory(path) -> dict:
    """Read a trajectory CSV back into column arrays keyed by header name."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return {name: data[:, i] for i, name in enumerate(header)}


def write_stats(stats: RuntimeStats, path) -> None:
    doc = {
        "initial_solve_s": stats.initial_solve,
        "average_solve_s": stats.average_solve,
        "max_solve_s": stats.max_solve,
        "steps": stats.steps,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

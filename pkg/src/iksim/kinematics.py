"""Forward kinematics expressions from DH tables or a URDF subset.

Provides 4x4 transformation-matrix and 8-vector dual-quaternion forward
kinematics, Hamilton operators, the rotation-distance metric, and the
manipulability index.

Quaternion layout is (x, y, z, w) with the real part LAST, everywhere in
this package. A dual quaternion is the 8-vector [Q_R; Q_p] with Q_R the
unit rotation quaternion and Q_p the displacement quaternion.

DH tables use the standard (distal) convention:
``T_i = Rz(theta) Tz(d) Tx(a) Rx(alpha)``.
"""
from __future__ import annotations

import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import exprgraph as eg
from .exprgraph import Expr, ShapeError

__all__ = [
    "DHRow",
    "Joint",
    "RobotModel",
    "UrdfError",
    "dh_forward_kinematics",
    "dh_to_model",
    "parse_urdf",
    "load_urdf_file",
    "load_dh_json",
    "load_builtin_model",
    "builtin_model_names",
    "fk_transform",
    "fk_dualquat",
    "hamilton_plus",
    "hamilton_minus",
    "quat_hamilton_plus",
    "quat_hamilton_minus",
    "quat_mul",
    "dq_mul",
    "dq_from_transform",
    "dq_to_transform",
    "rotation_to_quaternion",
    "quaternion_to_rotation",
    "rotation_frobenius_error",
    "manipulability",
    "rpy_to_rotation",
    "rotation_to_rpy",
]

ACTUATED_KINDS = ("revolute", "prismatic")


class UrdfError(ValueError):
    """Raised for malformed or unsupported URDF content."""


@dataclass(frozen=True)
class DHRow:
    """One standard-DH row. Exactly one actuated coordinate per non-fixed row."""

    a: float = 0.0
    alpha: float = 0.0
    d: float = 0.0
    theta_offset: float = 0.0
    joint_kind: str = "revolute"
    limits: tuple[float, float] | None = None

    def __post_init__(self):
        for v in (self.a, self.alpha, self.d, self.theta_offset):
            if not math.isfinite(v):
                raise ValueError("DH parameters must be finite")
        if self.joint_kind not in ("revolute", "prismatic", "fixed"):
            raise ValueError(f"unknown DH joint kind {self.joint_kind!r}")
        if self.limits is not None and self.limits[0] > self.limits[1]:
            raise ValueError("DH limits must satisfy lower <= upper")


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str  # revolute | prismatic | fixed
    parent: str
    child: str
    origin: np.ndarray  # constant 4x4
    axis: np.ndarray | None = None  # unit 3-vector for actuated joints
    limits: tuple[float, float] | None = None


@dataclass
class RobotModel:
    """Kinematic tree; every root->tip path must be a serial chain."""

    name: str
    joints: list[Joint]
    links: list[str]
    root: str
    tips: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._by_child = {}
        for j in self.joints:
            if j.child in self._by_child:
                raise UrdfError(f"link {j.child!r} has more than one parent joint (branching)")
            self._by_child[j.child] = j
        if not self.tips:
            children = {j.child for j in self.joints}
            parents = {j.parent for j in self.joints}
            self.tips = sorted(children - parents)

    def chain(self, root: str, tip: str) -> list[Joint]:
        if tip not in self._by_child and tip != root:
            raise UrdfError(f"no chain from {root!r} to {tip!r}")
        seq: list[Joint] = []
        link = tip
        while link != root:
            j = self._by_child.get(link)
            if j is None:
                raise UrdfError(f"no chain from {root!r} to {tip!r}")
            seq.append(j)
            link = j.parent
        seq.reverse()
        return seq

    def actuated_joints(self, root: str, tip: str) -> list[Joint]:
        return [j for j in self.chain(root, tip) if j.kind in ACTUATED_KINDS]

    def joint_limits(self, root: str, tip: str) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = [], []
        for j in self.actuated_joints(root, tip):
            if j.limits is None:
                lo.append(-np.inf)
                hi.append(np.inf)
            else:
                lo.append(j.limits[0])
                hi.append(j.limits[1])
        return np.array(lo), np.array(hi)


# ----------------------------------------------------------------------
# numeric rigid-transform helpers


def rpy_to_rotation(r: float, p: float, y: float) -> np.ndarray:
    """URDF fixed-axis convention: R = Rz(y) @ Ry(p) @ Rx(r)."""
    cr, sr = math.cos(r), math.sin(r)
    cp, sp = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def rotation_to_rpy(R: np.ndarray) -> tuple[float, float, float]:
    p = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    if abs(R[2, 0]) < 1.0 - 1e-12:
        r = math.atan2(R[2, 1], R[2, 2])
        y = math.atan2(R[1, 0], R[0, 0])
    else:
        # gimbal lock: fold yaw into roll
        r = math.atan2(-R[0, 1], R[1, 1])
        y = 0.0
    return r, p, y


def _tf(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return _tf(R=np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return _tf(R=np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))


def dh_row_transform(row: DHRow, theta: float = 0.0, d_off: float = 0.0) -> np.ndarray:
    """Numeric transform of one DH row; used as a chain-product oracle."""
    th = row.theta_offset + theta
    d = row.d + d_off
    ct, st = math.cos(th), math.sin(th)
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    return np.array([
        [ct, -st * ca, st * sa, row.a * ct],
        [st, ct * ca, -ct * sa, row.a * st],
        [0.0, sa, ca, d],
        [0.0, 0.0, 0.0, 1.0],
    ])


# ----------------------------------------------------------------------
# DH forward kinematics (expression)


def dh_forward_kinematics(rows: list[DHRow], q: Expr) -> Expr:
    """4x4 transform expression: product of standard DH row transforms."""
    n_act = sum(1 for r in rows if r.joint_kind != "fixed")
    if q.shape != (n_act, 1):
        raise ShapeError(
            f"q has shape {q.shape} but the table has {n_act} actuated rows"
        )
    T = None
    k = 0
    for row in rows:
        if row.joint_kind == "revolute":
            theta = q[k] + row.theta_offset
            d = eg.constant(row.d)
            k += 1
        elif row.joint_kind == "prismatic":
            theta = eg.constant(row.theta_offset)
            d = q[k] + row.d
            k += 1
        else:
            theta = eg.constant(row.theta_offset)
            d = eg.constant(row.d)
        ct, st = eg.cos(theta), eg.sin(theta)
        ca, sa = math.cos(row.alpha), math.sin(row.alpha)
        Ti = eg.matrix_from([
            [ct, -ca * st, sa * st, row.a * ct],
            [st, ca * ct, -sa * ct, row.a * st],
            [0.0, sa, ca, d],
            [0.0, 0.0, 0.0, 1.0],
        ])
        T = Ti if T is None else T @ Ti
    return eg.constant(np.eye(4)) if T is None else T


def dh_to_model(rows: list[DHRow], name: str = "dh-robot") -> RobotModel:
    """Convert a DH table to the joint/origin form shared with URDF models."""
    joints: list[Joint] = []
    links = ["base_link"]
    pending = np.eye(4)
    z = np.array([0.0, 0.0, 1.0])
    idx = 0
    for row in rows:
        if row.joint_kind == "revolute":
            origin = pending @ _rot_z(row.theta_offset)
            pending = _tf(t=[0, 0, row.d]) @ _tf(t=[row.a, 0, 0]) @ _rot_x(row.alpha)
        elif row.joint_kind == "prismatic":
            origin = pending @ _rot_z(row.theta_offset) @ _tf(t=[0, 0, row.d])
            pending = _tf(t=[row.a, 0, 0]) @ _rot_x(row.alpha)
        else:
            pending = pending @ dh_row_transform(row)
            continue
        idx += 1
        child = f"link_{idx}"
        joints.append(Joint(f"joint_{idx}", row.joint_kind, links[-1], child,
                            origin, z.copy(), row.limits))
        links.append(child)
    joints.append(Joint("tool_joint", "fixed", links[-1], "tool0", pending))
    links.append("tool0")
    return RobotModel(name, joints, links, root="base_link", tips=["tool0"])


# ----------------------------------------------------------------------
# URDF parsing


def parse_urdf(xml_text: str) -> RobotModel:
    """Parse the supported URDF subset into a RobotModel.

    Supported: robot, link, joint (revolute, prismatic, fixed, continuous),
    origin (xyz, rpy), axis, limit. Visual/collision/inertial elements are
    ignored. Unsupported joint types are rejected.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise UrdfError(f"malformed XML: {exc}") from exc
    if root.tag != "robot":
        raise UrdfError(f"expected <robot> document, got <{root.tag}>")
    name = root.get("name", "robot")
    links = [ln.get("name") for ln in root.findall("link")]
    if any(n is None for n in links):
        raise UrdfError("link without a name")
    link_set = set(links)
    joints: list[Joint] = []
    for jel in root.findall("joint"):
        jname = jel.get("name")
        jtype = jel.get("type")
        if jtype == "continuous":
            kind = "revolute"
            limits = (-np.inf, np.inf)
        elif jtype in ("revolute", "prismatic", "fixed"):
            kind = jtype
            limits = None
        else:
            raise UrdfError(f"unsupported joint type {jtype!r} on joint {jname!r}")
        parent_el = jel.find("parent")
        child_el = jel.find("child")
        if parent_el is None or child_el is None:
            raise UrdfError(f"joint {jname!r} missing parent/child")
        parent, child = parent_el.get("link"), child_el.get("link")
        if parent not in link_set or child not in link_set:
            raise UrdfError(f"joint {jname!r} references unknown link")
        origin = np.eye(4)
        oel = jel.find("origin")
        if oel is not None:
            xyz = [float(v) for v in oel.get("xyz", "0 0 0").split()]
            rpy = [float(v) for v in oel.get("rpy", "0 0 0").split()]
            origin = _tf(R=rpy_to_rotation(*rpy), t=xyz)
        axis = None
        ael = jel.find("axis")
        if ael is not None:
            axis = np.array([float(v) for v in ael.get("xyz", "1 0 0").split()])
            nrm = float(np.linalg.norm(axis))
            if nrm < 1e-12:
                raise UrdfError(f"joint {jname!r} has a zero axis")
            axis = axis / nrm
        if kind in ACTUATED_KINDS:
            if axis is None:
                raise UrdfError(f"actuated joint {jname!r} has no <axis>")
            lel = jel.find("limit")
            if limits is None:
                if lel is not None and lel.get("lower") is not None:
                    limits = (float(lel.get("lower")), float(lel.get("upper")))
                    if limits[0] > limits[1]:
                        raise UrdfError(f"joint {jname!r}: lower > upper limit")
        joints.append(Joint(jname, kind, parent, child, origin, axis, limits))
    children = {j.child for j in joints}
    roots = [ln for ln in links if ln not in children]
    if len(roots) != 1:
        raise UrdfError(f"expected a single root link, found {roots}")
    return RobotModel(name, joints, links, root=roots[0])


def load_urdf_file(path) -> RobotModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_urdf(fh.read())


def load_dh_json(path_or_text) -> tuple[list[DHRow], str]:
    """Load a DH table from a JSON document (path or raw text)."""
    text = path_or_text
    if "\n" not in str(path_or_text) and not str(path_or_text).lstrip().startswith("{"):
        with open(path_or_text, "r", encoding="utf-8") as fh:
            text = fh.read()
    doc = json.loads(text)
    rows = []
    for r in doc["rows"]:
        limits = tuple(r["limits"]) if r.get("limits") else None
        rows.append(DHRow(a=r.get("a", 0.0), alpha=r.get("alpha", 0.0),
                          d=r.get("d", 0.0), theta_offset=r.get("theta_offset", 0.0),
                          joint_kind=r.get("kind", "revolute"), limits=limits))
    return rows, doc.get("name", "dh-robot")


_BUILTIN = {
    "ur5": ("ur5_dh.json", "ur5.urdf"),
    "iiwa14": ("iiwa14_dh.json", "iiwa14.urdf"),
}


def builtin_model_names() -> list[str]:
    return sorted(_BUILTIN)


def load_builtin_model(name: str, form: str = "dh") -> RobotModel:
    """Load a bundled robot description ("ur5" or "iiwa14")."""
    if name not in _BUILTIN:
        raise KeyError(f"unknown builtin model {name!r}; have {builtin_model_names()}")
    dh_file, urdf_file = _BUILTIN[name]
    pkg = resources.files(__package__) / "models"
    if form == "dh":
        rows, mname = load_dh_json((pkg / dh_file).read_text())
        return dh_to_model(rows, mname)
    if form == "urdf":
        return parse_urdf((pkg / urdf_file).read_text())
    raise ValueError(f"form must be 'dh' or 'urdf', got {form!r}")


def builtin_dh_rows(name: str) -> list[DHRow]:
    dh_file, _ = _BUILTIN[name]
    pkg = resources.files(__package__) / "models"
    rows, _ = load_dh_json((pkg / dh_file).read_text())
    return rows


# ----------------------------------------------------------------------
# transform-based forward kinematics


def _axis_rotation_expr(axis: np.ndarray, angle: Expr) -> Expr:
    """Rodrigues rotation about a constant unit axis, as a 3x3 expression."""
    ux, uy, uz = (float(a) for a in axis)
    c, s = eg.cos(angle), eg.sin(angle)
    v = 1.0 - c
    return eg.matrix_from([
        [c + ux * ux * v, ux * uy * v - uz * s, ux * uz * v + uy * s],
        [uy * ux * v + uz * s, c + uy * uy * v, uy * uz * v - ux * s],
        [uz * ux * v - uy * s, uz * uy * v + ux * s, c + uz * uz * v],
    ])


def fk_transform(model: RobotModel, root: str, tip: str, q: Expr) -> Expr:
    """4x4 transform expression for the chain root->tip as a function of q."""
    chain = model.chain(root, tip)
    n_act = sum(1 for j in chain if j.kind in ACTUATED_KINDS)
    if q.shape != (n_act, 1):
        raise ShapeError(f"q has shape {q.shape}, chain has {n_act} actuated joints")
    T: Expr | None = None
    pending = np.eye(4)
    k = 0
    for j in chain:
        pending = pending @ j.origin
        if j.kind == "fixed":
            continue
        qk = q[k]
        k += 1
        if j.kind == "revolute":
            R = _axis_rotation_expr(j.axis, qk)
            M = eg.vertcat(eg.horzcat(R, eg.constant(np.zeros((3, 1)))),
                           eg.constant(np.array([[0.0, 0.0, 0.0, 1.0]])))
        else:  # prismatic
            ux, uy, uz = (float(a) for a in j.axis)
            M = eg.matrix_from([
                [1.0, 0.0, 0.0, ux * qk],
                [0.0, 1.0, 0.0, uy * qk],
                [0.0, 0.0, 1.0, uz * qk],
                [0.0, 0.0, 0.0, 1.0],
            ])
        step = eg.constant(pending) @ M
        T = step if T is None else T @ step
        pending = np.eye(4)
    tail = eg.constant(pending)
    if T is None:
        return tail
    if not np.allclose(pending, np.eye(4)):
        T = T @ tail
    return T


def fk_position(model: RobotModel, root: str, tip: str, q: Expr) -> Expr:
    return fk_transform(model, root, tip, q)[0:3, 3]


def fk_rotation(model: RobotModel, root: str, tip: str, q: Expr) -> Expr:
    return fk_transform(model, root, tip, q)[0:3, 0:3]


# ----------------------------------------------------------------------
# quaternions and dual quaternions (layout: x, y, z, w)


def quat_mul(a, b) -> np.ndarray:
    ax, ay, az, aw = np.asarray(a, dtype=float).ravel()
    bx, by, bz, bw = np.asarray(b, dtype=float).ravel()
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_hamilton_plus(a) -> np.ndarray:
    """4x4 H+ with H+(a) @ b = a (x) b."""
    x, y, z, w = np.asarray(a, dtype=float).ravel()
    return np.array([
        [w, -z, y, x],
        [z, w, -x, y],
        [-y, x, w, z],
        [-x, -y, -z, w],
    ])


def quat_hamilton_minus(b) -> np.ndarray:
    """4x4 H- with H-(b) @ a = a (x) b."""
    x, y, z, w = np.asarray(b, dtype=float).ravel()
    return np.array([
        [w, z, -y, x],
        [-z, w, x, y],
        [y, -x, w, z],
        [-x, -y, -z, w],
    ])


def hamilton_plus(dq) -> np.ndarray:
    """8x8 plus Hamilton operator: hamilton_plus(a) @ b = a (x) b."""
    dq = np.asarray(dq, dtype=float).ravel()
    Hr = quat_hamilton_plus(dq[:4])
    Hd = quat_hamilton_plus(dq[4:])
    out = np.zeros((8, 8))
    out[:4, :4] = Hr
    out[4:, 4:] = Hr
    out[4:, :4] = Hd
    return out


def hamilton_minus(dq) -> np.ndarray:
    """8x8 minus Hamilton operator: hamilton_minus(b) @ a = a (x) b."""
    dq = np.asarray(dq, dtype=float).ravel()
    Hr = quat_hamilton_minus(dq[:4])
    Hd = quat_hamilton_minus(dq[4:])
    out = np.zeros((8, 8))
    out[:4, :4] = Hr
    out[4:, 4:] = Hr
    out[4:, :4] = Hd
    return out


def dq_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    real = quat_mul(a[:4], b[:4])
    dual = quat_mul(a[:4], b[4:]) + quat_mul(a[4:], b[:4])
    return np.concatenate([real, dual])


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion (x, y, z, w) with w >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    quat = np.array([x, y, z, w])
    if quat[3] < 0:
        quat = -quat
    return quat / np.linalg.norm(quat)


def quaternion_to_rotation(quat) -> np.ndarray:
    x, y, z, w = np.asarray(quat, dtype=float).ravel()
    n = x * x + y * y + z * z + w * w
    s = 2.0 / n
    return np.array([
        [1 - s * (y * y + z * z), s * (x * y - z * w), s * (x * z + y * w)],
        [s * (x * y + z * w), 1 - s * (x * x + z * z), s * (y * z - x * w)],
        [s * (x * z - y * w), s * (y * z + x * w), 1 - s * (x * x + y * y)],
    ])


def dq_from_transform(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    qr = rotation_to_quaternion(T[:3, :3])
    t_pure = np.array([T[0, 3], T[1, 3], T[2, 3], 0.0])
    qp = 0.5 * quat_mul(t_pure, qr)
    return np.concatenate([qr, qp])


def dq_to_transform(dq) -> np.ndarray:
    dq = np.asarray(dq, dtype=float).ravel()
    qr, qp = dq[:4], dq[4:]
    R = quaternion_to_rotation(qr)
    conj = np.array([-qr[0], -qr[1], -qr[2], qr[3]])
    t = 2.0 * quat_mul(qp, conj)
    return _tf(R=R, t=t[:3])


def dq_conjugate_matrix() -> np.ndarray:
    return np.diag([-1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0])


# symbolic quaternion helpers ------------------------------------------


def quat_mul_expr(a: Expr, b: Expr) -> Expr:
    """Quaternion product of two 4x1 expressions."""
    if a.shape != (4, 1) or b.shape != (4, 1):
        raise ShapeError("quat_mul_expr expects 4x1 expressions")
    ax, ay, az, aw = a[0], a[1], a[2], a[3]
    bx, by, bz, bw = b[0], b[1], b[2], b[3]
    return eg.vertcat(
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    )


def quat_hamilton_minus_expr(b: Expr) -> Expr:
    """4x4 H- expression for a 4x1 quaternion expression."""
    if b.shape != (4, 1):
        raise ShapeError("quat_hamilton_minus_expr expects a 4x1 expression")
    x, y, z, w = b[0], b[1], b[2], b[3]
    return eg.matrix_from([
        [w, z, -y, x],
        [-z, w, x, y],
        [y, -x, w, z],
        [-x, -y, -z, w],
    ])


def dq_mul_expr(a: Expr, b: Expr) -> Expr:
    if a.shape != (8, 1) or b.shape != (8, 1):
        raise ShapeError("dq_mul_expr expects 8x1 expressions")
    ar, ad = a[0:4], a[4:8]
    br, bd = b[0:4], b[4:8]
    real = quat_mul_expr(ar, br)
    dual = quat_mul_expr(ar, bd) + quat_mul_expr(ad, br)
    return eg.vertcat(real, dual)


def fk_dualquat(model: RobotModel, root: str, tip: str, q: Expr) -> Expr:
    """8x1 dual-quaternion expression for the chain root->tip.

    The sign branch is continuous in q and chosen so the rotation part has
    non-negative w at q = 0.
    """
    chain = model.chain(root, tip)
    n_act = sum(1 for j in chain if j.kind in ACTUATED_KINDS)
    if q.shape != (n_act, 1):
        raise ShapeError(f"q has shape {q.shape}, chain has {n_act} actuated joints")
    dq: Expr | None = None
    pending = np.eye(4)
    zero_cfg = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    k = 0
    for j in chain:
        pending = pending @ j.origin
        if j.kind == "fixed":
            continue
        const_dq = dq_from_transform(pending)
        zero_cfg = dq_mul(zero_cfg, const_dq)
        pending = np.eye(4)
        qk = q[k]
        k += 1
        ux, uy, uz = (float(a) for a in j.axis)
        if j.kind == "revolute":
            half = 0.5 * qk
            s, c = eg.sin(half), eg.cos(half)
            motion = eg.vertcat(ux * s, uy * s, uz * s, c,
                                eg.constant(np.zeros((4, 1))))
        else:  # prismatic: pure translation along the axis
            motion = eg.vertcat(eg.constant([0.0, 0.0, 0.0, 1.0]),
                                (0.5 * ux) * qk, (0.5 * uy) * qk, (0.5 * uz) * qk,
                                eg.constant(0.0))
        step = dq_mul_expr(eg.constant(const_dq.reshape(8, 1)), motion)
        dq = step if dq is None else dq_mul_expr(dq, step)
    if not np.allclose(pending, np.eye(4)):
        tail = dq_from_transform(pending)
        zero_cfg = dq_mul(zero_cfg, tail)
        tail_e = eg.constant(tail.reshape(8, 1))
        dq = tail_e if dq is None else dq_mul_expr(dq, tail_e)
    if dq is None:
        dq = eg.constant(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).reshape(8, 1))
    if zero_cfg[3] < 0:
        dq = -dq
    return dq


# ----------------------------------------------------------------------
# metrics


def rotation_frobenius_error(R: Expr, R_d) -> Expr:
    """Scalar expression ||R_d^T R - I||_F for a constant target rotation."""
    R_d = np.asarray(R_d, dtype=float)
    if R.shape != (3, 3) or R_d.shape != (3, 3):
        raise ShapeError("rotation_frobenius_error expects 3x3 operands")
    if np.max(np.abs(R_d.T @ R_d - np.eye(3))) > 1e-6:
        raise ValueError("target rotation is not orthonormal")
    return eg.norm_fro(eg.constant(R_d.T) @ R - eg.constant(np.eye(3)))


def manipulability(J_p: Expr) -> Expr:
    """sqrt(det(J_p J_p^T)) for a 3xn position Jacobian expression."""
    if J_p.rows != 3 or J_p.cols < 3:
        raise ShapeError(
            f"manipulability expects a 3xn Jacobian with n >= 3, got {J_p.shape}"
        )
    return eg.sqrt(eg.det(J_p @ J_p.T))

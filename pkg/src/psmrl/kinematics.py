"""Forward and inverse kinematics for the PSM EndoWrist tools.

Each DH row composes as ``Trans_x(a) @ Rot_x(alpha) @ Trans_z(d) @ Rot_z(theta)``
(the "modified" ordering, not the classic ``Rot_z Trans_z Trans_x Rot_x``).

The tool pose is the tip position plus a unit direction, taken as the y-axis of
the final frame. That is the axis the analytic Suction & Irrigation solution is
written against.
"""
from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

SIN6_TOL = 1e-3
AXIS_TOL = 1e-6


class KinematicsError(Exception):
    pass


class SingularConfigurationError(KinematicsError):
    pass


class UnreachablePoseError(KinematicsError):
    pass


class JointLimitError(KinematicsError):
    pass


@dataclass(frozen=True)
class DHRow:
    a: float
    alpha: float
    d_offset: float
    theta_offset: float
    joint: int | None = None  # 0-based index into the joint vector
    joint_field: str = "theta"
    joint_sign: float = 1.0
    frame: int | None = None

    def __post_init__(self):
        if self.joint_field not in ("d", "theta"):
            raise ValueError(f"joint_field must be 'd' or 'theta', got {self.joint_field!r}")
        for name in ("alpha", "theta_offset"):
            value = getattr(self, name)
            if not -math.pi < value <= math.pi + 1e-12:
                raise ValueError(f"{name}={value} outside (-pi, pi]")


@dataclass(frozen=True)
class ToolKinematics:
    name: str
    rows: tuple[DHRow, ...]
    link_lengths: dict[str, float]
    joint_limits: np.ndarray
    joint_names: tuple[str, ...] = ()

    def __post_init__(self):
        bound = [r.joint for r in self.rows if r.joint is not None]
        if sorted(bound) != list(range(len(bound))):
            raise ValueError(f"{self.name}: joints must be bound exactly once each, got {bound}")
        for key, value in self.link_lengths.items():
            if not value > 0:
                raise ValueError(f"{self.name}: link length {key}={value} must be positive")
        limits = np.asarray(self.joint_limits, dtype=float)
        if limits.shape != (len(bound), 2) or np.any(limits[:, 0] > limits[:, 1]):
            raise ValueError(f"{self.name}: joint_limits must be {len(bound)} [min, max] pairs")
        object.__setattr__(self, "joint_limits", limits)

    @property
    def n_joints(self) -> int:
        return len(self.joint_limits)

    def within_limits(self, q, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.joint_limits[:, 0] - tol) and np.all(q <= self.joint_limits[:, 1] + tol))

    def mid_range(self) -> np.ndarray:
        return self.joint_limits.mean(axis=1)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        lo, hi = self.joint_limits[:, 0], self.joint_limits[:, 1]
        size = (self.n_joints,) if n is None else (n, self.n_joints)
        return rng.uniform(lo, hi, size=size)


@dataclass(frozen=True)
class ToolPose:
    position: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        v = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(v)
        if not norm > 0:
            raise ValueError("direction must be non-zero")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "direction", v / norm)


# --------------------------------------------------------------------------
# Tool definition files
# --------------------------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


def _eval_expr(text, names: dict[str, float]) -> float:
    """Evaluate a numeric field: a number, or arithmetic over ``pi`` and link lengths."""
    if isinstance(text, (int, float)):
        return float(text)

    def walk(node):
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in names:
                raise ValueError(f"unknown name {node.id!r} in {text!r}")
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](walk(node.operand))
        raise ValueError(f"unsupported expression {text!r}")

    return walk(ast.parse(str(text), mode="eval"))


_ROW_KEYS = {"frame", "a", "alpha", "d", "theta", "joint", "joint_field", "joint_sign"}
_TOOL_KEYS = {"joint_names", "link_lengths", "joint_limits", "frames"}


def tool_from_dict(name: str, spec: dict) -> ToolKinematics:
    unknown = set(spec) - _TOOL_KEYS
    if unknown:
        raise ValueError(f"{name}: unknown keys {sorted(unknown)}")
    lengths = {k: float(v) for k, v in spec["link_lengths"].items()}
    names = dict(lengths, pi=math.pi)
    rows = []
    for entry in spec["frames"]:
        unknown = set(entry) - _ROW_KEYS
        if unknown:
            raise ValueError(f"{name}: unknown frame keys {sorted(unknown)}")
        joint = entry.get("joint")
        rows.append(
            DHRow(
                a=_eval_expr(entry.get("a", 0), names),
                alpha=_eval_expr(entry.get("alpha", 0), names),
                d_offset=_eval_expr(entry.get("d", 0), names),
                theta_offset=_eval_expr(entry.get("theta", 0), names),
                joint=None if joint is None else int(joint) - 1,
                joint_field=entry.get("joint_field", "theta"),
                joint_sign=float(entry.get("joint_sign", 1.0)),
                frame=entry.get("frame"),
            )
        )
    n = sum(r.joint is not None for r in rows)
    return ToolKinematics(
        name=name,
        rows=tuple(rows),
        link_lengths=lengths,
        joint_limits=np.asarray(spec["joint_limits"], dtype=float),
        joint_names=tuple(spec.get("joint_names", [f"q{i + 1}" for i in range(n)])),
    )


def load_tools(path: str | Path | None = None) -> dict[str, ToolKinematics]:
    if path is None:
        text = resources.files("psmrl").joinpath("data/tools.yaml").read_text()
    else:
        text = Path(path).read_text()
    data = yaml.safe_load(text)
    return {name: tool_from_dict(name, spec) for name, spec in data.items()}


_ALIASES = {"lnd": "LND", "suction": "SuctionIrrigation", "suctionirrigation": "SuctionIrrigation"}


def get_tool(name: str, path: str | Path | None = None) -> ToolKinematics:
    tools = load_tools(path)
    key = _ALIASES.get(name.lower(), name)
    if key not in tools:
        raise KeyError(f"unknown tool {name!r}; available: {sorted(tools)}")
    return tools[key]


# --------------------------------------------------------------------------
# Forward kinematics
# --------------------------------------------------------------------------


def dh_transform(row: DHRow, q: float | None = None) -> np.ndarray:
    d, theta = row.d_offset, row.theta_offset
    if row.joint is not None:
        if q is None or not math.isfinite(q):
            raise ValueError("bound DH row needs a finite joint value")
        if row.joint_field == "d":
            d += row.joint_sign * q
        else:
            theta += row.joint_sign * q
    ca, sa = math.cos(row.alpha), math.sin(row.alpha)
    ct, st = math.cos(theta), math.sin(theta)
    return np.array(
        [
            [ct, -st, 0.0, row.a],
            [st * ca, ct * ca, -sa, -sa * d],
            [st * sa, ct * sa, ca, ca * d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _check_q(tool: ToolKinematics, q, check_limits: bool) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (tool.n_joints,):
        raise ValueError(f"{tool.name} expects {tool.n_joints} joints, got shape {q.shape}")
    if check_limits and not tool.within_limits(q):
        raise JointLimitError(f"{tool.name}: q={q.tolist()} violates joint limits")
    return q


def frame_transforms(tool: ToolKinematics, q) -> list[np.ndarray]:
    """Cumulative base-to-frame transforms, one per DH row."""
    out = []
    T = np.eye(4)
    for row in tool.rows:
        T = T @ dh_transform(row, None if row.joint is None else q[row.joint])
        out.append(T)
    return out


def fk_transform(tool: ToolKinematics, q, check_limits: bool = False) -> np.ndarray:
    q = _check_q(tool, q, check_limits)
    return frame_transforms(tool, q)[-1]


def forward_kinematics(tool: ToolKinematics, q, check_limits: bool = False) -> ToolPose:
    T = fk_transform(tool, q, check_limits)
    return ToolPose(T[:3, 3].copy(), T[:3, 1].copy())


def jacobian(tool: ToolKinematics, q) -> np.ndarray:
    """Geometric 6 x n Jacobian of (position, direction) with respect to q."""
    q = _check_q(tool, q, False)
    frames = frame_transforms(tool, q)
    p_end = frames[-1][:3, 3]
    v_end = frames[-1][:3, 1]
    J = np.zeros((6, tool.n_joints))
    for row, T in zip(tool.rows, frames):
        if row.joint is None:
            continue
        z = T[:3, 2]
        if row.joint_field == "d":
            J[:3, row.joint] = row.joint_sign * z
        else:
            J[:3, row.joint] = row.joint_sign * np.cross(z, p_end - T[:3, 3])
            J[3:, row.joint] = row.joint_sign * np.cross(z, v_end)
    return J


# --------------------------------------------------------------------------
# Inverse kinematics
# --------------------------------------------------------------------------


def _wrap(angle: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(angle, 2 * math.pi)
    return math.pi if wrapped == -math.pi else wrapped


def ik_suction(pose: ToolPose, tool: ToolKinematics, check_limits: bool = True) -> np.ndarray:
    """Closed-form joints (q1, q2, q3, q5, q6) of the Suction & Irrigation tool.

    Works in DH theta values (theta_i = q_i + offset_i) and converts back at
    the end. Two wrist branches exist (theta6 = +-acos(.)); the one inside the
    joint limits is returned.

    Raises SingularConfigurationError when the tip is on the outer-yaw axis or
    |sin theta6| <= 1e-3, and UnreachablePoseError when no branch fits the
    limits or the pose cannot be reproduced.
    """
    l2, l5 = tool.link_lengths["l2"], tool.link_lengths["l5"]
    px, py, pz = pose.position
    vx, vy, vz = pose.direction

    if math.hypot(px, pz) <= AXIS_TOL:
        raise SingularConfigurationError("tip lies on the outer-yaw axis (p_x ~ p_z ~ 0)")
    # the tip sits beyond the remote center, so (p_x, p_z) points opposite (cos, sin) of theta1
    th1 = math.atan2(-pz, -px)
    s1, c1 = math.sin(th1), math.cos(th1)
    cos6 = max(-1.0, min(1.0, s1 * vx - c1 * vz))
    if math.sqrt(max(0.0, 1.0 - cos6 * cos6)) <= SIN6_TOL:
        raise SingularConfigurationError("wrist singularity: sin(theta6) ~ 0")

    # equals p_x / cos(theta1) but stays finite when cos(theta1) -> 0
    radial = px * c1 + pz * s1
    fallback = None
    for th6 in (-math.acos(cos6), math.acos(cos6)):
        s6 = math.sin(th6)
        s25 = -vy / s6
        c25 = -(vx * c1 + vz * s1) / s6
        num = radial - l5 * c25
        den = -py + l5 * s25
        th2 = math.atan2(num, den)
        # |num, den| is (q3 - l2); avoids dividing by cos(theta2)
        q3 = math.hypot(num, den) + l2
        th5 = _wrap(math.atan2(s25, c25) - th2)
        q = np.array([_wrap(th1 - math.pi / 2), _wrap(th2 + math.pi / 2), q3, _wrap(th5 + math.pi / 2), _wrap(th6 + math.pi / 2)])
        if tool.within_limits(q):
            fallback = q
            break
        if fallback is None and not check_limits:
            fallback = q
    if fallback is None:
        raise UnreachablePoseError("no inverse-kinematics branch inside the joint limits")

    check = forward_kinematics(tool, fallback)
    if np.linalg.norm(check.position - pose.position) > 1e-6 or np.linalg.norm(check.direction - pose.direction) > 1e-6:
        raise UnreachablePoseError("pose is not reachable by the Suction & Irrigation tool")
    return fallback


@dataclass
class IKResult:
    q: np.ndarray
    converged: bool
    residual: float
    iterations: int
    trace: list[float] = field(default_factory=list)
    clamped: bool = False


def _pose_error(tool: ToolKinematics, q, target: ToolPose) -> np.ndarray:
    pose = forward_kinematics(tool, q)
    return np.concatenate([target.position - pose.position, target.direction - pose.direction])


def ik_numeric(
    tool: ToolKinematics,
    target: ToolPose,
    q_init=None,
    damping: float = 1e-3,
    max_iter: int = 200,
    max_step: float = 0.1,
    tol: float = 1e-12,
    restarts: int = 0,
    seed: int = 0,
) -> IKResult:
    """Damped-least-squares IK with a backtracking step, so the residual never grows.

    DLS is local. With ``restarts > 0`` a failed solve is retried from joint
    vectors drawn uniformly inside the limits (seeded), and the best attempt is
    returned.
    """
    lo, hi = tool.joint_limits[:, 0], tool.joint_limits[:, 1]
    q0 = tool.mid_range() if q_init is None else _check_q(tool, q_init, False)
    best = _dls(tool, target, q0, damping, max_iter, max_step, tol)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        if best.converged:
            break
        attempt = _dls(tool, target, rng.uniform(lo, hi), damping, max_iter, max_step, tol)
        if attempt.residual < best.residual:
            best = attempt
    return best


def _dls(tool, target, q0, damping, max_iter, max_step, tol) -> IKResult:
    lo, hi = tool.joint_limits[:, 0], tool.joint_limits[:, 1]
    q = np.clip(q0, lo, hi)
    clamped = bool(np.any(q != q0))

    err = _pose_error(tool, q, target)
    res = float(np.linalg.norm(err))
    trace = [res]
    it = 0
    while res > tol and it < max_iter:
        J = jacobian(tool, q)
        dq = J.T @ np.linalg.solve(J @ J.T + damping**2 * np.eye(6), err)
        biggest = np.max(np.abs(dq))
        if biggest > max_step:
            dq *= max_step / biggest
        step = 1.0
        for _ in range(20):
            trial = np.clip(q + step * dq, lo, hi)
            trial_err = _pose_error(tool, trial, target)
            trial_res = float(np.linalg.norm(trial_err))
            if trial_res < res:
                break
            step *= 0.5
        else:
            break  # stalled: no descent direction left
        clamped = clamped or bool(np.any(trial != q + step * dq))
        q, err, res = trial, trial_err, trial_res
        trace.append(res)
        it += 1
    return IKResult(q=q, converged=res <= tol, residual=res, iterations=it, trace=trace, clamped=clamped)

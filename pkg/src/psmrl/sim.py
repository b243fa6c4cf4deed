"""Kinematic PSM scene: workspace box, table, gripper jaw and grasping.

No dynamics are simulated. The end-effector moves by a bounded Cartesian
increment per step and is projected back into the workspace.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRASP_JAW_THRESHOLD = 0.25


@dataclass(frozen=True)
class Workspace:
    center: np.ndarray
    rho: float
    eta: float = 0.001
    table_height: float | None = None  # defaults to the bottom face of the box

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        object.__setattr__(self, "center", center)
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.table_height is None:
            object.__setattr__(self, "table_height", float(center[2] - self.rho))
        lo, hi = center[2] - self.rho, center[2] + self.rho
        if not lo - 1e-12 <= self.table_height <= hi + 1e-12:
            raise ValueError(f"table_height {self.table_height} outside [{lo}, {hi}]")

    @property
    def low(self) -> np.ndarray:
        lo = self.center - self.rho
        lo[2] = max(lo[2], self.table_height)
        return lo

    @property
    def high(self) -> np.ndarray:
        return self.center + self.rho


@dataclass
class PsmState:
    position: np.ndarray
    jaw: float = 1.0
    attached: bool = False

    def copy(self) -> PsmState:
        return PsmState(self.position.copy(), self.jaw, self.attached)


@dataclass
class SceneObject:
    position: np.ndarray
    grasp_radius: float = 0.005

    def copy(self) -> SceneObject:
        return SceneObject(self.position.copy(), self.grasp_radius)


def clamp_to_workspace(p, ws: Workspace) -> np.ndarray:
    return np.minimum(np.maximum(np.asarray(p, dtype=float), ws.low), ws.high)


def distance(a, b):
    """Euclidean distance over the last axis; one formula for single points and batches."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.sqrt(np.sum(d * d, axis=-1))


def normalize(p, ws: Workspace) -> np.ndarray:
    return (np.asarray(p, dtype=float) - ws.center) / ws.rho


def denormalize(p_norm, ws: Workspace) -> np.ndarray:
    return np.asarray(p_norm, dtype=float) * ws.rho + ws.center


def step_arm(state: PsmState, delta, phi: float | None, ws: Workspace) -> tuple[PsmState, bool]:
    """Apply one Cartesian increment and jaw command.

    Returns the new state and whether any input had to be clipped to [-1, 1].
    ``phi=None`` leaves the jaw where it is.
    """
    delta = np.asarray(delta, dtype=float)
    clipped = np.clip(delta, -1.0, 1.0)
    was_clipped = bool(np.any(clipped != delta))
    position = clamp_to_workspace(ws.eta * clipped + state.position, ws)
    jaw = state.jaw
    if phi is not None:
        phi_c = min(1.0, max(-1.0, float(phi)))
        was_clipped = was_clipped or phi_c != phi
        jaw = (phi_c + 1.0) / 2.0
    return PsmState(position, jaw, state.attached), was_clipped


def update_grasp(state: PsmState, obj: SceneObject, ws: Workspace) -> tuple[PsmState, SceneObject]:
    """Attach when the jaw is nearly closed and the object is inside the sensor radius.

    An attached object is carried rigidly (snapped to the gripper point). When
    the condition fails the object falls straight down onto the table.
    """
    if state.attached:
        obj = SceneObject(state.position.copy(), obj.grasp_radius)
    close = state.jaw < GRASP_JAW_THRESHOLD
    near = float(distance(state.position, obj.position)) <= obj.grasp_radius
    if close and near:
        return PsmState(state.position, state.jaw, True), SceneObject(state.position.copy(), obj.grasp_radius)
    if state.attached:
        dropped = obj.position.copy()
        dropped[2] = ws.table_height
        return PsmState(state.position, state.jaw, False), SceneObject(dropped, obj.grasp_radius)
    return PsmState(state.position, state.jaw, False), obj


# --------------------------------------------------------------------------
# Batched kernels: row i of every array is an independent scene. They perform
# the same floating-point operations as step_arm / update_grasp, so a batch of
# one reproduces the single-scene path bit for bit.
# --------------------------------------------------------------------------


def step_arm_batch(position, jaw, delta, phi, ws: Workspace):
    """Vectorized step_arm over rows; ``phi=None`` keeps the jaws. Returns (position, jaw)."""
    clipped = np.clip(delta, -1.0, 1.0)
    position = np.minimum(np.maximum(ws.eta * clipped + position, ws.low), ws.high)
    if phi is not None:
        jaw = (np.clip(phi, -1.0, 1.0) + 1.0) / 2.0
    return position, jaw


def update_grasp_batch(position, jaw, attached, obj, radius: float, ws: Workspace):
    """Vectorized update_grasp. Returns (attached, object positions)."""
    obj = np.where(attached[:, None], position, obj)
    grab = (jaw < GRASP_JAW_THRESHOLD) & (distance(position, obj) <= radius)
    obj = np.where(grab[:, None], position, obj)
    drop = attached & ~grab
    if drop.any():
        obj[drop, 2] = ws.table_height
    return grab, obj

"""PSM Reach and PSM Pick goal environments.

The interface follows Gym's ``make / reset / step / render``. Observations are
normalized by the workspace range; rewards are sparse (-1 until the achieved
goal is within ``delta`` meters of the desired goal, then 0).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sim import (
    GRASP_JAW_THRESHOLD,
    PsmState,
    SceneObject,
    Workspace,
    clamp_to_workspace,
    distance,
    normalize,
    step_arm,
    update_grasp,
)

KINDS = ("reach", "pick")
DEFAULT_RHO = {"reach": 0.05, "pick": 0.025}
DEFAULT_CENTER = (0.0, 0.0, -0.10)
HOVER_ABOVE_TABLE = 0.01


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "reach"
    rho: float | None = None
    eta: float = 0.001
    delta: float = 0.003
    horizon: int = 100
    center: tuple[float, float, float] = DEFAULT_CENTER
    table_height: float | None = None
    grasp_radius: float = 0.005
    seed: int = 0

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KINDS:
            raise ConfigError(f"env kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.rho is None:
            object.__setattr__(self, "rho", DEFAULT_RHO[kind])
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        for name in ("rho", "eta", "delta", "grasp_radius"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if int(self.horizon) < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        try:
            ws = self.workspace
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "table_height", float(ws.table_height))

    @property
    def workspace(self) -> Workspace:
        return Workspace(np.array(self.center), self.rho, self.eta, self.table_height)

    @property
    def state_dim(self) -> int:
        return 6 if self.kind == "reach" else 10

    @property
    def action_dim(self) -> int:
        return 3 if self.kind == "reach" else 4

    def replace(self, **changes) -> EnvConfig:
        data = self.to_dict()
        data.update(changes)
        return EnvConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["center"] = list(self.center)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> EnvConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GoalObservation:
    state: np.ndarray
    achieved_goal: np.ndarray
    desired_goal: np.ndarray


@dataclass
class StepResult:
    observation: GoalObservation
    reward: float
    done: bool
    info: dict

    def __iter__(self):
        return iter((self.observation, self.reward, self.done, self.info))


@dataclass
class Frame:
    step: int
    p: list[float]
    j: float
    o: list[float] | None
    attached: bool
    g: list[float]
    r: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> Frame:
        return cls(**json.loads(line))


def write_frames(frames, path) -> None:
    with open(path, "w") as fh:
        for frame in frames:
            fh.write(frame.to_json() + "\n")


def read_frames(path) -> list[Frame]:
    with open(path) as fh:
        return [Frame.from_json(line) for line in fh if line.strip()]


def compute_reward(achieved, desired, delta: float, rho: float):
    """0 where rho * ||achieved - desired|| <= delta, else -1. Broadcasts over leading axes."""
    dist = rho * distance(achieved, desired)
    reward = np.where(dist > delta, -1.0, 0.0)
    return float(reward) if reward.ndim == 0 else reward


class PsmEnv:
    """Base class; use :func:`make`."""

    def __init__(self, config: EnvConfig, record_frames: bool = False):
        self.config = config
        self.ws = config.workspace
        self.rng = np.random.default_rng(config.seed)
        self.record_frames = record_frames
        self.frames: list[Frame] = []
        self.t = 0
        self.last_reward: float | None = None
        self.arm = PsmState(self.ws.center.copy())
        self.obj: SceneObject | None = None
        self.goal = self.ws.center.copy()

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def _sample_box(self, z_min: float | None = None) -> np.ndarray:
        lo, hi = self.ws.low, self.ws.high
        if z_min is not None:
            lo[2] = max(lo[2], z_min)
        return self.rng.uniform(lo, hi)

    def reset(self) -> GoalObservation:
        self.t = 0
        self.last_reward = None
        self.frames = []
        self._reset_scene()
        obs = self.observe()
        if self.record_frames:
            self.render()
        return obs

    def step(self, action) -> StepResult:
        action = np.asarray(action, dtype=float)
        if action.shape != (self.action_dim,):
            raise ValueError(f"{self.config.kind} expects action shape ({self.action_dim},), got {action.shape}")
        if not np.all(np.isfinite(action)):
            raise ValueError(f"non-finite action {action}")
        clamped = self._apply(action)
        self.t += 1
        obs = self.observe()
        reward = compute_reward(obs.achieved_goal, obs.desired_goal, self.config.delta, self.config.rho)
        self.last_reward = reward
        done = self.t >= self.config.horizon
        if self.record_frames:
            self.render()
        return StepResult(obs, reward, done, {"is_success": reward == 0.0, "action_clamped": clamped})

    def render(self) -> Frame:
        frame = Frame(
            step=self.t,
            p=self.arm.position.tolist(),
            j=float(self.arm.jaw),
            o=None if self.obj is None else self.obj.position.tolist(),
            attached=bool(self.arm.attached),
            g=self.goal.tolist(),
            r=self.last_reward,
        )
        if self.record_frames and (not self.frames or self.frames[-1].step != frame.step):
            self.frames.append(frame)
        return frame

    def _reset_scene(self) -> None:
        raise NotImplementedError

    def _apply(self, action: np.ndarray) -> bool:
        raise NotImplementedError

    def observe(self) -> GoalObservation:
        raise NotImplementedError


class ReachEnv(PsmEnv):
    def _reset_scene(self) -> None:
        self.arm = PsmState(self._sample_box(), jaw=1.0)
        self.goal = self._sample_box()

    def _apply(self, action: np.ndarray) -> bool:
        self.arm, clamped = step_arm(self.arm, action, None, self.ws)
        return clamped

    def observe(self) -> GoalObservation:
        p = normalize(self.arm.position, self.ws)
        g = normalize(self.goal, self.ws)
        return GoalObservation(np.concatenate([p, g]), p, g)


class PickEnv(PsmEnv):
    def _reset_scene(self) -> None:
        start = self.ws.center.copy()
        self.arm = PsmState(start, jaw=1.0)
        below = start.copy()
        below[2] = self.ws.table_height
        self.obj = SceneObject(below, self.config.grasp_radius)
        self.goal = self._sample_box(z_min=self.ws.table_height + self.config.delta)

    def _apply(self, action: np.ndarray) -> bool:
        self.arm, clamped = step_arm(self.arm, action[:3], action[3], self.ws)
        self.arm, self.obj = update_grasp(self.arm, self.obj, self.ws)
        return clamped

    def observe(self) -> GoalObservation:
        p = normalize(self.arm.position, self.ws)
        o = normalize(self.obj.position, self.ws)
        g = normalize(self.goal, self.ws)
        return GoalObservation(np.concatenate([p, [2.0 * self.arm.jaw - 1.0], o, g]), o, g)


def make(config: EnvConfig | str = "reach", record_frames: bool = False, **overrides) -> PsmEnv:
    if isinstance(config, str):
        config = EnvConfig(kind=config, **overrides)
    elif overrides:
        config = config.replace(**overrides)
    return (ReachEnv if config.kind == "reach" else PickEnv)(config, record_frames=record_frames)


# --------------------------------------------------------------------------
# Episodes
# --------------------------------------------------------------------------


@dataclass
class Episode:
    states: np.ndarray  # (T+1, state_dim); the last 3 entries are the desired goal
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    achieved: np.ndarray  # (T+1, 3)
    desired: np.ndarray  # (3,)
    attached: np.ndarray = field(default=None)  # (T+1,) bool

    def __post_init__(self):
        if self.attached is None:
            self.attached = np.zeros(len(self.states), dtype=bool)

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def success(self) -> bool:
        return bool(self.rewards[-1] == 0.0)

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())


class EpisodeRecorder:
    def __init__(self, obs: GoalObservation):
        self.states = [obs.state]
        self.achieved = [obs.achieved_goal]
        self.desired = obs.desired_goal
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.attached = [False]

    def add(self, action, result: StepResult, attached: bool = False) -> None:
        self.actions.append(np.asarray(action, dtype=float))
        self.rewards.append(result.reward)
        self.states.append(result.observation.state)
        self.achieved.append(result.observation.achieved_goal)
        self.attached.append(attached)

    def finish(self) -> Episode:
        return Episode(
            states=np.array(self.states),
            actions=np.array(self.actions),
            rewards=np.array(self.rewards),
            achieved=np.array(self.achieved),
            desired=np.array(self.desired),
            attached=np.array(self.attached, dtype=bool),
        )


# --------------------------------------------------------------------------
# Scripted controllers
# --------------------------------------------------------------------------


class ScriptedPolicy:
    """Hand-written controllers acting on normalized observations.

    Reach: move straight toward the goal at up to full speed per axis.
    Pick: align over the object at hover height, descend with the jaw open,
    close for two steps, then carry the object to the goal.
    """

    close_tol = 0.0005  # m; start closing once this near the object
    hold_steps = 2

    def __init__(self, config: EnvConfig):
        self.config = config
        self.gain = config.rho / config.eta
        ws = config.workspace
        self.hover = (ws.table_height + HOVER_ABOVE_TABLE - ws.center[2]) / config.rho
        self.closing = np.zeros(0, dtype=int)

    def reset(self, n: int = 1) -> None:
        self.closing = np.zeros(n, dtype=int)

    def __call__(self, states) -> np.ndarray:
        return self.act(states)

    def act(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if self.config.kind == "reach":
            return np.clip((states[:, 3:6] - states[:, 0:3]) * self.gain, -1.0, 1.0)
        if len(self.closing) != len(states):
            self.reset(len(states))
        return np.array([self._pick_row(i, s) for i, s in enumerate(states)])

    def _pick_row(self, i: int, s: np.ndarray) -> np.ndarray:
        p, jaw, o, g = s[0:3], s[3], s[4:7], s[7:10]
        rho = self.config.rho
        if 0 < self.closing[i] < self.hold_steps:
            self.closing[i] += 1
            return np.array([0.0, 0.0, 0.0, -1.0])
        self.closing[i] = 0
        holding = (jaw + 1.0) / 2.0 < GRASP_JAW_THRESHOLD and np.linalg.norm(p - o) * rho < 1e-9
        if holding:
            return np.append(np.clip((g - o) * self.gain, -1.0, 1.0), -1.0)
        if np.linalg.norm((o - p)[:2]) * rho > self.close_tol:
            target = np.array([o[0], o[1], max(self.hover, o[2])])
            return np.append(np.clip((target - p) * self.gain, -1.0, 1.0), 1.0)
        if np.linalg.norm(o - p) * rho > self.close_tol:
            return np.append(np.clip((o - p) * self.gain, -1.0, 1.0), 1.0)
        self.closing[i] = 1
        return np.array([0.0, 0.0, 0.0, -1.0])


def run_episode(env: PsmEnv, policy, obs: GoalObservation | None = None) -> Episode:
    """Roll out one full episode of ``policy`` (states -> actions) in ``env``."""
    if obs is None:
        obs = env.reset()
    if hasattr(policy, "reset"):
        policy.reset(1)
    rec = EpisodeRecorder(obs)
    done = False
    while not done:
        action = np.asarray(policy(obs.state[None, :]), dtype=float).reshape(env.action_dim)
        result = env.step(action)
        rec.add(action, result, env.arm.attached)
        obs, done = result.observation, result.done
    return rec.finish()


def scripted_demo(env: PsmEnv, obs: GoalObservation | None = None) -> Episode:
    return run_episode(env, ScriptedPolicy(env.config), obs)


def demo_is_valid(ep: Episode, kind: str) -> bool:
    if not ep.success:
        return False
    if kind == "pick":
        return bool(ep.attached.any() and ep.attached[-1])
    return True


def generate_demos(config: EnvConfig, count: int, max_attempts: int | None = None):
    """Collect ``count`` successful scripted episodes, resampling failures.

    Returns (episodes, stats) where stats counts attempts and rejections.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    env = make(config)
    max_attempts = max_attempts or 20 * count
    episodes, attempts = [], 0
    while len(episodes) < count:
        if attempts >= max_attempts:
            raise RuntimeError(f"only {len(episodes)}/{count} demos succeeded in {attempts} attempts")
        attempts += 1
        ep = scripted_demo(env)
        if demo_is_valid(ep, config.kind):
            episodes.append(ep)
    return episodes, {"attempts": attempts, "rejected": attempts - count}


# --------------------------------------------------------------------------
# Demo files
# --------------------------------------------------------------------------

DEMO_MAGIC = b"DVRL-DEMO"
DEMO_VERSION = 1


class IntegrityError(Exception):
    pass


def save_demos(path, episodes: list[Episode], config: EnvConfig) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    then per episode little-endian f64 states, actions, rewards, achieved,
    desired and u8 attached flags, then an 8-byte BLAKE2b digest of all of it."""
    T = episodes[0].length
    header = {
        "env": config.to_dict(),
        "count": len(episodes),
        "horizon": T,
        "state_dim": config.state_dim,
        "action_dim": config.action_dim,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [DEMO_MAGIC, struct.pack("<II", DEMO_VERSION, len(hb)), hb]
    for ep in episodes:
        if ep.length != T:
            raise ValueError("all demo episodes must share one horizon")
        for arr in (ep.states, ep.actions, ep.rewards, ep.achieved, ep.desired):
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        parts.append(np.asarray(ep.attached, dtype=np.uint8).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.blake2b(body, digest_size=8).digest())


def load_demos(path) -> tuple[list[Episode], EnvConfig]:
    data = Path(path).read_bytes()
    body, digest = data[:-8], data[-8:]
    if not body.startswith(DEMO_MAGIC):
        raise IntegrityError(f"{path}: not a demo file")
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    off = len(DEMO_MAGIC)
    version, hlen = struct.unpack_from("<II", body, off)
    if version != DEMO_VERSION:
        raise IntegrityError(f"{path}: unsupported demo version {version}")
    off += 8
    header = json.loads(body[off : off + hlen])
    off += hlen
    config = EnvConfig.from_dict(header["env"])
    T, D, A = header["horizon"], header["state_dim"], header["action_dim"]
    shapes = [(T + 1, D), (T, A), (T,), (T + 1, 3), (3,)]

    episodes = []
    for _ in range(header["count"]):
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape))
            arrays.append(np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(float))
            off += 8 * n
        attached = np.frombuffer(body, dtype=np.uint8, count=T + 1, offset=off).astype(bool)
        off += T + 1
        episodes.append(Episode(*arrays, attached=attached))
    if off != len(body):
        raise IntegrityError(f"{path}: trailing bytes")
    return episodes, config

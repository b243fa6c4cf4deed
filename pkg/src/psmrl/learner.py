"""DDPG with hindsight relabeling and an optional behavioral-cloning term.

Observations already carry the desired goal in their last three entries, so
relabeling a transition only overwrites that slice of ``s`` and ``s'`` and
recomputes the sparse reward.
"""
from __future__ import annotations

import csv
import logging
import pickle
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from .envs import ConfigError, EnvConfig, Episode, compute_reward
from .neural import (
    Adam,
    Checkpoint,
    MlpParameters,
    adam_step,
    make_mlp,
    mlp_backward,
    mlp_forward,
    polyak_update,
    save_checkpoint,
)
from .rollout import VecEnvHandle, rollout_parallel, spawn

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "success_rate", "critic_loss", "actor_loss", "bc_loss", "wall_seconds")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.98
    tau: float = 0.95  # target <- tau * target + (1 - tau) * online
    batch_size: int = 256
    her_k: float = 4.0
    random_eps: float = 0.3
    noise_eps: float = 0.2
    n_epochs: int = 50
    n_cycles: int = 50
    n_batches: int = 40
    n_envs: int = 6
    rollouts_per_cycle: int = 1
    bc_weight: float = 1.0
    demo_batch_size: int = 128
    q_filter: bool = False
    action_l2: float = 0.05
    hidden: tuple[int, ...] = (64, 64, 64)
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    buffer_episodes: int = 10_000
    n_test_episodes: int = 50
    target_success: float | None = None  # stop early once evaluation reaches this
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        for name in ("random_eps",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.her_k < 0 or self.noise_eps < 0 or self.bc_weight < 0 or self.action_l2 < 0:
            raise ConfigError("her_k, noise_eps, bc_weight and action_l2 must be non-negative")
        for name in ("batch_size", "n_epochs", "n_cycles", "n_envs", "rollouts_per_cycle", "buffer_episodes", "n_test_episodes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def replace(self, **changes) -> TrainerConfig:
        data = asdict(self)
        data.update(changes)
        return TrainerConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> TrainerConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**data)


# --------------------------------------------------------------------------
# Replay
# --------------------------------------------------------------------------


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    ag: np.ndarray  # achieved goal at t
    ag2: np.ndarray  # achieved goal at t + 1
    g: np.ndarray
    relabeled: np.ndarray

    def __len__(self) -> int:
        return len(self.r)


def concat_batches(a: Batch, b: Batch) -> Batch:
    return Batch(*(np.concatenate([getattr(a, f), getattr(b, f)]) for f in Batch.__dataclass_fields__))


class ReplayBuffer:
    """Whole episodes in a FIFO ring of ``capacity`` episodes."""

    def __init__(self, capacity: int, horizon: int, state_dim: int, action_dim: int):
        self.capacity, self.horizon = capacity, horizon
        self.states = np.zeros((capacity, horizon + 1, state_dim))
        self.actions = np.zeros((capacity, horizon, action_dim))
        self.rewards = np.zeros((capacity, horizon))
        self.achieved = np.zeros((capacity, horizon + 1, 3))
        self.goals = np.zeros((capacity, 3))
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @property
    def n_transitions(self) -> int:
        return self.size * self.horizon


def store_episode(buffer: ReplayBuffer, episode: Episode) -> None:
    if episode.length != buffer.horizon:
        raise ValueError(f"episode length {episode.length} != buffer horizon {buffer.horizon}")
    i = buffer.cursor
    buffer.states[i] = episode.states
    buffer.actions[i] = episode.actions
    buffer.rewards[i] = episode.rewards
    buffer.achieved[i] = episode.achieved
    buffer.goals[i] = episode.desired
    buffer.cursor = (i + 1) % buffer.capacity
    buffer.size = min(buffer.size + 1, buffer.capacity)


def buffer_from_episodes(episodes, state_dim: int, action_dim: int) -> ReplayBuffer:
    buf = ReplayBuffer(len(episodes), episodes[0].length, state_dim, action_dim)
    for ep in episodes:
        store_episode(buf, ep)
    return buf


def sample_her_batch(
    buffer: ReplayBuffer, batch_size: int, k: float, delta: float, rho: float, rng: np.random.Generator
) -> Batch:
    """Uniform transitions; a fraction k/(k+1) get a goal achieved later in the same episode."""
    if buffer.size == 0:
        raise ValueError("cannot sample from an empty buffer")
    T = buffer.horizon
    ep = rng.integers(buffer.size, size=batch_size)
    t = rng.integers(T, size=batch_size)
    relabel = rng.random(batch_size) < (1.0 - 1.0 / (1.0 + k))
    future = t + 1 + (rng.random(batch_size) * (T - t)).astype(int)

    g = buffer.goals[ep].copy()
    g[relabel] = buffer.achieved[ep[relabel], future[relabel]]
    s = buffer.states[ep, t]
    s2 = buffer.states[ep, t + 1]
    s[:, -3:] = g
    s2[:, -3:] = g
    ag2 = buffer.achieved[ep, t + 1]
    r = compute_reward(ag2, g, delta, rho)
    return Batch(s, buffer.actions[ep, t], np.atleast_1d(r), s2, buffer.achieved[ep, t], ag2, g, relabel)


# --------------------------------------------------------------------------
# Networks and updates
# --------------------------------------------------------------------------


@dataclass
class Networks:
    actor: MlpParameters
    critic: MlpParameters
    target_actor: MlpParameters
    target_critic: MlpParameters
    actor_opt: Adam
    critic_opt: Adam

    @classmethod
    def create(cls, state_dim: int, action_dim: int, cfg: TrainerConfig, rng: np.random.Generator) -> Networks:
        actor = make_mlp(state_dim, cfg.hidden, action_dim, "tanh", rng)
        critic = make_mlp(state_dim + action_dim, cfg.hidden, 1, "identity", rng)
        return cls(
            actor,
            critic,
            actor.copy(),
            critic.copy(),
            Adam(actor.size, lr=cfg.lr_actor),
            Adam(critic.size, lr=cfg.lr_critic),
        )

    def checkpoint(self, env_config: EnvConfig) -> Checkpoint:
        return Checkpoint(env_config.to_dict(), self.actor, self.critic, self.target_actor, self.target_critic)


class ActorPolicy:
    """Deterministic policy wrapper around actor weights (a picklable snapshot)."""

    def __init__(self, actor: MlpParameters):
        self.actor = actor

    def __call__(self, states) -> np.ndarray:
        return mlp_forward(self.actor, np.atleast_2d(states))[0]


def critic_update(batch: Batch, nets: Networks, gamma: float, clip_return: bool = True) -> float:
    """One Adam step on the Bellman loss mean((Q(s,a) - y)^2), y from the target networks."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    a2 = mlp_forward(nets.target_actor, batch.s2)[0]
    q2 = mlp_forward(nets.target_critic, np.hstack([batch.s2, a2]))[0][:, 0]
    y = batch.r + gamma * q2
    if clip_return and gamma < 1.0:
        y = np.clip(y, -1.0 / (1.0 - gamma), 0.0)
    q, cache = mlp_forward(nets.critic, np.hstack([batch.s, batch.a]))
    diff = q[:, 0] - y
    loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise FloatingPointError(f"critic loss is {loss}; |q| max {np.abs(q).max()}, |y| max {np.abs(y).max()}")
    grad, _ = mlp_backward(nets.critic, cache, (2.0 / len(diff)) * diff[:, None], input_gradient=False)
    adam_step(nets.critic_opt, nets.critic, grad)
    return loss


def actor_update(
    states: np.ndarray,
    demo: Batch | None,
    nets: Networks,
    bc_weight: float = 1.0,
    action_l2: float = 0.0,
    q_filter: bool = False,
) -> tuple[float, float]:
    """One Adam step on -mean Q(s, pi(s)) + action_l2 * mean(z^2) + bc_weight * L_BC.

    z is the actor output before tanh; penalizing it keeps the head out of deep
    saturation, where neither the critic nor the BC term could move it.
    L_BC is the summed squared error between pi(s_d) and the demo actions a_d.
    Returns (policy loss without the BC term, L_BC).
    """
    n_demo = 0 if demo is None else len(demo)
    S = states if n_demo == 0 else np.vstack([states, demo.s])
    pi, a_cache = mlp_forward(nets.actor, S)
    q, c_cache = mlp_forward(nets.critic, np.hstack([S, pi]))
    N, A = pi.shape
    z = a_cache.pre_output
    pi_loss = float(-q.mean() + action_l2 * np.mean(z**2))

    _, dq_dx = mlp_backward(nets.critic, c_cache, np.full((N, 1), -1.0 / N), param_gradient=False)
    g_pi = dq_dx[:, -A:]

    bc_loss = 0.0
    if n_demo:
        diff = pi[-n_demo:] - demo.a
        mask = np.ones(n_demo)
        if q_filter:
            q_demo = mlp_forward(nets.critic, np.hstack([demo.s, demo.a]))[0][:, 0]
            mask = (q_demo > q[-n_demo:, 0]).astype(float)
        bc_loss = float(np.sum(mask[:, None] * diff**2))
        g_pi[-n_demo:] += bc_weight * 2.0 * mask[:, None] * diff

    if not np.isfinite(pi_loss + bc_loss):
        raise FloatingPointError(f"actor loss non-finite (pi {pi_loss}, bc {bc_loss})")
    grad, _ = mlp_backward(nets.actor, a_cache, g_pi, input_gradient=False, pre_output_gradient=action_l2 * 2.0 * z / (N * A))
    adam_step(nets.actor_opt, nets.actor, grad)
    return pi_loss, bc_loss


def update_targets(nets: Networks, tau: float) -> None:
    polyak_update(nets.target_actor, nets.actor, tau)
    polyak_update(nets.target_critic, nets.critic, tau)


def perturb_action(action, rng: np.random.Generator, random_eps: float, noise_eps: float) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    if rng.random() < random_eps:
        return rng.uniform(-1.0, 1.0, action.shape)
    noisy = action + noise_eps * rng.standard_normal(action.shape)
    return np.clip(noisy, -1.0, 1.0)


def explore_action(policy, s, random_eps: float, noise_eps: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform random action with probability ``random_eps``, else pi(s) + N(0, noise_eps^2), clipped."""
    action = np.asarray(policy(np.atleast_2d(s)), dtype=float)[0]
    return perturb_action(action, rng, random_eps, noise_eps)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def _success_rate(handle: VecEnvHandle, policy, rounds: int) -> float:
    episodes, _ = rollout_parallel(handle, policy, rounds)
    return float(np.mean([ep.success for ep in episodes]))


def evaluate(policy, env_config: EnvConfig, n_episodes: int = 50, max_steps: int | None = None, seed: int | None = None) -> float:
    """Fraction of episodes whose final state earns reward 0, with no exploration noise."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    cfg = env_config if max_steps is None else env_config.replace(horizon=int(max_steps))
    seed_base = cfg.seed + 10_000 if seed is None else seed
    return _success_rate(spawn(n_episodes, cfg, seed_base), policy, 1)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    success_rate: float
    critic_loss: float
    actor_loss: float
    bc_loss: float
    wall_seconds: float

    def row(self) -> list[str]:
        return [
            str(self.epoch),
            repr(self.success_rate),
            repr(self.critic_loss),
            repr(self.actor_loss),
            repr(self.bc_loss),
            f"{self.wall_seconds:.3f}",
        ]


@dataclass
class TrainResult:
    nets: Networks
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_success: float = -1.0
    best_epoch: int = -1


def read_metrics(path) -> list[EpochMetrics]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(METRIC_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                epoch, *vals = rec
                rows.append(EpochMetrics(int(epoch), *(float(v) for v in vals)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed metrics row {rec!r}") from exc
    return rows


class _DemoPool:
    def __init__(self, episodes, env_config: EnvConfig):
        self.buffer = buffer_from_episodes(episodes, env_config.state_dim, env_config.action_dim)
        self.delta, self.rho = env_config.delta, env_config.rho

    def sample(self, n: int, rng) -> Batch:
        # demo goals are kept: the BC target is the demonstrated action for its own goal
        return sample_her_batch(self.buffer, n, 0.0, self.delta, self.rho, rng)


def train(
    env_config: EnvConfig,
    cfg: TrainerConfig,
    demos: list[Episode] | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    on_epoch=None,
) -> TrainResult:
    """Epoch loop: rollouts with exploration, HER updates, Polyak targets, evaluation.

    With ``out_dir`` the metrics CSV, latest/best checkpoints and a resume state
    are written after every epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    D, A = env_config.state_dim, env_config.action_dim
    nets = Networks.create(D, A, cfg, rng)
    buffer = ReplayBuffer(cfg.buffer_episodes, env_config.horizon, D, A)
    workers = spawn(cfg.n_envs, env_config, seed_base=1000 * cfg.seed + 1)
    evaluator = spawn(cfg.n_test_episodes, env_config, seed_base=1000 * cfg.seed + 500_001)
    demo_pool = _DemoPool(demos, env_config) if demos else None
    explore = partial(perturb_action, random_eps=cfg.random_eps, noise_eps=cfg.noise_eps)

    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(nets)
    start_epoch = 0
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state_path = out / "resume.pkl"
        if resume and state_path.exists():
            with open(state_path, "rb") as fh:
                state = pickle.load(fh)
            nets, rng, workers, evaluator = state["nets"], state["rng"], state["workers"], state["evaluator"]
            result = TrainResult(nets, state["metrics"], state["best_success"], state["best_epoch"])
            start_epoch = len(result.metrics)
            log.info("resuming at epoch %d (replay buffer starts empty)", start_epoch)
        _write_metrics(out / "metrics.csv", result.metrics)

    for epoch in range(start_epoch, cfg.n_epochs):
        t0 = time.perf_counter()
        c_losses, a_losses, bc_losses = [], [], []
        for _ in range(cfg.n_cycles):
            policy = ActorPolicy(nets.actor)
            episodes, _ = rollout_parallel(workers, policy, cfg.rollouts_per_cycle, explore=explore)
            for ep in episodes:
                store_episode(buffer, ep)
            for _ in range(cfg.n_batches):
                batch = sample_her_batch(buffer, cfg.batch_size, cfg.her_k, env_config.delta, env_config.rho, rng)
                demo = demo_pool.sample(cfg.demo_batch_size, rng) if demo_pool else None
                full = batch if demo is None else concat_batches(batch, demo)
                c_losses.append(critic_update(full, nets, cfg.gamma))
                pi_loss, bc_loss = actor_update(batch.s, demo, nets, cfg.bc_weight, cfg.action_l2, cfg.q_filter)
                a_losses.append(pi_loss)
                bc_losses.append(bc_loss)
            update_targets(nets, cfg.tau)

        success = _success_rate(evaluator, ActorPolicy(nets.actor), 1)
        m = EpochMetrics(
            epoch,
            success,
            float(np.mean(c_losses)),
            float(np.mean(a_losses)),
            float(np.mean(bc_losses)),
            time.perf_counter() - t0,
        )
        result.metrics.append(m)
        log.info("epoch %d success %.3f critic %.4f actor %.4f bc %.4f (%.1fs)", *asdict(m).values())
        improved = success >= result.best_success
        if improved:
            result.best_success, result.best_epoch = success, epoch
        if out is not None:
            _write_metrics(out / "metrics.csv", result.metrics)
            save_checkpoint(out / "latest.ckpt", nets.checkpoint(env_config))
            if improved:
                save_checkpoint(out / "best.ckpt", nets.checkpoint(env_config))
            with open(out / "resume.pkl", "wb") as fh:
                pickle.dump(
                    {
                        "nets": nets,
                        "rng": rng,
                        "workers": workers,
                        "evaluator": evaluator,
                        "metrics": result.metrics,
                        "best_success": result.best_success,
                        "best_epoch": result.best_epoch,
                    },
                    fh,
                )
        if on_epoch is not None:
            on_epoch(m)
        if cfg.target_success is not None and success >= cfg.target_success:
            break
    result.nets = nets
    return result


def _write_metrics(path: Path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for m in metrics:
            writer.writerow(m.row())

"""Run N independent environment instances side by side, with timing.

Every instance owns its scene, its environment RNG and its exploration RNG.
Instances share nothing; the coordinator only stacks their observations for a
single batched policy call per step ("vector" backend) or ships each instance
to a worker process together with a policy snapshot ("process" backend). Both
backends produce the same episodes for the same seeds.
"""
from __future__ import annotations

import csv
import gc
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import EnvConfig, Episode, PsmEnv, compute_reward, make
from .sim import PsmState, SceneObject, step_arm_batch, update_grasp_batch

BENCH_COLUMNS = ("n_envs", "seconds_per_round", "episodes", "steps_per_second")


class RolloutError(RuntimeError):
    def __init__(self, instance: int, cause: BaseException):
        super().__init__(f"instance {instance} failed: {cause!r}")
        self.instance = instance
        self.cause = cause

    def __reduce__(self):
        return RolloutError, (self.instance, self.cause)


@dataclass
class TimingReport:
    n_envs: int
    round_seconds: list[float] = field(default_factory=list)
    episodes: int = 0
    steps: int = 0

    # Every round does the same work, so the fastest one is the least noisy
    # estimate of its cost; throughput figures use that round too.
    @property
    def seconds_per_round(self) -> float:
        return min(self.round_seconds) if self.round_seconds else float("nan")

    @property
    def total_seconds(self) -> float:
        return float(sum(self.round_seconds))

    @property
    def steps_per_second(self) -> float:
        if not self.round_seconds:
            return float("nan")
        return self.steps / len(self.round_seconds) / self.seconds_per_round

    @property
    def episodes_per_second(self) -> float:
        if not self.round_seconds:
            return float("nan")
        return self.episodes / len(self.round_seconds) / self.seconds_per_round


@dataclass
class VecEnvHandle:
    config: EnvConfig
    envs: list[PsmEnv]
    explore_rngs: list[np.random.Generator]
    seeds: list[int]
    step_counts: list[int]
    timing: TimingReport

    @property
    def n(self) -> int:
        return len(self.envs)


def spawn(n: int, config: EnvConfig, seed_base: int = 0) -> VecEnvHandle:
    if n < 1:
        raise ValueError(f"need at least one instance, got n={n}")
    seeds = [seed_base + i for i in range(n)]
    try:
        envs = [make(config.replace(seed=s)) for s in seeds]
    except MemoryError as exc:
        raise RuntimeError(f"could not spawn {n} environments") from exc
    rngs = [np.random.default_rng([s, 1]) for s in seeds]
    return VecEnvHandle(config, envs, rngs, seeds, [0] * n, TimingReport(n))


def _lockstep(envs, rngs, policy, explore) -> list[Episode]:
    """One synchronized episode on every instance.

    Resets go through each instance's own environment (its scene and RNG). The
    steps then run as one batched kernel over the stacked scenes, which does the
    same arithmetic as ``PsmEnv.step`` row by row, and the final scene is
    written back into each instance.
    """
    n = len(envs)
    cfg = envs[0].config
    ws = envs[0].ws
    T, D, A = cfg.horizon, cfg.state_dim, cfg.action_dim
    pick = cfg.kind == "pick"
    if hasattr(policy, "reset"):
        policy.reset(n)

    states = np.empty((n, T + 1, D))
    actions = np.empty((n, T, A))
    rewards = np.empty((n, T))
    achieved = np.empty((n, T + 1, 3))
    attached_log = np.zeros((n, T + 1), dtype=bool)
    for i, env in enumerate(envs):
        try:
            obs = env.reset()
        except Exception as exc:
            raise RolloutError(i, exc) from exc
        states[i, 0] = obs.state
        achieved[i, 0] = obs.achieved_goal
    desired = states[:, 0, -3:].copy()
    pos = np.array([env.arm.position for env in envs])
    jaw = np.array([env.arm.jaw for env in envs], dtype=float)
    attached = np.zeros(n, dtype=bool)
    obj = np.array([env.obj.position for env in envs]) if pick else None
    radius = cfg.grasp_radius

    for t in range(T):
        act = np.asarray(policy(states[:, t]), dtype=float).reshape(n, -1)
        if explore is not None:
            act = np.array([explore(a, rng) for a, rng in zip(act, rngs)])
        if act.shape != (n, A):
            raise RolloutError(0, ValueError(f"policy returned shape {act.shape}, expected {(n, A)}"))
        bad = ~np.all(np.isfinite(act), axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise RolloutError(i, ValueError(f"non-finite action {act[i]}"))
        actions[:, t] = act
        if pick:
            pos, jaw = step_arm_batch(pos, jaw, act[:, :3], act[:, 3], ws)
            attached, obj = update_grasp_batch(pos, jaw, attached, obj, radius, ws)
            p = (pos - ws.center) / ws.rho
            o = (obj - ws.center) / ws.rho
            states[:, t + 1, 0:3] = p
            states[:, t + 1, 3] = 2.0 * jaw - 1.0
            states[:, t + 1, 4:7] = o
            achieved[:, t + 1] = o
        else:
            pos, jaw = step_arm_batch(pos, jaw, act, None, ws)
            p = (pos - ws.center) / ws.rho
            states[:, t + 1, 0:3] = p
            achieved[:, t + 1] = p
        states[:, t + 1, -3:] = desired
        attached_log[:, t + 1] = attached
        rewards[:, t] = compute_reward(achieved[:, t + 1], desired, cfg.delta, cfg.rho)

    episodes = []
    for i, env in enumerate(envs):
        env.arm = PsmState(pos[i].copy(), float(jaw[i]), bool(attached[i]))
        if pick:
            env.obj = SceneObject(obj[i].copy(), radius)
        env.t = T
        env.last_reward = float(rewards[i, -1])
        episodes.append(
            Episode(
                states=states[i].copy(),
                actions=actions[i].copy(),
                rewards=rewards[i].copy(),
                achieved=achieved[i].copy(),
                desired=desired[i].copy(),
                attached=attached_log[i].copy(),
            )
        )
    return episodes


def _worker(env, rng, policy, explore, rounds):
    episodes = []
    for _ in range(rounds):
        episodes.extend(_lockstep([env], [rng], policy, explore))
    return episodes, env, rng


def rollout_parallel(
    handle: VecEnvHandle,
    policy: Callable,
    episodes_per_instance: int = 1,
    explore: Callable | None = None,
    backend: str = "vector",
    max_workers: int | None = None,
) -> tuple[list[Episode], TimingReport]:
    """Run ``episodes_per_instance`` synchronized rounds across all instances.

    Episodes come back ordered round-major (round 0 instances 0..n-1, round 1, ...).
    ``explore(action, rng)`` perturbs each instance's action with that instance's RNG.
    """
    report = TimingReport(handle.n)
    horizon = handle.config.horizon
    episodes: list[Episode] = []
    if backend == "vector":
        for _ in range(episodes_per_instance):
            t0 = time.perf_counter()
            batch = _lockstep(handle.envs, handle.explore_rngs, policy, explore)
            report.round_seconds.append(time.perf_counter() - t0)
            episodes.extend(batch)
    elif backend == "process":
        per_instance = [None] * handle.n
        t0 = time.perf_counter()
        with ProcessPoolExecutor(max_workers=max_workers or handle.n) as pool:
            futures = [
                pool.submit(_worker, env, rng, policy, explore, episodes_per_instance)
                for env, rng in zip(handle.envs, handle.explore_rngs)
            ]
            for i, fut in enumerate(futures):
                try:
                    per_instance[i], handle.envs[i], handle.explore_rngs[i] = fut.result()
                except RolloutError as exc:
                    raise RolloutError(i, exc.cause) from exc
                except Exception as exc:
                    raise RolloutError(i, exc) from exc
        elapsed = time.perf_counter() - t0
        report.round_seconds.extend([elapsed / episodes_per_instance] * episodes_per_instance)
        for r in range(episodes_per_instance):
            episodes.extend(per_instance[i][r] for i in range(handle.n))
    else:
        raise ValueError(f"unknown backend {backend!r}")

    report.episodes = len(episodes)
    report.steps = len(episodes) * horizon
    for i in range(handle.n):
        handle.step_counts[i] += episodes_per_instance * horizon
    handle.timing.round_seconds.extend(report.round_seconds)
    handle.timing.episodes += report.episodes
    handle.timing.steps += report.steps
    return episodes, report


def bench(config: EnvConfig, n_list, policy_factory: Callable, episodes: int = 20, seed: int = 0, backend: str = "vector"):
    """Time ``episodes`` synchronized rollout rounds for each instance count in ``n_list``."""
    n_list = list(n_list)
    if not n_list or min(n_list) < 1:
        raise ValueError("n_list must be non-empty with every n >= 1")
    policy = policy_factory()
    # warm-up so the first row does not pay one-off allocation costs
    rollout_parallel(spawn(1, config, seed), policy, 1, backend="vector")
    handles = [spawn(n, config, seed) for n in n_list]
    # Interleave the instance counts round by round: a slow stretch of the host
    # then hits every row instead of inflating one of them.
    # Collector pauses are not part of the work being timed (as in timeit).
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(episodes):
            for h in handles:
                rollout_parallel(h, policy, 1, backend=backend)
    finally:
        if gc_was_enabled:
            gc.enable()
    return [h.timing for h in handles]


def write_bench_table(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for rep in reports:
            writer.writerow([rep.n_envs, f"{rep.seconds_per_round:.6f}", rep.episodes, f"{rep.steps_per_second:.3f}"])


def read_bench_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

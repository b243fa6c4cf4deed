import numpy as np
import pytest

from psmrl.envs import ConfigError, EnvConfig, ScriptedPolicy, compute_reward, generate_demos, make, run_episode
from psmrl.learner import (
    METRIC_COLUMNS,
    ActorPolicy,
    Batch,
    Networks,
    ReplayBuffer,
    TrainerConfig,
    actor_update,
    buffer_from_episodes,
    critic_update,
    evaluate,
    explore_action,
    read_metrics,
    sample_her_batch,
    store_episode,
    train,
)
from psmrl.neural import mlp_forward


@pytest.fixture(scope="module")
def reach_episodes():
    env = make("reach", seed=0)
    rng = np.random.default_rng(0)
    return [run_episode(env, lambda s: rng.uniform(-1, 1, (1, 3))) for _ in range(20)]


def test_trainer_config_strict():
    cfg = TrainerConfig()
    assert TrainerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainerConfig.from_dict({"gama": 0.9})
    with pytest.raises(ConfigError):
        TrainerConfig(gamma=1.5)
    with pytest.raises(ConfigError):
        TrainerConfig(batch_size=0)


def test_buffer_is_fifo(reach_episodes):
    buf = ReplayBuffer(3, 100, 6, 3)
    for ep in reach_episodes[:5]:
        store_episode(buf, ep)
    assert len(buf) == 3 and buf.n_transitions == 300
    stored = {tuple(g) for g in buf.goals}
    assert stored == {tuple(ep.desired) for ep in reach_episodes[2:5]}
    short = make("reach", horizon=10)
    with pytest.raises(ValueError):
        store_episode(buf, run_episode(short, ScriptedPolicy(short.config)))


def test_her_relabel_fraction_and_rewards(reach_episodes):
    buf = buffer_from_episodes(reach_episodes, 6, 3)
    rng = np.random.default_rng(1)
    b = sample_her_batch(buf, 20_000, 4, 0.003, 0.05, rng)
    assert abs(b.relabeled.mean() - 0.8) < 0.02
    np.testing.assert_array_equal(b.r, compute_reward(b.ag2, b.g, 0.003, 0.05))
    np.testing.assert_array_equal(b.s[:, 3:], b.g)
    np.testing.assert_array_equal(b.s2[:, 3:], b.g)
    # k = 0 never relabels
    orig = sample_her_batch(buf, 2000, 0, 0.003, 0.05, np.random.default_rng(2))
    assert not orig.relabeled.any()


def test_her_future_goal_comes_from_later_step():
    # one episode whose achieved goal encodes the step index
    buf = ReplayBuffer(1, 10, 6, 3)
    buf.achieved[0] = np.arange(11.0)[:, None] * np.ones(3)
    buf.states[0, :, :3] = buf.achieved[0]
    buf.size = 1
    b = sample_her_batch(buf, 5000, 1e9, 0.003, 0.05, np.random.default_rng(3))
    t = b.ag[:, 0]
    future = b.g[:, 0]
    assert b.relabeled.all()
    assert np.all(future >= t + 1) and np.all(future <= 10)
    # the final step relabels to the last achieved goal, giving reward 0
    last = t == 9
    assert np.all(future[last] == 10) and np.all(b.r[last] == 0.0)


def _toy_nets(state_dim=2, action_dim=1, seed=0):
    cfg = TrainerConfig(hidden=(4,), lr_actor=1e-3, lr_critic=1e-3)
    return Networks.create(state_dim, action_dim, cfg, np.random.default_rng(seed))


def test_critic_target_is_clipped():
    nets = _toy_nets()
    # make the target critic wildly optimistic
    nets.target_critic.flat[:] = 0.0
    nets.target_critic.biases[-1][:] = 100.0
    n = 8
    batch = Batch(np.zeros((n, 2)), np.zeros((n, 1)), -np.ones(n), np.zeros((n, 2)), None, None, None, None)
    q_before = mlp_forward(nets.critic, np.zeros((n, 3)))[0][:, 0]
    loss = critic_update(batch, nets, gamma=0.98)
    # target clipped to 0, so the loss is mean(q^2)
    assert loss == pytest.approx(np.mean(q_before**2))
    nets.target_critic.biases[-1][:] = -1000.0
    q_before = mlp_forward(nets.critic, np.zeros((n, 3)))[0][:, 0]
    loss = critic_update(batch, nets, gamma=0.98)
    assert loss == pytest.approx(np.mean((q_before + 50.0) ** 2))


def test_actor_update_losses():
    nets = _toy_nets(seed=1)
    nets.critic.flat[:] = 0.0
    nets.critic.biases[-1][:] = -3.0  # Q = -3 everywhere
    s = np.random.default_rng(0).normal(size=(5, 2))
    pi = mlp_forward(nets.actor, s)[0]
    pi_loss, bc = actor_update(s, None, nets, bc_weight=1.0, action_l2=0.5)
    assert pi_loss == pytest.approx(3.0 + 0.5 * np.mean(np.arctanh(pi) ** 2))
    assert bc == 0.0

    ds = np.random.default_rng(1).normal(size=(3, 2))
    da = np.full((3, 1), 0.25)
    demo = Batch(ds, da, np.zeros(3), ds, None, None, None, None)
    pi_d = mlp_forward(nets.actor, ds)[0]
    _, bc = actor_update(s, demo, nets, bc_weight=1.0, action_l2=0.0)
    assert bc == pytest.approx(np.sum((pi_d - da) ** 2))


def test_bc_pulls_actor_toward_demo_actions():
    nets = _toy_nets(seed=2)
    nets.critic.flat[:] = 0.0  # no Q gradient, only BC
    ds = np.random.default_rng(1).normal(size=(16, 2))
    da = np.full((16, 1), 0.5)
    demo = Batch(ds, da, np.zeros(16), ds, None, None, None, None)
    first = last = None
    for _ in range(300):
        _, bc = actor_update(ds[:4], demo, nets, bc_weight=1.0)
        first = bc if first is None else first
        last = bc
    assert last < 0.1 * first


def test_q_filter_masks_worse_demos():
    nets = _toy_nets(seed=3)
    nets.critic.flat[:] = 0.0
    ds = np.zeros((2, 2))
    demo = Batch(ds, np.ones((2, 1)), np.zeros(2), ds, None, None, None, None)
    # Q constant: demo action is never strictly better, so the filter drops every term
    _, bc = actor_update(ds, demo, nets, q_filter=True)
    assert bc == 0.0


def test_explore_action_bounds_and_modes():
    rng = np.random.default_rng(0)
    policy = lambda s: np.full((len(s), 3), 0.9)  # noqa: E731
    acts = np.array([explore_action(policy, np.zeros(6), 0.3, 0.2, rng) for _ in range(4000)])
    assert np.all(np.abs(acts) <= 1.0)
    # pure noise mode stays centered on the policy
    acts = np.array([explore_action(policy, np.zeros(6), 0.0, 0.0, rng) for _ in range(10)])
    np.testing.assert_array_equal(acts, 0.9)
    acts = np.array([explore_action(policy, np.zeros(6), 1.0, 0.0, rng) for _ in range(4000)])
    assert abs(acts.mean()) < 0.05 and acts.min() < -0.9


def test_actor_output_within_bounds_without_clipping():
    nets = _toy_nets(state_dim=6, action_dim=3)
    nets.actor.flat *= 1000.0
    out = ActorPolicy(nets.actor)(np.random.default_rng(0).normal(size=(100, 6)))
    assert np.all(np.abs(out) <= 1.0)


def test_evaluate_scripted_and_random():
    cfg = EnvConfig("reach")
    assert evaluate(ScriptedPolicy(cfg), cfg, 50) >= 0.96
    assert evaluate(ScriptedPolicy(cfg), cfg, 20, max_steps=1000) == 1.0
    rng = np.random.default_rng(0)
    assert evaluate(lambda s: rng.uniform(-1, 1, (len(s), 3)), cfg, 50) <= 0.05
    with pytest.raises(ValueError):
        evaluate(ScriptedPolicy(cfg), cfg, 0)


def test_fixed_goal_environment_is_solved_in_one_epoch(tmp_path):
    # a 1 mm box: every point is within delta = 3 mm of every goal
    cfg = EnvConfig("reach", rho=0.0005)
    tc = TrainerConfig(hidden=(16,), n_epochs=1, n_cycles=2, n_batches=2, n_envs=2, n_test_episodes=5)
    result = train(cfg, tc, out_dir=tmp_path)
    assert result.metrics[0].success_rate == 1.0
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 1
    assert (tmp_path / "latest.ckpt").exists() and (tmp_path / "best.ckpt").exists()
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)


def test_small_training_run_is_reproducible(tmp_path):
    cfg = EnvConfig("pick")
    demos, _ = generate_demos(EnvConfig("pick", seed=99), 4)
    tc = TrainerConfig(hidden=(8,), n_epochs=2, n_cycles=2, n_batches=3, n_envs=2, n_test_episodes=3, demo_batch_size=16)
    a = train(cfg, tc, demos=demos, out_dir=tmp_path / "a")
    b = train(cfg, tc, demos=demos, out_dir=tmp_path / "b")
    assert a.nets.actor.flat.tobytes() == b.nets.actor.flat.tobytes()
    for ma, mb in zip(a.metrics, b.metrics):
        assert (ma.success_rate, ma.critic_loss, ma.actor_loss, ma.bc_loss) == (mb.success_rate, mb.critic_loss, mb.actor_loss, mb.bc_loss)
    assert all(m.bc_loss > 0 for m in a.metrics)


def test_resume_continues_epochs(tmp_path):
    cfg = EnvConfig("reach")
    tc = TrainerConfig(hidden=(8,), n_epochs=1, n_cycles=1, n_batches=2, n_envs=2, n_test_episodes=2)
    train(cfg, tc, out_dir=tmp_path)
    result = train(cfg, tc.replace(n_epochs=3), out_dir=tmp_path, resume=True)
    assert [m.epoch for m in result.metrics] == [0, 1, 2]
    assert len(read_metrics(tmp_path / "metrics.csv")) == 3


def test_read_metrics_reports_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(",".join(METRIC_COLUMNS) + "\n0,0.5,1,1,0,1.0\n1,oops,1,1,0,1.0\n")
    with pytest.raises(ValueError, match=":3:"):
        read_metrics(path)
    path.write_text("a,b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_metrics(path)

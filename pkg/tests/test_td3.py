import numpy as np
import pytest

from tsnsched.env import EnvConfig, TsnEnv, load_flow_mix
from tsnsched.nn import Adam, ParamSet, predict
from tsnsched.td3 import (METRICS_CSV_HEADER, ReplayBuffer, RetrainRequired, Td3Agent, Td3Config, Transition,
                          compute_target, init_actor, init_critic, metrics_csv, q_value, select_action,
                          train_loop, update_actor_and_targets, update_critics)


def linear(w, b, act="linear"):
    return ParamSet([np.array(w, dtype=float)], [np.array(b, dtype=float)], (act,))


def test_compute_target_by_hand():
    # actor: a = tanh(0.5 s); critics: Q = w . [s, a] + b
    actor = linear([[0.5]], [0.0], "tanh")
    c1 = linear([[1.0], [2.0]], [0.1])
    c2 = linear([[0.5], [-1.0]], [0.3])
    s2 = np.array([[1.0], [-2.0]])
    r = np.array([0.5, -1.0])
    d = np.array([0.0, 0.0])
    y = compute_target([c1, c2], actor, s2, r, d, 0.9, 0.0, 0.5, np.random.default_rng(0))
    want = []
    for s, rr in zip(s2[:, 0], r):
        a = np.tanh(0.5 * s)
        q1 = 1.0 * s + 2.0 * a + 0.1
        q2 = 0.5 * s - 1.0 * a + 0.3
        want.append(rr + 0.9 * min(q1, q2))
    np.testing.assert_allclose(y, want, rtol=0, atol=1e-6)


def test_terminal_and_zero_gamma():
    rng = np.random.default_rng(0)
    actor = init_actor(3, 2, (8,), rng)
    critics = [init_critic(3, 2, (8,), rng) for _ in range(2)]
    s2 = rng.normal(size=(5, 3))
    r = rng.normal(size=5)
    assert np.array_equal(compute_target(critics, actor, s2, r, np.ones(5), 0.99, 0.2, 0.5, rng), r)
    assert np.array_equal(compute_target(critics, actor, s2, r, np.zeros(5), 0.0, 0.2, 0.5, rng), r)


def test_clipped_double_q_never_exceeds_single_critic_targets():
    rng = np.random.default_rng(1)
    actor = init_actor(3, 2, (8,), rng)
    critics = [init_critic(3, 2, (8,), rng) for _ in range(2)]
    s2 = rng.normal(size=(50, 3))
    r = rng.normal(size=50)
    y = compute_target(critics, actor, s2, r, np.zeros(50), 0.99, 0.0, 0.5, rng)
    a2 = predict(actor, s2)
    singles = np.stack([r + 0.99 * q_value(c, s2, a2) for c in critics])
    assert np.all(y <= singles.max(axis=0) + 1e-12)
    np.testing.assert_allclose(y, singles.min(axis=0))


def test_select_action():
    rng = np.random.default_rng(0)
    actor = init_actor(4, 3, (8,), rng)
    s = rng.normal(size=4)
    assert np.array_equal(select_action(actor, s, 0.0, rng), predict(actor, s))
    a = select_action(actor, s, 0.1, np.random.default_rng(5))
    b = select_action(actor, s, 0.1, np.random.default_rng(5))
    assert np.array_equal(a, b)
    big = select_action(actor, np.tile(s, (10_000, 1)), 50.0, rng)
    assert big.min() >= -1 and big.max() <= 1
    with pytest.raises(ValueError):
        select_action(actor, np.zeros(5), 0.0, rng)


def test_critic_update_on_exact_targets_is_noop():
    rng = np.random.default_rng(2)
    critics = [init_critic(3, 2, (8,), rng)]
    opts = [Adam(critics[0].arrays())]
    s, a = rng.normal(size=(6, 3)), rng.uniform(-1, 1, size=(6, 2))
    before = [x.copy() for x in critics[0].arrays()]
    update_critics(critics, opts, s, a, q_value(critics[0], s, a))
    assert all(np.array_equal(x, y) for x, y in zip(before, critics[0].arrays()))


def test_critic_loss_decreases_and_twins_differ():
    rng = np.random.default_rng(3)
    critics = [init_critic(3, 2, (16,), rng) for _ in range(2)]
    opts = [Adam(c.arrays(), 1e-2) for c in critics]
    s, a, y = rng.normal(size=(20, 3)), rng.uniform(-1, 1, size=(20, 2)), rng.normal(size=20)
    first, _ = update_critics(critics, opts, s, a, y)
    for _ in range(100):
        last, _ = update_critics(critics, opts, s, a, y)
    assert all(l < f for l, f in zip(last, first))
    assert not np.array_equal(critics[0].weights[0], critics[1].weights[0])


def test_policy_delay_gate_is_bitwise():
    rng = np.random.default_rng(4)
    actor = init_actor(3, 2, (8,), rng)
    critics = [init_critic(3, 2, (8,), rng) for _ in range(2)]
    targets = [c.copy() for c in critics]
    actor_t = actor.copy()
    for c in critics:
        c.weights[0] += 0.1
    snap = [x.copy() for p in [actor, actor_t, *targets] for x in p.arrays()]
    s = rng.normal(size=(5, 3))
    opt = Adam(actor.arrays())
    for t in (1, 3, 5):
        assert update_actor_and_targets(actor, critics, actor_t, targets, opt, s, t, 2, 0.005) is False
    after = [x for p in [actor, actor_t, *targets] for x in p.arrays()]
    assert all(np.array_equal(a, b) for a, b in zip(snap, after))
    assert update_actor_and_targets(actor, critics, actor_t, targets, opt, s, 2, 2, 1.0) is True
    assert all(np.array_equal(a, b) for a, b in zip(actor.arrays(), actor_t.arrays()))
    assert all(np.array_equal(a, b) for a, b in zip(critics[0].arrays(), targets[0].arrays()))
    with pytest.raises(ValueError):
        update_actor_and_targets(actor, critics, actor_t, targets, opt, s, 0, 2, 0.005)


def test_replay_uniform_and_fifo():
    buf = ReplayBuffer(10)
    for i in range(13):
        buf.add(Transition(np.array([i]), np.zeros(1), float(i), np.array([i]), False))
    assert len(buf) == 10
    assert sorted(t.r for t in buf.items) == list(range(3, 13))
    counts = np.bincount(buf.sample_indices(100_000, np.random.default_rng(0)), minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) <= 3 * sigma)


def test_transition_validation():
    with pytest.raises(ValueError):
        Transition(0, np.array([1.5]), 0.0, 0, False)
    with pytest.raises(ValueError):
        Transition(0, np.array([0.5]), float("nan"), 0, False)


def test_config_validation_and_presets():
    with pytest.raises(ValueError):
        Td3Config(gamma=1.5)
    with pytest.raises(ValueError):
        Td3Config(noise_clip=0)
    with pytest.raises(ValueError):
        Td3Config(batch_size=0)
    d = Td3Config.ddpg()
    assert (d.twin, d.target_noise, d.policy_delay) == (False, 0.0, 1)
    assert Td3Config.from_dict(Td3Config().to_dict()) == Td3Config()


def test_actor_converges_to_analytic_maximizer():
    """Bandit with r = -(a - 0.3)^2: the greedy action approaches 0.3."""
    cfg = Td3Config(hidden=(32, 32), warmup=200, batch_size=32, actor_lr=3e-3, critic_lr=3e-3, gamma=0.0)
    agent = Td3Agent(1, cfg, seed=0, state_dim=1, use_encoder=False)
    rng = np.random.default_rng(0)
    for _ in range(3000):
        s = rng.normal(size=1)
        a = agent.act(s)
        agent.observe(Transition(s, a, -float((a[0] - 0.3) ** 2), s, True))
    probe = rng.normal(size=(50, 1))
    assert abs(float(predict(agent.actor, probe).mean()) - 0.3) < 0.05


def small_env(omega=128, seed=0, static=None, **kw):
    from tsnsched.env import DATA_DIR
    from tsnsched.model import load_flows, load_topology
    topo = load_topology(DATA_DIR / "two_bridge_topology.json")
    flows = load_flows(DATA_DIR / "static_flows.csv", topo) if static is None else static
    cfg = EnvConfig(omega=omega, eval_hyperperiods=1, **{"max_requests": 15, **kw})
    return TsnEnv(topo, flows, load_flow_mix(), cfg, seed=seed), topo


def test_train_loop_is_deterministic():
    logs = []
    for _ in range(2):
        env, _ = small_env()
        agent = Td3Agent(env.action_dim, Td3Config(hidden=(16,), warmup=10, batch_size=8), seed=3)
        logs.append(metrics_csv(train_loop(env, agent, 2)))
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == ",".join(METRICS_CSV_HEADER)


def test_omega_one_ends_at_first_gate_entry():
    env, _ = small_env(omega=1, static=[], max_requests=200)
    infos = []
    log = train_loop(env, None, 1, mode="random", seed=0, step_hook=infos.append)
    assert infos[-1]["decoded"].accept and infos[-1]["decoded"].valid
    assert all(not (i["decoded"].accept and i["decoded"].valid) for i in infos[:-1])
    assert infos[-1]["beta"] == 1
    assert log[0].total_flows == 0


def test_checkpoint_round_trip(tmp_path):
    env, topo = small_env()
    agent = Td3Agent(env.action_dim, Td3Config(hidden=(16,)), seed=1)
    agent.save(tmp_path / "c.json", topo.signature())
    back = Td3Agent.load(tmp_path / "c.json", topo.signature(), env.action_dim)
    s = np.random.default_rng(0).normal(size=22)
    assert np.array_equal(predict(back.actor, s), predict(agent.actor, s))
    assert np.array_equal(back.encode(env.graph), agent.encode(env.graph))
    with pytest.raises(RetrainRequired, match="retrain required"):
        Td3Agent.load(tmp_path / "c.json", {"bridges": 3}, env.action_dim)
    with pytest.raises(RetrainRequired):
        Td3Agent.load(tmp_path / "c.json", topo.signature(), env.action_dim + 2)


def test_encoder_is_trained_through_critic():
    env, _ = small_env()
    agent = Td3Agent(env.action_dim, Td3Config(hidden=(16,), warmup=5, batch_size=4), seed=2)
    before = agent.encoder.copy()
    train_loop(env, agent, 1)
    assert any(not np.array_equal(a, b) for a, b in zip(before.arrays(), agent.encoder.arrays()))
    assert agent.updates > 0

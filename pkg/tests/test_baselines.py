import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowarm import baselines as bl
from flowarm import env as reacher
from flowarm.buffer import ReplayBuffer
from flowarm.nn import init_mlp, mlp_backward, mlp_forward
from oracles import central_difference, max_relative_error

TINY = bl.BaselineConfig(hidden=(8, 8), batch_size=16, start_steps=20, eval_freq=25)


def model(algo="TD3", seed=0, cfg=TINY):
    return bl.ActorCriticModel.create(algo, cfg, np.random.default_rng(seed))


def filled_buffer(n=64, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(n, reacher.OBS_DIM, 2)
    for _ in range(n):
        buf.add(rng.normal(size=reacher.OBS_DIM), rng.uniform(-1, 1, 2), -rng.uniform(), rng.normal(size=10), 0)
    return buf


def test_targets_arithmetic():
    assert bl.td3_target(1.0, 0.99, 2.0, 3.0, 0.0) == pytest.approx(2.98)
    assert bl.td3_target(1.0, 0.0, 2.0, 3.0, 0.0) == 1.0
    assert bl.td3_target(1.0, 0.99, 2.0, 3.0, 1.0) == 1.0
    assert bl.ddpg_target(-0.1, 0.99, -5.0, 0.0) == pytest.approx(-5.05)
    assert bl.ddpg_target(-0.1, 0.99, -5.0, 1.0) == -0.1


def test_soft_update():
    rng = np.random.default_rng(0)
    a, b = init_mlp([2, 3, 1], rng), init_mlp([2, 3, 1], rng)
    assert bl.soft_update(a, b, 1.0) == b
    assert np.allclose(bl.soft_update(a, b, 1e-12).weights[0], a.weights[0], atol=1e-11)
    zero = init_mlp([1, 1], rng)
    zero.weights[0][:] = 0.0
    one = zero.copy()
    one.weights[0][:] = 1.0
    assert bl.soft_update(zero, one, 0.005).weights[0][0, 0] == pytest.approx(0.005)
    with pytest.raises(ValueError):
        bl.soft_update(a, init_mlp([2, 4, 1], rng), 0.5)


def test_soft_update_contracts():
    rng = np.random.default_rng(1)
    target, source = init_mlp([3, 4, 1], rng), init_mlp([3, 4, 1], rng)

    def gap(t):
        return np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(t.arrays(), source.arrays())))

    prev = gap(target)
    for _ in range(50):
        target = bl.soft_update(target, source, 0.1)
        assert gap(target) <= prev
        prev = gap(target)


def test_select_action():
    m = model()
    obs = np.ones(reacher.OBS_DIM)
    assert np.array_equal(bl.select_action(m, obs, 0.0, np.random.default_rng(0)), m.act(obs))
    noisy = bl.select_action(m, obs, 100.0, np.random.default_rng(0))
    assert np.all(np.abs(noisy) == 1.0)
    assert np.array_equal(bl.select_action(m, obs, 0.3, np.random.default_rng(2)),
                          bl.select_action(m, obs, 0.3, np.random.default_rng(2)))


def test_model_shapes():
    td3, ddpg = model("TD3"), model("DDPG")
    assert td3.twin and len(td3.critics) == 2
    assert not ddpg.twin and len(ddpg.critics) == 1
    for src, tgt in zip(td3.critics + [td3.actor], td3.critic_targets + [td3.actor_target]):
        assert src.sizes == tgt.sizes and src == tgt
    with pytest.raises(ValueError):
        model("SAC")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_twin_min_never_exceeds_single_critic_target(seed):
    m = model(seed=seed % 1000)
    batch = filled_buffer(32, seed % 997).sample(32, np.random.default_rng(seed))
    cfg = bl.BaselineConfig(policy_noise=0.0, hidden=TINY.hidden)
    twin = bl.critic_targets(m, batch, cfg, np.random.default_rng(0))
    next_action = np.tanh(mlp_forward(m.actor_target, batch.next_obs)[0])
    q1 = bl._q(m.critic_targets[0], batch.next_obs, next_action)[0]
    single = bl.ddpg_target(batch.reward, cfg.gamma, q1, batch.done)
    assert np.all(twin <= single + 1e-12)


def test_critic_regression_monotone():
    m = model("TD3", cfg=bl.BaselineConfig(hidden=(16, 16), lr_critic=1e-3))
    batch = filled_buffer(64).sample(64, np.random.default_rng(0))
    y = bl.critic_targets(m, batch, TINY, np.random.default_rng(1))
    losses = [bl.critic_update(m, batch, y) for _ in range(60)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_actor_gradient_matches_finite_differences():
    m = model("TD3", seed=3)
    batch = filled_buffer(8).sample(8, np.random.default_rng(0))

    def objective():
        a = np.tanh(mlp_forward(m.actor, batch.obs)[0])
        return -float(np.mean(bl._q(m.critics[0], batch.obs, a)[0]))

    pre, actor_cache = mlp_forward(m.actor, batch.obs)
    action = np.tanh(pre)
    _, cache = bl._q(m.critics[0], batch.obs, action)
    gq = mlp_backward(m.critics[0], cache, np.full((8, 1), -1.0 / 8), need_input_grad=True)
    grads = mlp_backward(m.actor, actor_cache, gq.input_grad[:, -2:] * (1 - action ** 2))
    numeric = central_difference(objective, m.actor.weights + m.actor.biases)
    assert max_relative_error(grads.weights + grads.biases, numeric) < 1e-4


def test_training_reads_only_stored_rows():
    m = model()
    _, _, buf = bl.baseline_train(reacher.ArmConfig(), TINY, m, 60, np.random.default_rng(0))
    assert len(buf) == 60
    # one minibatch per step after the warm-up
    assert buf.rows_read == (60 - TINY.start_steps) * TINY.batch_size
    assert m.updates == 40


def test_budget_zero_and_determinism():
    m = model()
    before = m.actor.copy()
    _, evals, buf = bl.baseline_train(reacher.ArmConfig(), TINY, m, 0, np.random.default_rng(0), lambda t, _: t)
    assert evals == [] and len(buf) == 0 and m.actor == before

    def run():
        mm = model("DDPG", seed=5)
        return bl.baseline_train(reacher.ArmConfig(), TINY, mm, 80, np.random.default_rng(0),
                                 lambda t, x: x.act(np.ones(reacher.OBS_DIM)).tolist())[1]

    a, b = run(), run()
    assert a == b and len(a) == 4


def test_config_validation():
    with pytest.raises(ValueError):
        bl.BaselineConfig(gamma=1.5)
    with pytest.raises(ValueError):
        bl.BaselineConfig(tau=0.0)
    with pytest.raises(ValueError):
        bl.BaselineConfig(policy_delay=0)

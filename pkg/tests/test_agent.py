from __future__ import annotations

import numpy as np
import pytest

from helpers import worst_gradient_error
from rlcompress.agent.ddpg import (
    AgentConfig,
    AgentError,
    DDPGAgent,
    ReplayBuffer,
    RewardNormalizer,
    RunningNorm,
    Transition,
    actor_objective_grads,
    sigma_at,
)
from rlcompress.numerics import make_rng, mlp_forward


def small_agent(kind="joint", state_dim=5, **kw) -> DDPGAgent:
    kw = {"hidden": (16, 12), "batch_size": 8, **kw}
    return DDPGAgent(AgentConfig(kind, state_dim, **kw))


def transition(agent, rng, reward=0.0, terminal=False) -> Transition:
    c = agent.config
    return Transition(rng.standard_normal(c.state_dim), rng.uniform(size=c.action_dim), reward,
                      rng.standard_normal(c.state_dim), terminal)


# -- acting ---------------------------------------------------------------------


def test_fresh_actor_predicts_near_the_middle():
    agent = DDPGAgent(AgentConfig("joint", 26))
    a = agent.predict(np.zeros(26))
    assert a.shape == (3,)
    assert np.all((a > 0) & (a < 1)) and np.allclose(a, 0.5, atol=1e-2)
    np.testing.assert_array_equal(a, agent.predict(np.zeros(26)))


def test_predict_checks_the_state_shape():
    with pytest.raises(AgentError):
        small_agent().predict(np.zeros(4))


@pytest.mark.parametrize("episode,sigma", [(0, 0.5), (10, 0.29937)])
def test_noise_schedule(episode, sigma):
    assert sigma_at(AgentConfig("prune", 3), episode) == pytest.approx(sigma, abs=1e-5)


def test_warmup_actions_are_uniform_and_ignore_the_actor():
    agent = small_agent(kind="prune")
    draws = np.array([agent.explore(np.array([0.99]), episode=3)[0] for _ in range(4000)])
    assert draws.min() >= 0 and draws.max() <= 1
    assert abs(draws.mean() - 0.5) < 0.03
    assert abs(np.mean(draws < 0.25) - 0.25) < 0.03


def test_exploration_stays_in_range_and_narrows():
    agent = small_agent(kind="quant")
    early = np.array([agent.explore(np.array([0.5, 0.5]), episode=10) for _ in range(2000)])
    late = np.array([agent.explore(np.array([0.5, 0.5]), episode=80) for _ in range(2000)])
    assert early.min() >= 0 and early.max() <= 1
    assert late.std() < early.std()
    assert abs(late.mean() - 0.5) < 0.01


def test_negative_episode_is_an_error():
    with pytest.raises(AgentError):
        small_agent().explore(np.array([0.5, 0.5, 0.5]), episode=-1)


def test_same_seed_same_actions():
    a, b = small_agent(seed=4), small_agent(seed=4)
    for ep in (0, 12, 30):
        np.testing.assert_array_equal(a.explore(np.full(3, 0.3), ep), b.explore(np.full(3, 0.3), ep))


@pytest.mark.parametrize("kw", [{"kind": "both"}, {"state_dim": 0}, {"gamma": 1.0}, {"sigma0": 0.0},
                                {"sigma_decay": 1.0}, {"tau": 0.0}])
def test_config_validation(kw):
    args = {"kind": "joint", "state_dim": 4, **kw}
    with pytest.raises(AgentError):
        AgentConfig(**args)


# -- replay buffer ----------------------------------------------------------------


def test_buffer_keeps_the_newest_transitions():
    buf = ReplayBuffer(2000)
    for i in range(2001):
        buf.append(Transition(np.zeros(1), np.zeros(1), float(i), np.zeros(1), False))
    assert len(buf) == 2000
    assert buf[0].reward == 1.0 and buf[len(buf) - 1].reward == 2000.0


def test_buffer_sampling():
    buf = ReplayBuffer(10)
    rng = make_rng(0)
    with pytest.raises(AgentError):
        buf.sample(1, rng)
    buf.append(Transition(np.zeros(1), np.zeros(1), 7.0, np.zeros(1), True))
    assert buf.sample(1, rng)[0].reward == 7.0
    with pytest.raises(AgentError):
        buf.sample(2, rng)


def test_record_checks_dimensions():
    agent = small_agent()
    with pytest.raises(AgentError):
        agent.record(Transition(np.zeros(4), np.zeros(3), 0.0, np.zeros(4), False))


# -- normalizers ------------------------------------------------------------------


def test_running_norm_statistics():
    norm = RunningNorm(2)
    for x in ([1.0, 10.0], [2.0, 10.0], [3.0, 10.0]):
        norm.update(np.array(x))
    np.testing.assert_allclose(norm.mean, [2.0, 10.0])
    np.testing.assert_allclose(norm.var, [2 / 3, 0.0])
    out = norm.normalize(np.array([2.0, 10.0]), update=False)
    np.testing.assert_allclose(out, [0.0, 0.0])


def test_first_state_normalizes_to_zero():
    assert np.all(RunningNorm(3).normalize(np.array([5.0, -1.0, 2.0])) == 0)


def test_reward_normalizer_is_bias_corrected():
    norm = RewardNormalizer()
    norm.update(-2.0)
    assert norm.mean == pytest.approx(-2.0) and norm.scale == 1e-3
    for r in (0.0, -4.0):
        norm.update(r)
    assert -4.0 < norm.mean < 0.0 and norm.scale > 1.0
    np.testing.assert_allclose(norm.normalize([norm.mean]), [0.0])


# -- optimization -----------------------------------------------------------------


def test_optimize_needs_a_full_batch():
    agent = small_agent()
    rng = make_rng(0)
    for _ in range(7):
        agent.record(transition(agent, rng))
    with pytest.raises(AgentError):
        agent.optimize()


def test_critic_fits_a_constant_terminal_transition():
    agent = small_agent(kind="prune", state_dim=2, critic_lr=1e-2)
    t = Transition(np.array([0.3, -0.2]), np.array([0.7]), 1.0, np.zeros(2), True)
    for r in (1.0, 3.0):
        agent.observe_reward(r)
    for _ in range(8):
        agent.record(t)
    losses = [agent.optimize()[0] for _ in range(300)]
    assert losses[-1] < 1e-3 * losses[0]
    assert agent.updates == 300


def test_terminal_targets_ignore_the_target_networks():
    rng = make_rng(3)
    a, b = small_agent(seed=1), small_agent(seed=1)
    for _ in range(8):
        t = transition(a, rng, reward=float(rng.standard_normal()), terminal=True)
        a.record(t)
        b.record(t)
        a.observe_reward(t.reward)
        b.observe_reward(t.reward)
    for net in (b.actor_target, b.critic_target):
        net.set_params([p * 50 + 3 for p in net.params()])
    a.optimize()
    b.optimize()
    for pa, pb in zip(a.critic.params(), b.critic.params()):
        np.testing.assert_array_equal(pa, pb)


def test_soft_update_moves_targets_by_tau():
    agent = small_agent(tau=0.01)
    rng = make_rng(2)
    for _ in range(8):
        agent.record(transition(agent, rng, reward=1.0))
    before = [p.copy() for p in agent.critic_target.params()]
    agent.optimize()
    for old, new, src in zip(before, agent.critic_target.params(), agent.critic.params()):
        np.testing.assert_allclose(new, 0.99 * old + 0.01 * src, rtol=1e-5, atol=1e-7)


def test_critic_gradients_match_finite_differences():
    assert worst_gradient_error("critic", 100) <= 1e-4


def test_actor_gradients_match_finite_differences():
    assert worst_gradient_error("actor", 100) <= 1e-4


def test_actor_step_increases_q():
    agent = small_agent(kind="prune", state_dim=3, actor_lr=1e-2)
    rng = make_rng(5)
    for _ in range(8):
        agent.record(transition(agent, rng, reward=float(rng.standard_normal())))
    s = np.stack([agent.buffer[i].state for i in range(8)]).astype(np.float32)
    q0, _ = actor_objective_grads(agent.actor, agent.critic, s)
    critic = agent.critic.copy()
    for _ in range(20):
        agent.optimize()
        agent.critic = critic.copy()  # hold the critic fixed to isolate the actor update
    q1, _ = actor_objective_grads(agent.actor, critic, s)
    assert q1 > q0


# -- persistence ------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    agent = small_agent(seed=9)
    rng = make_rng(1)
    for _ in range(10):
        t = transition(agent, rng, reward=float(rng.standard_normal()))
        agent.record(t)
        agent.observe_reward(t.reward)
        agent.observe(t.state)
    agent.optimize()
    agent.episode = 12
    agent.save(tmp_path / "agent.npz")
    again = DDPGAgent.load(tmp_path / "agent.npz")
    state = np.linspace(-1, 1, 5)
    np.testing.assert_array_equal(agent.predict(state), again.predict(state))
    np.testing.assert_array_equal(agent.explore(np.full(3, 0.5), 20), again.explore(np.full(3, 0.5), 20))
    assert (again.episode, again.updates, again.state_norm.count) == (12, 1, 10)
    assert again.reward_norm == agent.reward_norm


def test_foreign_checkpoint_is_rejected(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(AgentError):
        DDPGAgent.load(tmp_path / "x.npz")


def test_actor_outputs_are_probabilities():
    agent = small_agent()
    out = mlp_forward(agent.actor, make_rng(0).standard_normal((50, 5)) * 100)
    assert np.all((out >= 0) & (out <= 1))

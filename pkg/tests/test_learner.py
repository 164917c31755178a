import collections

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import TINY, random_obs
from segrl.errors import ContractViolation, TrainingFault
from segrl.learner import (
    Learner,
    ReplayBuffer,
    SacConfig,
    Transition,
    TransitionBatch,
    actor_update,
    bellman_target,
    critic_update,
    soft_update,
    temperature_update,
    train_step,
    update,
)
from segrl.policy import init_params, pack


def _transition(rng, n=3, m=None, s=4, reward=0.5, done=False):
    return Transition(
        random_obs(rng, n, s),
        rng.uniform(-1, 1, 2).astype(np.float32),
        reward,
        done,
        random_obs(rng, n if m is None else m, s),
    )


def _same_obs(a, b):
    return (
        np.array_equal(a.embeddings, b.embeddings)
        and np.array_equal(a.bboxes, b.bboxes)
        and np.array_equal(a.proprio, b.proprio)
    )


def _batch(rng, b=8, s=4, rewards=None, dones=None):
    obs = [random_obs(rng, int(rng.integers(1, 5)), s) for _ in range(b)]
    nxt = [random_obs(rng, int(rng.integers(1, 5)), s) for _ in range(b)]
    return TransitionBatch(
        pack(obs),
        torch.from_numpy(rng.uniform(-1, 1, (b, 2)).astype(np.float32)),
        torch.from_numpy(rng.uniform(0, 1, b).astype(np.float32) if rewards is None else np.asarray(rewards, np.float32)),
        torch.from_numpy(np.zeros(b, np.float32) if dones is None else np.asarray(dones, np.float32)),
        pack(nxt),
        np.arange(b),
    )


# -- replay buffer ----------------------------------------------------------------------


def test_single_transition_round_trip(rng):
    buf = ReplayBuffer(10, 4, 2, 2)
    t = _transition(rng, 3, 5)
    buf.add(t)
    got = buf.get(0)
    assert _same_obs(got.obs, t.obs) and _same_obs(got.next_obs, t.next_obs)
    assert np.array_equal(got.action, t.action) and got.reward == np.float32(t.reward)
    batch = buf.sample(1, rng)
    np.testing.assert_array_equal(batch.obs.segments.numpy(), t.obs.embeddings)
    np.testing.assert_array_equal(batch.next_obs.bboxes.numpy(), t.next_obs.bboxes)
    np.testing.assert_array_equal(batch.actions.numpy()[0], t.action)


def test_fifo_eviction(rng):
    buf = ReplayBuffer(2, 4, 2, 2)
    ts = [_transition(rng) for _ in range(3)]
    for t in ts:
        buf.add(t)
    assert len(buf) == 2 and buf.total_added == 3
    assert _same_obs(buf.get(0).obs, ts[1].obs) and _same_obs(buf.get(1).obs, ts[2].obs)


def test_ragged_counts_reconstruct(rng):
    buf = ReplayBuffer(4, 4, 2, 2)
    a, b = _transition(rng, 3, 3), _transition(rng, 7, 7)
    buf.add(a)
    buf.add(b)
    assert buf.get(0).obs.num_segments == 3 and buf.get(1).obs.num_segments == 7
    assert _same_obs(buf.get(1).next_obs, b.next_obs)
    sample_rng = np.random.default_rng(0)
    seen = set()
    for _ in range(20):
        batch = buf.sample(2, sample_rng)
        for i, k in enumerate(batch.indices):
            src = [a, b][k]
            lo, hi = batch.obs.offsets[i].item(), batch.obs.offsets[i + 1].item()
            np.testing.assert_array_equal(batch.obs.segments[lo:hi].numpy(), src.obs.embeddings)
            seen.add(hi - lo)
    assert seen == {3, 7}


def test_undersized_sample_is_contract_violation(rng):
    buf = ReplayBuffer(4, 4, 2, 2)
    buf.add(_transition(rng))
    with pytest.raises(ContractViolation):
        buf.sample(2, rng)


@given(st.lists(st.tuples(st.integers(1, 9), st.integers(1, 9)), min_size=1, max_size=40), st.integers(1, 6))
def test_buffer_matches_fifo_oracle(sizes, capacity):
    rng = np.random.default_rng(len(sizes))
    buf = ReplayBuffer(capacity, 3, 2, 2, segments_per_transition=6)
    added = []
    for n, m in sizes:
        t = _transition(rng, n, m, s=3)
        buf.add(t)
        added.append(t)
        assert 1 <= len(buf) <= capacity
        kept = added[len(added) - len(buf) :]
        for k, t_ref in enumerate(kept):
            got = buf.get(k)
            assert _same_obs(got.obs, t_ref.obs) and _same_obs(got.next_obs, t_ref.next_obs)
    # the newest transition always survives
    assert _same_obs(buf.get(len(buf) - 1).obs, added[-1].obs)


def test_sampling_is_uniform_with_replacement():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(4, 2, 2, 2)
    for _ in range(4):
        buf.add(_transition(rng, 1, 1, s=2))
    ks = np.concatenate([buf.sample(4, rng).indices for _ in range(2000)])
    freq = np.bincount(ks, minlength=4) / ks.size
    np.testing.assert_allclose(freq, 0.25, atol=0.02)


# -- Bellman target and critic ------------------------------------------------------------


def _constant_target_agent(value):
    agent = init_params(TINY, 0)
    with torch.no_grad():
        for q in (agent.critic_target.q1, agent.critic_target.q2):
            q.head.out.weight.zero_()
            q.head.out.bias.fill_(value)
        agent.log_alpha.fill_(float("-inf"))  # alpha = 0
    return agent


def test_bellman_target_identities(rng):
    agent = init_params(TINY, 0)
    batch = _batch(rng, rewards=np.linspace(0, 1, 8))
    assert torch.equal(bellman_target(agent, batch, 0.0), batch.rewards)
    done = _batch(rng, dones=np.ones(8))
    assert torch.equal(bellman_target(agent, done, 0.8), done.rewards)


def test_bellman_target_substitution(rng):
    agent = _constant_target_agent(2.0)
    batch = _batch(rng, rewards=np.ones(8))
    y = bellman_target(agent, batch, 0.80)
    np.testing.assert_allclose(y.numpy(), 2.6, rtol=1e-6)


def test_bellman_target_uses_min_of_twins(rng):
    agent = _constant_target_agent(2.0)
    with torch.no_grad():
        agent.critic_target.q2.head.out.bias.fill_(-1.0)
    y = bellman_target(agent, _batch(rng, rewards=np.zeros(8)), 0.5)
    np.testing.assert_allclose(y.numpy(), -0.5)


def test_critic_update_leaves_targets_and_actor(rng):
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig(batch_size=8))
    before_t = {k: v.clone() for k, v in agent.critic_target.state_dict().items()}
    before_a = {k: v.clone() for k, v in agent.actor.state_dict().items()}
    before_c = {k: v.clone() for k, v in agent.critic.state_dict().items()}
    m = critic_update(learner, _batch(rng))
    assert np.isfinite(m["critic_loss"])
    assert all(torch.equal(before_t[k], v) for k, v in agent.critic_target.state_dict().items())
    assert all(torch.equal(before_a[k], v) for k, v in agent.actor.state_dict().items())
    assert any(not torch.equal(before_c[k], v) for k, v in agent.critic.state_dict().items())
    assert all(p.grad is None for p in agent.critic_target.parameters())


def test_critic_loss_formula(rng):
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig(gamma=0.0))
    batch = _batch(rng)
    with torch.no_grad():
        q1, q2 = agent.critic(batch.obs, batch.actions)
        expected = ((q1 - batch.rewards) ** 2 + (q2 - batch.rewards) ** 2).mean()
    got = critic_update(learner, batch)["critic_loss"]
    np.testing.assert_allclose(got, float(expected), rtol=1e-6)


def test_perturbing_targets_changes_loss_only(rng):
    batch = _batch(rng)
    a, b = init_params(TINY, 0), init_params(TINY, 0)
    with torch.no_grad():
        for p in b.critic_target.parameters():
            p.add_(0.1)
    target_b = {k: v.clone() for k, v in b.critic_target.state_dict().items()}
    la = critic_update(Learner(a, SacConfig()), batch)["critic_loss"]
    lb = critic_update(Learner(b, SacConfig()), batch)["critic_loss"]
    assert la != lb
    assert all(torch.equal(target_b[k], v) for k, v in b.critic_target.state_dict().items())


def test_non_finite_loss_is_training_fault(rng):
    learner = Learner(init_params(TINY, 0), SacConfig())
    with pytest.raises(TrainingFault):
        critic_update(learner, _batch(rng, rewards=[np.nan] + [0.0] * 7))


# -- actor -----------------------------------------------------------------------------------


def test_actor_update_touches_only_actor(rng):
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig())
    critic_before = {k: v.clone() for k, v in agent.critic.state_dict().items()}
    actor_before = {k: v.clone() for k, v in agent.actor.state_dict().items()}
    actor_update(learner, _batch(rng))
    assert all(torch.equal(critic_before[k], v) for k, v in agent.critic.state_dict().items())
    assert any(not torch.equal(actor_before[k], v) for k, v in agent.actor.state_dict().items())
    assert all(p.requires_grad for p in agent.critic.parameters())
    assert all(p.grad is None for p in agent.critic.parameters())


def test_actor_loss_with_zero_alpha_and_constant_critic(rng):
    agent = init_params(TINY, 0)
    with torch.no_grad():
        for q in (agent.critic.q1, agent.critic.q2):
            q.head.out.weight.zero_()
            q.head.out.bias.fill_(3.0)
        agent.log_alpha.fill_(float("-inf"))
    metrics, _ = actor_update(Learner(agent, SacConfig()), _batch(rng))
    assert metrics["actor_loss"] == -3.0


def test_actor_loss_decreases_on_fixed_batch(rng):
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig(actor_lr=1e-3), seed=0)
    batch = _batch(rng, b=32)
    losses = []
    for _ in range(50):
        learner.generator.manual_seed(0)  # same noise each step isolates the optimisation
        losses.append(actor_update(learner, batch)[0]["actor_loss"])
    assert losses[-1] < losses[0]


# -- temperature -------------------------------------------------------------------------------


def test_temperature_fixed_point():
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig())
    log_pi = torch.full((16,), -learner.target_entropy)
    temperature_update(learner, log_pi)
    assert float(agent.log_alpha.detach()) == 0.0


def test_temperature_decreases_when_entropy_is_high():
    agent = init_params(TINY, 0)
    learner = Learner(agent, SacConfig())
    assert learner.target_entropy == -2.0
    alphas = [temperature_update(learner, torch.full((16,), 1.0))["alpha"] for _ in range(20)]
    assert alphas[-1] < alphas[0] < 1.0
    alphas = [temperature_update(learner, torch.full((16,), 5.0))["alpha"] for _ in range(40)]
    assert alphas[-1] > alphas[0]


def test_alpha_stays_positive():
    gen = torch.Generator().manual_seed(0)
    learner = Learner(init_params(TINY, 0), SacConfig(alpha_lr=0.1))
    for _ in range(2000):
        temperature_update(learner, torch.randn(8, generator=gen) * 50 + 20)
        assert float(learner.agent.alpha.detach()) > 0


# -- soft update -------------------------------------------------------------------------------


def test_soft_update_identities():
    a, b = init_params(TINY, 0), init_params(TINY, 1)
    with pytest.raises(ContractViolation):
        soft_update(a.actor, b.critic, 0.5)
    soft_update(a.critic, b.critic, 1.0)
    assert all(torch.equal(v, a.critic.state_dict()[k]) for k, v in b.critic.state_dict().items())
    ones, zeros = torch.nn.Linear(3, 3), torch.nn.Linear(3, 3)
    with torch.no_grad():
        for p in ones.parameters():
            p.fill_(1.0)
        for p in zeros.parameters():
            p.fill_(0.0)
    soft_update(ones, zeros, 0.01)
    assert all(torch.all(p == torch.tensor(0.01, dtype=torch.float32)) for p in zeros.parameters())


def test_soft_update_tau_zero_keeps_target():
    online, target = torch.nn.Linear(3, 3), torch.nn.Linear(3, 3)
    before = {k: v.clone() for k, v in target.state_dict().items()}
    soft_update(online, target, 0.0)
    assert all(torch.equal(before[k], v) for k, v in target.state_dict().items())


# -- cadence ---------------------------------------------------------------------------------------


def _filled_buffer(n=16, s=4):
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(64, s, 2, 2)
    for _ in range(n):
        buf.add(_transition(rng, int(rng.integers(1, 4)), int(rng.integers(1, 4)), s=s))
    return buf


def test_target_cadence_and_metrics():
    cfg = SacConfig(batch_size=8, target_update_freq=2)
    learner = Learner(init_params(TINY, 0), cfg)
    buf = _filled_buffer()
    rng = np.random.default_rng(1)
    records = [train_step(learner, buf, rng) for _ in range(2)]
    assert learner.num_updates == 2 and learner.num_soft_updates == 1
    for rec in records:
        for key in ("critic_loss", "actor_loss", "alpha_loss", "q_mean", "q_std", "alpha", "buffer_size"):
            assert np.isfinite(rec[key])


def test_update_frequencies():
    cfg = SacConfig(batch_size=8, actor_update_freq=2, critic_update_freq=1, target_update_freq=3)
    learner = Learner(init_params(TINY, 0), cfg)
    buf = _filled_buffer()
    seen = [update(learner, buf.sample(8, np.random.default_rng(i))) for i in range(6)]
    assert ["actor_loss" in m for m in seen] == [False, True, False, True, False, True]
    assert all("critic_loss" in m for m in seen)
    assert learner.num_soft_updates == 2


def test_desk_utd():
    cfg = SacConfig()
    steps = 10
    assert cfg.updates_per_step * steps / (cfg.num_envs * steps) == 0.25 == cfg.utd


def test_train_step_needs_a_full_batch():
    learner = Learner(init_params(TINY, 0), SacConfig(batch_size=32))
    with pytest.raises(ContractViolation):
        train_step(learner, _filled_buffer(8), np.random.default_rng(0))

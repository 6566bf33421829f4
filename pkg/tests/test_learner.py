import copy
import re
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

import helpers
from tsac.analysis.oracles import mc_averaged_grad_variance
from tsac.config import RunConfig
from tsac.learner import (DivergenceError, FreezeSchedule, Learner, WindowTensors, averaged_target,
                          bootstrap_value, critic_loss, critic_update, nstep_targets, policy_loss,
                          soft_update, temperature_loss, train)
from tsac.nets import DensityEvaluationError, GaussianPolicyHead, SquashedGaussianPolicy, build_critic
from tsac.replay import ReplayBuffer


def t(x, dtype=torch.float64):
    return torch.tensor(np.asarray(x), dtype=dtype)


# targets -----------------------------------------------------------------------

def test_nstep_example_by_hand():
    g = nstep_targets(t([[1.0, 0.0]]), t([[2.0, 4.0]]), t([[False, False]], torch.bool),
                      t([[True, True]], torch.bool), 0.5)
    assert g.tolist() == [[2.0, 2.0]]


def test_zero_discount_collapses_to_first_reward():
    g = nstep_targets(t([[3.0, 5.0, 7.0]]), t([[1.0, 1.0, 1.0]]), torch.zeros(1, 3, dtype=torch.bool),
                      torch.ones(1, 3, dtype=torch.bool), 0.0)
    assert g.tolist() == [[3.0, 3.0, 3.0]]


def test_terminal_first_step_truncates():
    # done after r_t; the rest of the window belongs to the next episode
    g = nstep_targets(t([[2.0, 9.0, 9.0]]), t([[1e30, 1e30, 1e30]]), t([[True, False, True]], torch.bool),
                      t([[True, False, False]], torch.bool), 0.9)
    assert g.tolist() == [[2.0, 2.0, 2.0]]


def test_matches_scalar_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        r, v = rng.normal(size=n), rng.normal(size=n)
        gamma = float(rng.uniform(0.1, 1.0))
        term = int(rng.integers(0, n + 3))  # index of the terminal, possibly none
        dones = np.arange(n) == term
        mask = np.arange(n) <= term
        g = nstep_targets(t([r]), t([v]), t([dones], torch.bool), t([mask], torch.bool), gamma)[0]
        for i in range(1, n + 1):
            expect = sum(gamma ** j * r[j] for j in range(min(i, term + 1)))
            if term >= i:
                expect += gamma ** i * v[i - 1]
            assert g[i - 1].item() == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_averaged_target_examples():
    mask = t([[True]], torch.bool)
    g_bar, last = averaged_target(t([[1.5]]), mask)
    assert g_bar.item() == 1.5 and last.item() == 0
    g_bar, _ = averaged_target(t([[2.0, 2.0]]), t([[True, True]], torch.bool))
    assert g_bar.item() == 2.0
    r = 1.7
    g = nstep_targets(t([[r, r, r]]), torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, 3, dtype=torch.bool),
                      torch.ones(1, 3, dtype=torch.bool), 1.0)
    g_bar, last = averaged_target(g, torch.ones(1, 3, dtype=torch.bool))
    assert g_bar.item() == pytest.approx(2 * r) and last.item() == 2


# bootstrap value ------------------------------------------------------------------

class FrozenGaussian:
    """Policy with zero spread: every sample is ``tanh(mean)``."""

    def __init__(self, mean):
        self.mean = mean

    def sample_actions(self, states, k, generator=None):
        head = GaussianPolicyHead(self.mean.expand(states.shape[0], -1),
                                  torch.full((states.shape[0], self.mean.shape[-1]), -float("inf"), dtype=states.dtype))
        return head.rsample(generator, k)[0]


def test_deterministic_policy_bootstrap_equals_q():
    torch.manual_seed(0)
    critic = build_critic("transformer", 3, 2, num_layers=1, num_heads=2, dims_per_head=4, hidden=8).double()
    mean = t([[0.4, -1.2]])
    s = torch.randn(5, 3, dtype=torch.float64)
    v = bootstrap_value(s, FrozenGaussian(mean), critic, n_action_samples=3)
    a = torch.tanh(mean).expand(5, -1)
    with torch.no_grad():
        q = critic(s, a[:, None, :])[:, 0]
    torch.testing.assert_close(v, q, rtol=1e-12, atol=1e-12)


def test_more_action_samples_lower_variance():
    torch.manual_seed(1)
    critic = build_critic("transformer", 3, 1, num_layers=1, num_heads=1, dims_per_head=4, hidden=8)
    policy = SquashedGaussianPolicy(3, 1, hidden=(8, 8), log_std_init=0.0)
    s = torch.randn(1, 3).expand(10_000, -1)
    g = torch.Generator().manual_seed(2)
    v1 = bootstrap_value(s, policy, critic, 1, g).double()
    v8 = bootstrap_value(s, policy, critic, 8, g).double()
    assert v8.var() <= v1.var()
    se = torch.sqrt(v1.var() / v1.numel() + v8.var() / v8.numel())
    assert abs(v1.mean() - v8.mean()) < 4 * se


def test_bootstrap_rejects_zero_samples():
    with pytest.raises(ValueError):
        bootstrap_value(torch.zeros(1, 2), None, [], n_action_samples=0)


# critic loss ----------------------------------------------------------------------

def window_tensors(B=6, n=4, obs_dim=3, act_dim=2, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return WindowTensors(
        first_state=torch.randn(B, obs_dim, generator=g, dtype=dtype),
        actions=torch.randn(B, n, act_dim, generator=g, dtype=dtype),
        rewards=torch.randn(B, n, generator=g, dtype=dtype),
        dones=torch.zeros(B, n, dtype=torch.bool),
        mask=torch.ones(B, n, dtype=torch.bool),
        horizons=torch.full((B,), n),
    )


def small_critic(seed=0):
    torch.manual_seed(seed)
    return build_critic("transformer", 3, 2, num_layers=2, num_heads=2, dims_per_head=4, hidden=8,
                        max_sequence=4).double()


def test_perfect_fit_zero_loss_and_gradient():
    critic = small_critic()
    wt = window_tensors()
    with torch.no_grad():
        targets = critic(wt.first_state, wt.actions)
    loss = critic_loss(critic, wt, targets)
    grads = torch.autograd.grad(loss, list(critic.parameters()))
    assert loss.item() == 0.0
    assert all(torch.all(g == 0) for g in grads)


def test_gradient_of_mean_loss_is_mean_of_horizon_gradients():
    critic = small_critic(3)
    wt = window_tensors(seed=4)
    targets = torch.randn(6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    params = list(critic.parameters())
    whole = torch.cat([g.reshape(-1) for g in torch.autograd.grad(critic_loss(critic, wt, targets), params)])
    per = []
    for i in range(4):
        q = critic(wt.first_state, wt.actions)[:, i]
        per.append(torch.cat([g.reshape(-1) for g in torch.autograd.grad(((q - targets[:, i]) ** 2).mean(), params)]))
    mean = torch.stack(per).mean(0)
    assert ((whole - mean).norm() / mean.norm()).item() < 1e-6


def test_equicorrelated_gradient_variance():
    v, se = mc_averaged_grad_variance(4, 0.5, 100_000, np.random.default_rng(0))
    assert v == pytest.approx(0.625, rel=0.05)


def test_targets_must_be_detached():
    critic = small_critic()
    wt = window_tensors()
    opt = torch.optim.AdamW(critic.parameters())
    targets = critic(wt.first_state, wt.actions)
    with pytest.raises(ValueError, match="detached"):
        critic_update([critic], opt, wt, targets)


def test_nonfinite_loss_aborts():
    critic = small_critic()
    wt = window_tensors()
    opt = torch.optim.AdamW(critic.parameters())
    with pytest.raises(DivergenceError):
        critic_update([critic], opt, wt, torch.full((6, 4), 1e9, dtype=torch.float64))


def test_averaged_mode_supervises_last_valid_position_only():
    critic = small_critic()
    wt = window_tensors()
    targets = torch.randn(6, 4, dtype=torch.float64)
    q = critic(wt.first_state, wt.actions)
    expect = ((q[:, -1] - targets.mean(-1)) ** 2).mean()
    assert critic_loss(critic, wt, targets, "averaged").item() == pytest.approx(expect.item(), rel=1e-12)


# policy and temperature ---------------------------------------------------------------

class QuadraticCritic(nn.Module):
    """``Q(s, a) = -(a - 0.3)^2`` at every position."""

    def forward(self, states, actions):
        return -((actions[..., 0] - 0.3) ** 2)


def test_zero_temperature_policy_loss_is_negative_q():
    torch.manual_seed(0)
    pi = SquashedGaussianPolicy(1, 1, hidden=(8, 8), log_std_init=-1.0).double()
    s = torch.zeros(16, 1, dtype=torch.float64)
    g1, g2 = torch.Generator().manual_seed(3), torch.Generator().manual_seed(3)
    loss, _ = policy_loss(pi, [QuadraticCritic()], s, torch.tensor(-float("inf")), g1)
    a, _ = pi.sample(s, g2)
    assert loss.item() == pytest.approx((-QuadraticCritic()(s, a[:, None])[:, 0]).mean().item(), rel=1e-12)


def test_bandit_step_moves_mean_toward_optimum():
    torch.manual_seed(2)
    pi = SquashedGaussianPolicy(1, 1, hidden=(8, 8)).double()
    s = torch.zeros(32, 1, dtype=torch.float64)
    before = abs(pi(s[:1]).deterministic().item() - 0.3)
    opt = torch.optim.AdamW(pi.parameters(), lr=1e-2)
    loss, _ = policy_loss(pi, [QuadraticCritic()], s, torch.tensor(-float("inf")), torch.Generator().manual_seed(0))
    opt.zero_grad()
    loss.backward()
    opt.step()
    assert abs(pi(s[:1]).deterministic().item() - 0.3) < before


def test_temperature_stationary_at_target_entropy():
    log_alpha = torch.tensor(0.3, requires_grad=True)
    logp = torch.full((10,), 2.0)
    loss = temperature_loss(log_alpha, logp, target_entropy=-2.0)
    (g,) = torch.autograd.grad(loss, log_alpha)
    assert g.item() == 0.0


def test_temperature_rises_when_entropy_too_low():
    log_alpha = torch.tensor(0.0, requires_grad=True)
    (g,) = torch.autograd.grad(temperature_loss(log_alpha, torch.full((4,), 5.0), -1.0), log_alpha)
    assert g.item() < 0  # descent increases alpha


# target schedules ---------------------------------------------------------------------

def test_soft_tau_one_is_hard_copy_and_tau_zero_freezes():
    online, target = small_critic(0), small_critic(1)
    frozen = copy.deepcopy(target)
    soft_update(target, online, 0.0)
    assert all(torch.equal(a, b) for a, b in zip(target.parameters(), frozen.parameters()))
    soft_update(target, online, 1.0)
    assert all(torch.equal(a, b) for a, b in zip(target.parameters(), online.parameters()))


def test_schedule_validation():
    with pytest.raises(ValueError):
        FreezeSchedule("sometimes")
    with pytest.raises(ValueError):
        FreezeSchedule("hard_freeze", K=0)


def test_hard_freeze_cache_spans():
    cfg = helpers.tabular_config("hard_freeze", freeze_k=20, lr_critic=1e-2, batch_size=8)
    buf = helpers.behavior_replay()
    learner = Learner(cfg, 2, 1, policy=helpers.StratifiedDiscretePolicy())
    rng = np.random.default_rng(0)
    probe = buf.windows_from_segments(np.arange(8), 1, 4, np.random.default_rng(9), pad_to=4)
    seen = []
    for k in range(1, 46):
        seen.append(learner.targets_for(probe, buf).clone())
        snapshot = {i: v.clone() for i, v in learner.cache.items()}
        batch = buf.windows_from_segments(buf.sample_segment_ids(8, rng), 1, 4, rng, pad_to=4)
        learner.critic_step(batch, buf)
        if k % 20:
            # still inside the span: every cached value is untouched
            assert all(torch.equal(snapshot[i], learner.cache[i]) for i in snapshot)
        else:
            assert learner.cache == {}
            assert all(torch.equal(a, b) for a, b in
                       zip(learner.target_critics[0].parameters(), learner.critics[0].parameters()))
    for span in (seen[0:20], seen[20:40]):
        assert all(torch.equal(span[0], x) for x in span)
    assert not torch.equal(seen[19], seen[20])
    assert not torch.equal(seen[39], seen[40])


def test_soft_schedule_moves_target_every_update():
    cfg = helpers.tabular_config("soft_polyak", tau=0.5, lr_critic=1e-2, batch_size=8)
    buf = helpers.behavior_replay()
    learner = Learner(cfg, 2, 1, policy=helpers.StratifiedDiscretePolicy())
    rng = np.random.default_rng(0)
    before = [p.clone() for p in learner.target_critics[0].parameters()]
    learner.critic_step(buf.sample_windows(8, 1, 4, rng), buf)
    after = list(learner.target_critics[0].parameters())
    assert any(not torch.equal(a, b) for a, b in zip(before, after))


def test_targets_independent_of_online_parameters():
    cfg = helpers.tabular_config("soft_polyak", batch_size=8)
    buf = helpers.behavior_replay()
    learner = Learner(cfg, 2, 1, policy=helpers.StratifiedDiscretePolicy())
    batch = buf.sample_windows(8, 1, 4, np.random.default_rng(0))
    a = learner.targets_for(batch, buf)
    assert not a.requires_grad
    with torch.no_grad():
        for p in learner.critics[0].parameters():
            p.add_(1.0)
    assert torch.equal(a, learner.targets_for(batch, buf))


# no IS and masking ------------------------------------------------------------------

def masked_pair():
    """Two buffers that agree on every mask=1 entry and differ everywhere else."""
    rng = np.random.default_rng(0)
    bufs = [ReplayBuffer(6, 10, 6, 2) for _ in range(2)]
    for seg in range(6):
        term = int(rng.integers(2, 8))
        for k in range(10):
            s, a, s2 = rng.normal(size=6), rng.uniform(-1, 1, 2), rng.normal(size=6)
            r, d = float(rng.normal()), k == term
            for j, buf in enumerate(bufs):
                if j == 1 and k > term:
                    s, a, r, s2 = s + 5 * rng.normal(size=6), -a, r * 100, s2 * 7
                    d = bool(rng.integers(2))
                if j == 1 and k == term:
                    s2 = s2 * 3  # bootstrap state after a terminal is never used
                buf.append_transition(s, a, r, d, s2)
    assert np.array_equal(bufs[0].mask, bufs[1].mask)
    assert not np.array_equal(bufs[0].rewards, bufs[1].rewards)
    return bufs


def learner_for(buf, **kw):
    cfg = RunConfig(l_max=6, batch_size=6, critic_layers=1, critic_heads=2, critic_dims_per_head=4,
                    critic_hidden=8, policy_hidden=8, policy_log_std_init=-1.0, **kw)
    return Learner(cfg, 6, 2)


@pytest.mark.parametrize("kind", ["nstep", "averaged"])
def test_masked_entries_are_inert(kind):
    a_buf, b_buf = masked_pair()
    losses = []
    for buf in (a_buf, b_buf):
        learner = learner_for(buf, target_kind=kind)
        rng = np.random.default_rng(3)
        out = []
        for _ in range(5):
            batch = buf.windows_from_segments(np.arange(6), 1, 6, rng, pad_to=6)
            out.append(learner.critic_step(batch, buf))
        losses.append(out)
    assert losses[0] == losses[1]


def test_critic_updates_never_query_replayed_action_density():
    buf, _ = masked_pair()
    learner = learner_for(buf, learning_starts=0, policy_warmup=0, temperature_warmup=0)
    rng = np.random.default_rng(0)
    for _ in range(3):
        learner.update_round(buf, rng, step=10)
    assert learner.policy.external_density_evals == 0
    assert learner.policy_updates == 3

    class Snooping(nn.Module):
        def __init__(self, inner, policy):
            super().__init__()
            self.inner, self.policy = inner, policy

        def forward(self, states, actions):
            self.policy.log_prob(states, actions[:, 0])
            return self.inner(states, actions)

    learner.critics[0] = Snooping(learner.critics[0], learner.policy)
    with pytest.raises(DensityEvaluationError):
        learner.critic_step(buf.sample_windows(6, 1, 6, rng), buf)


def test_learner_source_has_no_density_of_buffer_actions():
    src = Path(__import__("tsac.learner", fromlist=["x"]).__file__).read_text()
    assert not re.search(r"\.log_prob\(", src)


# tabular convergence ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["soft_polyak", "hard_freeze"])
def test_tabular_policy_evaluation(mode):
    err, seconds, _ = helpers.run_tabular(mode, budget_s=30.0)
    assert err < 1e-2


# training loop -------------------------------------------------------------------------

def tiny_run(**kw):
    base = dict(env_id="chain-reach", total_steps=300, learning_starts=100, policy_warmup=100,
                temperature_warmup=150, eval_interval=100, eval_episodes=4, batch_size=8,
                critic_layers=1, critic_heads=2, critic_dims_per_head=4, critic_hidden=8, policy_hidden=8,
                l_max=4, n_critic=5)
    base.update(kw)
    return RunConfig(**base)


def test_train_writes_artifacts(tmp_path):
    res = train(tiny_run(checkpoint_interval=100), tmp_path)
    assert (tmp_path / "config.txt").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir())[-1] == "step_300.pt"
    assert (tmp_path / "checkpoints" / "final.pt").exists()
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,seed,iqm_return,iqm_success,ci_lo,ci_hi,critic_loss,policy_loss,alpha"
    assert [r["step"] for r in res.rows] == [0, 100, 200, 300]
    # utd = 1: one critic update per transition after learning starts
    assert res.learner.critic_updates == 200


def test_utd_zero_means_no_learning(tmp_path):
    res = train(tiny_run(utd=0.0))
    assert res.learner.critic_updates == 0 and res.learner.policy_updates == 0
    first, last = res.rows[0], res.rows[-1]
    assert first["iqm_return"] == last["iqm_return"]


def test_windows_per_step_runs_parallel_writers():
    res = train(tiny_run(windows_per_step=4, total_steps=400, learning_starts=200))
    assert res.steps == 400
    assert res.learner.critic_updates == 200


def test_train_is_deterministic(tmp_path):
    train(tiny_run(seed=4), tmp_path / "a")
    train(tiny_run(seed=4), tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_eval_frequency_does_not_perturb_training():
    a = train(tiny_run(eval_interval=100))
    b = train(tiny_run(eval_interval=300))
    assert a.rows[-1]["iqm_return"] == b.rows[-1]["iqm_return"]
    pa = [p.detach() for p in a.learner.policy.parameters()]
    pb = [p.detach() for p in b.learner.policy.parameters()]
    assert all(torch.equal(x, y) for x, y in zip(pa, pb))


def test_divergence_guard_checkpoints(tmp_path):
    cfg = tiny_run(lr_critic=1e6, lr_policy=1e6)
    with pytest.raises(DivergenceError) as info:
        train(cfg, tmp_path)
    assert "step" in info.value.diagnostics
    assert (tmp_path / "checkpoints" / "diverged.pt").exists()

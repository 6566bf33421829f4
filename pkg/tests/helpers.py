"""Shared fixtures: a 2-state deterministic MDP with a fixed discrete policy, and its DP oracle."""

from __future__ import annotations

import time

import numpy as np
import torch

from tsac.config import RunConfig
from tsac.learner import Learner
from tsac.replay import ReplayBuffer

ACTIONS = (-1.0, 1.0)
# next state: action +1 goes to state 1, action -1 goes to state 0
REWARD = {(0, -1.0): 0.0, (0, 1.0): 0.5, (1, -1.0): 1.0, (1, 1.0): 0.0}
P_PLUS = (0.3, 0.6)  # pi(+1 | s)
GAMMA = 0.9


def next_state(s: int, a: float) -> int:
    return 1 if a > 0 else 0


def one_hot(s: int) -> np.ndarray:
    out = np.zeros(2)
    out[s] = 1.0
    return out


def dp_q(gamma: float = GAMMA) -> np.ndarray:
    """``Q^pi[s, k]`` for ``a = ACTIONS[k]`` by solving the linear Bellman system."""
    idx = {(s, a): 2 * s + k for s in (0, 1) for k, a in enumerate(ACTIONS)}
    A = np.eye(4)
    b = np.zeros(4)
    for (s, a), i in idx.items():
        b[i] = REWARD[(s, a)]
        s2 = next_state(s, a)
        for k2, a2 in enumerate(ACTIONS):
            p = P_PLUS[s2] if a2 > 0 else 1 - P_PLUS[s2]
            A[i, idx[(s2, a2)]] -= gamma * p
    return np.linalg.solve(A, b).reshape(2, 2)


class StratifiedDiscretePolicy:
    """Fixed policy over {-1, +1}; ``k`` samples are stratified so their mean is exact for k = 10."""

    def parameters(self):
        return iter(())

    def sample_actions(self, states: torch.Tensor, num_samples: int, generator=None) -> torch.Tensor:
        p = states @ torch.tensor(P_PLUS, dtype=states.dtype)
        u = torch.rand(states.shape[0], generator=generator, dtype=states.dtype)
        grid = (torch.arange(num_samples, dtype=states.dtype)[:, None] + u[None, :]) / num_samples
        plus = grid < p[None, :]
        return torch.where(plus, 1.0, -1.0).to(states.dtype)[..., None]


def behavior_replay(segments: int = 40, L: int = 10, seed: int = 0) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(segments, L, obs_dim=2, act_dim=1)
    s = 0
    for _ in range(segments * L):
        a = ACTIONS[rng.integers(2)]
        s2 = next_state(s, a)
        buf.append_transition(one_hot(s), [a], REWARD[(s, a)], False, one_hot(s2))
        s = s2
    return buf


def tabular_config(mode: str, **kw) -> RunConfig:
    base = dict(env_id="chain-reach", gamma=GAMMA, segment_length=10, l_min=1, l_max=4, batch_size=32,
                target_mode=mode, tau=0.05, freeze_k=20, n_critic=20, n_policy=0, n_action_samples=10,
                critic_layers=1, critic_heads=2, critic_dims_per_head=8, critic_hidden=32,
                lr_critic=3e-3, seed=0)
    base.update(kw)
    return RunConfig(**base)


def critic_q1(learner: Learner) -> np.ndarray:
    states = torch.tensor(np.stack([one_hot(s) for s in (0, 0, 1, 1)]), dtype=torch.float32)
    acts = torch.tensor([[[-1.0]], [[1.0]], [[-1.0]], [[1.0]]], dtype=torch.float32)
    with torch.no_grad():
        return learner.critics[0](states, acts)[:, 0].numpy().reshape(2, 2)


def run_tabular(mode: str, budget_s: float = 14.0, tol: float = 1e-2, **kw):
    """Train until ``Q^(1)`` is within ``tol`` of DP (checked every round) or the budget runs out."""
    cfg = tabular_config(mode, **kw)
    buf = behavior_replay()
    learner = Learner(cfg, obs_dim=2, act_dim=1, policy=StratifiedDiscretePolicy())
    rng = np.random.default_rng(1)
    target = dp_q(cfg.gamma)
    t0 = time.perf_counter()
    err = np.inf
    rounds = 0
    # a lower learning rate for the final approach keeps the SGD noise below tol
    while time.perf_counter() - t0 < budget_s:
        learner.update_round(buf, rng, step=0)
        rounds += 1
        err = float(np.abs(critic_q1(learner) - target).max())
        if err < 0.3 * tol:
            break
        if err < 5 * tol:
            for g in learner.critic_opt.param_groups:
                g["lr"] = cfg.lr_critic / 10
    return err, time.perf_counter() - t0, rounds

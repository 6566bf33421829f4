"""Multi-horizon critic learning without importance sampling, and the training loop.

A window ``(s_t, a_t..a_{t+n-1}, r_t..r_{t+n-1})`` supervises every prefix:

    G_i = sum_{j<i} gamma^j r_{t+j} + gamma^i V(s_{t+i}),   i = 1..n

with ``V(s) = E_{a~pi}[Q_target(s, a)]`` evaluated on a single action token.
The replayed actions only condition the critic, so their policy density is
never needed. The critic loss averages the squared error over horizons,
which is the same as averaging the per-horizon gradients.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
import zlib
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .envs import make_env
from .evalstats import METRICS_COLUMNS, EpisodeRecord, bootstrap_ci, iqm, success_at_final
from .nets import SquashedGaussianPolicy, build_critic, save_checkpoint
from .replay import ReplayBuffer, WindowBatch

log = logging.getLogger(__name__)

LOSS_LIMIT = 1e6
SUBSTREAMS = ("env", "replay", "nets-init", "policy-sampling", "bootstrap-sampling", "eval")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


# seeding ----------------------------------------------------------------------

def seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    if name not in SUBSTREAMS:
        raise ValueError(f"unknown substream {name!r}")
    return np.random.SeedSequence([seed, zlib.crc32(name.encode())])


def np_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, name))


def torch_stream(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed_sequence(seed, name).generate_state(1, np.uint64)[0] >> 1))
    return g


# targets ----------------------------------------------------------------------

@dataclass
class WindowTensors:
    """Torch view of a padded :class:`WindowBatch`."""

    first_state: torch.Tensor  # (B, obs_dim)
    actions: torch.Tensor      # (B, n, act_dim)
    rewards: torch.Tensor      # (B, n)
    dones: torch.Tensor        # (B, n) bool
    mask: torch.Tensor         # (B, n) bool, segment mask and inside the horizon
    horizons: torch.Tensor     # (B,)

    @classmethod
    def from_batch(cls, batch: WindowBatch, dtype=torch.float32) -> "WindowTensors":
        return cls(
            first_state=torch.as_tensor(batch.states[:, 0], dtype=dtype),
            actions=torch.as_tensor(batch.actions, dtype=dtype),
            rewards=torch.as_tensor(batch.rewards, dtype=dtype),
            dones=torch.as_tensor(batch.dones, dtype=torch.bool),
            mask=torch.as_tensor(batch.valid, dtype=torch.bool),
            horizons=torch.as_tensor(batch.horizons, dtype=torch.long),
        )


def _sample_actions(policy, states: torch.Tensor, k: int, generator) -> torch.Tensor:
    return policy.sample_actions(states, k, generator=generator)


def single_step_q(critics, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """``Q(s, a)`` on a single action token; the minimum across critics when there are two."""
    qs = [c(states, actions[:, None, :])[:, 0] for c in critics]
    return qs[0] if len(qs) == 1 else torch.min(torch.stack(qs), dim=0).values


@torch.no_grad()
def bootstrap_value(states: torch.Tensor, policy, target_critics, n_action_samples: int = 1,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    """Monte-Carlo ``E_{a~pi}[Q_target(s, a)]``; no entropy bonus."""
    if n_action_samples < 1:
        raise ValueError("n_action_samples must be >= 1")
    if not isinstance(target_critics, (list, tuple)):
        target_critics = [target_critics]
    M = states.shape[0]
    a = _sample_actions(policy, states, n_action_samples, generator)  # (k, M, act_dim)
    s = states.unsqueeze(0).expand(n_action_samples, -1, -1).reshape(n_action_samples * M, -1)
    q = single_step_q(target_critics, s, a.reshape(n_action_samples * M, -1))
    return q.reshape(n_action_samples, M).mean(0)


def nstep_targets(rewards: torch.Tensor, next_values: torch.Tensor, dones: torch.Tensor,
                  mask: torch.Tensor, gamma: float) -> torch.Tensor:
    """All prefix targets ``G_1..G_n`` for a batch of windows.

    ``next_values[:, i-1]`` is ``V(s_{t+i})``. Rewards at masked positions
    are dropped, and the bootstrap of ``G_i`` is dropped once a terminal
    occurs at or before ``t+i-1``.
    """
    n = rewards.shape[-1]
    mask = mask.to(torch.bool)
    r = torch.where(mask, rewards, torch.zeros_like(rewards))
    powers = torch.arange(n + 1, dtype=rewards.dtype)
    disc = torch.pow(torch.tensor(gamma, dtype=rewards.dtype), powers)
    partial = torch.cumsum(r * disc[:n], dim=-1)
    ended = torch.cumsum((dones.to(torch.bool) & mask).to(torch.int64), dim=-1) > 0
    boot = torch.where(ended, torch.zeros_like(next_values), disc[1:] * next_values)
    return partial + boot


def averaged_target(targets: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of the valid prefix targets and the index of the last valid position.

    Windows without a valid position get index ``-1`` and value 0.
    """
    mask = mask.to(torch.bool)
    count = mask.sum(-1)
    total = torch.where(mask, targets, torch.zeros_like(targets)).sum(-1)
    mean = torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))
    return mean, count - 1


def critic_loss(critic: nn.Module, wt: WindowTensors, targets: torch.Tensor,
                target_kind: str = "nstep") -> torch.Tensor:
    """Per-window mean over valid horizons of the squared error, averaged over the batch."""
    q = critic(wt.first_state, wt.actions)
    if target_kind == "nstep":
        sq = torch.where(wt.mask, (q - targets) ** 2, torch.zeros_like(q))
        per_window = sq.sum(-1) / wt.horizons.to(q.dtype)
    elif target_kind == "averaged":
        g_bar, last = averaged_target(targets, wt.mask)
        q_last = q.gather(1, last.clamp(min=0)[:, None])[:, 0]
        per_window = torch.where(last >= 0, (q_last - g_bar) ** 2, torch.zeros_like(q_last))
    else:
        raise ValueError(f"unknown target kind {target_kind!r}")
    return per_window.mean()


def _guard(name: str, value: float, extra: dict | None = None) -> None:
    if not math.isfinite(value) or abs(value) > LOSS_LIMIT:
        raise DivergenceError(f"{name} out of range", {name: value, **(extra or {})})


def critic_update(critics, optimizer, wt: WindowTensors, targets: torch.Tensor,
                  target_kind: str = "nstep") -> float:
    """One optimizer step on the summed critic losses; returns the mean loss."""
    if targets.requires_grad:
        raise ValueError("targets must be detached from the online critic")
    optimizer.zero_grad(set_to_none=True)
    losses = [critic_loss(c, wt, targets, target_kind) for c in critics]
    total = sum(losses)
    value = float(total.detach()) / len(losses)
    _guard("critic_loss", value)
    total.backward()
    optimizer.step()
    return value


def policy_loss(policy, critics, states, log_alpha, generator=None):
    actions, logp = policy.sample(states, generator)
    q = single_step_q(critics, states, actions)
    alpha = log_alpha.exp().detach()
    return (alpha * logp - q).mean(), logp


def temperature_loss(log_alpha: torch.Tensor, logp: torch.Tensor, target_entropy: float) -> torch.Tensor:
    return -(log_alpha.exp() * (logp.detach() + target_entropy)).mean()


# target schedules -------------------------------------------------------------

@torch.no_grad()
def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """``phi <- tau psi + (1 - tau) phi``; ``tau = 1`` is an exact copy."""
    tp, op = list(target.parameters()), list(online.parameters())
    if tau == 1.0:
        torch._foreach_copy_(tp, op)
    elif tau > 0.0:
        torch._foreach_lerp_(tp, op, tau)


@torch.no_grad()
def hard_update(target: nn.Module, online: nn.Module) -> None:
    target.load_state_dict(online.state_dict())


@dataclass
class FreezeSchedule:
    """When to move the target critic and when cached bootstrap values expire.

    ``soft_polyak`` blends after every critic update and expires the cache
    at every update round. ``hard_freeze`` copies the online critic after
    every ``K`` critic updates and keeps cached values for the whole span.
    """

    mode: str = "soft_polyak"
    tau: float = 5e-3
    K: int = 20
    updates_in_span: int = 0
    spans: int = 0

    def __post_init__(self):
        if self.mode not in ("soft_polyak", "hard_freeze"):
            raise ValueError(f"unknown schedule {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def after_critic_update(self, targets_and_online) -> bool:
        """Apply the schedule; returns ``True`` when a span boundary was crossed."""
        if self.mode == "soft_polyak":
            for tgt, onl in targets_and_online:
                soft_update(tgt, onl, self.tau)
            return False
        self.updates_in_span += 1
        if self.updates_in_span < self.K:
            return False
        for tgt, onl in targets_and_online:
            hard_update(tgt, onl)
        self.updates_in_span = 0
        self.spans += 1
        return True

    @property
    def cache_per_round(self) -> bool:
        return self.mode == "soft_polyak"


def target_update(schedule: FreezeSchedule, pairs) -> bool:
    return schedule.after_critic_update(pairs)


# learner ----------------------------------------------------------------------

@dataclass
class UpdateStats:
    critic_losses: list = field(default_factory=list)
    policy_losses: list = field(default_factory=list)

    def drain(self) -> tuple[float, float]:
        c = float(np.mean(self.critic_losses)) if self.critic_losses else float("nan")
        p = float(np.mean(self.policy_losses)) if self.policy_losses else float("nan")
        self.critic_losses.clear()
        self.policy_losses.clear()
        return c, p


class Learner:
    """Critic(s), target critic(s), policy and temperature, plus the bootstrap cache."""

    def __init__(self, cfg: RunConfig, obs_dim: int, act_dim: int, policy=None):
        self.cfg = cfg
        self.obs_dim, self.act_dim = obs_dim, act_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed_sequence(cfg.seed, "nets-init").generate_state(1)[0]))
            n_critics = 2 if cfg.twin_critic else 1
            self.critics = [build_critic(cfg.critic_backbone, obs_dim, act_dim,
                                         num_layers=cfg.critic_layers, num_heads=cfg.critic_heads,
                                         dims_per_head=cfg.critic_dims_per_head, hidden=cfg.critic_hidden,
                                         max_sequence=cfg.l_max, pre_norm=cfg.critic_pre_norm)
                            for _ in range(n_critics)]
            self.policy = policy if policy is not None else SquashedGaussianPolicy(
                obs_dim, act_dim, hidden=(cfg.policy_hidden, cfg.policy_hidden),
                log_std_init=cfg.policy_log_std_init)
        self.target_critics = [copy.deepcopy(c).requires_grad_(False) for c in self.critics]
        self.log_alpha = torch.tensor(math.log(cfg.init_alpha), requires_grad=True)
        self.target_entropy = cfg.resolved_target_entropy(act_dim)
        self.critic_opt = torch.optim.AdamW([p for c in self.critics for p in c.parameters()],
                                            lr=cfg.lr_critic, weight_decay=cfg.weight_decay, fused=True)
        params = list(self.policy.parameters())
        self.policy_opt = torch.optim.AdamW(params, lr=cfg.lr_policy, weight_decay=cfg.weight_decay,
                                            fused=True) \
            if params else None
        self.alpha_opt = torch.optim.AdamW([self.log_alpha], lr=cfg.lr_alpha, weight_decay=0.0)
        self.schedule = FreezeSchedule(cfg.target_mode, cfg.tau, cfg.freeze_k)
        self.cache: dict[int, torch.Tensor] = {}
        self.policy_gen = torch_stream(cfg.seed, "policy-sampling")
        self.boot_gen = torch_stream(cfg.seed, "bootstrap-sampling")
        self.critic_updates = 0
        self.policy_updates = 0
        self.stats = UpdateStats()

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())

    def pairs(self):
        return list(zip(self.target_critics, self.critics))

    # bootstrap cache

    def invalidate(self, segment_ids=None) -> None:
        if segment_ids is None:
            self.cache.clear()
            return
        for i in np.atleast_1d(segment_ids):
            self.cache.pop(int(i), None)

    def ensure_cached(self, replay: ReplayBuffer, segment_ids) -> None:
        """Compute ``V(s)`` for every state of the listed segments not yet cached."""
        missing = sorted({int(i) for i in segment_ids} - self.cache.keys())
        if not missing:
            return
        states = torch.as_tensor(replay.states[missing], dtype=torch.float32)  # (S, L+1, obs)
        S, Lp1, _ = states.shape
        v = bootstrap_value(states.reshape(S * Lp1, -1), self.policy, self.target_critics,
                            self.cfg.n_action_samples, self.boot_gen).reshape(S, Lp1)
        for k, i in enumerate(missing):
            self.cache[i] = v[k]

    def targets_for(self, batch: WindowBatch, replay: ReplayBuffer | None = None,
                    wt: WindowTensors | None = None) -> torch.Tensor:
        if replay is not None:
            self.ensure_cached(replay, batch.segment_ids)
        n = batch.rewards.shape[1]
        v_seg = torch.stack([self.cache[int(i)] for i in batch.segment_ids])  # (B, L+1)
        idx = torch.as_tensor(np.minimum(batch.starts[:, None] + np.arange(1, n + 1)[None, :],
                                         v_seg.shape[1] - 1))
        next_values = v_seg.gather(1, idx)
        wt = wt or WindowTensors.from_batch(batch)
        return nstep_targets(wt.rewards, next_values, wt.dones, wt.mask, self.cfg.gamma)

    # updates

    def critic_step(self, batch: WindowBatch, replay: ReplayBuffer) -> float:
        wt = WindowTensors.from_batch(batch)
        targets = self.targets_for(batch, replay, wt)
        # replayed actions only condition the critic; any density query here is a bug
        with self.policy_density_forbidden():
            loss = critic_update(self.critics, self.critic_opt, wt, targets, self.cfg.target_kind)
        self.critic_updates += 1
        if target_update(self.schedule, self.pairs()):
            self.invalidate()
        self.stats.critic_losses.append(loss)
        return loss

    def policy_density_forbidden(self):
        forbid = getattr(self.policy, "forbid_external_density", None)
        return nullcontext() if forbid is None else forbid()

    def policy_step(self, states: torch.Tensor, update_temperature: bool) -> float:
        critic_params = [p for c in self.critics for p in c.parameters()]
        # gradients flow through the critic to the actions only
        for p in critic_params:
            p.requires_grad_(False)
        try:
            loss, logp = policy_loss(self.policy, self.critics, states, self.log_alpha, self.policy_gen)
            _guard("policy_loss", float(loss.detach()))
            self.policy_opt.zero_grad(set_to_none=True)
            loss.backward()
        finally:
            for p in critic_params:
                p.requires_grad_(True)
        self.policy_opt.step()
        if update_temperature:
            a_loss = temperature_loss(self.log_alpha, logp, self.target_entropy)
            self.alpha_opt.zero_grad(set_to_none=True)
            a_loss.backward()
            self.alpha_opt.step()
        self.policy_updates += 1
        self.stats.policy_losses.append(float(loss.detach()))
        return float(loss.detach())

    def update_round(self, replay: ReplayBuffer, rng: np.random.Generator, step: int) -> None:
        """One outer iteration: a segment batch, ``n_critic`` window updates, then policy updates."""
        cfg = self.cfg
        seg_ids = replay.sample_segment_ids(cfg.batch_size, rng)
        if self.schedule.cache_per_round:
            self.invalidate()
        for _ in range(cfg.n_critic):
            batch = replay.windows_from_segments(seg_ids, cfg.l_min, cfg.l_max, rng, pad_to=cfg.l_max)
            self.critic_step(batch, replay)
        if cfg.n_policy and self.policy_opt is not None and step > cfg.policy_warmup:
            states = torch.as_tensor(replay.sample_states(cfg.batch_size, rng), dtype=torch.float32)
            for _ in range(cfg.n_policy):
                self.policy_step(states, update_temperature=step > cfg.temperature_warmup)

    def modules(self) -> dict:
        out = {"policy": self.policy, "log_alpha": self.log_alpha}
        for k, (c, t) in enumerate(zip(self.critics, self.target_critics)):
            out[f"critic{k}"] = c
            out[f"target_critic{k}"] = t
        return out


# rollouts ---------------------------------------------------------------------

@torch.no_grad()
def evaluate(policy, env_id: str, reward_mode: str, episode_seeds) -> tuple[list[float], list[bool]]:
    """Deterministic rollouts; success is read at the final step only."""
    returns, successes = [], []
    for s in episode_seeds:
        env = make_env(env_id, reward_mode)
        state = env.reset(int(s))
        total, flags, dones = 0.0, [], []
        while not state.done:
            obs = torch.as_tensor(state.observation, dtype=torch.float32)[None]
            a = policy.act(obs, deterministic=True)[0].numpy()
            state, r, done, success = env.step(a)
            total += r
            flags.append(success)
            dones.append(done)
        returns.append(total)
        successes.append(success_at_final(EpisodeRecord(flags, dones)))
    return returns, successes


@dataclass
class TrainResult:
    steps: int
    rows: list
    metrics_path: Path | None
    wall_seconds: float
    learner: Learner


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def train(cfg: RunConfig, out_dir=None) -> TrainResult:
    """Collect segments from ``windows_per_step`` parallel envs and interleave update rounds.

    Each collection phase runs ``segment_length`` vector steps, so every env
    commits one segment. Critic updates are owed at ``utd`` per transition
    and are paid in rounds of ``n_critic``.
    """
    cfg.validate()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    out = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    W = cfg.windows_per_step
    envs = [make_env(cfg.env_id, cfg.reward_mode) for _ in range(W)]
    spec = envs[0].spec
    env_rng = np_stream(cfg.seed, "env")
    replay_rng = np_stream(cfg.seed, "replay")
    eval_rng = np_stream(cfg.seed, "eval")
    eval_seeds = eval_rng.integers(2 ** 31, size=cfg.eval_episodes)
    ci_seed = int(eval_rng.integers(2 ** 31))
    act_gen = torch_stream(cfg.seed, "policy-sampling")

    replay = ReplayBuffer(cfg.replay_capacity, cfg.segment_length, spec.obs_dim, spec.act_dim, streams=W)
    learner = Learner(cfg, spec.obs_dim, spec.act_dim)
    states = [e.reset(int(env_rng.integers(2 ** 31))) for e in envs]

    rows = []
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text())
        fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)

    def emit(step):
        returns, successes = evaluate(learner.policy, cfg.env_id, cfg.reward_mode, eval_seeds)
        lo, hi = bootstrap_ci(returns, n_boot=1000, rng=np.random.default_rng([ci_seed, len(rows)]))
        c_loss, p_loss = learner.stats.drain()
        row = dict(step=step, seed=cfg.seed, iqm_return=iqm(returns), iqm_success=iqm(np.array(successes, float)),
                   ci_lo=lo, ci_hi=hi, critic_loss=c_loss, policy_loss=p_loss, alpha=learner.alpha)
        rows.append(row)
        if writer is not None:
            writer.writerow([_fmt(row[k]) for k in METRICS_COLUMNS])
            fh.flush()
        log.info("step %d return %.3f success %.2f critic %.4g alpha %.3g", step, row["iqm_return"],
                 row["iqm_success"], c_loss, row["alpha"])

    def checkpoint(name, meta):
        if out is not None:
            save_checkpoint(out / "checkpoints" / name, learner.modules(), meta)

    step = 0
    credit = 0.0
    next_eval = cfg.eval_interval
    next_ckpt = cfg.checkpoint_interval or None
    try:
        emit(0)
        while step < cfg.total_steps:
            phase_start = step
            for _ in range(cfg.segment_length):
                obs = torch.as_tensor(np.stack([s.observation for s in states]), dtype=torch.float32)
                with torch.no_grad():
                    if step < cfg.learning_starts:
                        acts = torch.rand(W, spec.act_dim, generator=act_gen) * 2 - 1
                    else:
                        acts = learner.policy.act(obs, generator=act_gen)
                acts = acts.numpy().astype(np.float64)
                for k, env in enumerate(envs):
                    nxt, r, done, _ = env.step(acts[k])
                    seg = replay.append_transition(states[k].observation, acts[k], r, done,
                                                   nxt.observation, stream=k)
                    if seg is not None:
                        learner.invalidate((replay.write_cursor - 1) % replay.capacity)
                    states[k] = env.reset(int(env_rng.integers(2 ** 31))) if done else nxt
                step += W
            # only transitions collected from learning_starts on earn updates
            earned = step - max(phase_start, cfg.learning_starts)
            if earned > 0 and cfg.utd > 0:
                credit += cfg.utd * earned
                rounds = int(credit // cfg.n_critic)
                credit -= rounds * cfg.n_critic
                for _ in range(rounds):
                    learner.update_round(replay, replay_rng, step)
            if step >= next_eval or step >= cfg.total_steps:
                emit(step)
                while next_eval <= step:
                    next_eval += cfg.eval_interval
            if next_ckpt is not None and step >= next_ckpt:
                checkpoint(f"step_{step}.pt", {"step": step, "seed": cfg.seed})
                while next_ckpt <= step:
                    next_ckpt += cfg.checkpoint_interval
        checkpoint("final.pt", {"step": step, "seed": cfg.seed})
    except DivergenceError as exc:
        exc.diagnostics.update(step=step, critic_updates=learner.critic_updates)
        checkpoint("diverged.pt", {"step": step, "seed": cfg.seed, "diagnostics": exc.diagnostics})
        raise
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(step, rows, out / "metrics.csv" if out else None, time.perf_counter() - t0, learner)

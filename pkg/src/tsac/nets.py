"""Critic backbones and the squashed-Gaussian policy.

All critics share one call signature::

    critic(states: (B, obs_dim), actions: (B, n, act_dim)) -> q: (B, n)

where ``q[:, i-1]`` is the value of the prefix ``(s_t, a_t, ..., a_{t+i-1})``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LEAK = 0.01


class DensityEvaluationError(RuntimeError):
    """Raised when a policy density is requested for actions it did not sample."""


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite input")


def sinusoidal_encoding(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, width, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / width)
    pe = torch.zeros(length, width, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : width // 2]
    return pe


@dataclass(frozen=True)
class TransformerCriticConfig:
    num_layers: int = 2
    num_heads: int = 4
    dims_per_head: int = 32
    hidden: int = 128
    max_sequence: int = 16
    pre_norm: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1 or self.dims_per_head < 1:
            raise ValueError("num_layers, num_heads and dims_per_head must be >= 1")
        if self.max_sequence < 1:
            raise ValueError("max_sequence must be >= 1")

    @property
    def width(self) -> int:
        return self.num_heads * self.dims_per_head


class CausalSelfAttention(nn.Module):
    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        h = self.num_heads
        q, k, v = self.qkv(x).view(B, T, 3, h, D // h).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.proj(y.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    def __init__(self, width: int, num_heads: int, hidden: int, pre_norm: bool):
        super().__init__()
        self.pre_norm = pre_norm
        self.attn = CausalSelfAttention(width, num_heads)
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def ffn(self, x):
        return self.fc2(F.leaky_relu(self.fc1(x), LEAK))

    def forward(self, x):
        if self.pre_norm:
            x = x + self.attn(self.ln1(x))
            return x + self.ffn(self.ln2(x))
        x = self.ln1(x + self.attn(x))
        return self.ln2(x + self.ffn(x))


class TransformerCritic(nn.Module):
    """Causal Transformer over ``[s_t, a_t, ..., a_{t+n-1}]``.

    State and action tokens use separate bias-free linear embeddings; the
    bias-free output head reads the action positions only, so the state
    token at position 0 never produces a value.
    """

    def __init__(self, obs_dim: int, act_dim: int, config: TransformerCriticConfig | None = None):
        super().__init__()
        self.config = cfg = config or TransformerCriticConfig()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.embed_state = nn.Linear(obs_dim, cfg.width, bias=False)
        self.embed_action = nn.Linear(act_dim, cfg.width, bias=False)
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.num_heads, cfg.hidden, cfg.pre_norm) for _ in range(cfg.num_layers))
        self.final_ln = nn.LayerNorm(cfg.width) if cfg.pre_norm else None
        self.head = nn.Linear(cfg.width, 1, bias=False)
        self._pos_enc = sinusoidal_encoding(cfg.max_sequence + 1, cfg.width)

    @property
    def max_sequence(self) -> int:
        return self.config.max_sequence

    def forward(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        n = actions.shape[1]
        if not 1 <= n <= self.config.max_sequence:
            raise ValueError(f"sequence of {n} actions outside 1..{self.config.max_sequence}")
        _check_finite(states, actions)
        tokens = torch.cat([self.embed_state(states)[:, None, :], self.embed_action(actions)], dim=1)
        x = tokens + self._pos_enc[: n + 1].to(tokens.dtype)
        for block in self.blocks:
            x = block(x)
        if self.final_ln is not None:
            x = self.final_ln(x)
        return self.head(x[:, 1:]).squeeze(-1)


class RecurrentCritic(nn.Module):
    """GRU/LSTM critic: state sets the initial hidden state, actions are the inputs."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: int = 64, num_layers: int = 1,
                 cell: str = "gru", max_sequence: int = 16):
        super().__init__()
        if cell not in ("gru", "lstm"):
            raise ValueError(f"unknown cell {cell!r}")
        self.cell = cell
        self.num_layers = num_layers
        self.max_sequence = max_sequence
        self.state_fc = nn.Linear(obs_dim, hidden)
        rnn = nn.GRU if cell == "gru" else nn.LSTM
        self.rnn = rnn(act_dim, hidden, num_layers=num_layers, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, states, actions):
        n = actions.shape[1]
        if not 1 <= n <= self.max_sequence:
            raise ValueError(f"sequence of {n} actions outside 1..{self.max_sequence}")
        _check_finite(states, actions)
        h0 = torch.tanh(self.state_fc(states))[None].expand(self.num_layers, -1, -1).contiguous()
        hx = h0 if self.cell == "gru" else (h0, torch.zeros_like(h0))
        out, _ = self.rnn(actions, hx)
        return self.head(out).squeeze(-1)


class ConcatMLPCritic(nn.Module):
    """MLP on ``[s_t, a_t, ..., a_{t+n-1}]`` flattened, for a fixed ``n``.

    Every output sees the whole action chunk, so ``q[i]`` depends on actions
    after position ``i``; this is the leakage the causal critics avoid.
    """

    def __init__(self, obs_dim: int, act_dim: int, chunk: int, hidden=(256, 256)):
        super().__init__()
        self.chunk = chunk
        self.max_sequence = chunk
        layers, width = [], obs_dim + chunk * act_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.LeakyReLU(LEAK)]
            width = h
        layers.append(nn.Linear(width, chunk))
        self.net = nn.Sequential(*layers)

    def forward(self, states, actions):
        if actions.shape[1] != self.chunk:
            raise ValueError(f"mlp_concat critic needs exactly {self.chunk} actions, got {actions.shape[1]}")
        _check_finite(states, actions)
        return self.net(torch.cat([states, actions.flatten(1)], dim=-1))


BACKBONES = ("transformer", "gru", "lstm", "mlp_concat")


def build_critic(backbone: str, obs_dim: int, act_dim: int, *, num_layers=2, num_heads=4,
                 dims_per_head=32, hidden=128, max_sequence=16, pre_norm=False) -> nn.Module:
    if backbone == "transformer":
        cfg = TransformerCriticConfig(num_layers, num_heads, dims_per_head, hidden, max_sequence, pre_norm)
        return TransformerCritic(obs_dim, act_dim, cfg)
    if backbone in ("gru", "lstm"):
        return RecurrentCritic(obs_dim, act_dim, hidden=hidden, num_layers=num_layers, cell=backbone,
                               max_sequence=max_sequence)
    if backbone == "mlp_concat":
        return ConcatMLPCritic(obs_dim, act_dim, chunk=max_sequence, hidden=(hidden, hidden))
    raise ValueError(f"unknown critic backbone {backbone!r}; expected one of {BACKBONES}")


def critic_forward(critic: nn.Module, state, actions) -> np.ndarray:
    """Single-window convenience: ``state (obs_dim,)``, ``actions (n, act_dim)`` -> ``q (n,)``."""
    p = next(critic.parameters())
    s = torch.as_tensor(np.asarray(state), dtype=p.dtype)[None]
    a = torch.as_tensor(np.asarray(actions), dtype=p.dtype)[None]
    with torch.no_grad():
        return critic(s, a)[0].cpu().numpy()


# policy ---------------------------------------------------------------------

_LOG2 = math.log(2.0)


def tanh_log_det(u: torch.Tensor) -> torch.Tensor:
    """``log(1 - tanh(u)^2)`` computed without cancellation."""
    return 2.0 * (_LOG2 - u - F.softplus(-2.0 * u))


@dataclass
class GaussianPolicyHead:
    mean: torch.Tensor
    log_std: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return self.log_std.exp()

    def rsample(self, generator: torch.Generator | None = None, num_samples: int | None = None):
        shape = self.mean.shape if num_samples is None else (num_samples, *self.mean.shape)
        eps = torch.randn(shape, generator=generator, dtype=self.mean.dtype)
        u = self.mean + self.std * eps
        return torch.tanh(u), self._log_prob_pre_tanh(u)

    def _log_prob_pre_tanh(self, u: torch.Tensor) -> torch.Tensor:
        z = (u - self.mean) / self.std
        normal = -0.5 * z.pow(2) - self.log_std - 0.5 * math.log(2 * math.pi)
        return (normal - tanh_log_det(u)).sum(-1)

    def log_prob(self, actions: torch.Tensor) -> torch.Tensor:
        eps = torch.finfo(actions.dtype).eps
        u = torch.atanh(actions.clamp(-1 + eps, 1 - eps))
        return self._log_prob_pre_tanh(u)

    def deterministic(self) -> torch.Tensor:
        return torch.tanh(self.mean)


class SquashedGaussianPolicy(nn.Module):
    """Two hidden layers with LayerNorm before the nonlinearity, tanh-squashed Gaussian output."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128), log_std_init: float = -5.0,
                 log_std_min: float = -20.0, log_std_max: float = 2.0):
        super().__init__()
        self.log_std_min, self.log_std_max = log_std_min, log_std_max
        layers, width = [], obs_dim
        for h in hidden:
            layers += [nn.Linear(width, h), nn.LayerNorm(h), nn.LeakyReLU(LEAK)]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.mean = nn.Linear(width, act_dim)
        self.log_std = nn.Linear(width, act_dim)
        # near-zero initial mean: untrained policies should not push in a fixed direction
        nn.init.uniform_(self.mean.weight, -1e-3, 1e-3)
        nn.init.zeros_(self.mean.bias)
        nn.init.zeros_(self.log_std.weight)
        nn.init.constant_(self.log_std.bias, log_std_init)
        self.external_density_evals = 0
        self._density_forbidden = False

    def forward(self, obs: torch.Tensor) -> GaussianPolicyHead:
        _check_finite(obs)
        h = self.trunk(obs)
        log_std = self.log_std(h).clamp(self.log_std_min, self.log_std_max)
        return GaussianPolicyHead(self.mean(h), log_std)

    def sample(self, obs, generator=None):
        """Reparameterized action and its log-probability (fresh samples only)."""
        return self(obs).rsample(generator)

    def sample_actions(self, obs, num_samples: int, generator=None) -> torch.Tensor:
        """``(num_samples, B, act_dim)`` fresh actions, used for bootstrap values."""
        return self(obs).rsample(generator, num_samples)[0]

    def act(self, obs, deterministic: bool = False, generator=None) -> torch.Tensor:
        head = self(obs)
        return head.deterministic() if deterministic else head.rsample(generator)[0]

    def log_prob(self, obs, actions) -> torch.Tensor:
        """Density of externally supplied actions; refused while forbidden."""
        if self._density_forbidden:
            raise DensityEvaluationError(
                "policy density requested for externally supplied actions during a critic update")
        self.external_density_evals += 1
        return self(obs).log_prob(actions)

    @contextlib.contextmanager
    def forbid_external_density(self):
        prev = self._density_forbidden
        self._density_forbidden = True
        try:
            yield
        finally:
            self._density_forbidden = prev


# checkpoints -----------------------------------------------------------------

CHECKPOINT_FORMAT = "tsac-checkpoint/1"


def save_checkpoint(path, modules: dict, meta: dict | None = None) -> None:
    """Save ``{name: module-or-tensor}`` under their module paths plus free-form metadata."""
    state = {}
    for name, obj in modules.items():
        state[name] = obj.state_dict() if isinstance(obj, nn.Module) else obj
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": CHECKPOINT_FORMAT, "meta": meta or {}, "modules": state}, path)


def load_checkpoint(path, modules: dict | None = None) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    for name, obj in (modules or {}).items():
        if isinstance(obj, nn.Module):
            obj.load_state_dict(blob["modules"][name])
        else:
            obj.data.copy_(blob["modules"][name])
    return blob

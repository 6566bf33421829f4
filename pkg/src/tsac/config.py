"""Run configuration: flat ``key = value`` text with typed validation.

Lines starting with ``#`` and blank lines are ignored. Every key must be a
field of :class:`RunConfig`; unknown keys and every range violation are
collected and reported together.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .envs import ENV_IDS
from .nets import BACKBONES

TARGET_MODES = ("soft_polyak", "hard_freeze")
TARGET_KINDS = ("nstep", "averaged")
OUT_ROOT_ENV = "TSAC_OUT_ROOT"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class RunConfig:
    env_id: str = "pointmass-2d"
    reward_mode: str = "dense"
    seed: int = 0
    total_steps: int = 20_000
    segment_length: int = 25
    l_min: int = 1
    l_max: int = 8
    windows_per_step: int = 1
    batch_size: int = 64
    replay_capacity: int = 4000
    gamma: float = 0.99
    target_mode: str = "soft_polyak"
    tau: float = 5e-3
    freeze_k: int = 20
    target_kind: str = "nstep"
    utd: float = 1.0
    n_critic: int = 5
    n_policy: int = 1
    learning_starts: int = 1000
    policy_warmup: int = 1000
    temperature_warmup: int = 1000
    target_entropy: float | None = None
    init_alpha: float = 1.0
    n_action_samples: int = 1
    twin_critic: bool = False
    critic_backbone: str = "transformer"
    critic_layers: int = 2
    critic_heads: int = 4
    critic_dims_per_head: int = 32
    critic_hidden: int = 128
    critic_pre_norm: bool = False
    policy_hidden: int = 128
    policy_log_std_init: float = -5.0
    lr_policy: float = 2.5e-4
    lr_critic: float = 2.5e-5
    lr_alpha: float = 2.5e-4
    weight_decay: float = 0.0
    eval_interval: int = 5000
    eval_episodes: int = 20
    checkpoint_interval: int = 0
    out_dir: str = ""

    def validate(self) -> None:
        p = []

        def need(cond, msg):
            if not cond:
                p.append(msg)

        need(self.env_id in ENV_IDS, f"env_id must be one of {ENV_IDS}, got {self.env_id!r}")
        need(self.reward_mode in ("dense", "sparse"), f"reward_mode must be dense or sparse, got {self.reward_mode!r}")
        need(self.seed >= 0, "seed must be >= 0")
        need(self.total_steps >= 1, "total_steps must be >= 1")
        need(self.segment_length >= 1, "segment_length must be >= 1")
        need(1 <= self.l_min <= self.l_max <= self.segment_length,
             f"need 1 <= l_min <= l_max <= segment_length, got {self.l_min}, {self.l_max}, {self.segment_length}")
        need(self.windows_per_step >= 1, "windows_per_step must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.replay_capacity >= 1, "replay_capacity must be >= 1")
        need(0.0 < self.gamma <= 1.0, f"gamma must lie in (0, 1], got {self.gamma}")
        need(self.target_mode in TARGET_MODES, f"target_mode must be one of {TARGET_MODES}")
        need(0.0 <= self.tau <= 1.0, f"tau must lie in [0, 1], got {self.tau}")
        need(self.freeze_k >= 1, "freeze_k must be >= 1")
        need(self.target_kind in TARGET_KINDS, f"target_kind must be one of {TARGET_KINDS}")
        need(self.utd >= 0.0, "utd must be >= 0")
        need(self.n_critic >= 1, "n_critic must be >= 1")
        need(self.n_policy >= 0, "n_policy must be >= 0")
        for name in ("learning_starts", "policy_warmup", "temperature_warmup"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(self.init_alpha > 0.0, "init_alpha must be > 0")
        need(self.n_action_samples >= 1, "n_action_samples must be >= 1")
        need(self.critic_backbone in BACKBONES, f"critic_backbone must be one of {BACKBONES}")
        if self.critic_backbone == "mlp_concat":
            need(self.l_min == self.l_max, "mlp_concat critic needs a fixed horizon (l_min == l_max)")
        for name in ("critic_layers", "critic_heads", "critic_dims_per_head", "critic_hidden", "policy_hidden"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        for name in ("lr_policy", "lr_critic", "lr_alpha"):
            need(getattr(self, name) > 0.0, f"{name} must be > 0")
        need(self.weight_decay >= 0.0, "weight_decay must be >= 0")
        need(self.eval_interval >= 1, "eval_interval must be >= 1")
        need(self.eval_episodes >= 2, "eval_episodes must be >= 2")
        need(self.checkpoint_interval >= 0, "checkpoint_interval must be >= 0")
        if p:
            raise ConfigError(p)

    def resolved_target_entropy(self, act_dim: int) -> float:
        return -float(act_dim) if self.target_entropy is None else float(self.target_entropy)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "float | None":
        return None if raw.lower() in ("none", "") else float(raw)
    return raw


def parse_pairs(pairs: list[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    """Apply ``(key, value)`` strings onto ``base``; unknown keys and bad types are all reported."""
    values = dataclasses.asdict(base or RunConfig())
    problems = []
    for key, raw in pairs:
        if key not in _TYPES:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{key}: cannot parse {raw!r} ({exc})")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def read_pairs(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected key = value")
            continue
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    if problems:
        raise ConfigError(problems)
    return pairs


def split_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not key=value"])
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """File (if any) first, then ``key=value`` overrides; validated as a whole."""
    pairs = []
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from None
        pairs += read_pairs(text, str(path))
    problems = []
    for item in overrides:
        try:
            pairs.append(split_override(item))
        except ConfigError as exc:
            problems += exc.problems
    if problems:
        raise ConfigError(problems)
    return parse_pairs(pairs)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))

"""Segment-structured replay with action masks and window sampling.

Transitions are written into fixed-length segments of ``L`` steps. When an
episode ends before the segment is full, writing continues with the next
episode and every position after the first terminal gets ``mask = 0``.
Windows are sub-slices ``(start p, horizon n)`` of a stored segment, with
``n = min(l, L - p)`` for ``l ~ U{l_min..l_max}`` and ``p ~ U{0..L-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


def mask_from_dones(dones: np.ndarray) -> np.ndarray:
    """Ones up to and including the first terminal, zeros after it."""
    dones = np.asarray(dones, dtype=bool)
    mask = np.ones(dones.shape[0], dtype=np.float64)
    hits = np.flatnonzero(dones)
    if hits.size:
        mask[hits[0] + 1:] = 0.0
    return mask


@dataclass
class Segment:
    states: np.ndarray   # (L+1, obs_dim)
    actions: np.ndarray  # (L, act_dim)
    rewards: np.ndarray  # (L,)
    dones: np.ndarray    # (L,) bool
    mask: np.ndarray     # (L,) in {0, 1}

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass
class Window:
    start: int
    horizon: int
    states: np.ndarray   # (n+1, obs_dim)
    actions: np.ndarray  # (n, act_dim)
    rewards: np.ndarray  # (n,)
    dones: np.ndarray    # (n,)
    mask: np.ndarray     # (n,)


@dataclass
class WindowBatch:
    """Padded batch of windows. Positions ``i >= horizon[k]`` are padding."""

    segment_ids: np.ndarray  # (B,)
    starts: np.ndarray       # (B,)
    horizons: np.ndarray     # (B,)
    states: np.ndarray       # (B, n_pad+1, obs_dim)
    actions: np.ndarray      # (B, n_pad, act_dim)
    rewards: np.ndarray      # (B, n_pad)
    dones: np.ndarray        # (B, n_pad)
    mask: np.ndarray         # (B, n_pad), segment mask, zero on padding

    def __len__(self) -> int:
        return self.starts.shape[0]

    def __getitem__(self, k: int) -> Window:
        n = int(self.horizons[k])
        return Window(
            start=int(self.starts[k]),
            horizon=n,
            states=self.states[k, : n + 1].copy(),
            actions=self.actions[k, :n].copy(),
            rewards=self.rewards[k, :n].copy(),
            dones=self.dones[k, :n].copy(),
            mask=self.mask[k, :n].copy(),
        )

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def valid(self) -> np.ndarray:
        """Position is inside the window and not masked by a terminal."""
        pos = np.arange(self.rewards.shape[1])[None, :]
        return (pos < self.horizons[:, None]) & (self.mask > 0)


class _SegmentWriter:
    def __init__(self, length: int, obs_dim: int, act_dim: int):
        self.length = length
        self.states = np.zeros((length + 1, obs_dim))
        self.actions = np.zeros((length, act_dim))
        self.rewards = np.zeros(length)
        self.dones = np.zeros(length, dtype=bool)
        self.cursor = 0

    def push(self, s, a, r, done, s_next) -> Segment | None:
        k = self.cursor
        self.states[k] = s
        self.actions[k] = a
        self.rewards[k] = r
        self.dones[k] = bool(done)
        self.states[k + 1] = s_next
        self.cursor += 1
        if self.cursor < self.length:
            return None
        seg = Segment(
            states=self.states.copy(),
            actions=self.actions.copy(),
            rewards=self.rewards.copy(),
            dones=self.dones.copy(),
            mask=mask_from_dones(self.dones),
        )
        self.cursor = 0
        return seg


class ReplayBuffer:
    """FIFO store of committed segments.

    ``streams`` independent writers let several environment instances feed
    the same buffer; each keeps its own open segment.
    """

    def __init__(self, capacity_segments: int, segment_length: int, obs_dim: int,
                 act_dim: int, streams: int = 1):
        if capacity_segments < 1 or segment_length < 1:
            raise ValueError("capacity_segments and segment_length must be >= 1")
        self.capacity = capacity_segments
        self.segment_length = L = segment_length
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.states = np.zeros((capacity_segments, L + 1, obs_dim))
        self.actions = np.zeros((capacity_segments, L, act_dim))
        self.rewards = np.zeros((capacity_segments, L))
        self.dones = np.zeros((capacity_segments, L), dtype=bool)
        self.mask = np.zeros((capacity_segments, L))
        self.sample_counts = np.zeros((capacity_segments, L), dtype=np.int64)
        self.write_cursor = 0
        self.size = 0
        self.committed = 0
        self._writers = [_SegmentWriter(L, obs_dim, act_dim) for _ in range(streams)]

    def __len__(self) -> int:
        return self.size

    def append_transition(self, s, a, r, done, s_next, stream: int = 0) -> Segment | None:
        s = np.asarray(s, dtype=np.float64)
        s_next = np.asarray(s_next, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        if s.shape != (self.obs_dim,) or s_next.shape != (self.obs_dim,):
            raise ValueError(f"state shape {s.shape}/{s_next.shape} != ({self.obs_dim},)")
        if a.shape != (self.act_dim,):
            raise ValueError(f"action shape {a.shape} != ({self.act_dim},)")
        seg = self._writers[stream].push(s, a, float(r), done, s_next)
        if seg is not None:
            self.add_segment(seg)
        return seg

    def add_segment(self, seg: Segment) -> int:
        i = self.write_cursor
        self.states[i] = seg.states
        self.actions[i] = seg.actions
        self.rewards[i] = seg.rewards
        self.dones[i] = seg.dones
        self.mask[i] = seg.mask
        self.sample_counts[i] = 0
        self.write_cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.committed += 1
        return i

    def segment(self, i: int) -> Segment:
        return Segment(self.states[i].copy(), self.actions[i].copy(), self.rewards[i].copy(),
                       self.dones[i].copy(), self.mask[i].copy())

    def recent_segment_ids(self, count: int) -> np.ndarray:
        """Storage indices of the ``count`` most recently committed segments."""
        count = min(count, self.size)
        return (self.write_cursor - 1 - np.arange(count)) % self.capacity

    # sampling -----------------------------------------------------------

    def _check_bounds(self, l_min: int, l_max: int):
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if not 1 <= l_min <= l_max <= self.segment_length:
            raise ValueError(
                f"need 1 <= l_min <= l_max <= L, got l_min={l_min}, l_max={l_max}, L={self.segment_length}")

    def sample_segment_ids(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(self.size, size=batch_size)

    def draw_starts_horizons(self, batch_size: int, l_min: int, l_max: int,
                             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Start uniform over ``0..L-1``, length uniform, then truncate at the segment end."""
        L = self.segment_length
        starts = rng.integers(L, size=batch_size)
        lengths = rng.integers(l_min, l_max + 1, size=batch_size)
        return starts, np.minimum(lengths, L - starts)

    def windows_from_segments(self, segment_ids: np.ndarray, l_min: int, l_max: int,
                              rng: np.random.Generator, pad_to: int | None = None) -> WindowBatch:
        self._check_bounds(l_min, l_max)
        segment_ids = np.asarray(segment_ids)
        B = segment_ids.shape[0]
        starts, horizons = self.draw_starts_horizons(B, l_min, l_max, rng)
        n_pad = pad_to if pad_to is not None else int(horizons.max())
        pos = np.arange(n_pad)[None, :]
        inside = pos < horizons[:, None]
        # clamp padded indices into the segment; padding is masked out below
        idx = np.minimum(starts[:, None] + pos, self.segment_length - 1)
        sidx = np.minimum(starts[:, None] + np.arange(n_pad + 1)[None, :], self.segment_length)
        seg = segment_ids[:, None]
        np.add.at(self.sample_counts, (np.broadcast_to(seg, idx.shape)[inside], idx[inside]), 1)
        return WindowBatch(
            segment_ids=segment_ids.copy(),
            starts=starts,
            horizons=horizons,
            states=self.states[seg, sidx],
            actions=self.actions[seg, idx],
            rewards=np.where(inside, self.rewards[seg, idx], 0.0),
            dones=np.where(inside, self.dones[seg, idx], False),
            mask=np.where(inside, self.mask[seg, idx], 0.0),
        )

    def sample_windows(self, batch_size: int, l_min: int, l_max: int,
                       rng: np.random.Generator) -> WindowBatch:
        """Draw ``batch_size`` windows: segment, then start, then horizon."""
        self._check_bounds(l_min, l_max)
        return self.windows_from_segments(self.sample_segment_ids(batch_size, rng), l_min, l_max, rng)

    def sample_states(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw of states at valid (mask = 1) positions."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        out = np.empty((batch_size, self.obs_dim))
        filled = 0
        while filled < batch_size:
            k = batch_size - filled
            seg = rng.integers(self.size, size=k)
            pos = rng.integers(self.segment_length, size=k)
            ok = self.mask[seg, pos] > 0
            take = int(ok.sum())
            out[filled:filled + take] = self.states[seg[ok], pos[ok]]
            filled += take
        return out

    def unsampled_fraction(self, segment_ids=None) -> float:
        """Share of valid transitions in ``segment_ids`` never covered by a sampled window."""
        ids = np.arange(self.size) if segment_ids is None else np.asarray(segment_ids)
        valid = self.mask[ids] > 0
        if not valid.any():
            return 0.0
        return float(((self.sample_counts[ids] == 0) & valid).sum() / valid.sum())


# dump / restore -----------------------------------------------------------

def dump_segments(path, segments: list[Segment]) -> None:
    """Write segments as a text table, one row per segment.

    Columns: states row-major ``(L+1)*obs_dim``, actions row-major
    ``L*act_dim``, rewards ``L``, dones ``L`` (0/1), mask ``L``. The header
    line records ``L``, ``obs_dim`` and ``act_dim``.
    """
    if not segments:
        raise ValueError("nothing to dump")
    L = len(segments[0])
    obs_dim = segments[0].states.shape[1]
    act_dim = segments[0].actions.shape[1]
    rows = [np.concatenate([s.states.ravel(), s.actions.ravel(), s.rewards,
                            s.dones.astype(np.float64), s.mask]) for s in segments]
    header = f"L={L} obs_dim={obs_dim} act_dim={act_dim}"
    np.savetxt(Path(path), np.vstack(rows), header=header, fmt="%.17g")


def load_segments(path) -> list[Segment]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().lstrip("#").split()
    meta = dict(item.split("=") for item in header)
    L, obs_dim, act_dim = int(meta["L"]), int(meta["obs_dim"]), int(meta["act_dim"])
    table = np.atleast_2d(np.loadtxt(path))
    widths = [(L + 1) * obs_dim, L * act_dim, L, L, L]
    if table.shape[1] != sum(widths):
        raise ValueError(f"{path}: expected {sum(widths)} columns, found {table.shape[1]}")
    cuts = np.cumsum(widths)[:-1]
    out = []
    for row in table:
        st, ac, rw, dn, mk = np.split(row, cuts)
        out.append(Segment(st.reshape(L + 1, obs_dim), ac.reshape(L, act_dim), rw,
                           dn.astype(bool), mk))
    return out

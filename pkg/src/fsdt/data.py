"""Trajectories, returns-to-go, context windows and client-side sharding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def compute_returns_to_go(rewards) -> np.ndarray:
    """Suffix sums: output[t] = sum of rewards from t to the end."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a nonempty 1-d sequence")
    return np.cumsum(r[::-1])[::-1].copy()


@dataclass
class Trajectory:
    """One complete episode; returns-to-go are derived at construction."""

    type_id: str
    states: np.ndarray   # (T, d)
    actions: np.ndarray  # (T, b)
    rewards: np.ndarray  # (T,)
    rtg: np.ndarray = field(init=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        T = len(self.rewards)
        if self.states.shape[0] != T or self.actions.shape[0] != T:
            raise ValueError("states, actions and rewards must share a length")
        self.rtg = compute_returns_to_go(self.rewards)

    @property
    def length(self) -> int:
        return len(self.rewards)


@dataclass
class ContextWindow:
    """Left-padded view of the last h timesteps ending at some t.

    The action at the final real position is the prediction target and
    is zeroed in the input. A full window carries exactly
    d*h + b*h + h real-content scalars (states, actions, returns-to-go).
    """

    rtg: np.ndarray        # (h,)
    states: np.ndarray     # (h, d)
    actions: np.ndarray    # (h, b), input view
    timesteps: np.ndarray  # (h,) int64
    mask: np.ndarray       # (h,) bool, False marks left padding

    @property
    def length(self) -> int:
        return len(self.mask)

    def real_scalar_count(self) -> int:
        """Number of real-content input scalars (the Q = d*h + b*h + h contract)."""
        n = int(self.mask.sum())
        d = self.states.shape[1]
        b = self.actions.shape[1]
        return n * (d + b + 1)


def build_window(rtg, states, actions, t: int, h: int) -> ContextWindow:
    """Window covering timesteps max(0, t-h+1)..t, zero-left-padded to h."""
    rtg = np.asarray(rtg, dtype=np.float64)
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    T = len(rtg)
    if not 0 <= t < T:
        raise IndexError(f"timestep {t} outside [0, {T})")
    if h < 1:
        raise ValueError("window length must be >= 1")
    lo = t - h + 1
    pad = max(0, -lo)
    lo = max(0, lo)
    d, b = states.shape[1], actions.shape[1]
    w_rtg = np.zeros(h)
    w_states = np.zeros((h, d))
    w_actions = np.zeros((h, b))
    w_t = np.zeros(h, dtype=np.int64)
    w_mask = np.zeros(h, dtype=bool)
    w_rtg[pad:] = rtg[lo:t + 1]
    w_states[pad:] = states[lo:t + 1]
    w_actions[pad:] = actions[lo:t + 1]
    w_actions[h - 1] = 0.0  # prediction slot: the current action is the target
    w_t[pad:] = np.arange(lo, t + 1)
    w_mask[pad:] = True
    return ContextWindow(w_rtg, w_states, w_actions, w_t, w_mask)


def window(traj: Trajectory, t: int, h: int) -> ContextWindow:
    return build_window(traj.rtg, traj.states, traj.actions, t, h)


def window_targets(traj: Trajectory, t: int, h: int) -> np.ndarray:
    """(h, b) target actions aligned with window(traj, t, h); padding rows are zero."""
    lo = max(0, t - h + 1)
    pad = h - (t - lo + 1)
    out = np.zeros((h, traj.actions.shape[1]))
    out[pad:] = traj.actions[lo:t + 1]
    return out


@dataclass
class ClientShard:
    """The slice of one type's dataset owned by a single client."""

    type_id: str
    client_index: int
    trajectories: list[Trajectory]
    tiers: list

    def __len__(self) -> int:
        return len(self.trajectories)

    def tier_counts(self) -> dict:
        counts: dict = {}
        for tier in self.tiers:
            counts[tier] = counts.get(tier, 0) + 1
        return counts


@dataclass
class TypeDataset:
    """All offline trajectories of one agent type, with tier labels."""

    type_id: str
    trajectories: list[Trajectory]
    tiers: list

    def __len__(self) -> int:
        return len(self.trajectories)


def partition_iid(dataset: TypeDataset, n_clients: int, seed: int) -> list[ClientShard]:
    """Split a dataset into disjoint shards of near-equal size and tier mix.

    Each tier is shuffled independently and dealt round-robin, with the
    dealing position carried across tiers, so shard sizes differ by at
    most one overall and by at most one within every tier.
    """
    from .rng import substream

    if n_clients < 1:
        raise ValueError("need at least one client")
    if len(dataset) < n_clients:
        raise ValueError(f"{len(dataset)} trajectories cannot cover {n_clients} clients")
    by_tier: dict = {}
    for i, tier in enumerate(dataset.tiers):
        by_tier.setdefault(tier, []).append(i)
    rng = substream(seed, "partition", dataset.type_id)
    assigned: list[list[int]] = [[] for _ in range(n_clients)]
    pos = 0
    for tier in sorted(by_tier, key=repr):
        idx = np.array(by_tier[tier])
        rng.shuffle(idx)
        for i in idx:
            assigned[pos % n_clients].append(int(i))
            pos += 1
    return [
        ClientShard(
            dataset.type_id,
            c,
            [dataset.trajectories[i] for i in ids],
            [dataset.tiers[i] for i in ids],
        )
        for c, ids in enumerate(assigned)
    ]


@dataclass
class WindowBatch:
    """Stacked context windows plus aligned prediction targets."""

    rtg: np.ndarray        # (B, h)
    states: np.ndarray     # (B, h, d)
    actions: np.ndarray    # (B, h, b)
    timesteps: np.ndarray  # (B, h)
    mask: np.ndarray       # (B, h) float64 in {0, 1}
    targets: np.ndarray    # (B, h, b)

    @property
    def size(self) -> int:
        return self.rtg.shape[0]

    @property
    def context_len(self) -> int:
        return self.rtg.shape[1]


def sample_batch(shard: ClientShard, batch_size: int, h: int, rng) -> list[tuple[ContextWindow, np.ndarray]]:
    """Uniform draws over (trajectory, timestep) pairs, paired with targets."""
    if len(shard) == 0:
        raise ValueError("cannot sample from an empty shard")
    out = []
    for _ in range(batch_size):
        ti = int(rng.integers(len(shard)))
        traj = shard.trajectories[ti]
        t = int(rng.integers(traj.length))
        out.append((window(traj, t, h), window_targets(traj, t, h)))
    return out


def collate(samples) -> WindowBatch:
    windows = [w for w, _ in samples]
    targets = np.stack([tg for _, tg in samples])
    return WindowBatch(
        rtg=np.stack([w.rtg for w in windows]),
        states=np.stack([w.states for w in windows]),
        actions=np.stack([w.actions for w in windows]),
        timesteps=np.stack([w.timesteps for w in windows]),
        mask=np.stack([w.mask for w in windows]).astype(np.float64),
        targets=targets,
    )

"""Heterogeneous linear-quadratic control environments and offline datasets.

Three agent types of increasing state/action dimensionality stand in
for physics simulators: discretized point-mass chains with a mild
anti-damping drift, so that doing nothing is costly and the LQR expert
is clearly better than noise. Scripted policies derived from the LQR
gain synthesize offline datasets in three quality tiers.
"""
from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Trajectory, TypeDataset
from .rng import substream

DATASET_MAGIC = b"FSDT"
DATASET_VERSION = 1


class DatasetTier(enum.Enum):
    """Offline data quality levels."""

    EXPERT = 1
    MEDIUM = 2
    REPLAY = 3


class RiccatiError(ValueError):
    """The Riccati fixed-point iteration failed to converge."""


def _check_spd(mat: np.ndarray, name: str) -> None:
    if not np.allclose(mat, mat.T):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None


@dataclass(frozen=True)
class AgentTypeSpec:
    """One agent category: dynamics, costs and episode settings."""

    type_id: str
    A: np.ndarray
    B: np.ndarray
    Qcost: np.ndarray
    Rcost: np.ndarray
    noise_std: float = 0.05
    horizon: int = 50
    action_bound: float = 3.0
    state_bound: float = 6.0
    gain: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        Q = np.atleast_2d(np.asarray(self.Qcost, dtype=np.float64))
        R = np.atleast_2d(np.asarray(self.Rcost, dtype=np.float64))
        d, b = B.shape
        if A.shape != (d, d) or Q.shape != (d, d) or R.shape != (b, b):
            raise ValueError("inconsistent dynamics/cost matrix shapes")
        if d < 1 or b < 1:
            raise ValueError("state and action dimensions must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        _check_spd(Q, "Qcost")
        _check_spd(R, "Rcost")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Qcost", Q)
        object.__setattr__(self, "Rcost", R)
        object.__setattr__(self, "gain", solve_lqr(self))
        closed = A - B @ self.gain
        radius = np.max(np.abs(np.linalg.eigvals(closed)))
        if radius >= 1.0:
            raise ValueError(f"closed loop unstable for {self.type_id!r}: spectral radius {radius:.4f}")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def action_dim(self) -> int:
        return self.B.shape[1]


@dataclass
class EnvState:
    s: np.ndarray
    t: int


def solve_lqr(spec) -> np.ndarray:
    """Infinite-horizon discrete LQR gain via Riccati fixed-point iteration.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA until the max-abs
    change drops below 1e-10, solving the inner system by Cholesky and
    re-symmetrizing each iterate to suppress drift.
    """
    A = np.atleast_2d(np.asarray(spec.A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(spec.B, dtype=np.float64))
    Q = np.atleast_2d(np.asarray(spec.Qcost, dtype=np.float64))
    R = np.atleast_2d(np.asarray(spec.Rcost, dtype=np.float64))
    P = Q.copy()
    for iteration in range(10_000):
        BtP = B.T @ P
        factor = cho_factor(R + BtP @ B)
        K = cho_solve(factor, BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > 1e100:
            raise RiccatiError(f"Riccati iteration diverged after {iteration + 1} iterations")
        if np.max(np.abs(P_next - P)) < 1e-10:
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiError("Riccati iteration did not converge within 10000 iterations")
    BtP = B.T @ P
    return cho_solve(cho_factor(R + BtP @ B), BtP @ A)


def riccati_residual(spec, P: np.ndarray) -> float:
    """Max-abs defect of P under one application of the Riccati map."""
    A, B, Q, R = spec.A, spec.B, spec.Qcost, spec.Rcost
    BtP = B.T @ P
    K = cho_solve(cho_factor(R + BtP @ B), BtP @ A)
    return float(np.max(np.abs(Q + A.T @ P @ A - A.T @ P @ B @ K - P)))


def riccati_solution(spec) -> np.ndarray:
    """The converged cost-to-go matrix P (for residual checks)."""
    A, B, Q, R = spec.A, spec.B, spec.Qcost, spec.Rcost
    P = Q.copy()
    for _ in range(10_000):
        BtP = B.T @ P
        K = cho_solve(cho_factor(R + BtP @ B), BtP @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if np.max(np.abs(P_next - P)) < 1e-10:
            return P_next
        P = P_next
    raise RiccatiError("Riccati iteration did not converge within 10000 iterations")


def initial_state(spec: AgentTypeSpec, rng) -> EnvState:
    """Standard normal draw rejected until it lands in the unit ball."""
    while True:
        s = rng.standard_normal(spec.state_dim)
        if np.linalg.norm(s) <= 1.0:
            return EnvState(s=s, t=0)


def step(spec: AgentTypeSpec, state: EnvState, action, rng) -> tuple[EnvState, float]:
    """Advance one timestep: s' = A s + B clamp(a) + noise, quadratic cost reward.

    States saturate at +-state_bound, the environment's physical range;
    rewards are the exact quadratic cost of the realized state/action.
    """
    if state.t >= spec.horizon:
        raise RuntimeError(f"episode already terminal at t={state.t}")
    a = np.clip(np.asarray(action, dtype=np.float64), -spec.action_bound, spec.action_bound)
    if not np.all(np.isfinite(a)):
        raise ValueError("action must be finite")
    s = state.s
    reward = -(s @ spec.Qcost @ s + a @ spec.Rcost @ a)
    noise = spec.noise_std * rng.standard_normal(spec.state_dim) if spec.noise_std > 0 else 0.0
    s_next = np.clip(spec.A @ s + spec.B @ a + noise, -spec.state_bound, spec.state_bound)
    return EnvState(s=s_next, t=state.t + 1), float(reward)


def scripted_action(tier: DatasetTier, gain: np.ndarray, s: np.ndarray,
                    rng, action_bound: float) -> np.ndarray:
    """Tiered behaviour policies built on the LQR gain.

    Expert acts -K s; Medium adds Gaussian noise of std 0.5*action_bound;
    Replay takes the Medium action half the time and a uniform action
    otherwise. All outputs are clamped to the action bound.
    """
    expert = -gain @ s
    if tier is DatasetTier.EXPERT:
        a = expert
    elif tier is DatasetTier.MEDIUM:
        a = expert + 0.5 * action_bound * rng.standard_normal(gain.shape[0])
    elif tier is DatasetTier.REPLAY:
        if rng.random() < 0.5:
            a = expert + 0.5 * action_bound * rng.standard_normal(gain.shape[0])
        else:
            a = rng.uniform(-action_bound, action_bound, size=gain.shape[0])
    else:
        raise ValueError(f"unknown tier {tier!r}")
    return np.clip(a, -action_bound, action_bound)


def _run_episode(spec: AgentTypeSpec, policy, rng) -> Trajectory:
    state = initial_state(spec, rng)
    T = spec.horizon
    states = np.zeros((T, spec.state_dim))
    actions = np.zeros((T, spec.action_dim))
    rewards = np.zeros(T)
    for t in range(T):
        a = policy(state.s, rng)
        states[t] = state.s
        state, r = step(spec, state, a, rng)
        actions[t] = np.clip(a, -spec.action_bound, spec.action_bound)
        rewards[t] = r
    return Trajectory(spec.type_id, states, actions, rewards)


def generate_dataset(spec: AgentTypeSpec, tier: DatasetTier, n_episodes: int, seed: int) -> list[Trajectory]:
    """n_episodes scripted rollouts; per-episode RNG streams keep it reproducible."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def policy(s, rng):
        return scripted_action(tier, spec.gain, s, rng, spec.action_bound)

    return [
        _run_episode(spec, policy, substream(seed, "episode", spec.type_id, tier.value, i))
        for i in range(n_episodes)
    ]


def baseline_returns(spec: AgentTypeSpec, n_episodes: int, seed: int) -> tuple[float, float]:
    """(J_random, J_expert): mean returns of uniform-random and LQR policies."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")

    def random_policy(s, rng):
        return rng.uniform(-spec.action_bound, spec.action_bound, size=spec.action_dim)

    def expert_policy(s, rng):
        return np.clip(-spec.gain @ s, -spec.action_bound, spec.action_bound)

    j_random = float(np.mean([
        _run_episode(spec, random_policy, substream(seed, "baseline-random", spec.type_id, i)).rewards.sum()
        for i in range(n_episodes)
    ]))
    j_expert = float(np.mean([
        _run_episode(spec, expert_policy, substream(seed, "baseline-expert", spec.type_id, i)).rewards.sum()
        for i in range(n_episodes)
    ]))
    if j_expert <= j_random:
        raise ValueError(
            f"degenerate spec {spec.type_id!r}: expert return {j_expert:.3f} "
            f"does not beat random {j_random:.3f}"
        )
    return j_random, j_expert


def _lag_chain(n_blocks: int, slow: float, fast: float, coupling: float) -> tuple[np.ndarray, np.ndarray]:
    """First-order lag pairs: each control channel drives one (slow, fast) pair.

    The slow state carries a mild open-loop instability so that doing
    nothing is costly, while real closed-loop eigenvalues keep expert
    rollouts settling monotonically. Neighbouring blocks couple through
    the fast states.
    """
    d = 2 * n_blocks
    A = np.zeros((d, d))
    B = np.zeros((d, n_blocks))
    for i in range(n_blocks):
        p, w = 2 * i, 2 * i + 1
        A[p, p] = slow
        A[p, w] = 0.05
        A[w, w] = fast
        B[p, i] = 0.30
        B[w, i] = 0.45
        if n_blocks > 1:
            A[w, 2 * ((i + 1) % n_blocks)] = coupling
    return A, B


def shipped_specs() -> dict[str, AgentTypeSpec]:
    """The three heterogeneous agent types used throughout the package."""
    specs = {}
    A, B = _lag_chain(1, slow=1.010, fast=0.90, coupling=0.0)
    specs["cart"] = AgentTypeSpec("cart", A, B, np.diag([1.0, 0.3]), 3.0 * np.eye(1), noise_std=0.2)
    A, B = _lag_chain(2, slow=1.015, fast=0.90, coupling=0.02)
    specs["walker"] = AgentTypeSpec("walker", A, B, np.diag([1.0, 0.3] * 2), 3.0 * np.eye(2), noise_std=0.2)
    A, B = _lag_chain(3, slow=1.012, fast=0.90, coupling=0.02)
    specs["hexapod"] = AgentTypeSpec("hexapod", A, B, np.diag([1.0, 0.3] * 3), 3.0 * np.eye(3), noise_std=0.2)
    return specs


def noiseless(spec: AgentTypeSpec, horizon: int | None = None) -> AgentTypeSpec:
    """Copy of a spec with noise removed (and optionally a new horizon)."""
    return replace(spec, noise_std=0.0, horizon=horizon or spec.horizon)


# ---------------------------------------------------------------------------
# dataset files: binary little-endian, one tier per file
# ---------------------------------------------------------------------------

def save_dataset(path, spec: AgentTypeSpec, tier: DatasetTier,
                 trajectories: list[Trajectory], seed: int) -> None:
    """Write trajectories as {header, episodes x (s, a, r) rows} little-endian."""
    d, b, T = spec.state_dim, spec.action_dim, spec.horizon
    buf = io.BytesIO()
    type_bytes = spec.type_id.encode("utf-8")
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<H", DATASET_VERSION))
    buf.write(struct.pack("<B", len(type_bytes)))
    buf.write(type_bytes)
    buf.write(struct.pack("<IIII", d, b, T, len(trajectories)))
    buf.write(struct.pack("<B", tier.value))
    buf.write(struct.pack("<Q", seed))
    for traj in trajectories:
        rows = np.concatenate([traj.states, traj.actions, traj.rewards[:, None]], axis=1)
        buf.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> tuple[dict, list[Trajectory]]:
    """Read a dataset file back into trajectories, validating the header."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    if view.read(4) != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack("<H", view.read(2))
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    (nlen,) = struct.unpack("<B", view.read(1))
    type_id = view.read(nlen).decode("utf-8")
    d, b, T, n_episodes = struct.unpack("<IIII", view.read(16))
    (tier_tag,) = struct.unpack("<B", view.read(1))
    (seed,) = struct.unpack("<Q", view.read(8))
    meta = {
        "type_id": type_id, "d": d, "b": b, "T": T,
        "n_episodes": n_episodes, "tier": DatasetTier(tier_tag), "seed": seed,
    }
    width = d + b + 1
    body = np.frombuffer(view.read(), dtype="<f8")
    if body.size != n_episodes * T * width:
        raise ValueError(f"{path}: payload size does not match header")
    if not np.all(np.isfinite(body)):
        from .autodiff import NumericError
        raise NumericError(f"{path}: dataset contains non-finite values")
    body = body.reshape(n_episodes, T, width)
    trajectories = [
        Trajectory(type_id, ep[:, :d].copy(), ep[:, d:d + b].copy(), ep[:, d + b].copy())
        for ep in body
    ]
    return meta, trajectories


@dataclass
class TypeData:
    """Everything the trainer needs for one agent type."""

    spec: AgentTypeSpec
    dataset: TypeDataset
    j_random: float
    j_expert: float


def build_training_data(specs: dict[str, AgentTypeSpec], episodes_per_tier: int,
                        baseline_episodes: int, seed: int) -> dict[str, TypeData]:
    """Generate tiered datasets plus normalization baselines for every type."""
    out = {}
    for type_id in sorted(specs):
        spec = specs[type_id]
        trajectories: list[Trajectory] = []
        tiers: list[DatasetTier] = []
        for tier in DatasetTier:
            eps = generate_dataset(spec, tier, episodes_per_tier, seed)
            trajectories.extend(eps)
            tiers.extend([tier] * len(eps))
        j_random, j_expert = baseline_returns(spec, baseline_episodes, seed)
        out[type_id] = TypeData(spec, TypeDataset(type_id, trajectories, tiers), j_random, j_expert)
    return out


def write_manifest(path, entries: dict[str, dict]) -> None:
    """Plain-text manifest: per-tier file paths and baseline returns per type."""
    lines = []
    for type_id in sorted(entries):
        info = entries[type_id]
        for tier in DatasetTier:
            lines.append(f"{type_id} {tier.name.lower()} {info['paths'][tier]}")
        lines.append(f"{type_id} baseline {info['j_random']!r} {info['j_expert']!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, dict]:
    entries: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            type_id, kind = parts[0], parts[1]
            info = entries.setdefault(type_id, {"paths": {}})
            if kind == "baseline":
                info["j_random"] = float(parts[2])
                info["j_expert"] = float(parts[3])
            else:
                info["paths"][DatasetTier[kind.upper()]] = parts[2]
    return entries


def load_training_data(manifest_path, specs: dict[str, AgentTypeSpec] | None = None) -> dict[str, TypeData]:
    """Rebuild per-type training bundles from a manifest written by gen-data."""
    import os

    specs = specs or shipped_specs()
    base = os.path.dirname(os.fspath(manifest_path))
    entries = read_manifest(manifest_path)
    out = {}
    for type_id in sorted(entries):
        info = entries[type_id]
        if type_id not in specs:
            raise ValueError(f"manifest references unknown agent type {type_id!r}")
        trajectories: list[Trajectory] = []
        tiers: list[DatasetTier] = []
        for tier in DatasetTier:
            rel = info["paths"][tier]
            path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            _, eps = load_dataset(path)
            trajectories.extend(eps)
            tiers.extend([tier] * len(eps))
        out[type_id] = TypeData(
            specs[type_id], TypeDataset(type_id, trajectories, tiers),
            info["j_random"], info["j_expert"],
        )
    return out

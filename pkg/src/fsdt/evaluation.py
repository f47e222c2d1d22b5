"""Return-conditioned rollouts, normalized scores and experiment drivers."""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .client_models import EmbeddingModel, PredictionModel, embed_batch, eval_action
from .data import build_window, collate
from .envs import AgentTypeSpec, TypeData, build_training_data, shipped_specs, step, initial_state
from .federation import FederationConfig, run
from .rng import substream
from .server_decoder import ServerDecoder


@dataclass
class EvalConfig:
    """How an episode is driven at evaluation time."""

    target_return: float
    episodes: int = 10
    context_len: int = 10
    mode: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not np.isfinite(self.target_return):
            raise ValueError("target_return must be finite")


@dataclass
class RolloutResult:
    total_return: float
    rewards: np.ndarray
    rtg_trace: np.ndarray  # the running conditioning value, length T+1


@dataclass
class ScoreReport:
    type_id: str
    mean_return: float
    normalized_score: float
    std_return: float
    episode_returns: list[float]


def normalized_score(j: float, j_random: float, j_expert: float) -> float:
    """Affine map sending the random baseline to 0 and the expert to 100."""
    if j_expert == j_random:
        raise ValueError("degenerate baselines: expert and random returns coincide")
    return 100.0 * (j - j_random) / (j_expert - j_random)


def rollout(spec: AgentTypeSpec, embedder: EmbeddingModel, server: ServerDecoder,
            predictor: PredictionModel, eval_cfg: EvalConfig, rng,
            action_fn=None) -> RolloutResult:
    """One return-conditioned episode of exactly T environment steps.

    The context holds the last h timesteps of (running target return,
    state, action); the action slot of the current timestep is zero
    until the policy picks one, and the running target decrements by
    each received reward. ``action_fn(state)`` overrides the model
    policy (testing seam).
    """
    if embedder.state_dim != spec.state_dim or predictor.action_dim != spec.action_dim:
        raise ValueError("model dimensions do not match the environment spec")
    T, h = spec.horizon, eval_cfg.context_len
    state = initial_state(spec, rng)
    rtg = float(eval_cfg.target_return)
    rtg_hist = np.zeros(T)
    state_hist = np.zeros((T, spec.state_dim))
    action_hist = np.zeros((T, spec.action_dim))
    rtg_trace = [rtg]
    rewards = np.zeros(T)
    for t in range(T):
        rtg_hist[t] = rtg
        state_hist[t] = state.s
        if action_fn is not None:
            a = np.clip(action_fn(state.s), -spec.action_bound, spec.action_bound)
        else:
            win = build_window(rtg_hist[:t + 1], state_hist[:t + 1], action_hist[:t + 1], t, h)
            batch = collate([(win, np.zeros((h, spec.action_dim)))])
            with ad.no_grad():
                seq = embed_batch(embedder, batch)
                out = server.forward(seq.tokens, seq.mask)
            v_state = out.data[0, 3 * (h - 1) + 1]  # state slot of the current timestep
            a = eval_action(predictor, v_state, eval_cfg.mode, rng, spec.action_bound)
        action_hist[t] = a
        state, r = step(spec, state, a, rng)
        rewards[t] = r
        rtg = rtg - r
        rtg_trace.append(rtg)
    return RolloutResult(float(rewards.sum()), rewards, np.array(rtg_trace))


def _episode_worker(args):
    spec, embedder, server, predictor, eval_cfg, seed_keys = args
    rng = substream(*seed_keys)
    return rollout(spec, embedder, server, predictor, eval_cfg, rng).total_return


def evaluate_models(type_data: TypeData, embedder: EmbeddingModel, server: ServerDecoder,
                    predictor: PredictionModel, config: FederationConfig,
                    eval_round: int = 0, target_return: float | None = None,
                    mode: str = "mean") -> ScoreReport:
    """Score one type's model stack over seeded evaluation episodes.

    Conditioning defaults to the expert-level return. Episodes are
    independent; FSDT_THREADS > 1 runs them concurrently, aggregated by
    episode index either way.
    """
    spec = type_data.spec
    target = type_data.j_expert if target_return is None else target_return
    eval_cfg = EvalConfig(target_return=target, episodes=config.eval_episodes,
                          context_len=config.context_len, mode=mode, seed=config.seed)
    jobs = [
        (spec, embedder, server, predictor, eval_cfg,
         (config.seed, "eval", eval_round, spec.type_id, ep))
        for ep in range(config.eval_episodes)
    ]
    workers = int(os.environ.get("FSDT_THREADS", "1") or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            returns = list(pool.map(_episode_worker, jobs))
    else:
        returns = [_episode_worker(j) for j in jobs]
    mean_return = float(np.mean(returns))
    return ScoreReport(
        type_id=spec.type_id,
        mean_return=mean_return,
        normalized_score=normalized_score(mean_return, type_data.j_random, type_data.j_expert),
        std_return=float(np.std(returns)),
        episode_returns=[float(r) for r in returns],
    )


def evaluate_all(data: dict[str, TypeData], globals_by_type, server: ServerDecoder,
                 config: FederationConfig, eval_round: int = 0) -> dict[str, ScoreReport]:
    return {
        t: evaluate_models(data[t], globals_by_type[t].embedder, server,
                           globals_by_type[t].predictor, config, eval_round=eval_round)
        for t in sorted(data)
    }


def score_series(metrics) -> list[tuple[int, dict[str, float]]]:
    """(round, per-type score) for every evaluated round of a run."""
    out = []
    for m in metrics:
        record = m.to_record() if hasattr(m, "to_record") else m
        if record["scores"] is not None:
            out.append((record["round"], record["scores"]))
    return out


def experiment_rounds(config: FederationConfig, data: dict[str, TypeData]):
    """Train once and report the score-versus-round trajectory."""
    result = run(config, data)
    return result, score_series(result.metrics)


def experiment_context_length(config: FederationConfig, data: dict[str, TypeData],
                              h_values) -> list[dict]:
    """One full training per context length, shared seeds.

    Activation bytes must scale exactly linearly in h (same steps, same
    batch); that proportionality is asserted here, scores are reported
    without judgement.
    """
    rows = []
    for h in h_values:
        if h < 1:
            raise ValueError("context lengths must be >= 1")
        cfg = dataclasses.replace(config, context_len=int(h))
        result = run(cfg, data)
        final_scores = next(m.scores for m in reversed(result.metrics) if m.scores)
        activation_bytes = sum(m.ledger["activations_up"] for m in result.metrics)
        rows.append({
            "h": int(h),
            "mean_score": float(np.mean(list(final_scores.values()))),
            "scores": final_scores,
            "activation_bytes": activation_bytes,
            "total_bytes": result.ledger.total(),
        })
    for a in rows:
        for b in rows:
            if a["activation_bytes"] * b["h"] != b["activation_bytes"] * a["h"]:
                raise AssertionError(
                    f"activation bytes not linear in h: {a['h']}->{a['activation_bytes']}, "
                    f"{b['h']}->{b['activation_bytes']}")
    return rows


def experiment_clients(config: FederationConfig, n_values, episodes_per_tier_per_client: int,
                       seed: int | None = None) -> list[dict]:
    """Score versus client count at fixed per-client data volume.

    Every n must divide evenly over the agent types; the dataset grows
    with n so each client keeps the same shard size.
    """
    specs = shipped_specs()
    seed = config.seed if seed is None else seed
    rows = []
    for n in n_values:
        n = int(n)
        if n % len(specs) != 0:
            raise ValueError(f"{n} clients do not divide evenly over {len(specs)} types")
        per_type = n // len(specs)
        data = build_training_data(specs, episodes_per_tier_per_client * per_type,
                                   config.baseline_episodes, seed)
        cfg = dataclasses.replace(config, n_clients=n)
        result = run(cfg, data)
        final_scores = next(m.scores for m in reversed(result.metrics) if m.scores)
        rows.append({"n_clients": n, "per_type_clients": per_type, "scores": final_scores})
    return rows

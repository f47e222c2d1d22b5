"""Per-client models: token embedding and Gaussian action prediction.

Each client owns an embedding model that lifts (returns-to-go, state,
action) windows into width-D token triplets with an additive learned
timestep embedding, and a prediction head that turns decoder output
tokens into a diagonal-covariance Gaussian over actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowBatch, ContextWindow, collate
from .parameters import ParamModule
from .rng import substream

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class TokenSequence:
    """A (B, L, D) token batch with its per-token validity mask.

    L is always three tokens per timestep in (returns-to-go, state,
    action) order; masked (padded) positions hold zero tokens.
    """

    tokens: Tensor
    mask: np.ndarray  # (B, L) bool
    ctx: object = None  # set by ServerDecoder.decode for the backward pairing

    @property
    def seq_len(self) -> int:
        return self.tokens.data.shape[-2]

    def __len__(self) -> int:
        return self.seq_len


class EmbeddingModel(ParamModule):
    """Affine maps of rtg/state/action into token space plus timestep table."""

    def __init__(self, state_dim: int, action_dim: int, width: int = 128,
                 max_timestep: int = 50, seed=0):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.width = width
        self.max_timestep = max_timestep
        keys = seed if isinstance(seed, tuple) else (seed,)
        self.w_rtg = self._add("w_rtg", ad.linear_init(substream(*keys, "w_rtg"), 1, (1, width)))
        self.b_rtg = self._add("b_rtg", np.zeros(width))
        self.w_state = self._add("w_state", ad.linear_init(substream(*keys, "w_state"), state_dim, (state_dim, width)))
        self.b_state = self._add("b_state", np.zeros(width))
        self.w_action = self._add("w_action", ad.linear_init(substream(*keys, "w_action"), action_dim, (action_dim, width)))
        self.b_action = self._add("b_action", np.zeros(width))
        self.timestep_table = self._add(
            "timestep_table",
            ad.linear_init(substream(*keys, "timestep_table"), max_timestep, (max_timestep, width)),
        )


def embed_batch(model: EmbeddingModel, batch: WindowBatch) -> TokenSequence:
    """Window batch -> (B, 3h, D) tokens in (rtg, state, action) slot order."""
    if batch.states.shape[-1] != model.state_dim or batch.actions.shape[-1] != model.action_dim:
        raise ValueError("window dimensions do not match the embedding model")
    if batch.timesteps.max(initial=0) >= model.max_timestep:
        raise IndexError(f"timestep beyond table size {model.max_timestep}")
    mask_col = batch.mask[:, :, None]
    omega = ad.gather_rows(model.timestep_table, batch.timesteps)
    u_rtg = ad.add(ad.add(ad.matmul(ad._wrap(batch.rtg[:, :, None]), model.w_rtg), model.b_rtg), omega)
    u_state = ad.add(ad.add(ad.matmul(ad._wrap(batch.states), model.w_state), model.b_state), omega)
    u_action = ad.add(ad.add(ad.matmul(ad._wrap(batch.actions), model.w_action), model.b_action), omega)
    u_rtg = ad.mul(u_rtg, mask_col)
    u_state = ad.mul(u_state, mask_col)
    u_action = ad.mul(u_action, mask_col)
    tokens = ad.interleave_rows([u_rtg, u_state, u_action])
    token_mask = np.repeat(batch.mask.astype(bool), 3, axis=1)
    return TokenSequence(tokens=tokens, mask=token_mask)


def embed(model: EmbeddingModel, window: ContextWindow) -> TokenSequence:
    """Single-window convenience wrapper around embed_batch (batch of one)."""
    batch = collate([(window, np.zeros_like(window.actions))])
    return embed_batch(model, batch)


class PredictionModel(ParamModule):
    """Decoder output token -> Gaussian action distribution (diagonal)."""

    def __init__(self, action_dim: int, width: int = 128, seed=0):
        super().__init__()
        self.action_dim = action_dim
        self.width = width
        keys = seed if isinstance(seed, tuple) else (seed,)
        self.w_mu = self._add("w_mu", ad.linear_init(substream(*keys, "w_mu"), width, (width, action_dim)))
        self.b_mu = self._add("b_mu", np.zeros(action_dim))
        self.w_log_sigma = self._add("w_log_sigma", ad.linear_init(substream(*keys, "w_log_sigma"), width, (width, action_dim)))
        self.b_log_sigma = self._add("b_log_sigma", np.zeros(action_dim))


def predict(model: PredictionModel, v) -> tuple[Tensor, Tensor]:
    """Mean and stddev heads; log-sigma clamped to [-5, 2] before exp."""
    t = v if isinstance(v, Tensor) else ad._wrap(np.asarray(v, dtype=np.float64))
    squeeze = t.data.ndim == 1
    if squeeze:
        t = ad.reshape(t, (1, t.data.shape[0]))
    if t.data.shape[-1] != model.width:
        raise ValueError(f"token width {t.data.shape[-1]} does not match head width {model.width}")
    mu = ad.add(ad.matmul(t, model.w_mu), model.b_mu)
    log_sigma = ad.clamp(ad.add(ad.matmul(t, model.w_log_sigma), model.b_log_sigma),
                         LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = ad.exp(log_sigma)
    if squeeze:
        mu = ad.reshape(mu, (model.action_dim,))
        sigma = ad.reshape(sigma, (model.action_dim,))
    return mu, sigma


def action_nll(mu: Tensor, sigma: Tensor, target) -> Tensor:
    """Gaussian negative log likelihood summed over action dimensions.

    Batch/position averaging is the caller's responsibility.
    """
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    diff = ad.sub(ad._wrap(np.asarray(target, dtype=np.float64)), mu)
    quad = ad.div(ad.mul(diff, diff), ad.mul(ad.mul(sigma, sigma), 2.0))
    per_dim = ad.add(ad.add(ad.log(sigma), quad), HALF_LOG_2PI)
    return ad.tsum(per_dim, axis=-1)


def masked_nll(mu: Tensor, sigma: Tensor, targets, mask) -> Tensor:
    """Mean NLL over real (unmasked) positions of a window batch."""
    nll = action_nll(mu, sigma, targets)
    mask = np.asarray(mask, dtype=np.float64)
    denom = float(mask.sum())
    if denom <= 0:
        raise ValueError("batch has no real positions")
    return ad.mul(ad.tsum(ad.mul(nll, mask)), 1.0 / denom)


def eval_action(model: PredictionModel, v, mode: str, rng, action_bound: float) -> np.ndarray:
    """Pick an action from the predicted Gaussian: its mean, or a sample."""
    with ad.no_grad():
        mu, sigma = predict(model, v)
    if mode == "mean":
        a = mu.data
    elif mode == "sample":
        a = mu.data + sigma.data * rng.standard_normal(mu.data.shape)
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    return np.clip(a, -action_bound, action_bound)

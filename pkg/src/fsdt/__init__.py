"""Federated split decision-transformer training on synthetic control tasks."""

from .autodiff import (Adam, NumericError, Tensor, causal_self_attention,
                       grad_check, layer_norm, no_grad, softmax)
from .client_models import (EmbeddingModel, PredictionModel, TokenSequence,
                            action_nll, embed, embed_batch, eval_action, predict)
from .data import (ClientShard, ContextWindow, Trajectory, TypeDataset,
                   WindowBatch, collate, compute_returns_to_go, partition_iid,
                   sample_batch, window)
from .envs import (AgentTypeSpec, DatasetTier, EnvState, TypeData,
                   baseline_returns, build_training_data, generate_dataset,
                   scripted_action, shipped_specs, solve_lqr, step)
from .federation import (ChannelLedger, ClientHandle, ConfigError,
                         FederationConfig, GlobalClientModel, PhaseError,
                         RoundMetrics, RunResult, aggregate_type,
                         distribute_type, expected_round_bytes, local_update,
                         monolithic_step, parameter_breakdown, run, split_step,
                         train_server)
from .evaluation import (EvalConfig, ScoreReport, evaluate_all,
                         evaluate_models, experiment_clients,
                         experiment_context_length, experiment_rounds,
                         normalized_score, rollout)
from .server_decoder import ServerDecoder

__version__ = "0.1.0"

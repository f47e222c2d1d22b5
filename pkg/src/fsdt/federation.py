"""Two-stage federated split training with byte-exact channel accounting.

Every round: (stage 1) each client trains its embedding and prediction
models against the frozen server trunk, same-type clients are averaged
into a per-type global model which is redistributed; (stage 2) the
server trunk trains against the frozen per-type global client models,
cycling batches over types. All simulated client/server messages are
metered to the byte.
"""
from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, check_finite
from .client_models import (EmbeddingModel, PredictionModel, embed_batch,
                            masked_nll, predict)
from .data import ClientShard, collate, partition_iid, sample_batch
from .envs import TypeData
from .parameters import ParamModule
from .rng import substream
from .server_decoder import ServerDecoder

CHECKPOINT_MAGIC = b"FSDTCKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration or config file."""


class PhaseError(RuntimeError):
    """An operation was invoked outside its training stage."""


@dataclass
class FederationConfig:
    """Everything that pins a training run.

    The stock defaults are the desk-scale profile; ``paper_profile``
    switches the round/step/client counts to the full-scale ones.
    """

    rounds: int = 20
    n_clients: int = 6
    local_steps: int = 50
    server_steps: int = 100
    batch_size: int = 8
    context_len: int = 8
    lr_client: float = 1e-4
    lr_server: float = 1e-4
    seed: int = 11
    eval_every: int = 5
    eval_episodes: int = 10
    embed_dim: int = 128
    decoder_layers: int = 3
    decoder_heads: int = 4
    decoder_ff: int = 512
    wire_bytes_per_scalar: int = 8
    episodes_per_tier: int = 60
    baseline_episodes: int = 200
    context_grid: str = "5,10"
    clients_grid: str = "3,6"

    def validate(self) -> None:
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        for name in ("n_clients", "local_steps", "server_steps", "batch_size",
                     "context_len", "eval_every", "eval_episodes", "embed_dim",
                     "decoder_layers", "decoder_heads", "decoder_ff",
                     "episodes_per_tier", "baseline_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.wire_bytes_per_scalar not in (4, 8):
            raise ConfigError("wire_bytes_per_scalar must be 4 or 8")
        if self.lr_client < 0 or self.lr_server < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "FederationConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            default = getattr(cls, key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = bool(value)
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = str(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def paper_profile(cls, **overrides) -> "FederationConfig":
        base = dict(rounds=200, n_clients=30, local_steps=300, server_steps=1000,
                    batch_size=64, episodes_per_tier=300)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_profile(cls, **overrides) -> "FederationConfig":
        return cls(**overrides)


def load_config_file(path) -> FederationConfig:
    """Flat JSON key-value document; unknown keys are an error."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a flat JSON object")
    for key, value in raw.items():
        if isinstance(value, (dict, list)):
            raise ConfigError(f"config key {key!r} must be a scalar (flat document)")
    return FederationConfig.from_dict(raw)


MESSAGE_CLASSES = ("activations_up", "outputs_down", "token_grads_up",
                   "input_grads_down", "params_down", "params_up")


@dataclass
class ChannelLedger:
    """Byte counters for every simulated client/server message class."""

    activations_up: int = 0
    outputs_down: int = 0
    token_grads_up: int = 0
    input_grads_down: int = 0
    params_down: int = 0
    params_up: int = 0

    def add(self, message_class: str, n_scalars: int, bytes_per_scalar: int = 8) -> None:
        if message_class not in MESSAGE_CLASSES:
            raise ValueError(f"unknown message class {message_class!r}")
        if n_scalars < 0:
            raise ValueError("cannot log negative payloads")
        setattr(self, message_class, getattr(self, message_class) + n_scalars * bytes_per_scalar)

    def merge(self, other: "ChannelLedger") -> None:
        for name in MESSAGE_CLASSES:
            setattr(self, name, getattr(self, name) + getattr(other, name))

    def total(self) -> int:
        return sum(getattr(self, name) for name in MESSAGE_CLASSES)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in MESSAGE_CLASSES}


@dataclass
class ClientHandle:
    """One client: its shard, personal models and optimizer state."""

    client_id: int
    type_id: str
    shard: ClientShard
    embedder: EmbeddingModel
    predictor: PredictionModel
    optimizer: Adam | None = None


@dataclass
class GlobalClientModel:
    """Per-type averaged embedding/prediction parameters."""

    type_id: str
    embedder: EmbeddingModel
    predictor: PredictionModel

    def payload_scalars(self) -> int:
        return self.embedder.param_count() + self.predictor.param_count()


@dataclass
class StepTrace:
    """Values exposed by one training step for equivalence checks."""

    loss: float
    activation_grad: np.ndarray  # d loss / d embedding-output tokens
    token_grad: np.ndarray       # d loss / d decoder-output tokens


def split_step(embedder: EmbeddingModel, predictor: PredictionModel,
               server: ServerDecoder, batch, ledger: ChannelLedger | None = None,
               wire_bytes: int = 8) -> StepTrace:
    """One split forward/backward pass with the four per-step messages.

    Client: embed and ship activations. Server: decode and ship output
    tokens. Client: prediction loss, backprop to its head and to the
    received tokens, ship that gradient. Server: backprop to parameter
    and input-token gradients, ship the latter. Client: finish backprop
    into the embedding. Parameter gradients land on the model tensors;
    whether they are applied or discarded is the caller's stage policy.
    """
    seq = embed_batch(embedder, batch)
    check_finite(seq.tokens.data, "activations")
    if ledger is not None:
        ledger.add("activations_up", seq.tokens.data.size, wire_bytes)
    out_seq = server.decode(seq)
    check_finite(out_seq.tokens.data, "decoder outputs")
    if ledger is not None:
        ledger.add("outputs_down", out_seq.tokens.data.size, wire_bytes)
    received = Tensor(out_seq.tokens.data, requires_grad=True)
    state_tokens = ad.stride_rows(received, 1, 3)
    mu, sigma = predict(predictor, state_tokens)
    loss = masked_nll(mu, sigma, batch.targets, batch.mask)
    check_finite(loss.data, "training loss")
    loss.backward()
    token_grad = received.grad.copy()
    if ledger is not None:
        ledger.add("token_grads_up", token_grad.size, wire_bytes)
    grad_in, _ = server.decode_backward(out_seq, token_grad)
    if ledger is not None:
        ledger.add("input_grads_down", grad_in.size, wire_bytes)
    seq.tokens.backward(seed=grad_in)
    return StepTrace(loss=float(loss.data), activation_grad=grad_in, token_grad=token_grad)


def monolithic_step(embedder: EmbeddingModel, predictor: PredictionModel,
                    server: ServerDecoder, batch) -> StepTrace:
    """The centrally composed model on the same batch: one single graph.

    This is the oracle the split pipeline is checked against; no wire
    boundary, no re-wrapped tensors.
    """
    seq = embed_batch(embedder, batch)
    out = server.forward(seq.tokens, seq.mask)
    state_tokens = ad.stride_rows(out, 1, 3)
    mu, sigma = predict(predictor, state_tokens)
    loss = masked_nll(mu, sigma, batch.targets, batch.mask)
    loss.backward()
    return StepTrace(loss=float(loss.data),
                     activation_grad=seq.tokens.grad.copy(),
                     token_grad=out.grad.copy())


def local_update(client: ClientHandle, server: ServerDecoder, steps: int,
                 batch_size: int, context_len: int, rng,
                 ledger: ChannelLedger, wire_bytes: int = 8) -> float:
    """Stage 1 for one client: train E and P against the frozen trunk."""
    if not all(p.frozen for p in server.parameters()):
        raise PhaseError("stage 1 requires a frozen server decoder")
    if client.optimizer is None:
        raise PhaseError("client has no optimizer; distribute a global model first")
    losses = []
    for _ in range(steps):
        batch = collate(sample_batch(client.shard, batch_size, context_len, rng))
        trace = split_step(client.embedder, client.predictor, server, batch,
                           ledger, wire_bytes)
        client.optimizer.step()
        client.optimizer.zero_grad()
        server.zero_grad()  # stage 1 discards the trunk gradients
        losses.append(trace.loss)
    return float(np.mean(losses))


def aggregate_type(clients: list[ClientHandle],
                   ledger: ChannelLedger | None = None,
                   wire_bytes: int = 8) -> GlobalClientModel:
    """Unweighted per-parameter mean over same-type clients.

    Clients are processed in client-id order, so the result is invariant
    to the order of the input list. Optimizer state is not aggregated.
    """
    if not clients:
        raise ValueError("cannot aggregate zero clients")
    type_ids = {c.type_id for c in clients}
    if len(type_ids) != 1:
        raise ValueError(f"cannot aggregate across types: {sorted(type_ids)}")
    ordered = sorted(clients, key=lambda c: c.client_id)
    ref = ordered[0]
    global_model = GlobalClientModel(
        ref.type_id,
        _clone_module(ref.embedder),
        _clone_module(ref.predictor),
    )
    for module_name in ("embedder", "predictor"):
        stacks = [getattr(c, module_name).export_arrays() for c in ordered]
        mean = OrderedDict(
            (name, np.mean(np.stack([s[name] for s in stacks]), axis=0))
            for name in stacks[0]
        )
        getattr(global_model, module_name).load_arrays(mean)
    if ledger is not None:
        ledger.add("params_up", len(ordered) * global_model.payload_scalars(), wire_bytes)
    return global_model


def distribute_type(global_model: GlobalClientModel, clients: list[ClientHandle],
                    lr_client: float, ledger: ChannelLedger | None = None,
                    wire_bytes: int = 8) -> None:
    """Copy the per-type global parameters onto every client.

    Adam moments are reset: only parameters are federated state.
    """
    for client in clients:
        if client.type_id != global_model.type_id:
            raise ValueError(f"client type {client.type_id!r} does not match global "
                             f"model {global_model.type_id!r}")
        client.embedder.load_arrays(global_model.embedder.export_arrays())
        client.predictor.load_arrays(global_model.predictor.export_arrays())
        client.optimizer = Adam(client.embedder.parameters() + client.predictor.parameters(),
                                lr=lr_client)
        if ledger is not None:
            ledger.add("params_down", global_model.payload_scalars(), wire_bytes)


def train_server(server: ServerDecoder, globals_by_type: dict[str, GlobalClientModel],
                 shards_by_type: dict[str, list[ClientShard]], steps: int,
                 batch_size: int, context_len: int, rng, ledger: ChannelLedger,
                 server_optimizer: Adam, wire_bytes: int = 8) -> float:
    """Stage 2: train the trunk against frozen clients, types round-robin."""
    if any(p.frozen for p in server.parameters()):
        raise PhaseError("stage 2 requires an unfrozen server decoder")
    for gm in globals_by_type.values():
        if not all(p.frozen for p in gm.embedder.parameters() + gm.predictor.parameters()):
            raise PhaseError("stage 2 requires frozen client models")
    types = sorted(globals_by_type)
    losses = []
    for step_idx in range(steps):
        type_id = types[step_idx % len(types)]
        shards = shards_by_type[type_id]
        shard = shards[(step_idx // len(types)) % len(shards)]
        batch = collate(sample_batch(shard, batch_size, context_len, rng))
        gm = globals_by_type[type_id]
        trace = split_step(gm.embedder, gm.predictor, server, batch, ledger, wire_bytes)
        server_optimizer.step()
        server_optimizer.zero_grad()
        gm.embedder.zero_grad()  # frozen client grads are discarded
        gm.predictor.zero_grad()
        losses.append(trace.loss)
    return float(np.mean(losses)) if losses else 0.0


def _clone_module(module):
    if isinstance(module, EmbeddingModel):
        clone = EmbeddingModel(module.state_dim, module.action_dim, module.width,
                               module.max_timestep, seed=(0,))
    elif isinstance(module, PredictionModel):
        clone = PredictionModel(module.action_dim, module.width, seed=(0,))
    else:
        raise TypeError(f"cannot clone {type(module)!r}")
    clone.load_arrays(module.export_arrays())
    return clone


def build_global_models(data: dict[str, TypeData], config: FederationConfig) -> dict[str, GlobalClientModel]:
    """Freshly initialized per-type client models (the round-0 state)."""
    out = {}
    for type_id in sorted(data):
        spec = data[type_id].spec
        out[type_id] = GlobalClientModel(
            type_id,
            EmbeddingModel(spec.state_dim, spec.action_dim, config.embed_dim,
                           spec.horizon, seed=(config.seed, "init-embed", type_id)),
            PredictionModel(spec.action_dim, config.embed_dim,
                            seed=(config.seed, "init-predict", type_id)),
        )
    return out


def parameter_breakdown(server: ServerDecoder,
                        globals_by_type: dict[str, GlobalClientModel]) -> dict:
    """Integer parameter counts per component plus the server share."""
    per_type = {
        t: {"embedding": gm.embedder.param_count(), "prediction": gm.predictor.param_count()}
        for t, gm in sorted(globals_by_type.items())
    }
    client_total = sum(v["embedding"] + v["prediction"] for v in per_type.values())
    server_total = server.param_count()
    return {
        "server": server_total,
        "per_type": per_type,
        "client_total": client_total,
        "server_share": server_total / (server_total + client_total),
    }


def expected_round_bytes(config: FederationConfig,
                         globals_by_type: dict[str, GlobalClientModel],
                         clients_per_type: int) -> dict:
    """Closed-form per-round ledger, derived from message shapes alone.

    Each split step moves four messages of batch*3h*D scalars
    (activations up, outputs down, token gradients up, input gradients
    down); each round also distributes and collects every client's
    parameters once.
    """
    wire = config.wire_bytes_per_scalar
    step_payload = config.batch_size * 3 * config.context_len * config.embed_dim * wire
    n_clients = clients_per_type * len(globals_by_type)
    stage1_steps = n_clients * config.local_steps
    stage2_steps = config.server_steps
    per_class_steps = (stage1_steps + stage2_steps) * step_payload
    param_bytes = sum(clients_per_type * gm.payload_scalars() * wire
                      for gm in globals_by_type.values())
    return {
        "activations_up": per_class_steps,
        "outputs_down": per_class_steps,
        "token_grads_up": per_class_steps,
        "input_grads_down": per_class_steps,
        "params_down": param_bytes,
        "params_up": param_bytes,
        "total": 4 * per_class_steps + 2 * param_bytes,
    }


@dataclass
class RoundMetrics:
    round: int
    stage1_loss: dict[str, float]
    stage2_loss: float
    scores: dict[str, float] | None
    ledger: dict[str, int]

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "stage1_loss": dict(sorted(self.stage1_loss.items())),
            "stage2_loss": self.stage2_loss,
            "scores": dict(sorted(self.scores.items())) if self.scores is not None else None,
            "ledger": {k: self.ledger[k] for k in sorted(self.ledger)},
        }


@dataclass
class RunResult:
    config: FederationConfig
    server: ServerDecoder
    globals_by_type: dict[str, GlobalClientModel]
    clients: list[ClientHandle]
    metrics: list[RoundMetrics]
    ledger: ChannelLedger = field(default_factory=ChannelLedger)


def _worker_count() -> int:
    raw = os.environ.get("FSDT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FSDT_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def run(config: FederationConfig, data: dict[str, TypeData],
        on_phase=None) -> RunResult:
    """Drive the full two-stage loop for the configured number of rounds.

    ``on_phase(event, round_idx, state)`` is called at phase boundaries
    ("stage1", "stage2", "round") with a live view of the models, so
    callers can log progress or audit freeze contracts. With
    FSDT_THREADS <= 1 everything runs sequentially and the result is
    bit-reproducible.
    """
    config.validate()
    if not data:
        raise ConfigError("no training data supplied")
    types = sorted(data)
    if config.n_clients % len(types) != 0:
        raise ConfigError(f"{config.n_clients} clients do not divide evenly over {len(types)} types")
    clients_per_type = config.n_clients // len(types)

    server = ServerDecoder(config.embed_dim, config.decoder_layers, config.decoder_heads,
                           config.decoder_ff, seed=(config.seed, "init-server"))
    server_optimizer = Adam(server.parameters(), lr=config.lr_server)
    globals_by_type = build_global_models(data, config)
    for gm in globals_by_type.values():
        gm.embedder.set_frozen(True)
        gm.predictor.set_frozen(True)

    shards_by_type: dict[str, list[ClientShard]] = {}
    clients: list[ClientHandle] = []
    for tindex, type_id in enumerate(types):
        spec = data[type_id].spec
        shards = partition_iid(data[type_id].dataset, clients_per_type, config.seed)
        shards_by_type[type_id] = shards
        for j, shard in enumerate(shards):
            cid = tindex * clients_per_type + j
            clients.append(ClientHandle(
                client_id=cid, type_id=type_id, shard=shard,
                embedder=EmbeddingModel(spec.state_dim, spec.action_dim, config.embed_dim,
                                        spec.horizon, seed=(config.seed, "client-embed", cid)),
                predictor=PredictionModel(spec.action_dim, config.embed_dim,
                                          seed=(config.seed, "client-predict", cid)),
            ))

    workers = _worker_count()
    live = RunResult(config, server, globals_by_type, clients, [])
    metrics: list[RoundMetrics] = []
    total_ledger = ChannelLedger()
    for round_idx in range(1, config.rounds + 1):
        round_ledger = ChannelLedger()
        stage1_loss: dict[str, float] = {}
        # stage 1: clients train, trunk frozen
        server.set_frozen(True)
        if on_phase:
            on_phase("stage1", round_idx, live)
        for type_id in types:
            group = [c for c in clients if c.type_id == type_id]
            distribute_type(globals_by_type[type_id], group, config.lr_client,
                            round_ledger, config.wire_bytes_per_scalar)

            def train_one(client):
                local = ChannelLedger()
                rng = substream(config.seed, "round", round_idx, "client", client.client_id)
                loss = local_update(client, server, config.local_steps, config.batch_size,
                                    config.context_len, rng, local, config.wire_bytes_per_scalar)
                return client.client_id, loss, local

            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(train_one, group))
            else:
                results = [train_one(c) for c in group]
            results.sort(key=lambda r: r[0])  # reduce in client-id order
            for _, _, local in results:
                round_ledger.merge(local)
            stage1_loss[type_id] = float(np.mean([loss for _, loss, _ in results]))
            new_global = aggregate_type(group, round_ledger, config.wire_bytes_per_scalar)
            new_global.embedder.set_frozen(True)
            new_global.predictor.set_frozen(True)
            globals_by_type[type_id] = new_global
        # stage 2: trunk trains, clients frozen
        server.set_frozen(False)
        if on_phase:
            on_phase("stage2", round_idx, live)
        rng = substream(config.seed, "round", round_idx, "server")
        stage2_loss = train_server(server, globals_by_type, shards_by_type,
                                   config.server_steps, config.batch_size,
                                   config.context_len, rng, round_ledger,
                                   server_optimizer, config.wire_bytes_per_scalar)
        server.set_frozen(True)

        scores = None
        if round_idx == 1 or round_idx % config.eval_every == 0 or round_idx == config.rounds:
            from .evaluation import evaluate_models
            scores = {
                t: evaluate_models(data[t], globals_by_type[t].embedder, server,
                                   globals_by_type[t].predictor, config,
                                   eval_round=round_idx).normalized_score
                for t in types
            }
        metrics.append(RoundMetrics(round_idx, stage1_loss, stage2_loss, scores,
                                    round_ledger.as_dict()))
        total_ledger.merge(round_ledger)
        if on_phase:
            on_phase("round", round_idx, live)
    return RunResult(config, server, globals_by_type, clients, metrics, total_ledger)


# ---------------------------------------------------------------------------
# metrics and checkpoint files
# ---------------------------------------------------------------------------

def write_metrics(path, metrics: list[RoundMetrics]) -> None:
    """Line-delimited JSON, one record per round, canonical key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_record(), sort_keys=True) + "\n")


def run_manifest(result: RunResult) -> dict:
    """Summary of a finished run: config echo, shard makeup, parameters."""
    shards = {}
    for client in result.clients:
        counts = {tier.name.lower() if hasattr(tier, "name") else str(tier): n
                  for tier, n in sorted(client.shard.tier_counts().items(), key=lambda kv: repr(kv[0]))}
        shards[str(client.client_id)] = {
            "type": client.type_id,
            "episodes": len(client.shard),
            "tiers": counts,
        }
    return {
        "config": result.config.to_dict(),
        "rounds_completed": len(result.metrics),
        "clients": shards,
        "parameters": parameter_breakdown(result.server, result.globals_by_type),
        "total_bytes": result.ledger.total(),
    }


def write_run_manifest(path, result: RunResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_manifest(result), fh, sort_keys=True, indent=2)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_section(buf, name: str, payload: bytes) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def _param_block(module: ParamModule) -> bytes:
    buf = io.BytesIO()
    named = module.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name, p in named.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", p.data.ndim))
        for extent in p.data.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def _read_param_block(payload: bytes) -> OrderedDict:
    view = io.BytesIO(payload)
    (count,) = struct.unpack("<I", view.read(4))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", view.read(2))
        name = view.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", view.read(1))
        shape = tuple(struct.unpack("<I", view.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view.read(8 * n), dtype="<f8").reshape(shape).copy()
        out[name] = arr
    return out


def save_checkpoint(path, result: RunResult) -> None:
    """Sectioned binary checkpoint: config echo, trunk, per-type globals, RNG."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    sections: list[tuple[str, bytes]] = []
    sections.append(("config", json.dumps(result.config.to_dict(), sort_keys=True).encode("utf-8")))
    sections.append(("server", _param_block(result.server)))
    for type_id in sorted(result.globals_by_type):
        gm = result.globals_by_type[type_id]
        sections.append((f"client-embed:{type_id}", _param_block(gm.embedder)))
        sections.append((f"client-predict:{type_id}", _param_block(gm.predictor)))
    rng_state = {"seed": result.config.seed, "completed_rounds": len(result.metrics)}
    sections.append(("rng", json.dumps(rng_state, sort_keys=True).encode("utf-8")))
    buf.write(struct.pack("<I", len(sections)))
    for name, payload in sections:
        _write_section(buf, name, payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, data: dict[str, TypeData]) -> RunResult:
    """Rebuild the trunk and per-type global models from a checkpoint."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = io.BytesIO(raw)
    if view.read(8) != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<H", view.read(2))
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (n_sections,) = struct.unpack("<I", view.read(4))
    sections: dict[str, bytes] = {}
    for _ in range(n_sections):
        (nlen,) = struct.unpack("<H", view.read(2))
        name = view.read(nlen).decode("utf-8")
        (plen,) = struct.unpack("<Q", view.read(8))
        sections[name] = view.read(plen)
    config = FederationConfig.from_dict(json.loads(sections["config"].decode("utf-8")))
    server = ServerDecoder(config.embed_dim, config.decoder_layers, config.decoder_heads,
                           config.decoder_ff, seed=(config.seed, "init-server"))
    server.load_arrays(_read_param_block(sections["server"]))
    globals_by_type = build_global_models(data, config)
    for type_id, gm in globals_by_type.items():
        gm.embedder.load_arrays(_read_param_block(sections[f"client-embed:{type_id}"]))
        gm.predictor.load_arrays(_read_param_block(sections[f"client-predict:{type_id}"]))
        gm.embedder.set_frozen(True)
        gm.predictor.set_frozen(True)
    rng_state = json.loads(sections["rng"].decode("utf-8"))
    metrics = [None] * rng_state["completed_rounds"]
    return RunResult(config, server, globals_by_type, [], metrics)

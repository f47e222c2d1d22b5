#!/usr/bin/env python3
"""A compact federated run end to end, scores and bytes included.

Three agent types, two clients each, a few two-stage rounds with a
smaller trunk so the demo finishes in about a minute. The full-size
desk profile is FederationConfig() and `fsdt train` on the CLI.
"""
import time

from fsdt import build_training_data, shipped_specs
from fsdt.evaluation import evaluate_all
from fsdt.federation import (FederationConfig, build_global_models,
                             parameter_breakdown, run)
from fsdt.server_decoder import ServerDecoder

config = FederationConfig(rounds=4, n_clients=6, local_steps=15, server_steps=30,
                          batch_size=8, context_len=8, eval_every=2, eval_episodes=5,
                          embed_dim=64, decoder_layers=2, decoder_heads=4,
                          decoder_ff=128, lr_client=1e-3, lr_server=1e-3, seed=11)

print("== generating tiered offline data ==")
data = build_training_data(shipped_specs(), episodes_per_tier=20,
                           baseline_episodes=50, seed=config.seed)
for t, d in sorted(data.items()):
    print(f"{t}: {len(d.dataset)} episodes, J_random {d.j_random:.1f}, J_expert {d.j_expert:.1f}")

print("\n== untrained baseline ==")
server0 = ServerDecoder(config.embed_dim, config.decoder_layers, config.decoder_heads,
                        config.decoder_ff, seed=(config.seed, "init-server"))
fresh = build_global_models(data, config)
for t, rep in evaluate_all(data, fresh, server0, config).items():
    print(f"{t}: normalized score {rep.normalized_score:6.1f}")

print("\n== training ==")
t0 = time.time()


def progress(event, round_idx, state):
    if event == "round":
        print(f"  round {round_idx}/{config.rounds} done ({time.time() - t0:.0f}s)")


result = run(config, data, on_phase=progress)

print("\n== score trajectory (per evaluation round) ==")
for m in result.metrics:
    if m.scores:
        line = "  ".join(f"{t}={s:6.1f}" for t, s in sorted(m.scores.items()))
        print(f"round {m.round:2d}: {line}")

print("\n== where the parameters and the bytes went ==")
breakdown = parameter_breakdown(result.server, result.globals_by_type)
print(f"server trunk holds {100 * breakdown['server_share']:.1f}% of all parameters")
for cls, nbytes in result.ledger.as_dict().items():
    print(f"  {cls:18s} {nbytes / 1e6:8.2f} MB")
print(f"  total              {result.ledger.total() / 1e6:8.2f} MB over {config.rounds} rounds")

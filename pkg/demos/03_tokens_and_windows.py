#!/usr/bin/env python3
"""From trajectories to token sequences.

A trajectory becomes (returns-to-go, state, action) triplets; a length-h
context window of it carries d*h + b*h + h real input scalars; the
client embedding lifts each window into 3h width-D tokens that the
server trunk consumes without knowing the agent type.
"""
from fsdt import envs
from fsdt.client_models import EmbeddingModel, embed
from fsdt.data import compute_returns_to_go, window
from fsdt.server_decoder import ServerDecoder

print("== returns-to-go are suffix sums ==")
rewards = [-1.0, -2.0, -0.5, -3.0]
print(f"rewards {rewards} -> rtg {compute_returns_to_go(rewards).tolist()}")

print("\n== context windows ==")
spec = envs.shipped_specs()["walker"]
traj = envs.generate_dataset(spec, envs.DatasetTier.EXPERT, 1, seed=11)[0]
h = 6
w_start = window(traj, 1, h)
w_mid = window(traj, 20, h)
print(f"window at t=1 (episode start): mask {w_start.mask.astype(int).tolist()} "
      f"(left padding), timesteps {w_start.timesteps.tolist()}")
print(f"window at t=20: timesteps {w_mid.timesteps.tolist()}, no padding")
d, b = spec.state_dim, spec.action_dim
print(f"input-size contract: {w_mid.real_scalar_count()} real scalars "
      f"== d*h + b*h + h = {d * h + b * h + h}")
print(f"current action zeroed in the input (it is the target): {w_mid.actions[-1].tolist()}")

print("\n== embedding to tokens ==")
E = EmbeddingModel(d, b, width=128, max_timestep=spec.horizon, seed=(11, "demo"))
seq = embed(E, w_mid)
print(f"window -> {seq.seq_len} tokens of width 128 (3 per timestep, order rtg/state/action)")

print("\n== the type-agnostic trunk consumes any type's tokens ==")
G = ServerDecoder(seed=(11, "demo-g"))
out = G.decode(seq)
print(f"decode keeps shape: {out.tokens.data.shape}, "
      f"parameters in trunk: {G.param_count():,}")
for type_id, s in sorted(envs.shipped_specs().items()):
    E_t = EmbeddingModel(s.state_dim, s.action_dim, 128, s.horizon, seed=(11, type_id))
    t = envs.generate_dataset(s, envs.DatasetTier.MEDIUM, 1, seed=11)[0]
    one = G.decode(embed(E_t, window(t, 10, h)))
    print(f"  {type_id}: tokens {one.tokens.data.shape} -> same trunk, no type branch")

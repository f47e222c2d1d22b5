#!/usr/bin/env python3
"""The three synthetic control tasks and their tiered offline datasets.

Each agent type is a linear system with quadratic costs. The LQR gain
gives an analytic expert; noisier scripted variants of it produce the
medium and replay data tiers, bracketed below by the expert and a
uniform-random baseline.
"""
import os
import tempfile

import numpy as np

from fsdt import envs
from fsdt.rng import substream

specs = envs.shipped_specs()
print("== agent types ==")
for type_id, spec in sorted(specs.items()):
    closed = spec.A - spec.B @ spec.gain
    rho = np.max(np.abs(np.linalg.eigvals(closed)))
    print(f"{type_id}: d={spec.state_dim} b={spec.action_dim} horizon={spec.horizon} "
          f"closed-loop spectral radius {rho:.3f}")

print("\n== tier quality ordering (200 episodes each) ==")
for type_id, spec in sorted(specs.items()):
    means = {tier.name: np.mean([t.rewards.sum()
                                 for t in envs.generate_dataset(spec, tier, 200, seed=11)])
             for tier in envs.DatasetTier}
    j_random, j_expert = envs.baseline_returns(spec, 200, seed=11)
    span = j_expert - j_random
    print(f"{type_id}: expert {means['EXPERT']:8.1f} | medium {means['MEDIUM']:8.1f} | "
          f"replay {means['REPLAY']:8.1f} | random {j_random:8.1f}")
    print(f"         gaps as share of expert-random span: "
          f"{(means['EXPERT'] - means['MEDIUM']) / span:.2f} / "
          f"{(means['MEDIUM'] - means['REPLAY']) / span:.2f} / "
          f"{(means['REPLAY'] - j_random) / span:.2f}")

print("\n== dataset files round-trip byte-for-byte ==")
spec = specs["cart"]
episodes = envs.generate_dataset(spec, envs.DatasetTier.MEDIUM, 5, seed=11)
with tempfile.TemporaryDirectory() as tmp:
    path = os.path.join(tmp, "cart-medium.fsdt")
    envs.save_dataset(path, spec, envs.DatasetTier.MEDIUM, episodes, seed=11)
    meta, loaded = envs.load_dataset(path)
    same = all(np.array_equal(a.states, b.states) for a, b in zip(episodes, loaded))
    print(f"header: {meta['type_id']} tier={meta['tier'].name} episodes={meta['n_episodes']}")
    print(f"payload identical after reload: {same}")

print("\n== the expert settles; noiseless norm trace from a unit-ball start ==")
ns = envs.noiseless(spec)
state = envs.initial_state(ns, substream(11, "demo"))
norms = []
for _ in range(20):
    state, _ = envs.step(ns, state, -ns.gain @ state.s, substream(0))
    norms.append(np.linalg.norm(state.s))
print("||s|| over 20 expert steps:", " ".join(f"{n:.3f}" for n in norms))

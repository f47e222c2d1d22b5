"""Acceptance suite: ten criteria, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s``. Thresholds and seeds
were pinned after a single calibration run (seed 11 throughout) and are
committed here; every tolerance is stated inline.
"""
import dataclasses
import functools
import time

import numpy as np

import fsdt
from fsdt import autodiff as ad
from fsdt import envs
from fsdt.autodiff import Tensor, grad_check
from fsdt.client_models import (EmbeddingModel, PredictionModel,
                                embed_batch, masked_nll, predict)
from fsdt.client_models import TokenSequence
from fsdt.data import ClientShard, WindowBatch, collate, sample_batch
from fsdt.federation import (FederationConfig,
                             aggregate_type, build_global_models,
                             distribute_type, expected_round_bytes,
                             monolithic_step, parameter_breakdown, run,
                             save_checkpoint, split_step, write_metrics)
from fsdt.evaluation import evaluate_models, experiment_context_length
from fsdt.rng import substream
from fsdt.server_decoder import ServerDecoder

SEED = 11  # committed calibration seed


def announce(n, name):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[acceptance] criterion {n} ({name}): FAIL")
                raise
            print(f"[acceptance] criterion {n} ({name}): PASS")
        return wrapper
    return deco


def full_stack(spec, seed):
    cfg = FederationConfig()
    E = EmbeddingModel(spec.state_dim, spec.action_dim, cfg.embed_dim,
                       spec.horizon, seed=(seed, "e", spec.type_id))
    P = PredictionModel(spec.action_dim, cfg.embed_dim, seed=(seed, "p", spec.type_id))
    return E, P


def batch_for(spec, h, batch, seed):
    eps = envs.generate_dataset(spec, envs.DatasetTier.MEDIUM, 4, seed)
    shard = ClientShard(spec.type_id, 0, eps, [envs.DatasetTier.MEDIUM] * 4)
    return collate(sample_batch(shard, batch, h, substream(seed, "batch")))


@announce(1, "split equivalence")
def test_c01_split_equivalence():
    t0 = time.time()
    specs = sorted(fsdt.shipped_specs().items())
    cfg = FederationConfig()
    server = ServerDecoder(cfg.embed_dim, cfg.decoder_layers, cfg.decoder_heads,
                           cfg.decoder_ff, seed=(SEED, "c1-server"))
    stacks = {t: full_stack(s, SEED) for t, s in specs}
    for i in range(50):
        type_id, spec = specs[i % 3]
        E, P = stacks[type_id]
        batch = batch_for(spec, h=4 + i % 4, batch=3, seed=100 + i)
        for stage in (1, 2):
            server.set_frozen(stage == 1)
            E.set_frozen(stage == 2)
            P.set_frozen(stage == 2)
            split = split_step(E, P, server, batch)
            grads_split = {n: p.grad.copy() for n, p in
                           {**E.named_parameters(), **P.named_parameters(),
                            **{f"G.{k}": v for k, v in server.named_parameters().items()}}.items()}
            for m in (E, P, server):
                m.zero_grad()
            mono = monolithic_step(E, P, server, batch)
            grads_mono = {n: p.grad for n, p in
                          {**E.named_parameters(), **P.named_parameters(),
                           **{f"G.{k}": v for k, v in server.named_parameters().items()}}.items()}
            assert abs(split.loss - mono.loss) <= 1e-10
            assert np.max(np.abs(split.token_grad - mono.token_grad)) <= 1e-10
            assert np.max(np.abs(split.activation_grad - mono.activation_grad)) <= 1e-10
            for n in grads_split:
                assert np.max(np.abs(grads_split[n] - grads_mono[n])) <= 1e-10, n
            for m in (E, P, server):
                m.zero_grad()
                m.set_frozen(False)
    assert time.time() - t0 < 60.0


@announce(2, "gradient suite")
def test_c02_gradient_suite():
    t0 = time.time()
    rng = substream(SEED, "c2")
    tol = 1e-4

    # every differentiable operation on random small instances
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)) + 3.0, requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    beta = Tensor(rng.normal(size=4), requires_grad=True)
    table = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    idx = np.array([[0, 5, 2]])
    t1 = rng.normal(size=(3, 4))
    checks = [
        (lambda: ad.tsum(ad.mul(ad.add(a, b), ad.sub(a, b))), [a, b]),
        (lambda: ad.tsum(ad.div(a, b)), [a, b]),
        (lambda: ad.tsum(ad.mul(ad.matmul(a, w), ad.matmul(a, w))), [a, w]),
        (lambda: ad.tsum(ad.exp(ad.mul(a, 0.5))), [a]),
        (lambda: ad.tsum(ad.log(b)), [b]),
        (lambda: ad.tsum(ad.powc(b, 1.3)), [b]),
        (lambda: ad.tsum(ad.gelu(a)), [a]),
        (lambda: ad.tsum(ad.mul(ad.clamp(a, -0.8, 0.8), a)), [a]),
        (lambda: ad.tsum(ad.mul(ad.softmax(a), t1)), [a]),
        (lambda: ad.tsum(ad.mul(ad.layer_norm(a, gamma, beta, 1e-5), t1)), [a, gamma, beta]),
        (lambda: ad.tsum(ad.powc(ad.gather_rows(table, idx), 2.0)), [table]),
        (lambda: ad.tsum(ad.powc(ad.reshape(ad.transpose(a, (1, 0)), (12, 1)), 2.0)), [a]),
    ]
    q = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    r = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    s = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    checks.append((lambda: ad.tsum(ad.powc(ad.stride_rows(ad.interleave_rows([q, r, s]), 1, 3), 2.0)),
                   [q, r, s]))
    attn_w = {}
    for nm in ("wq", "wk", "wv", "wo"):
        attn_w[nm] = Tensor(ad.linear_init(rng, 4, (4, 4)), requires_grad=True)
        attn_w["b" + nm[1]] = Tensor(np.zeros(4), requires_grad=True)
    x = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    t2 = rng.normal(size=(1, 3, 4))
    checks.append((lambda: ad.tsum(ad.mul(ad.causal_self_attention(x, attn_w, 2), t2)),
                   [x] + [attn_w[k] for k in sorted(attn_w)]))
    for build, params in checks:
        assert grad_check(build, params, h=1e-5) < tol

    # the full composed loss: embed -> decode -> predict -> masked NLL
    E = EmbeddingModel(2, 1, width=8, max_timestep=10, seed=(SEED, "c2e"))
    P = PredictionModel(1, width=8, seed=(SEED, "c2p"))
    G = ServerDecoder(width=8, n_layers=1, n_heads=2, ff_width=16, seed=(SEED, "c2g"))
    small = WindowBatch(
        rtg=rng.normal(size=(2, 2)), states=rng.normal(size=(2, 2, 2)),
        actions=rng.normal(size=(2, 2, 1)), timesteps=np.tile(np.arange(2), (2, 1)),
        mask=np.array([[0.0, 1.0], [1.0, 1.0]]), targets=rng.normal(size=(2, 2, 1)))

    def composed():
        seq = embed_batch(E, small)
        out = G.forward(seq.tokens, seq.mask)
        mu, sigma = predict(P, ad.stride_rows(out, 1, 3))
        return masked_nll(mu, sigma, small.targets, small.mask)

    params = E.parameters() + P.parameters() + G.parameters()
    assert grad_check(composed, params, h=1e-5) < tol
    assert time.time() - t0 < 120.0


@announce(3, "freeze exactness")
def test_c03_freeze_exactness():
    data = fsdt.build_training_data(fsdt.shipped_specs(), 6, 20, SEED)
    cfg = FederationConfig(rounds=5, n_clients=3, local_steps=3, server_steps=4,
                           batch_size=4, context_len=5, eval_every=100,
                           eval_episodes=1, embed_dim=16, decoder_layers=1,
                           decoder_heads=2, decoder_ff=32, seed=SEED)
    record = {}

    def hook(event, round_idx, state):
        if event == "stage1":
            record["server"] = state.server.byte_hash()
        elif event == "stage2":
            # stage 1 just ended: the trunk must be bit-identical
            assert state.server.byte_hash() == record["server"]
            record["clients"] = {
                t: (gm.embedder.byte_hash(), gm.predictor.byte_hash())
                for t, gm in state.globals_by_type.items()}
        elif event == "round":
            # stage 2 just ended: every E and P must be bit-identical
            now = {t: (gm.embedder.byte_hash(), gm.predictor.byte_hash())
                   for t, gm in state.globals_by_type.items()}
            assert now == record["clients"]

    result = run(cfg, data, on_phase=hook)
    assert len(result.metrics) == 5


@announce(4, "aggregation oracle")
def test_c04_aggregation_oracle():
    spec = fsdt.shipped_specs()["walker"]
    clients = []
    for i in range(5):
        E = EmbeddingModel(4, 2, 16, spec.horizon, seed=(SEED, "c4e", i))
        P = PredictionModel(2, 16, seed=(SEED, "c4p", i))
        eps = envs.generate_dataset(spec, envs.DatasetTier.EXPERT, 2, i)
        clients.append(fsdt.ClientHandle(i, "walker",
                                         ClientShard("walker", i, eps, ["e", "e"]), E, P))
    gm = aggregate_type(clients)
    # independent per-scalar mean within 1e-15
    for module_name in ("embedder", "predictor"):
        for name, p in getattr(gm, module_name).named_parameters().items():
            flat = p.data.reshape(-1)
            sources = [getattr(c, module_name).named_parameters()[name].data.reshape(-1)
                       for c in clients]
            for i in range(flat.size):
                oracle = sum(src[i] for src in sources) / 5.0
                assert abs(flat[i] - oracle) <= 1e-15
    # distribute then aggregate is an exact fixed point
    distribute_type(gm, clients, lr_client=1e-3)
    again = aggregate_type(clients)
    assert again.embedder.byte_hash() == gm.embedder.byte_hash()
    assert again.predictor.byte_hash() == gm.predictor.byte_hash()
    # permutation invariance over client order
    perm = [clients[i] for i in (3, 0, 4, 1, 2)]
    assert aggregate_type(perm).embedder.byte_hash() == again.embedder.byte_hash()


@announce(5, "causality")
def test_c05_causality():
    rng = substream(SEED, "c5")
    for _ in range(100):
        heads = int(rng.integers(1, 5))
        head_dim = int(rng.integers(1, 5))
        width = heads * head_dim
        depth = int(rng.integers(1, 4))
        h = int(rng.integers(1, 5))
        length = 3 * h
        G = ServerDecoder(width, depth, heads, 2 * width,
                          seed=(SEED, "c5", heads, head_dim, depth, h))
        x = rng.normal(size=(1, length, width))
        base = G.decode(TokenSequence(Tensor(x), np.ones((1, length), dtype=bool))).tokens.data
        t = int(rng.integers(0, length - 1)) if length > 1 else 0
        mod = x.copy()
        mod[0, t + 1:] = rng.normal(size=mod[0, t + 1:].shape) * 25
        out = G.decode(TokenSequence(Tensor(mod), np.ones((1, length), dtype=bool))).tokens.data
        assert np.array_equal(out[0, :t + 1], base[0, :t + 1])


@announce(6, "ledger exactness")
def test_c06_ledger_exactness():
    data = fsdt.build_training_data(fsdt.shipped_specs(), 6, 20, SEED)
    cfg = FederationConfig(rounds=2, n_clients=6, local_steps=3, server_steps=5,
                           batch_size=4, context_len=5, eval_every=100,
                           eval_episodes=1, embed_dim=16, decoder_layers=1,
                           decoder_heads=2, decoder_ff=32, seed=SEED)
    result = run(cfg, data)
    expected = expected_round_bytes(cfg, result.globals_by_type, cfg.n_clients // 3)
    for m in result.metrics:
        for cls, value in m.ledger.items():
            assert value == expected[cls], cls
        assert sum(m.ledger.values()) == expected["total"]
    # context-length communication claim: activation bytes double exactly
    short = dataclasses.replace(cfg, rounds=1)
    rows = experiment_context_length(short, data, [5, 10])
    assert rows[1]["activation_bytes"] == 2 * rows[0]["activation_bytes"]


@announce(7, "parameter share")
def test_c07_parameter_share():
    cfg = FederationConfig()
    data = fsdt.build_training_data(fsdt.shipped_specs(), 3, 10, SEED)
    server = ServerDecoder(cfg.embed_dim, cfg.decoder_layers, cfg.decoder_heads,
                           cfg.decoder_ff, seed=(SEED, "init-server"))
    breakdown = parameter_breakdown(server, build_global_models(data, cfg))
    print("\n  component parameter counts:")
    print(f"    server trunk: {breakdown['server']}")
    for type_id, counts in breakdown["per_type"].items():
        print(f"    {type_id}: embedding {counts['embedding']}, prediction {counts['prediction']}")
    print(f"    server share: {100 * breakdown['server_share']:.2f}%")
    assert breakdown["server"] == 3 * (4 * 128 * 128 + 2 * 128 * 512 + 512 + 9 * 128)
    for counts in breakdown["per_type"].values():
        assert counts["embedding"] > 0 and counts["prediction"] > 0
    assert breakdown["server_share"] >= 0.80


@announce(8, "end-to-end learning")
def test_c08_end_to_end_learning():
    data = fsdt.build_training_data(fsdt.shipped_specs(), episodes_per_tier=60,
                                    baseline_episodes=200, seed=SEED)
    cfg = FederationConfig(seed=SEED)  # the desk profile
    server0 = ServerDecoder(cfg.embed_dim, cfg.decoder_layers, cfg.decoder_heads,
                            cfg.decoder_ff, seed=(cfg.seed, "init-server"))
    fresh = build_global_models(data, cfg)
    untrained = {
        t: evaluate_models(data[t], fresh[t].embedder, server0, fresh[t].predictor,
                           cfg, eval_round=0).normalized_score
        for t in sorted(data)}
    t0 = time.time()
    result = run(cfg, data)
    wall = time.time() - t0
    print(f"\n  desk training wall time: {wall:.0f}s")
    assert wall < 600.0, "desk profile must train in under 10 minutes"
    series = [(m.round, m.scores) for m in result.metrics if m.scores is not None]
    final = series[-1][1]
    first = series[0][1]
    for t in sorted(data):
        delta = final[t] - untrained[t]
        best = max(scores[t] for _, scores in series)
        print(f"  {t}: untrained {untrained[t]:.1f} -> final {final[t]:.1f} "
              f"(delta {delta:.1f}), best {best:.1f} vs round-1 {first[t]:.1f}")
        assert delta >= 30.0, f"{t} improved by only {delta:.1f} points"
        assert best > first[t], f"{t} never beat its round-1 score"


@announce(9, "data-tier ordering")
def test_c09_tier_ordering():
    t0 = time.time()
    for spec in fsdt.shipped_specs().values():
        means = {
            tier: float(np.mean([tr.rewards.sum() for tr in
                                 envs.generate_dataset(spec, tier, 200, SEED)]))
            for tier in envs.DatasetTier
        }
        j_random, j_expert = envs.baseline_returns(spec, 200, SEED)
        span = j_expert - j_random
        e, m, r = (means[envs.DatasetTier.EXPERT], means[envs.DatasetTier.MEDIUM],
                   means[envs.DatasetTier.REPLAY])
        assert e > m > r > j_random
        assert e - m > 0.05 * span
        assert m - r > 0.05 * span
        assert r - j_random > 0.05 * span
    assert time.time() - t0 < 60.0


@announce(10, "determinism")
def test_c10_determinism(tmp_path):
    data = fsdt.build_training_data(fsdt.shipped_specs(), 6, 20, SEED)
    cfg = FederationConfig(rounds=2, n_clients=3, local_steps=4, server_steps=5,
                           batch_size=4, context_len=5, eval_every=2,
                           eval_episodes=2, embed_dim=16, decoder_layers=1,
                           decoder_heads=2, decoder_ff=32, seed=SEED)
    blobs = []
    for tag in ("first", "second"):
        result = run(cfg, data)
        mpath = tmp_path / f"{tag}.jsonl"
        cpath = tmp_path / f"{tag}.bin"
        write_metrics(mpath, result.metrics)
        save_checkpoint(cpath, result)
        blobs.append((mpath.read_bytes(), cpath.read_bytes()))
    assert blobs[0][0] == blobs[1][0], "metrics files differ between runs"
    assert blobs[0][1] == blobs[1][1], "checkpoints differ between runs"

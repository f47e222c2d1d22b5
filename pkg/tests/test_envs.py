"""Environments: dynamics, LQR, scripted tiers, datasets, files."""
import numpy as np
import pytest

from fsdt.envs import (AgentTypeSpec, DatasetTier, EnvState, baseline_returns,
                       generate_dataset, initial_state, load_dataset,
                       noiseless, read_manifest, riccati_residual,
                       riccati_solution, save_dataset, scripted_action,
                       shipped_specs, solve_lqr, step, write_manifest)
from fsdt.rng import substream


def scalar_spec(a, b, q, r, noise=0.0, horizon=50):
    return AgentTypeSpec("scalar", [[a]], [[b]], [[q]], [[r]],
                         noise_std=noise, horizon=horizon, state_bound=1e9)


class TestStep:
    def test_deterministic_linear_algebra(self):
        spec = AgentTypeSpec("t", np.eye(1), np.eye(1), [[2.0]], [[0.5]],
                             noise_std=0.0, state_bound=1e9)
        state = EnvState(np.array([1.0]), 0)
        nxt, r = step(spec, state, np.array([-1.0]), substream(0))
        np.testing.assert_allclose(nxt.s, [0.0])
        assert nxt.t == 1
        # r = -(1*q + 1*r_cost) evaluated at the pre-step state
        assert r == -(2.0 + 0.5)

    def test_zero_state_zero_action_noiseless(self):
        spec = scalar_spec(0.5, 1.0, 1.0, 1.0)
        nxt, r = step(spec, EnvState(np.zeros(1), 0), np.zeros(1), substream(0))
        assert r == 0.0
        np.testing.assert_allclose(nxt.s, [0.0])

    def test_terminal_state_rejected(self):
        spec = scalar_spec(0.5, 1.0, 1.0, 1.0, horizon=3)
        with pytest.raises(RuntimeError):
            step(spec, EnvState(np.zeros(1), 3), np.zeros(1), substream(0))

    def test_non_finite_action_rejected(self):
        spec = scalar_spec(0.5, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            step(spec, EnvState(np.zeros(1), 0), np.array([np.nan]), substream(0))

    def test_stationary_variance_matches_ar1_formula(self):
        # a=0, A=0.5: steady-state variance is noise^2 / (1 - 0.25)
        spec = scalar_spec(0.5, 1.0, 1.0, 1.0, noise=0.3, horizon=10_000)
        rng = substream(77)
        state = EnvState(np.zeros(1), 0)
        samples = []
        for _ in range(spec.horizon):
            state, _ = step(spec, state, np.zeros(1), rng)
            samples.append(state.s[0])
        empirical = np.var(samples[1000:])
        expected = 0.3 ** 2 / (1 - 0.25)
        assert abs(empirical - expected) / expected < 0.10

    def test_action_clamped_to_bound(self):
        spec = AgentTypeSpec("t", [[0.0]], [[1.0]], [[1.0]], [[1.0]],
                             noise_std=0.0, action_bound=2.0, state_bound=1e9)
        nxt, _ = step(spec, EnvState(np.zeros(1), 0), np.array([100.0]), substream(0))
        np.testing.assert_allclose(nxt.s, [2.0])

    def test_rewards_never_positive(self):
        spec = shipped_specs()["walker"]
        rng = substream(5)
        state = initial_state(spec, rng)
        for _ in range(spec.horizon):
            a = rng.uniform(-3, 3, size=spec.action_dim)
            state, r = step(spec, state, a, rng)
            assert r <= 0.0


class TestSolveLqr:
    def test_zero_dynamics_trivial_gain(self):
        spec = scalar_spec(0.0, 1.0, 1.0, 1.0)
        np.testing.assert_allclose(spec.gain, [[0.0]], atol=1e-12)
        np.testing.assert_allclose(riccati_solution(spec), [[1.0]], atol=1e-10)

    def test_golden_ratio_scalar_case(self):
        # A=B=Q=R=1: the fixed point solves P^2 - P - 1 = 0
        spec = scalar_spec(1.0, 1.0, 1.0, 1.0)
        golden = (1 + np.sqrt(5)) / 2
        np.testing.assert_allclose(riccati_solution(spec), [[golden]], atol=1e-9)
        np.testing.assert_allclose(spec.gain, [[golden / (1 + golden)]], atol=1e-9)

    def test_fixed_point_residual_small(self):
        for spec in shipped_specs().values():
            assert riccati_residual(spec, riccati_solution(spec)) < 1e-9

    def test_gain_cached_at_construction(self):
        spec = shipped_specs()["walker"]
        np.testing.assert_array_equal(spec.gain, solve_lqr(spec))

    def test_closed_loop_spectral_radius(self):
        for spec in shipped_specs().values():
            closed = spec.A - spec.B @ spec.gain
            assert np.max(np.abs(np.linalg.eigvals(closed))) < 1.0

    def test_unstabilizable_spec_rejected(self):
        # B = 0 cannot stabilize an unstable A
        with pytest.raises(ValueError):
            AgentTypeSpec("bad", [[1.5]], [[0.0]], [[1.0]], [[1.0]])

    def test_cost_matrices_validated(self):
        with pytest.raises(ValueError):
            AgentTypeSpec("bad", [[0.5]], [[1.0]], [[-1.0]], [[1.0]])
        with pytest.raises(ValueError):
            AgentTypeSpec("bad", np.eye(2) * 0.5, np.eye(2),
                          np.array([[1.0, 0.5], [0.4, 1.0]]), np.eye(2))


class TestScriptedAction:
    def test_expert_at_origin(self):
        spec = shipped_specs()["cart"]
        a = scripted_action(DatasetTier.EXPERT, spec.gain, np.zeros(2), substream(0), 3.0)
        np.testing.assert_allclose(a, np.zeros(1))

    def test_expert_matrix_product(self):
        gain = np.array([[1.0, 0.0]])
        a = scripted_action(DatasetTier.EXPERT, gain, np.array([2.0, 5.0]), substream(0), 10.0)
        np.testing.assert_allclose(a, [-2.0])

    def test_medium_mean_matches_expert(self):
        gain = np.array([[0.4, 0.2]])
        s = np.array([1.0, -2.0])
        rng = substream(123)
        draws = np.array([
            scripted_action(DatasetTier.MEDIUM, gain, s, rng, 3.0)[0]
            for _ in range(10_000)
        ])
        sigma_med = 0.5 * 3.0
        assert abs(draws.mean() - (-gain @ s)[0]) < 3 * sigma_med / 100

    def test_all_tiers_respect_bound(self):
        gain = np.array([[5.0, 5.0]])
        s = np.array([3.0, 3.0])
        rng = substream(9)
        for tier in DatasetTier:
            for _ in range(50):
                a = scripted_action(tier, gain, s, rng, 1.5)
                assert np.all(np.abs(a) <= 1.5)


class TestGenerateDataset:
    def test_deterministic_bytes(self, tmp_path):
        spec = shipped_specs()["cart"]
        paths = []
        for name in ("a.fsdt", "b.fsdt"):
            eps = generate_dataset(spec, DatasetTier.MEDIUM, 5, seed=21)
            path = tmp_path / name
            save_dataset(path, spec, DatasetTier.MEDIUM, eps, seed=21)
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_episode_shape(self):
        spec = shipped_specs()["cart"]
        eps = generate_dataset(spec, DatasetTier.EXPERT, 1, seed=0)
        assert len(eps) == 1
        assert eps[0].states.shape == (spec.horizon, 2)
        assert eps[0].actions.shape == (spec.horizon, 1)
        assert eps[0].rewards.shape == (spec.horizon,)

    def test_tier_ordering_with_gaps(self):
        # Expert > Medium > Replay > Random, every gap over 5% of the span
        for spec in shipped_specs().values():
            means = {
                tier: np.mean([t.rewards.sum() for t in generate_dataset(spec, tier, 200, seed=13)])
                for tier in DatasetTier
            }
            j_random, j_expert = baseline_returns(spec, 200, seed=13)
            span = j_expert - j_random
            assert means[DatasetTier.EXPERT] > means[DatasetTier.MEDIUM] > means[DatasetTier.REPLAY] > j_random
            assert (means[DatasetTier.EXPERT] - means[DatasetTier.MEDIUM]) > 0.05 * span
            assert (means[DatasetTier.MEDIUM] - means[DatasetTier.REPLAY]) > 0.05 * span
            assert (means[DatasetTier.REPLAY] - j_random) > 0.05 * span


class TestBaselineReturns:
    def test_noiseless_expert_from_origin_is_free(self):
        spec = scalar_spec(0.5, 1.0, 1.0, 1.0)
        state = EnvState(np.zeros(1), 0)
        total = 0.0
        for _ in range(spec.horizon):
            a = -spec.gain @ state.s
            state, r = step(spec, state, a, substream(0))
            total += r
        assert total == 0.0

    def test_expert_beats_random_on_shipped_specs(self):
        for spec in shipped_specs().values():
            j_random, j_expert = baseline_returns(spec, 200, seed=7)
            assert j_expert - j_random > 0

    def test_same_seed_identical(self):
        spec = shipped_specs()["walker"]
        assert baseline_returns(spec, 20, seed=3) == baseline_returns(spec, 20, seed=3)


class TestClosedLoopStability:
    def test_expert_norm_monotone_after_settling(self):
        # 100-step noiseless rollouts from the unit ball settle monotonically
        for spec in shipped_specs().values():
            ns = noiseless(spec, horizon=100)
            for i in range(25):
                rng = substream(55, spec.type_id, i)
                state = initial_state(ns, rng)
                norms = []
                for _ in range(100):
                    a = -ns.gain @ state.s
                    state, _ = step(ns, state, a, rng)
                    norms.append(np.linalg.norm(state.s))
                diffs = np.diff(np.array(norms[10:]))
                assert np.all(diffs <= 1e-12)

    def test_zero_trajectory_zero_return(self):
        spec = scalar_spec(0.9, 1.0, 1.0, 1.0)
        state = EnvState(np.zeros(1), 0)
        total = 0.0
        for _ in range(10):
            state, r = step(spec, state, np.zeros(1), substream(0))
            total += r
        assert total == 0.0


class TestHeterogeneity:
    def test_three_distinct_dimension_pairs(self):
        dims = {(s.state_dim, s.action_dim) for s in shipped_specs().values()}
        assert dims == {(2, 1), (4, 2), (6, 3)}


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        spec = shipped_specs()["hexapod"]
        eps = generate_dataset(spec, DatasetTier.REPLAY, 3, seed=5)
        path = tmp_path / "x.fsdt"
        save_dataset(path, spec, DatasetTier.REPLAY, eps, seed=5)
        meta, loaded = load_dataset(path)
        assert meta["type_id"] == "hexapod"
        assert meta["tier"] is DatasetTier.REPLAY
        assert meta["d"] == 6 and meta["b"] == 3 and meta["n_episodes"] == 3
        for orig, back in zip(eps, loaded):
            np.testing.assert_array_equal(orig.states, back.states)
            np.testing.assert_array_equal(orig.actions, back.actions)
            np.testing.assert_array_equal(orig.rewards, back.rewards)

    def test_magic_validated(self, tmp_path):
        path = tmp_path / "junk.fsdt"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(ValueError):
            load_dataset(path)

    def test_nan_payload_rejected(self, tmp_path):
        from fsdt.autodiff import NumericError
        spec = shipped_specs()["cart"]
        eps = generate_dataset(spec, DatasetTier.EXPERT, 1, seed=5)
        path = tmp_path / "x.fsdt"
        save_dataset(path, spec, DatasetTier.EXPERT, eps, seed=5)
        raw = bytearray(path.read_bytes())
        raw[-8:] = np.array([np.nan]).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(NumericError):
            load_dataset(path)

    def test_manifest_round_trip(self, tmp_path):
        entries = {
            "cart": {"paths": {t: f"cart-{t.name.lower()}.fsdt" for t in DatasetTier},
                     "j_random": -100.5, "j_expert": -3.25},
        }
        path = tmp_path / "manifest.txt"
        write_manifest(path, entries)
        back = read_manifest(path)
        assert back["cart"]["j_random"] == -100.5
        assert back["cart"]["j_expert"] == -3.25
        assert back["cart"]["paths"][DatasetTier.MEDIUM] == "cart-medium.fsdt"

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierdiff import numerics as nx
from hierdiff.policy import (
    ChunkExecutor,
    ChunkQueue,
    H3Policy,
    PolicyConfig,
    PolicyController,
    StarvedError,
    TrainingDiverged,
    ensemble_weights,
    infer_loop,
    load_policy,
    mask_probability,
    p_mask,
    reference_rollout,
    spectral_config,
    temporal_ensemble,
    toy_config,
    train,
)
from hierdiff.toyworld import evaluate, generate_episodes, proprio, reset, step

TINY = dict(image_size=4, N=2, resolutions=((1, 1), (2, 2)), stage_fractions=(0.0, 0.5, 1.0),
            channels=3, codebook_size=5, widths=(2,), width=8, temb_dim=4, T=10,
            inference_steps=5, lr=1e-2, batch_size=8)


def tiny_batch(cfg, B=3, seed=0):
    rng = np.random.default_rng(seed)
    layers = rng.uniform(size=(B, cfg.T_o, cfg.num_layers, cfg.image_size, cfg.image_size, 3))
    q = rng.normal(size=(B, cfg.T_o * cfg.proprio_dim))
    acts = rng.uniform(-1, 1, size=(B, cfg.T_p, cfg.action_dim))
    return layers, q, acts


class TestMasking:
    def test_probability_endpoints(self):
        assert mask_probability(0, 100) == 1.0
        assert mask_probability(50, 100) == 0.5
        assert mask_probability(100, 100) == 0.0
        with pytest.raises(ValueError):
            mask_probability(101, 100)

    @pytest.mark.parametrize("t,expected,tol", [(0, 1.0, 0.0), (50, 0.5, 0.02), (100, 0.0, 0.0)])
    def test_empirical_rates(self, t, expected, tol):
        rng = np.random.default_rng(1)
        q = np.ones((10_000, 8))
        out = p_mask(q, t, 100, rng)
        rate = np.mean(np.all(out == 0, axis=1))
        assert abs(rate - expected) <= tol

    def test_rows_all_or_nothing(self):
        rng = np.random.default_rng(2)
        out = p_mask(np.ones((500, 6)), 30, 100, rng)
        row_sums = out.sum(axis=1)
        assert set(np.unique(row_sums)) <= {0.0, 6.0}


class TestEnsemble:
    def test_weights_oldest_first(self):
        np.testing.assert_allclose(ensemble_weights(3, 0.1), [math.exp(-0.2), math.exp(-0.1), 1.0])
        np.testing.assert_array_equal(ensemble_weights(1, 0.1), [1.0])

    def test_hand_example(self):
        q = ChunkQueue(4)
        q.push(0, np.full((4, 2), 1.0))
        q.push(2, np.full((4, 2), 3.0))
        w0, w1 = math.exp(-0.1), 1.0
        expected = (w0 * 1.0 + w1 * 3.0) / (w0 + w1)
        np.testing.assert_allclose(temporal_ensemble(q, 3, 0.1), [expected, expected])
        # only the first chunk covers step 1
        np.testing.assert_allclose(temporal_ensemble(q, 1, 0.1), [1.0, 1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.floats(0.0, 2.0), st.integers(0, 10_000))
    def test_inside_convex_hull(self, n, decay, seed):
        rng = np.random.default_rng(seed)
        q = ChunkQueue(8)
        chunks = [rng.normal(size=(8, 2)) for _ in range(n)]
        for i, c in enumerate(chunks):
            q.push(i, c)
        step_ = n - 1
        a = temporal_ensemble(q, step_, decay)
        vals = np.stack([c[step_ - i] for i, c in enumerate(chunks)])
        assert np.all(a >= vals.min(axis=0) - 1e-12) and np.all(a <= vals.max(axis=0) + 1e-12)

    def test_starved(self):
        with pytest.raises(StarvedError):
            temporal_ensemble(ChunkQueue(4), 0)


class TestChunkQueue:
    def test_push_order_and_shape(self):
        q = ChunkQueue(4)
        q.push(0, np.zeros((4, 2)))
        with pytest.raises(ValueError):
            q.push(0, np.zeros((4, 2)))
        with pytest.raises(ValueError):
            q.push(5, np.zeros((3, 2)))

    def test_prune_and_cover(self):
        q = ChunkQueue(4)
        for s in (0, 2, 4):
            q.push(s, np.zeros((4, 2)))
        assert [s for s, _ in q.covering(3)] == [0, 2]
        q.prune(4)
        assert [s for s, _ in q.entries()] == [2, 4]
        q.prune(100)
        assert len(q) == 0


class WorldEnv:
    """Toy world wrapped with observe/apply for the execution loops."""

    def __init__(self, seed):
        self.state = reset(np.random.default_rng(seed))

    def observe(self):
        return proprio(self.state)

    def apply(self, a):
        self.state = step(self.state, a)


def make_plan(T_p=4):
    w = np.random.default_rng(42).normal(size=(4, T_p * 2))

    def plan(obs):
        return np.tanh(np.asarray(obs) @ w).reshape(T_p, 2)

    return plan


class TestExecution:
    @pytest.mark.parametrize("episode", range(5))
    def test_sync_matches_reference_bitwise(self, episode):
        ref = reference_rollout(make_plan(), WorldEnv(episode), 40, T_a=2)
        got = infer_loop(make_plan(), WorldEnv(episode), 40, T_a=2, T_p=4)
        for a, b in zip(ref, got):
            assert np.array_equal(a, b)

    def test_latency_emits_every_tick(self):
        ex = ChunkExecutor(make_plan(), T_a=2, T_p=4, latency=3, initial_action=np.zeros(2))
        env = WorldEnv(0)
        acts = []
        for n in range(60):
            a = ex.tick(n, env.observe())
            assert a.shape == (2,) and np.all(np.isfinite(a))
            env.apply(a)
            acts.append(a)
        assert len(acts) == 60
        # the first plan lands at tick 3; afterwards some chunk always covers the step
        assert ex.starved_ticks == [0, 1, 2]
        assert ex.max_live <= math.ceil(3 / 2) + 1

    def test_latency_without_initial_action_raises(self):
        ex = ChunkExecutor(make_plan(), T_a=2, T_p=4, latency=3)
        with pytest.raises(StarvedError):
            ex.tick(0, np.zeros(4))

    def test_threaded_smoke(self):
        acts = infer_loop(make_plan(), WorldEnv(1), 20, T_a=2, T_p=4, threaded=True,
                          tick_seconds=0.005, latency=1, initial_action=np.zeros(2))
        assert len(acts) == 20
        assert all(np.all(np.isfinite(a)) for a in acts)

    def test_threaded_producer_error_surfaces(self):
        def bad(obs):
            raise RuntimeError("planner failed")

        with pytest.raises(RuntimeError, match="planner failed"):
            infer_loop(bad, WorldEnv(1), 5, T_a=2, T_p=4, threaded=True, tick_seconds=0.005)


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = toy_config(seed=5, N=4)
        cfg.save(tmp_path / "c.json")
        assert PolicyConfig.load(tmp_path / "c.json") == cfg

    def test_spectral_horizon(self):
        cfg = spectral_config()
        assert (cfg.T_a, cfg.T_p) == (8, 16)

    @pytest.mark.parametrize("bad", [dict(T_a=5, T_p=4), dict(N=0), dict(mode="ddim"),
                                     dict(stage_fractions=(0.0, 1.0)), dict(epochs=-1)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            PolicyConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            PolicyConfig.from_dict({"nonsense": 1})


class TestPolicy:
    def test_plan_shape_and_range(self):
        cfg = PolicyConfig(**TINY)
        pol = H3Policy(cfg)
        layers, q, _ = tiny_batch(cfg)
        a = pol.plan(layers, q, np.random.default_rng(0))
        assert a.shape == (3, cfg.T_p, cfg.action_dim)
        assert np.all(np.abs(a) <= 1.0)

    def test_total_loss_gradcheck(self):
        cfg = PolicyConfig(**TINY)
        pol = H3Policy(cfg)
        layers, q, acts = tiny_batch(cfg)
        loss = lambda: pol.losses(layers, q, acts, np.random.default_rng(3))[0]
        assert nx.grad_check(loss, list(pol.parameters().values())) < 1e-4

    def test_controller_runs_in_world(self):
        cfg = toy_config(widths=(4, 4, 4), width=16, temb_dim=8)
        rate = evaluate(PolicyController(H3Policy(cfg), seed=0), episodes=2, seed=0)
        assert 0.0 <= rate <= 1.0


@pytest.fixture(scope="module")
def one_episode():
    return generate_episodes(1, 3)


SMALL = dict(widths=(4, 4, 4), width=32, temb_dim=8, codebook_size=16)


class TestTraining:
    def test_loss_decreases_and_deterministic(self, one_episode):
        cfg = toy_config(epochs=30, **SMALL)
        a = train(one_episode, cfg)
        b = train(one_episode, cfg)
        assert [m["total_loss"] for m in a.metrics] == [m["total_loss"] for m in b.metrics]
        assert a.metrics[-1]["total_loss"] < a.metrics[0]["total_loss"]

    def test_resume_equivalence(self, one_episode, tmp_path):
        cfg = toy_config(epochs=4, checkpoint_every=1, **SMALL)
        full = train(one_episode, cfg, out_dir=tmp_path / "a")
        resumed = train(one_episode, cfg, out_dir=tmp_path / "b", resume=tmp_path / "a" / "ckpt_epoch0002.bin")
        for k, p in full.policy.parameters().items():
            assert np.array_equal(p.data, resumed.policy.parameters()[k].data), k
        assert full.metrics == resumed.metrics

    def test_checkpoint_reload_plans_identically(self, one_episode, tmp_path):
        cfg = toy_config(epochs=1, **SMALL)
        res = train(one_episode, cfg, out_dir=tmp_path)
        loaded, meta = load_policy(res.checkpoints[-1])
        assert meta["epoch"] == 1 and loaded.trained_steps == res.policy.trained_steps
        layers = res.policy.layer_images(one_episode[0].rgb[:2], one_episode[0].depth[:2])[None]
        q = one_episode[0].proprio[:2].reshape(1, -1)
        a = res.policy.plan(layers, q, np.random.default_rng(0))
        b = loaded.plan(layers, q, np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)

    def test_metrics_csv(self, one_episode, tmp_path):
        train(one_episode, toy_config(epochs=2, **SMALL), out_dir=tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,diffusion_loss,consistency_loss,total_loss,eval_success_rate"
        assert len(lines) == 3

    def test_resume_config_mismatch(self, one_episode, tmp_path):
        cfg = toy_config(epochs=1, **SMALL)
        res = train(one_episode, cfg, out_dir=tmp_path)
        with pytest.raises(ValueError):
            train(one_episode, cfg.replace(lr=0.5), resume=res.checkpoints[-1])

    def test_nan_aborts(self, one_episode):
        ep = one_episode[0]
        bad = type(ep)(ep.rgb, ep.depth, ep.proprio, np.full_like(ep.actions, np.nan), ep.success)
        with pytest.raises(TrainingDiverged, match="non-finite"):
            train([bad], toy_config(epochs=1, **SMALL))

    def test_empty_episodes(self):
        with pytest.raises(ValueError):
            train([], toy_config(epochs=1, **SMALL))

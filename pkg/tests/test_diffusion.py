import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierdiff import numerics as nx
from hierdiff.diffusion import (
    Denoiser,
    NoiseSchedule,
    StageSchedule,
    build_cosine_schedule,
    conditioning_features,
    denoise_step,
    diffusion_loss,
    flatten_layers,
    forward_noise,
    inference_timesteps,
    predict_noise,
    sample_action,
    scale_for_step,
    total_loss,
    vp_sigma,
    write_trace_csv,
)
from hierdiff.encoder import MultiScaleFeatures
from hierdiff.numerics import Tensor

TABLE1_FRACTIONS = (0.0, 0.4, 0.6, 0.8, 1.0)


def toy_schedule(alphas, mode="sde"):
    a = np.asarray(alphas, dtype=float)
    return NoiseSchedule(T=len(a) - 1, s=0.008, alpha=a, alpha_raw=a, mode=mode)


class TestCosineSchedule:
    def test_endpoints(self):
        sched = build_cosine_schedule(50)
        assert sched.alpha[0] == 1.0
        assert sched.alpha_raw[-1] == pytest.approx(0.0, abs=1e-30)
        assert sched.alpha[-1] == 1e-8

    @pytest.mark.parametrize("T", [1, 10, 50, 100])
    def test_strictly_decreasing(self, T):
        assert np.all(np.diff(build_cosine_schedule(T).alpha) < 0)

    def test_closed_form_midpoint(self):
        sched = build_cosine_schedule(10, s=0.008)
        f = lambda t: np.cos(np.pi / 2 * (t / 10 + 0.008) / 1.008) ** 2
        assert sched.alpha[5] == pytest.approx(f(5) / f(0), rel=1e-14)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            build_cosine_schedule(0)
        with pytest.raises(ValueError):
            build_cosine_schedule(10, s=0.0)


class TestVpSigma:
    def test_hand_value(self):
        # sqrt((1 - 0.5)/(1 - 0.1)) * sqrt(1 - 0.1/0.5) = sqrt(0.5556 * 0.8) = 2/3
        assert vp_sigma(toy_schedule([1.0, 0.5, 0.1]), 2) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_equal_alphas_zero(self):
        assert vp_sigma(toy_schedule([1.0, 0.5, 0.5]), 2) == 0.0

    def test_t_zero_errors(self):
        with pytest.raises(ValueError):
            vp_sigma(toy_schedule([1.0, 0.5]), 0)

    def test_ode_mode_zero(self):
        np.testing.assert_array_equal(build_cosine_schedule(20).sigmas, 0.0)


class TestStages:
    def test_table1_boundaries(self):
        stages = StageSchedule.from_fractions(50, TABLE1_FRACTIONS)
        assert stages.boundaries == (0, 20, 30, 40, 50)
        assert stages.stage_of(25) == 2
        assert stages.stage_of(20) == 1
        assert stages.stage_of(50) == 4
        assert stages.stage_of(1) == 1

    def test_out_of_range(self):
        stages = StageSchedule((0, 5, 10))
        for t in (0, 11):
            with pytest.raises(ValueError):
                stages.stage_of(t)

    def test_partition(self):
        stages = StageSchedule.from_fractions(50, TABLE1_FRACTIONS)
        counts = np.bincount([stages.stage_of(t) for t in range(1, 51)], minlength=5)
        assert counts.tolist() == [0, 20, 10, 10, 10]

    def test_scale_pairing(self):
        stages = StageSchedule.from_fractions(50, TABLE1_FRACTIONS)
        assert scale_for_step(50, stages, 4) == 1
        assert scale_for_step(41, stages, 4) == 1
        assert scale_for_step(1, stages, 4) == 4
        assert scale_for_step(50, stages, 4, literal=True) == 4
        seq = [scale_for_step(t, stages, 4) for t in range(50, 0, -1)]
        assert np.all(np.diff(seq) >= 0)

    def test_single_stage(self):
        stages = StageSchedule((0, 30))
        assert {scale_for_step(t, stages, 1) for t in range(1, 31)} == {1}

    def test_conditioning_features_selects_scale(self):
        maps = [[Tensor(np.full((1, 2, 2, 1), 10 * m + k)) for k in range(1, 5)] for m in range(2)]
        F = MultiScaleFeatures(fhat=maps, raw=[], indices=[])
        stages = StageSchedule.from_fractions(50, TABLE1_FRACTIONS)
        assert [f.data.flat[0] for f in conditioning_features(F, 45, stages)] == [1, 11]
        assert [f.data.flat[0] for f in conditioning_features(F, 3, stages)] == [4, 14]


class TestForwardNoise:
    def test_zero_eps(self):
        sched = build_cosine_schedule(50)
        a0 = np.arange(8.0).reshape(4, 2)
        np.testing.assert_allclose(forward_noise(a0, 17, np.zeros_like(a0), sched), np.sqrt(sched.alpha[17]) * a0)

    def test_t_zero_identity(self):
        sched = build_cosine_schedule(50)
        a0 = np.random.default_rng(0).normal(size=(4, 2))
        np.testing.assert_array_equal(forward_noise(a0, 0, np.ones_like(a0), sched), a0)

    def test_variance_monte_carlo(self):
        sched = build_cosine_schedule(50)
        eps = np.random.default_rng(1).standard_normal(100_000)
        var = forward_noise(np.zeros(1), 30, eps, sched).var()
        # standard error of a unit-variance sample variance ~ sqrt(2/n)
        assert var == pytest.approx(1 - sched.alpha[30], abs=4 * np.sqrt(2 / 1e5))


class TestDenoiseStep:
    @pytest.mark.parametrize("t", [1, 7, 25, 50])
    def test_one_step_ode_identity(self, t):
        sched = build_cosine_schedule(50)
        rng = np.random.default_rng(t)
        a0, eps = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
        got = denoise_step(forward_noise(a0, t, eps, sched), eps, t, sched)
        want = np.sqrt(sched.alpha[t - 1]) * a0 + np.sqrt(1 - sched.alpha[t - 1]) * eps
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)

    def test_last_step_recovers_a0(self):
        sched = build_cosine_schedule(50)
        rng = np.random.default_rng(3)
        a0, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(denoise_step(forward_noise(a0, 1, eps, sched), eps, 1, sched), a0, atol=1e-12)

    def test_sde_determinism_per_seed(self):
        sched = build_cosine_schedule(50, mode="sde")
        a = np.ones((2, 4, 2))
        x = denoise_step(a, 0.3 * a, 10, sched, np.random.default_rng(5))
        y = denoise_step(a, 0.3 * a, 10, sched, np.random.default_rng(5))
        np.testing.assert_array_equal(x, y)

    def test_inconsistent_schedule(self):
        sched = toy_schedule([1.0, 0.5, 0.1], mode="ode")
        sched.sigma = lambda t, t_prev=None: 2.0
        with pytest.raises(ValueError):
            denoise_step(np.zeros(2), np.zeros(2), 2, sched, np.random.default_rng(0))

    def test_strided_ode_identity(self):
        sched = build_cosine_schedule(50)
        rng = np.random.default_rng(6)
        a0, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        got = denoise_step(forward_noise(a0, 40, eps, sched), eps, 40, sched, t_prev=28)
        want = forward_noise(a0, 28, eps, sched)
        np.testing.assert_allclose(got, want, atol=1e-10)


class OracleDenoiser:
    """Returns the exact noise used to construct a_t from a known a0."""

    horizon, action_dim = 4, 2

    def __init__(self, a0, schedule):
        self.a0, self.schedule = a0, schedule

    def __call__(self, a_t, t, cond):
        a_t = np.asarray(getattr(a_t, "data", a_t))
        alpha = np.asarray(self.schedule.alpha[t]).reshape(-1, 1, 1)
        return Tensor((a_t - np.sqrt(alpha) * self.a0) / np.sqrt(1 - alpha))


class ZeroDenoiser:
    horizon, action_dim = 4, 2

    def __call__(self, a_t, t, cond):
        return Tensor(np.zeros(np.shape(getattr(a_t, "data", a_t))))


class TestSampling:
    def stages(self, T):
        return StageSchedule.from_fractions(T, TABLE1_FRACTIONS)

    def test_zero_denoiser_telescopes(self):
        sched = build_cosine_schedule(50)
        a0, tr = sample_action(ZeroDenoiser(), lambda c: None, None, sched, self.stages(50),
                               np.random.default_rng(0), batch=3, trace=True)
        aT = tr.at(50)
        np.testing.assert_allclose(a0, aT * np.sqrt(sched.alpha[0]) / np.sqrt(sched.alpha[50]), rtol=1e-9)

    def test_oracle_chain_recovers_a0(self):
        # full chain against a fixed a0: the oracle's eps makes every step exact
        sched = build_cosine_schedule(50)
        target = np.random.default_rng(1).normal(size=(3, 4, 2))
        a0, _ = sample_action(OracleDenoiser(target, sched), lambda c: None, None, sched,
                              self.stages(50), np.random.default_rng(2), batch=3)
        np.testing.assert_allclose(a0, target, atol=1e-8)

    def test_oracle_chain_strided(self):
        sched = build_cosine_schedule(50)
        target = np.random.default_rng(3).normal(size=(2, 4, 2))
        a0, _ = sample_action(OracleDenoiser(target, sched), lambda c: None, None, sched,
                              self.stages(50), np.random.default_rng(4), batch=2, steps=20)
        np.testing.assert_allclose(a0, target, atol=1e-8)

    def test_seed_determinism_and_trace(self, tmp_path):
        sched = build_cosine_schedule(20, mode="sde")
        den = Denoiser(4, 2, feature_dim=3, proprio_dim=0, width=8)
        F = lambda c: den.condition(Tensor(np.full((2, 3), float(c))))
        x, tr = sample_action(den, F, None, sched, StageSchedule((0, 10, 20)),
                              np.random.default_rng(7), batch=2, trace=True)
        y, _ = sample_action(den, F, None, sched, StageSchedule((0, 10, 20)),
                             np.random.default_rng(7), batch=2)
        np.testing.assert_array_equal(x, y)
        assert tr.steps == list(range(20, -1, -1))
        np.testing.assert_array_equal(tr.at(0), x)
        path = tmp_path / "trace.csv"
        write_trace_csv(path, tr)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["t", "chunk_index", "action_dim", "value"]
        assert len(rows) == 1 + 21 * 4 * 2

    def test_scales_requested_coarse_to_fine(self):
        sched = build_cosine_schedule(50)
        seen = []

        def cond(c):
            seen.append(c)
            return None

        sample_action(ZeroDenoiser(), cond, None, sched, self.stages(50), np.random.default_rng(0), batch=1)
        assert seen == [1, 2, 3, 4]
        seen.clear()
        sample_action(ZeroDenoiser(), cond, None, sched, self.stages(50), np.random.default_rng(0),
                      batch=1, hierarchical=False)
        assert seen == [4]

    def test_inference_timesteps(self):
        assert inference_timesteps(5) == [5, 4, 3, 2, 1, 0]
        ts = inference_timesteps(50, 20)
        assert ts[0] == 50 and ts[-1] == 0 and len(ts) == 21
        assert np.all(np.diff(ts) < 0)


class TestDenoiser:
    def test_shape_and_determinism(self):
        den = Denoiser(4, 2, feature_dim=6, proprio_dim=4, width=16)
        a = np.random.default_rng(0).normal(size=(3, 4, 2))
        feats = np.ones((3, 6))
        q = np.zeros((3, 4))
        e1 = predict_noise(den, a, 5, feats, q)
        e2 = predict_noise(den, a, 5, feats, q)
        assert e1.shape == (3, 4, 2)
        np.testing.assert_array_equal(e1.data, e2.data)

    def test_parameter_gradient(self):
        rng = np.random.default_rng(1)
        den = Denoiser(4, 2, feature_dim=5, proprio_dim=3, width=6, temb_dim=4, seed=2)
        a = rng.normal(size=(2, 4, 2))
        feats, q, target = rng.normal(size=(2, 5)), rng.normal(size=(2, 3)), rng.normal(size=(2, 4, 2))
        loss = lambda: nx.tsum(nx.square(predict_noise(den, a, np.array([3, 9]), feats, q) - target))
        assert nx.grad_check(loss, list(den.parameters().values()), surrogate=False) < 1e-4

    def test_flatten_layers(self):
        maps = [Tensor(np.arange(2 * 3 * 2 * 2 * 1.0).reshape(6, 2, 2, 1)) for _ in range(2)]
        flat = flatten_layers(maps, 2)
        assert flat.shape == (2, 2 * 3 * 4)


class TestLoss:
    def test_oracle_denoiser_zero(self):
        sched = build_cosine_schedule(50)
        a0 = np.random.default_rng(0).normal(size=(16, 4, 2))
        loss = diffusion_loss(OracleDenoiser(a0, sched), None, a0, sched, np.random.default_rng(1))
        assert loss.item() == pytest.approx(0.0, abs=1e-18)

    def test_zero_denoiser_chunk_dimensionality(self):
        sched = build_cosine_schedule(50)
        a0 = np.zeros((10_000, 4, 2))
        loss = diffusion_loss(ZeroDenoiser(), None, a0, sched, np.random.default_rng(2))
        # per-sample ||eps||^2 ~ chi^2_8: sd sqrt(16), standard error 0.04
        assert loss.item() == pytest.approx(8.0, abs=0.2)

    def test_total_loss(self):
        assert total_loss(Tensor(2.0), Tensor(3.0), 0.0).item() == 2.0
        assert total_loss(Tensor(2.0), Tensor(3.0), 1.0).item() == 5.0


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 120), seed=st.integers(0, 10_000))
def test_one_step_identity_property(T, seed):
    sched = build_cosine_schedule(T)
    rng = np.random.default_rng(seed)
    a0, eps = rng.normal(size=(2, 4, 2)), rng.normal(size=(2, 4, 2))
    for t in range(1, T + 1):
        got = denoise_step(forward_noise(a0, t, eps, sched), eps, t, sched)
        want = forward_noise(a0, t - 1, eps, sched)
        np.testing.assert_allclose(got, want, atol=1e-10, rtol=0)

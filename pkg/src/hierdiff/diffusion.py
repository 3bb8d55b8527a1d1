"""Noise schedules, stage-conditioned sampling and the noise-prediction loss."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

ALPHA_FLOOR = 1e-8


@dataclass
class NoiseSchedule:
    T: int
    s: float
    alpha: np.ndarray          # alpha[0..T], floored
    alpha_raw: np.ndarray      # before flooring
    mode: str = "ode"          # "ode" (deterministic) or "sde" (variance preserving)

    def __post_init__(self):
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"mode must be 'ode' or 'sde', got {self.mode!r}")

    def sigma(self, t: int, t_prev: int | None = None) -> float:
        if self.mode == "ode":
            if not 1 <= t <= self.T:
                raise ValueError(f"t={t} outside 1..{self.T}")
            return 0.0
        return vp_sigma(self, t, t_prev)

    @property
    def sigmas(self) -> np.ndarray:
        """sigma_1..sigma_T for single-step transitions."""
        return np.array([self.sigma(t) for t in range(1, self.T + 1)])


def build_cosine_schedule(T: int, s: float = 0.008, mode: str = "ode",
                          floor: float = ALPHA_FLOOR) -> NoiseSchedule:
    if T < 1 or s <= 0:
        raise ValueError(f"need T >= 1 and s > 0, got T={T}, s={s}")
    t = np.arange(T + 1)
    f = np.cos(0.5 * np.pi * (t / T + s) / (1.0 + s)) ** 2
    raw = f / f[0]
    raw[0] = 1.0
    return NoiseSchedule(T=T, s=s, alpha=np.maximum(raw, floor), alpha_raw=raw, mode=mode)


def vp_sigma(schedule: NoiseSchedule, t: int, t_prev: int | None = None) -> float:
    """Variance-preserving reverse noise scale for the jump ``t -> t_prev`` (default t-1)."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"vp_sigma undefined at t={t}; need 1 <= t <= {schedule.T}")
    t_prev = t - 1 if t_prev is None else t_prev
    a_t, a_prev = schedule.alpha[t], schedule.alpha[t_prev]
    return float(np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev))


@dataclass(frozen=True)
class StageSchedule:
    boundaries: tuple[int, ...]

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if len(b) < 2 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"stage boundaries must start at 0 and increase strictly, got {b}")

    @classmethod
    def from_fractions(cls, T: int, fractions: Sequence[float]) -> "StageSchedule":
        return cls(tuple(int(round(f * T)) for f in fractions))

    @property
    def K(self) -> int:
        return len(self.boundaries) - 1

    @property
    def T(self) -> int:
        return self.boundaries[-1]

    def stage_of(self, t: int) -> int:
        """Unique 1-based k with boundaries[k-1] < t <= boundaries[k]."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside 1..{self.T}")
        return int(np.searchsorted(self.boundaries, t, side="left"))


def stage_of(t: int, stages: StageSchedule) -> int:
    return stages.stage_of(t)


def scale_for_step(t: int, stages: StageSchedule, K: int, literal: bool = False) -> int:
    """1-based feature scale used at denoising step t.

    Coarse scales go with high noise: stage k maps to scale K - k + 1.
    ``literal=True`` pairs stage k with scale k instead.
    """
    k = stages.stage_of(t)
    if stages.K != K:
        raise ValueError(f"{stages.K} stages cannot index {K} feature scales")
    return k if literal else K - k + 1


def conditioning_features(F, t: int, stages: StageSchedule, literal: bool = False) -> list[Tensor]:
    """Per-layer cumulative features at the scale paired with step t."""
    return F.scale(scale_for_step(t, stages, F.K, literal))


def forward_noise(a0, t: int | np.ndarray, eps, schedule: NoiseSchedule):
    """``sqrt(alpha_t) a0 + sqrt(1 - alpha_t) eps``; t may be per-sample (leading axis)."""
    alpha = np.asarray(schedule.alpha[t], dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    alpha = alpha.reshape(alpha.shape + (1,) * (a0.ndim - alpha.ndim))
    return np.sqrt(alpha) * a0 + np.sqrt(1.0 - alpha) * np.asarray(eps)


def denoise_step(a_t, eps_hat, t: int, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                 t_prev: int | None = None, clip_x0: float | None = None) -> np.ndarray:
    """One reverse update ``a_t -> a_{t_prev}`` (t_prev defaults to t - 1).

    With ``clip_x0`` the implied clean chunk is clipped to ``[-clip_x0, clip_x0]``
    and the noise estimate recomputed from it.  Near t = T, where alpha_t is
    tiny, this stops small noise-prediction errors from being amplified by
    ``1 / sqrt(alpha_t)``.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside 1..{schedule.T}")
    t_prev = t - 1 if t_prev is None else t_prev
    a_t = np.asarray(a_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    al, ap = schedule.alpha[t], schedule.alpha[t_prev]
    sigma = schedule.sigma(t, t_prev)
    rest = 1.0 - ap - sigma**2
    if rest < -1e-12:
        raise ValueError(f"inconsistent schedule at t={t}: 1 - alpha_prev - sigma^2 = {rest}")
    x0 = (a_t - np.sqrt(1.0 - al) * eps_hat) / np.sqrt(al)
    if clip_x0 is not None:
        x0 = np.clip(x0, -clip_x0, clip_x0)
        eps_hat = (a_t - np.sqrt(al) * x0) / np.sqrt(1.0 - al)
    out = np.sqrt(ap) * x0 + np.sqrt(max(rest, 0.0)) * eps_hat
    if sigma > 0.0:
        if rng is None:
            raise ValueError("stochastic step needs an rng")
        out = out + sigma * rng.standard_normal(a_t.shape)
    return out


def inference_timesteps(T: int, steps: int | None = None) -> list[int]:
    """Descending visit order ``[T, ..., 0]``; a strided subsequence when steps < T."""
    if steps is None or steps >= T:
        return list(range(T, -1, -1))
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return [int(x) for x in ts[::-1]]


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Three-layer MLP predicting the noise in a flattened action chunk.

    Hidden pre-activations receive a projected timestep embedding plus a
    linear projection of the (flattened features, proprio) conditioning.
    """

    def __init__(self, horizon: int, action_dim: int, feature_dim: int, proprio_dim: int,
                 width: int = 256, temb_dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.horizon, self.action_dim = horizon, action_dim
        self.feature_dim, self.proprio_dim = feature_dim, proprio_dim
        self.temb_dim = temb_dim
        d_in = horizon * action_dim

        def lin(name, fan_in, fan_out, gain=1.0):
            w = Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out)),
                       requires_grad=True, name=f"den/{name}/w")
            b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"den/{name}/b")
            return w, b

        self.l1 = lin("l1", d_in, width)
        self.l2 = lin("l2", width, width)
        self.l3 = lin("l3", width, d_in, gain=0.1)
        self.temb = lin("temb", temb_dim, width)
        self.feat = lin("feat", feature_dim, width)
        self.prop = lin("prop", proprio_dim, width) if proprio_dim else None

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for pair in (self.l1, self.l2, self.l3, self.temb, self.feat, self.prop):
            if pair is not None:
                out[pair[0].name] = pair[0]
                out[pair[1].name] = pair[1]
        return out

    def condition(self, features: Tensor, proprio=None) -> Tensor:
        """Project flattened features ``(B, feature_dim)`` and proprio into the hidden width."""
        features = nx.as_tensor(features)
        if features.shape[-1] != self.feature_dim:
            raise ValueError(f"feature dim {features.shape} != {self.feature_dim}")
        c = nx.linear(features, *self.feat)
        if self.prop is not None:
            c = c + nx.linear(nx.as_tensor(proprio), *self.prop)
        return c

    def __call__(self, a_t, t, cond: Tensor) -> Tensor:
        a_t = nx.as_tensor(a_t)
        B = a_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        temb = nx.linear(Tensor(sinusoidal_embedding(t, self.temb_dim)), *self.temb)
        x = nx.reshape(a_t, (B, self.horizon * self.action_dim))
        h = nx.silu(nx.linear(x, *self.l1) + temb + cond)
        h = nx.silu(nx.linear(h, *self.l2) + temb + cond)
        return nx.reshape(nx.linear(h, *self.l3), (B, self.horizon, self.action_dim))


def flatten_layers(per_layer: Sequence[Tensor], batch: int) -> Tensor:
    """Concatenate per-layer maps ``(batch * T_o, h, w, C)`` into ``(batch, features)``."""
    flat = [nx.reshape(f, (batch, -1)) for f in per_layer]
    return flat[0] if len(flat) == 1 else nx.concat(flat, axis=1)


def predict_noise(denoiser: Denoiser, a_t, t, features, proprio=None) -> Tensor:
    """Noise estimate for chunk ``a_t`` at step t given flattened features and proprio."""
    return denoiser(a_t, t, denoiser.condition(features, proprio))


@dataclass
class SampleTrace:
    steps: list[int]
    chunks: list[np.ndarray]

    def at(self, t: int) -> np.ndarray:
        return self.chunks[self.steps.index(t)]


def sample_action(denoiser, F, q, schedule: NoiseSchedule, stages: StageSchedule,
                  rng: np.random.Generator, batch: int | None = None, steps: int | None = None,
                  hierarchical: bool = True, literal: bool = False, trace: bool = False,
                  clip_x0: float | None = None):
    """Run the reverse chain from standard normal noise to a clean chunk.

    ``F`` is either :class:`MultiScaleFeatures` for ``batch`` observations
    (maps of shape ``(batch * frames, h, w, C)``) or a callable mapping a
    1-based scale to ready-made denoiser conditioning.  Conditioning is
    computed once per scale.  Without ``hierarchical`` every step uses the
    finest scale.  Returns ``(a0, trace or None)``.
    """
    if callable(F):
        cond_for_scale, K = F, stages.K
    else:
        K = F.K
        batch = batch or F.fhat[0][0].shape[0]
        cond_for_scale = lambda c: denoiser.condition(flatten_layers(F.scale(c), batch), q)
    if batch is None:
        raise ValueError("batch size required with a conditioning callable")
    cache: dict[int, Tensor] = {}
    a = rng.standard_normal((batch, denoiser.horizon, denoiser.action_dim))
    ts = inference_timesteps(schedule.T, steps)
    tr = SampleTrace([ts[0]], [a.copy()]) if trace else None
    with nx.no_grad():
        for t, t_prev in zip(ts[:-1], ts[1:]):
            c = scale_for_step(t, stages, K, literal) if hierarchical else K
            if c not in cache:
                cache[c] = cond_for_scale(c)
            eps_hat = denoiser(a, t, cache[c])
            eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            a = denoise_step(a, eps_hat, t, schedule, rng, t_prev, clip_x0)
            if tr is not None:
                tr.steps.append(t_prev)
                tr.chunks.append(a.copy())
    return a, tr


def write_trace_csv(path, trace: SampleTrace, sample: int = 0) -> None:
    """Rows ``(t, chunk_index, action_dim, value)`` for every recorded a_t of one sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "chunk_index", "action_dim", "value"])
        for t, chunk in zip(trace.steps, trace.chunks):
            for i in range(chunk.shape[1]):
                for d in range(chunk.shape[2]):
                    w.writerow([t, i, d, repr(float(chunk[sample, i, d]))])


def diffusion_loss(denoiser, cond, a0, schedule: NoiseSchedule, rng: np.random.Generator,
                   t: np.ndarray | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Batch mean of ``|| eps_theta(a_t, t | cond) - eps ||^2`` with t ~ U{1..T}, unit weights.

    ``cond`` may be a callable of the per-sample step array, for
    conditioning that depends on t.  ``t`` and ``eps`` override the draws.
    """
    a0 = np.asarray(a0, dtype=np.float64)
    B = a0.shape[0]
    if B == 0:
        raise ValueError("diffusion_loss needs a nonempty batch")
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(a0.shape)
    a_t = forward_noise(a0, t, eps, schedule)
    pred = denoiser(a_t, t, cond(t) if callable(cond) else cond)
    err = nx.square(nx.as_tensor(pred) - eps)
    return nx.tsum(err) * (1.0 / B)


def total_loss(diff_loss: Tensor, cons_loss: Tensor, alpha_weight: float = 1.0) -> Tensor:
    return nx.as_tensor(diff_loss) + alpha_weight * nx.as_tensor(cons_loss)

"""Horizon bookkeeping, chunk execution and training for the layered diffusion policy."""
from __future__ import annotations

import csv
import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .diffusion import (
    Denoiser,
    StageSchedule,
    build_cosine_schedule,
    diffusion_loss,
    flatten_layers,
    sample_action,
    scale_for_step,
    total_loss,
)
from .encoder import HierarchicalEncoder, ScaleSchedule, consistency_loss
from .layering import layer_stack
from .numerics import Tensor
from .numerics.container import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


# configuration ---------------------------------------------------------------

@dataclass
class PolicyConfig:
    # observation
    image_size: int = 32
    N: int = 3
    include_far: bool = False
    d_min: float = 0.0
    d_max: float = 1.0
    T_o: int = 2
    T_a: int = 2
    T_p: int = 4
    action_dim: int = 2
    proprio_dim: int = 4
    # encoder
    resolutions: tuple = ((1, 1), (3, 3), (5, 5), (7, 7))
    channels: int = 16
    codebook_size: int = 128
    widths: tuple = (16, 32, 32)
    interp_mode: str = "bilinear"
    beta: float = 0.25
    consistency_reduction: str = "mean"
    alpha_weight: float = 1.0
    # diffusion
    T: int = 50
    inference_steps: int = 20
    s: float = 0.008
    mode: str = "ode"
    stage_fractions: tuple = (0.0, 0.4, 0.6, 0.8, 1.0)
    hierarchical: bool = True
    literal_stage_indexing: bool = False
    width: int = 256
    temb_dim: int = 64
    # optimization
    lr: float = 1e-4
    betas: tuple = (0.95, 0.999)
    weight_decay: float = 1e-6
    warmup_steps: int = 0
    epochs: int = 200
    batch_size: int = 64
    p_masking: bool = True
    # execution
    ensemble_decay: float = 0.1
    latency: int = 0
    # bookkeeping
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        self.widths = tuple(int(w) for w in self.widths)
        self.stage_fractions = tuple(float(x) for x in self.stage_fractions)
        self.betas = tuple(float(b) for b in self.betas)
        for name in ("image_size", "N", "T_o", "T_a", "T_p", "action_dim", "channels",
                     "codebook_size", "T", "inference_steps", "width", "temb_dim", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T_a > self.T_p:
            raise ValueError(f"T_a={self.T_a} exceeds T_p={self.T_p}")
        if self.epochs < 0 or self.proprio_dim < 0 or self.latency < 0:
            raise ValueError("epochs, proprio_dim and latency must be non-negative")
        if len(self.stage_fractions) != len(self.resolutions) + 1:
            raise ValueError(f"{len(self.resolutions)} scales need {len(self.resolutions) + 1} "
                             f"stage fractions, got {len(self.stage_fractions)}")
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"mode must be 'ode' or 'sde', got {self.mode!r}")

    @property
    def K(self) -> int:
        return len(self.resolutions)

    @property
    def num_layers(self) -> int:
        return self.N + 1 if self.include_far else self.N

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k == "resolutions" else list(v) if isinstance(v, tuple) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PolicyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "PolicyConfig":
        return replace(self, **kw)


def toy_config(**overrides) -> PolicyConfig:
    """Small settings sized for the 32x32 push-block world on one CPU core."""
    base = PolicyConfig(
        resolutions=((1, 1), (2, 2), (3, 3), (4, 4)),
        channels=8,
        codebook_size=64,
        widths=(8, 16, 16),
        width=128,
        temb_dim=32,
        T=50,
        inference_steps=10,
        lr=1e-3,
        epochs=60,
        batch_size=64,
    )
    return base.replace(**overrides)


def spectral_config(**overrides) -> PolicyConfig:
    """Toy settings with a 16-step prediction window so several frequency bins exist."""
    return toy_config(T_a=8, T_p=16).replace(**overrides)


# p-masking and ensembling ------------------------------------------------------

def mask_probability(t: int, total: int) -> float:
    if total <= 0:
        return 0.0
    if not 0 <= t <= total:
        raise ValueError(f"train step {t} outside [0, {total}]")
    return 1.0 - t / total


def p_mask(q, t: int, total: int, rng: np.random.Generator) -> np.ndarray:
    """Zero whole proprio rows with probability ``1 - t/total``; q is ``(B, ...)``."""
    q = np.asarray(q, dtype=np.float64)
    p = mask_probability(t, total)
    keep = rng.random(q.shape[0]) >= p
    return q * keep.reshape((-1,) + (1,) * (q.ndim - 1))


class StarvedError(RuntimeError):
    """No queued chunk covers the requested step."""


class ChunkQueue:
    """Issued chunks keyed by the tick their first action executes on.

    All methods take one lock, so a producer thread and a consumer thread
    may share an instance.
    """

    def __init__(self, horizon: int):
        self.horizon = horizon
        self._entries: deque[tuple[int, np.ndarray]] = deque()
        self._lock = threading.Lock()

    def push(self, issue_step: int, chunk: np.ndarray) -> None:
        chunk = np.asarray(chunk)
        if chunk.shape[-2] != self.horizon:
            raise ValueError(f"chunk has {chunk.shape[-2]} steps, queue horizon is {self.horizon}")
        with self._lock:
            if self._entries and issue_step <= self._entries[-1][0]:
                raise ValueError(f"issue step {issue_step} not after {self._entries[-1][0]}")
            self._entries.append((issue_step, chunk))

    def prune(self, step: int) -> None:
        """Drop chunks whose window ends before ``step``."""
        with self._lock:
            while self._entries and self._entries[0][0] + self.horizon <= step:
                self._entries.popleft()

    def covering(self, step: int) -> list[tuple[int, np.ndarray]]:
        with self._lock:
            return [(s, c) for s, c in self._entries if s <= step < s + self.horizon]

    def entries(self) -> list[tuple[int, np.ndarray]]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def ensemble_weights(n: int, decay: float) -> np.ndarray:
    """Weights for n covering chunks ordered oldest first; age counts newer covering chunks."""
    age = np.arange(n - 1, -1, -1, dtype=np.float64)
    return np.exp(-decay * age)


def weighted_mean(weights: np.ndarray, actions: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_i w_i a_i / sum_i w_i`` accumulated in order, so every caller rounds identically."""
    out = weights[0] * actions[0]
    for w, a in zip(weights[1:], actions[1:]):
        out = out + w * a
    return out / weights.sum()


def temporal_ensemble(queue: ChunkQueue, step: int, decay: float = 0.1) -> np.ndarray:
    cover = queue.covering(step)
    if not cover:
        raise StarvedError(f"no chunk covers step {step}")
    w = ensemble_weights(len(cover), decay)
    return weighted_mean(w, [c[..., step - s, :] for s, c in cover])


# execution -------------------------------------------------------------------

class ChunkExecutor:
    """Single-threaded tick model of the producer/consumer pair.

    Each :meth:`tick` (one environment step) delivers finished plans, lets an
    idle producer start a new plan once ``T_a`` ticks have passed since its
    last one, then emits the ensembled action.  A plan started at tick s sees
    the observation of tick s, arrives at ``s + latency`` and its first
    action executes on arrival.  Ticks no chunk covers repeat the previous
    action.
    """

    def __init__(self, plan: Callable[[object], np.ndarray], T_a: int, T_p: int,
                 latency: int = 0, decay: float = 0.1, initial_action=None):
        self.plan = plan
        self.T_a, self.T_p, self.latency, self.decay = T_a, T_p, latency, decay
        self.queue = ChunkQueue(T_p)
        self._inflight: tuple[int, np.ndarray] | None = None
        self._last_issue: int | None = None
        self.last_action = initial_action
        self.starved_ticks: list[int] = []
        self.max_live = 0

    def _deliver(self, n: int) -> None:
        if self._inflight is not None and self._inflight[0] <= n:
            self.queue.push(*self._inflight)
            self._inflight = None

    def tick(self, n: int, obs) -> np.ndarray:
        self._deliver(n)
        if self._inflight is None and (self._last_issue is None or n - self._last_issue >= self.T_a):
            self._inflight = (n + self.latency, np.asarray(self.plan(obs)))
            self._last_issue = n
            self._deliver(n)
        self.queue.prune(n)
        self.max_live = max(self.max_live, len(self.queue))
        try:
            action = temporal_ensemble(self.queue, n, self.decay)
        except StarvedError:
            self.starved_ticks.append(n)
            log.debug("executor starved at tick %d; holding last action", n)
            if self.last_action is None:
                raise
            action = self.last_action
        self.last_action = action
        return action


def infer_loop(plan: Callable[[object], np.ndarray], env, ticks: int, T_a: int, T_p: int,
               decay: float = 0.1, latency: int = 0, threaded: bool = False,
               tick_seconds: float = 0.01, initial_action=None) -> list[np.ndarray]:
    """Drive ``env`` for ``ticks`` steps from chunks produced by ``plan``.

    ``env`` provides ``observe()`` and ``apply(action)``.  The default
    synchronous mode runs :class:`ChunkExecutor`; ``threaded=True`` runs the
    producer on its own thread, with the consumer ticking every
    ``tick_seconds`` and holding the last action while starved.
    """
    if not threaded:
        ex = ChunkExecutor(plan, T_a, T_p, latency, decay, initial_action)
        actions = []
        for n in range(ticks):
            a = ex.tick(n, env.observe())
            env.apply(a)
            actions.append(a)
        return actions

    queue = ChunkQueue(T_p)
    latest: dict = {}
    cond = threading.Condition()
    stop = threading.Event()
    errors: list[BaseException] = []

    def producer():
        last_issue = arrival = None
        try:
            while not stop.is_set():
                with cond:
                    cond.wait_for(lambda: stop.is_set() or (
                        "obs" in latest and (last_issue is None or latest["step"] - last_issue >= T_a)))
                    if stop.is_set():
                        return
                    step, obs = latest["step"], latest["obs"]
                chunk = np.asarray(plan(obs))
                if latency:
                    time.sleep(latency * tick_seconds)
                with cond:
                    now = latest["step"]
                floor = step + latency if arrival is None else max(step + latency, arrival + 1)
                arrival = max(now, floor)
                # the chunk executes from the tick it arrives on
                queue.push(arrival, chunk)
                last_issue = step
        except BaseException as exc:  # surfaced on the consumer side
            errors.append(exc)

    worker = threading.Thread(target=producer, daemon=True)
    worker.start()
    actions = []
    last = initial_action
    try:
        for n in range(ticks):
            start = time.perf_counter()
            with cond:
                latest["step"], latest["obs"] = n, env.observe()
                cond.notify_all()
            if n == 0 and last is None:
                while not queue.entries() and not errors:
                    time.sleep(tick_seconds / 10)
            if errors:
                raise errors[0]
            queue.prune(n)
            try:
                last = temporal_ensemble(queue, n, decay)
            except StarvedError:
                log.debug("consumer starved at tick %d; holding last action", n)
                if last is None:
                    last = queue.entries()[0][1][..., 0, :]
            env.apply(last)
            actions.append(last)
            time.sleep(max(0.0, tick_seconds - (time.perf_counter() - start)))
    finally:
        stop.set()
        with cond:
            cond.notify_all()
        worker.join(timeout=5.0)
    return actions


def reference_rollout(plan: Callable[[object], np.ndarray], env, ticks: int, T_a: int,
                      decay: float = 0.1) -> list[np.ndarray]:
    """Plain loop: plan every T_a steps, average all stored plans covering the step."""
    plans: list[tuple[int, np.ndarray]] = []
    actions = []
    for n in range(ticks):
        obs = env.observe()
        if n % T_a == 0:
            plans.append((n, np.asarray(plan(obs))))
        live = [(s, c) for s, c in plans if s <= n < s + c.shape[-2]]
        a = weighted_mean(ensemble_weights(len(live), decay), [c[..., n - s, :] for s, c in live])
        env.apply(a)
        actions.append(a)
    return actions


# model -----------------------------------------------------------------------

class H3Policy:
    """Per-layer multi-scale encoder plus stage-conditioned noise predictor."""

    def __init__(self, cfg: PolicyConfig):
        self.cfg = cfg
        sched = ScaleSchedule(cfg.resolutions, cfg.channels)
        self.encoder = HierarchicalEncoder(cfg.num_layers, cfg.image_size, sched, cfg.codebook_size,
                                           cfg.widths, cfg.interp_mode, seed=cfg.seed)
        h, w = sched.final
        feature_dim = cfg.num_layers * cfg.T_o * h * w * cfg.channels
        self.denoiser = Denoiser(cfg.T_p, cfg.action_dim, feature_dim, cfg.T_o * cfg.proprio_dim,
                                 cfg.width, cfg.temb_dim, seed=cfg.seed + 1)
        self.schedule = build_cosine_schedule(cfg.T, cfg.s, cfg.mode)
        self.stages = StageSchedule.from_fractions(cfg.T, cfg.stage_fractions)
        self.trained_steps = 0

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.parameters())
        out.update(self.denoiser.parameters())
        return out

    def layer_images(self, rgb, depth) -> np.ndarray:
        """``(..., H, W, 3)`` rgb and ``(..., H, W)`` depth to ``(..., L, H, W, 3)`` layers."""
        c = self.cfg
        return layer_stack(rgb, depth, c.N, c.d_min, c.d_max, include_far=c.include_far)

    def _scale_of(self, t: int) -> int:
        if not self.cfg.hierarchical:
            return self.cfg.K
        return scale_for_step(int(t), self.stages, self.cfg.K, self.cfg.literal_stage_indexing)

    def losses(self, layers, proprio, actions, rng: np.random.Generator):
        """Return ``(total, diffusion, consistency)`` for a batch.

        ``layers`` is ``(B, T_o, L, H, W, 3)``, ``proprio`` ``(B, T_o * Q)``
        (already masked), ``actions`` ``(B, T_p, A)``.
        """
        layers = np.asarray(layers)
        B = layers.shape[0]
        feats = self.encoder(layers.reshape((B * self.cfg.T_o,) + layers.shape[2:]))
        scales = sorted({self._scale_of(t) for t in range(1, self.cfg.T + 1)})
        conds = {c: self.denoiser.condition(flatten_layers(feats.scale(c), B), proprio) for c in scales}

        def cond_for(t):
            sel = np.array([self._scale_of(ti) for ti in t])
            if len(scales) == 1:
                return conds[scales[0]]
            stacked = nx.stack([conds[c] for c in scales], axis=0)
            pos = np.searchsorted(scales, sel)
            return nx.getitem(stacked, (pos, np.arange(B)))

        diff = diffusion_loss(self.denoiser, cond_for, actions, self.schedule, rng)
        cons = consistency_loss(feats.fhat, feats.raw, self.cfg.beta, self.cfg.consistency_reduction)
        return total_loss(diff, cons, self.cfg.alpha_weight), diff, cons

    def plan(self, layers, proprio, rng: np.random.Generator, trace: bool = False):
        """Sample ``(B, T_p, A)`` chunks for ``(B, T_o, L, H, W, 3)`` layered observations."""
        layers = np.asarray(layers)
        B = layers.shape[0]
        with nx.no_grad():
            feats = self.encoder(layers.reshape((B * self.cfg.T_o,) + layers.shape[2:]))
            a0, tr = sample_action(self.denoiser, feats, np.asarray(proprio, dtype=np.float64),
                                   self.schedule, self.stages, rng, batch=B,
                                   steps=self.cfg.inference_steps, hierarchical=self.cfg.hierarchical,
                                   literal=self.cfg.literal_stage_indexing, trace=trace,
                                   clip_x0=1.0)
        a0 = np.clip(a0, -1.0, 1.0)
        return (a0, tr) if trace else a0

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)


def load_policy(path) -> tuple[H3Policy, dict]:
    meta, arrays = load_checkpoint(path)
    policy = H3Policy(PolicyConfig.from_dict(meta["config"]))
    policy.load_state_arrays({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    policy.trained_steps = int(meta.get("step", 0))
    return policy, meta


class PolicyController:
    """Closed-loop controller for :func:`hierdiff.toyworld.evaluate`.

    Keeps a T_o-frame history per episode and runs one batched
    :class:`ChunkExecutor` over all episodes in lock-step.
    """

    def __init__(self, policy: H3Policy, seed: int = 0, latency: int | None = None):
        self.policy = policy
        self.seed = seed
        self.latency = policy.cfg.latency if latency is None else latency
        self.tick_count = 0
        self.executor: ChunkExecutor | None = None

    def reset(self, n: int) -> None:
        cfg = self.policy.cfg
        self.rng = np.random.default_rng(self.seed)
        self.history: deque = deque(maxlen=cfg.T_o)
        self.tick_count = 0
        self.executor = ChunkExecutor(self._plan, cfg.T_a, cfg.T_p, self.latency, cfg.ensemble_decay,
                                      initial_action=np.zeros((n, cfg.action_dim)))

    def _plan(self, obs) -> np.ndarray:
        layers, q = obs
        return self.policy.plan(layers, q, self.rng)

    def observation(self, frames, proprios):
        rgb = np.stack([f.rgb for f in frames])
        depth = np.stack([f.depth for f in frames])
        entry = (self.policy.layer_images(rgb, depth), np.asarray(proprios, dtype=np.float64))
        if not self.history:
            self.history.extend([entry] * self.policy.cfg.T_o)
        else:
            self.history.append(entry)
        layers = np.stack([h[0] for h in self.history], axis=1)
        q = np.concatenate([h[1] for h in self.history], axis=1)
        return layers, q

    def act(self, states, frames, proprios) -> np.ndarray:
        obs = self.observation(frames, proprios)
        a = self.executor.tick(self.tick_count, obs)
        self.tick_count += 1
        return a


# training --------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingSet:
    """Flattened (observation, chunk) samples with layered frames precomputed once."""

    layers: np.ndarray        # (frames, L, H, W, 3) float32
    proprio: np.ndarray       # (frames, Q)
    frame_index: np.ndarray   # (samples, T_o) rows into layers/proprio
    actions: np.ndarray       # (samples, T_p, A)

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def build(cls, episodes, policy: H3Policy) -> "TrainingSet":
        cfg = policy.cfg
        if not episodes:
            raise ValueError("training needs at least one episode")
        layers, proprio, index, chunks = [], [], [], []
        offset = 0
        for ep in episodes:
            layers.append(policy.layer_images(ep.rgb, ep.depth).astype(np.float32))
            proprio.append(ep.proprio)
            L = ep.length
            padded = np.concatenate([ep.actions, np.zeros((cfg.T_p, ep.actions.shape[1]))])
            for i in range(max(L, 1)):
                hist = np.clip(np.arange(i - cfg.T_o + 1, i + 1), 0, None)
                index.append(offset + hist)
                chunks.append(padded[i:i + cfg.T_p])
            offset += len(ep.rgb)
        return cls(np.concatenate(layers), np.concatenate(proprio), np.array(index),
                   np.array(chunks, dtype=np.float64))

    def batch(self, idx: np.ndarray):
        rows = self.frame_index[idx]
        layers = self.layers[rows].astype(np.float64)
        q = self.proprio[rows].reshape(len(idx), -1)
        return layers, q, self.actions[idx]


METRIC_COLUMNS = ("epoch", "diffusion_loss", "consistency_loss", "total_loss", "eval_success_rate")


@dataclass
class TrainResult:
    policy: H3Policy
    metrics: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def _rng_state(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return json.loads(json.dumps(st, default=int))


def save_training_checkpoint(path, policy: H3Policy, opt: nx.AdamW, epoch: int, step: int,
                             rng: np.random.Generator, metrics: list[dict]) -> None:
    arrays = {f"param/{k}": v for k, v in policy.state_arrays().items()}
    arrays.update({f"optim/{k}": v for k, v in opt.state_arrays().items()})
    meta = {"config": policy.cfg.to_dict(), "epoch": epoch, "step": step,
            "rng": _rng_state(rng), "metrics": metrics}
    save_checkpoint(path, arrays, meta)


def _write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in METRIC_COLUMNS})


def train(episodes, cfg: PolicyConfig, out_dir=None, evaluator: Callable[[H3Policy], float] | None = None,
          resume=None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a policy to expert episodes with AdamW and cosine learning-rate decay.

    Writes ``metrics.csv`` and checkpoints under ``out_dir`` when given.
    ``resume`` is a checkpoint path written by an earlier call with the same
    config; training continues from its epoch with its optimizer and rng state.
    """
    policy = H3Policy(cfg)
    data = TrainingSet.build(list(episodes), policy)
    params = list(policy.parameters().values())
    opt = nx.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    start_epoch, step = 0, 0
    result = TrainResult(policy)
    if resume is not None:
        meta, arrays = load_checkpoint(resume)
        if meta["config"] != cfg.to_dict():
            raise ValueError("resume checkpoint was written with a different config")
        policy.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        opt.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("optim/")})
        rng.bit_generator.state = meta["rng"]
        start_epoch, step = meta["epoch"], meta["step"]
        result.metrics = list(meta["metrics"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            layers, q, acts = data.batch(idx)
            if cfg.p_masking:
                q = p_mask(q, step, total_steps, rng)
            opt.lr = nx.cosine_lr(cfg.lr, step, total_steps, cfg.warmup_steps)
            opt.zero_grad()
            tot, diff, cons = policy.losses(layers, q, acts, rng)
            vals = np.array([diff.item(), cons.item(), tot.item()])
            if not np.all(np.isfinite(vals)):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: diffusion={vals[0]} "
                    f"consistency={vals[1]} total={vals[2]}")
            nx.backward(tot)
            opt.step()
            sums += vals * len(idx)
            step += 1
            policy.trained_steps = step
        means = sums / len(data)
        row = {"epoch": epoch, "diffusion_loss": float(means[0]), "consistency_loss": float(means[1]),
               "total_loss": float(means[2]), "eval_success_rate": None}
        if evaluator is not None and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            row["eval_success_rate"] = float(evaluator(policy))
        result.metrics.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            _write_metrics(out / "metrics.csv", result.metrics)
            if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or epoch == cfg.epochs:
                path = out / f"ckpt_epoch{epoch:04d}.bin"
                save_training_checkpoint(path, policy, opt, epoch, step, rng, result.metrics)
                result.checkpoints.append(str(path))
    return result

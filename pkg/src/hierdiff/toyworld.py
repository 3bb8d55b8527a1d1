"""Deterministic 2.5-D push-block world seen by a top-down RGB-D camera.

A disc-shaped pusher (the agent) must shove a disc-shaped block onto a
fixed goal spot on a square table.  Objects have distinct heights, so the
orthographic depth image separates them into different depth bins.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layering import RgbdFrame
from .numerics.container import read_container, write_container

DATA_MAGIC = "HIERDIFF-DATA-1"


@dataclass(frozen=True)
class WorldConfig:
    resolution: int = 32
    bound: float = 1.0
    agent_radius: float = 0.1
    block_radius: float = 0.2            # the block's half-width
    agent_height: float = 0.85
    block_height: float = 0.58
    goal: tuple[float, float] = (0.0, 0.6)
    speed: float = 0.1                   # displacement per step at unit action
    episode_cap: int = 60
    d_min: float = 0.0
    d_max: float = 1.0                   # camera-to-table distance
    depth_noise: float = 0.0
    demo_noise: float = 0.2              # executed-action noise while recording clean expert labels
    agent_rgb: tuple[float, float, float] = (0.9, 0.25, 0.2)
    block_rgb: tuple[float, float, float] = (0.2, 0.35, 0.9)
    goal_rgb: tuple[float, float, float] = (0.3, 0.8, 0.3)
    table_rgb: tuple[float, float, float] = (0.55, 0.55, 0.5)

    @property
    def success_radius(self) -> float:
        return 1.5 * self.block_radius

    def flat(self) -> "WorldConfig":
        """Variant where agent and block share one height."""
        return replace(self, agent_height=self.block_height)


@dataclass
class WorldState:
    agent: np.ndarray
    block: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    goal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.6]))

    def copy(self) -> "WorldState":
        return WorldState(self.agent.copy(), self.block.copy(), self.velocity.copy(), self.goal.copy())


def proprio(state: WorldState) -> np.ndarray:
    """(x, y, vx, vy) with velocity in action units."""
    return np.concatenate([state.agent, state.velocity])


def is_success(state: WorldState, cfg: WorldConfig) -> bool:
    return bool(np.linalg.norm(state.block - state.goal) <= cfg.success_radius)


def reset(rng: np.random.Generator, cfg: WorldConfig = WorldConfig()) -> WorldState:
    """Block in the middle band of the table, agent starting near the edge opposite the goal."""
    goal = np.array(cfg.goal, dtype=float)
    block = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.35, 0.05)])
    agent = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-0.88, -0.7)])
    return WorldState(agent=agent, block=block, velocity=np.zeros(2), goal=goal)


def _overlap(p, q, half: float) -> np.ndarray:
    """Per-axis penetration depth of two axis-aligned squares whose half-widths sum to ``half``."""
    return half - np.abs(q - p)


def step(state: WorldState, action, cfg: WorldConfig = WorldConfig()) -> WorldState:
    """Move the agent by ``speed * clip(action)``.

    Agent and block are axis-aligned squares.  An overlapping block is
    pushed out along the axis of least penetration; a block pinned against
    the table edge stops the agent at contact.
    """
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    nxt = state.copy()
    nxt.velocity = a
    if not a.any():
        return nxt
    lim_a = cfg.bound - cfg.agent_radius
    lim_b = cfg.bound - cfg.block_radius
    reach = cfg.agent_radius + cfg.block_radius
    nxt.agent = np.clip(state.agent + cfg.speed * a, -lim_a, lim_a)
    pen = _overlap(nxt.agent, nxt.block, reach)
    if np.all(pen > 0):
        ax = int(np.argmin(pen))
        side = 1.0 if nxt.block[ax] >= nxt.agent[ax] else -1.0
        nxt.block[ax] = np.clip(nxt.block[ax] + side * pen[ax], -lim_b, lim_b)
        pen = _overlap(nxt.agent, nxt.block, reach)
        if np.all(pen > 0):
            nxt.agent[ax] -= side * pen[ax]
    return nxt


def _grid(cfg: WorldConfig):
    n = cfg.resolution
    centers = -cfg.bound + (np.arange(n) + 0.5) * (2 * cfg.bound / n)
    xs = centers[None, :].repeat(n, 0)
    ys = centers[::-1][:, None].repeat(n, 1)
    return xs, ys, 2 * cfg.bound / n


def _square(xs, ys, pix, center, half):
    cx = np.clip((half - np.abs(xs - center[0])) / pix + 0.5, 0.0, 1.0)
    cy = np.clip((half - np.abs(ys - center[1])) / pix + 0.5, 0.0, 1.0)
    return cx * cy


def render_rgbd(state: WorldState, cfg: WorldConfig = WorldConfig(),
                rng: np.random.Generator | None = None) -> RgbdFrame:
    """Orthographic top-down view; depth is camera distance minus surface height.

    Colors are area-weighted at object edges; depth takes the object's value
    on pixels it covers at least half.
    """
    xs, ys, pix = _grid(cfg)
    rgb = np.empty(xs.shape + (3,))
    rgb[:] = cfg.table_rgb
    depth = np.full(xs.shape, cfg.d_max)
    layers = [
        (state.goal, cfg.block_radius, cfg.goal_rgb, 0.0),
        (state.block, cfg.block_radius, cfg.block_rgb, cfg.block_height),
        (state.agent, cfg.agent_radius, cfg.agent_rgb, cfg.agent_height),
    ]
    for center, half, color, height in layers:
        cov = _square(xs, ys, pix, center, half)
        rgb = rgb * (1.0 - cov[..., None]) + np.asarray(color) * cov[..., None]
        if height > 0:
            depth = np.where(cov >= 0.5, cfg.d_max - height, depth)
    if cfg.depth_noise > 0:
        if rng is None:
            raise ValueError("depth noise needs an rng")
        depth = depth + rng.normal(0.0, cfg.depth_noise, size=depth.shape)
    return RgbdFrame(rgb=rgb, depth=depth, d_min=cfg.d_min, d_max=cfg.d_max)


def _segment_hits_box(start, end, center, half) -> bool:
    """Whether the segment start->end passes through the open square around ``center``."""
    t0, t1 = 0.0, 1.0
    d = end - start
    for ax in range(2):
        lo, hi = center[ax] - half, center[ax] + half
        if abs(d[ax]) < 1e-12:
            if not lo < start[ax] < hi:
                return False
            continue
        ta, tb = sorted(((lo - start[ax]) / d[ax], (hi - start[ax]) / d[ax]))
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return False
    return True


def _move_to(target, state: WorldState, cfg: WorldConfig) -> np.ndarray:
    d = (target - state.agent) / cfg.speed
    n = np.linalg.norm(d)
    return d / n if n > 1.0 else d


def expert_action(state: WorldState, cfg: WorldConfig = WorldConfig()) -> np.ndarray:
    """Scripted pusher: first line the block up with the goal sideways, then push it straight on.

    Each phase walks to a contact point on the far side of the block from
    the push direction (going around the block when the direct path is
    obstructed), then pushes while correcting its offset along the contact face.
    """
    reach = cfg.agent_radius + cfg.block_radius
    off = state.goal - state.block
    if np.linalg.norm(off) < 0.5 * cfg.success_radius:
        return np.zeros(2)
    ax = 0 if abs(off[0]) > 0.06 else 1
    other = 1 - ax
    sgn = 1.0 if off[ax] > 0 else -1.0
    contact = state.block.copy()
    contact[ax] -= sgn * (reach + 0.02)
    rel = state.agent - state.block
    behind = -sgn * rel[ax]
    if reach - 0.04 <= behind <= reach + 0.1 and abs(rel[other]) < 0.08:
        a = np.zeros(2)
        a[ax] = sgn
        a[other] = np.clip(-rel[other] / 0.1, -0.5, 0.5)
        return a / np.linalg.norm(a)
    clear = reach + 0.01
    if _segment_hits_box(state.agent, contact, state.block, clear):
        # step sideways past the block's edge first, on whichever side the agent already is
        side = 1.0 if rel[other] >= 0 else -1.0
        waypoint = state.agent.copy()
        waypoint[other] = state.block[other] + side * (clear + 0.03)
        if abs(rel[other]) >= clear:
            waypoint[ax] = contact[ax]
        return _move_to(waypoint, state, cfg)
    return _move_to(contact, state, cfg)


@dataclass
class Episode:
    rgb: np.ndarray        # (L+1, H, W, 3)
    depth: np.ndarray      # (L+1, H, W)
    proprio: np.ndarray    # (L+1, 4)
    actions: np.ndarray    # (L, 2)
    success: bool

    @property
    def length(self) -> int:
        return len(self.actions)


def rollout_expert(rng: np.random.Generator, cfg: WorldConfig = WorldConfig()) -> Episode:
    """One demonstration.  The recorded actions are the clean expert labels;
    the executed ones carry ``demo_noise`` so the data visits off-path states."""
    state = reset(rng, cfg)
    states, actions = [state], []
    for _ in range(cfg.episode_cap):
        if is_success(state, cfg):
            break
        a = expert_action(state, cfg)
        actions.append(a)
        executed = a + rng.normal(0.0, cfg.demo_noise, size=2) if cfg.demo_noise > 0 else a
        state = step(state, np.clip(executed, -1.0, 1.0), cfg)
        states.append(state)
    frames = [render_rgbd(s, cfg, rng if cfg.depth_noise > 0 else None) for s in states]
    return Episode(
        rgb=np.stack([f.rgb for f in frames]),
        depth=np.stack([f.depth for f in frames]),
        proprio=np.stack([proprio(s) for s in states]),
        actions=np.array(actions).reshape(-1, 2),
        success=is_success(state, cfg),
    )


@dataclass
class Dataset:
    episodes: list[Episode]
    world: WorldConfig
    meta: dict

    def __len__(self) -> int:
        return len(self.episodes)


def _world_meta(cfg: WorldConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def world_from_meta(meta: dict) -> WorldConfig:
    return WorldConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()})


def generate_episodes(num_episodes: int, seed: int, cfg: WorldConfig = WorldConfig()) -> list[Episode]:
    seqs = np.random.SeedSequence(seed).spawn(num_episodes)
    return [rollout_expert(np.random.default_rng(s), cfg) for s in seqs]


def save_dataset(path, episodes: list[Episode], cfg: WorldConfig, horizons: dict | None = None,
                 seed: int | None = None) -> None:
    lengths = [e.length for e in episodes]
    meta = {
        "resolution": cfg.resolution,
        "horizons": horizons or {},
        "num_episodes": len(episodes),
        "lengths": lengths,
        "success": [bool(e.success) for e in episodes],
        "seed": seed,
        "world": _world_meta(cfg),
    }
    arrays = {
        "rgb": np.concatenate([e.rgb for e in episodes]).astype(np.float32),
        "depth": np.concatenate([e.depth for e in episodes]).astype(np.float32),
        "proprio": np.concatenate([e.proprio for e in episodes]),
        "actions": np.concatenate([e.actions for e in episodes]),
    }
    write_container(path, DATA_MAGIC, arrays, meta)


def load_dataset(path) -> Dataset:
    meta, arrays = read_container(path, DATA_MAGIC)
    episodes = []
    f0 = a0 = 0
    for L, ok in zip(meta["lengths"], meta["success"]):
        episodes.append(Episode(
            rgb=arrays["rgb"][f0:f0 + L + 1],
            depth=arrays["depth"][f0:f0 + L + 1],
            proprio=arrays["proprio"][f0:f0 + L + 1],
            actions=arrays["actions"][a0:a0 + L],
            success=bool(ok),
        ))
        f0 += L + 1
        a0 += L
    return Dataset(episodes=episodes, world=world_from_meta(meta["world"]), meta=meta)


def generate_dataset(num_episodes: int, seed: int, path, cfg: WorldConfig = WorldConfig(),
                     horizons: dict | None = None) -> Dataset:
    """Roll out the scripted expert and write the episodes to ``path``."""
    episodes = generate_episodes(num_episodes, seed, cfg)
    save_dataset(path, episodes, cfg, horizons, seed)
    return Dataset(episodes=episodes, world=cfg, meta={"seed": seed})


class ExpertController:
    """Controller interface used by :func:`evaluate`: ``reset(n)`` then ``act(states, frames, proprios)``."""

    def __init__(self, cfg: WorldConfig = WorldConfig()):
        self.cfg = cfg

    def reset(self, n: int) -> None:
        pass

    def act(self, states, frames, proprios) -> np.ndarray:
        return np.stack([expert_action(s, self.cfg) for s in states])


class RandomController:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, n: int) -> None:
        pass

    def act(self, states, frames, proprios) -> np.ndarray:
        return self.rng.uniform(-1, 1, size=(len(states), 2))


def evaluate(controller, episodes: int = 20, seed: int = 0, cfg: WorldConfig = WorldConfig(),
             return_details: bool = False):
    """Success rate of ``controller`` over ``episodes`` lock-stepped rollouts.

    Initial states come from per-episode child seeds of ``seed``; an
    episode stops counting once the block reaches the goal.
    """
    seqs = np.random.SeedSequence(seed).spawn(episodes)
    rngs = [np.random.default_rng(s) for s in seqs]
    states = [reset(r, cfg) for r in rngs]
    done = np.array([is_success(s, cfg) for s in states])
    steps_taken = np.zeros(episodes, dtype=int)
    controller.reset(episodes)
    noise_rng = rngs if cfg.depth_noise > 0 else [None] * episodes
    for _ in range(cfg.episode_cap):
        if done.all():
            break
        frames = [render_rgbd(s, cfg, r) for s, r in zip(states, noise_rng)]
        actions = controller.act(states, frames, np.stack([proprio(s) for s in states]))
        for i in range(episodes):
            if done[i]:
                continue
            states[i] = step(states[i], actions[i], cfg)
            steps_taken[i] += 1
            done[i] = is_success(states[i], cfg)
    rate = float(done.mean())
    if return_details:
        return rate, {"success": done.copy(), "steps": steps_taken}
    return rate

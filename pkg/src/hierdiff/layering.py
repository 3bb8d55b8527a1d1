"""Depth-aware layering of RGB-D frames.

Depth bins grow linearly in width with their index, so the range close to
the camera (the workspace) is cut into finer slices than the background.
Bin ``m`` of ``N + 1`` covers normalized depth
``[m(m+1), (m+1)(m+2)) / ((N+1)(N+2))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class RgbdFrame:
    rgb: np.ndarray
    depth: np.ndarray
    d_min: float
    d_max: float
    eps: float | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if not self.d_min < self.d_max:
            raise ValueError(f"need d_min < d_max, got {self.d_min}, {self.d_max}")
        if self.eps is None:
            self.eps = default_eps(self.d_min, self.d_max)
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.rgb.shape != self.depth.shape + (3,):
            raise ValueError(f"rgb {self.rgb.shape} does not match depth {self.depth.shape}")


@dataclass
class Layer:
    rgb: np.ndarray
    mask: np.ndarray


@dataclass
class LayeredImage:
    layers: list[Layer]
    N: int
    index_map: np.ndarray = field(repr=False)

    def encoded_layers(self, include_far: bool = False) -> list[Layer]:
        """Layers fed to the encoder; the farthest bin is background unless ``include_far``."""
        return self.layers if include_far else self.layers[: self.N]


def default_eps(d_min: float, d_max: float) -> float:
    return 1e-6 * (d_max - d_min)


def assign_layer(d, d_min: float, d_max: float, eps: float | None = None, N: int = 3):
    """Layer index of depth ``d`` (scalar or array); out-of-range depths are clamped."""
    if eps is None:
        eps = default_eps(d_min, d_max)
    d = np.clip(np.asarray(d, dtype=np.float64), d_min, d_max)
    frac = (d - d_min) / (d_max - d_min + eps)
    m = np.floor(-0.5 + 0.5 * np.sqrt(1.0 + 4.0 * (N + 1) * (N + 2) * frac))
    m = np.clip(m, 0, N).astype(np.int64)
    return int(m) if m.ndim == 0 else m


def layer_bounds(N: int, d_min: float, d_max: float, eps: float | None = None) -> np.ndarray:
    """The ``N + 2`` depth edges; layer m holds depths in ``[edge[m], edge[m+1])``."""
    if N < 1:
        raise ValueError(f"need N >= 1, got {N}")
    if eps is None:
        eps = default_eps(d_min, d_max)
    m = np.arange(N + 2)
    return d_min + (d_max - d_min + eps) * m * (m + 1) / ((N + 1) * (N + 2))


def partition(frame: RgbdFrame, N: int) -> LayeredImage:
    idx = assign_layer(frame.depth, frame.d_min, frame.d_max, frame.eps, N)
    layers = []
    for m in range(N + 1):
        mask = idx == m
        layers.append(Layer(rgb=frame.rgb * mask[..., None], mask=mask))
    return LayeredImage(layers=layers, N=N, index_map=idx)


def layer_stack(rgb: np.ndarray, depth: np.ndarray, N: int, d_min: float, d_max: float,
                eps: float | None = None, include_far: bool = False) -> np.ndarray:
    """Batched partition: ``(..., H, W, 3)`` rgb to ``(..., L, H, W, 3)`` masked layers.

    L is N, or N + 1 with ``include_far``.
    """
    idx = assign_layer(depth, d_min, d_max, eps, N)
    count = N + 1 if include_far else N
    masks = idx[..., None, :, :] == np.arange(count).reshape((count, 1, 1))
    return rgb[..., None, :, :, :] * masks[..., None]

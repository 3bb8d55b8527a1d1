"""Per-layer convolutional encoders with multi-scale residual quantization.

Each depth layer ``m`` owns an encoder, a codebook and one refining
convolution per scale.  The raw feature map is quantized coarse-to-fine:
at every scale the current residual is resized down, snapped to the
codebook, resized back up and refined, and the refined piece is both added
to the running reconstruction and subtracted from the residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .numerics.gradcheck import active_tape


@dataclass(frozen=True)
class ScaleSchedule:
    resolutions: tuple[tuple[int, int], ...] = ((1, 1), (3, 3), (5, 5), (7, 7))
    channels: int = 16

    def __post_init__(self):
        res = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        object.__setattr__(self, "resolutions", res)
        if not res:
            raise ValueError("scale schedule needs K >= 1 resolutions")
        for (h0, w0), (h1, w1) in zip(res, res[1:]):
            if h1 < h0 or w1 < w0:
                raise ValueError(f"resolutions must be nondecreasing, got {res}")
        if any(h < 1 or w < 1 for h, w in res):
            raise ValueError(f"resolutions must be positive, got {res}")

    @property
    def K(self) -> int:
        return len(self.resolutions)

    @property
    def final(self) -> tuple[int, int]:
        return self.resolutions[-1]


@dataclass
class MultiScaleFeatures:
    """Cumulative features ``fhat[m][k]`` (k 0-based here) and raw encoder outputs.

    Every tensor is ``(B, h_K, w_K, C)``.  ``indices[m][k]`` holds the code
    index map at scale k's own resolution.  ``cond[m][k]`` has the value of
    ``fhat[m][k]`` with gradient routed straight through to ``raw[m]``; it is
    what downstream conditioning consumes.
    """
    fhat: list[list[Tensor]]
    raw: list[Tensor]
    indices: list[list[np.ndarray]]
    residuals: list[list[Tensor]] = field(default_factory=list)
    cond: list[list[Tensor]] = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.fhat)

    @property
    def K(self) -> int:
        return len(self.fhat[0]) if self.fhat else 0

    def scale(self, k: int) -> list[Tensor]:
        """Conditioning features at 1-based scale ``k`` across layers."""
        return [layer[k - 1] for layer in (self.cond or self.fhat)]


def _code_distances(flat: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return (
        np.sum(flat * flat, axis=1, keepdims=True)
        - 2.0 * flat @ codebook.T
        + np.sum(codebook * codebook, axis=1)[None, :]
    )


def nearest_codes(f: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest code for every cell; ties go to the lowest index."""
    C = codebook.shape[1]
    flat = f.reshape(-1, C)
    return np.argmin(_code_distances(flat, codebook), axis=1).reshape(f.shape[:-1])


def select_codes(f: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """:func:`nearest_codes`, except that under a gradient-check tape the base-point choice is replayed."""
    tape = active_tape()
    replay = tape.replay_codes() if tape is not None else None
    if replay is not None:
        return replay[0]
    idx = nearest_codes(f, codebook)
    if tape is not None:
        tape.record_codes(idx, f)
    return idx


def quantize(f, codebook) -> tuple[np.ndarray, Tensor]:
    """Snap every cell of ``f (..., C)`` to its nearest code vector.

    The forward value is exactly the selected code vectors; backward copies
    the output gradient straight through to ``f``.  The codebook receives no
    gradient here (it learns through the consistency loss).
    """
    f, codebook = nx.as_tensor(f), nx.as_tensor(codebook)
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ValueError(f"codebook must be a nonempty V x C matrix, got {codebook.shape}")
    if f.shape[-1] != codebook.shape[1]:
        raise ValueError(f"feature channels {f.shape} do not match codebook {codebook.shape}")
    idx = select_codes(f.data, codebook.data)
    codes = codebook.data[idx]
    tape = active_tape()
    # under a tape the output is f + sg(code - f), with the offset frozen at the base point
    out = f.data + tape.freeze(codes - f.data) if tape is not None else codes
    return idx, nx.make_op(out, (f,), lambda g: (g,))


def code_lookup(codebook: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``codebook`` at ``idx``; backward scatter-adds into the selected rows."""
    V, C = codebook.shape

    def bw(g):
        gz = np.zeros((V, C))
        np.add.at(gz, idx.reshape(-1), g.reshape(-1, C))
        return (gz,)

    return nx.make_op(codebook.data[idx], (codebook,), bw)


def _init_conv(rng, kh, kw, cin, cout):
    return rng.normal(0.0, np.sqrt(2.0 / (kh * kw * cin)), size=(kh, kw, cin, cout))


class LayerEncoder:
    """Stride-2 conv stages, 1x1 projection to C channels, bilinear resize to the final scale."""

    def __init__(self, prefix: str, image_size: int, schedule: ScaleSchedule,
                 widths=(16, 32, 32), in_channels: int = 3, rng=None):
        rng = rng or np.random.default_rng(0)
        self.image_size = image_size
        self.schedule = schedule
        self.params: dict[str, Tensor] = {}
        cin = in_channels
        self.stages = []
        for i, w in enumerate(widths):
            kw_ = Tensor(_init_conv(rng, 3, 3, cin, w), requires_grad=True, name=f"{prefix}/conv{i}/w")
            kb = Tensor(np.zeros(w), requires_grad=True, name=f"{prefix}/conv{i}/b")
            self.stages.append((kw_, kb))
            self.params[kw_.name] = kw_
            self.params[kb.name] = kb
            cin = w
        self.proj_w = Tensor(_init_conv(rng, 1, 1, cin, schedule.channels) * 0.5,
                             requires_grad=True, name=f"{prefix}/proj/w")
        self.proj_b = Tensor(np.zeros(schedule.channels), requires_grad=True, name=f"{prefix}/proj/b")
        self.params[self.proj_w.name] = self.proj_w
        self.params[self.proj_b.name] = self.proj_b

    def __call__(self, image) -> Tensor:
        image = nx.as_tensor(image)
        if image.shape[-3:] != (self.image_size, self.image_size, 3):
            raise ValueError(
                f"layer image {image.shape} does not match encoder resolution "
                f"{self.image_size}x{self.image_size}x3")
        x = image
        for w, b in self.stages:
            x = nx.silu(nx.conv2d(x, w, b, stride=2, padding=1))
        x = nx.conv2d(x, self.proj_w, self.proj_b)
        h, w = self.schedule.final
        return nx.interpolate(x, h, w, "bilinear")


class Refiner:
    """3x3 convolution initialized to the identity map."""

    def __init__(self, prefix: str, channels: int):
        k = np.zeros((3, 3, channels, channels))
        k[1, 1] = np.eye(channels)
        self.w = Tensor(k, requires_grad=True, name=f"{prefix}/w")
        self.b = Tensor(np.zeros(channels), requires_grad=True, name=f"{prefix}/b")
        self.params = {self.w.name: self.w, self.b.name: self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.w, self.b, padding=1)


def multiscale_encode_layer(f: Tensor, codebook: Tensor, refiners, schedule: ScaleSchedule,
                            mode: str = "bilinear"):
    """Residual quantization of one raw map ``f``; returns (fhat list, indices, refined pieces).

    Codes are chosen on the stop-gradient residual, so ``fhat`` carries
    gradient only into the codebook and refiners.
    """
    hK, wK = schedule.final
    if f.shape[-3:-1] != (hK, wK) or f.shape[-1] != codebook.shape[1]:
        raise ValueError(f"feature map {f.shape} does not match schedule final "
                         f"{(hK, wK)} with C={codebook.shape[1]}")
    residual = nx.sg(nx.as_tensor(f)).data
    cum = None
    fhat, indices, pieces = [], [], []
    for (h, w), refine in zip(schedule.resolutions, refiners):
        down = nx.interpolate(residual, h, w, mode).data
        idx = select_codes(down, codebook.data)
        piece = refine(nx.interpolate(code_lookup(codebook, idx), hK, wK, mode))
        cum = piece if cum is None else cum + piece
        fhat.append(cum)
        indices.append(idx)
        pieces.append(piece)
        residual = residual - piece.data
    return fhat, indices, pieces


def straight_through(f: Tensor, fhat: Tensor) -> Tensor:
    """Value of ``fhat``, gradient copied to ``f``: ``f + sg(fhat - f)``."""
    return f + nx.sg(fhat - f)


class HierarchicalEncoder:
    """One encoder, codebook and refiner stack per encoded depth layer."""

    def __init__(self, num_layers: int, image_size: int, schedule: ScaleSchedule,
                 codebook_size: int = 128, widths=(16, 32, 32), interp_mode: str = "bilinear",
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.num_layers = num_layers
        self.schedule = schedule
        self.interp_mode = interp_mode
        self.encoders = [LayerEncoder(f"enc/{m}", image_size, schedule, widths, rng=rng)
                         for m in range(num_layers)]
        self.codebooks = [
            Tensor(rng.normal(0.0, 0.5, size=(codebook_size, schedule.channels)),
                   requires_grad=True, name=f"codebook/{m}")
            for m in range(num_layers)
        ]
        self.refiners = [[Refiner(f"refine/{m}/{k + 1}", schedule.channels) for k in range(schedule.K)]
                         for m in range(num_layers)]

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m in range(self.num_layers):
            out.update(self.encoders[m].params)
            out[self.codebooks[m].name] = self.codebooks[m]
            for r in self.refiners[m]:
                out.update(r.params)
        return out

    def encode_layer(self, m: int, image) -> Tensor:
        return self.encoders[m](image)

    def __call__(self, layers) -> MultiScaleFeatures:
        """Encode a ``(B, L, H, W, 3)`` batch of layered images."""
        layers = np.asarray(getattr(layers, "data", layers))
        if layers.ndim != 5 or layers.shape[1] != self.num_layers:
            raise ValueError(f"expected (B, {self.num_layers}, H, W, 3) layers, got {layers.shape}")
        fhat, raw, indices, residuals, cond = [], [], [], [], []
        for m in range(self.num_layers):
            f = self.encode_layer(m, layers[:, m])
            fh, idx, pieces = multiscale_encode_layer(f, self.codebooks[m], self.refiners[m],
                                                      self.schedule, self.interp_mode)
            raw.append(f)
            fhat.append(fh)
            indices.append(idx)
            residuals.append(pieces)
            cond.append([straight_through(f, x) for x in fh])
        return MultiScaleFeatures(fhat=fhat, raw=raw, indices=indices, residuals=residuals, cond=cond)


def consistency_loss(fhat, raw, beta: float = 0.25, reduction: str = "mean") -> Tensor:
    """Two-sided stop-gradient loss tying every cumulative scale to the raw feature.

    ``fhat[m][k]`` and ``raw[m]`` as in :class:`MultiScaleFeatures`.  With
    ``reduction="mean"`` each squared norm is averaged over its elements;
    ``"sum"`` keeps plain squared norms.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    reduce = nx.mean if reduction == "mean" else nx.tsum
    total = None
    for layer_hats, f in zip(fhat, raw):
        f, f_sg = nx.as_tensor(f), nx.sg(nx.as_tensor(f))
        for fh in layer_hats:
            fh = nx.as_tensor(fh)
            term = reduce(nx.square(fh - f_sg)) + beta * reduce(nx.square(f - nx.sg(fh)))
            total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)

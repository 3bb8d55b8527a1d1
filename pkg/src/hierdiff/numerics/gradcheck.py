"""Central-difference gradient checking.

Losses that contain stop-gradients or straight-through quantizers are not
differentiable in the ordinary sense: their backward pass is the gradient
of a *surrogate* in which stop-gradient values and code assignments are
frozen at the evaluation point.  A :class:`SurrogateTape` records those
quantities on the first (analytic) pass and replays them while the loss is
re-evaluated at perturbed parameters, so finite differences see exactly the
function the backward pass differentiates.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad

_local = threading.local()


def active_tape() -> "SurrogateTape | None":
    return getattr(_local, "tape", None)


class SurrogateTape:
    def __init__(self):
        self.frozen: list[np.ndarray] = []
        self.codes: list[tuple[np.ndarray, np.ndarray]] = []
        self.replaying = False
        self._i = 0
        self._j = 0

    def freeze(self, value: np.ndarray) -> np.ndarray:
        if self.replaying:
            out = self.frozen[self._i]
            self._i += 1
            return out.copy()
        self.frozen.append(value.copy())
        return value.copy()

    def record_codes(self, indices: np.ndarray, inputs: np.ndarray) -> None:
        if not self.replaying:
            self.codes.append((indices.copy(), inputs.copy()))

    def replay_codes(self) -> tuple[np.ndarray, np.ndarray] | None:
        """(indices, base-point inputs) for the next quantizer call, when replaying."""
        if not self.replaying:
            return None
        out = self.codes[self._j]
        self._j += 1
        return out

    def rewind(self) -> None:
        self.replaying = True
        self._i = self._j = 0


@contextlib.contextmanager
def use_tape(tape: SurrogateTape | None):
    prev = active_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               surrogate: bool = True, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` takes no arguments and must be deterministic (fix any rng inside it).
    With ``max_coords`` only a random subset of coordinates per parameter is
    probed.
    """
    tape = SurrogateTape() if surrogate else None
    for p in params:
        p.zero_grad()
    with use_tape(tape):
        loss = f()
        backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with use_tape(tape), no_grad():
        for p, a in zip(params, analytic):
            coords = list(np.ndindex(p.shape))
            if max_coords is not None and len(coords) > max_coords:
                rng = rng or np.random.default_rng(0)
                pick = rng.choice(len(coords), size=max_coords, replace=False)
                coords = [coords[i] for i in pick]
            for idx in coords:
                orig = p.data[idx]
                p.data[idx] = orig + step
                if tape:
                    tape.rewind()
                fp = float(f().data)
                p.data[idx] = orig - step
                if tape:
                    tape.rewind()
                fm = float(f().data)
                p.data[idx] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(a[idx] - num) / max(1.0, abs(a[idx]))
                worst = max(worst, err)
    return worst

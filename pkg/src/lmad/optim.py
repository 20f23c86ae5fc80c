"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor, checked_mode
from .errors import NonFiniteError, ShapeError


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              moments: tuple[list[np.ndarray], list[np.ndarray]], t: int,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one Adam update in place.

    ``moments`` is the pair (m, v) of first/second moment buffers, updated in
    place alongside the parameters.  ``t`` is the 1-based step count used for
    bias correction.  The only state mutated anywhere in the package lives
    here (and in batch-norm running buffers).
    """
    if t < 1:
        raise ValueError(f"adam_step needs t >= 1, got {t}")
    m, v = moments
    if not (len(params) == len(grads) == len(m) == len(v)):
        raise ShapeError("adam_step: params/grads/moments length mismatch")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param shape {p.shape}")
        if checked_mode() and not np.isfinite(g).all():
            raise NonFiniteError("adam_step received a non-finite gradient")
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * (g * g)
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


class Adam:
    """Tracks moments for a fixed list of tensors and steps them together."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        adam_step([p.data for p in self.params], grads, (self._m, self._v),
                  self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

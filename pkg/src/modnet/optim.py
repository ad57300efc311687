"""Gradient ascent with Adam moment estimates and optional norm clipping."""

from __future__ import annotations

import math

import numpy as np

from modnet.autodiff import Parameter


def global_norm(grads: dict[Parameter, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


class Adam:
    """Adam ascent on a fixed parameter list.

    ``step`` expects a complete gradient dict (zeros for untouched params)
    so the moment buffers advance uniformly; that keeps checkpoint state
    independent of which branch of the network a given step exercised.
    """

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = {p: np.zeros_like(p.data) for p in self.params}
        self._v = {p: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[Parameter, np.ndarray]) -> None:
        missing = [p.name for p in self.params if p not in grads]
        if missing:
            raise KeyError(f"Adam.step: missing gradients for {missing}")
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_norm(grads)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = grads[p] * scale
            m = self._m[p]
            v = self._v[p]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            # ascent: objective is a log-likelihood
            p.data += self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": [self._m[p].copy() for p in self.params],
            "v": [self._v[p].copy() for p in self.params],
        }

    def restore(self, state: dict) -> None:
        self.t = int(state["t"])
        for p, m, v in zip(self.params, state["m"], state["v"]):
            if m.shape != p.data.shape:
                raise ValueError(
                    f"optimizer state shape {m.shape} does not match "
                    f"parameter {p.name} shape {p.data.shape}"
                )
            self._m[p] = np.asarray(m, dtype=np.float64).copy()
            self._v[p] = np.asarray(v, dtype=np.float64).copy()

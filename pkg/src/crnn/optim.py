"""Parameter update rules: adaptive per-dimension steps and a momentum baseline."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class Adadelta:
    """Accumulates decayed squared gradients and squared updates per parameter.

    No learning rate: the step scale is the ratio of the two running
    accumulators, conditioned by ``eps`` on both sides.
    """

    def __init__(self, params: Sequence[Tensor], rho: float = 0.9,
                 eps: float = 1e-6):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.sq_grad = [np.zeros_like(p.data) for p in self.params]
        self.sq_delta = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, eg2, ed2 in zip(self.params, self.sq_grad, self.sq_delta):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise UsageError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}"
                )
            eg2 *= self.rho
            eg2 += (1.0 - self.rho) * g * g
            delta = -np.sqrt(ed2 + self.eps) / np.sqrt(eg2 + self.eps) * g
            ed2 *= self.rho
            ed2 += (1.0 - self.rho) * delta * delta
            p.data += delta

    def export_state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (eg2, ed2) in enumerate(zip(self.sq_grad, self.sq_delta)):
            out[f"sq_grad.{i}"] = eg2
            out[f"sq_delta.{i}"] = ed2
        return out

    def import_state(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(len(self.params)):
            self.sq_grad[i][...] = arrays[f"sq_grad.{i}"]
            self.sq_delta[i][...] = arrays[f"sq_delta.{i}"]


class Momentum:
    """Classical momentum: velocity decays by ``mu`` and absorbs -lr * grad."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01,
                 mu: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.mu = mu
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise UsageError(
                    f"gradient shape {g.shape} != parameter shape {p.data.shape}"
                )
            v *= self.mu
            v -= self.lr * g
            p.data += v

    def export_state(self) -> dict[str, np.ndarray]:
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def import_state(self, arrays: dict[str, np.ndarray]) -> None:
        for i in range(len(self.params)):
            self.velocity[i][...] = arrays[f"velocity.{i}"]


def make_optimizer(name: str, params: Sequence[Tensor], *, rho: float = 0.9,
                   eps: float = 1e-6, lr: float = 0.01, mu: float = 0.9):
    if name == "adadelta":
        return Adadelta(params, rho=rho, eps=eps)
    if name == "momentum":
        return Momentum(params, lr=lr, mu=mu)
    raise UsageError(f"unknown optimizer {name!r}")


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def clip_gradient_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Off by default in training; recurrent nets can spike. Returns the norm
    before clipping.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm

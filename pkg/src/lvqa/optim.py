"""Adam optimizer over a named parameter set."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    """A parameter reached the optimizer step without a populated gradient."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter '{name}' has no gradient; run backward() first")


class Adam:
    """Standard Adam with bias correction.

    Updates every parameter in `params` (a name -> Tensor mapping) whose
    `requires_grad` flag is set, then zeroes the gradients it consumed.
    `lr` may be reassigned between steps (used by the plateau schedule).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(name)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

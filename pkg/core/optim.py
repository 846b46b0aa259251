from typing import List, Sequence, Tuple

import numpy as np

from core.tensor import Tensor


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], betas: Tuple[float, float] = (0.9, 0.98), eps: float = 1e-9):
        self.params: List[Tensor] = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        moments = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            moments[f"adam.m.{i}"] = m.copy()
            moments[f"adam.v.{i}"] = v.copy()
        return moments

    def load_state(self, moments: dict, step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i][...] = moments[f"adam.m.{i}"]
            self.v[i][...] = moments[f"adam.v.{i}"]
        self.step_count = step_count

    def inherit(self, other: "Adam") -> None:
        """Take over moments and step count for parameters ``other`` already tracked."""
        previous = {id(p): i for i, p in enumerate(other.params)}
        for i, p in enumerate(self.params):
            j = previous.get(id(p))
            if j is not None:
                self.m[i][...] = other.m[j]
                self.v[i][...] = other.v[j]
        self.step_count = other.step_count

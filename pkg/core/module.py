"""Parameter containers.

A :class:`Module` discovers its parameters by walking attributes: leaf
``Tensor`` objects flagged ``requires_grad`` are parameters, nested modules
and lists of modules are children. Names are dotted paths in attribute
definition order, which fixes the checkpoint order.
"""

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from core.errors import LoadError
from core.tensor import Tensor


def parameter(array: np.ndarray, name: str = None) -> Tensor:
    return Tensor(array, requires_grad=True, name=name)


def uniform_fan_in(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return parameter(np.zeros(shape))


def ones(shape: Tuple[int, ...]) -> Tensor:
    return parameter(np.ones(shape))


class Module:
    training: bool = False

    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def name_parameters(self) -> None:
        """Stamp each parameter with its dotted path so diagnostics can name it."""
        for name, p in self.named_parameters():
            p.name = name

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = OrderedDict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise LoadError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, array in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(array.shape):
                raise LoadError(f"shape mismatch for {name}: model {own[name].shape} vs stored {tuple(array.shape)}")
            own[name].data[...] = array

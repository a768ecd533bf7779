"""Parameter containers and initializers shared by the model pieces."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import BatchNormState, Tensor


class Module:
    """Walks attributes in definition order to enumerate parameters.

    Attributes that are trainable :class:`Tensor` objects, ``BatchNormState``
    objects or nested ``Module`` instances are picked up automatically.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, BatchNormState):
                yield f"{name}.gamma", val.gamma
                yield f"{name}.beta", val.beta
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, BatchNormState):
                yield f"{name}.running_mean", val.running_mean
                yield f"{name}.running_var", val.running_var
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def he_conv(rng: np.random.Generator, shape: tuple[int, ...], name: str) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True, name=name)


def uniform_dense(rng: np.random.Generator, d_out: int, d_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)), requires_grad=True, name=name)


def zeros(n: int | tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True, name=name)


def is_no_decay(name: str) -> bool:
    """Biases and BN affine parameters are excluded from weight decay."""
    return name.endswith(("_b", ".gamma", ".beta"))

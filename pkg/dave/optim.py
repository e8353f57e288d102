"""Momentum SGD with L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from dave.errors import ShapeError
from dave.tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0002
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


def sgd_step(param: Tensor, state: OptimizerState, key: str = "") -> None:
    """v <- momentum*v - lr*(grad + wd*param); param <- param + v; grad cleared."""
    key = key or param.name or str(id(param))
    if param.grad is None:
        raise ValueError(f"sgd_step: parameter {key!r} has no gradient")
    v = state.velocity.get(key)
    if v is None:
        v = np.zeros_like(param.data)
    elif v.shape != param.shape:
        raise ShapeError(f"sgd_step: velocity {v.shape} != parameter {param.shape} for {key!r}")
    v = state.momentum * v - state.learning_rate * (param.grad + state.weight_decay * param.data)
    state.velocity[key] = v.astype(param.dtype, copy=False)
    param.data = (param.data + state.velocity[key]).astype(param.dtype, copy=False)
    param.grad = None


class SGD:
    """Applies ``sgd_step`` to a fixed set of named parameters."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        learning_rate: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0002,
    ):
        self.params = dict(params)
        self.state = OptimizerState(learning_rate, momentum, weight_decay)

    @property
    def learning_rate(self) -> float:
        return self.state.learning_rate

    def set_learning_rate(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning_rate must be > 0, got {lr}")
        self.state.learning_rate = float(lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        """Updates every parameter that received a gradient.

        Parameters outside the current loss (an unused head) are skipped: no
        decay, and their velocity is left as it was.
        """
        for name, p in self.params.items():
            if p.grad is not None:
                sgd_step(p, self.state, key=name)

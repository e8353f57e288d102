"""Named-parameter bookkeeping shared by both networks."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, Mapping, Tuple

import numpy as np

from dave.errors import CheckpointError
from dave.tensor import Tensor, conv2d


class Net:
    """Holds parameters under ``<prefix>/<layer>.w`` / ``<prefix>/<layer>.b``."""

    prefix = "net"

    def __init__(self) -> None:
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def _add_conv(
        self,
        layer: str,
        out_c: int,
        in_c: int,
        kh: int,
        kw: int,
        rng: np.random.Generator,
        zero: bool = False,
    ) -> None:
        fan_in = in_c * kh * kw
        bound = math.sqrt(6.0 / fan_in)
        shape = (out_c, in_c, kh, kw)
        w = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        self.params[f"{self.prefix}/{layer}.w"] = Tensor(w, requires_grad=True, name=f"{self.prefix}/{layer}.w")
        self.params[f"{self.prefix}/{layer}.b"] = Tensor(np.zeros(out_c), requires_grad=True, name=f"{self.prefix}/{layer}.b")

    def _pair(self, layer: str) -> Tuple[Tensor, Tensor]:
        return self.params[f"{self.prefix}/{layer}.w"], self.params[f"{self.prefix}/{layer}.b"]

    def _conv(self, x: Tensor, layer: str, pad: int = 0) -> Tensor:
        w, b = self._pair(layer)
        return conv2d(x, w, b, stride=1, pad=pad)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def layer_parameters(self, layer: str) -> Dict[str, Tensor]:
        head = f"{self.prefix}/{layer}."
        return {k: v for k, v in self.params.items() if k.startswith(head)}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = [k for k in self.params if k not in arrays]
        if missing:
            raise CheckpointError(f"{self.prefix}: missing tensors {missing[:4]}")
        if strict:
            extra = [k for k in arrays if k.startswith(self.prefix + "/") and k not in self.params]
            if extra:
                raise CheckpointError(f"{self.prefix}: unexpected tensors {extra[:4]}")
        for k, p in self.params.items():
            arr = np.asarray(arrays[k])
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None

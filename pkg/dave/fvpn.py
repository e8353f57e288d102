"""Fast vehicle proposal network.

A shallow fully-convolutional net: three conv stages, then three sibling
heads whose kernels span the whole 10x10 conv3 map of a 60x60 input. On a
60x60 patch every head is 1x1; on a larger image the heads become dense
heatmaps with a stride of 4 pixels.

Layer geometry (pads 0, stride 1, 2x2/2 pools)::

    60 -conv1 5x5-> 56 -pool-> 28 -conv2 5x5-> 24 -pool-> 12 -conv3 3x3-> 10 -head 10x10-> 1
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from dave import settings
from dave.errors import LabelError, ShapeError
from dave.netbase import Net
from dave.tensor import (
    Tensor,
    binary_cross_entropy_vec,
    maxpool2d,
    relu,
    reshape,
    sigmoid,
    smooth_l1,
    softmax,
    softmax_nll,
)

VEHICLE = 1
BACKGROUND = 0


@dataclass(frozen=True)
class FvpnConfig:
    input_side: int = settings.FVPN_INPUT_SIDE
    conv1: int = 32
    conv1_kernel: int = 5
    conv2: int = 64
    conv2_kernel: int = 5
    conv3: int = 64
    conv3_kernel: int = 3
    head_kernel: int = 10
    knowledge_dim: int = settings.DEFAULT_KNOWLEDGE_DIM
    alpha: float = settings.DEFAULT_ALPHA
    beta: float = settings.DEFAULT_BETA

    def __post_init__(self) -> None:
        side = self.input_side - self.conv1_kernel + 1
        side = (side // 2) - self.conv2_kernel + 1
        side = (side // 2) - self.conv3_kernel + 1
        if side != self.head_kernel:
            raise ShapeError(
                f"FvpnConfig: conv3 map is {side}x{side} for a {self.input_side}px input, "
                f"head kernel must match (got {self.head_kernel})"
            )
        if self.knowledge_dim < 1:
            raise ValueError(f"knowledge_dim must be >= 1, got {self.knowledge_dim}")

    @property
    def stride(self) -> int:
        return settings.FVPN_STRIDE

    def heatmap_extent(self, height: int, width: int) -> Tuple[int, int]:
        """Head extents for an input of the given size."""
        def one(n: int) -> int:
            n = (n - self.conv1_kernel + 1) // 2
            n = (n - self.conv2_kernel + 1) // 2
            return n - self.conv3_kernel + 1 - self.head_kernel + 1

        return one(height), one(width)


@dataclass
class FvpnHeads:
    """Dense head outputs.

    ``class_map`` channel 0 is background, channel 1 vehicle (softmax over the
    pair). ``bbr_map`` holds (x, y, w, h) in [0, 1] relative to the receptive
    window; ``knowledge_map`` is the logistic knowledge vector.
    """

    class_logits: Tensor
    class_map: Tensor
    bbr_map: Tensor
    knowledge_map: Tensor

    @property
    def p_ve(self) -> np.ndarray:
        return self.class_map.data[:, VEHICLE]

    @property
    def extent(self) -> Tuple[int, int]:
        return self.class_map.shape[2], self.class_map.shape[3]


@dataclass
class FvpnTarget:
    """Per-patch training targets.

    ``loc_t`` is the GT box normalized to the patch, all zero for background.
    ``t_know`` is the squashed ALN feature of the paired sample.
    """

    is_vehicle: np.ndarray
    loc_t: np.ndarray
    t_know: Optional[np.ndarray] = None

    def validate(self, knowledge_dim: Optional[int] = None) -> None:
        pos = np.asarray(self.is_vehicle).astype(bool).reshape(-1)
        loc = np.asarray(self.loc_t, dtype=np.float64)
        if loc.shape != (pos.size, 4):
            raise ShapeError(f"FvpnTarget: loc_t shape {loc.shape} != ({pos.size}, 4)")
        if np.any(loc[~pos] != 0):
            raise LabelError("FvpnTarget: background sample with non-zero loc_t")
        if np.any(loc[pos] < 0) or np.any(loc[pos] > 1):
            raise LabelError("FvpnTarget: positive loc_t outside [0, 1]")
        if self.t_know is not None:
            tk = np.asarray(self.t_know)
            if knowledge_dim is not None and tk.shape != (pos.size, knowledge_dim):
                raise ShapeError(f"FvpnTarget: t_know shape {tk.shape} != ({pos.size}, {knowledge_dim})")
            if np.any(tk < 0) or np.any(tk > 1):
                raise LabelError("FvpnTarget: t_know outside [0, 1]")


class FVPN(Net):
    prefix = "fvpn"

    def __init__(self, config: Optional[FvpnConfig] = None, seed: int = 0, zero: bool = False):
        super().__init__()
        self.config = config or FvpnConfig()
        cfg = self.config
        rng = np.random.default_rng([seed, 1])
        self._add_conv("conv1", cfg.conv1, 3, cfg.conv1_kernel, cfg.conv1_kernel, rng, zero)
        self._add_conv("conv2", cfg.conv2, cfg.conv1, cfg.conv2_kernel, cfg.conv2_kernel, rng, zero)
        self._add_conv("conv3", cfg.conv3, cfg.conv2, cfg.conv3_kernel, cfg.conv3_kernel, rng, zero)
        k = cfg.head_kernel
        self._add_conv("head_cls", 2, cfg.conv3, k, k, rng, zero)
        self._add_conv("head_bbr", 4, cfg.conv3, k, k, rng, zero)
        self._add_conv("head_know", cfg.knowledge_dim, cfg.conv3, k, k, rng, zero)

    def forward(self, images: Tensor) -> FvpnHeads:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"fvpn_forward: expected [B,3,H,W] images, got {images.shape}")
        side = self.config.input_side
        if images.shape[2] < side or images.shape[3] < side:
            raise ShapeError(
                f"fvpn_forward: input {images.shape[2]}x{images.shape[3]} smaller than the {side}px receptive field"
            )
        h = maxpool2d(relu(self._conv(images, "conv1")), 2, 2)
        h = maxpool2d(relu(self._conv(h, "conv2")), 2, 2)
        h = relu(self._conv(h, "conv3"))

        logits = self._conv(h, "head_cls")
        return FvpnHeads(
            class_logits=logits,
            class_map=softmax(logits, axis=1),
            bbr_map=sigmoid(self._conv(h, "head_bbr")),
            knowledge_map=sigmoid(self._conv(h, "head_know")),
        )

    __call__ = forward


def fvpn_forward(images: Tensor, net: FVPN) -> FvpnHeads:
    return net.forward(images)


def fvpn_loss(
    heads: FvpnHeads,
    target: FvpnTarget,
    config: FvpnConfig,
    guidance: bool = True,
) -> Tuple[Tensor, Dict[str, float]]:
    """L = L_bic + alpha*L_bbox + beta*L_know, alpha = 0 for background rows.

    Returns the scalar loss and a breakdown with the weighted terms.
    """
    B = heads.class_logits.shape[0]
    if heads.extent != (1, 1):
        raise ShapeError(f"fvpn_loss: heads must be 1x1 in training, got {heads.extent}")
    target.validate(config.knowledge_dim if guidance else None)
    pos = np.asarray(target.is_vehicle).astype(bool).reshape(-1)
    if pos.size != B:
        raise ShapeError(f"fvpn_loss: {pos.size} targets for a batch of {B}")

    l_bic = softmax_nll(reshape(heads.class_logits, (B, 2)), pos.astype(np.int64))
    alpha_rows = np.where(pos, config.alpha, 0.0)
    l_bbox = smooth_l1(reshape(heads.bbr_map, (B, 4)), np.asarray(target.loc_t), alpha_rows)
    total = l_bic + l_bbox

    l_know_value = 0.0
    if guidance and config.beta > 0:
        if target.t_know is None:
            raise LabelError("fvpn_loss: knowledge guidance needs t_know")
        know = reshape(heads.knowledge_map, (B, config.knowledge_dim))
        l_know = binary_cross_entropy_vec(know, np.asarray(target.t_know)) * config.beta
        total = total + l_know
        l_know_value = l_know.item()

    breakdown = {
        "l_bic": l_bic.item(),
        "l_bbox_weighted": l_bbox.item(),
        "l_know_weighted": l_know_value,
        "l_fvpn": total.item(),
    }
    return total, breakdown


def cell_to_window(cell: Tuple[float, float], level_scale: float, config: Optional[FvpnConfig] = None) -> Tuple[float, float, float]:
    """Receptive window (x, y, side) of a heatmap cell, in original-image pixels."""
    cfg = config or FvpnConfig()
    row, col = cell
    s = float(level_scale)
    return cfg.stride * col / s, cfg.stride * row / s, cfg.input_side / s

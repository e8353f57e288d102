"""Attributes learning network.

A conv backbone (stages of 3x3 conv-relu followed by a 2x2 pool, channels
doubling per stage) ends in a 1x1 projection to ``feature_dim`` and global
average pooling. Four affine heads read the shared feature: verification
(background / vehicle), pose, color and type.

Attribute label 0 means "unavailable" (background or catch-all) and is never
supervised; real classes start at 1 and map to head column ``label - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from dave import settings
from dave.errors import LabelError, ShapeError
from dave.netbase import Net
from dave.tensor import (
    Tensor,
    add,
    constant,
    maxpool2d,
    relu,
    reshape,
    softmax,
    softmax_nll,
    spatial_mean,
)

DEPTH_STAGES: Dict[str, Tuple[int, ...]] = {
    "shallow-4": (1, 1, 1, 1),
    "mid-8": (2, 2, 2, 2),
    "deep": (3, 3, 4, 4),
}

TASKS = ("pose", "color", "type")


@dataclass(frozen=True)
class AlnConfig:
    input_side: int = settings.DEFAULT_ALN_SIDE
    depth: str = settings.DEFAULT_ALN_DEPTH
    feature_dim: int = settings.DEFAULT_KNOWLEDGE_DIM
    base_channels: int = 8
    num_poses: int = len(settings.POSES)
    num_colors: int = len(settings.COLORS)
    num_types: int = len(settings.TYPES_6)
    lambdas: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.depth not in DEPTH_STAGES:
            raise ValueError(f"unknown ALN depth {self.depth!r}; choose from {sorted(DEPTH_STAGES)}")
        if self.input_side < 2 ** len(DEPTH_STAGES[self.depth]):
            raise ShapeError(f"ALN input side {self.input_side} too small for {self.depth}")
        if self.num_types not in (6, 12):
            raise ValueError(f"num_types must be 6 or 12, got {self.num_types}")

    @property
    def stages(self) -> Tuple[int, ...]:
        return DEPTH_STAGES[self.depth]

    @property
    def head_sizes(self) -> Dict[str, int]:
        return {"verify": 2, "pose": self.num_poses, "color": self.num_colors, "type": self.num_types}


@dataclass
class AlnHeads:
    v_logits: Tensor
    p_logits: Tensor
    c_logits: Tensor
    t_logits: Tensor
    p_V: Tensor
    p_P: Tensor
    p_C: Tensor
    p_T: Tensor
    feature: Tensor


@dataclass
class AttributeLabels:
    """Per-sample V/P/C/T indices; V is 1 for vehicle, 0 for background."""

    V: np.ndarray
    P: np.ndarray
    C: np.ndarray
    T: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "AttributeLabels":
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy(), arr[:, 3].copy())

    def __len__(self) -> int:
        return int(np.asarray(self.V).size)

    def validate(self, config: AlnConfig) -> None:
        V, P, C, T = (np.asarray(a, dtype=np.int64).reshape(-1) for a in (self.V, self.P, self.C, self.T))
        if not (V.size == P.size == C.size == T.size):
            raise ShapeError("AttributeLabels: V/P/C/T lengths differ")
        if np.any((V != 0) & (V != 1)):
            raise LabelError("AttributeLabels: V must be 0 (background) or 1 (vehicle)")
        bg = V == 0
        if np.any(bg & ((P != 0) | (C != 0) | (T != 0))):
            raise LabelError("AttributeLabels: background sample with non-zero attributes")
        for name, arr, n in (("P", P, config.num_poses), ("C", C, config.num_colors), ("T", T, config.num_types)):
            if np.any(arr < 0) or np.any(arr > n):
                raise LabelError(f"AttributeLabels: {name} outside [0, {n}]")


class ALN(Net):
    prefix = "aln"

    def __init__(self, config: Optional[AlnConfig] = None, seed: int = 0, zero: bool = False):
        super().__init__()
        self.config = config or AlnConfig()
        cfg = self.config
        rng = np.random.default_rng([seed, 2])
        self._layers = []
        in_c = 3
        for stage, count in enumerate(cfg.stages):
            out_c = cfg.base_channels * (2 ** stage)
            for j in range(count):
                name = f"stage{stage + 1}.conv{j + 1}"
                self._add_conv(name, out_c, in_c, 3, 3, rng, zero)
                self._layers.append(name)
                in_c = out_c
        self._add_conv("project", cfg.feature_dim, in_c, 1, 1, rng, zero)
        for head, size in cfg.head_sizes.items():
            self._add_conv(f"head_{head}", size, cfg.feature_dim, 1, 1, rng, zero)

    def forward(self, crops: Tensor) -> AlnHeads:
        cfg = self.config
        s = cfg.input_side
        if crops.ndim != 4 or crops.shape[1:] != (3, s, s):
            raise ShapeError(f"aln_forward: expected [B,3,{s},{s}] crops, got {crops.shape}")
        h = crops
        for stage, count in enumerate(cfg.stages):
            for j in range(count):
                h = relu(self._conv(h, f"stage{stage + 1}.conv{j + 1}", pad=1))
            h = maxpool2d(h, 2, 2)
        h = relu(self._conv(h, "project"))
        pooled = spatial_mean(h)

        B = crops.shape[0]
        logits = {}
        for head, size in cfg.head_sizes.items():
            logits[head] = reshape(self._conv(pooled, f"head_{head}"), (B, size))
        return AlnHeads(
            v_logits=logits["verify"],
            p_logits=logits["pose"],
            c_logits=logits["color"],
            t_logits=logits["type"],
            p_V=softmax(logits["verify"]),
            p_P=softmax(logits["pose"]),
            p_C=softmax(logits["color"]),
            p_T=softmax(logits["type"]),
            feature=reshape(pooled, (B, cfg.feature_dim)),
        )

    __call__ = forward


def aln_forward(crops: Tensor, net: ALN) -> AlnHeads:
    return net.forward(crops)


def aln_loss(
    heads: AlnHeads,
    labels: AttributeLabels,
    config: AlnConfig,
    lambdas: Optional[Sequence[float]] = None,
    tasks: Optional[Sequence[str]] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """L = L_verify + l1*L_pose + l2*L_color + l3*L_type.

    The lambdas apply to vehicle rows only; attribute rows with label 0 are
    masked. ``lambdas`` overrides ``config.lambdas`` (the two-phase schedule
    zeroes the color weight); ``tasks`` restricts the attribute terms to a
    subset for single-task training.
    """
    labels.validate(config)
    lam = np.asarray(config.lambdas if lambdas is None else lambdas, dtype=np.float64)
    if lam.shape != (3,) or np.any(lam < 0):
        raise ValueError(f"aln_loss: lambdas must be three non-negative values, got {lam.tolist()}")
    if tasks is not None:
        unknown = set(tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"aln_loss: unknown tasks {sorted(unknown)}")
        lam = np.array([lam[i] if t in tasks else 0.0 for i, t in enumerate(TASKS)])

    V = np.asarray(labels.V, dtype=np.int64).reshape(-1)
    attrs = [np.asarray(a, dtype=np.int64).reshape(-1) for a in (labels.P, labels.C, labels.T)]
    pos = V == 1
    unlabeled = pos & (attrs[0] == 0) & (attrs[1] == 0) & (attrs[2] == 0)
    if np.any(unlabeled) and np.any(lam > 0):
        raise LabelError("aln_loss: vehicle sample without any attribute label under non-zero lambdas")

    l_verify = softmax_nll(heads.v_logits, V)
    total = l_verify
    breakdown = {"l_verify": l_verify.item()}
    for i, (task, logits) in enumerate(zip(TASKS, (heads.p_logits, heads.c_logits, heads.t_logits))):
        y = attrs[i]
        weights = np.where(pos & (y > 0), lam[i], 0.0)
        term = softmax_nll(logits, np.maximum(y - 1, 0), weights)
        breakdown[f"l_{task}"] = term.item()
        total = add(total, term)
    breakdown["l_aln"] = total.item()
    return total, breakdown


def extract_knowledge(heads: AlnHeads) -> Tensor:
    """Logistic-squashed pooled feature, detached from the tape."""
    return constant(expit(heads.feature.data).astype(heads.feature.dtype))


def predict_attributes(heads: AlnHeads) -> np.ndarray:
    """[B, 4] rows of (V, P, C, T) argmax indices in label space (attributes 1-based)."""
    V = heads.p_V.data.argmax(axis=1)
    P = heads.p_P.data.argmax(axis=1) + 1
    C = heads.p_C.data.argmax(axis=1) + 1
    T = heads.p_T.data.argmax(axis=1) + 1
    return np.stack([V, P, C, T], axis=1).astype(np.int64)

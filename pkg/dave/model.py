"""The FVPN + ALN pair saved together.

``<name>.daveckpt`` holds every tensor of both nets (``fvpn/...`` and
``aln/...``); ``<name>.daveckpt.json`` beside it records both configs and the
attribute vocabularies. Without the sidecar the configs are recovered from
the tensor shapes.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Any, Dict, Mapping, Optional

import numpy as np

from dave import settings
from dave.aln import ALN, DEPTH_STAGES, AlnConfig
from dave.checkpoint import load_checkpoint, save_checkpoint, split_prefix
from dave.data.dataset import Vocabulary
from dave.errors import CheckpointError
from dave.fvpn import FVPN, FvpnConfig

SIDECAR_SUFFIX = ".json"


@dataclass
class ModelBundle:
    fvpn: FVPN
    aln: ALN
    vocab: Vocabulary

    @classmethod
    def create(
        cls,
        fvpn_config: Optional[FvpnConfig] = None,
        aln_config: Optional[AlnConfig] = None,
        vocab: Optional[Vocabulary] = None,
        seed: int = 0,
    ) -> "ModelBundle":
        fvpn_config = fvpn_config or FvpnConfig()
        aln_config = aln_config or AlnConfig(feature_dim=fvpn_config.knowledge_dim)
        if aln_config.feature_dim != fvpn_config.knowledge_dim:
            raise ValueError(
                f"ALN feature_dim {aln_config.feature_dim} != FVPN knowledge_dim {fvpn_config.knowledge_dim}"
            )
        vocab = vocab or Vocabulary(types=settings.types_for(aln_config.num_types))
        if len(vocab.types) != aln_config.num_types:
            raise ValueError(f"vocabulary has {len(vocab.types)} types, ALN expects {aln_config.num_types}")
        return cls(FVPN(fvpn_config, seed=seed), ALN(aln_config, seed=seed), vocab)

    def tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.fvpn.state_dict())
        out.update(self.aln.state_dict())
        return out

    def describe(self) -> Dict[str, Any]:
        return {
            "fvpn": asdict(self.fvpn.config),
            "aln": asdict(self.aln.config),
            "vocabularies": self.vocab.to_json(),
        }

    def save(self, path: str) -> str:
        save_checkpoint(path, self.tensors())
        with open(path + SIDECAR_SUFFIX, "w", encoding="utf-8") as f:
            json.dump(self.describe(), f, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "ModelBundle":
        tensors = load_checkpoint(path)
        sidecar = path + SIDECAR_SUFFIX
        if os.path.exists(sidecar):
            try:
                with open(sidecar, "r", encoding="utf-8") as f:
                    meta = json.load(f)
                fvpn_config = FvpnConfig(**meta["fvpn"])
                aln_meta = dict(meta["aln"])
                aln_meta["lambdas"] = tuple(aln_meta.get("lambdas", (1.0, 1.0, 1.0)))
                aln_config = AlnConfig(**aln_meta)
                vocab = Vocabulary.from_json(meta["vocabularies"])
            except (OSError, ValueError, KeyError, TypeError) as e:
                raise CheckpointError(f"{sidecar}: {e}") from None
        else:
            fvpn_config, aln_config = configs_from_tensors(tensors, source=path)
            vocab = Vocabulary(types=settings.types_for(aln_config.num_types))

        bundle = cls(FVPN(fvpn_config, zero=True), ALN(aln_config, zero=True), vocab)
        bundle.fvpn.load_state_dict(split_prefix(tensors, "fvpn"))
        bundle.aln.load_state_dict(split_prefix(tensors, "aln"))
        return bundle


def configs_from_tensors(tensors: Mapping[str, np.ndarray], source: str = "<checkpoint>") -> "tuple[FvpnConfig, AlnConfig]":
    """Rebuild both configs from parameter shapes (ALN input side takes its default)."""
    try:
        know = tensors["fvpn/head_know.w"].shape[0]
        fvpn_config = FvpnConfig(
            conv1=tensors["fvpn/conv1.w"].shape[0],
            conv2=tensors["fvpn/conv2.w"].shape[0],
            conv3=tensors["fvpn/conv3.w"].shape[0],
            knowledge_dim=know,
        )
        counts = []
        stage = 1
        while any(k.startswith(f"aln/stage{stage}.") for k in tensors):
            counts.append(sum(1 for k in tensors if k.startswith(f"aln/stage{stage}.") and k.endswith(".w")))
            stage += 1
        depth = next((name for name, stages in DEPTH_STAGES.items() if stages == tuple(counts)), None)
        if depth is None:
            raise CheckpointError(f"{source}: ALN stage layout {counts} matches no depth preset")
        aln_config = AlnConfig(
            depth=depth,
            feature_dim=tensors["aln/project.w"].shape[0],
            base_channels=tensors["aln/stage1.conv1.w"].shape[0],
            num_poses=tensors["aln/head_pose.w"].shape[0],
            num_colors=tensors["aln/head_color.w"].shape[0],
            num_types=tensors["aln/head_type.w"].shape[0],
        )
    except KeyError as e:
        raise CheckpointError(f"{source}: missing tensor {e.args[0]!r}") from None
    return fvpn_config, aln_config

"""Centralized defaults.

Every value is overridable from the command line, from a ``--config`` key-value
file, or from ``dave.conf`` in the user's config directory (see ``config.py``).
"""

from __future__ import annotations

import os
from typing import Tuple

# -------------------- FVPN --------------------
FVPN_INPUT_SIDE = 60
FVPN_STRIDE = 4
DEFAULT_KNOWLEDGE_DIM = 128          # 1024 in the full-size system
DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.5
NEGATIVE_MAX_IOU = 0.3               # a patch is background iff IoU < this with every GT

# -------------------- ALN --------------------
DEFAULT_ALN_SIDE = 64                # 224 in the full-size system
DEFAULT_ALN_DEPTH = "mid-8"
ALN_DEPTH_PRESETS = ("shallow-4", "mid-8", "deep")

# -------------------- Training --------------------
DEFAULT_BATCH_SIZE = 64
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0002
DEFAULT_PHASE1_EPOCHS = 10
DEFAULT_PHASE2_EPOCHS = 10
DEFAULT_PHASE1_LR = 1e-3
DEFAULT_PHASE2_LR = 1e-4
DIVERGENCE_LOSS = 1e3
PATCH_SCALE_RANGE = (1.2, 2.0)       # FVPN patch side / GT longer side
PATCH_CENTER_JITTER = 0.2            # fraction of the patch side

# -------------------- Inference --------------------
DEFAULT_LEVELS = 10
DEFAULT_RATIO = 0.75
DEFAULT_BLUR_SIGMA = 1.0
DEFAULT_THRES = 0.5
DEFAULT_RADIUS = 8
DEFAULT_M = 1.5
DEFAULT_NMS_IOU = 0.3
MIN_BOX_SIDE = 4.0                   # px; thinner regressed boxes fall back to the coarse box
DEFAULT_ATTR_CONF = 0.3              # color/type below this confidence are reported N/A

# -------------------- Evaluation --------------------
DEFAULT_EVAL_IOU = 0.7
DEFAULT_AP_MODE = "11point"
DEFAULT_RESOLUTIONS = (28, 56, 112)

# -------------------- Augmentation --------------------
INTENSITY_FACTORS = (0.6, 1.0, 1.4)
DOWNSCALE_RANGE = (0.2, 1.0)
BLUR_SIGMA_RANGE = (0.0, 1.5)

# -------------------- Vocabularies --------------------
POSES = ("front", "rear", "side", "frontside", "rearside")
COLORS = ("black", "white", "silver", "red", "blue")
TYPES_12 = (
    "MPV", "SUV", "sedan", "hatchback", "minibus", "pickup",
    "fastback", "estate", "hardtop-convertible", "sports", "crossover", "convertible",
)
TYPES_6 = TYPES_12[:6]
CATCH_ALL = "N/A"

# -------------------- Environment --------------------
ENV_DETERMINISTIC = "DAVE_DETERMINISTIC"
ENV_CONFIG_HOME = "DAVE_CONFIG_HOME"


def types_for(count: int) -> Tuple[str, ...]:
    if int(count) == 12:
        return TYPES_12
    if int(count) == 6:
        return TYPES_6
    raise ValueError(f"type vocabulary must have 6 or 12 entries, got {count}")


def deterministic_from_env() -> bool:
    return os.environ.get(ENV_DETERMINISTIC, "0") == "1"

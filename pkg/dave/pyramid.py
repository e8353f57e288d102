"""Two-stage inference: FVPN proposals over an image pyramid, then ALN verification.

Stage 1 runs the FVPN on every pyramid level, brings the per-level vehicle
score maps onto one grid, finds peaks with a circle scanner, sizes each peak
from its hot spot and refines it with the regression head. Stage 2 crops every
proposal, keeps the ones the ALN verifies as vehicles, annotates them with
pose / color / type and suppresses overlaps.

Unified grid: cell (r, c) is the receptive window of the largest level with
center ((4c + 30) / s0, (4r + 30) / s0) in image pixels. A level with scale s
sees that center at its own fractional cell ``(s * (4c + 30) / s0 - 30) / 4``.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from dave import settings
from dave.aln import ALN
from dave.boxes import clip_box, iou_matrix
from dave.data.dataset import Vocabulary
from dave.data.imageio import crop_resize, gaussian_blur, resample_grid, resize, to_chw_batch
from dave.errors import DatasetError, ShapeError
from dave.fvpn import FVPN, FvpnConfig, cell_to_window
from dave.log import get_logger
from dave.model import ModelBundle
from dave.tensor import Tensor, no_grad
from dave.utils.workers import run_parallel

log = get_logger("INFER")


# -------------------- Types --------------------

@dataclass(frozen=True)
class PyramidSpec:
    levels: int = settings.DEFAULT_LEVELS
    ratio: float = settings.DEFAULT_RATIO
    blur_sigma: float = settings.DEFAULT_BLUR_SIGMA

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not 0 < self.ratio < 1:
            raise ValueError(f"ratio must be in (0, 1), got {self.ratio}")
        if self.blur_sigma < 0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


@dataclass
class PyramidLevel:
    scale: float
    image: np.ndarray


@dataclass
class LevelMaps:
    """Stage-1 output of one level: vehicle score [h, w] and regression [4, h, w]."""

    scale: float
    score: np.ndarray
    bbr: np.ndarray


@dataclass
class UnifiedMaps:
    score: np.ndarray
    level_index: np.ndarray
    levels: List[LevelMaps]
    ref_scale: float
    stride: int = settings.FVPN_STRIDE
    input_side: int = settings.FVPN_INPUT_SIDE

    def level_cell(self, k: int, row: float, col: float) -> Tuple[float, float]:
        """Fractional cell of level ``k`` whose window shares the center of unified cell (row, col)."""
        s = self.levels[k].scale / self.ref_scale
        half = self.input_side / 2.0
        return (s * (self.stride * row + half) - half) / self.stride, (s * (self.stride * col + half) - half) / self.stride

    def center(self, row: int, col: int) -> Tuple[float, float]:
        """Image-pixel center (x, y) of unified cell (row, col)."""
        half = self.input_side / 2.0
        return (self.stride * col + half) / self.ref_scale, (self.stride * row + half) / self.ref_scale

    def read_bbr(self, row: int, col: int) -> Tuple[np.ndarray, int, Tuple[int, int], float]:
        """Regression values at the nearest cell of the winning level.

        Returns (values, level, (level_row, level_col), level_scale).
        """
        k = int(self.level_index[row, col])
        lv = self.levels[k]
        fr, fc = self.level_cell(k, row, col)
        h, w = lv.score.shape
        lr = int(np.clip(np.rint(fr), 0, h - 1))
        lc = int(np.clip(np.rint(fc), 0, w - 1))
        return lv.bbr[:, lr, lc].astype(np.float64), k, (lr, lc), lv.scale


@dataclass
class Proposal:
    center: Tuple[float, float]
    coarse_size: Tuple[float, float]
    box: Tuple[float, float, float, float]
    score: float
    level: int
    cell: Tuple[int, int]
    refined: bool = True

    @property
    def coarse_box(self) -> Tuple[float, float, float, float]:
        (cx, cy), (w, h) = self.center, self.coarse_size
        return cx - w / 2.0, cy - h / 2.0, w, h


@dataclass
class Attribute:
    name: str
    index: int
    confidence: float


@dataclass
class Detection:
    box: Tuple[float, float, float, float]
    score: float
    proposal_score: float
    pose: Optional[Attribute] = None
    color: Optional[Attribute] = None
    type: Optional[Attribute] = None

    @property
    def annotated(self) -> bool:
        return self.pose is not None

    def label_row(self) -> Tuple[int, int, int, int]:
        """(V, P, C, T) in label space; 0 where unannotated or catch-all."""
        if not self.annotated:
            return (1, 0, 0, 0)
        return (1, self.pose.index, self.color.index, self.type.index)

    def to_json(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "box": [round(float(v), 4) for v in self.box],
            "score": round(float(self.score), 6),
            "proposal_score": round(float(self.proposal_score), 6),
        }
        if self.annotated:
            for task in ("pose", "color", "type"):
                attr: Attribute = getattr(self, task)
                out[task] = attr.name
                out[f"{task}_conf"] = round(float(attr.confidence), 6)
        return out

    @classmethod
    def from_json(cls, obj: Dict[str, object], vocab: Optional[Vocabulary] = None) -> "Detection":
        det = cls(
            box=tuple(float(v) for v in obj["box"]),
            score=float(obj["score"]),
            proposal_score=float(obj.get("proposal_score", obj["score"])),
        )
        if "pose" in obj:
            vocab = vocab or Vocabulary()
            names = {"pose": vocab.poses, "color": vocab.colors, "type": vocab.types}
            for task in ("pose", "color", "type"):
                name = str(obj[task])
                idx = names[task].index(name) + 1 if name in names[task] else 0
                setattr(det, task, Attribute(name, idx, float(obj.get(f"{task}_conf", 0.0))))
        return det


@dataclass
class DetectionResult:
    detections: List[Detection]
    proposals: List[Proposal]
    timing: Dict[str, float] = field(default_factory=dict)
    levels: int = 0
    dropped_levels: int = 0
    dropped_crops: int = 0


# -------------------- Stage 1 --------------------

def build_pyramid(
    image: np.ndarray,
    spec: Optional[PyramidSpec] = None,
    min_side: int = settings.FVPN_INPUT_SIDE,
) -> Tuple[List[PyramidLevel], int]:
    """Levels sized ratio**k of the image, each blurred and resampled from the previous one.

    A level's scale is its width over the image width, after rounding to
    whole pixels.

    Returns the levels and the number of requested levels dropped for being
    smaller than ``min_side``.
    """
    spec = spec or PyramidSpec()
    h, w = image.shape[:2]
    if min(h, w) < min_side:
        raise ShapeError(f"build_pyramid: image {w}x{h} smaller than the {min_side}px receptive field")
    levels = [PyramidLevel(1.0, image)]
    for k in range(1, spec.levels):
        s = spec.ratio ** k
        nh, nw = int(round(h * s)), int(round(w * s))
        if min(nh, nw) < min_side:
            break
        prev = gaussian_blur(levels[-1].image, spec.blur_sigma)
        levels.append(PyramidLevel(nw / w, resize(prev, nh, nw, antialias=False)))
    return levels, spec.levels - len(levels)


def level_maps(fvpn: FVPN, level: PyramidLevel) -> LevelMaps:
    with no_grad():
        heads = fvpn(Tensor(to_chw_batch([level.image])))
    return LevelMaps(
        scale=level.scale,
        score=heads.class_map.data[0, 1].astype(np.float64),
        bbr=heads.bbr_map.data[0].astype(np.float64),
    )


def unify(levels: Sequence[LevelMaps], config: Optional[FvpnConfig] = None) -> UnifiedMaps:
    """Per-cell max of the level score maps rescaled onto the largest level's grid.

    Rescaling is bilinear and center-aligned; cells a level does not cover
    read 0 from it. Ties keep the first level in ``levels``.
    """
    if not levels:
        raise ValueError("unify: no levels")
    cfg = config or FvpnConfig()
    ref = int(np.argmax([lv.scale for lv in levels]))
    H, W = levels[ref].score.shape
    unified = UnifiedMaps(
        score=np.zeros((H, W)),
        level_index=np.zeros((H, W), dtype=np.int64),
        levels=list(levels),
        ref_scale=levels[ref].scale,
        stride=cfg.stride,
        input_side=cfg.input_side,
    )
    rows, cols = np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64)
    best = np.full((H, W), -np.inf)
    for k, lv in enumerate(levels):
        if k == ref:
            rescaled = lv.score
        else:
            ys, _ = unified.level_cell(k, rows, 0.0)
            _, xs = unified.level_cell(k, 0.0, cols)
            rescaled = resample_grid(lv.score, ys, xs, fill=0.0)
        better = rescaled > best
        best = np.where(better, rescaled, best)
        unified.level_index[better] = k
    unified.score = np.clip(best, 0.0, 1.0)
    return unified


def _disk_offsets(radius: int) -> List[Tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def detect_peaks(score: np.ndarray, thres: float, radius: int) -> List[Tuple[int, int]]:
    """Circle scanner: (row, col) cells that dominate every cell within ``radius``.

    A cell qualifies when it is >= thres and >= all cells within Euclidean
    distance ``radius``; among equal values the lexicographically smallest
    (row, col) wins. Output is in row-major order.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if not 0 < thres < 1:
        raise ValueError(f"thres must be in (0, 1), got {thres}")
    score = np.asarray(score, dtype=np.float64)
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = yy * yy + xx * xx <= r * r
    local_max = ndimage.maximum_filter(score, footprint=disk, mode="constant", cval=-np.inf)
    ok = (score >= thres) & (score >= local_max)
    if not ok.any():
        return []

    H, W = score.shape
    padded = np.pad(score, r, mode="constant", constant_values=-np.inf)
    for dy, dx in _disk_offsets(r):
        if dy < 0 or (dy == 0 and dx < 0):
            earlier = padded[r + dy:r + dy + H, r + dx:r + dx + W]
            ok &= score > earlier
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(ok))]


def hotspot_boxes(
    score: np.ndarray,
    thres: float,
    peaks: Sequence[Tuple[int, int]],
    m: float,
    unified: UnifiedMaps,
) -> List[Tuple[float, float]]:
    """Coarse (w, h) per peak from the 8-connected hot spot that holds it.

    The hot spot's cell extent becomes pixels through the unified grid spacing
    plus the receptive window of the level owning the hot spot's best cell;
    the result is multiplied by ``m``. Peaks in one hot spot share one size.
    """
    mask = np.asarray(score) >= thres
    labels, _count = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    spans = ndimage.find_objects(labels)
    spacing = unified.stride / unified.ref_scale

    sizes: Dict[int, Tuple[float, float]] = {}
    out = []
    for r, c in peaks:
        comp = int(labels[r, c])
        if comp == 0:
            raise ValueError(f"hotspot_boxes: peak {(r, c)} lies outside every hot spot")
        if comp not in sizes:
            sl = spans[comp - 1]
            region = np.where(labels[sl] == comp, score[sl], -np.inf)
            br, bc = np.unravel_index(int(np.argmax(region)), region.shape)
            level = unified.levels[int(unified.level_index[sl[0].start + br, sl[1].start + bc])]
            window = unified.input_side / level.scale
            rows = sl[0].stop - 1 - sl[0].start
            cols = sl[1].stop - 1 - sl[1].start
            sizes[comp] = ((cols * spacing + window) * m, (rows * spacing + window) * m)
        out.append(sizes[comp])
    return out


def window_box(
    cell: Tuple[float, float],
    level_scale: float,
    bbr: Sequence[float],
    config: Optional[FvpnConfig] = None,
) -> Tuple[float, float, float, float]:
    """Regression values read in the receptive window of ``cell``, as an image-pixel box."""
    wx, wy, side = cell_to_window(cell, level_scale, config)
    x, y, w, h = (float(v) for v in bbr)
    return wx + x * side, wy + y * side, w * side, h * side


def decode_bbr(
    peak: Tuple[int, int],
    unified: UnifiedMaps,
    coarse_box: Sequence[float],
    image_size: Tuple[int, int],
    config: Optional[FvpnConfig] = None,
    use_bbr: bool = True,
    min_side: float = settings.MIN_BOX_SIDE,
) -> Tuple[Tuple[float, float, float, float], bool]:
    """Refined box for a peak, clipped to the image, and whether regression was used.

    Falls back to the clipped coarse box when regression is off or the clipped
    regressed box is thinner than ``min_side`` on either side.
    """
    width, height = image_size
    if use_bbr:
        values, _k, cell, scale = unified.read_bbr(*peak)
        box = clip_box(window_box(cell, scale, values, config), width, height)
        if box[2] >= min_side and box[3] >= min_side:
            return box, True
    return clip_box(coarse_box, width, height), False


def propose(
    image: np.ndarray,
    fvpn: FVPN,
    spec: Optional[PyramidSpec] = None,
    thres: float = settings.DEFAULT_THRES,
    radius: int = settings.DEFAULT_RADIUS,
    m: float = settings.DEFAULT_M,
    use_bbr: bool = True,
    deterministic: bool = False,
) -> Tuple[List[Proposal], UnifiedMaps, int]:
    """Stage 1; returns proposals (peak order), the unified maps and the dropped level count."""
    levels, dropped = build_pyramid(image, spec, min_side=fvpn.config.input_side)
    if dropped:
        log.debug("%d pyramid level(s) dropped below the receptive field", dropped)
    maps = run_parallel(lambda lv: level_maps(fvpn, lv), levels, deterministic=deterministic)
    unified = unify(maps, fvpn.config)
    peaks = detect_peaks(unified.score, thres, radius)
    sizes = hotspot_boxes(unified.score, thres, peaks, m, unified)

    height, width = image.shape[:2]
    proposals = []
    for (r, c), size in zip(peaks, sizes):
        center = unified.center(r, c)
        coarse = (center[0] - size[0] / 2.0, center[1] - size[1] / 2.0, size[0], size[1])
        box, refined = decode_bbr((r, c), unified, coarse, (width, height), fvpn.config, use_bbr)
        proposals.append(Proposal(
            center=center,
            coarse_size=size,
            box=box,
            score=float(unified.score[r, c]),
            level=int(unified.level_index[r, c]),
            cell=(r, c),
            refined=refined,
        ))
    return proposals, unified, dropped


# -------------------- Stage 2 --------------------

def _attribute(probs: np.ndarray, names: Sequence[str], min_conf: float) -> Attribute:
    idx = int(np.argmax(probs))
    conf = float(probs[idx])
    if conf < min_conf:
        return Attribute(settings.CATCH_ALL, 0, conf)
    return Attribute(names[idx], idx + 1, conf)


def verify_and_annotate(
    image: np.ndarray,
    proposals: Sequence[Proposal],
    aln: ALN,
    vocab: Vocabulary,
    attr_conf: float = settings.DEFAULT_ATTR_CONF,
    batch_size: int = 64,
    deterministic: bool = False,
) -> Tuple[List[Detection], int]:
    """ALN verification; returns the survivors and the count of dropped empty crops.

    A proposal survives only when p(vehicle) > p(background); its attributes
    are never consulted otherwise. Color and type whose top probability is
    under ``attr_conf`` are reported as the catch-all.
    """
    height, width = image.shape[:2]
    side = aln.config.input_side
    kept: List[Proposal] = []
    dropped = 0
    for p in proposals:
        x, y, w, h = clip_box(p.box, width, height)
        if w < 1 or h < 1:
            dropped += 1
            continue
        kept.append(p)
    if dropped:
        log.warning("%d proposal(s) dropped: empty crop after clipping", dropped)
    if not kept:
        return [], dropped

    chunks = [kept[i:i + batch_size] for i in range(0, len(kept), batch_size)]

    def forward(chunk: Sequence[Proposal]):
        crops = to_chw_batch([crop_resize(image, clip_box(p.box, width, height), side) for p in chunk])
        with no_grad():
            heads = aln(Tensor(crops))
        return heads.p_V.data, heads.p_P.data, heads.p_C.data, heads.p_T.data

    outputs = run_parallel(forward, chunks, deterministic=deterministic)
    detections = []
    for chunk, (pV, pP, pC, pT) in zip(chunks, outputs):
        for i, p in enumerate(chunk):
            if not pV[i, 1] > pV[i, 0]:
                continue
            detections.append(Detection(
                box=p.box,
                score=float(pV[i, 1]),
                proposal_score=p.score,
                pose=_attribute(pP[i], vocab.poses, 0.0),
                color=_attribute(pC[i], vocab.colors, attr_conf),
                type=_attribute(pT[i], vocab.types, attr_conf),
            ))
    return detections, dropped


def nms_indices(boxes, scores, iou_threshold: float = settings.DEFAULT_NMS_IOU) -> List[int]:
    """Greedy NMS; scores descending with equal scores in input order."""
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    keep: List[int] = []
    for i in order:
        if all(overlaps[i, j] <= iou_threshold for j in keep):
            keep.append(int(i))
    return keep


def nms(detections: Sequence[Detection], iou_threshold: float = settings.DEFAULT_NMS_IOU) -> List[Detection]:
    keep = nms_indices([d.box for d in detections], [d.score for d in detections], iou_threshold)
    return [detections[i] for i in keep]


# -------------------- Pipeline --------------------

@dataclass(frozen=True)
class DetectorOptions:
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    thres: float = settings.DEFAULT_THRES
    radius: int = settings.DEFAULT_RADIUS
    m: float = settings.DEFAULT_M
    nms_iou: float = settings.DEFAULT_NMS_IOU
    attr_conf: float = settings.DEFAULT_ATTR_CONF
    use_bbr: bool = True
    verify: bool = True
    deterministic: bool = False


class Detector:
    def __init__(self, model: ModelBundle, options: Optional[DetectorOptions] = None):
        self.model = model
        self.options = options or DetectorOptions()

    def detect(self, image: np.ndarray) -> DetectionResult:
        opt = self.options
        t0 = time.perf_counter()
        proposals, _unified, dropped_levels = propose(
            image, self.model.fvpn, opt.pyramid, opt.thres, opt.radius, opt.m, opt.use_bbr, opt.deterministic
        )
        t1 = time.perf_counter()
        dropped_crops = 0
        if opt.verify:
            verified, dropped_crops = verify_and_annotate(
                image, proposals, self.model.aln, self.model.vocab, opt.attr_conf, deterministic=opt.deterministic
            )
        else:
            verified = [Detection(box=p.box, score=p.score, proposal_score=p.score) for p in proposals]
        detections = nms(verified, opt.nms_iou)
        t2 = time.perf_counter()
        return DetectionResult(
            detections=detections,
            proposals=proposals,
            timing={"stage1": t1 - t0, "stage2": t2 - t1, "total": t2 - t0},
            levels=opt.pyramid.levels - dropped_levels,
            dropped_levels=dropped_levels,
            dropped_crops=dropped_crops,
        )

    __call__ = detect


def detect(image: np.ndarray, model: ModelBundle, options: Optional[DetectorOptions] = None) -> DetectionResult:
    return Detector(model, options).detect(image)


# -------------------- Output --------------------

TIMING_COLUMNS = ("image", "levels", "proposals", "detections", "stage1_s", "stage2_s")


def detection_record(image_id: str, result: DetectionResult) -> Dict[str, object]:
    return {"image": image_id, "detections": [d.to_json() for d in result.detections]}


def write_detections(path: str, records: Sequence[Dict[str, object]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path: str, vocab: Optional[Vocabulary] = None) -> Dict[str, List[Detection]]:
    out: Dict[str, List[Detection]] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    out[str(obj["image"])] = [Detection.from_json(d, vocab) for d in obj.get("detections", [])]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise DatasetError(f"{path}:{lineno}: malformed detection record ({e})") from None
    except FileNotFoundError:
        raise DatasetError(f"detections not found: {path}") from None
    return out


def timing_row(image_id: str, result: DetectionResult) -> Dict[str, object]:
    return {
        "image": image_id,
        "levels": result.levels,
        "proposals": len(result.proposals),
        "detections": len(result.detections),
        "stage1_s": f"{result.timing['stage1']:.6f}",
        "stage2_s": f"{result.timing['stage2']:.6f}",
    }

"""Detection and attribute evaluation.

Detections are matched to ground truth PASCAL-style (greedy, highest score
first, each GT at most once), AP is 11-point interpolated by default with a
continuous variant, and attribute accuracies are tabulated per task and, for
type, per ground-truth pose.
"""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dave import settings
from dave.aln import ALN
from dave.boxes import as_boxes, iou, iou_matrix
from dave.data.dataset import DatasetManifest, Sample, Vocabulary
from dave.data.imageio import crop_resize, resize, to_chw_batch
from dave.data.patches import negative_patch, patch_box
from dave.errors import DatasetError
from dave.log import get_logger
from dave.pyramid import Detection
from dave.tensor import Tensor, no_grad

log = get_logger("EVAL")

__all__ = [
    "iou", "MatchResult", "match_detections", "APResult", "average_precision",
    "AttributeReport", "attribute_report", "FpsReport", "fps_benchmark",
    "DetectionReport", "evaluate_detections", "evaluate_aln_on_crops",
    "resolution_study", "compare_reports",
]


# -------------------- Matching / AP --------------------

@dataclass
class MatchResult:
    """Per-detection TP flags (input order) and the GT each TP matched (-1 for FP)."""

    scores: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray
    num_gt: int

    @property
    def missed(self) -> int:
        return self.num_gt - int(self.tp.sum())


def match_detections(boxes, scores, gts, iou_thr: float = settings.DEFAULT_EVAL_IOU) -> MatchResult:
    """Greedy matching in descending score order (equal scores keep input order).

    Each detection takes the unmatched GT with the highest IoU >= ``iou_thr``;
    a detection on an already matched GT is a false positive.
    """
    D = as_boxes(boxes)
    G = as_boxes(gts)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp = np.zeros(len(D), dtype=bool)
    matched = np.full(len(D), -1, dtype=np.int64)
    if len(D) and len(G):
        overlaps = iou_matrix(D, G)
        taken = np.zeros(len(G), dtype=bool)
        for d in np.argsort(-scores, kind="stable"):
            cand = np.where(taken, -1.0, overlaps[d])
            g = int(np.argmax(cand))
            if cand[g] >= iou_thr:
                taken[g] = True
                tp[d] = True
                matched[d] = g
    return MatchResult(scores=scores, tp=tp, matched_gt=matched, num_gt=len(G))


@dataclass
class APResult:
    ap: float
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray
    num_gt: int
    mode: str = settings.DEFAULT_AP_MODE

    def curve_rows(self) -> List[Dict[str, float]]:
        return [
            {"rank": i + 1, "score": float(s), "recall": float(r), "precision": float(p)}
            for i, (s, r, p) in enumerate(zip(self.scores, self.recall, self.precision))
        ]


def voc_ap(recall: np.ndarray, precision: np.ndarray, mode: str = settings.DEFAULT_AP_MODE) -> float:
    if mode == "11point":
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            ap += (float(np.max(precision[mask])) if mask.any() else 0.0) / 11.0
        return ap
    if mode != "continuous":
        raise ValueError(f"unknown AP mode {mode!r}; use '11point' or 'continuous'")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(results: Sequence[MatchResult], mode: str = settings.DEFAULT_AP_MODE) -> APResult:
    """AP over all images; detections ranked by score, ties in image then input order."""
    num_gt = sum(r.num_gt for r in results)
    if num_gt == 0:
        raise DatasetError("average_precision: no ground-truth boxes")
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order].astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    ap = voc_ap(recall, precision, mode) if len(tp) else 0.0
    return APResult(ap=ap, recall=recall, precision=precision, scores=scores[order], num_gt=num_gt, mode=mode)


# -------------------- Attributes --------------------

@dataclass
class AttributeReport:
    accuracy: Dict[str, float]
    counts: Dict[str, int]
    confusion: Dict[str, List[List[int]]]
    type_by_pose: Dict[str, float]
    type_by_pose_counts: Dict[str, int]
    vocab: Vocabulary = field(default_factory=Vocabulary)

    def metric_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = [
            {"metric": f"{task}_accuracy", "value": self.accuracy[task], "count": self.counts[task]}
            for task in ("verify", "pose", "color", "type")
        ]
        for pose in self.vocab.poses:
            rows.append({
                "metric": f"type_accuracy_{pose}",
                "value": self.type_by_pose[pose],
                "count": self.type_by_pose_counts[pose],
            })
        return rows

    def to_json(self) -> Dict[str, object]:
        return {
            "accuracy": self.accuracy,
            "counts": self.counts,
            "type_by_pose": self.type_by_pose,
            "confusion": self.confusion,
            "labels": {
                "pose": list(self.vocab.poses),
                "color": list(self.vocab.colors),
                "type": list(self.vocab.types),
                "predicted_column_0": settings.CATCH_ALL,
            },
        }


def _accuracy(hits: np.ndarray) -> float:
    return float(hits.mean()) if hits.size else float("nan")


def attribute_report(predictions, labels, vocab: Vocabulary) -> AttributeReport:
    """Accuracies per task over rows where that task is labeled.

    ``predictions`` and ``labels`` are aligned [N, 4] rows of (V, P, C, T).
    Verification covers every row; attributes cover vehicle rows whose label
    is not 0. A predicted 0 (catch-all) counts as wrong. Confusion matrices are
    GT rows x predicted columns with column 0 for the catch-all.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1, 4)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1, 4)
    if pred.shape != lab.shape:
        raise ValueError(f"attribute_report: {len(pred)} predictions for {len(lab)} labels")
    sizes = {"pose": len(vocab.poses), "color": len(vocab.colors), "type": len(vocab.types)}
    for col, (task, n) in enumerate(sizes.items(), start=1):
        if np.any(lab[:, col] < 0) or np.any(lab[:, col] > n) or np.any(pred[:, col] < 0) or np.any(pred[:, col] > n):
            raise DatasetError(f"attribute_report: {task} indices outside the {n}-name vocabulary")

    accuracy = {"verify": _accuracy(pred[:, 0] == lab[:, 0])}
    counts = {"verify": int(len(lab))}
    confusion: Dict[str, List[List[int]]] = {}
    vehicle = lab[:, 0] == 1
    for col, (task, n) in enumerate(sizes.items(), start=1):
        rows = vehicle & (lab[:, col] > 0)
        accuracy[task] = _accuracy(pred[rows, col] == lab[rows, col])
        counts[task] = int(rows.sum())
        mat = np.zeros((n, n + 1), dtype=np.int64)
        np.add.at(mat, (lab[rows, col] - 1, pred[rows, col]), 1)
        confusion[task] = mat.tolist()

    type_by_pose: Dict[str, float] = {}
    type_counts: Dict[str, int] = {}
    for p, pose in enumerate(vocab.poses, start=1):
        rows = vehicle & (lab[:, 3] > 0) & (lab[:, 1] == p)
        type_by_pose[pose] = _accuracy(pred[rows, 3] == lab[rows, 3])
        type_counts[pose] = int(rows.sum())
    return AttributeReport(accuracy, counts, confusion, type_by_pose, type_counts, vocab)


def _aln_predict(aln: ALN, crops: Sequence[np.ndarray], attr_conf: float, batch_size: int = 64) -> np.ndarray:
    rows = []
    for start in range(0, len(crops), batch_size):
        with no_grad():
            heads = aln(Tensor(to_chw_batch(crops[start:start + batch_size])))
        V = heads.p_V.data.argmax(axis=1)
        cols = [V]
        for probs, gated in ((heads.p_P.data, False), (heads.p_C.data, True), (heads.p_T.data, True)):
            idx = probs.argmax(axis=1)
            conf = probs.max(axis=1)
            label = idx + 1
            if gated:
                label = np.where(conf < attr_conf, 0, label)
            cols.append(label)
        rows.append(np.stack(cols, axis=1))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 4), dtype=np.int64)


def evaluate_aln_on_crops(
    aln: ALN,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    size: Optional[int] = None,
    attr_conf: float = 0.0,
    negatives_per_image: int = 1,
    seed: int = 0,
) -> AttributeReport:
    """ALN accuracy on tight GT crops plus background patches of the same images.

    With ``size`` set, each crop is first sampled at ``size`` x ``size`` and then
    brought back up to the ALN input, emulating low-resolution vehicles.
    """
    side = aln.config.input_side
    crops: List[np.ndarray] = []
    labels: List[Tuple[int, int, int, int]] = []
    rng = np.random.default_rng([seed, 31])
    for sample in samples:
        h, w = sample.image.shape[:2]
        for box, lab in zip(sample.record.boxes, sample.record.labels):
            crops.append(_crop(sample.image, box, side, size))
            labels.append(tuple(lab))
        for _ in range(negatives_per_image):
            patch = negative_patch(sample.record.boxes, w, h, rng)
            if patch is not None:
                crops.append(_crop(sample.image, patch_box(patch), side, size))
                labels.append((0, 0, 0, 0))
    if not crops:
        raise DatasetError("evaluate_aln_on_crops: no crops")
    pred = _aln_predict(aln, crops, attr_conf)
    return attribute_report(pred, np.asarray(labels), vocab)


def _crop(image: np.ndarray, box, side: int, size: Optional[int]) -> np.ndarray:
    if size is None or size == side:
        return crop_resize(image, box, side)
    return resize(crop_resize(image, box, size), side, side, antialias=False)


def resolution_study(
    aln: ALN,
    samples: Sequence[Sample],
    vocab: Vocabulary,
    sizes: Sequence[int] = settings.DEFAULT_RESOLUTIONS,
    attr_conf: float = 0.0,
    seed: int = 0,
) -> Dict[int, AttributeReport]:
    """One attribute report per crop resolution."""
    out = {}
    for size in sizes:
        if size < 1:
            raise ValueError(f"resolution must be >= 1, got {size}")
        out[int(size)] = evaluate_aln_on_crops(aln, samples, vocab, size=int(size), attr_conf=attr_conf, seed=seed)
        log.info("resolution %d: %s", size, _acc_line(out[int(size)]))
    return out


def compare_reports(reports: Mapping[str, AttributeReport]) -> List[Dict[str, object]]:
    """One row per named report: task accuracies side by side."""
    rows = []
    for name, rep in reports.items():
        row: Dict[str, object] = {"model": name}
        for task in ("verify", "pose", "color", "type"):
            row[task] = rep.accuracy[task]
        rows.append(row)
    return rows


def _acc_line(rep: AttributeReport) -> str:
    return "  ".join(f"{k} {v:.3f}" for k, v in rep.accuracy.items())


# -------------------- Detection evaluation --------------------

@dataclass
class DetectionReport:
    ap: APResult
    iou_threshold: float
    matches: Dict[str, MatchResult]
    attributes: Optional[AttributeReport] = None

    def metric_rows(self) -> List[Dict[str, object]]:
        rows: List[Dict[str, object]] = [
            {"metric": "ap", "value": self.ap.ap, "count": self.ap.num_gt},
            {"metric": "iou_threshold", "value": self.iou_threshold, "count": ""},
            {"metric": "detections", "value": int(sum(len(m.tp) for m in self.matches.values())), "count": ""},
            {"metric": "true_positives", "value": int(sum(m.tp.sum() for m in self.matches.values())), "count": ""},
        ]
        if self.attributes is not None:
            rows.extend(self.attributes.metric_rows())
        return rows


def evaluate_detections(
    detections: Mapping[str, Sequence[Detection]],
    manifest: DatasetManifest,
    split: Optional[str] = None,
    iou_thr: float = settings.DEFAULT_EVAL_IOU,
    ap_mode: str = settings.DEFAULT_AP_MODE,
) -> DetectionReport:
    """AP against the manifest's records, plus attributes of matched detections.

    Every detection image id must have a record; with ``split`` set, split
    images without detections count as all-missed.
    """
    records = manifest.records()
    unknown = sorted(set(detections) - set(records))
    if unknown:
        raise DatasetError(f"detections for image ids without records: {unknown[:5]}")
    ids = manifest.split_ids(split) if split else sorted(detections)
    outside = sorted(set(detections) - set(ids))
    if outside:
        raise DatasetError(f"detections for image ids outside split {split!r}: {outside[:5]}")

    matches: Dict[str, MatchResult] = {}
    pred_rows, gt_rows = [], []
    for image_id in ids:
        rec = records[image_id]
        gts = [b for b, lab in zip(rec.boxes, rec.labels) if lab[0] == 1]
        gt_labels = [lab for lab in rec.labels if lab[0] == 1]
        dets = list(detections.get(image_id, []))
        res = match_detections([d.box for d in dets], [d.score for d in dets], gts, iou_thr)
        matches[image_id] = res
        for d, g in zip(dets, res.matched_gt):
            if g >= 0 and d.annotated:
                pred_rows.append(d.label_row())
                gt_rows.append(tuple(gt_labels[g]))

    ap = average_precision([matches[i] for i in ids], ap_mode)
    attrs = attribute_report(pred_rows, gt_rows, manifest.vocab) if pred_rows else None
    log.info("AP@%.2f = %.4f over %d images, %d GT", iou_thr, ap.ap, len(ids), ap.num_gt)
    return DetectionReport(ap=ap, iou_threshold=iou_thr, matches=matches, attributes=attrs)


# -------------------- Throughput --------------------

@dataclass
class FpsReport:
    stage1_median: float
    stage2_median: float
    total_median: float
    images: int
    repeats: int

    @property
    def fps(self) -> float:
        return 1.0 / self.total_median if self.total_median > 0 else float("inf")

    def metric_rows(self) -> List[Dict[str, object]]:
        return [
            {"metric": "stage1_median_s", "value": self.stage1_median, "count": self.images * self.repeats},
            {"metric": "stage2_median_s", "value": self.stage2_median, "count": self.images * self.repeats},
            {"metric": "total_median_s", "value": self.total_median, "count": self.images * self.repeats},
            {"metric": "fps", "value": self.fps, "count": self.images * self.repeats},
        ]


def fps_benchmark(
    detect_fn: Callable[[np.ndarray], object],
    images: Sequence[np.ndarray],
    repeats: int = 3,
) -> FpsReport:
    """Median per-image wall time; the first call is a warm-up and is not timed.

    ``detect_fn`` may return an object with a ``timing`` dict holding
    ``stage1`` / ``stage2`` seconds; otherwise all time counts as stage 1.
    """
    if not images:
        raise ValueError("fps_benchmark: no images")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    detect_fn(images[0])
    s1, s2, tot = [], [], []
    for _ in range(repeats):
        for image in images:
            t0 = time.perf_counter()
            out = detect_fn(image)
            elapsed = time.perf_counter() - t0
            timing = getattr(out, "timing", None) or {}
            s1.append(float(timing.get("stage1", elapsed)))
            s2.append(float(timing.get("stage2", 0.0)))
            tot.append(elapsed)
    return FpsReport(
        stage1_median=statistics.median(s1),
        stage2_median=statistics.median(s2),
        total_median=statistics.median(tot),
        images=len(images),
        repeats=repeats,
    )


def fps_from_timings(path: str) -> FpsReport:
    """Medians from a timings CSV written by ``infer``."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise DatasetError(f"timings not found: {path}") from None
    if not rows:
        raise DatasetError(f"{path}: no timing rows")
    try:
        s1 = [float(r["stage1_s"]) for r in rows]
        s2 = [float(r["stage2_s"]) for r in rows]
    except (KeyError, ValueError) as e:
        raise DatasetError(f"{path}: malformed timings ({e})") from None
    tot = [a + b for a, b in zip(s1, s2)]
    return FpsReport(statistics.median(s1), statistics.median(s2), statistics.median(tot), len(rows), 1)


# -------------------- Writers --------------------

def write_csv(path: str, rows: Sequence[Mapping[str, object]], columns: Optional[Sequence[str]] = None) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_json(path: str, obj: object) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")
    return path

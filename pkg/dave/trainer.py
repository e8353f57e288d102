"""Joint FVPN + ALN training.

Every step draws a paired batch: half positives (a tight GT crop for the ALN,
an uncropped jittered patch for the FVPN) and half background patches fed to
both nets. The ALN forward runs first; its squashed feature becomes the
FVPN's knowledge target. Both nets then step with their own momentum SGD.

Phase 1 trains pose and type with color masked; phase 2 drops the learning
rate and adds color supervision.
"""

from __future__ import annotations

import csv
import math
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from dave import settings
from dave.aln import TASKS, AlnConfig, AttributeLabels, aln_loss, extract_knowledge
from dave.boxes import contains
from dave.data.augment import random_augment
from dave.data.dataset import AnnotationRecord, DatasetManifest, Sample
from dave.data.imageio import crop_resize, resize, to_chw_batch, to_uint8
from dave.data.patches import loc_target, negative_patch, patch_box, positive_patch
from dave.errors import DatasetError, DivergenceError, NonFiniteError
from dave.fvpn import FvpnConfig, FvpnTarget, fvpn_loss
from dave.log import get_logger, progress_enabled
from dave.model import ModelBundle
from dave.optim import SGD
from dave.tensor import Tensor
from dave.utils.workers import Prefetcher, maybe_prefetch

log = get_logger("TRAIN")

CURVE_FILE = "loss_curve.csv"
CURVE_COLUMNS = ("epoch", "step", "l_aln", "l_bic", "l_bbox_weighted", "l_know_weighted", "lr")
MODEL_FILE = "model.daveckpt"
CHECKPOINT_DIR = "checkpoints"


@dataclass(frozen=True)
class TrainSchedule:
    batch_size: int = settings.DEFAULT_BATCH_SIZE
    momentum: float = settings.DEFAULT_MOMENTUM
    weight_decay: float = settings.DEFAULT_WEIGHT_DECAY
    phase1_epochs: int = settings.DEFAULT_PHASE1_EPOCHS
    phase2_epochs: int = settings.DEFAULT_PHASE2_EPOCHS
    phase1_lr: float = settings.DEFAULT_PHASE1_LR
    phase2_lr: float = settings.DEFAULT_PHASE2_LR
    seed: int = 0
    knowledge_guidance: bool = True
    steps_per_epoch: int = 0  # 0: one pass over the training instances
    aln_tasks: Tuple[str, ...] = TASKS
    augment: bool = True
    deterministic: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.total_epochs < 1:
            raise ValueError("schedule needs at least one epoch and no negative phase lengths")
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ValueError("learning rates must be > 0")
        if self.steps_per_epoch < 0:
            raise ValueError(f"steps_per_epoch must be >= 0, got {self.steps_per_epoch}")
        unknown = set(self.aln_tasks) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown ALN tasks {sorted(unknown)}")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def phase(self, epoch: int) -> int:
        return 1 if epoch < self.phase1_epochs else 2

    def learning_rate(self, epoch: int) -> float:
        return self.phase1_lr if self.phase(epoch) == 1 else self.phase2_lr

    def lambdas(self, epoch: int) -> Tuple[float, float, float]:
        """(pose, color, type) weights; color stays masked through phase 1."""
        return (1.0, 0.0 if self.phase(epoch) == 1 else 1.0, 1.0)

    @property
    def positives_per_batch(self) -> int:
        return (self.batch_size + 1) // 2


# -------------------- Sampling --------------------

class TrainingPool:
    """Images of one split plus a flat list of their vehicle instances.

    Images are decoded on demand and kept in a bounded cache, so a prefetch
    thread and the caller can share the pool.
    """

    def __init__(self, records: Sequence[AnnotationRecord], loader, cache_size: int = 256):
        self.records = list(records)
        self._loader = loader
        self._cache: "OrderedDict[int, np.ndarray]" = OrderedDict()
        self._cache_size = max(1, int(cache_size))
        self._lock = threading.Lock()
        self.instances: List[Tuple[int, int]] = [
            (i, j)
            for i, rec in enumerate(self.records)
            for j, lab in enumerate(rec.labels)
            if lab[0] == 1
        ]
        if not self.records:
            raise DatasetError("training pool is empty")
        if not self.instances:
            raise DatasetError("training pool has no vehicle instances")

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str = "train", cache_size: int = 256) -> "TrainingPool":
        recs = manifest.records()
        records = []
        for image_id in manifest.split_ids(split):
            if image_id not in recs:
                raise DatasetError(f"image id {image_id!r} has no record")
            records.append(recs[image_id])

        def load(i: int) -> np.ndarray:
            return to_uint8(manifest.load_sample(records[i].image_id).image)

        return cls(records, load, cache_size)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "TrainingPool":
        images = [s.image for s in samples]
        return cls([s.record for s in samples], lambda i: images[i], cache_size=len(samples) or 1)

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        with self._lock:
            arr = self._cache.get(i)
            if arr is not None:
                self._cache.move_to_end(i)
        if arr is None:
            arr = self._loader(i)
            with self._lock:
                self._cache[i] = arr
                while len(self._cache) > self._cache_size:
                    self._cache.popitem(last=False)
        if arr.dtype == np.uint8:
            return arr.astype(np.float32) / 255.0
        return arr

    def vehicle_boxes(self, i: int) -> List[Tuple[float, float, float, float]]:
        rec = self.records[i]
        return [b for b, lab in zip(rec.boxes, rec.labels) if lab[0] == 1]


@dataclass
class PairedBatch:
    """Row i of every field describes the same instance or background region."""

    aln_crops: np.ndarray
    fvpn_patches: np.ndarray
    fvpn_targets: FvpnTarget
    aln_labels: AttributeLabels
    crop_boxes: np.ndarray
    patch_boxes: np.ndarray
    image_index: np.ndarray

    def __len__(self) -> int:
        return int(self.fvpn_patches.shape[0])

    def pairing_ok(self) -> bool:
        pos = np.asarray(self.fvpn_targets.is_vehicle).astype(bool)
        return all(contains(self.patch_boxes[i], self.crop_boxes[i]) for i in np.flatnonzero(pos))


def _augment_view(view: np.ndarray, seed: int) -> np.ndarray:
    """Same random draw for both views of a pair: equal seeds give equal factors."""
    rng = np.random.default_rng(seed)
    out = random_augment(Sample(view, AnnotationRecord("patch")), rng).image
    if out.shape[:2] != view.shape[:2]:
        out = resize(out, view.shape[0], view.shape[1], antialias=False)
    return out.astype(np.float32)


def make_paired_batch(
    pool: TrainingPool,
    rng: np.random.Generator,
    batch_size: int,
    aln_side: int = settings.DEFAULT_ALN_SIDE,
    fvpn_side: int = settings.FVPN_INPUT_SIDE,
    augment: bool = True,
) -> PairedBatch:
    """Positives and background patches at 1:1 (the odd extra row is positive)."""
    n_pos = (batch_size + 1) // 2
    n_neg = batch_size - n_pos

    fv, al, locs, rows, crops, patches, where = [], [], [], [], [], [], []

    def push(i: int, img: np.ndarray, crop_box, patch, loc, label_row) -> None:
        f = crop_resize(img, patch_box(patch), fvpn_side)
        a = crop_resize(img, crop_box, aln_side)
        if augment:
            seed = int(rng.integers(2**32))
            f, a = _augment_view(f, seed), _augment_view(a, seed)
        fv.append(f)
        al.append(a)
        locs.append(loc)
        rows.append(label_row)
        crops.append(tuple(float(v) for v in crop_box))
        patches.append(patch_box(patch))
        where.append(i)

    for k in rng.integers(len(pool.instances), size=n_pos):
        i, j = pool.instances[int(k)]
        img = pool.image(i)
        h, w = img.shape[:2]
        box = pool.records[i].boxes[j]
        patch = positive_patch(box, w, h, rng)
        push(i, img, box, patch, loc_target(box, patch), tuple(pool.records[i].labels[j]))

    for _ in range(n_neg):
        for _attempt in range(20):
            i = int(rng.integers(len(pool)))
            img = pool.image(i)
            h, w = img.shape[:2]
            patch = negative_patch(pool.vehicle_boxes(i), w, h, rng, min_side=fvpn_side * 0.66)
            if patch is not None:
                break
        else:
            raise DatasetError("no background region found; the dataset lacks negatives")
        push(i, img, patch_box(patch), patch, np.zeros(4), (0, 0, 0, 0))

    is_vehicle = np.array([r[0] for r in rows], dtype=np.int64)
    return PairedBatch(
        aln_crops=to_chw_batch(al),
        fvpn_patches=to_chw_batch(fv),
        fvpn_targets=FvpnTarget(is_vehicle=is_vehicle, loc_t=np.asarray(locs, dtype=np.float64)),
        aln_labels=AttributeLabels.from_rows(rows),
        crop_boxes=np.asarray(crops, dtype=np.float64),
        patch_boxes=np.asarray(patches, dtype=np.float64),
        image_index=np.asarray(where, dtype=np.int64),
    )


# -------------------- Optimization --------------------

class JointTrainer:
    """Owns one SGD state per net and runs paired steps."""

    def __init__(self, model: ModelBundle, schedule: TrainSchedule):
        self.model = model
        self.schedule = schedule
        lr = schedule.learning_rate(0)
        self.fvpn_opt = SGD(model.fvpn.params, lr, schedule.momentum, schedule.weight_decay)
        self.aln_opt = SGD(model.aln.params, lr, schedule.momentum, schedule.weight_decay)

    def set_epoch(self, epoch: int) -> None:
        lr = self.schedule.learning_rate(epoch)
        self.fvpn_opt.set_learning_rate(lr)
        self.aln_opt.set_learning_rate(lr)

    def losses(self, batch: PairedBatch, epoch: int = 0):
        """Forward both nets; returns (aln loss, fvpn loss, report)."""
        sched = self.schedule
        fvpn, aln = self.model.fvpn, self.model.aln

        aln_heads = aln(Tensor(batch.aln_crops))
        aln_total, aln_report = aln_loss(
            aln_heads, batch.aln_labels, aln.config, lambdas=sched.lambdas(epoch), tasks=sched.aln_tasks
        )
        target = batch.fvpn_targets
        if sched.knowledge_guidance:
            target = replace(target, t_know=extract_knowledge(aln_heads).data.astype(np.float64))
        fvpn_heads = fvpn(Tensor(batch.fvpn_patches))
        fvpn_total, fvpn_report = fvpn_loss(fvpn_heads, target, fvpn.config, guidance=sched.knowledge_guidance)

        report = dict(aln_report)
        report.update(fvpn_report)
        return aln_total, fvpn_total, report

    def train_step(self, batch: PairedBatch, epoch: int = 0) -> Dict[str, float]:
        self.model.fvpn.zero_grad()
        self.model.aln.zero_grad()
        aln_total, fvpn_total, report = self.losses(batch, epoch)
        for name in ("l_aln", "l_fvpn"):
            if not math.isfinite(report[name]):
                raise NonFiniteError(f"train_step: {name} is {report[name]} ({_fmt(report)})")
        total = report["l_aln"] + report["l_fvpn"]
        if total > settings.DIVERGENCE_LOSS:
            # parameters are untouched when this raises
            raise DivergenceError(
                f"epoch {epoch}: loss {total:.4g} > {settings.DIVERGENCE_LOSS:g} ({_fmt(report)})"
            )
        aln_total.backward()
        fvpn_total.backward()
        self.aln_opt.step()
        self.fvpn_opt.step()
        report["lr"] = self.fvpn_opt.learning_rate
        return report


def train_step(batch: PairedBatch, trainer: JointTrainer, epoch: int = 0) -> Dict[str, float]:
    return trainer.train_step(batch, epoch)


def _fmt(report: Dict[str, float]) -> str:
    return ", ".join(f"{k}={v:.4g}" for k, v in sorted(report.items()))


# -------------------- Driver --------------------

@dataclass
class TrainingResult:
    checkpoint: str
    curve_csv: str
    rows: List[Dict[str, float]] = field(default_factory=list)
    final: Dict[str, float] = field(default_factory=dict)
    model: Optional[ModelBundle] = None

    @property
    def steps(self) -> int:
        return len(self.rows)


def _epoch_batches(pool: TrainingPool, schedule: TrainSchedule, aln_side: int, epoch: int, steps: int):
    for step in range(steps):
        rng = np.random.default_rng([schedule.seed, epoch, step])
        yield make_paired_batch(pool, rng, schedule.batch_size, aln_side=aln_side, augment=schedule.augment)


def run_training(
    manifest: Optional[DatasetManifest],
    schedule: TrainSchedule,
    out_dir: str,
    model: Optional[ModelBundle] = None,
    pool: Optional[TrainingPool] = None,
    fvpn_config: Optional[FvpnConfig] = None,
    aln_config: Optional[AlnConfig] = None,
    split: str = "train",
    quiet: bool = False,
) -> TrainingResult:
    """Two-phase joint training; writes per-epoch checkpoints, the final model and the loss curve."""
    if pool is None:
        if manifest is None:
            raise ValueError("run_training needs a manifest or a pool")
        pool = TrainingPool.from_manifest(manifest, split)
    if model is None:
        vocab = manifest.vocab if manifest is not None else None
        fvpn_config = fvpn_config or FvpnConfig()
        if aln_config is None and vocab is not None:
            aln_config = AlnConfig(num_types=len(vocab.types), feature_dim=fvpn_config.knowledge_dim)
        model = ModelBundle.create(fvpn_config, aln_config, vocab, seed=schedule.seed)
    trainer = JointTrainer(model, schedule)
    steps = schedule.steps_per_epoch or max(1, math.ceil(len(pool.instances) / schedule.positives_per_batch))
    aln_side = model.aln.config.input_side

    os.makedirs(os.path.join(out_dir, CHECKPOINT_DIR), exist_ok=True)
    curve_path = os.path.join(out_dir, CURVE_FILE)
    rows: List[Dict[str, float]] = []
    epoch_means: Dict[str, float] = {}
    log.info(
        "%d images, %d instances, %d epochs x %d steps, batch %d, guidance %s",
        len(pool), len(pool.instances), schedule.total_epochs, steps, schedule.batch_size,
        "on" if schedule.knowledge_guidance else "off",
    )

    with open(curve_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for epoch in range(schedule.total_epochs):
            trainer.set_epoch(epoch)
            source = maybe_prefetch(
                _epoch_batches(pool, schedule, aln_side, epoch, steps), enabled=not schedule.deterministic
            )
            epoch_rows: List[Dict[str, float]] = []
            try:
                bar = tqdm(
                    source, total=steps, desc=f"epoch {epoch + 1}/{schedule.total_epochs}",
                    disable=not progress_enabled(quiet), leave=False,
                )
                for step, batch in enumerate(bar):
                    try:
                        report = trainer.train_step(batch, epoch)
                    except DivergenceError as e:
                        raise DivergenceError(f"step {step}, {e}") from e
                    row = {"epoch": epoch, "step": step}
                    row.update({k: report[k] for k in CURVE_COLUMNS[2:]})
                    writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
                    row["l_fvpn"] = report["l_fvpn"]
                    rows.append(row)
                    epoch_rows.append(row)
            finally:
                if isinstance(source, Prefetcher):
                    source.close()

            epoch_means = {
                k: float(np.mean([r[k] for r in epoch_rows]))
                for k in ("l_aln", "l_bic", "l_bbox_weighted", "l_know_weighted", "l_fvpn")
            }
            model.save(os.path.join(out_dir, CHECKPOINT_DIR, f"epoch_{epoch + 1:03d}.daveckpt"))
            log.info(
                "epoch %d/%d (phase %d, lr %g): L_ALN %.4f  L_FVPN %.4f  [bic %.4f  bbox %.4f  know %.4f]",
                epoch + 1, schedule.total_epochs, schedule.phase(epoch), schedule.learning_rate(epoch),
                epoch_means["l_aln"], epoch_means["l_fvpn"], epoch_means["l_bic"],
                epoch_means["l_bbox_weighted"], epoch_means["l_know_weighted"],
            )

    final_path = model.save(os.path.join(out_dir, MODEL_FILE))
    log.info("model -> %s", final_path)
    return TrainingResult(checkpoint=final_path, curve_csv=curve_path, rows=rows, final=epoch_means, model=model)



# -------------------- Guidance ablation --------------------

@dataclass
class AblationResult:
    seeds: List[int]
    guided: List[float]
    unguided: List[float]
    curves: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def median_guided(self) -> float:
        return float(np.median(self.guided))

    @property
    def median_unguided(self) -> float:
        return float(np.median(self.unguided))

    @property
    def guidance_helps(self) -> bool:
        return self.median_guided <= self.median_unguided


def guidance_ablation(
    manifest: Optional[DatasetManifest],
    schedule: TrainSchedule,
    seeds: Sequence[int],
    out_dir: str,
    pool: Optional[TrainingPool] = None,
    fvpn_config: Optional[FvpnConfig] = None,
    aln_config: Optional[AlnConfig] = None,
    quiet: bool = False,
) -> AblationResult:
    """Paired trainings with and without knowledge guidance, one pair per seed.

    Each arm reports the last-epoch mean of L_bic + alpha*L_bbox. Both arms of a
    pair share initial weights and batches.
    """
    if not seeds:
        raise ValueError("guidance_ablation needs at least one seed")
    if pool is None:
        if manifest is None:
            raise ValueError("guidance_ablation needs a manifest or a pool")
        pool = TrainingPool.from_manifest(manifest)
    result = AblationResult(seeds=list(seeds), guided=[], unguided=[], curves={"guided": [], "unguided": []})
    for seed in seeds:
        for guided in (True, False):
            arm = "guided" if guided else "unguided"
            run = run_training(
                manifest,
                replace(schedule, seed=int(seed), knowledge_guidance=guided),
                os.path.join(out_dir, f"seed{seed}_{arm}"),
                pool=pool,
                fvpn_config=fvpn_config,
                aln_config=aln_config,
                quiet=quiet,
            )
            score = run.final["l_bic"] + run.final["l_bbox_weighted"]
            getattr(result, arm).append(score)
            result.curves[arm].append(run.curve_csv)
            log.info("seed %d %s: final L_bic + a*L_bbox = %.4f", seed, arm, score)
    log.info(
        "median final L_bic + a*L_bbox: guided %.4f, unguided %.4f",
        result.median_guided, result.median_unguided,
    )
    return result

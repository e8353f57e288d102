"""Dataset manifest, annotation records and batch loading.

On disk a dataset is::

    manifest.json        vocabularies, splits, seed, records file name
    records.jsonl        {"image": ..., "boxes": [[x,y,w,h],...], "labels": [[V,P,C,T],...]}
    images/*.png
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from dave import settings
from dave.data.imageio import read_image
from dave.errors import DatasetError
from dave.log import get_logger

log = get_logger("DATA")

MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "records.jsonl"
SPLITS = ("train", "val", "test")

Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class Vocabulary:
    """Attribute names; index 0 is the catch-all / unavailable slot."""

    poses: Tuple[str, ...] = settings.POSES
    colors: Tuple[str, ...] = settings.COLORS
    types: Tuple[str, ...] = settings.TYPES_6

    def validate(self) -> None:
        if tuple(self.poses) != settings.POSES:
            raise DatasetError(f"pose vocabulary must be {list(settings.POSES)}, got {list(self.poses)}")
        if tuple(self.colors) != settings.COLORS:
            raise DatasetError(f"color vocabulary must be {list(settings.COLORS)}, got {list(self.colors)}")
        if len(self.types) not in (6, 12):
            raise DatasetError(f"type vocabulary must have 6 or 12 names, got {len(self.types)}")

    @staticmethod
    def _name(names: Sequence[str], idx: int) -> str:
        return names[idx - 1] if 1 <= idx <= len(names) else settings.CATCH_ALL

    def pose_name(self, idx: int) -> str:
        return self._name(self.poses, idx)

    def color_name(self, idx: int) -> str:
        return self._name(self.colors, idx)

    def type_name(self, idx: int) -> str:
        return self._name(self.types, idx)

    def to_json(self) -> Dict[str, List[str]]:
        return {
            "pose": list(self.poses),
            "color": list(self.colors) + [settings.CATCH_ALL],
            "type": list(self.types) + [settings.CATCH_ALL],
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Sequence[str]]) -> "Vocabulary":
        def strip(names: Sequence[str]) -> Tuple[str, ...]:
            return tuple(n for n in names if n != settings.CATCH_ALL)

        try:
            vocab = cls(strip(obj["pose"]), strip(obj["color"]), strip(obj["type"]))
        except KeyError as e:
            raise DatasetError(f"vocabularies: missing {e.args[0]!r}") from None
        vocab.validate()
        return vocab


@dataclass
class AnnotationRecord:
    image: str
    boxes: List[Box] = field(default_factory=list)
    labels: List[Tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def image_id(self) -> str:
        return os.path.splitext(os.path.basename(self.image))[0]

    def validate(self, vocab: Vocabulary, width: Optional[int] = None, height: Optional[int] = None) -> None:
        if len(self.boxes) != len(self.labels):
            raise DatasetError(f"{self.image}: {len(self.boxes)} boxes but {len(self.labels)} label rows")
        for box, lab in zip(self.boxes, self.labels):
            x, y, w, h = box
            if w <= 0 or h <= 0 or x < 0 or y < 0:
                raise DatasetError(f"{self.image}: bad box {list(box)}")
            if width is not None and height is not None and (x + w > width + 1e-6 or y + h > height + 1e-6):
                raise DatasetError(f"{self.image}: box {list(box)} outside {width}x{height} image")
            V, P, C, T = lab
            if V not in (0, 1):
                raise DatasetError(f"{self.image}: V label {V} not in {{0, 1}}")
            if V == 0 and (P or C or T):
                raise DatasetError(f"{self.image}: background box with attribute labels")
            if not (0 <= P <= len(vocab.poses) and 0 <= C <= len(vocab.colors) and 0 <= T <= len(vocab.types)):
                raise DatasetError(f"{self.image}: labels {list(lab)} outside vocabulary ranges")

    def to_json(self) -> Dict[str, Any]:
        return {
            "image": self.image,
            "boxes": [[float(v) for v in b] for b in self.boxes],
            "labels": [[int(v) for v in lab] for lab in self.labels],
        }

    @classmethod
    def from_json(cls, obj: Dict[str, Any]) -> "AnnotationRecord":
        try:
            return cls(
                image=str(obj["image"]),
                boxes=[tuple(float(v) for v in b) for b in obj.get("boxes", [])],
                labels=[tuple(int(v) for v in lab) for lab in obj.get("labels", [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed record: {e}") from None


@dataclass
class Sample:
    image: np.ndarray
    record: AnnotationRecord

    @property
    def image_id(self) -> str:
        return self.record.image_id

    @property
    def boxes(self) -> np.ndarray:
        return np.asarray(self.record.boxes, dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self.record.labels, dtype=np.int64).reshape(-1, 4)


@dataclass
class DatasetManifest:
    root: str
    vocab: Vocabulary = field(default_factory=Vocabulary)
    splits: Dict[str, List[str]] = field(default_factory=dict)
    seed: int = 0
    records_file: str = RECORDS_FILE
    scene: Dict[str, Any] = field(default_factory=dict)
    _records: Optional[Dict[str, AnnotationRecord]] = field(default=None, repr=False, compare=False)

    # ---------------- persistence ----------------
    def save(self, path: Optional[str] = None) -> str:
        path = path or os.path.join(self.root, MANIFEST_FILE)
        obj = {
            "root": ".",
            "vocabularies": self.vocab.to_json(),
            "splits": {k: list(v) for k, v in self.splits.items()},
            "seed": int(self.seed),
            "records": self.records_file,
            "scene": self.scene,
        }
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(obj, f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path: str) -> "DatasetManifest":
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_FILE)
        try:
            with open(path, "r", encoding="utf-8") as f:
                obj = json.load(f)
        except FileNotFoundError:
            raise DatasetError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as e:
            raise DatasetError(f"corrupt manifest {path}: {e}") from None
        base = os.path.dirname(os.path.abspath(path))
        root = os.path.normpath(os.path.join(base, obj.get("root", ".")))
        splits = {str(k): [str(i) for i in v] for k, v in obj.get("splits", {}).items()}
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise DatasetError(f"{path}: unknown splits {sorted(unknown)}")
        return cls(
            root=root,
            vocab=Vocabulary.from_json(obj.get("vocabularies", {})),
            splits=splits,
            seed=int(obj.get("seed", 0)),
            records_file=str(obj.get("records", RECORDS_FILE)),
            scene=dict(obj.get("scene", {})),
        )

    def write_records(self, records: Sequence[AnnotationRecord]) -> str:
        path = os.path.join(self.root, self.records_file)
        with open(path, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        self._records = {r.image_id: r for r in records}
        return path

    def records(self) -> Dict[str, AnnotationRecord]:
        if self._records is None:
            path = os.path.join(self.root, self.records_file)
            out: Dict[str, AnnotationRecord] = {}
            try:
                with open(path, "r", encoding="utf-8") as f:
                    for lineno, line in enumerate(f, start=1):
                        if not line.strip():
                            continue
                        try:
                            rec = AnnotationRecord.from_json(json.loads(line))
                        except (json.JSONDecodeError, DatasetError) as e:
                            raise DatasetError(f"{path}:{lineno}: {e}") from None
                        rec.validate(self.vocab)
                        out[rec.image_id] = rec
            except FileNotFoundError:
                raise DatasetError(f"records not found: {path}") from None
            self._records = out
        return self._records

    def split_ids(self, split: str) -> List[str]:
        if split not in self.splits:
            raise DatasetError(f"split {split!r} not in manifest (have {sorted(self.splits)})")
        return list(self.splits[split])

    def image_path(self, record: AnnotationRecord) -> str:
        return os.path.join(self.root, record.image)

    def load_sample(self, image_id: str) -> Sample:
        recs = self.records()
        if image_id not in recs:
            raise DatasetError(f"image id {image_id!r} has no record in {self.records_file}")
        rec = recs[image_id]
        image = read_image(self.image_path(rec))
        rec.validate(self.vocab, width=image.shape[1], height=image.shape[0])
        return Sample(image=image, record=rec)

    def load_split(self, split: str) -> List[Sample]:
        return [self.load_sample(i) for i in self.split_ids(split)]


class BatchLoader:
    """One epoch of shuffled batches over a split."""

    def __init__(self, manifest: DatasetManifest, split: str, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.manifest = manifest
        self.ids = manifest.split_ids(split)
        self.batch_size = int(batch_size)
        self.rng = rng

    def __len__(self) -> int:
        return math.ceil(len(self.ids) / self.batch_size)

    def __iter__(self) -> Iterator[List[Sample]]:
        order = self.rng.permutation(len(self.ids))
        for start in range(0, len(order), self.batch_size):
            chunk = order[start:start + self.batch_size]
            yield [self.manifest.load_sample(self.ids[i]) for i in chunk]


def load_batches(manifest: DatasetManifest, split: str, batch_size: int, rng: np.random.Generator) -> BatchLoader:
    return BatchLoader(manifest, split, batch_size, rng)

"""Synthetic traffic scenes with parametric vehicle glyphs.

Each glyph is a flat-shaded silhouette drawn with QPainter: the type sets the
side profile (cabin extent, roof line, wheel size) and front face proportions,
the pose picks side / front / rear views or a front-side / rear-side
composite, and the body is filled from the five-color palette or from an
off-palette catch-all color. Scenes are fully determined by (seed, index).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PySide6.QtCore import QPointF, QRectF, Qt
from PySide6.QtGui import QBrush, QColor, QImage, QPainter, QPainterPath, QPen, QPolygonF
from tqdm import tqdm

from dave import settings
from dave.data.dataset import AnnotationRecord, DatasetManifest, Vocabulary
from dave.data.imageio import array_to_qimage, ensure_gui, gaussian_blur, qimage_to_array, resize, write_image
from dave.log import get_logger, progress_enabled

log = get_logger("SYNTH")

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "black": (25, 25, 28),
    "white": (236, 236, 234),
    "silver": (160, 163, 168),
    "red": (190, 30, 35),
    "blue": (30, 60, 170),
}
CATCH_ALL_PALETTE: Dict[str, Tuple[int, int, int]] = {
    "green": (40, 140, 60),
    "yellow": (220, 190, 40),
    "orange": (225, 120, 30),
    "brown": (115, 72, 40),
}

GLASS = (40, 50, 62)
TIRE = (18, 18, 18)
HEADLIGHT = (250, 242, 205)
TAILLIGHT = (205, 25, 25)
PLATE = (230, 230, 212)
GRILLE = (52, 52, 56)

# body band every view keeps free of details; color is measured inside it
BODY_PATCH = (0.35, 0.55, 0.65, 0.72)


@dataclass(frozen=True)
class TypeProfile:
    side_aspect: float
    cab_x0: float
    roof_x0: float
    roof_x1: float
    cab_x1: float
    face_aspect: float
    roof_width: float
    wheel: float = 0.15
    belt: float = 0.45
    open_top: bool = False
    bed: bool = False


PROFILES: Dict[str, TypeProfile] = {
    "MPV": TypeProfile(2.1, 0.08, 0.25, 0.92, 0.97, 1.25, 0.80),
    "SUV": TypeProfile(2.0, 0.20, 0.28, 0.95, 0.97, 1.20, 0.85, wheel=0.17),
    "sedan": TypeProfile(2.5, 0.25, 0.38, 0.68, 0.80, 1.60, 0.65, wheel=0.14),
    "hatchback": TypeProfile(2.1, 0.22, 0.35, 0.85, 0.95, 1.45, 0.70, wheel=0.14),
    "minibus": TypeProfile(2.0, 0.03, 0.06, 0.97, 0.98, 1.00, 0.92, wheel=0.13, belt=0.50),
    "pickup": TypeProfile(2.6, 0.22, 0.30, 0.50, 0.55, 1.30, 0.80, wheel=0.17, bed=True),
    "fastback": TypeProfile(2.5, 0.25, 0.38, 0.55, 0.95, 1.60, 0.65, wheel=0.14),
    "estate": TypeProfile(2.5, 0.22, 0.32, 0.95, 0.97, 1.55, 0.70, wheel=0.14),
    "hardtop-convertible": TypeProfile(2.6, 0.30, 0.42, 0.62, 0.72, 1.75, 0.55, wheel=0.13, belt=0.48),
    "sports": TypeProfile(2.8, 0.32, 0.45, 0.60, 0.78, 1.90, 0.50, wheel=0.13, belt=0.50),
    "crossover": TypeProfile(2.2, 0.22, 0.32, 0.88, 0.95, 1.35, 0.75, wheel=0.16),
    "convertible": TypeProfile(2.6, 0.30, 0.40, 0.45, 0.50, 1.75, 0.55, wheel=0.13, belt=0.48, open_top=True),
}


@dataclass(frozen=True)
class SceneSpec:
    width: int = 320
    height: int = 240
    min_vehicles: int = 1
    max_vehicles: int = 3
    min_size: int = 36
    max_size: int = 100
    num_types: int = 6
    color_catch_all: bool = True
    illumination: Tuple[float, float] = (0.9, 1.1)
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self) -> None:
        if min(self.width, self.height) < settings.FVPN_INPUT_SIDE:
            raise ValueError(f"scene must be at least {settings.FVPN_INPUT_SIDE}px on each side")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("vehicle size range is empty")
        if self.max_size > min(self.width, self.height):
            raise ValueError("max vehicle size exceeds the scene")
        settings.types_for(self.num_types)


@dataclass
class Glyph:
    box: Tuple[int, int, int, int]
    pose: int
    color: int
    vtype: int
    rgb: Tuple[int, int, int]
    mirror: bool = False

    @property
    def labels(self) -> Tuple[int, int, int, int]:
        return (1, self.pose, self.color, self.vtype)


# -------------------- Drawing --------------------

class _Frame:
    """Maps normalized (u, v) in a region to pixel points, optionally mirrored."""

    def __init__(self, x: float, y: float, w: float, h: float, mirror: bool = False):
        self.x, self.y, self.w, self.h, self.mirror = x, y, w, h, mirror

    def p(self, u: float, v: float) -> QPointF:
        if self.mirror:
            u = 1.0 - u
        return QPointF(self.x + u * self.w, self.y + v * self.h)

    def rect(self, u0: float, v0: float, u1: float, v1: float) -> QRectF:
        a, b = self.p(u0, v0), self.p(u1, v1)
        return QRectF(min(a.x(), b.x()), min(a.y(), b.y()), abs(b.x() - a.x()), abs(b.y() - a.y()))

    def poly(self, pts: Sequence[Tuple[float, float]]) -> QPolygonF:
        return QPolygonF([self.p(u, v) for u, v in pts])


def _fill(painter: QPainter, rgb: Tuple[int, int, int]) -> None:
    painter.setPen(Qt.PenStyle.NoPen)
    painter.setBrush(QBrush(QColor(*rgb)))


def _draw_side(painter: QPainter, f: _Frame, prof: TypeProfile, rgb: Tuple[int, int, int]) -> None:
    belt = prof.belt
    _fill(painter, rgb)
    body = QPainterPath()
    body.addRoundedRect(f.rect(0.0, belt, 1.0, 0.86), 0.06 * f.h, 0.06 * f.h)
    painter.drawPath(body)

    if prof.open_top:
        painter.drawPolygon(f.poly([(prof.cab_x0, belt), (prof.roof_x0, 0.0), (prof.roof_x0 + 0.04, 0.0), (prof.cab_x0 + 0.07, belt)]))
        _fill(painter, GLASS)
        painter.drawPolygon(f.poly([(prof.cab_x0 + 0.03, belt), (prof.roof_x0 + 0.01, 0.08), (prof.roof_x0 + 0.03, 0.08), (prof.cab_x0 + 0.06, belt)]))
        painter.drawRect(f.rect(prof.cab_x0 + 0.12, belt - 0.08, prof.cab_x1 + 0.15, belt))
    else:
        painter.drawPolygon(f.poly([(prof.cab_x0, belt), (prof.roof_x0, 0.0), (prof.roof_x1, 0.0), (prof.cab_x1, belt)]))
        _fill(painter, GLASS)
        inset = 0.035
        top, bottom = 0.08, belt - 0.04
        slope0 = (prof.roof_x0 - prof.cab_x0) / belt
        slope1 = (prof.cab_x1 - prof.roof_x1) / belt
        painter.drawPolygon(f.poly([
            (prof.cab_x0 + inset + slope0 * (belt - bottom), bottom),
            (prof.cab_x0 + inset + slope0 * (belt - top), top),
            (prof.cab_x1 - inset - slope1 * (belt - top), top),
            (prof.cab_x1 - inset - slope1 * (belt - bottom), bottom),
        ]))
        _fill(painter, rgb)
        mid = 0.5 * (prof.roof_x0 + prof.roof_x1)
        painter.drawRect(f.rect(mid - 0.012, top, mid + 0.012, bottom))

    if prof.bed:
        painter.setPen(QPen(QColor(*GLASS), max(1.0, 0.02 * f.h)))
        painter.drawLine(f.p(prof.cab_x1 + 0.02, belt + 0.04), f.p(0.97, belt + 0.04))

    _fill(painter, HEADLIGHT)
    painter.drawRect(f.rect(0.0, belt + 0.05, 0.035, belt + 0.12))
    _fill(painter, TAILLIGHT)
    painter.drawRect(f.rect(0.965, belt + 0.05, 1.0, belt + 0.12))

    _fill(painter, TIRE)
    r = prof.wheel * f.h
    for u in (0.2, 0.8):
        c = f.p(u, 1.0 - prof.wheel)
        painter.drawEllipse(c, r, r)


def _draw_face(painter: QPainter, f: _Frame, prof: TypeProfile, rgb: Tuple[int, int, int], front: bool) -> None:
    side_in = 0.5 * (1.0 - prof.roof_width)
    _fill(painter, TIRE)
    painter.drawRect(f.rect(0.06, 0.84, 0.22, 1.0))
    painter.drawRect(f.rect(0.78, 0.84, 0.94, 1.0))

    _fill(painter, rgb)
    body = QPainterPath()
    body.addRoundedRect(f.rect(0.02, 0.42, 0.98, 0.88), 0.05 * f.h, 0.05 * f.h)
    painter.drawPath(body)
    top = 0.25 if prof.open_top else 0.0
    painter.drawPolygon(f.poly([(0.1, 0.42), (side_in, top), (1.0 - side_in, top), (0.9, 0.42)]))
    _fill(painter, GLASS)
    painter.drawPolygon(f.poly([(0.16, 0.39), (side_in + 0.05, top + 0.07), (0.95 - side_in, top + 0.07), (0.84, 0.39)]))

    if front:
        _fill(painter, HEADLIGHT)
        painter.drawEllipse(f.rect(0.06, 0.47, 0.26, 0.55))
        painter.drawEllipse(f.rect(0.74, 0.47, 0.94, 0.55))
        _fill(painter, GRILLE)
        painter.drawRect(f.rect(0.3, 0.75, 0.7, 0.83))
    else:
        _fill(painter, TAILLIGHT)
        painter.drawRect(f.rect(0.05, 0.47, 0.25, 0.54))
        painter.drawRect(f.rect(0.75, 0.47, 0.95, 0.54))
        _fill(painter, PLATE)
        painter.drawRect(f.rect(0.38, 0.75, 0.62, 0.83))


def glyph_aspect(pose: str, prof: TypeProfile) -> float:
    if pose == "side":
        return prof.side_aspect
    if pose in ("front", "rear"):
        return prof.face_aspect
    return 0.55 * prof.side_aspect + 0.45 * prof.face_aspect


def draw_vehicle(painter: QPainter, glyph: Glyph, type_names: Sequence[str]) -> None:
    pose = settings.POSES[glyph.pose - 1]
    prof = PROFILES[type_names[glyph.vtype - 1]]
    x, y, w, h = glyph.box
    painter.setRenderHint(QPainter.RenderHint.Antialiasing, True)
    if pose == "side":
        _draw_side(painter, _Frame(x, y, w, h, glyph.mirror), prof, glyph.rgb)
    elif pose in ("front", "rear"):
        _draw_face(painter, _Frame(x, y, w, h), prof, glyph.rgb, front=(pose == "front"))
    else:
        face_w = 0.42 * w
        side = _Frame(x + 0.3 * w, y, 0.7 * w, h, mirror=glyph.mirror)
        face = _Frame(x + (w - face_w if glyph.mirror else 0.0), y, face_w, h)
        _draw_side(painter, side, prof, glyph.rgb)
        _draw_face(painter, face, prof, glyph.rgb, front=(pose == "frontside"))


# -------------------- Scene --------------------

def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    base = rng.uniform(0.25, 0.6, size=3)
    base = 0.7 * base.mean() + 0.3 * base
    coarse = rng.normal(size=(h // 16 + 2, w // 16 + 2, 3)).astype(np.float32)
    low = resize(gaussian_blur(coarse, 1.0), h, w, antialias=False)
    ramp = np.linspace(-0.08, 0.08, h, dtype=np.float32)[:, None, None] * rng.choice([-1.0, 1.0])
    fine = rng.normal(0.0, 0.02, size=(h, w, 3))
    img = base[None, None, :] + 0.07 * low + ramp + fine
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _clutter(painter: QPainter, spec: SceneSpec, rng: np.random.Generator) -> None:
    painter.setRenderHint(QPainter.RenderHint.Antialiasing, True)
    for _ in range(int(rng.integers(1, 4))):
        shade = int(rng.integers(170, 215))
        painter.setPen(QPen(QColor(shade, shade, shade - 10), float(rng.uniform(1.5, 3.0)), Qt.PenStyle.DashLine))
        y0 = float(rng.uniform(0, spec.height))
        y1 = float(np.clip(y0 + rng.normal(0, spec.height * 0.2), 0, spec.height))
        painter.drawLine(QPointF(0, y0), QPointF(spec.width, y1))
    painter.setPen(Qt.PenStyle.NoPen)
    for _ in range(int(rng.integers(0, 5))):
        g = int(rng.integers(60, 110))
        painter.setBrush(QBrush(QColor(int(g * 0.5), g, int(g * 0.5))))
        r = float(rng.uniform(4, 12))
        painter.drawEllipse(QPointF(rng.uniform(0, spec.width), rng.uniform(0, spec.height)), r, r)


def _overlaps(box: Tuple[int, int, int, int], others: Sequence[Tuple[int, int, int, int]], margin: int = 4) -> bool:
    x, y, w, h = box
    for ox, oy, ow, oh in others:
        if x < ox + ow + margin and ox < x + w + margin and y < oy + oh + margin and oy < y + h + margin:
            return True
    return False


def sample_glyphs(spec: SceneSpec, rng: np.random.Generator) -> List[Glyph]:
    type_names = settings.types_for(spec.num_types)
    count = int(rng.integers(spec.min_vehicles, spec.max_vehicles + 1))
    color_choices = len(settings.COLORS) + (1 if spec.color_catch_all else 0)
    glyphs: List[Glyph] = []
    for _ in range(count):
        pose = int(rng.integers(1, len(settings.POSES) + 1))
        vtype = int(rng.integers(1, len(type_names) + 1))
        pick = int(rng.integers(color_choices))
        if pick < len(settings.COLORS):
            color = pick + 1
            rgb = PALETTE[settings.COLORS[pick]]
        else:
            color = 0
            rgb = list(CATCH_ALL_PALETTE.values())[int(rng.integers(len(CATCH_ALL_PALETTE)))]
        jitter = rng.integers(-8, 9, size=3)
        rgb = tuple(int(np.clip(c + j, 0, 255)) for c, j in zip(rgb, jitter))
        mirror = bool(rng.integers(2))

        aspect = glyph_aspect(settings.POSES[pose - 1], PROFILES[type_names[vtype - 1]])
        for _attempt in range(50):
            longer = float(rng.uniform(spec.min_size, spec.max_size))
            w, h = (longer, longer / aspect) if aspect >= 1 else (longer * aspect, longer)
            w, h = max(12, int(round(w))), max(12, int(round(h)))
            if w > spec.width or h > spec.height:
                continue
            x = int(rng.integers(0, spec.width - w + 1))
            y = int(rng.integers(0, spec.height - h + 1))
            box = (x, y, w, h)
            if not _overlaps(box, [g.box for g in glyphs]):
                glyphs.append(Glyph(box, pose, color, vtype, rgb, mirror))
                break
    return glyphs


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> Tuple[np.ndarray, List[Glyph]]:
    """uint8 H x W x 3 scene plus the glyphs drawn in it."""
    ensure_gui()
    type_names = settings.types_for(spec.num_types)
    background = _background(spec, rng)
    glyphs = sample_glyphs(spec, rng)

    canvas = array_to_qimage(background).convertToFormat(QImage.Format.Format_RGB32)
    painter = QPainter(canvas)
    try:
        _clutter(painter, spec, rng)
        for g in glyphs:
            draw_vehicle(painter, g, type_names)
    finally:
        painter.end()

    lo, hi = spec.illumination
    light = float(rng.uniform(lo, hi))
    img = qimage_to_array(canvas).astype(np.float32) * light
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), glyphs


def measure_color(image: np.ndarray, box: Sequence[float]) -> int:
    """Color label re-measured from the body band of a rendered glyph (0 = catch-all)."""
    arr = image.astype(np.float32)
    if arr.max() <= 1.0:
        arr = arr * 255.0
    x, y, w, h = box
    u0, v0, u1, v1 = BODY_PATCH
    region = arr[int(y + v0 * h):int(np.ceil(y + v1 * h)), int(x + u0 * w):int(np.ceil(x + u1 * w))]
    rgb = np.median(region.reshape(-1, 3), axis=0)
    names = list(PALETTE) + list(CATCH_ALL_PALETTE)
    refs = np.array(list(PALETTE.values()) + list(CATCH_ALL_PALETTE.values()), dtype=np.float32)
    best = int(np.argmin(((refs - rgb) ** 2).sum(axis=1)))
    return settings.COLORS.index(names[best]) + 1 if names[best] in PALETTE else 0


# -------------------- Dataset --------------------

def _splits(ids: List[str], fractions: Tuple[float, float, float], seed: int) -> Dict[str, List[str]]:
    order = np.random.default_rng([seed, 7919]).permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    if n >= 3:
        n_train = min(max(n_train, 1), n - 2)
        n_val = min(max(n_val, 1), n - n_train - 1)
    picked = [ids[i] for i in order]
    return {
        "train": sorted(picked[:n_train]),
        "val": sorted(picked[n_train:n_train + n_val]),
        "test": sorted(picked[n_train + n_val:]),
    }


def synth_generate(
    out_dir: str,
    count: int,
    spec: Optional[SceneSpec] = None,
    seed: int = 0,
    quiet: bool = False,
) -> DatasetManifest:
    """Render ``count`` scenes into ``out_dir`` and write the manifest + records."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    spec = spec or SceneSpec()
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    vocab = Vocabulary(types=settings.types_for(spec.num_types))

    records: List[AnnotationRecord] = []
    for i in tqdm(range(count), desc="synth", disable=not progress_enabled(quiet)):
        rng = np.random.default_rng([seed, i])
        image, glyphs = render_scene(spec, rng)
        rel = f"images/{i:06d}.png"
        write_image(os.path.join(out_dir, rel), image)
        rec = AnnotationRecord(
            image=rel,
            boxes=[tuple(float(v) for v in g.box) for g in glyphs],
            labels=[g.labels for g in glyphs],
        )
        rec.validate(vocab, width=spec.width, height=spec.height)
        records.append(rec)

    manifest = DatasetManifest(
        root=os.path.abspath(out_dir),
        vocab=vocab,
        splits=_splits([r.image_id for r in records], spec.split_fractions, seed),
        seed=seed,
        scene=asdict(spec),
    )
    manifest.write_records(records)
    path = manifest.save()
    log.info("wrote %d scenes, %d vehicles -> %s", count, sum(len(r.boxes) for r in records), path)
    return manifest

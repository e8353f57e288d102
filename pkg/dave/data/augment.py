"""Training-time augmentation: intensity variants, downscaling and blur."""

from __future__ import annotations

from typing import List

import numpy as np

from dave import settings
from dave.data.dataset import AnnotationRecord, Sample
from dave.data.imageio import gaussian_blur, resize


def _with_boxes(sample: Sample, image: np.ndarray, boxes: np.ndarray) -> Sample:
    rec = AnnotationRecord(
        image=sample.record.image,
        boxes=[tuple(float(v) for v in b) for b in boxes],
        labels=list(sample.record.labels),
    )
    return Sample(image=image, record=rec)


def clip_boxes(boxes: np.ndarray, width: int, height: int) -> np.ndarray:
    """Clip (x, y, w, h) boxes to the image rectangle."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0 = np.clip(b[:, 0], 0, width)
    y0 = np.clip(b[:, 1], 0, height)
    x1 = np.clip(b[:, 0] + b[:, 2], 0, width)
    y1 = np.clip(b[:, 1] + b[:, 3], 0, height)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)


def adjust_intensity(sample: Sample, factor: float) -> Sample:
    if factor == 1.0:
        return Sample(image=sample.image.copy(), record=sample.record)
    image = np.clip(sample.image * np.float32(factor), 0.0, 1.0).astype(np.float32)
    return Sample(image=image, record=sample.record)


def downscale(sample: Sample, factor: float) -> Sample:
    """Shrink the image by ``factor``; boxes scale by exactly the same factor."""
    if not 0 < factor <= 1:
        raise ValueError(f"downscale factor must be in (0, 1], got {factor}")
    if factor == 1.0:
        return sample
    h, w = sample.image.shape[:2]
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    image = resize(sample.image, nh, nw)
    boxes = clip_boxes(sample.boxes * factor, nw, nh)
    return _with_boxes(sample, image, boxes)


def blur(sample: Sample, sigma: float) -> Sample:
    if sigma <= 0:
        return sample
    return Sample(image=gaussian_blur(sample.image, sigma).astype(np.float32), record=sample.record)


def degrade(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random downscale (factor in [0.2, 1.0]) followed by a random Gaussian blur."""
    lo, hi = settings.DOWNSCALE_RANGE
    s_lo, s_hi = settings.BLUR_SIGMA_RANGE
    out = downscale(sample, float(rng.uniform(lo, hi)))
    return blur(out, float(rng.uniform(s_lo, s_hi)))


def augment(sample: Sample, rng: np.random.Generator, degraded: bool = True) -> List[Sample]:
    """Three intensity variants, plus a degraded copy of each when ``degraded``.

    The variant list starts with the factors of ``settings.INTENSITY_FACTORS``
    in order; the 1.0 variant equals the input.
    """
    variants = [adjust_intensity(sample, f) for f in settings.INTENSITY_FACTORS]
    if degraded:
        variants += [degrade(v, rng) for v in variants]
    return variants


def random_augment(sample: Sample, rng: np.random.Generator, degrade_prob: float = 0.5) -> Sample:
    """One random draw from the ``augment`` distribution, without building all variants."""
    factor = settings.INTENSITY_FACTORS[int(rng.integers(len(settings.INTENSITY_FACTORS)))]
    out = adjust_intensity(sample, factor)
    if rng.random() < degrade_prob:
        out = degrade(out, rng)
    return out


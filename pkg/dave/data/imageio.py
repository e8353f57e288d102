"""Image decoding/encoding through QImage and resampling helpers.

Arrays are float32 ``H x W x 3`` in [0, 1] unless stated otherwise.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence, Tuple

import numpy as np
from PySide6.QtGui import QGuiApplication, QImage
from scipy import ndimage

from dave.errors import DatasetError

_gui_app: Optional[QGuiApplication] = None


def ensure_gui() -> QGuiApplication:
    """Offscreen QGuiApplication, needed by QPainter text and fonts."""
    global _gui_app
    app = QGuiApplication.instance()
    if app is None:
        os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
        app = QGuiApplication(["dave"])
    _gui_app = app
    return app


# -------------------- QImage <-> numpy --------------------

def to_uint8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8))


def array_to_qimage(arr: np.ndarray) -> QImage:
    rgb = to_uint8(arr)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    return QImage(rgb.data, w, h, 3 * w, QImage.Format.Format_RGB888).copy()


def qimage_to_array(img: QImage) -> np.ndarray:
    """uint8 H x W x 3 copy of a QImage."""
    img = img.convertToFormat(QImage.Format.Format_RGB888)
    w, h, bpl = img.width(), img.height(), img.bytesPerLine()
    buf = np.frombuffer(img.constBits(), dtype=np.uint8, count=img.sizeInBytes())
    return buf.reshape(h, bpl)[:, : w * 3].reshape(h, w, 3).copy()


def read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise DatasetError(f"image not found: {path}")
    img = QImage(path)
    if img.isNull():
        raise DatasetError(f"cannot decode image: {path}")
    return qimage_to_array(img).astype(np.float32) / 255.0


def write_image(path: str, arr: np.ndarray) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    if not array_to_qimage(arr).save(path, "PNG"):
        raise OSError(f"cannot write image: {path}")


# -------------------- Resampling --------------------

def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    if arr.ndim == 3:
        return ndimage.gaussian_filter(arr, sigma=(sigma, sigma, 0), mode="nearest")
    return ndimage.gaussian_filter(arr, sigma=sigma, mode="nearest")


def _sample(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray, mode: str, cval: float) -> np.ndarray:
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, [yy, xx], order=1, mode=mode, cval=cval).astype(arr.dtype)
    chans = [
        ndimage.map_coordinates(arr[..., c], [yy, xx], order=1, mode=mode, cval=cval)
        for c in range(arr.shape[2])
    ]
    return np.stack(chans, axis=-1).astype(arr.dtype)


def resize(arr: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Bilinear resize with pixel centers aligned."""
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    src = arr
    factor = min(out_h / h, out_w / w)
    if antialias and factor < 1.0:
        src = gaussian_blur(arr, 0.5 * (1.0 / factor - 1.0))
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    return _sample(src, ys, xs, mode="nearest", cval=0.0)


def crop_resize(arr: np.ndarray, box: Sequence[float], out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Bilinear crop of box (x, y, w, h) resampled to ``out_h x out_w``.

    Samples outside the image repeat the border pixel.
    """
    out_w = out_h if out_w is None else out_w
    x, y, bw, bh = (float(v) for v in box)
    if bw <= 0 or bh <= 0:
        raise ValueError(f"crop_resize: empty box {tuple(box)}")
    factor = min(out_h / bh, out_w / bw)
    src = arr
    if factor < 0.5:
        x0, y0 = max(0, int(np.floor(x)) - 4), max(0, int(np.floor(y)) - 4)
        x1 = min(arr.shape[1], int(np.ceil(x + bw)) + 4)
        y1 = min(arr.shape[0], int(np.ceil(y + bh)) + 4)
        if x1 > x0 and y1 > y0:
            src = gaussian_blur(arr[y0:y1, x0:x1], 0.5 * (1.0 / factor - 1.0))
            x, y = x - x0, y - y0
    ys = y + (np.arange(out_h) + 0.5) * (bh / out_h) - 0.5
    xs = x + (np.arange(out_w) + 0.5) * (bw / out_w) - 0.5
    return _sample(src, ys, xs, mode="nearest", cval=0.0)


def resample_grid(arr: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: Optional[float] = None) -> np.ndarray:
    """Bilinear read of a 2-D map at fractional grid coordinates.

    With ``fill`` set, coordinates outside the map read ``fill``; otherwise the
    border value repeats.
    """
    if fill is None:
        return _sample(arr, ys, xs, mode="nearest", cval=0.0)
    return _sample(arr, ys, xs, mode="constant", cval=float(fill))


def to_chw_batch(images: Sequence[np.ndarray]) -> np.ndarray:
    """Stack H x W x 3 images into a B x 3 x H x W array."""
    return np.ascontiguousarray(np.stack([np.transpose(im, (2, 0, 1)) for im in images], axis=0))


def image_size(arr: np.ndarray) -> Tuple[int, int]:
    """(width, height)"""
    return int(arr.shape[1]), int(arr.shape[0])

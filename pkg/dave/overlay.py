"""Detection overlays: boxes and ``pose / color / type`` captions drawn with QPainter."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from PySide6.QtCore import QRectF, Qt
from PySide6.QtGui import QColor, QFont, QFontMetricsF, QImage, QPainter, QPen

from dave.data.imageio import array_to_qimage, ensure_gui, qimage_to_array, write_image
from dave.pyramid import Detection

BOX_COLOR = "#43b581"
PROPOSAL_COLOR = "#faa61a"
CAPTION_BG = "#2f3136"
CAPTION_FG = "#ffffff"


def caption(det: Detection) -> str:
    if not det.annotated:
        return f"{det.score:.2f}"
    return f"{det.pose.name} / {det.color.name} / {det.type.name}"


def draw_detections(image: np.ndarray, detections: Sequence[Detection]) -> np.ndarray:
    """uint8 copy of ``image`` with every detection drawn on it."""
    ensure_gui()
    canvas = array_to_qimage(image).convertToFormat(QImage.Format.Format_RGB32)
    painter = QPainter(canvas)
    try:
        painter.setRenderHint(QPainter.RenderHint.Antialiasing, True)
        font = QFont()
        font.setPixelSize(max(9, min(canvas.width(), canvas.height()) // 30))
        painter.setFont(font)
        metrics = QFontMetricsF(font)

        for det in detections:
            x, y, w, h = det.box
            color = QColor(BOX_COLOR if det.annotated else PROPOSAL_COLOR)
            painter.setPen(QPen(color, 2))
            painter.setBrush(Qt.BrushStyle.NoBrush)
            painter.drawRect(QRectF(x, y, w, h))

            text = caption(det)
            tw, th = metrics.horizontalAdvance(text) + 6, metrics.height() + 2
            ty = y - th if y - th >= 0 else y
            label = QRectF(x, ty, tw, th)
            painter.setPen(Qt.PenStyle.NoPen)
            painter.setBrush(QColor(CAPTION_BG))
            painter.drawRect(label)
            painter.setPen(QColor(CAPTION_FG))
            painter.drawText(label, int(Qt.AlignmentFlag.AlignCenter), text)
    finally:
        painter.end()
    return qimage_to_array(canvas)


def save_overlay(path: str, image: np.ndarray, detections: Sequence[Detection]) -> None:
    write_image(path, draw_detections(image, detections))

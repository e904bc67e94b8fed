"""Bounding boxes and centred patch extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from .fields import FieldStack


@dataclass(frozen=True)
class BoundingBox:
    """Box of ``height x width`` pixels whose centre pixel is ``(center_row, center_col)``.

    The centre pixel of an even-sized box is the one just below/right of the
    geometric centre, i.e. row ``top + height // 2``.
    """

    center_row: int
    center_col: int
    height: int
    width: int

    @property
    def top(self) -> int:
        return self.center_row - self.height // 2

    @property
    def left(self) -> int:
        return self.center_col - self.width // 2

    def recentered(self, row: int, col: int) -> "BoundingBox":
        return BoundingBox(int(row), int(col), self.height, self.width)

    def clamped(self, grid_shape) -> "BoundingBox":
        """Shift (never shrink) the box so it lies inside ``grid_shape``."""
        gh, gw = grid_shape
        if self.height > gh or self.width > gw:
            raise ValidationError(f"box {self.height}x{self.width} larger than grid {gh}x{gw}")
        top = min(max(self.top, 0), gh - self.height)
        left = min(max(self.left, 0), gw - self.width)
        return BoundingBox(top + self.height // 2, left + self.width // 2, self.height, self.width)


@dataclass(frozen=True)
class Provenance:
    """Where a patch came from: source id, box corner/size and the offset of
    the event centroid from the patch centre pixel (rows, cols)."""

    source: str
    top: int
    left: int
    height: int
    width: int
    offset_row: int = 0
    offset_col: int = 0

    def encode(self) -> str:
        return (f"{self.source}|box={self.top},{self.left},{self.height},{self.width}"
                f"|offset={self.offset_row},{self.offset_col}")

    @classmethod
    def decode(cls, text: str) -> "Provenance":
        try:
            source, box, offset = text.rsplit("|", 2)
            top, left, h, w = (int(v) for v in box.removeprefix("box=").split(","))
            dr, dc = (int(v) for v in offset.removeprefix("offset=").split(","))
        except ValueError:
            return cls(text, 0, 0, 0, 0)
        return cls(source, top, left, h, w, dr, dc)


@dataclass
class PatchRecord:
    label: int  # 1 = event present
    patch: np.ndarray  # (p, m, n)
    provenance: Provenance


def extract_patch(stack: FieldStack, box: BoundingBox, centroid, label: int = 1,
                  source: str = "field", channel_order=None) -> PatchRecord:
    """Crop ``box`` out of ``stack`` after moving it onto ``centroid``.

    The box is recentred on the centroid and then shifted back inside the grid
    where it would cross an edge, so the centroid may end up off-centre; the
    remaining offset is kept in the provenance. Channels are stacked in
    ``channel_order`` (default: the stack's own order).
    """
    gh, gw = stack.grid_shape
    row, col = int(centroid[0]), int(centroid[1])
    if not (0 <= row < gh and 0 <= col < gw):
        raise ValidationError(f"centroid {centroid} outside grid {gh}x{gw}")
    placed = box.recentered(row, col).clamped((gh, gw))
    if channel_order is None:
        channels = stack.data
    else:
        missing = [c for c in channel_order if c not in stack.names]
        if missing:
            raise ValidationError(f"field stack lacks channels {missing}")
        channels = stack.data[[stack.names.index(c) for c in channel_order]]
    patch = channels[:, placed.top:placed.top + box.height, placed.left:placed.left + box.width].copy()
    prov = Provenance(source, placed.top, placed.left, box.height, box.width,
                      row - placed.center_row, col - placed.center_col)
    return PatchRecord(int(label), patch, prov)

"""Upper-body and whole-body boxes derived from an annotated head box.

Boxes use a top-left origin with y growing downward; ``(l_x, l_y)`` is the
top-left corner and ``(w, h)`` the size, all in pixels. Head boxes may lie
partly or wholly outside the image, so coordinates are not range-checked.
"""

import csv
import io
from dataclasses import dataclass

from zoomrnn.errors import InputError


@dataclass(frozen=True)
class BBox:
    l_x: float
    l_y: float
    w: float
    h: float
    flagged: bool = False

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InputError(f"BBox size must be positive, got {self.w}x{self.h}")

    @property
    def right(self):
        return self.l_x + self.w

    @property
    def bottom(self):
        return self.l_y + self.h

    def as_tuple(self):
        return (self.l_x, self.l_y, self.w, self.h)


def derive_regions(head):
    """Return ``(upper_body, whole_body)`` for a head box.

    With ``a = min(w, h)`` both boxes sit at ``(l_x - a/2, l_y)``; the upper
    body is ``2a x 4a`` and the whole body ``2a x 7a``.
    """
    if not (head.w > 0 and head.h > 0):
        raise InputError("head box must have positive size")
    a = min(head.w, head.h)
    x = head.l_x - 0.5 * a
    upper = BBox(x, head.l_y, 2 * a, 4 * a)
    whole = BBox(x, head.l_y, 2 * a, 7 * a)
    return upper, whole


def clamp_to_image(box, img_w, img_h):
    """Intersect ``box`` with the image rectangle ``[0, img_w] x [0, img_h]``.

    An empty intersection yields a flagged 1x1 box at the nearest in-image
    corner.
    """
    if not (img_w > 0 and img_h > 0):
        raise InputError("image size must be positive")
    x0 = max(box.l_x, 0.0)
    y0 = max(box.l_y, 0.0)
    x1 = min(box.right, float(img_w))
    y1 = min(box.bottom, float(img_h))
    if x1 > x0 and y1 > y0:
        return BBox(x0, y0, x1 - x0, y1 - y0)
    cx = min(max(box.l_x, 0.0), img_w - 1.0)
    cy = min(max(box.l_y, 0.0), img_h - 1.0)
    return BBox(max(cx, 0.0), max(cy, 0.0), 1.0, 1.0, flagged=True)


CSV_HEADER = ("sample_id", "region", "l_x", "l_y", "w", "h")


def _fmt(v):
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def boxes_to_csv(rows, header=True):
    """``rows`` is an iterable of ``(sample_id, region, BBox)``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_HEADER)
    for sample_id, region, box in rows:
        writer.writerow([sample_id, region] + [_fmt(v) for v in box.as_tuple()])
    return buf.getvalue()


def boxes_from_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise InputError(f"box CSV header must be {','.join(CSV_HEADER)}")
    return [
        (row["sample_id"], row["region"], BBox(float(row["l_x"]), float(row["l_y"]), float(row["w"]), float(row["h"])))
        for row in reader
    ]

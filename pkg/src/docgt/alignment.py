"""Word-level correspondence between a normalised capture and its page."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidParameterError
from .geometry import INSIDE, box_polygon_relation
from .imaging import as_gray, binarize_otsu, gaussian_blur, label_components

MIN_BLOCK_PIXELS = 15


@dataclass(frozen=True)
class WordBox:
    bbox: tuple[float, float, float, float]

    @property
    def centroid(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    @property
    def width(self) -> float:
        return self.bbox[2] - self.bbox[0]

    def shifted(self, dx: float, dy: float) -> "WordBox":
        x0, y0, x1, y1 = self.bbox
        return WordBox((x0 + dx, y0 + dy, x1 + dx, y1 + dy))


@dataclass(frozen=True)
class MatchParams:
    theta_c: float = 5.0
    theta_w: float = 5.0
    smoothing_sigma: float = 3.0

    def __post_init__(self):
        if not (self.theta_c > 0 and self.theta_w > 0 and self.smoothing_sigma > 0):
            raise InvalidParameterError("match thresholds and smoothing sigma must be positive")


@dataclass(frozen=True)
class WordPair:
    capt: WordBox
    ret: WordBox
    border: bool = False


def word_blocks(img, smoothing_sigma: float = 3.0, min_pixels: int = MIN_BLOCK_PIXELS) -> list[WordBox]:
    """Word boxes of ``img``: blur, binarise, 8-connected blobs.

    Each box is the extent of the unsmoothed ink belonging to a blurred blob,
    so boxes hug the glyphs rather than the blur halo. A thin stroke at a
    word's edge can fall below the threshold after blurring, so ink within
    ``ceil(smoothing_sigma)`` px of a blob also counts towards it. Blobs under
    ``min_pixels`` pixels or without ink are dropped.
    """
    img = as_gray(img)
    smooth = binarize_otsu(gaussian_blur(img, smoothing_sigma))
    labels, count = label_components(smooth)
    if count == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=count + 1)
    reach = 2 * math.ceil(smoothing_sigma) + 1
    grown = np.where(labels > 0, labels, ndimage.maximum_filter(labels, size=reach))
    ink_labels = np.where(binarize_otsu(img) == 0, grown, 0)
    boxes = []
    for label, sl in enumerate(ndimage.find_objects(ink_labels, max_label=count), start=1):
        if sl is None or counts[label] < min_pixels:
            continue
        boxes.append(WordBox((float(sl[1].start), float(sl[0].start), float(sl[1].stop), float(sl[0].stop))))
    return boxes


def _box_arrays(boxes: list[WordBox]) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 2)), np.zeros(0)
    c = np.array([b.centroid for b in boxes], dtype=np.float64)
    w = np.array([b.width for b in boxes], dtype=np.float64)
    return c, w


def centroid_distance(a: WordBox, b: WordBox) -> float:
    (ax, ay), (bx, by) = a.centroid, b.centroid
    return math.hypot(ax - bx, ay - by)


def width_distance(a: WordBox, b: WordBox) -> float:
    return abs(a.width - b.width)


def match_words(capt_boxes: list[WordBox], ret_boxes: list[WordBox], params: MatchParams = MatchParams()) -> list[WordPair]:
    """One-to-one pairing of boxes with centroid distance < theta_c and width difference < theta_w.

    Candidates are taken greedily by ascending centroid distance, then width
    difference, then reading order (y, then x) of the captured box and of the
    page box.
    """
    cc, cw = _box_arrays(capt_boxes)
    rc, rw = _box_arrays(ret_boxes)
    if len(cc) == 0 or len(rc) == 0:
        return []
    dc = np.sqrt(((cc[:, None, :] - rc[None, :, :]) ** 2).sum(axis=2))
    dw = np.abs(cw[:, None] - rw[None, :])
    ii, jj = np.nonzero((dc < params.theta_c) & (dw < params.theta_w))
    if len(ii) == 0:
        return []
    order = np.lexsort((rc[jj, 0], rc[jj, 1], cc[ii, 0], cc[ii, 1], dw[ii, jj], dc[ii, jj]))
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_c or j in used_r:
            continue
        used_c.add(i)
        used_r.add(j)
        pairs.append(WordPair(capt_boxes[i], ret_boxes[j]))
    return pairs


def _convex_margins(corners: np.ndarray, poly: np.ndarray) -> np.ndarray | None:
    """Smallest signed edge distance of each box's corners to a convex polygon, or None if not convex."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    d = b - a
    turn = d[:, 0] * np.roll(d[:, 1], -1) - d[:, 1] * np.roll(d[:, 0], -1)
    if len(poly) < 3 or not np.all(turn > 0):
        return None
    length = np.hypot(d[:, 0], d[:, 1])
    rel = corners[:, :, None, :] - a[None, None, :, :]
    cross = (d[None, None, :, 0] * rel[..., 1] - d[None, None, :, 1] * rel[..., 0]) / length
    return cross.min(axis=(1, 2))


def mark_borders(pairs: list[WordPair], region) -> list[WordPair]:
    """Flag pairs whose page box is not strictly inside the retrieved region polygon.

    For a convex, counter-clockwise region (what retrieval produces) boxes far
    from every edge are decided in bulk; the rest go through the exact test.
    """
    if not pairs:
        return []
    poly = np.asarray(region, dtype=np.float64)
    boxes = np.array([p.ret.bbox for p in pairs], dtype=np.float64)
    corners = np.stack([boxes[:, [0, 1]], boxes[:, [2, 1]], boxes[:, [2, 3]], boxes[:, [0, 3]]], axis=1)
    margin = _convex_margins(corners, poly)
    out = []
    for k, p in enumerate(pairs):
        if margin is not None and margin[k] > 1e-6:
            border = False
        elif margin is not None and margin[k] < -1e-6:
            border = True
        else:
            border = box_polygon_relation(p.ret.bbox, poly) != INSIDE
        out.append(replace(p, border=border))
    return out

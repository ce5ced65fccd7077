"""Raster primitives.

Images are 2-D ``numpy.uint8`` arrays indexed ``[y, x]``; text is dark (0)
and paper is light (255). Pixel centres sit on integer coordinates, boxes are
``(x0, y0, x1, y1)`` with exclusive upper bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import EmptyRegionError, InvalidInputError, InvalidParameterError, SingularTransformError

BACKGROUND = 255
FOREGROUND = 0

_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Blob:
    label: int
    pixel_count: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]


def as_gray(img) -> np.ndarray:
    """Validate ``img`` as a non-empty 2-D uint8 array (no copy if already one)."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise InvalidInputError("pixel values outside 0..255")
        arr = arr.astype(np.uint8)
    return arr


def round_to_uint8(values: np.ndarray) -> np.ndarray:
    """Round half-up and saturate to 0..255."""
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance ``0.299 R + 0.587 G + 0.114 B``, rounded half-up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return round_to_uint8(y)


def load_image(path) -> np.ndarray:
    """Load a PNG or PGM file as grayscale; colour images are converted by luminance."""
    with Image.open(path) as im:
        if im.mode == "L":
            return np.array(im, dtype=np.uint8)
        if im.mode in ("1", "P", "I", "I;16", "F", "LA", "PA"):
            im = im.convert("RGBA" if "A" in im.mode else "RGB")
        if im.mode == "RGBA" or im.mode == "LA":
            im = im.convert("RGB")
        if im.mode != "RGB":
            im = im.convert("RGB")
        return rgb_to_gray(np.array(im))


def save_image(path, img) -> None:
    """Write 8-bit grayscale; ``.pgm`` gives binary P5, anything else PNG."""
    path = Path(path)
    im = Image.fromarray(as_gray(img), mode="L")
    if path.suffix.lower() == ".pgm":
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")


def otsu_threshold(img) -> int | None:
    """Threshold ``t`` maximising inter-class variance of ``{<= t}`` vs ``{> t}``.

    Returns None for a constant image. Ties resolve to the smallest ``t``.
    """
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * levels)
    mu_total = s0[-1] / total
    valid = (w0 > 0) & (w1 > 0)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        # between-class variance up to the constant factor 1/total**2
        between = (mu_total * w0 - s0) ** 2 / (w0 * w1)
    between[~valid] = -1.0
    return int(np.argmax(between))


def binarize_otsu(img) -> np.ndarray:
    """Two-valued image: pixels at or below the Otsu threshold become 0, others 255."""
    img = as_gray(img)
    t = otsu_threshold(img)
    out = np.full(img.shape, BACKGROUND, dtype=np.uint8)
    if t is not None:
        out[img <= t] = FOREGROUND
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur_float(img, sigma: float) -> np.ndarray:
    kernel = gaussian_kernel(sigma).astype(np.float32)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = img.astype(np.float32)
    out = ndimage.correlate1d(img, kernel, axis=1, mode="nearest", output=np.float32)
    return ndimage.correlate1d(out, kernel, axis=0, mode="nearest")


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, clamp-to-edge borders."""
    img = as_gray(img)
    return round_to_uint8(gaussian_blur_float(img, sigma))


def _check_binary(binary: np.ndarray) -> None:
    if not ((binary == FOREGROUND) | (binary == BACKGROUND)).all():
        values = np.unique(binary)
        raise InvalidInputError(f"expected a two-valued image (0/255), found values {values[:8].tolist()}")


def label_components(binary) -> tuple[np.ndarray, int]:
    """8-connected labelling of the foreground (value 0). Labels start at 1."""
    binary = as_gray(binary)
    _check_binary(binary)
    return ndimage.label(binary == FOREGROUND, structure=_EIGHT_CONNECTED)


def component_stats(labels: np.ndarray, count: int):
    """Vectorised blob statistics: ``(pixel_counts, centroids (k, 2) as x,y, bboxes (k, 4))``."""
    if count == 0:
        return np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 4), np.int64)
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    counts = np.bincount(lab, minlength=count + 1)[1:]
    sx = np.bincount(lab, weights=xs, minlength=count + 1)[1:]
    sy = np.bincount(lab, weights=ys, minlength=count + 1)[1:]
    centroids = np.stack([sx / counts, sy / counts], axis=1)
    bboxes = np.empty((count, 4), dtype=np.int64)
    for i, sl in enumerate(ndimage.find_objects(labels, max_label=count)):
        bboxes[i] = (sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
    return counts, centroids, bboxes


def connected_components(binary) -> list[Blob]:
    """One :class:`Blob` per 8-connected foreground component, in raster order."""
    labels, count = label_components(binary)
    counts, centroids, bboxes = component_stats(labels, count)
    return [
        Blob(i + 1, int(counts[i]), (float(centroids[i, 0]), float(centroids[i, 1])), tuple(int(v) for v in bboxes[i]))
        for i in range(count)
    ]


def _check_warp(H) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3) or not np.isfinite(H).all():
        raise InvalidInputError("homography must be a finite 3x3 matrix")
    if abs(np.linalg.det(H)) <= 1e-12:
        raise SingularTransformError("homography is singular")
    return H


def warp_perspective(img, H, out_w: int, out_h: int) -> np.ndarray:
    """Resample ``img`` through the homography ``H`` (source -> output).

    Each output pixel ``p`` takes the bilinear sample of the source at
    ``H^-1 p``; samples outside the source are background (255). Pillow's
    resampler does the work; it agrees with :func:`warp_perspective_reference`
    to within one grey level.
    """
    img = as_gray(img)
    Hinv = np.linalg.inv(_check_warp(H))
    # Pillow puts pixel centres at +0.5; conjugate to our integer-centre convention
    M = _HALF @ Hinv @ _MINUS_HALF
    if abs(M[2, 2]) <= 1e-15:
        return warp_perspective_reference(img, H, out_w, out_h)
    M = M / M[2, 2]
    out = Image.fromarray(img).transform(
        (int(out_w), int(out_h)),
        Image.Transform.PERSPECTIVE,
        tuple(float(v) for v in M.ravel()[:8]),
        Image.Resampling.BILINEAR,
        fillcolor=BACKGROUND,
    )
    return np.asarray(out, dtype=np.uint8).copy()


_HALF = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
_MINUS_HALF = np.array([[1.0, 0.0, -0.5], [0.0, 1.0, -0.5], [0.0, 0.0, 1.0]])


def warp_perspective_reference(img, H, out_w: int, out_h: int) -> np.ndarray:
    """Slow, direct inverse-mapping warp with ``scipy.ndimage.map_coordinates``."""
    img = as_gray(img)
    Hinv = np.linalg.inv(_check_warp(H))
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    w = Hinv[2, 0] * xs + Hinv[2, 1] * ys + Hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (Hinv[0, 0] * xs + Hinv[0, 1] * ys + Hinv[0, 2]) / w
        sy = (Hinv[1, 0] * xs + Hinv[1, 1] * ys + Hinv[1, 2]) / w
    bad = ~np.isfinite(sx) | ~np.isfinite(sy) | (w <= 0)
    sx[bad] = -10.0
    sy[bad] = -10.0
    out = ndimage.map_coordinates(
        img.astype(np.float32), [sy, sx], order=1, mode="grid-constant", cval=float(BACKGROUND), prefilter=False
    )
    return round_to_uint8(out)


def crop(img, bbox, fill: int = BACKGROUND) -> np.ndarray:
    """Axis-aligned sub-image ``[y0:y1, x0:x1]``; parts outside ``img`` are filled with ``fill``."""
    img = as_gray(img)
    x0, y0, x1, y1 = (int(v) for v in bbox)
    h, w = img.shape
    if x1 <= x0 or y1 <= y0 or x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise EmptyRegionError(f"box {bbox} does not overlap a {w}x{h} image")
    if x0 >= 0 and y0 >= 0 and x1 <= w and y1 <= h:
        return img[y0:y1, x0:x1].copy()
    out = np.full((y1 - y0, x1 - x0), fill, dtype=np.uint8)
    cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    out[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0] = img[cy0:cy1, cx0:cx1]
    return out


def box_to_pixels(bbox) -> tuple[int, int, int, int]:
    """Integer pixel box covering a float box."""
    x0, y0, x1, y1 = bbox
    ix0, iy0 = math.floor(x0), math.floor(y0)
    ix1, iy1 = max(math.ceil(x1), ix0 + 1), max(math.ceil(y1), iy0 + 1)
    return ix0, iy0, ix1, iy1


def quad_bbox(quad) -> tuple[int, int, int, int]:
    q = np.asarray(quad, dtype=np.float64)
    if q.shape != (4, 2) or not np.isfinite(q).all():
        raise InvalidInputError("quad must be 4 finite (x, y) corners")
    return box_to_pixels((q[:, 0].min(), q[:, 1].min(), q[:, 0].max(), q[:, 1].max()))


def crop_quad(img, quad) -> np.ndarray:
    """Crop the axis-aligned bounding box of a quadrilateral (no rectification)."""
    return crop(img, quad_bbox(quad))

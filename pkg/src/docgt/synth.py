"""Synthetic oracle corpus: rendered pages with exact text layers and simulated captures.

Rendering uses the embedded 6x11 bitmap font in :mod:`docgt._font`, scaled by
an integer factor, so output is bit-exact across platforms. Every capture
carries the homography that produced it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _font
from .errors import SpecError
from .geometry import homography_from_quads, invert_homography
from .groundtruth import CharEntry, TextLayer, WordEntry
from .imaging import BACKGROUND, FOREGROUND, gaussian_blur_float, round_to_uint8, warp_perspective

VOCABULARY = tuple(
    """
    the of and to in is was that for on are with as his they be at one have this from or had by
    word but what some we can out other were all there when up use your how said an each she which
    do their time if will way about many then them write would like so these her long make thing see
    him two has look more day could go come did number sound no most people my over know water than
    call first who may down side been now find any new work part take get place made live where after
    back little only round man year came show every good me give our under name very through just form
    sentence great think say help low line differ turn cause much mean before move right boy old too
    same tell does set three want air well also play small end put home read hand port large spell add
    even land here must big high such follow act why ask men change went light kind off need house
    picture try us again animal point mother world near build self earth father head stand own page
    should country found answer school grow study still learn plant cover food sun four between state
    keep eye never last let thought city tree cross farm hard start might story saw far sea draw left
    late run while press close night real life few north open seem together next white children begin
    got walk example ease paper group always music those both mark often letter until mile river car
    feet care second book carry took science eat room friend began idea fish mountain stop once base
    hear horse cut sure watch color face wood main enough plain girl usual young ready above ever red
    list though feel talk bird soon body dog family direct pose leave song measure door product black
    short numeral class wind question happen complete ship area half rock order fire south problem
    piece told knew pass since top whole king space heard best hour better true during hundred five
    remember step early hold west ground interest reach fast verb sing listen six table travel less
    morning ten simple several vowel toward war lay against pattern slow center love person money serve
    appear road map rain rule govern pull cold notice voice unit power town fine certain fly fall lead
    cry dark machine note wait plan figure star box noun field rest correct able pound done beauty
    drive stood contain front teach week final gave green oh quick develop ocean warm free minute
    strong special mind behind clear tail produce fact street inch multiply nothing course stay wheel
    full force blue object decide surface deep moon island foot system busy test record boat common
    gold possible plane stead dry wonder laugh thousand ago ran check game shape equate hot miss brought
    heat snow tire bring yes distant fill east paint language among votes analysis includes accident
    member situation generally shall industrial responsibilities
    """.split()
)

PUNCTUATION = ",.;:!?"


@dataclass(frozen=True)
class SynthPageSpec:
    seed: int
    words_per_page: int = 200
    font_size_pt: tuple[float, float] = (7.5, 9.0)
    page_size: tuple[int, int] = (1240, 1480)
    dpi: int = 300
    margin: int = 60
    vocabulary: tuple[str, ...] = VOCABULARY
    capitalize_prob: float = 0.1
    punctuation_prob: float = 0.1
    page_id: str | None = None

    def __post_init__(self):
        if self.words_per_page < 1:
            raise SpecError("words_per_page must be >= 1")
        lo, hi = self.font_size_pt
        if not 0 < lo <= hi:
            raise SpecError("font_size_pt must be an ascending pair of positive sizes")
        if min(self.page_size) < 1 or self.dpi < 1 or self.margin < 0:
            raise SpecError("page_size, dpi and margin must be positive")
        if not self.vocabulary:
            raise SpecError("vocabulary is empty")
        if not (0 <= self.capitalize_prob <= 1 and 0 <= self.punctuation_prob <= 1):
            raise SpecError("probabilities must lie in [0, 1]")


@dataclass(frozen=True)
class CaptureSpec:
    seed: int
    crop_fraction: float = 0.7
    jitter: float = 20.0
    rotation_deg: float = 0.0
    blur_sigma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.3 <= self.crop_fraction <= 1.0:
            raise SpecError(f"crop_fraction must lie in [0.3, 1.0], got {self.crop_fraction}")
        if self.jitter < 0 or self.blur_sigma < 0 or self.noise_sigma < 0:
            raise SpecError("jitter, blur_sigma and noise_sigma must be >= 0")
        if self.gain <= 0:
            raise SpecError("gain must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Capture:
    image: np.ndarray
    homography: np.ndarray  # capture -> page
    spec: CaptureSpec
    region: tuple[float, float, float, float] = field(default=(0.0, 0.0, 0.0, 0.0))


def _glyph_masks() -> dict[str, np.ndarray]:
    return {c: np.array([[ch == "#" for ch in row] for row in rows], dtype=bool) for c, rows in _font.GLYPHS.items()}


_GLYPHS = _glyph_masks()


def font_scale(size_pt: float, dpi: int) -> int:
    """Integer magnification of the 11-row font cell for a nominal point size."""
    return max(1, int(round(size_pt * dpi / 72.0 / _font.CELL_HEIGHT)))


def _draw_word(rng: np.random.Generator, spec: SynthPageSpec) -> str:
    word = spec.vocabulary[int(rng.integers(len(spec.vocabulary)))]
    if rng.random() < spec.capitalize_prob:
        word = word[0].upper() + word[1:]
    if rng.random() < spec.punctuation_prob:
        word += PUNCTUATION[int(rng.integers(len(PUNCTUATION)))]
    return word


def _glyph_columns(c: str) -> np.ndarray:
    cols = np.nonzero(_GLYPHS[c].any(axis=0))[0]
    return _GLYPHS[c][:, cols.min() : cols.max() + 1]


KERNING_GAP_PX = 2


def _kerned_offset(a: np.ndarray, b: np.ndarray, gap: int) -> int:
    """Advance placing glyph ``b`` ``gap`` px right of ``a`` in the closest shared row."""
    rows_a, rows_b = a.any(axis=1), b.any(axis=1)
    both = rows_a & rows_b
    if not both.any():
        return a.shape[1] + gap
    right_a = a.shape[1] - 1 - np.argmax(a[:, ::-1], axis=1)
    left_b = np.argmax(b, axis=1)
    return int((right_a[both] - left_b[both]).max()) + 1 + gap


def render_text(text: str, scale: int) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Render ``text`` with contour kerning so each word stays one blob under mild blur.

    Returns the ink mask (one font cell tall) and per-character ink boxes
    relative to its top-left corner, ``(x0, y0, x1, y1)``. Character boxes of
    neighbouring glyphs may overlap horizontally.
    """
    glyphs = []
    for c in text:
        if c not in _GLYPHS:
            raise SpecError(f"character {c!r} is not in the embedded font")
        glyphs.append(np.kron(_glyph_columns(c), np.ones((scale, scale), dtype=bool)))
    xs = [0]
    for a, b in zip(glyphs, glyphs[1:]):
        xs.append(xs[-1] + _kerned_offset(a, b, KERNING_GAP_PX))
    width = max(x + g.shape[1] for x, g in zip(xs, glyphs))
    mask = np.zeros((_font.CELL_HEIGHT * scale, width), dtype=bool)
    boxes = []
    for x, g in zip(xs, glyphs):
        mask[:, x : x + g.shape[1]] |= g
        ys = np.nonzero(g.any(axis=1))[0]
        boxes.append((x, int(ys.min()), x + g.shape[1], int(ys.max()) + 1))
    return mask, boxes


def render_page(spec: SynthPageSpec) -> tuple[np.ndarray, TextLayer]:
    """Lay out random vocabulary words left to right, top to bottom.

    Inter-word gaps are drawn from 4..7 font pixels and lines are separated by
    8 font pixels of leading. Raises :class:`SpecError` if the words do not fit.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    width, height = spec.page_size
    lo, hi = spec.font_size_pt
    size = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    scale = font_scale(size, spec.dpi)
    cell_h = _font.CELL_HEIGHT * scale
    line_h = cell_h + 8 * scale
    img = np.full((height, width), BACKGROUND, dtype=np.uint8)
    words: list[WordEntry] = []
    x, y = spec.margin, spec.margin
    for _ in range(spec.words_per_page):
        text = _draw_word(rng, spec)
        mask, boxes = render_text(text, scale)
        w_px = mask.shape[1]
        if x + w_px > width - spec.margin:
            x = spec.margin + int(rng.integers(0, 4)) * scale
            y += line_h
        if x + w_px > width - spec.margin or y + cell_h > height - spec.margin:
            raise SpecError(f"page {width}x{height} too small for {spec.words_per_page} words at scale {scale}")
        img[y : y + cell_h, x : x + w_px][mask] = FOREGROUND
        chars = [CharEntry(c, (x + b[0], y + b[1], x + b[2], y + b[3])) for c, b in zip(text, boxes)]
        wb = (
            min(c.bbox[0] for c in chars),
            min(c.bbox[1] for c in chars),
            max(c.bbox[2] for c in chars),
            max(c.bbox[3] for c in chars),
        )
        words.append(WordEntry(text, wb, chars))
        x += w_px + int(rng.integers(4, 8)) * scale
    page_id = spec.page_id if spec.page_id is not None else f"page-{spec.seed:05d}"
    return img, TextLayer(page_id=page_id, dpi=spec.dpi, words=words)


def _rotate(points: np.ndarray, center: np.ndarray, degrees: float) -> np.ndarray:
    t = math.radians(degrees)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return (points - center) @ R.T + center


def simulate_capture(page: np.ndarray, spec: CaptureSpec, max_retries: int = 20) -> Capture:
    """Photograph a sub-region of ``page``.

    A rectangle covering ``crop_fraction`` of the page area is rotated and its
    corners jittered by up to ``jitter`` px; the capture canvas is mapped onto
    that quadrilateral. Then blur, gain/offset and Gaussian noise are applied.
    The returned homography maps capture pixels to page pixels exactly.
    """
    rng = np.random.default_rng([spec.seed, 0xCA97])
    ph, pw = page.shape
    f = spec.crop_fraction
    for _ in range(max_retries):
        if f >= 1.0:
            w, h = float(pw), float(ph)
        else:
            area = f * pw * ph
            w = math.sqrt(area * (pw / ph) * float(rng.uniform(0.8, 1.25)))
            h = area / w
            if w > pw:
                w, h = float(pw), area / pw
            if h > ph:
                w, h = area / ph, float(ph)
        x0 = float(rng.uniform(0, pw - w)) if pw > w else 0.0
        y0 = float(rng.uniform(0, ph - h)) if ph > h else 0.0
        W, Hh = int(round(w)), int(round(h))
        rect = np.array([[x0, y0], [x0 + W, y0], [x0 + W, y0 + Hh], [x0, y0 + Hh]])
        quad = _rotate(rect, rect.mean(axis=0), spec.rotation_deg)
        if spec.jitter > 0:
            quad = quad + rng.uniform(-spec.jitter, spec.jitter, size=(4, 2))
        canvas = np.array([[0.0, 0.0], [W, 0.0], [W, Hh], [0.0, Hh]])
        try:
            H = homography_from_quads(canvas, quad)
            Hinv = invert_homography(H)
        except Exception:
            continue
        # the page-side quad must stay convex for a physical view
        d = np.roll(quad, -1, axis=0) - quad
        cross = d[:, 0] * np.roll(d[:, 1], -1) - d[:, 1] * np.roll(d[:, 0], -1)
        if not (np.all(cross > 0) or np.all(cross < 0)):
            continue
        break
    else:
        raise SpecError("could not draw a non-degenerate capture warp")

    img = warp_perspective(page, Hinv, W, Hh).astype(np.float32)
    if spec.blur_sigma > 0:
        img = gaussian_blur_float(img, spec.blur_sigma)
    img = img * spec.gain + spec.offset
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape).astype(np.float32)
    return Capture(round_to_uint8(img), H, spec, (x0, y0, x0 + W, y0 + Hh))


def mild_capture_spec(seed: int, crop_range=(0.6, 0.8)) -> CaptureSpec:
    """Mild regime: jitter <= 20 px, blur sigma <= 1.5, small rotation and lighting change."""
    rng = np.random.default_rng([seed, 0x3117])
    return CaptureSpec(
        seed=seed,
        crop_fraction=float(rng.uniform(*crop_range)),
        jitter=float(rng.uniform(5.0, 20.0)),
        rotation_deg=float(rng.uniform(-5.0, 5.0)),
        blur_sigma=float(rng.uniform(0.5, 1.5)),
        gain=float(rng.uniform(0.8, 1.0)),
        offset=float(rng.uniform(0.0, 20.0)),
        noise_sigma=float(rng.uniform(0.0, 4.0)),
    )


def severe_capture_spec(seed: int, crop_range=(0.6, 0.8)) -> CaptureSpec:
    """Severe-blur regime: as mild but with blur sigma 3."""
    mild = mild_capture_spec(seed, crop_range)
    return CaptureSpec(**{**mild.to_dict(), "blur_sigma": 3.0})

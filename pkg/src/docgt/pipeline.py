"""End-to-end processing of one captured photo into labelled word and character records."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .alignment import MatchParams, WordBox, mark_borders, match_words, word_blocks
from .errors import DocGTError, InsufficientDataError
from .geometry import (
    LMSettings,
    estimate_homography_ls,
    project_points,
    refine_homography_lm,
    reprojection_residuals,
    reprojection_rmse,
    translation,
)
from .groundtruth import GroundTruthRecord, TextLayer, extract_char_records, extract_word_records, verify_record
from .imaging import as_gray, warp_perspective
from .llah import LlahParams, LlahStore, retrieve

log = logging.getLogger(__name__)

# correspondences further than this from the first fit are dropped before refinement
OUTLIER_FACTOR = 4.0
OUTLIER_FLOOR_PX = 3.0


@dataclass(frozen=True)
class PipelineParams:
    llah: LlahParams = field(default_factory=LlahParams)
    match: MatchParams = field(default_factory=MatchParams)
    lm: LMSettings = field(default_factory=LMSettings)
    chars: bool = True
    trim_outliers: bool = True

    def to_dict(self) -> dict:
        return {
            "llah": self.llah.to_dict(),
            "match": {"theta_c": self.match.theta_c, "theta_w": self.match.theta_w, "smoothing_sigma": self.match.smoothing_sigma},
            "lm": {"lambda0": self.lm.lambda0, "max_iter": self.lm.max_iter, "rel_tol": self.lm.rel_tol},
            "chars": self.chars,
            "trim_outliers": self.trim_outliers,
        }


@dataclass
class PageEntry:
    image: np.ndarray
    layer: TextLayer
    _blocks: list[WordBox] | None = None

    def blocks(self, sigma: float) -> list[WordBox]:
        if self._blocks is None:
            self._blocks = word_blocks(self.image, sigma)
        return self._blocks


@dataclass
class CaptureLog:
    capture_id: str
    status: str
    doc_id: str | None = None
    score: int = 0
    correspondences: int = 0
    inliers: int = 0
    rmse_dlt: float | None = None
    rmse_lm: float | None = None
    matched: int = 0
    skipped: int = 0
    border: int = 0
    words: int = 0
    chars: int = 0
    message: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CaptureResult:
    log: CaptureLog
    words: list[GroundTruthRecord] = field(default_factory=list)
    chars: list[GroundTruthRecord] = field(default_factory=list)
    homography: np.ndarray | None = None
    norm_offset: tuple[int, int] = (0, 0)

    @property
    def records(self) -> list[GroundTruthRecord]:
        return self.words + self.chars


def fit_homography(src, dst, settings: LMSettings = LMSettings(), trim: bool = True):
    """DLT on all correspondences, drop gross outliers, DLT again and refine with LM.

    With ``trim=False`` every correspondence is kept. Returns
    ``(H, H_dlt, inlier_mask)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    H0 = estimate_homography_ls(src, dst)
    mask = np.ones(len(src), dtype=bool)
    for _ in range(3 if trim else 0):
        r = np.hypot(*reprojection_residuals(H0, src, dst).reshape(-1, 2).T)
        limit = max(OUTLIER_FLOOR_PX, OUTLIER_FACTOR * float(np.median(r[mask])))
        new = r <= limit
        if new.sum() < 4 or np.array_equal(new, mask):
            break
        mask = new
        H0 = estimate_homography_ls(src[mask], dst[mask])
    H = refine_homography_lm(H0, src[mask], dst[mask], settings)
    return H, H0, mask


def normalize_capture(capture, H, page_shape) -> tuple[np.ndarray, tuple[int, int]]:
    """Warp the capture into page space, restricted to the page-space bbox of its outline.

    Returns the normalised image and the integer page coordinate of its top-left pixel.
    """
    h, w = capture.shape
    corners = project_points(H, np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64))
    ph, pw = page_shape
    x0 = int(np.clip(np.floor(corners[:, 0].min()), 0, pw))
    y0 = int(np.clip(np.floor(corners[:, 1].min()), 0, ph))
    x1 = int(np.clip(np.ceil(corners[:, 0].max()), 0, pw))
    y1 = int(np.clip(np.ceil(corners[:, 1].max()), 0, ph))
    if x1 <= x0 or y1 <= y0:
        raise InsufficientDataError("capture does not overlap the retrieved page")
    norm = warp_perspective(capture, translation(-x0, -y0) @ H, x1 - x0, y1 - y0)
    return norm, (x0, y0)


def process_capture(
    capture,
    capture_id: str,
    store: LlahStore,
    pages: dict[str, PageEntry],
    params: PipelineParams = PipelineParams(),
) -> CaptureResult:
    """Retrieve, align and label one capture. Failures are reported in the log, not raised."""
    capture = as_gray(capture)
    clog = CaptureLog(capture_id=capture_id, status="ok")
    try:
        ret = retrieve(capture, params.llah, store)
    except DocGTError as exc:
        clog.status, clog.message = "no-match", str(exc)
        log.info("%s: %s", capture_id, exc)
        return CaptureResult(clog)
    clog.doc_id, clog.score, clog.correspondences = ret.doc_id, ret.score, len(ret.src)
    page = pages.get(ret.doc_id)
    if page is None:
        clog.status, clog.message = "error", f"no page registered for {ret.doc_id!r}"
        return CaptureResult(clog)
    try:
        H, H0, inl = fit_homography(ret.src, ret.dst, params.lm, params.trim_outliers)
        clog.inliers = int(inl.sum())
        clog.rmse_dlt = reprojection_rmse(H0, ret.src[inl], ret.dst[inl])
        clog.rmse_lm = reprojection_rmse(H, ret.src[inl], ret.dst[inl])
        norm, offset = normalize_capture(capture, H, page.image.shape)
    except DocGTError as exc:
        clog.status, clog.message = "align-failed", str(exc)
        log.info("%s: alignment failed: %s", capture_id, exc)
        return CaptureResult(clog)

    sigma = params.match.smoothing_sigma
    capt_boxes = [b.shifted(*offset) for b in word_blocks(norm, sigma)]
    pairs = mark_borders(match_words(capt_boxes, page.blocks(sigma), params.match), ret.region)
    prov = {
        "doc_id": ret.doc_id,
        "page_id": page.layer.page_id,
        "capture_id": capture_id,
        "retrieval_score": ret.score,
        "params": params.to_dict(),
    }
    words = extract_word_records(pairs, page.layer, page.image, norm, capture, H, norm_offset=offset, provenance=prov)
    chars = extract_char_records(words, page.layer, norm, capture, H, norm_offset=offset) if params.chars else []
    good_words = [r for r in words if verify_record(r)]
    good_chars = [r for r in chars if verify_record(r)]
    dropped = len(words) - len(good_words) + len(chars) - len(good_chars)
    if dropped:
        log.warning("%s: %d records failed provenance verification", capture_id, dropped)
    clog.matched = len(pairs)
    clog.skipped = len(pairs) - len(good_words)
    clog.border = sum(r.border for r in good_words)
    clog.words, clog.chars = len(good_words), len(good_chars)
    log.info(
        "%s: doc=%s score=%d rmse %.3f -> %.3f, matched=%d skipped=%d border=%d",
        capture_id, ret.doc_id, ret.score, clog.rmse_dlt, clog.rmse_lm, clog.matched, clog.skipped, clog.border,
    )
    return CaptureResult(clog, good_words, good_chars, H, offset)

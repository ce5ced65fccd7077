"""Text layers, ground-truth records, and dataset emission."""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConsistencyError, EmptyRegionError, ParseError
from .geometry import box_corners, invert_homography, project_points
from .imaging import box_to_pixels, crop, crop_quad, save_image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (60, 10, 30)
BBOX_SLACK = 1.0
MIN_LABEL_IOU = 0.5
INCOMPLETE_MARKER = "_INCOMPLETE"


@dataclass(frozen=True)
class CharEntry:
    text: str
    bbox: tuple


@dataclass(frozen=True)
class WordEntry:
    text: str
    bbox: tuple
    chars: list


@dataclass
class TextLayer:
    page_id: str
    dpi: int
    words: list[WordEntry]

    def to_dict(self) -> dict:
        return {
            "page_id": self.page_id,
            "dpi": self.dpi,
            "words": [
                {
                    "text": w.text,
                    "bbox": list(w.bbox),
                    "chars": [{"text": c.text, "bbox": list(c.bbox)} for c in w.chars],
                }
                for w in self.words
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def word_bboxes(self) -> np.ndarray:
        if not self.words:
            return np.zeros((0, 4))
        return np.array([w.bbox for w in self.words], dtype=np.float64)


def _require(cond: bool, msg: str, pointer: str) -> None:
    if not cond:
        raise ParseError(msg, pointer)


def _parse_bbox(value, pointer: str) -> tuple:
    _require(isinstance(value, list) and len(value) == 4, "bbox must be a list of 4 numbers", pointer)
    for i, v in enumerate(value):
        _require(isinstance(v, (int, float)) and not isinstance(v, bool), "bbox entries must be numbers", f"{pointer}/{i}")
    _require(value[2] > value[0] and value[3] > value[1], "bbox is degenerate", pointer)
    return tuple(value)


def _contains(outer, inner, slack: float) -> bool:
    return (
        inner[0] >= outer[0] - slack
        and inner[1] >= outer[1] - slack
        and inner[2] <= outer[2] + slack
        and inner[3] <= outer[3] + slack
    )


def parse_text_layer(source) -> TextLayer:
    """Validate a text-layer document (path, JSON string or already-decoded dict).

    Raises :class:`ParseError` (with a JSON pointer) on schema violations and
    :class:`ConsistencyError` when characters disagree with their word.
    """
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            text = Path(source).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    _require(isinstance(doc, dict), "text layer must be an object", "")
    extra = set(doc) - {"page_id", "dpi", "words"}
    _require(not extra, f"unknown keys {sorted(extra)}", "")
    _require(isinstance(doc.get("page_id"), str), "page_id must be a string", "/page_id")
    dpi = doc.get("dpi")
    _require(isinstance(dpi, int) and not isinstance(dpi, bool) and dpi > 0, "dpi must be a positive integer", "/dpi")
    _require(isinstance(doc.get("words"), list), "words must be a list", "/words")
    words = []
    for wi, w in enumerate(doc["words"]):
        wp = f"/words/{wi}"
        _require(isinstance(w, dict), "word must be an object", wp)
        _require(isinstance(w.get("text"), str) and w["text"] != "", "text must be a non-empty string", f"{wp}/text")
        wbox = _parse_bbox(w.get("bbox"), f"{wp}/bbox")
        _require(isinstance(w.get("chars"), list), "chars must be a list", f"{wp}/chars")
        chars = []
        for ci, c in enumerate(w["chars"]):
            cp = f"{wp}/chars/{ci}"
            _require(isinstance(c, dict), "char must be an object", cp)
            _require(isinstance(c.get("text"), str) and c["text"] != "", "text must be a non-empty string", f"{cp}/text")
            cbox = _parse_bbox(c.get("bbox"), f"{cp}/bbox")
            if not _contains(wbox, cbox, BBOX_SLACK):
                raise ConsistencyError(f"{cp}: char box {list(cbox)} lies outside word box {list(wbox)}")
            chars.append(CharEntry(c["text"], cbox))
        joined = "".join(c.text for c in chars)
        if joined != w["text"]:
            raise ConsistencyError(f"{wp}: chars spell {joined!r} but word text is {w['text']!r}")
        words.append(WordEntry(w["text"], wbox, chars))
    return TextLayer(doc["page_id"], dpi, words)


@dataclass
class GroundTruthRecord:
    kind: str  # "word" or "char"
    text: str
    norm_crop: np.ndarray
    orig_quad: np.ndarray
    orig_crop: np.ndarray
    border: bool
    provenance: dict = field(default_factory=dict)
    gt_crop: np.ndarray | None = None

    def images(self) -> dict[str, np.ndarray]:
        out = {"norm.png": self.norm_crop, "orig.png": self.orig_crop}
        if self.gt_crop is not None:
            out["gt.png"] = self.gt_crop
        return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-union of two ``(n, 4)`` and ``(k, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _shift(bbox, offset) -> tuple:
    ox, oy = offset
    return (bbox[0] - ox, bbox[1] - oy, bbox[2] - ox, bbox[3] - oy)


def _homography_list(H) -> list[float]:
    return [float(v) for v in np.asarray(H, dtype=np.float64).ravel()]


def extract_word_records(
    pairs,
    layer: TextLayer,
    page_img,
    norm_img,
    orig_img,
    H,
    *,
    norm_offset=(0.0, 0.0),
    provenance: dict | None = None,
) -> list[GroundTruthRecord]:
    """Label matched word pairs from the text layer and cut their three images.

    ``norm_img`` covers page space starting at ``norm_offset``; ``H`` maps the
    original capture into page space. A pair is labelled with the layer word
    of highest IoU against its page box; pairs whose best IoU is at most 0.5
    are skipped.
    """
    base = dict(provenance or {})
    base.setdefault("page_id", layer.page_id)
    base["homography"] = _homography_list(H)
    layer_boxes = layer.word_bboxes()
    if not pairs or len(layer_boxes) == 0:
        return []
    ious = iou_matrix(np.array([p.ret.bbox for p in pairs]), layer_boxes)
    Hinv = invert_homography(H)
    records = []
    taken: set[int] = set()
    for k, pair in enumerate(pairs):
        row = ious[k]
        wi = int(np.argmax(row))
        if row[wi] <= MIN_LABEL_IOU:
            log.debug("skipping unlabelled word box %s (best IoU %.3f)", pair.ret.bbox, row[wi])
            continue
        if wi in taken:
            log.debug("skipping duplicate match of layer word %d", wi)
            continue
        word = layer.words[wi]
        try:
            gt_crop = crop(page_img, box_to_pixels(word.bbox))
            norm_crop = crop(norm_img, box_to_pixels(_shift(pair.capt.bbox, norm_offset)))
            quad = project_points(Hinv, box_corners(pair.capt.bbox))
            orig_crop = crop_quad(orig_img, quad)
        except EmptyRegionError:
            log.debug("skipping word %d: crop region empty", wi)
            continue
        taken.add(wi)
        prov = dict(base)
        prov.update(
            word_index=wi,
            box=[float(v) for v in pair.capt.bbox],
            capt_bbox=[float(v) for v in pair.capt.bbox],
            ret_bbox=[float(v) for v in pair.ret.bbox],
            layer_bbox=[float(v) for v in word.bbox],
        )
        records.append(GroundTruthRecord("word", word.text, norm_crop, quad, orig_crop, pair.border, prov, gt_crop))
    return records


def extract_char_records(word_records, layer: TextLayer, norm_img, orig_img, H, *, norm_offset=(0.0, 0.0)):
    """Character records for already matched words, cut from the layer's character boxes."""
    Hinv = invert_homography(H)
    records = []
    for wr in word_records:
        wi = wr.provenance["word_index"]
        for ci, ch in enumerate(layer.words[wi].chars):
            try:
                norm_crop = crop(norm_img, box_to_pixels(_shift(ch.bbox, norm_offset)))
                quad = project_points(Hinv, box_corners(ch.bbox))
                orig_crop = crop_quad(orig_img, quad)
            except EmptyRegionError:
                log.debug("skipping char %d of word %d: crop region empty", ci, wi)
                continue
            prov = {k: v for k, v in wr.provenance.items() if k not in ("capt_bbox", "ret_bbox", "layer_bbox")}
            prov.update(char_index=ci, box=[float(v) for v in ch.bbox])
            records.append(GroundTruthRecord("char", ch.text, norm_crop, quad, orig_crop, wr.border, prov))
    return records


def verify_record(record: GroundTruthRecord, tol: float = 1e-6) -> bool:
    """Check that the stored homography maps ``orig_quad`` back onto the source box."""
    H = np.array(record.provenance["homography"], dtype=np.float64).reshape(3, 3)
    back = project_points(H, record.orig_quad)
    return bool(np.max(np.abs(back - box_corners(record.provenance["box"]))) <= tol)


def split_for(doc_id: str, page_id: str, index: int, seed: int = 0) -> str:
    """Deterministic 60/10/30 split from a hash of the record key."""
    digest = hashlib.sha256(f"{seed}\x1f{doc_id}\x1f{page_id}\x1f{index}".encode()).digest()
    bucket = int.from_bytes(digest[:8], "big") % 100
    if bucket < SPLIT_FRACTIONS[0]:
        return "train"
    if bucket < SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1]:
        return "val"
    return "test"


_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def record_id(record: GroundTruthRecord) -> str:
    p = record.provenance
    cap = _UNSAFE.sub("_", str(p.get("capture_id", p.get("doc_id", "x"))))
    rid = f"{cap}-w{p['word_index']:05d}"
    if record.kind == "char":
        rid += f"-c{p['char_index']:03d}"
    return rid


@dataclass
class DatasetManifest:
    counts: dict
    records: dict
    params: dict
    tool_version: str = __version__
    created: str | None = None

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "created": self.created,
            "params": self.params,
            "counts": self.counts,
            "records": self.records,
        }


class DatasetWriter:
    """Streams records into the split/kind/record-id tree and finishes with ``manifest.json``.

    A ``_INCOMPLETE`` marker sits in the output root until the manifest is
    written; it stays there (with the error text) if any write fails.
    """

    def __init__(self, out_dir, params: dict | None = None, split_seed: int = 0, overwrite: bool = False, created=None):
        self.out_dir = Path(out_dir)
        self.params = params or {}
        self.split_seed = split_seed
        self.created = created
        self.records: dict[str, dict] = {}
        self.counts = {s: {"words": 0, "chars": 0} for s in SPLITS}
        if self.out_dir.exists() and any(self.out_dir.iterdir()):
            if not overwrite:
                raise FileExistsError(f"{self.out_dir} is not empty")
            shutil.rmtree(self.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / INCOMPLETE_MARKER).write_text("", encoding="utf-8")

    def _fail(self, exc: Exception) -> None:
        try:
            (self.out_dir / INCOMPLETE_MARKER).write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        except OSError:
            pass

    def add(self, record: GroundTruthRecord) -> str:
        p = record.provenance
        split = split_for(str(p.get("doc_id", "")), str(p.get("page_id", "")), int(p["word_index"]), self.split_seed)
        kind_dir = "words" if record.kind == "word" else "chars"
        rid = record_id(record)
        rdir = self.out_dir / split / kind_dir / rid
        meta = {
            "id": rid,
            "kind": record.kind,
            "text": record.text,
            "border": bool(record.border),
            "split": split,
            "orig_quad": [[float(x), float(y)] for x, y in np.asarray(record.orig_quad)],
            "provenance": p,
        }
        try:
            rdir.mkdir(parents=True, exist_ok=False)
            for name, img in record.images().items():
                save_image(rdir / name, img)
            (rdir / "meta.json").write_text(json.dumps(meta, ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8")
            (rdir / "gt.txt").write_text(record.text, encoding="utf-8")
        except OSError as exc:
            self._fail(exc)
            raise
        self.records[rid] = {"split": split, "kind": record.kind, "border": bool(record.border), "path": f"{split}/{kind_dir}/{rid}"}
        self.counts[split][kind_dir] += 1
        return rid

    def close(self) -> DatasetManifest:
        manifest = DatasetManifest(
            counts=self.counts,
            records=dict(sorted(self.records.items())),
            params=self.params,
            created=self.created,
        )
        try:
            tmp = self.out_dir / "manifest.json.tmp"
            tmp.write_text(json.dumps(manifest.to_dict(), ensure_ascii=False, sort_keys=True, indent=1), encoding="utf-8")
            tmp.replace(self.out_dir / "manifest.json")
            (self.out_dir / INCOMPLETE_MARKER).unlink()
        except OSError as exc:
            self._fail(exc)
            raise
        return manifest


def emit_dataset(records, out_dir, params: dict | None = None, split_seed: int = 0, overwrite: bool = False, created=None):
    """Write ``records`` under ``out_dir`` and return the manifest."""
    writer = DatasetWriter(out_dir, params, split_seed, overwrite, created)
    for r in records:
        writer.add(r)
    return writer.close()


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text(encoding="utf-8"))

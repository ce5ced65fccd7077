import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docgt.alignment import WordBox, WordPair, match_words, word_blocks
from docgt.errors import ConsistencyError, ParseError
from docgt.geometry import box_corners
from docgt.groundtruth import (
    INCOMPLETE_MARKER,
    DatasetWriter,
    GroundTruthRecord,
    emit_dataset,
    extract_char_records,
    extract_word_records,
    iou_matrix,
    load_manifest,
    parse_text_layer,
    split_for,
    verify_record,
)
from docgt.imaging import warp_perspective
from docgt.synth import SynthPageSpec, render_page

MINIMAL = {"page_id": "p", "dpi": 300, "words": [{"text": "to", "bbox": [0, 0, 20, 10], "chars": [{"text": "t", "bbox": [0, 0, 9, 10]}, {"text": "o", "bbox": [10, 0, 20, 10]}]}]}


@pytest.fixture(scope="module")
def page():
    return render_page(SynthPageSpec(seed=21))


def aligned_pairs(img):
    blocks = word_blocks(img)
    return match_words(blocks, blocks)


class TestTextLayer:
    def test_minimal(self):
        layer = parse_text_layer(MINIMAL)
        assert len(layer.words) == 1 and [c.text for c in layer.words[0].chars] == ["t", "o"]

    def test_from_string_and_path(self, tmp_path):
        text = json.dumps(MINIMAL)
        assert parse_text_layer(text) == parse_text_layer(MINIMAL)
        path = tmp_path / "layer.json"
        path.write_text(text)
        assert parse_text_layer(path) == parse_text_layer(str(path))

    def test_char_outside_word(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["words"][0]["chars"][1]["bbox"] = [10, 0, 23, 10]
        with pytest.raises(ConsistencyError):
            parse_text_layer(doc)

    def test_one_pixel_slack_allowed(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["words"][0]["chars"][1]["bbox"] = [10, 0, 21, 10]
        parse_text_layer(doc)

    def test_spelling_mismatch(self):
        doc = json.loads(json.dumps(MINIMAL))
        doc["words"][0]["text"] = "ta"
        with pytest.raises(ConsistencyError):
            parse_text_layer(doc)

    @pytest.mark.parametrize(
        "mutate, pointer",
        [
            (lambda d: d.pop("dpi"), "/dpi"),
            (lambda d: d["words"][0].update(bbox=[0, 0, 0, 10]), "/words/0/bbox"),
            (lambda d: d["words"][0]["chars"][0].update(text=""), "/words/0/chars/0/text"),
            (lambda d: d["words"][0]["bbox"].__setitem__(2, "x"), "/words/0/bbox/2"),
        ],
    )
    def test_schema_errors_carry_pointer(self, mutate, pointer):
        doc = json.loads(json.dumps(MINIMAL))
        mutate(doc)
        with pytest.raises(ParseError) as exc:
            parse_text_layer(doc)
        assert exc.value.pointer == pointer

    def test_synth_round_trip(self, page):
        _, layer = page
        assert len(layer.words) == 200
        assert parse_text_layer(layer.dumps()) == layer


class TestIoU:
    def test_identity_and_disjoint(self):
        m = iou_matrix([[0, 0, 10, 10]], [[0, 0, 10, 10], [20, 20, 30, 30], [5, 0, 15, 10]])
        assert m.tolist() == [[1.0, 0.0, pytest.approx(1 / 3)]]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 20), min_size=8, max_size=8))
    def test_matches_pixel_counting(self, v):
        a = (min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]) + 1, max(v[2], v[3]) + 1)
        b = (min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]) + 1, max(v[6], v[7]) + 1)
        ma = np.zeros((22, 22), bool)
        mb = np.zeros((22, 22), bool)
        ma[a[1] : a[3], a[0] : a[2]] = True
        mb[b[1] : b[3], b[0] : b[2]] = True
        assert iou_matrix([a], [b])[0, 0] == pytest.approx((ma & mb).sum() / (ma | mb).sum())


class TestWordRecords:
    def test_aligned_page_labels_match_renderer(self, page):
        img, layer = page
        pairs = aligned_pairs(img)
        recs = extract_word_records(pairs, layer, img, img, img, np.eye(3))
        assert len(recs) >= 0.99 * len(layer.words)
        for r in recs:
            # the renderer's word whose box holds the block centre
            cx = 0.5 * (r.provenance["ret_bbox"][0] + r.provenance["ret_bbox"][2])
            cy = 0.5 * (r.provenance["ret_bbox"][1] + r.provenance["ret_bbox"][3])
            owners = [w.text for w in layer.words if w.bbox[0] <= cx < w.bbox[2] and w.bbox[1] <= cy < w.bbox[3]]
            assert owners == [r.text]
            assert all(im.size > 0 for im in r.images().values()) and len(r.images()) == 3

    def test_identity_quad_is_box(self, page):
        img, layer = page
        recs = extract_word_records(aligned_pairs(img)[:10], layer, img, img, img, np.eye(3))
        for r in recs:
            assert np.allclose(r.orig_quad, box_corners(r.provenance["capt_bbox"]))
            assert np.array_equal(r.orig_crop, r.norm_crop)

    def test_ambiguous_box_skipped(self, caplog):
        layer = parse_text_layer(
            {
                "page_id": "p",
                "dpi": 300,
                "words": [
                    {"text": "a", "bbox": [0, 0, 10, 10], "chars": [{"text": "a", "bbox": [0, 0, 10, 10]}]},
                    {"text": "b", "bbox": [10, 0, 20, 10], "chars": [{"text": "b", "bbox": [10, 0, 20, 10]}]},
                ],
            }
        )
        img = np.zeros((10, 20), np.uint8)
        b = WordBox((0.0, 0.0, 20.0, 10.0))
        assert iou_matrix([b.bbox], layer.word_bboxes()).tolist() == [[0.5, 0.5]]
        with caplog.at_level("DEBUG", logger="docgt.groundtruth"):
            assert extract_word_records([WordPair(b, b)], layer, img, img, img, np.eye(3)) == []
        assert "IoU" in caplog.text

    def test_quads_reproduce_boxes_under_perspective(self, page):
        img, layer = page
        H = np.array([[1.02, 0.03, -15.0], [-0.02, 0.99, 8.0], [2e-5, -1e-5, 1.0]])
        h, w = img.shape
        orig = warp_perspective(img, np.linalg.inv(H), w, h)
        recs = extract_word_records(aligned_pairs(img), layer, img, img, orig, H, provenance={"doc_id": "d"})
        assert recs and all(verify_record(r) for r in recs)
        chars = extract_char_records(recs, layer, img, orig, H)
        assert chars and all(verify_record(c) for c in chars)

    def test_char_records(self, page):
        img, layer = page
        words = extract_word_records(aligned_pairs(img), layer, img, img, img, np.eye(3))
        chars = extract_char_records(words, layer, img, img, np.eye(3))
        assert len(chars) == sum(len(w.text) for w in words)
        ratio = len(chars) / len(words)
        mean_len = np.mean([len(w.text) for w in layer.words])
        assert ratio == pytest.approx(mean_len, rel=0.05) and 4 <= ratio <= 6
        for c in chars:
            assert "gt.png" not in c.images()
            assert np.array_equal(c.orig_crop, c.norm_crop)
        # characters of each word spell the word
        spelled = {}
        for c in chars:
            spelled.setdefault(c.provenance["word_index"], []).append(c.text)
        for wr in words:
            assert "".join(spelled[wr.provenance["word_index"]]) == wr.text
            assert all(c.border == wr.border for c in chars if c.provenance["word_index"] == wr.provenance["word_index"])

    def test_word_to_two_chars(self):
        layer = parse_text_layer(MINIMAL)
        img = np.full((12, 22), 255, np.uint8)
        b = WordBox((0.0, 0.0, 20.0, 10.0))
        words = extract_word_records([WordPair(b, b)], layer, img, img, img, np.eye(3))
        assert [c.text for c in extract_char_records(words, layer, img, img, np.eye(3))] == ["t", "o"]


def fake_records(n, kind="word"):
    img = np.full((4, 6), 128, np.uint8)
    out = []
    for i in range(n):
        prov = {"doc_id": f"doc{i % 7}", "page_id": f"page{i % 7}", "capture_id": f"cap{i // 7}", "word_index": i, "homography": list(np.eye(3).ravel()), "box": [0.0, 0.0, 6.0, 4.0]}
        out.append(GroundTruthRecord(kind, f"w{i}", img, box_corners((0, 0, 6, 4)), img, i % 5 == 0, prov, img))
    return out


class TestEmit:
    def test_hundred_records(self, tmp_path):
        m = emit_dataset(fake_records(100), tmp_path / "a")
        c = {s: m.counts[s]["words"] for s in m.counts}
        assert sum(c.values()) == 100
        assert 45 <= c["train"] <= 75 and 3 <= c["val"] <= 20 and 18 <= c["test"] <= 42
        on_disk = {s: len(list((tmp_path / "a" / s / "words").iterdir())) if (tmp_path / "a" / s).exists() else 0 for s in c}
        assert on_disk == c
        assert not (tmp_path / "a" / INCOMPLETE_MARKER).exists()
        rec = next(iter(m.records.values()))
        d = tmp_path / "a" / rec["path"]
        assert sorted(p.name for p in d.iterdir()) == ["gt.png", "gt.txt", "meta.json", "norm.png", "orig.png"]
        assert (d / "gt.txt").read_bytes().decode().startswith("w") and not (d / "gt.txt").read_text().endswith("\n")

    def test_deterministic(self, tmp_path):
        emit_dataset(fake_records(40), tmp_path / "a", created="t1")
        emit_dataset(fake_records(40), tmp_path / "b", created="t2")
        ma, mb = load_manifest(tmp_path / "a"), load_manifest(tmp_path / "b")
        ma.pop("created"), mb.pop("created")
        assert ma == mb
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for f in files_a:
            if f.name != "manifest.json":
                assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_split_is_stable(self):
        assert split_for("d", "p", 3) == split_for("d", "p", 3)
        assert {split_for("d", "p", i) for i in range(200)} == {"train", "val", "test"}

    def test_empty(self, tmp_path):
        m = emit_dataset([], tmp_path / "e")
        assert m.records == {} and all(v == {"words": 0, "chars": 0} for v in m.counts.values())
        assert (tmp_path / "e" / "manifest.json").exists()

    def test_refuses_non_empty_dir(self, tmp_path):
        (tmp_path / "x").mkdir()
        (tmp_path / "x" / "junk").write_text("")
        with pytest.raises(FileExistsError):
            emit_dataset([], tmp_path / "x")
        emit_dataset([], tmp_path / "x", overwrite=True)

    def test_failure_leaves_marker(self, tmp_path):
        w = DatasetWriter(tmp_path / "f")
        rec = fake_records(1)[0]
        w.add(rec)
        with pytest.raises(OSError):
            w.add(rec)
        marker = tmp_path / "f" / INCOMPLETE_MARKER
        assert marker.exists() and "FileExistsError" in marker.read_text()
        assert not (tmp_path / "f" / "manifest.json").exists()

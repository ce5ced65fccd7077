"""Acceptance gate: eight end-to-end criteria, each printing one pass/fail line.

The synthetic corpus pages use seeds disjoint from the ones the default LLAH
bin edges were fitted on.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from docgt import cli
from docgt.alignment import MatchParams, WordBox, match_words
from docgt.evaluation import accuracy, edit_counts, write_hypotheses
from docgt.geometry import (
    corner_transfer_error,
    estimate_homography_ls,
    project_points,
    refine_homography_lm,
    reprojection_cost,
)
from docgt.groundtruth import iou_matrix
from docgt.llah import LlahStore, affine_invariant, index_page, retrieve
from docgt.pipeline import PageEntry, PipelineParams, process_capture
from docgt.synth import SynthPageSpec, mild_capture_spec, render_page, severe_capture_spec, simulate_capture

pytestmark = pytest.mark.slow

PAGE_SEED0 = 1000
N_PAGES = 200
CAPTURES_PER_PAGE = 3


@pytest.fixture(scope="module")
def corpus():
    pages = {}
    for i in range(N_PAGES):
        img, layer = render_page(SynthPageSpec(seed=PAGE_SEED0 + i))
        pages[layer.page_id] = PageEntry(img, layer)
    store = LlahStore()
    t0 = time.perf_counter()
    for doc_id, page in pages.items():
        index_page(page.image, doc_id, None, store)
    return pages, store, time.perf_counter() - t0


def _doc_ids(pages):
    return list(pages)


def true_label(record, H_true, layer, layer_boxes):
    """Text of the page word actually under the record's capture quad, via the true homography."""
    q = project_points(H_true, record.orig_quad)
    box = np.array([[q[:, 0].min(), q[:, 1].min(), q[:, 0].max(), q[:, 1].max()]])
    ious = iou_matrix(box, layer_boxes)[0]
    k = int(np.argmax(ious))
    return layer.words[k].text if ious[k] > 0.5 else None


def test_label_fidelity(corpus, record_criterion):
    pages, store, index_time = corpus
    params = PipelineParams(chars=False)
    total = correct = failed_captures = 0
    pipeline_time = 0.0
    doc_ids = _doc_ids(pages)
    for i, doc_id in enumerate(doc_ids):
        page = pages[doc_id]
        layer_boxes = page.layer.word_bboxes()
        for j in range(CAPTURES_PER_PAGE):
            cap = simulate_capture(page.image, mild_capture_spec(50_000 + CAPTURES_PER_PAGE * i + j))
            t0 = time.perf_counter()
            res = process_capture(cap.image, f"{doc_id}-{j}", store, pages, params)
            pipeline_time += time.perf_counter() - t0
            if res.log.status != "ok" or res.log.doc_id != doc_id:
                failed_captures += 1
                continue
            for rec in res.words:
                total += 1
                correct += rec.text == true_label(rec, cap.homography, page.layer, layer_boxes)
    runtime = index_time + pipeline_time
    fidelity = correct / total if total else 0.0
    passed = fidelity >= 0.999 and runtime < 300 and total > 0
    record_criterion(
        1,
        "label fidelity",
        passed,
        f"{correct}/{total} = {100 * fidelity:.3f}% (need >= 99.9%), {failed_captures} failed captures, "
        f"runtime {runtime:.0f} s (index {index_time:.0f} s + pipeline {pipeline_time:.0f} s, need < 300 s)",
    )
    assert passed


def _retrieval_batch(pages, store, spec_fn, seed0):
    hits = n = 0
    elapsed = 0.0
    for i, doc_id in enumerate(_doc_ids(pages)):
        for j in range(CAPTURES_PER_PAGE):
            cap = simulate_capture(pages[doc_id].image, spec_fn(seed0 + CAPTURES_PER_PAGE * i + j))
            t0 = time.perf_counter()
            try:
                hits += retrieve(cap.image, None, store).doc_id == doc_id
            except LookupError:
                pass
            elapsed += time.perf_counter() - t0
            n += 1
    return hits, n, elapsed


def test_retrieval_accuracy(corpus, record_criterion):
    pages, store, _ = corpus
    mild_hits, n_mild, t_mild = _retrieval_batch(pages, store, mild_capture_spec, 70_000)
    severe_hits, n_severe, t_severe = _retrieval_batch(pages, store, severe_capture_spec, 90_000)
    passed = mild_hits == n_mild and severe_hits >= 0.99 * n_severe and t_mild < 120 and t_severe < 120
    record_criterion(
        2,
        "retrieval",
        passed,
        f"mild {mild_hits}/{n_mild} in {t_mild:.0f} s (need 100%, < 120 s); "
        f"severe blur {severe_hits}/{n_severe} = {100 * severe_hits / n_severe:.2f}% in {t_severe:.0f} s (need >= 99%)",
    )
    assert passed


def test_generate_throughput(tmp_path, record_criterion, capsys):
    cfg = cli.load_config(overrides={"synth": {"pages": 10, "captures_per_page": 1}})
    corpus_dir = tmp_path / "corpus"
    assert cli.cmd_synth(cfg, corpus_dir) == 0
    assert cli.cmd_index(cfg, corpus_dir / "manifest.json", tmp_path / "store.llah") == 0
    t0 = time.perf_counter()
    code = cli.cmd_generate(cfg, tmp_path / "store.llah", corpus_dir / "manifest.json", tmp_path / "dataset")
    elapsed = time.perf_counter() - t0
    log = [json.loads(line) for line in (tmp_path / "dataset" / "capture_log.jsonl").read_text().splitlines()]
    ok = sum(entry["status"] == "ok" for entry in log)
    passed = code == 0 and ok == 10 and len({e["doc_id"] for e in log}) == 10 and elapsed < 120
    capsys.readouterr()
    record_criterion(3, "throughput", passed, f"{ok}/10 captures of distinct pages end-to-end in {elapsed:.1f} s (need < 120 s)")
    assert passed


def _random_homography(rng):
    H = np.eye(3)
    H[:2, :2] += rng.uniform(-0.15, 0.15, (2, 2))
    H[:2, 2] = rng.uniform(-50, 50, 2)
    H[2, :2] = rng.uniform(-2e-4, 2e-4, 2)
    return H


def test_homography_accuracy(record_criterion):
    rng = np.random.default_rng(2024)
    corners = np.array([[0, 0], [1000, 0], [1000, 1000], [0, 1000]], dtype=float)
    medians, lm_not_worse = [], 0
    for _ in range(100):
        H = _random_homography(rng)
        src = rng.uniform(0, 1000, (60, 2))
        dst = project_points(H, src) + rng.normal(0, 0.5, (60, 2))
        H0 = estimate_homography_ls(src, dst)
        H1 = refine_homography_lm(H0, src, dst)
        medians.append(np.median(corner_transfer_error(H1, H, corners)))
        lm_not_worse += reprojection_cost(H1, src, dst) <= reprojection_cost(H0, src, dst)
    med = float(np.median(medians))
    passed = med < 1.0 and lm_not_worse == 100
    record_criterion(4, "homography accuracy", passed, f"median corner-transfer error {med:.3f} px (need < 1.0); LM cost <= DLT cost in {lm_not_worse}/100")
    assert passed


def test_affine_invariance(record_criterion):
    rng = np.random.default_rng(7)
    n = 100_000
    worst = 0.0
    checked = 0
    for _ in range(n):
        q = rng.uniform(-100, 100, (4, 2))
        A = rng.uniform(-3, 3, (2, 2))
        while not 0.1 <= abs(np.linalg.det(A)) <= 10:
            A = rng.uniform(-3, 3, (2, 2))
        t = rng.uniform(-500, 500, 2)
        try:
            before = affine_invariant(*q)
        except ValueError:
            continue
        after = affine_invariant(*(q @ A.T + t))
        worst = max(worst, abs(after - before) / abs(before) if before else abs(after))
        checked += 1
    passed = worst < 1e-9 and checked > 0.99 * n
    record_criterion(5, "affine invariance", passed, f"{checked} quads, worst relative deviation {worst:.2e} (need < 1e-9)")
    assert passed


def test_match_gate(record_criterion):
    base = WordBox((100.0, 100.0, 160.0, 120.0))
    rejected = match_words([base.shifted(3, 4)], [base]) == []
    # centroid (130, 110) -> (133, 113.9); width 60 -> 64.9
    widened = WordBox((133.0 - 32.45, 103.9, 133.0 + 32.45, 123.9))
    accepted = len(match_words([widened], [base])) == 1
    rng = np.random.default_rng(11)
    params = MatchParams()
    disagree = 0
    for _ in range(10_000):
        x, y = rng.uniform(0, 500, 2)
        w, h = rng.uniform(5, 80), rng.uniform(5, 30)
        dx, dy, dwid = rng.uniform(-7, 7, 3)
        a = WordBox((x, y, x + w, y + h))
        b = WordBox((x + dx - dwid / 2, y + dy, x + w + dx + dwid / 2, y + h + dy))
        ca, cb = ((a.bbox[0] + a.bbox[2]) / 2, (a.bbox[1] + a.bbox[3]) / 2), ((b.bbox[0] + b.bbox[2]) / 2, (b.bbox[1] + b.bbox[3]) / 2)
        brute = ((ca[0] - cb[0]) ** 2 + (ca[1] - cb[1]) ** 2) ** 0.5 < params.theta_c and abs((a.bbox[2] - a.bbox[0]) - (b.bbox[2] - b.bbox[0])) < params.theta_w
        disagree += brute != (len(match_words([a], [b], params)) == 1)
    passed = rejected and accepted and disagree == 0
    record_criterion(
        6,
        "matching gate",
        passed,
        f"(3,4) offset rejected={rejected}, (3,3.9)+4.9 width accepted={accepted}, {disagree}/10000 disagreements with brute force",
    )
    assert passed


def _reference_levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def test_accuracy_oracle(record_criterion):
    acc = accuracy("votes", "voes")
    rng = np.random.default_rng(3)
    alphabet = "abcde"
    mismatches = 0
    for _ in range(10_000):
        a = "".join(rng.choice(list(alphabet), int(rng.integers(0, 33))))
        b = "".join(rng.choice(list(alphabet), int(rng.integers(0, 33))))
        mismatches += edit_counts(a, b).total != _reference_levenshtein(a, b)
    passed = acc == 80.0 and mismatches == 0
    record_criterion(7, "edit-distance accuracy", passed, f"accuracy('votes','voes') = {acc}; {mismatches}/10000 distance mismatches")
    assert passed


def _run_everything(root: Path) -> str:
    cfg = cli.load_config(overrides={"seed": 5, "synth": {"pages": 3, "captures_per_page": 1}})
    assert cli.cmd_synth(cfg, root / "corpus") == 0
    assert cli.cmd_index(cfg, root / "corpus" / "manifest.json", root / "store.llah") == 0
    assert cli.cmd_generate(cfg, root / "store.llah", root / "corpus" / "manifest.json", root / "dataset") == 0
    manifest = json.loads((root / "dataset" / "manifest.json").read_text())
    hyps = {rid: "" if k % 3 == 0 else "word" for k, rid in enumerate(manifest["records"])}
    write_hypotheses(root / "hyp.tsv", hyps)
    assert cli.cmd_eval(cfg, root / "dataset", root / "hyp.tsv", json_out=root / "report.json") == 0
    return (root / "report.json").read_text()


def _tree(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            data = p.read_bytes()
            if p.name == "manifest.json" and p.parent.name == "dataset":
                m = json.loads(data)
                m.pop("created")
                data = json.dumps(m, sort_keys=True).encode()
            out[str(p.relative_to(root))] = data
    return out


def test_reproducibility(tmp_path, record_criterion, capsys):
    report_a = _run_everything(tmp_path / "a")
    report_b = _run_everything(tmp_path / "b")
    tree_a, tree_b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = sorted(k for k in tree_a.keys() | tree_b.keys() if tree_a.get(k) != tree_b.get(k))
    capsys.readouterr()
    passed = not differing and report_a == report_b
    record_criterion(
        8,
        "reproducibility",
        passed,
        f"{len(tree_a)} files compared, {len(differing)} differ {differing[:3]}; reports identical={report_a == report_b}",
    )
    assert passed

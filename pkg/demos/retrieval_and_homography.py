"""Show the two geometric steps behind every label: page retrieval and alignment.

A capture of one page is simulated with a known homography. LLAH retrieval
picks the page out of a small store and yields point correspondences; the
homography fitted to them is compared with the truth, with and without
outlier trimming. Finally the words of the normalised capture are matched
against the page's words.

    python demos/retrieval_and_homography.py [--pages 20] [--seed 7]
"""

import argparse

import numpy as np

from docgt.alignment import match_words, word_blocks
from docgt.geometry import corner_transfer_error
from docgt.imaging import warp_perspective
from docgt.llah import LlahStore, index_page, retrieve
from docgt.pipeline import fit_homography
from docgt.synth import SynthPageSpec, mild_capture_spec, render_page, simulate_capture


def main(pages: int, seed: int) -> None:
    print(f"rendering and indexing {pages} pages ...")
    images = [render_page(SynthPageSpec(seed=seed * 1000 + i))[0] for i in range(pages)]
    store = LlahStore()
    for i, img in enumerate(images):
        index_page(img, f"page-{i}", None, store)
    print(f"store: {store.stats()}")

    target = seed % pages
    cap = simulate_capture(images[target], mild_capture_spec(seed))
    res = retrieve(cap.image, None, store)
    top = sorted(res.scores.items(), key=lambda kv: -kv[1])[:3]
    print(f"\ncapture of page-{target} ({cap.image.shape[1]}x{cap.image.shape[0]} px)")
    print(f"retrieved {res.doc_id} with score {res.score}; runners-up {top[1:]}")
    print(f"{len(res.src)} point correspondences")

    h, w = cap.image.shape
    corners = np.array([[0, 0], [w, 0], [w, h], [0, h]], float)
    for trim in (False, True):
        H, H_dlt, kept = fit_homography(res.src, res.dst, trim=trim)
        err = corner_transfer_error(H, cap.homography, corners)
        label = "trimmed" if trim else "all points"
        print(f"{label:>10}: {kept.sum()} points kept, max corner error {err.max():.3f} px")

    H, _, _ = fit_homography(res.src, res.dst)
    ph, pw = images[target].shape
    # capture resampled into page coordinates
    norm = warp_perspective(cap.image, H, pw, ph)
    pairs = match_words(word_blocks(norm), word_blocks(images[target]))
    print(f"\n{len(pairs)} word pairs matched between the normalised capture and the page")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pages", type=int, default=20)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    main(args.pages, args.seed)

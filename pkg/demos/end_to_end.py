"""Walk through the whole command-line workflow on a small synthetic corpus.

Renders a few pages with captures, indexes the pages, generates a labelled
dataset from the captures and scores two toy OCR engines against it: one that
reads perfectly and one that garbles about 10% of the characters.

    python demos/end_to_end.py [--pages 5] [--keep DIR]
"""

import argparse
import json
import shutil
import tempfile
from pathlib import Path

import numpy as np

from docgt.cli import main
from docgt.evaluation import corrupt, dataset_records, write_hypotheses


def run(*argv):
    print(f"\n$ docgt {' '.join(argv)}")
    code = main(list(argv))
    if code != 0:
        raise SystemExit(f"docgt {argv[0]} exited with {code}")


def walkthrough(work: Path, pages: int) -> None:
    cfg = work / "config.json"
    cfg.write_text(json.dumps({"synth": {"pages": pages, "captures_per_page": 2}, "generate": {"chars": True}}))

    run("synth", "--config", str(cfg), "--out", str(work / "corpus"))
    run("index", "--config", str(cfg), "--manifest", str(work / "corpus/manifest.json"), "--store", str(work / "store.llah"))
    run("retrieve", "--store", str(work / "store.llah"), str(work / "corpus/captures/cap-00000-01.png"))
    run(
        "generate", "--config", str(cfg),
        "--store", str(work / "store.llah"),
        "--manifest", str(work / "corpus/manifest.json"),
        "--out", str(work / "dataset"),
    )

    # each record carries the word text, three crops and its provenance
    records = dataset_records(work / "dataset")
    rid, first = next(iter(records.items()))
    print(f"\n{len(records)} word records, e.g. {rid!r} -> {first['text']!r}")

    perfect = {k: r["text"] for k, r in records.items()}
    rng = np.random.default_rng(0)
    alphabet = "".join(sorted(set("".join(perfect.values()))))
    noisy = {k: corrupt(t, 0.1, rng, alphabet) for k, t in perfect.items()}
    write_hypotheses(work / "perfect.tsv", perfect)
    write_hypotheses(work / "noisy.tsv", noisy)

    run("eval", "--dataset", str(work / "dataset"), "--json", str(work / "perfect.json"), str(work / "perfect.tsv"))
    run("eval", "--dataset", str(work / "dataset"), "--json", str(work / "noisy.json"), str(work / "noisy.tsv"))
    for name in ("perfect", "noisy"):
        report = json.loads((work / f"{name}.json").read_text())
        print(f"{name:>8}: corpus accuracy {report['corpus_accuracy']:.2f}%")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pages", type=int, default=5)
    ap.add_argument("--keep", type=Path, help="work in this directory and keep the outputs")
    args = ap.parse_args()
    if args.keep:
        args.keep.mkdir(parents=True, exist_ok=True)
        walkthrough(args.keep, args.pages)
    else:
        tmp = Path(tempfile.mkdtemp(prefix="docgt-demo-"))
        try:
            walkthrough(tmp, args.pages)
        finally:
            shutil.rmtree(tmp)

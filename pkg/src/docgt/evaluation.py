"""Levenshtein-based OCR accuracy and benchmark aggregation over an emitted dataset."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import regex

from .errors import InvalidInputError, UndefinedAccuracyError

log = logging.getLogger(__name__)

HISTOGRAM_BINS = (0, 1, 2, 3, 5, 10)


@dataclass(frozen=True)
class EditCounts:
    insertions: int = 0
    deletions: int = 0
    substitutions: int = 0

    @property
    def total(self) -> int:
        return self.insertions + self.deletions + self.substitutions


def graphemes(text: str) -> list[str]:
    """Split into extended grapheme clusters."""
    return regex.findall(r"\X", text)


def edit_counts(gt: str, hyp: str) -> EditCounts:
    """Insertions, deletions and substitutions of a minimal unit-cost alignment of ``gt`` into ``hyp``.

    Among minimal alignments the backtrace prefers a substitution (or match)
    over an insertion/deletion pair.
    """
    a, b = graphemes(gt), graphemes(hyp)
    n, m = len(a), len(b)
    D = [list(range(m + 1))]
    for i in range(1, n + 1):
        ai = a[i - 1]
        prev = D[-1]
        row = [i] * (m + 1)
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (ai != b[j - 1]), prev[j] + 1, row[j - 1] + 1)
        D.append(row)
    ins = dele = sub = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + (a[i - 1] != b[j - 1]):
            sub += a[i - 1] != b[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and D[i][j] == D[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(ins, dele, int(sub))


def accuracy(gt: str, hyp: str) -> float:
    """``max(0, 1 - (i + s + d) / len(gt)) * 100`` with lengths in graphemes."""
    n = len(graphemes(gt))
    if n == 0:
        raise UndefinedAccuracyError("accuracy is undefined for an empty ground truth")
    return max(0.0, 1.0 - edit_counts(gt, hyp).total / n) * 100.0


@dataclass
class Stratum:
    records: int = 0
    graphemes: int = 0
    errors: int = 0
    clamped: int = 0

    @property
    def accuracy(self) -> float | None:
        if self.graphemes == 0:
            return None
        return max(0.0, 1.0 - self.errors / self.graphemes) * 100.0

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "graphemes": self.graphemes,
            "errors": self.errors,
            "clamped_records": self.clamped,
            "accuracy": self.accuracy,
        }


@dataclass
class BenchReport:
    per_record: dict[str, dict] = field(default_factory=dict)
    overall: Stratum = field(default_factory=Stratum)
    inner: Stratum = field(default_factory=Stratum)
    border: Stratum = field(default_factory=Stratum)
    histogram: dict[str, int] = field(default_factory=dict)
    unknown_ids: list[str] = field(default_factory=list)
    missing: int = 0

    @property
    def corpus_accuracy(self) -> float | None:
        return self.overall.accuracy

    def to_dict(self) -> dict:
        return {
            "corpus_accuracy": self.corpus_accuracy,
            "overall": self.overall.to_dict(),
            "strata": {"inner": self.inner.to_dict(), "border": self.border.to_dict()},
            "histogram": self.histogram,
            "missing_hypotheses": self.missing,
            "unknown_ids": self.unknown_ids,
            "conventions": {
                "per_record": "max(0, 1 - (i+s+d)/len(gt)) * 100",
                "corpus": "length-weighted: 100 * (1 - sum(i+s+d) / sum(len(gt))), clamped at 0",
                "units": "extended grapheme clusters, exact case",
                "missing_hypothesis": "scored as empty string",
            },
            "records": self.per_record,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False)

    def table(self) -> str:
        def fmt(s: Stratum) -> str:
            acc = "n/a" if s.accuracy is None else f"{s.accuracy:7.2f}"
            return f"{s.records:8d} {s.graphemes:10d} {s.errors:8d} {acc:>8}"

        lines = [
            f"{'stratum':<8} {'records':>8} {'graphemes':>10} {'errors':>8} {'acc %':>8}",
            f"{'all':<8} {fmt(self.overall)}",
            f"{'inner':<8} {fmt(self.inner)}",
            f"{'border':<8} {fmt(self.border)}",
            "edit distance histogram: " + ", ".join(f"{k}: {v}" for k, v in self.histogram.items()),
        ]
        return "\n".join(lines)


def _hist_key(d: int) -> str:
    for lo, hi in zip(HISTOGRAM_BINS, HISTOGRAM_BINS[1:]):
        if lo <= d < hi:
            return str(lo) if hi - lo == 1 else f"{lo}-{hi - 1}"
    return f"{HISTOGRAM_BINS[-1]}+"


def read_hypotheses(path) -> dict[str, str]:
    """``record_id<TAB>hypothesis`` lines; the hypothesis may be empty or absent."""
    hyps: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            rid, _, hyp = line.partition("\t")
            if rid in hyps:
                log.warning("duplicate hypothesis for %s on line %d; keeping the last", rid, lineno)
            hyps[rid] = hyp
    return hyps


def write_hypotheses(path, hyps: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar=None)
        for rid in sorted(hyps):
            writer.writerow([rid, hyps[rid]])


def dataset_records(dataset_dir, kind: str = "words", split: str | None = None) -> dict[str, dict]:
    """``record_id -> {"text", "border", "split"}`` for the records listed in the manifest."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InvalidInputError(f"{root} has no manifest.json (incomplete or not a dataset)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    out = {}
    for rid, info in sorted(manifest["records"].items()):
        if info["kind"] + "s" != kind or (split is not None and info["split"] != split):
            continue
        rec_dir = root / info["path"]
        text = (rec_dir / "gt.txt").read_text(encoding="utf-8")
        out[rid] = {"text": text, "border": bool(info["border"]), "split": info["split"]}
    return out


def score(records: dict[str, dict], hyps: dict[str, str]) -> BenchReport:
    """Score hypotheses against ``record_id -> {"text", "border"}`` ground truth."""
    report = BenchReport()
    hist: Counter = Counter()
    for rid, rec in records.items():
        gt = rec["text"]
        if rid not in hyps:
            report.missing += 1
        hyp = hyps.get(rid, "")
        ec = edit_counts(gt, hyp)
        n = len(graphemes(gt))
        acc = max(0.0, 1.0 - ec.total / n) * 100.0 if n else None
        report.per_record[rid] = {
            "gt": gt,
            "hyp": hyp,
            "insertions": ec.insertions,
            "deletions": ec.deletions,
            "substitutions": ec.substitutions,
            "accuracy": acc,
            "border": rec["border"],
        }
        hist[_hist_key(ec.total)] += 1
        for stratum in (report.overall, report.border if rec["border"] else report.inner):
            stratum.records += 1
            stratum.graphemes += n
            stratum.errors += ec.total
            stratum.clamped += int(ec.total > n)
    keys = [_hist_key(lo) for lo in HISTOGRAM_BINS]
    report.histogram = {k: hist.get(k, 0) for k in keys}
    report.unknown_ids = sorted(set(hyps) - set(records))
    for rid in report.unknown_ids:
        log.warning("hypothesis for unknown record %s ignored", rid)
    return report


def benchmark(dataset_dir, hyp_file, kind: str = "words", split: str | None = None) -> BenchReport:
    """Join a hypothesis TSV with a dataset's ground truth and aggregate accuracies."""
    return score(dataset_records(dataset_dir, kind, split), read_hypotheses(hyp_file))


def corrupt(text: str, rate: float, rng: np.random.Generator, alphabet: str) -> str:
    """Replace each grapheme with a different alphabet symbol with probability ``rate``."""
    out = []
    for g in graphemes(text):
        if rng.random() < rate:
            choices = [c for c in alphabet if c != g]
            out.append(choices[int(rng.integers(len(choices)))])
        else:
            out.append(g)
    return "".join(out)

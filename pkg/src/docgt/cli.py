"""Command-line interface: ``docgt {synth,index,retrieve,generate,eval}``.

Every command reads an optional JSON config (``--config``); explicit flags
override file values and the effective config is written next to the outputs.
Exit codes: 0 success (possibly with skipped items), 1 usage or config error,
2 pipeline failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import MatchParams
from .errors import DocGTError, InsufficientPointsError
from .evaluation import benchmark
from .geometry import LMSettings
from .groundtruth import DatasetWriter, parse_text_layer
from .imaging import load_image, save_image
from .llah import LlahParams, LlahStore, feature_points, fit_bin_edges, index_page, invariant_values, retrieve, with_edges
from .pipeline import PageEntry, PipelineParams, process_capture
from .synth import SynthPageSpec, mild_capture_spec, render_page, severe_capture_spec, simulate_capture

log = logging.getLogger("docgt")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "paths": {"corpus": "corpus", "store": "store.llah", "dataset": "dataset"},
    "synth": {
        "pages": 10,
        "captures_per_page": 1,
        "regime": "mild",
        "words_per_page": 200,
        "font_size_pt": [7.5, 9.0],
        "page_size": [1240, 1480],
        "dpi": 300,
        "crop_range": [0.6, 0.8],
    },
    "llah": LlahParams().to_dict(),
    "match": {"theta_c": 5.0, "theta_w": 5.0, "smoothing_sigma": 3.0},
    "lm": {"lambda0": 1e-3, "max_iter": 100, "rel_tol": 1e-10, "trim_outliers": True},
    "generate": {"chars": True, "split_seed": 0, "workers": 1},
}

REGIMES = {"mild": mild_capture_spec, "severe": severe_capture_spec}


class ConfigError(DocGTError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# configuration -------------------------------------------------------------


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Recursively overlay ``override`` on ``base``; unknown keys and shape changes are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}/{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            out[key] = merge_config(base[key], value, where)
        else:
            if isinstance(value, dict):
                raise ConfigError(f"{where} must not be an object")
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        cfg = merge_config(cfg, data)
    if overrides:
        cfg = merge_config(cfg, overrides)
    validate_config(cfg)
    return cfg


def llah_params(cfg: dict) -> LlahParams:
    c = dict(cfg["llah"])
    c["bin_edges"] = tuple(float(v) for v in c["bin_edges"])
    try:
        return LlahParams(**c)
    except TypeError as exc:
        raise ConfigError(f"bad llah block: {exc}") from exc


def pipeline_params(cfg: dict) -> PipelineParams:
    return PipelineParams(
        llah=llah_params(cfg),
        match=MatchParams(**cfg["match"]),
        lm=LMSettings(lambda0=float(cfg["lm"]["lambda0"]), max_iter=int(cfg["lm"]["max_iter"]), rel_tol=float(cfg["lm"]["rel_tol"])),
        chars=bool(cfg["generate"]["chars"]),
        trim_outliers=bool(cfg["lm"]["trim_outliers"]),
    )


def validate_config(cfg: dict) -> None:
    s = cfg["synth"]
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("/seed must be a non-negative integer")
    for key in ("pages", "captures_per_page", "words_per_page", "dpi"):
        if not isinstance(s[key], int) or s[key] < 0:
            raise ConfigError(f"/synth/{key} must be a non-negative integer")
    if s["regime"] not in REGIMES:
        raise ConfigError(f"/synth/regime must be one of {sorted(REGIMES)}")
    lo, hi = s["crop_range"]
    if not 0.3 <= lo <= hi <= 1.0:
        raise ConfigError("/synth/crop_range must satisfy 0.3 <= lo <= hi <= 1")
    g = cfg["generate"]
    if not isinstance(g["workers"], int) or g["workers"] < 1:
        raise ConfigError("/generate/workers must be >= 1")
    if not isinstance(g["split_seed"], int):
        raise ConfigError("/generate/split_seed must be an integer")
    lm = cfg["lm"]
    if not (lm["lambda0"] > 0 and int(lm["max_iter"]) >= 1 and lm["rel_tol"] > 0):
        raise ConfigError("/lm values must be positive")
    try:
        pipeline_params(cfg)
    except DocGTError as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"bad parameter block: {exc}") from exc


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# page registry ---------------------------------------------------------------


def read_page_manifest(path) -> tuple[Path, dict[str, dict], list[dict]]:
    """Pages (``doc_id -> {"image", "layer"}``) and captures listed by a corpus manifest.

    A bare ``{doc_id: {"image", "layer"}}`` object is accepted as well. Paths
    are relative to the manifest's directory.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    pages = data.get("pages", data) if isinstance(data, dict) else None
    if not isinstance(pages, dict):
        raise ConfigError(f"{path}: 'pages' must map doc ids to page entries")
    for doc_id, entry in pages.items():
        if not isinstance(entry, dict) or "image" not in entry:
            raise ConfigError(f"{path}: page {doc_id!r} needs an 'image' path")
    captures = data.get("captures", []) if "pages" in data else []
    return path.parent, pages, captures


class PageRegistry(dict):
    """Lazily loads page images and text layers on first use."""

    def __init__(self, root: Path, pages: dict[str, dict]):
        super().__init__()
        self.root = root
        self.pages = pages

    def get(self, doc_id, default=None):
        if doc_id not in self:
            entry = self.pages.get(doc_id)
            if entry is None or "layer" not in entry:
                return default
            img = load_image(self.root / entry["image"])
            layer = parse_text_layer(self.root / entry["layer"])
            self[doc_id] = PageEntry(img, layer)
        return super().get(doc_id, default)


# commands ----------------------------------------------------------------------


def cmd_synth(cfg: dict, out_dir: Path) -> int:
    s = cfg["synth"]
    regime = REGIMES[s["regime"]]
    out_dir = Path(out_dir)
    (out_dir / "pages").mkdir(parents=True, exist_ok=True)
    (out_dir / "captures").mkdir(parents=True, exist_ok=True)
    pages, captures = {}, []
    seed = cfg["seed"]
    for i in range(s["pages"]):
        doc_id = f"page-{i:05d}"
        spec = SynthPageSpec(
            seed=seed * 1_000_003 + i,
            words_per_page=s["words_per_page"],
            font_size_pt=tuple(s["font_size_pt"]),
            page_size=tuple(s["page_size"]),
            dpi=s["dpi"],
            page_id=doc_id,
        )
        img, layer = render_page(spec)
        save_image(out_dir / "pages" / f"{doc_id}.png", img)
        layer.save(out_dir / "pages" / f"{doc_id}.json")
        pages[doc_id] = {"image": f"pages/{doc_id}.png", "layer": f"pages/{doc_id}.json"}
        for j in range(s["captures_per_page"]):
            cap_id = f"cap-{i:05d}-{j:02d}"
            cspec = regime((seed * 1_000_003 + i) * 101 + j, tuple(s["crop_range"]))
            cap = simulate_capture(img, cspec)
            save_image(out_dir / "captures" / f"{cap_id}.png", cap.image)
            meta = {
                "capture_id": cap_id,
                "doc_id": doc_id,
                "homography": [float(v) for v in cap.homography.ravel()],
                "spec": cspec.to_dict(),
                "region": [float(v) for v in cap.region],
            }
            _write_json(out_dir / "captures" / f"{cap_id}.json", meta)
            captures.append({"id": cap_id, "doc_id": doc_id, "image": f"captures/{cap_id}.png", "meta": f"captures/{cap_id}.json"})
        log.info("rendered %s (%d words)", doc_id, len(layer.words))
    _write_json(out_dir / "manifest.json", {"tool_version": __version__, "config": cfg, "pages": pages, "captures": captures})
    print(f"wrote {len(pages)} pages and {len(captures)} captures to {out_dir}")
    return EXIT_OK


def cmd_index(cfg: dict, manifest: Path, store_path: Path, fit_edges: bool = False) -> int:
    root, pages, _ = read_page_manifest(manifest)
    if not pages:
        raise ConfigError(f"{manifest} lists no pages")
    params = llah_params(cfg)
    images, failed = {}, []
    for doc_id in sorted(pages):
        try:
            images[doc_id] = load_image(root / pages[doc_id]["image"])
        except (OSError, DocGTError) as exc:
            failed.append((doc_id, str(exc)))
    if fit_edges and images:
        samples = [invariant_values(feature_points(img, params.blur_sigma), params)[:, :, 0, :].ravel() for img in images.values()]
        params = with_edges(params, fit_bin_edges(np.concatenate(samples), params.q_levels))
        log.info("fitted bin edges %s", params.bin_edges)
    store = LlahStore(params)
    for doc_id, img in images.items():
        try:
            n = index_page(img, doc_id, params, store)
            log.info("indexed %s: %d entries", doc_id, n)
        except InsufficientPointsError as exc:
            failed.append((doc_id, str(exc)))
    for doc_id, msg in failed:
        print(f"failed: {doc_id}: {msg}", file=sys.stderr)
    if not store.doc_ids:
        print("no page could be indexed", file=sys.stderr)
        return EXIT_FAILURE
    store_path = Path(store_path)
    store_path.parent.mkdir(parents=True, exist_ok=True)
    store.save(store_path)
    stats = store.stats()
    stats["params"] = params.to_dict()
    print(json.dumps(stats, indent=1, sort_keys=True))
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_retrieve(cfg: dict, store_path: Path, image: Path) -> int:
    store = LlahStore.load(store_path)
    try:
        res = retrieve(load_image(image), store.params, store)
    except DocGTError as exc:
        print(f"no match: {exc}")
        return EXIT_FAILURE
    print(
        json.dumps(
            {
                "doc_id": res.doc_id,
                "score": res.score,
                "correspondences": len(res.src),
                "region": [[float(x), float(y)] for x, y in res.region],
                "scores": dict(sorted(res.scores.items(), key=lambda kv: -kv[1])[:5]),
            },
            indent=1,
        )
    )
    return EXIT_OK


_WORKER: dict = {}


def _worker_init(store_path, manifest, params):
    root, pages, _ = read_page_manifest(manifest)
    _WORKER.update(store=LlahStore.load(store_path), pages=PageRegistry(root, pages), params=params)


def _worker_run(item):
    cap_id, path = item
    return process_capture(load_image(path), cap_id, _WORKER["store"], _WORKER["pages"], _WORKER["params"])


def cmd_generate(cfg: dict, store_path: Path, manifest: Path, out_dir: Path, captures: list[Path] | None = None, overwrite: bool = False) -> int:
    params = pipeline_params(cfg)
    store = LlahStore.load(store_path)
    if store.params != params.llah:
        log.info("using the store's LLAH parameters")
        params = replace(params, llah=store.params)
    root, pages, listed = read_page_manifest(manifest)
    if captures:
        items = [(Path(c).stem, Path(c)) for c in captures]
    else:
        items = [(c["id"], root / c["image"]) for c in listed]
    if not items:
        raise ConfigError("no captures given and none listed in the manifest")
    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    effective = copy.deepcopy(cfg)
    effective["llah"] = params.llah.to_dict()
    writer = DatasetWriter(out_dir, params={"config": effective}, split_seed=cfg["generate"]["split_seed"], overwrite=overwrite, created=created)
    log.info("effective config: %s", json.dumps(effective, sort_keys=True))
    logs, ok = [], 0
    t0 = time.perf_counter()
    workers = cfg["generate"]["workers"]
    if workers > 1:
        pool = ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(store_path, manifest, params))
        results = pool.map(_worker_run, items)
    else:
        registry = PageRegistry(root, pages)
        results = (process_capture(load_image(p), cid, store, registry, params) for cid, p in items)
    try:
        for res in results:
            for rec in res.records:
                writer.add(rec)
            logs.append(res.log.to_dict())
            ok += res.log.status == "ok"
            print(
                f"{res.log.capture_id}: {res.log.status} doc={res.log.doc_id} score={res.log.score} "
                f"words={res.log.words} chars={res.log.chars} border={res.log.border} skipped={res.log.skipped}"
            )
    finally:
        if workers > 1:
            pool.shutdown()
    with open(Path(out_dir) / "capture_log.jsonl", "w", encoding="utf-8") as fh:
        for entry in logs:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    _write_json(Path(out_dir) / "config.json", effective)
    manifest_obj = writer.close()
    elapsed = time.perf_counter() - t0
    words = sum(c["words"] for c in manifest_obj.counts.values())
    chars = sum(c["chars"] for c in manifest_obj.counts.values())
    print(f"{ok}/{len(items)} captures processed, {words} word and {chars} char records in {elapsed:.1f} s")
    return EXIT_OK if ok > 0 else EXIT_FAILURE


def cmd_eval(cfg: dict, dataset_dir: Path, hyp_file: Path, kind: str = "words", split: str | None = None, json_out: Path | None = None) -> int:
    report = benchmark(dataset_dir, hyp_file, kind=kind, split=split)
    print(report.table())
    text = report.dumps()
    if json_out is not None:
        Path(json_out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


# argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="docgt", description="Generate labelled word and character images from document photos.")
    parser.add_argument("--version", action="version", version=f"docgt {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("synth", help="render a synthetic corpus of pages, text layers and captures")
    common(p)
    p.add_argument("--out", type=Path, help="corpus directory (default: paths.corpus)")
    p.add_argument("--pages", type=int, help="number of pages")
    p.add_argument("--captures-per-page", type=int, help="captures per page")
    p.add_argument("--regime", choices=sorted(REGIMES), help="capture distortion regime")

    p = sub.add_parser("index", help="build the LLAH store from a page manifest")
    common(p)
    p.add_argument("--manifest", type=Path, help="page manifest (default: <paths.corpus>/manifest.json)")
    p.add_argument("--store", type=Path, help="output store file (default: paths.store)")
    p.add_argument("--fit-edges", action="store_true", help="refit bin edges on these pages before indexing")

    p = sub.add_parser("retrieve", help="retrieve the page for one image (debugging)")
    common(p)
    p.add_argument("--store", type=Path, help="store file (default: paths.store)")
    p.add_argument("image", type=Path)

    p = sub.add_parser("generate", help="run the full pipeline and write a dataset")
    common(p)
    p.add_argument("--store", type=Path, help="store file (default: paths.store)")
    p.add_argument("--manifest", type=Path, help="page manifest (default: <paths.corpus>/manifest.json)")
    p.add_argument("--out", type=Path, help="dataset directory (default: paths.dataset)")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--no-chars", action="store_true", help="skip character records")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset directory")
    p.add_argument("captures", nargs="*", type=Path, help="capture images (default: those in the manifest)")

    p = sub.add_parser("eval", help="score OCR hypotheses against a dataset")
    common(p)
    p.add_argument("--dataset", type=Path, help="dataset directory (default: paths.dataset)")
    p.add_argument("--kind", choices=("words", "chars"), default="words")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--json", type=Path, dest="json_out", help="write the JSON report here instead of stdout")
    p.add_argument("hyp", type=Path, help="TSV of record_id<TAB>hypothesis")
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    synth = {k: v for k, v in (("pages", getattr(args, "pages", None)), ("captures_per_page", getattr(args, "captures_per_page", None)), ("regime", getattr(args, "regime", None))) if v is not None}
    if synth:
        o["synth"] = synth
    gen = {}
    if getattr(args, "workers", None) is not None:
        gen["workers"] = args.workers
    if getattr(args, "no_chars", False):
        gen["chars"] = False
    if gen:
        o["generate"] = gen
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)], format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        paths = cfg["paths"]
        corpus_manifest = Path(paths["corpus"]) / "manifest.json"
        if args.command == "synth":
            return cmd_synth(cfg, args.out or Path(paths["corpus"]))
        if args.command == "index":
            return cmd_index(cfg, args.manifest or corpus_manifest, args.store or Path(paths["store"]), args.fit_edges)
        if args.command == "retrieve":
            return cmd_retrieve(cfg, args.store or Path(paths["store"]), args.image)
        if args.command == "generate":
            return cmd_generate(
                cfg,
                args.store or Path(paths["store"]),
                args.manifest or corpus_manifest,
                args.out or Path(paths["dataset"]),
                args.captures,
                args.overwrite,
            )
        if args.command == "eval":
            return cmd_eval(cfg, args.dataset or Path(paths["dataset"]), args.hyp, args.kind, args.split, args.json_out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileExistsError as exc:
        print(f"error: {exc} (use --overwrite)", file=sys.stderr)
        return EXIT_USAGE
    except (DocGTError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_USAGE  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

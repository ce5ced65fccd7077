"""Locally Likely Arrangement Hashing: descriptors, hash store, and retrieval by voting.

Feature points are centroids of word blobs. Around every point, the ``n``
nearest neighbours are ordered by angle; each ``m``-subset yields a vector of
``C(m, 4)`` discretised area ratios. The starting point and direction of the
cyclic order are fixed by taking the lexicographically smallest vector over all
``2m`` rotations and reflections, so the descriptor is unchanged by any
non-degenerate affine map of the neighbourhood.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import combinations
from math import comb

import numpy as np

from .errors import (
    DegenerateQuadError,
    EmptyDatabaseError,
    InsufficientPointsError,
    InvalidInputError,
    InvalidParameterError,
    NoMatchError,
)
from .geometry import convex_hull
from .imaging import binarize_otsu, component_stats, gaussian_blur, label_components

log = logging.getLogger(__name__)

MAGIC = b"LLAH"
FORMAT_VERSION = 1
DEGENERATE_AREA = 1e-9

# Equal-frequency quantiles of area ratios on the default synthetic corpus
# (40 pages, seeds 0-39, n=8, m=7, 16 levels, first cyclic ordering).
DEFAULT_BIN_EDGES = (
    0.09626, 0.21676, 0.308074, 0.390237, 0.486264, 0.539985, 0.662484, 0.808336,
    0.958003, 1.015587, 1.178678, 1.479888, 1.965408, 2.823402, 5.724779,
)


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True)
class LlahParams:
    n: int = 8
    m: int = 7
    q_levels: int = 16
    bin_edges: tuple[float, ...] = DEFAULT_BIN_EDGES
    hash_size: int = 2**24 + 43
    k_base: int | None = None
    blur_sigma: float = 2.0
    min_votes: int = 10

    def __post_init__(self):
        if not 4 <= self.m <= self.n:
            raise InvalidParameterError(f"need 4 <= m <= n, got n={self.n}, m={self.m}")
        if self.q_levels < 2:
            raise InvalidParameterError("q_levels must be >= 2")
        if len(self.bin_edges) != self.q_levels - 1:
            raise InvalidParameterError(f"expected {self.q_levels - 1} bin edges, got {len(self.bin_edges)}")
        if any(b <= a for a, b in zip(self.bin_edges, self.bin_edges[1:])):
            raise InvalidParameterError("bin edges must be strictly ascending")
        if not _is_prime(self.hash_size):
            raise InvalidParameterError(f"hash_size {self.hash_size} is not prime")
        if self.blur_sigma <= 0 or self.min_votes < 1:
            raise InvalidParameterError("blur_sigma must be > 0 and min_votes >= 1")
        if self.q_levels > 256:
            raise InvalidParameterError("q_levels above 256 are not supported")
        if self.k_base is None:
            object.__setattr__(self, "k_base", self.q_levels)
        if self.k_base < 2:
            raise InvalidParameterError("k_base must be >= 2")

    @property
    def base(self) -> int:
        return self.k_base

    @property
    def dims(self) -> int:
        return comb(self.m, 4)

    @property
    def subsets(self) -> int:
        return comb(self.n, self.m)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "q_levels": self.q_levels,
            "bin_edges": list(self.bin_edges),
            "hash_size": self.hash_size,
            "k_base": self.base,
            "blur_sigma": self.blur_sigma,
            "min_votes": self.min_votes,
        }


def triangle_area(p1, p2, p3) -> float:
    return 0.5 * abs((p2[0] - p1[0]) * (p3[1] - p1[1]) - (p2[1] - p1[1]) * (p3[0] - p1[0]))


def affine_invariant(p1, p2, p3, p4) -> float:
    """Area ratio ``|p1 p2 p3| / |p1 p3 p4|`` of two triangles sharing the diagonal p1-p3."""
    den = triangle_area(p1, p3, p4)
    if den <= DEGENERATE_AREA:
        raise DegenerateQuadError("triangle (p1, p3, p4) is degenerate")
    return triangle_area(p1, p2, p3) / den


def discretize(value, bin_edges) -> int | np.ndarray:
    """Number of edges ``<= value`` (bins are closed on the left)."""
    out = np.searchsorted(np.asarray(bin_edges, dtype=np.float64), value, side="right")
    return int(out) if np.ndim(out) == 0 else out


def hash_index(bins, params: LlahParams) -> int:
    """``sum(bins[i] * k**i) mod hash_size`` by Horner's rule."""
    h = 0
    k = params.base
    for b in reversed([int(v) for v in bins]):
        h = (h * k + b) % params.hash_size
    return h


def hash_indices(bins: np.ndarray, params: LlahParams) -> np.ndarray:
    """Vectorised :func:`hash_index` over the rows of ``bins``."""
    bins = np.asarray(bins, dtype=np.int64)
    h = np.zeros(bins.shape[0], dtype=np.int64)
    for i in range(bins.shape[1] - 1, -1, -1):
        h = (h * params.base + bins[:, i]) % params.hash_size
    return h


@lru_cache(maxsize=None)
def _tables(n: int, m: int):
    """Index tables mapping (subset, ordering, 4-combo) onto neighbour triangles.

    Returns ``(num_idx, den_idx, tags)``: arrays of shape ``(C(n,m), 2m, C(m,4))``
    indexing the ``C(n,3)`` triangles of the angularly sorted neighbours, and
    the ``(start, reversed)`` tag of each ordering.
    """
    tri_index = {t: i for i, t in enumerate(combinations(range(n), 3))}

    def tri(a, b, c):
        return tri_index[tuple(sorted((a, b, c)))]

    subsets = list(combinations(range(n), m))
    quads = list(combinations(range(m), 4))
    orderings = [(s, False) for s in range(m)] + [(s, True) for s in range(m)]
    num = np.empty((len(subsets), len(orderings), len(quads)), dtype=np.int64)
    den = np.empty_like(num)
    for si, sub in enumerate(subsets):
        for oi, (start, rev) in enumerate(orderings):
            seq = list(sub[start:] + sub[:start])
            if rev:
                seq = [seq[0]] + seq[1:][::-1]
            for qi, (a, b, c, d) in enumerate(quads):
                p1, p2, p3, p4 = seq[a], seq[b], seq[c], seq[d]
                num[si, oi, qi] = tri(p1, p2, p3)
                den[si, oi, qi] = tri(p1, p3, p4)
    return num, den, orderings


def _neighbours(points: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` nearest points of every point (ties by index), each sorted by angle."""
    P = len(points)
    out = np.empty((P, n), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(P, 1))
    for s in range(0, P, chunk):
        block = points[s : s + chunk]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(len(block)), np.arange(s, s + len(block))] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :n]
        out[s : s + chunk] = order
    vec = points[out] - points[:, None, :]
    ang = np.arctan2(vec[..., 1], vec[..., 0])
    by_angle = np.argsort(ang, axis=1, kind="stable")
    return np.take_along_axis(out, by_angle, axis=1)


def _triangle_areas(points: np.ndarray, nbrs: np.ndarray) -> np.ndarray:
    n = nbrs.shape[1]
    tris = np.array(list(combinations(range(n), 3)), dtype=np.int64)
    a = points[nbrs[:, tris[:, 0]]]
    b = points[nbrs[:, tris[:, 1]]]
    c = points[nbrs[:, tris[:, 2]]]
    return 0.5 * np.abs((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def invariant_values(points, params: LlahParams) -> np.ndarray:
    """Raw area ratios for every point, subset, ordering and 4-combination.

    Shape ``(P, C(n,m), 2m, C(m,4))``; degenerate denominators give ``inf``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < params.n + 1:
        raise InsufficientPointsError(f"need more than n={params.n} points, got {len(points)}")
    nbrs = _neighbours(points, params.n)
    areas = _triangle_areas(points, nbrs)
    num_idx, den_idx, _ = _tables(params.n, params.m)
    num = areas[:, num_idx]
    den = areas[:, den_idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = num / den
    vals[den <= DEGENERATE_AREA] = np.inf
    return vals


def _lexmin_rows(bins: np.ndarray) -> np.ndarray:
    """Index of the lexicographically smallest row along axis -2 of ``(..., R, C)``."""
    cand = np.ones(bins.shape[:-1], dtype=bool)
    for c in range(bins.shape[-1]):
        col = np.where(cand, bins[..., c], np.iinfo(np.int16).max)
        cand &= col == col.min(axis=-1, keepdims=True)
    return np.argmax(cand, axis=-1)


def descriptors(points, params: LlahParams) -> tuple[np.ndarray, np.ndarray]:
    """Canonical descriptors of every point.

    Returns ``(bins, tags)``: ``bins`` is ``(P, C(n,m), C(m,4))`` uint8 and
    ``tags`` ``(P, C(n,m))`` the index of the chosen ordering.
    """
    vals = invariant_values(points, params)
    allbins = discretize(vals, params.bin_edges).astype(np.int16)
    tags = _lexmin_rows(allbins)
    bins = np.take_along_axis(allbins, tags[..., None, None], axis=2)[:, :, 0, :]
    return bins.astype(np.uint8), tags


def point_descriptors(pt_index: int, points, params: LlahParams) -> list[tuple[tuple[int, ...], tuple[int, bool]]]:
    """Descriptors of a single point as ``(bins, (start, reversed))`` pairs, one per m-subset."""
    bins, tags = descriptors(points, params)
    _, _, orderings = _tables(params.n, params.m)
    return [(tuple(int(v) for v in bins[pt_index, s]), orderings[int(tags[pt_index, s])]) for s in range(bins.shape[1])]


def fit_bin_edges(values, q_levels: int) -> tuple[float, ...]:
    """Equal-frequency edges from a sample of invariant values (infinities ignored)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size < q_levels:
        raise InvalidInputError("not enough finite samples to fit bin edges")
    edges = np.quantile(v, np.arange(1, q_levels) / q_levels)
    edges = np.maximum.accumulate(edges)
    for i in range(1, len(edges)):
        if edges[i] <= edges[i - 1]:
            edges[i] = np.nextafter(edges[i - 1], np.inf)
    return tuple(float(round(e, 6)) if round(e, 6) > 0 else float(e) for e in edges)


def feature_points(img, sigma: float = 2.0) -> np.ndarray:
    """Centroids ``(x, y)`` of the blobs of the blurred, binarised image (raster order)."""
    labels, count = label_components(binarize_otsu(gaussian_blur(img, sigma)))
    _, centroids, _ = component_stats(labels, count)
    return centroids


@dataclass
class _DocEntries:
    points: np.ndarray
    bins: np.ndarray  # (P * S, D) uint8
    hashes: np.ndarray  # (P * S,) int64


@dataclass
class RetrievalResult:
    doc_id: str
    score: int
    src: np.ndarray  # query points, (K, 2)
    dst: np.ndarray  # page points, (K, 2)
    votes: np.ndarray  # supporting hits per correspondence
    region: np.ndarray
    scores: dict = field(default_factory=dict)

    @property
    def pairs(self) -> list[tuple[tuple[float, float], tuple[float, float]]]:
        return [((float(a), float(b)), (float(c), float(d))) for (a, b), (c, d) in zip(self.src, self.dst)]


class LlahStore:
    """Hash table of page descriptors.

    Indexing is single-writer; once built the store may be queried from any
    number of readers. Documents keep insertion order; re-indexing a document
    replaces its entries in place.
    """

    def __init__(self, params: LlahParams | None = None):
        self.params = params or LlahParams()
        self._docs: dict[str, _DocEntries] = {}
        self._compiled = None

    def __len__(self) -> int:
        return sum(len(d.hashes) for d in self._docs.values())

    @property
    def doc_ids(self) -> list[str]:
        return list(self._docs)

    def doc_points(self, doc_id: str) -> np.ndarray:
        return self._docs[doc_id].points

    def add_points(self, doc_id: str, points) -> int:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        bins, _ = descriptors(points, self.params)
        flat = bins.reshape(-1, bins.shape[-1])
        self._docs[doc_id] = _DocEntries(points, flat, hash_indices(flat, self.params))
        self._compiled = None
        return len(flat)

    def _compile(self):
        if self._compiled is None:
            docs = list(self._docs.values())
            S = self.params.subsets
            hashes = np.concatenate([d.hashes for d in docs]) if docs else np.zeros(0, np.int64)
            bins = np.concatenate([d.bins for d in docs]) if docs else np.zeros((0, self.params.dims), np.uint8)
            doc_idx = np.concatenate([np.full(len(d.hashes), i, np.int64) for i, d in enumerate(docs)]) if docs else np.zeros(0, np.int64)
            pt_idx = np.concatenate([np.arange(len(d.hashes)) // S for d in docs]) if docs else np.zeros(0, np.int64)
            order = np.lexsort((pt_idx, doc_idx, hashes))
            self._compiled = (hashes[order], doc_idx[order], pt_idx[order], bins[order])
        return self._compiled

    def stats(self) -> dict:
        hashes, _, _, _ = self._compile()
        if len(hashes) == 0:
            return {"entries": 0, "documents": 0, "buckets": 0, "load_factor": 0.0, "mean_bucket": 0.0, "max_bucket": 0}
        _, counts = np.unique(hashes, return_counts=True)
        return {
            "entries": int(len(hashes)),
            "documents": len(self._docs),
            "buckets": int(len(counts)),
            "load_factor": float(len(hashes) / self.params.hash_size),
            "mean_bucket": float(counts.mean()),
            "max_bucket": int(counts.max()),
        }

    def lookup(self, bins: np.ndarray):
        """Exact-match lookup of descriptor rows; returns ``(query_row, doc_idx, point_idx)`` arrays."""
        hashes, doc_idx, pt_idx, sbins = self._compile()
        q = hash_indices(bins, self.params)
        lo = np.searchsorted(hashes, q, side="left")
        hi = np.searchsorted(hashes, q, side="right")
        n = hi - lo
        if n.sum() == 0:
            empty = np.zeros(0, np.int64)
            return empty, empty, empty
        rows = np.repeat(np.arange(len(q)), n)
        starts = np.repeat(lo - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
        cand = starts + np.arange(n.sum())
        ok = (sbins[cand] == bins[rows]).all(axis=1)
        return rows[ok], doc_idx[cand[ok]], pt_idx[cand[ok]]

    # persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        p = self.params
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<H", FORMAT_VERSION))
        buf.write(struct.pack("<IIIIIdI", p.n, p.m, p.q_levels, p.hash_size, p.base, p.blur_sigma, p.min_votes))
        buf.write(struct.pack(f"<{len(p.bin_edges)}d", *p.bin_edges))
        buf.write(struct.pack("<I", len(self._docs)))
        for doc_id, d in self._docs.items():
            name = doc_id.encode("utf-8")
            buf.write(struct.pack("<I", len(name)))
            buf.write(name)
            buf.write(struct.pack("<I", len(d.points)))
            buf.write(d.points.astype("<f8").tobytes())
        hashes, doc_idx, pt_idx, bins = self._compile()
        buf.write(struct.pack("<I", len(hashes)))
        buf.write(struct.pack("<I", bins.shape[1] if len(bins) else p.dims))
        buf.write(hashes.astype("<u4").tobytes())
        buf.write(doc_idx.astype("<u4").tobytes())
        buf.write(pt_idx.astype("<u4").tobytes())
        buf.write(np.ascontiguousarray(bins, dtype=np.uint8).tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "LlahStore":
        view = memoryview(data)
        pos = 0

        def take(fmt):
            nonlocal pos
            size = struct.calcsize(fmt)
            out = struct.unpack_from(fmt, view, pos)
            pos += size
            return out

        if bytes(view[:4]) != MAGIC:
            raise InvalidInputError("not an LLAH store (bad magic)")
        pos = 4
        (version,) = take("<H")
        if version != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported store version {version}")
        n, m, q, hs, kb, sigma, min_votes = take("<IIIIIdI")
        edges = take(f"<{q - 1}d")
        params = LlahParams(n=n, m=m, q_levels=q, bin_edges=tuple(edges), hash_size=hs, k_base=kb, blur_sigma=sigma, min_votes=min_votes)
        store = cls(params)
        (ndocs,) = take("<I")
        names, pts = [], []
        for _ in range(ndocs):
            (ln,) = take("<I")
            names.append(bytes(view[pos : pos + ln]).decode("utf-8"))
            pos += ln
            (npts,) = take("<I")
            pts.append(np.frombuffer(view[pos : pos + 16 * npts], dtype="<f8").reshape(npts, 2).copy())
            pos += 16 * npts
        (nent,) = take("<I")
        (dims,) = take("<I")

        def arr(dtype, count, itemsize):
            nonlocal pos
            a = np.frombuffer(view[pos : pos + itemsize * count], dtype=dtype).copy()
            pos += itemsize * count
            return a

        hashes = arr("<u4", nent, 4).astype(np.int64)
        doc_idx = arr("<u4", nent, 4).astype(np.int64)
        pt_idx = arr("<u4", nent, 4).astype(np.int64)
        bins = arr(np.uint8, nent * dims, 1).reshape(nent, dims)
        for i, (name, p) in enumerate(zip(names, pts)):
            sel = doc_idx == i
            # restore per-doc entry order (point-major, subset-minor) from the sorted blocks
            d_bins = bins[sel]
            d_pts = pt_idx[sel]
            d_hash = hashes[sel]
            order = np.lexsort((np.arange(len(d_pts)), d_pts))
            store._docs[name] = _DocEntries(p, d_bins[order], d_hash[order])
        store._compiled = None
        return store

    @classmethod
    def load(cls, path) -> "LlahStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def index_page(page_image, doc_id: str, params: LlahParams | None, store: LlahStore) -> int:
    """Extract feature points from a page and add all their descriptors to ``store``."""
    params = params or store.params
    if params != store.params:
        raise InvalidParameterError("params differ from the store's params")
    pts = feature_points(page_image, params.blur_sigma)
    if len(pts) < params.n + 1:
        raise InsufficientPointsError(f"page {doc_id!r} has {len(pts)} feature points, need more than {params.n}")
    return store.add_points(doc_id, pts)


def retrieve_points(points, store: LlahStore, params: LlahParams | None = None) -> RetrievalResult:
    """Vote over the store with query feature points and return the best document."""
    params = params or store.params
    if len(store) == 0:
        raise EmptyDatabaseError("the store holds no documents")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) < params.n + 1:
        raise NoMatchError(f"query has only {len(points)} feature points", None, 0)
    bins, _ = descriptors(points, params)
    S = bins.shape[1]
    rows, docs, ppts = store.lookup(bins.reshape(-1, bins.shape[-1]))
    qpts = rows // S
    doc_ids = store.doc_ids
    if len(qpts) == 0:
        raise NoMatchError("no descriptor matched any document", None, 0)
    # score: number of distinct query points with at least one verified hit
    key = np.unique(np.stack([docs, qpts], axis=1), axis=0)
    scores = np.bincount(key[:, 0], minlength=len(doc_ids))
    best = int(np.argmax(scores))
    score = int(scores[best])
    score_map = {doc_ids[i]: int(s) for i, s in enumerate(scores) if s > 0}
    if score < params.min_votes:
        raise NoMatchError(f"best document {doc_ids[best]!r} has {score} votes < {params.min_votes}", doc_ids[best], score)
    sel = docs == best
    pairs, counts = np.unique(np.stack([qpts[sel], ppts[sel]], axis=1), axis=0, return_counts=True)
    # majority per query point, then per page point
    order = np.lexsort((pairs[:, 1], -counts, pairs[:, 0]))
    pairs, counts = pairs[order], counts[order]
    first_q = np.concatenate([[True], pairs[1:, 0] != pairs[:-1, 0]])
    pairs, counts = pairs[first_q], counts[first_q]
    order = np.lexsort((pairs[:, 0], -counts, pairs[:, 1]))
    pairs, counts = pairs[order], counts[order]
    first_p = np.concatenate([[True], pairs[1:, 1] != pairs[:-1, 1]])
    pairs, counts = pairs[first_p], counts[first_p]
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs, counts = pairs[order], counts[order]
    page_pts = store.doc_points(doc_ids[best])
    src = points[pairs[:, 0]]
    dst = page_pts[pairs[:, 1]]
    region = convex_hull(dst)
    return RetrievalResult(doc_ids[best], score, src, dst, counts, region, score_map)


def retrieve(query_image, params: LlahParams | None, store: LlahStore) -> RetrievalResult:
    """Retrieve the indexed page that best explains a captured image."""
    params = params or store.params
    if len(store) == 0:
        raise EmptyDatabaseError("the store holds no documents")
    return retrieve_points(feature_points(query_image, params.blur_sigma), store, params)


def with_edges(params: LlahParams, edges) -> LlahParams:
    q = len(edges) + 1
    # a base that tracked the old level count keeps tracking the new one
    k = q if params.k_base == params.q_levels else params.k_base
    return replace(params, bin_edges=tuple(edges), q_levels=q, k_base=k)

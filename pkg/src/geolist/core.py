"""Domain types and dataset containers.

Objects and queries are stored column-wise (id array, location matrix,
embedding matrix) because every hot path is vectorised over rows.  The
per-record types (:class:`GeoObject`, :class:`SpatialQuery`) are views
produced on demand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

log = logging.getLogger(__name__)

EXACT_DIAMETER_LIMIT = 50_000
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class GeoPoint(NamedTuple):
    lat: float
    lon: float


@dataclass(frozen=True)
class GeoObject:
    id: int
    loc: GeoPoint
    emb: np.ndarray


@dataclass(frozen=True)
class SpatialQuery:
    id: int
    loc: GeoPoint
    emb: np.ndarray
    k: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"query {self.id}: k must be >= 1, got {self.k}")


class Bounds(NamedTuple):
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def contains(self, locs: np.ndarray) -> bool:
        locs = np.atleast_2d(locs)
        return bool(
            np.all(locs[:, 0] >= self.lat_min) and np.all(locs[:, 0] <= self.lat_max)
            and np.all(locs[:, 1] >= self.lon_min) and np.all(locs[:, 1] <= self.lon_max)
        )


@dataclass
class GeoTable:
    """Column store for a set of objects or queries.

    ``ids`` (n,), ``locs`` (n, 2) as (lat, lon), ``embs`` (n, d).  Queries
    additionally carry ``ks``.
    """

    ids: np.ndarray
    locs: np.ndarray
    embs: np.ndarray
    ks: np.ndarray | None = None
    _row: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.locs = np.ascontiguousarray(self.locs, dtype=np.float64).reshape(-1, 2)
        self.embs = np.ascontiguousarray(self.embs, dtype=np.float64)
        if self.embs.ndim != 2:
            raise DatasetError("embeddings must be a 2-d array")
        n = len(self.ids)
        if self.locs.shape[0] != n or self.embs.shape[0] != n:
            raise DatasetError(
                f"row-count mismatch: {n} ids, {self.locs.shape[0]} locations, "
                f"{self.embs.shape[0]} embeddings")
        if n and self.embs.shape[1] < 1:
            raise DatasetError("embedding dimension must be >= 1")
        if not np.all(np.isfinite(self.embs)) or not np.all(np.isfinite(self.locs)):
            raise DatasetError("non-finite values in locations or embeddings")
        if np.any(self.ids < 0):
            raise DatasetError("ids must be non-negative")
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != n:
            raise DatasetError("duplicate ids")
        if self.ks is not None:
            self.ks = np.asarray(self.ks, dtype=np.int64)
            if np.any(self.ks < 1):
                raise DatasetError("query k must be >= 1")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.embs.shape[1]

    def row(self, id_: int) -> int:
        try:
            return self._row[int(id_)]
        except KeyError:
            raise KeyError(f"unknown id {id_}") from None

    def rows(self, ids: Iterable[int]) -> np.ndarray:
        return np.fromiter((self.row(i) for i in ids), dtype=np.int64)

    def __contains__(self, id_) -> bool:
        return int(id_) in self._row

    def object(self, id_: int) -> GeoObject:
        r = self.row(id_)
        return GeoObject(int(self.ids[r]), GeoPoint(*self.locs[r]), self.embs[r])

    def query(self, id_: int) -> SpatialQuery:
        r = self.row(id_)
        k = int(self.ks[r]) if self.ks is not None else 10
        return SpatialQuery(int(self.ids[r]), GeoPoint(*self.locs[r]), self.embs[r], k)

    def __iter__(self) -> Iterator:
        get = self.query if self.ks is not None else self.object
        for i in self.ids:
            yield get(i)

    def subset(self, ids: Iterable[int]) -> "GeoTable":
        r = self.rows(ids)
        return GeoTable(self.ids[r], self.locs[r], self.embs[r],
                        None if self.ks is None else self.ks[r])

    @classmethod
    def from_records(cls, records: Iterable) -> "GeoTable":
        records = list(records)
        ids = [r.id for r in records]
        locs = np.array([tuple(r.loc) for r in records], dtype=np.float64).reshape(-1, 2)
        embs = np.array([np.asarray(r.emb, dtype=np.float64) for r in records])
        ks = [r.k for r in records] if records and isinstance(records[0], SpatialQuery) else None
        return cls(np.array(ids), locs, embs, ks)


class GroundTruthSet:
    """Positive (query, object) records plus a per-query split label."""

    def __init__(self, records: Iterable[tuple[int, int]], split_of: dict[int, str]):
        self.positives: dict[int, set[int]] = {}
        for q, o in records:
            self.positives.setdefault(int(q), set()).add(int(o))
        for q, s in split_of.items():
            if s not in SPLITS:
                raise DatasetError(f"unknown split {s!r} for query {q}")
        self.split_of = {int(q): s for q, s in split_of.items()}

    def __len__(self) -> int:
        return sum(len(v) for v in self.positives.values())

    def __eq__(self, other) -> bool:
        return (isinstance(other, GroundTruthSet) and self.positives == other.positives
                and self.split_of == other.split_of)

    def records(self) -> list[tuple[int, int]]:
        return sorted((q, o) for q, objs in self.positives.items() for o in objs)

    def pos(self, query_id: int) -> set[int]:
        return self.positives.get(int(query_id), set())

    def is_relevant(self, query_id: int, object_id: int) -> bool:
        return int(object_id) in self.pos(query_id)

    def split(self, name: str) -> list[int]:
        return sorted(q for q, s in self.split_of.items() if s == name)


def compute_bounds_and_distmax(locs: np.ndarray) -> tuple[Bounds, float, bool]:
    """Bounding box and Euclidean diameter of a set of (lat, lon) points.

    Returns ``(bounds, dist_max, exact)``.  Above ``EXACT_DIAMETER_LIMIT``
    points the bounding-box diagonal is used instead and ``exact`` is False.
    """
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 2)
    if len(locs) == 0:
        raise DatasetError("empty dataset")
    lo, hi = locs.min(axis=0), locs.max(axis=0)
    bounds = Bounds(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))
    if len(locs) > EXACT_DIAMETER_LIMIT:
        return bounds, float(np.sqrt(np.sum((hi - lo) ** 2))), False
    return bounds, _diameter(locs), True


def _diameter(locs: np.ndarray) -> float:
    # the diameter is attained between convex hull vertices
    pts = np.unique(locs, axis=0)
    if len(pts) > 3:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:  # collinear input
            pass
    best = 0.0
    block = 512
    for s in range(0, len(pts), block):
        a = pts[s:s + block]
        dlat = a[:, 0, None] - pts[None, s:, 0]
        dlon = a[:, 1, None] - pts[None, s:, 1]
        best = max(best, float(np.sqrt((dlat * dlat + dlon * dlon).max())))
    return best


def euclid(a, b) -> np.ndarray:
    """Planar Euclidean distance between (.., 2) location arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dlat = a[..., 0] - b[..., 0]
    dlon = a[..., 1] - b[..., 1]
    return np.sqrt(dlat * dlat + dlon * dlon)


def s_dist(a, b, dist_max: float):
    """Normalised distance, clamped to [0, 1].  Broadcasts over rows."""
    if not dist_max > 0:
        raise DatasetError("degenerate diameter")
    out = np.minimum(euclid(a, b) / dist_max, 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class Dataset:
    objects: GeoTable
    queries: GeoTable
    truth: GroundTruthSet
    bounds: Bounds = None
    dist_max: float = None
    dist_max_exact: bool = True
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.objects) == 0:
            raise DatasetError("empty dataset")
        if len(self.queries) and self.queries.d != self.objects.d:
            raise DatasetError(
                f"embedding dim mismatch: objects d={self.objects.d}, queries d={self.queries.d}")
        if self.bounds is None or self.dist_max is None:
            b, dm, exact = compute_bounds_and_distmax(self.objects.locs)
            if self.bounds is None:
                self.bounds = b
                if len(self.queries):
                    ql = self.queries.locs
                    self.bounds = Bounds(min(b.lat_min, ql[:, 0].min()), max(b.lat_max, ql[:, 0].max()),
                                         min(b.lon_min, ql[:, 1].min()), max(b.lon_max, ql[:, 1].max()))
            if self.dist_max is None:
                self.dist_max, self.dist_max_exact = dm, exact
        for q, objs in self.truth.positives.items():
            if q not in self.queries:
                raise DatasetError(f"record references unknown query {q}")
            missing = [o for o in objs if o not in self.objects]
            if missing:
                raise DatasetError(f"record references unknown object {missing[0]}")

    @property
    def d(self) -> int:
        return self.objects.d

    @property
    def n(self) -> int:
        return len(self.objects)

    def split_queries(self, name: str) -> list[int]:
        return self.truth.split(name)


def rank_top_k(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top-k entries ordered by (score desc, id asc)."""
    scores = np.asarray(scores)
    n = len(scores)
    if k <= 0 or n == 0:
        return np.empty(0, dtype=np.int64)
    if k < n:
        # keep everything tied with the k-th score so the id tie-break is exact
        kth = np.partition(scores, n - k)[n - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], -scores[cand]))
    return cand[order[:k]]

"""Top-k search: exhaustive scan, routed scan over inverted lists, and k-means baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import Bounds, Dataset, GeoTable, SpatialQuery, rank_top_k
from .index import InvertedLists, ObjectStore, _unit_rows, scale_locations
from .relevance import RelevanceModel

log = logging.getLogger(__name__)

IVF_S_ALPHA = 0.9


class ScoredObject(NamedTuple):
    object_id: int
    score: float


@dataclass
class SearchResult:
    items: list[ScoredObject]
    candidates_scanned: int
    routed: list[int] = field(default_factory=list)
    empty_route: bool = False

    @property
    def ids(self) -> list[int]:
        return [it.object_id for it in self.items]


def _top_k(model: RelevanceModel, q_emb, q_loc, ids, embs, locs, k: int, w=None) -> list[ScoredObject]:
    scores = model.score(q_emb, q_loc, embs, locs, w)
    top = rank_top_k(scores, ids, k)
    return [ScoredObject(int(ids[i]), float(scores[i])) for i in top]


def brute_force_search(q: SpatialQuery, objects: GeoTable | Dataset, model: RelevanceModel,
                       k: int | None = None) -> SearchResult:
    """Exact top-k by relevance over every object."""
    if isinstance(objects, Dataset):
        objects = objects.objects
    k = q.k if k is None else k
    q_emb = np.asarray(q.emb, dtype=np.float64)
    items = _top_k(model, q_emb, np.asarray(q.loc, dtype=np.float64),
                   objects.ids, objects.embs, objects.locs, k)
    return SearchResult(items, len(objects))


def list_search(q: SpatialQuery, index: InvertedLists, model: RelevanceModel,
                k: int | None = None, cr: int = 1) -> SearchResult:
    """Route ``q`` to ``cr`` lists and rank the union of their members."""
    k = q.k if k is None else k
    q_emb = np.asarray(q.emb, dtype=np.float64)
    q_loc = np.asarray(q.loc, dtype=np.float64)
    routed = index.route(q_emb, q_loc, cr)
    blocks = [index.packed(c) for c in routed]
    if len(blocks) == 1:
        ids, embs, locs = blocks[0]
    else:
        ids = np.concatenate([b[0] for b in blocks])
        embs = np.concatenate([b[1] for b in blocks])
        locs = np.concatenate([b[2] for b in blocks])
        if index.cr_o > 1:
            ids, first = np.unique(ids, return_index=True)
            embs, locs = embs[first], locs[first]
    if len(ids) == 0:
        return SearchResult([], 0, routed, empty_route=True)
    return SearchResult(_top_k(model, q_emb, q_loc, ids, embs, locs, k), len(ids), routed)


# -- k-means -----------------------------------------------------------------------

@dataclass
class KMeansModel:
    centroids: np.ndarray
    kind: str = "embedding_only"
    alpha: float = 1.0
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0

    def __post_init__(self):
        if self.kind not in ("embedding_only", "spatially_weighted"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def c(self) -> int:
        return len(self.centroids)


def sq_distances(X: np.ndarray, C: np.ndarray, block: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances (n, c), computed from differences."""
    out = np.empty((len(X), len(C)))
    for s in range(0, len(X), block):
        diff = X[s:s + block, None, :] - C[None, :, :]
        out[s:s + block] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def _kmeans_pp(X: np.ndarray, c: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = sq_distances(X, np.array(centers))[:, 0]
    for _ in range(1, c):
        total = d2.sum()
        i = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[i])
        d2 = np.minimum(d2, sq_distances(X, X[i][None, :])[:, 0])
    return np.array(centers)


def kmeans(features, c: int, max_iters: int = 50, seed: int = 0) -> KMeansModel:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is reseeded with the point farthest from its current
    centroid.  Inertia after each assignment step is kept in
    ``inertia_history``.
    """
    X = np.asarray(features, dtype=np.float64)
    if len(X) < c:
        raise ValueError(f"need n >= c, got n={len(X)}, c={c}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, c, rng)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = sq_distances(X, C)
        new = d2.argmin(axis=1)
        point_d2 = d2[np.arange(len(X)), new]
        history.append(float(point_d2.sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=c)
        for j in np.flatnonzero(counts == 0):
            # never take the last member of another cluster
            far = int(np.where(counts[labels] > 1, point_d2, -1.0).argmax())
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            point_d2[far] = 0.0
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        C = sums / counts[:, None]
    return KMeansModel(C, inertia_history=history, n_iter=it)


def ivf_features(embs, locs, bounds: Bounds, kind: str = "embedding_only",
                 alpha: float = IVF_S_ALPHA) -> np.ndarray:
    """Feature map whose squared distance is the alpha-weighted sum of both factors."""
    unit, _ = _unit_rows(np.atleast_2d(np.asarray(embs, dtype=np.float64)))
    if kind == "embedding_only" or alpha == 1.0:
        return unit
    loc = scale_locations(locs, bounds)
    if alpha == 0.0:
        return loc
    return np.hstack([np.sqrt(alpha) * unit, np.sqrt(1.0 - alpha) * loc])


class IVFIndex(InvertedLists):
    def __init__(self, lists, store: ObjectStore, km: KMeansModel, bounds: Bounds, cr_o: int = 1):
        super().__init__(lists, store, cr_o)
        self.km = km
        self.bounds = Bounds(*bounds)

    def features(self, embs, locs) -> np.ndarray:
        return ivf_features(embs, locs, self.bounds, self.km.kind, self.km.alpha)

    def route_rows(self, embs, locs, cr: int = 1) -> np.ndarray:
        d2 = sq_distances(self.features(embs, locs), self.km.centroids)
        return np.argsort(d2, axis=1, kind="stable")[:, :cr]


def ivf_build(dataset: Dataset, c: int, kind: str = "embedding_only", alpha: float = IVF_S_ALPHA,
              cr_o: int = 1, max_iters: int = 50, seed: int = 0) -> tuple[KMeansModel, IVFIndex]:
    objs = dataset.objects
    X = ivf_features(objs.embs, objs.locs, dataset.bounds, kind, alpha)
    km = kmeans(X, c, max_iters, seed)
    km.kind, km.alpha = kind, alpha
    assign = np.argsort(sq_distances(X, km.centroids), axis=1, kind="stable")[:, :cr_o]
    lists: list[list[int]] = [[] for _ in range(c)]
    for oid, cl in zip(objs.ids.tolist(), assign.tolist()):
        for j in cl:
            lists[j].append(oid)
    return km, IVFIndex(lists, ObjectStore(objs), km, dataset.bounds, cr_o)


def ivf_route(q: SpatialQuery, index: IVFIndex, cr: int = 1) -> list[int]:
    return index.route(q.emb, q.loc, cr)

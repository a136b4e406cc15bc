"""Learned cluster index.

A shared MLP classifier maps both queries and objects, represented as
``[unit embedding, lat_hat, lon_hat]``, to a distribution over ``c``
clusters.  It is trained with the MCL objective on ground-truth positives and
pseudo-negatives taken from a rank window of the frozen relevance model.
Objects go to their most probable cluster(s); queries are routed likewise.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from .core import Bounds, Dataset, GeoObject, GeoTable
from .nn import DenseNet, FormatError, Optimizer, read_net, softmax, softmax_backward, write_net
from .relevance import RelevanceModel

log = logging.getLogger(__name__)

MCL_EPS = 1e-7
IDX_MAGIC = b"LISTIDX1"


def _unit_rows(embs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(embs, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    return np.divide(embs, norms, out=np.zeros_like(embs), where=~zero[:, None]), zero


def scale_locations(locs: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Min-max scale (lat, lon) into [0, 1]; a degenerate axis maps to 0.5."""
    locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
    out = np.empty_like(locs)
    for j, (lo, hi) in enumerate(((bounds.lat_min, bounds.lat_max),
                                  (bounds.lon_min, bounds.lon_max))):
        out[:, j] = 0.5 if hi <= lo else np.clip((locs[:, j] - lo) / (hi - lo), 0.0, 1.0)
    return out


def build_features(embs, locs, bounds: Bounds) -> np.ndarray:
    embs = np.atleast_2d(np.asarray(embs, dtype=np.float64))
    unit, zero = _unit_rows(embs)
    if zero.any():
        log.warning("%d zero embedding(s) left unnormalised", int(zero.sum()))
    return np.hstack([unit, scale_locations(locs, bounds)])


def build_feature(emb, loc, bounds: Bounds) -> np.ndarray:
    return build_features(emb, loc, bounds)[0]


class ClusterClassifier:
    def __init__(self, net: DenseNet):
        self.net = net

    @classmethod
    def create(cls, d: int, c: int, layers: int = 3, hidden: int | None = None,
               seed: int = 0) -> "ClusterClassifier":
        """``layers`` counts weight layers; hidden width defaults to max(64, d)."""
        if c < 1 or layers < 1:
            raise ValueError("need c >= 1 and at least one layer")
        hidden = hidden or max(64, d)
        dims = [d + 2] + [hidden] * (layers - 1) + [c]
        return cls(DenseNet.create(dims, hidden_act="relu", seed=seed))

    @property
    def c(self) -> int:
        return self.net.output_dim

    @property
    def l(self) -> int:
        return len(self.net.layers)

    @property
    def input_dim(self) -> int:
        return self.net.input_dim

    def classify(self, x) -> np.ndarray:
        return softmax(self.net.forward(x))

    def copy(self) -> "ClusterClassifier":
        return ClusterClassifier(self.net.copy())


def classify(x, clf: ClusterClassifier) -> np.ndarray:
    return clf.classify(x)


def top_clusters(probs: np.ndarray, cr: int) -> np.ndarray:
    """Indices of the ``cr`` largest probabilities per row, ties to the lowest id."""
    return np.argsort(-np.atleast_2d(probs), axis=1, kind="stable")[:, :cr]


def route(x, clf: ClusterClassifier, cr: int = 1) -> list[int]:
    if not 1 <= cr <= clf.c:
        raise ValueError(f"cr must be in [1, {clf.c}], got {cr}")
    return [int(i) for i in top_clusters(clf.classify(x), cr)[0]]


# -- pseudo labels ----------------------------------------------------------

@dataclass
class PseudoLabelConfig:
    neg_start: int
    neg_end: int
    m: int = 4

    def __post_init__(self):
        if not 0 <= self.neg_start < self.neg_end:
            raise ValueError(f"need 0 <= neg_start < neg_end, got [{self.neg_start}, {self.neg_end})")
        if self.m < 1:
            raise ValueError("m must be >= 1")


def ranked_objects(q_row: int, dataset: Dataset, rel: RelevanceModel) -> np.ndarray:
    """Object rows ordered by relevance score (desc), ties by id (asc)."""
    objs, qs = dataset.objects, dataset.queries
    scores = rel.score(qs.embs[q_row], qs.locs[q_row], objs.embs, objs.locs)
    return np.lexsort((objs.ids, -scores))


def pseudo_negative_rows(q_row: int, dataset: Dataset, rel: RelevanceModel,
                         cfg: PseudoLabelConfig) -> np.ndarray:
    """Object rows at ranks [neg_start, neg_end) once positives are removed from the ranking."""
    if cfg.neg_end > dataset.n:
        raise ValueError(f"neg_end={cfg.neg_end} exceeds n={dataset.n}")
    objs = dataset.objects
    order = ranked_objects(q_row, dataset, rel)
    qid = int(dataset.queries.ids[q_row])
    pos = dataset.truth.pos(qid)
    if pos:
        order = order[~np.isin(objs.ids[order], np.fromiter(pos, dtype=np.int64))]
    if cfg.neg_end > len(order):
        log.warning("query %s: negative window [%d, %d) truncated to %d objects",
                    qid, cfg.neg_start, cfg.neg_end, len(order))
    return order[cfg.neg_start:cfg.neg_end]


def generate_pseudo_negatives(query_id: int, dataset: Dataset, rel: RelevanceModel,
                              cfg: PseudoLabelConfig, cache: dict | None = None) -> np.ndarray:
    """Object ids of the pseudo-negative window for one query, memoised in ``cache``."""
    if cache is not None and query_id in cache:
        return cache[query_id]
    rows = pseudo_negative_rows(dataset.queries.row(query_id), dataset, rel, cfg)
    out = dataset.objects.ids[rows]
    if cache is not None:
        cache[query_id] = out
    return out


# -- MCL objective ------------------------------------------------------------

def mcl_loss(prob_q, prob_pos, prob_negs) -> float:
    """Negated MCL log-likelihood of one query, its positive and its negatives."""
    prob_q = np.asarray(prob_q, dtype=np.float64)
    s_pos = np.clip(prob_q @ np.asarray(prob_pos, dtype=np.float64), MCL_EPS, 1 - MCL_EPS)
    s_neg = np.clip(np.atleast_2d(np.asarray(prob_negs, dtype=np.float64)) @ prob_q,
                    MCL_EPS, 1 - MCL_EPS)
    return float(-(np.log(s_pos) + np.log1p(-s_neg).sum()))


def mcl_batch_loss_and_grads(clf: ClusterClassifier, xq: np.ndarray, xpos: np.ndarray,
                             xneg: np.ndarray):
    """Mean MCL loss over B queries; ``xneg`` is (B, m, D).  Grads align with net.params()."""
    B, m, _ = xneg.shape
    X = np.vstack([xq, xpos, xneg.reshape(B * m, -1)])
    logits, cache = clf.net.forward_cached(X)
    P = softmax(logits)
    pq, pp, pn = P[:B], P[B:2 * B], P[2 * B:].reshape(B, m, -1)
    sp = (pq * pp).sum(1)
    sn = np.einsum("bmc,bc->bm", pn, pq)
    spc = np.clip(sp, MCL_EPS, 1 - MCL_EPS)
    snc = np.clip(sn, MCL_EPS, 1 - MCL_EPS)
    loss = float(np.mean(-(np.log(spc) + np.log1p(-snc).sum(1))))
    # clamp has zero derivative outside [eps, 1 - eps]
    gp = np.where(sp == spc, -1.0 / spc, 0.0) / B
    gn = np.where(sn == snc, 1.0 / (1.0 - snc), 0.0) / B
    dpq = gp[:, None] * pp + np.einsum("bm,bmc->bc", gn, pn)
    dpp = gp[:, None] * pq
    dpn = gn[:, :, None] * pq[:, None, :]
    dP = np.vstack([dpq, dpp, dpn.reshape(B * m, -1)])
    grads, _ = clf.net.backward(cache, softmax_backward(P, dP))
    return loss, grads


@dataclass
class IndexTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    history: list = field(default_factory=list, repr=False)


def train_index(dataset: Dataset, rel: RelevanceModel, clf: ClusterClassifier,
                pseudo_cfg: PseudoLabelConfig, cfg: IndexTrainConfig,
                query_ids: Iterable[int] | None = None, pools: dict | None = None
                ) -> ClusterClassifier:
    """Train ``clf`` in place on train queries; per-epoch mean loss goes to ``cfg.history``."""
    q_ids = dataset.split_queries("train") if query_ids is None else list(query_ids)
    usable = [q for q in q_ids if dataset.truth.pos(q)]
    if len(usable) < len(q_ids):
        log.warning("skipping %d index-training queries without positives", len(q_ids) - len(usable))
    if cfg.epochs == 0 or not usable:
        return clf
    objs, qs = dataset.objects, dataset.queries
    objs, qs = dataset.objects, dataset.queries
    # pools hold object rows, generated once from the frozen relevance model
    pools = {} if pools is None else pools
    for q in usable:
        if q not in pools:
            pools[q] = pseudo_negative_rows(qs.row(q), dataset, rel, pseudo_cfg)
    usable = [q for q in usable if len(pools[q])]
    xo = build_features(objs.embs, objs.locs, dataset.bounds)
    xq = build_features(qs.embs, qs.locs, dataset.bounds)
    q_rows = np.array([qs.row(q) for q in usable])
    pos_rows = [objs.rows(sorted(dataset.truth.pos(q))) for q in usable]
    neg_rows = [pools[q] for q in usable]
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(clf.net.params(), cfg.optimizer, cfg.learning_rate)
    m = pseudo_cfg.m
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            p = np.array([pos_rows[i][rng.integers(len(pos_rows[i]))] for i in idx])
            n = np.array([rng.choice(neg_rows[i], m, replace=len(neg_rows[i]) < m) for i in idx])
            loss, grads = mcl_batch_loss_and_grads(clf, xq[q_rows[idx]], xo[p], xo[n])
            opt.step(grads)
            losses.append(loss)
        cfg.history.append(float(np.mean(losses)))
        log.info("index epoch %d loss %.5f", epoch, cfg.history[-1])
    return clf


# -- the index ------------------------------------------------------------------

class ObjectStore:
    """Mutable object table referenced by the inverted lists."""

    def __init__(self, table: GeoTable):
        self.ids = table.ids.copy()
        self.embs = table.embs.copy()
        self.locs = table.locs.copy()
        self._reindex()

    def _reindex(self):
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, id_):
        return int(id_) in self._row

    def rows(self, ids) -> np.ndarray:
        return np.fromiter((self._row[int(i)] for i in ids), dtype=np.int64)

    def append(self, obj: GeoObject):
        self.ids = np.append(self.ids, obj.id)
        self.embs = np.vstack([self.embs, np.asarray(obj.emb, dtype=np.float64)[None, :]])
        self.locs = np.vstack([self.locs, np.asarray(obj.loc, dtype=np.float64)[None, :]])
        self._row[int(obj.id)] = len(self.ids) - 1

    def remove(self, id_: int):
        r = self._row[int(id_)]
        self.ids = np.delete(self.ids, r)
        self.embs = np.delete(self.embs, r, axis=0)
        self.locs = np.delete(self.locs, r, axis=0)
        self._reindex()


class InvertedLists:
    """``c`` posting lists of object ids over an :class:`ObjectStore`.

    Subclasses decide how embeddings/locations are routed to clusters via
    :meth:`route_rows`, which returns the top-``cr`` clusters for each row.
    """

    def __init__(self, lists: list[list[int]], store: ObjectStore, cr_o: int = 1):
        self.lists = lists
        self.store = store
        self.cr_o = cr_o
        self._packed: dict[int, tuple] = {}

    @property
    def c(self) -> int:
        return len(self.lists)

    def sizes(self) -> np.ndarray:
        return np.array([len(l) for l in self.lists], dtype=np.int64)

    def route_rows(self, embs, locs, cr: int) -> np.ndarray:
        raise NotImplementedError

    def route(self, emb, loc, cr: int = 1) -> list[int]:
        if not 1 <= cr <= self.c:
            raise ValueError(f"cr must be in [1, {self.c}], got {cr}")
        return [int(i) for i in self.route_rows(emb, loc, cr)[0]]

    def packed(self, cluster: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Contiguous (ids, embs, locs) of one list, cached until the list changes."""
        if cluster not in self._packed:
            ids = np.asarray(self.lists[cluster], dtype=np.int64)
            rows = self.store.rows(ids)
            self._packed[cluster] = (ids, self.store.embs[rows], self.store.locs[rows])
        return self._packed[cluster]

    def insert(self, obj: GeoObject) -> list[int]:
        if obj.id in self.store:
            raise KeyError(f"object {obj.id} already indexed")
        clusters = self.route(obj.emb, obj.loc, self.cr_o)
        self.store.append(obj)
        for c in clusters:
            self.lists[c].append(int(obj.id))
            self._packed.pop(c, None)
        return clusters

    def delete(self, object_id: int) -> None:
        if object_id not in self.store:
            raise KeyError(f"object {object_id} not in index")
        for c, lst in enumerate(self.lists):
            if object_id in lst:
                self.lists[c] = [i for i in lst if i != object_id]
                self._packed.pop(c, None)
        self.store.remove(object_id)


class ClusterIndex(InvertedLists):
    """Inverted lists whose routing is the learned cluster classifier."""

    def __init__(self, lists: list[list[int]], store: ObjectStore, clf: ClusterClassifier,
                 bounds: Bounds, cr_o: int = 1):
        if len(lists) != clf.c:
            raise ValueError(f"{len(lists)} lists for a {clf.c}-way classifier")
        super().__init__(lists, store, cr_o)
        self.clf = clf
        self.bounds = Bounds(*bounds)

    def feature(self, emb, loc) -> np.ndarray:
        return build_feature(emb, loc, self.bounds)

    def route_rows(self, embs, locs, cr: int = 1) -> np.ndarray:
        return top_clusters(self.clf.classify(build_features(embs, locs, self.bounds)), cr)


def partition(objects: GeoTable, clf: ClusterClassifier, bounds: Bounds, cr_o: int = 1
              ) -> ClusterIndex:
    if not 1 <= cr_o <= clf.c:
        raise ValueError(f"cr_o must be in [1, {clf.c}]")
    probs = clf.classify(build_features(objects.embs, objects.locs, bounds))
    assign = top_clusters(probs, cr_o)
    lists: list[list[int]] = [[] for _ in range(clf.c)]
    for oid, cl in zip(objects.ids.tolist(), assign.tolist()):
        for c in cl:
            lists[c].append(oid)
    return ClusterIndex(lists, ObjectStore(objects), clf, bounds, cr_o)


def partition_dataset(dataset: Dataset, clf: ClusterClassifier, cr_o: int = 1) -> ClusterIndex:
    return partition(dataset.objects, clf, dataset.bounds, cr_o)


# -- cluster quality --------------------------------------------------------------

@dataclass
class ClusterQualityReport:
    precision: np.ndarray  # per cluster, nan where no query was routed
    routed: np.ndarray     # queries routed to each cluster
    sizes: np.ndarray
    p_c: float
    imbalance: float
    imbalance_norm: float

    def summary(self) -> str:
        return (f"P(C)={self.p_c:.4f} IF(C)={self.imbalance:.4f} "
                f"IF'(C)={self.imbalance_norm:.4f} sizes={self.sizes.tolist()}")


def imbalance_factor(sizes) -> float:
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total == 0:
        raise ValueError("all clusters are empty")
    return float((sizes ** 2).sum() / total ** 2)


def cluster_quality(lists: list, routed_cluster: dict[int, int], truth) -> ClusterQualityReport:
    """Metrics from explicit lists and a query -> cluster routing."""
    c = len(lists)
    members = [set(l) for l in lists]
    sums = np.zeros(c)
    counts = np.zeros(c, dtype=np.int64)
    for q, cl in routed_cluster.items():
        pos = truth.pos(q)
        if not pos:
            log.warning("query %s has no positives; excluded from P(C)", q)
            continue
        sums[cl] += len(pos & members[cl]) / len(pos)
        counts[cl] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    total = counts.sum()
    p_c = float(sums.sum() / total) if total else float("nan")
    sizes = np.array([len(l) for l in lists], dtype=np.int64)
    imb = imbalance_factor(sizes)
    return ClusterQualityReport(precision, counts, sizes, p_c, imb, c * imb)


def evaluate_clusters(index: InvertedLists, queries: GeoTable, query_ids: Iterable[int], truth
                      ) -> ClusterQualityReport:
    """Route each query to its single best cluster and score the partition."""
    query_ids = list(query_ids)
    rows = queries.rows(query_ids)
    top = index.route_rows(queries.embs[rows], queries.locs[rows], 1)[:, 0]
    return cluster_quality(index.lists, dict(zip(query_ids, top.tolist())), truth)


# -- file format --------------------------------------------------------------

def write_index(index: ClusterIndex, f: BinaryIO, provenance: str = "") -> None:
    prov = provenance.encode()
    f.write(IDX_MAGIC)
    f.write(struct.pack("<III", index.c, len(index.store), index.cr_o))
    f.write(struct.pack("<I", len(prov)))
    f.write(prov)
    f.write(struct.pack("<4d", *index.bounds))
    write_net(index.clf.net, f)
    for lst in index.lists:
        f.write(struct.pack("<I", len(lst)))
        f.write(np.asarray(lst, dtype="<i8").tobytes())


def _take(f: BinaryIO, n: int, what: str) -> bytes:
    off = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload reading {what} at offset {off}")
    return buf


def read_index(f: BinaryIO, objects: GeoTable) -> tuple[ClusterIndex, str]:
    """Load an index over ``objects``.  Returns (index, provenance string)."""
    magic = f.read(len(IDX_MAGIC))
    if magic != IDX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {IDX_MAGIC!r}")
    c, n, cr_o = struct.unpack("<III", _take(f, 12, "index header"))
    if not (1 <= cr_o <= c):
        raise FormatError(f"corrupted header: c={c}, cr_o={cr_o}")
    (plen,) = struct.unpack("<I", _take(f, 4, "provenance length"))
    if plen > 1 << 16:
        raise FormatError(f"implausible provenance length {plen}")
    prov = _take(f, plen, "provenance").decode()
    bounds = Bounds(*struct.unpack("<4d", _take(f, 32, "bounds")))
    net = read_net(f)
    if net.output_dim != c:
        raise FormatError(f"classifier has {net.output_dim} outputs, header says c={c}")
    lists = []
    total = 0
    for i in range(c):
        (size,) = struct.unpack("<I", _take(f, 4, f"list {i} length"))
        if size > cr_o * n:
            raise FormatError(f"list {i} length {size} exceeds cr_o*n={cr_o * n}")
        ids = np.frombuffer(_take(f, 8 * size, f"list {i} ids"), dtype="<i8")
        lists.append(ids.astype(np.int64).tolist())
        total += size
    if f.read(1):
        raise FormatError("trailing bytes after last list")
    if n != len(objects):
        raise FormatError(f"index built over {n} objects, dataset has {len(objects)}")
    if net.input_dim != objects.d + 2:
        raise FormatError(f"classifier input {net.input_dim} != d+2={objects.d + 2}")
    for lst in lists:
        for i in lst:
            if i not in objects:
                raise FormatError(f"list references unknown object id {i}")
    return ClusterIndex(lists, ObjectStore(objects), ClusterClassifier(net), bounds, cr_o), prov

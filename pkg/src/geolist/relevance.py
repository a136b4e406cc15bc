"""Learned spatio-textual relevance over precomputed embeddings.

The score of object ``o`` for query ``q`` is

    w_text * <q.emb, o.emb> + w_space * SRel(1 - SDist(q.loc, o.loc))

where ``(w_text, w_space)`` comes from a linear head on ``q.emb`` and SRel
is a learnable monotone step function (or one of the ablation scorers).
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .core import Dataset, GeoObject, SpatialQuery, euclid, rank_top_k, s_dist
from .nn import (DenseNet, FormatError, Optimizer, inverse_softplus, read_net, sigmoid,
                 softplus, write_net)

log = logging.getLogger(__name__)

PROXY_ALPHA = 0.4
REL_MAGIC = b"LISTREL1"


def trel(q_emb, o_emb) -> float:
    q_emb = np.asarray(q_emb, dtype=np.float64)
    o_emb = np.asarray(o_emb, dtype=np.float64)
    if q_emb.shape != o_emb.shape:
        raise ValueError(f"embedding dim mismatch: {q_emb.shape} vs {o_emb.shape}")
    # same kernel as RelevanceModel.score, so the two agree bit for bit
    return float(np.einsum("ij,j->i", o_emb[None, :], q_emb)[0])


class StepSpatial:
    """Monotone step function on [0, 1] with ``t + 1`` uniform thresholds i/t.

    ``w_s`` are the raw weights; each step contributes ``softplus(w_s[i])``.
    ``w_hat`` holds the frozen prefix sums used by :meth:`infer`.
    """

    kind = "step"

    def __init__(self, t: int = 1000, w_s=None):
        if t < 1:
            raise ValueError("t must be >= 1")
        self.t = int(t)
        if w_s is None:
            # each step adds 1/(t+1): starts out as SRel ~= S_in
            w_s = np.full(t + 1, inverse_softplus(1.0 / (t + 1)))
        self.w_s = np.asarray(w_s, dtype=np.float64).copy()
        if self.w_s.shape != (t + 1,):
            raise ValueError(f"w_s must have t+1={t + 1} entries, got {self.w_s.shape}")
        self.thresholds = np.arange(t + 1) / t
        self.w_hat: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        return [self.w_s]

    def freeze(self) -> "StepSpatial":
        self.w_hat = np.cumsum(softplus(self.w_s))
        return self

    def train_scalar(self, s_in: float) -> float:
        """Indicator inner-product form, one input at a time."""
        if not 0.0 <= s_in <= 1.0:
            raise ValueError(f"s_in={s_in} outside [0, 1]")
        indicator = (s_in >= self.thresholds).astype(np.float64)
        return float(softplus(self.w_s) @ indicator)

    def _count(self, s_in: np.ndarray) -> np.ndarray:
        # number of thresholds passed, exactly as the indicator form counts them
        return np.searchsorted(self.thresholds, s_in, side="right")

    def value(self, s_in) -> np.ndarray:
        s_in = np.asarray(s_in, dtype=np.float64)
        if s_in.size and (s_in.min() < 0.0 or s_in.max() > 1.0):
            raise ValueError("s_in outside [0, 1]")
        prefix = np.concatenate(([0.0], np.cumsum(softplus(self.w_s))))
        return prefix[self._count(s_in)]

    def backward(self, s_in, grad) -> list[np.ndarray]:
        count = self._count(np.asarray(s_in, dtype=np.float64).ravel())
        acc = np.bincount(count, weights=np.asarray(grad, dtype=np.float64).ravel(),
                          minlength=self.t + 2)
        # d value / d w_s[i] = sigmoid(w_s[i]) for every sample with count > i
        tail = np.cumsum(acc[::-1])[::-1][1:]
        return [tail * sigmoid(self.w_s)]

    def infer_scalar(self, s_in: float) -> float:
        if self.w_hat is None:
            raise RuntimeError("call freeze() before inference")
        t = self.t
        i = min(max(int(np.floor(s_in * t)), 0), t)
        # floor(s*t) can be off by one from the threshold test near i/t
        if i < t and s_in >= (i + 1) / t:
            i += 1
        elif i > 0 and s_in < i / t:
            i -= 1
        return float(self.w_hat[i]) if s_in >= 0.0 else 0.0

    def infer(self, s_in) -> np.ndarray:
        if self.w_hat is None:
            raise RuntimeError("call freeze() before inference")
        s_in = np.asarray(s_in, dtype=np.float64)
        t = self.t
        i = np.clip(np.floor(s_in * t), 0, t).astype(np.int64)
        up = (i < t) & (s_in >= (i + 1) / t)
        down = (i > 0) & (s_in < i / t)
        i = i + up - down
        return self.w_hat[i]


class LinearSpatial:
    """Ablation: SRel = S_in, no parameters."""

    kind = "linear"

    def params(self) -> list[np.ndarray]:
        return []

    def freeze(self):
        return self

    def value(self, s_in):
        return np.asarray(s_in, dtype=np.float64).copy()

    infer = value

    def backward(self, s_in, grad) -> list[np.ndarray]:
        return []


class ExpSpatial:
    """Ablation: SRel = softplus(a) * S_in ** softplus(b), with 0 ** b = 0."""

    kind = "exp"

    def __init__(self, ab=None):
        if ab is None:
            ab = [inverse_softplus(1.0)] * 2
        self.ab = np.asarray(ab, dtype=np.float64).copy()

    def params(self) -> list[np.ndarray]:
        return [self.ab]

    def freeze(self):
        return self

    def value(self, s_in):
        s = np.asarray(s_in, dtype=np.float64)
        scale, power = softplus(self.ab)
        pos = s > 0
        out = np.zeros_like(s)
        out[pos] = scale * s[pos] ** power
        return out

    infer = value

    def backward(self, s_in, grad) -> list[np.ndarray]:
        s = np.asarray(s_in, dtype=np.float64).ravel()
        g = np.asarray(grad, dtype=np.float64).ravel()
        pos = s > 0
        s, g = s[pos], g[pos]
        scale, power = softplus(self.ab)
        sp = s ** power
        da = np.sum(g * sp) * sigmoid(self.ab[0])
        db = np.sum(g * scale * sp * np.log(s)) * sigmoid(self.ab[1])
        return [np.array([da, db])]


def ablation_scorers() -> dict:
    return {"linear_sin": LinearSpatial, "exp_learnable": ExpSpatial}


def make_spatial(kind: str, t: int = 1000):
    if kind == "step":
        return StepSpatial(t)
    if kind == "linear":
        return LinearSpatial()
    if kind == "exp":
        return ExpSpatial()
    raise ValueError(f"unknown spatial module {kind!r}")


class RelevanceModel:
    """Weight head + spatial module.  ``frozen`` switches SRel to the lookup form."""

    def __init__(self, d: int, dist_max: float, spatial=None, head: DenseNet | None = None,
                 seed: int = 0):
        if not dist_max > 0:
            raise ValueError("degenerate diameter")
        self.d = int(d)
        self.dist_max = float(dist_max)
        self.spatial = spatial if spatial is not None else StepSpatial()
        self.head = head if head is not None else DenseNet.create([d, 2], seed=seed)
        if self.head.input_dim != d or self.head.output_dim != 2:
            raise ValueError(f"weight head must map {d} -> 2")
        self.frozen = False
        self.history: list[float] = []

    def params(self) -> list[np.ndarray]:
        return self.head.params() + self.spatial.params()

    def freeze(self) -> "RelevanceModel":
        self.spatial.freeze()
        self.frozen = True
        return self

    def weights(self, q_emb) -> np.ndarray:
        """(w_text, w_space) per query; (2,) for a single embedding."""
        return self.head.forward(q_emb)

    def s_in(self, q_loc, o_locs) -> np.ndarray:
        return 1.0 - s_dist(np.asarray(q_loc), o_locs, self.dist_max)

    def srel(self, s_in) -> np.ndarray:
        return self.spatial.infer(s_in) if self.frozen else self.spatial.value(s_in)

    def score(self, q_emb, q_loc, o_embs, o_locs, w=None) -> np.ndarray:
        """Scores of one query against a block of objects.

        Row-independent by construction: a row's score does not depend on
        which other rows share the block (``einsum`` rather than BLAS gemv).
        """
        if w is None:
            w = self.weights(q_emb)
        tr = np.einsum("ij,j->i", o_embs, q_emb)
        sr = self.srel(1.0 - np.minimum(euclid(q_loc, o_locs) / self.dist_max, 1.0))
        return w[0] * tr + w[1] * sr

    def copy(self) -> "RelevanceModel":
        buf = io.BytesIO()
        write_relevance(self, buf, full_precision=True)
        buf.seek(0)
        return read_relevance(buf)[0]


def st_score(q: SpatialQuery, o: GeoObject, model: RelevanceModel) -> float:
    w = model.weights(np.asarray(q.emb, dtype=np.float64))
    return float(model.score(np.asarray(q.emb, dtype=np.float64), np.asarray(q.loc),
                             np.asarray(o.emb, dtype=np.float64)[None, :],
                             np.asarray(o.loc, dtype=np.float64)[None, :], w)[0])


def contrastive_loss(pos_score: float, neg_scores) -> float:
    """-log softmax probability of the positive among positive + negatives."""
    s = np.concatenate(([pos_score], np.asarray(neg_scores, dtype=np.float64).ravel()))
    if len(s) < 2:
        raise ValueError("need at least one negative")
    m = s.max()
    return float(m + np.log(np.exp(s - m).sum()) - s[0])


def proxy_scores(dataset: Dataset, q_row: int) -> np.ndarray:
    """Fixed-weight cosine + proximity score used for hard-negative mining."""
    objs, qs = dataset.objects, dataset.queries
    q = qs.embs[q_row]
    norms = np.linalg.norm(objs.embs, axis=1) * np.linalg.norm(q)
    cos = np.divide(np.einsum("ij,j->i", objs.embs, q), norms,
                    out=np.zeros(len(objs)), where=norms > 0)
    return PROXY_ALPHA * cos + (1 - PROXY_ALPHA) * (1.0 - s_dist(qs.locs[q_row], objs.locs,
                                                                 dataset.dist_max))


def mine_hard_negatives(query_id: int, dataset: Dataset, pool_size: int) -> list[int]:
    """Top ``pool_size`` non-positive objects under the proxy scorer."""
    objs = dataset.objects
    scores = proxy_scores(dataset, dataset.queries.row(query_id))
    pos = dataset.truth.pos(query_id)
    if pos:
        scores = scores.copy()
        keep = ~np.isin(objs.ids, np.fromiter(pos, dtype=np.int64))
    else:
        keep = np.ones(len(objs), dtype=bool)
    cand = np.flatnonzero(keep)
    available = len(cand)
    if available < pool_size:
        log.warning("query %s: only %d hard negatives available (asked %d)",
                    query_id, available, pool_size)
    top = rank_top_k(scores[cand], objs.ids[cand], pool_size)
    return [int(i) for i in objs.ids[cand[top]]]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    hard_negatives: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    hard_pool_size: int = 100
    in_batch_negatives: bool = True
    t: int = 1000
    spatial: str = "step"
    optimizer: str = "adam"

    def __post_init__(self):
        for name in ("batch_size", "hard_negatives", "hard_pool_size", "t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class _Batch:
    q_rows: np.ndarray
    cand: np.ndarray  # (B, K) object rows
    mask: np.ndarray  # (B, K) usable candidates; column 0 is the positive
    extra: dict = field(default_factory=dict)


def batch_loss_and_grads(model: RelevanceModel, dataset: Dataset, batch: _Batch):
    """Mean contrastive loss over a batch and its gradients w.r.t. model.params()."""
    objs, qs = dataset.objects, dataset.queries
    Q = qs.embs[batch.q_rows]
    QL = qs.locs[batch.q_rows]
    B, K = batch.cand.shape
    w, cache = model.head.forward_cached(Q)
    E = objs.embs[batch.cand]
    tr = np.einsum("bkd,bd->bk", E, Q)
    s_in = 1.0 - np.minimum(euclid(QL[:, None, :], objs.locs[batch.cand]) / model.dist_max, 1.0)
    sr = model.spatial.value(s_in)
    s = w[:, :1] * tr + w[:, 1:] * sr
    s = np.where(batch.mask, s, -np.inf)
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    z = e.sum(axis=1, keepdims=True)
    loss = float(np.mean(m[:, 0] + np.log(z[:, 0]) - s[:, 0]))
    g = e / z
    g[:, 0] -= 1.0
    g /= B
    dw = np.stack([(g * tr).sum(axis=1), (g * sr).sum(axis=1)], axis=1)
    head_grads, _ = model.head.backward(cache, dw)
    sp_grads = model.spatial.backward(s_in[batch.mask], (g * w[:, 1:])[batch.mask])
    return loss, head_grads + sp_grads


def _positive_rows(dataset: Dataset, q_ids) -> dict[int, np.ndarray]:
    objs = dataset.objects
    return {q: objs.rows(sorted(dataset.truth.pos(q))) for q in q_ids}


def make_batch(dataset: Dataset, q_ids: list[int], pos_rows: dict, pools: dict,
               b: int, in_batch: bool, rng: np.random.Generator) -> _Batch:
    B = len(q_ids)
    K = 1 + b + (B if in_batch else 0)
    cand = np.zeros((B, K), dtype=np.int64)
    mask = np.zeros((B, K), dtype=bool)
    for r, q in enumerate(q_ids):
        cand[r, 0] = pos_rows[q][rng.integers(len(pos_rows[q]))]
        pool = pools[q]
        take = min(b, len(pool))
        if take:
            cand[r, 1:1 + take] = rng.choice(pool, take, replace=False)
        mask[r, :1 + take] = True
    if in_batch:
        cand[:, 1 + b:] = cand[:, 0][None, :]
        for r, q in enumerate(q_ids):
            own = set(pos_rows[q].tolist())
            mask[r, 1 + b:] = [c not in own for c in cand[r, 1 + b:]]
    return _Batch(np.array([dataset.queries.row(q) for q in q_ids]), cand, mask)


def train_relevance(dataset: Dataset, config: TrainConfig, model: RelevanceModel | None = None,
                    query_ids: list[int] | None = None) -> RelevanceModel:
    """Contrastive training with proxy-mined hard negatives.  Returns a frozen model."""
    if model is None:
        model = RelevanceModel(dataset.d, dataset.dist_max, make_spatial(config.spatial, config.t),
                               seed=config.seed)
    model.frozen = False
    q_ids = dataset.split_queries("train") if query_ids is None else list(query_ids)
    usable = [q for q in q_ids if dataset.truth.pos(q)]
    if len(usable) < len(q_ids):
        log.warning("skipping %d training queries without positives", len(q_ids) - len(usable))
    if config.epochs == 0 or not usable:
        return model.freeze()
    objs = dataset.objects
    pos_rows = _positive_rows(dataset, usable)
    pools = {q: objs.rows(mine_hard_negatives(q, dataset, config.hard_pool_size)) for q in usable}
    rng = np.random.default_rng(config.seed)
    opt = Optimizer(model.params(), config.optimizer, config.learning_rate)
    for epoch in range(config.epochs):
        order = rng.permutation(len(usable))
        losses = []
        for s in range(0, len(order), config.batch_size):
            batch_ids = [usable[i] for i in order[s:s + config.batch_size]]
            batch = make_batch(dataset, batch_ids, pos_rows, pools, config.hard_negatives,
                               config.in_batch_negatives, rng)
            loss, grads = batch_loss_and_grads(model, dataset, batch)
            opt.step(grads)
            losses.append(loss)
        model.history.append(float(np.mean(losses)))
        log.info("relevance epoch %d loss %.5f", epoch, model.history[-1])
    return model.freeze()


_SPATIAL_CODE = {"step": 0, "linear": 1, "exp": 2}


def write_relevance(model: RelevanceModel, f: BinaryIO, provenance: str = "",
                    full_precision: bool = False) -> None:
    """Checkpoint: header, weight-head network, spatial section.

    ``full_precision`` stores float64 spatial parameters (used for in-memory
    copies); files on disk use float32.
    """
    dt = "<f8" if full_precision else "<f4"
    prov = provenance.encode()
    f.write(REL_MAGIC)
    f.write(struct.pack("<I", len(prov)))
    f.write(prov)
    f.write(struct.pack("<dIBB", model.dist_max, model.d, _SPATIAL_CODE[model.spatial.kind],
                        1 if full_precision else 0))
    head = model.head
    if full_precision:
        f.write(struct.pack("<I", len(head.layers)))
        for layer in head.layers:
            f.write(struct.pack("<II", *layer.W.shape))
            f.write(layer.W.astype("<f8").tobytes())
            f.write(layer.b.astype("<f8").tobytes())
    else:
        write_net(head, f)
    sp = model.spatial
    if sp.kind == "step":
        w_hat = sp.w_hat if sp.w_hat is not None else np.cumsum(softplus(sp.w_s))
        f.write(struct.pack("<I", sp.t))
        f.write(sp.w_s.astype(dt).tobytes())
        f.write(np.asarray(w_hat).astype(dt).tobytes())
    elif sp.kind == "exp":
        f.write(sp.ab.astype(dt).tobytes())


def _take(f: BinaryIO, n: int, what: str) -> bytes:
    off = f.tell()
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated payload reading {what} at offset {off}")
    return buf


def read_relevance(f: BinaryIO) -> tuple[RelevanceModel, str]:
    """Load a frozen model.  Returns (model, provenance string)."""
    from .nn import Dense

    magic = f.read(len(REL_MAGIC))
    if magic != REL_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {REL_MAGIC!r}")
    (plen,) = struct.unpack("<I", _take(f, 4, "provenance length"))
    if plen > 1 << 16:
        raise FormatError(f"implausible provenance length {plen}")
    prov = _take(f, plen, "provenance").decode()
    dist_max, d, code, full = struct.unpack("<dIBB", _take(f, 14, "model header"))
    if not (np.isfinite(dist_max) and dist_max > 0) or d < 1 or full > 1:
        raise FormatError(f"corrupted model header: dist_max={dist_max}, d={d}, full={full}")
    if code not in _SPATIAL_CODE.values():
        raise FormatError(f"unknown spatial module code {code}")
    if full:
        (nl,) = struct.unpack("<I", _take(f, 4, "layer count"))
        layers = []
        for i in range(nl):
            a, b = struct.unpack("<II", _take(f, 8, f"layer {i} header"))
            W = np.frombuffer(_take(f, 8 * a * b, f"layer {i} weights"), "<f8").reshape(a, b)
            bias = np.frombuffer(_take(f, 8 * b, f"layer {i} bias"), "<f8")
            layers.append(Dense(W.copy(), bias.copy()))
        head = DenseNet(layers)
    else:
        head = read_net(f)
    if head.input_dim != d or head.output_dim != 2:
        raise FormatError(f"weight head shape {head.input_dim}->{head.output_dim} != {d}->2")
    width = 8 if full else 4
    dt = "<f8" if full else "<f4"
    kind = {v: k for k, v in _SPATIAL_CODE.items()}[code]
    if kind == "step":
        (t,) = struct.unpack("<I", _take(f, 4, "step count"))
        if t < 1 or t > 10_000_000:
            raise FormatError(f"implausible step count {t}")
        w_s = np.frombuffer(_take(f, width * (t + 1), "step weights"), dt).astype(np.float64)
        w_hat = np.frombuffer(_take(f, width * (t + 1), "prefix table"), dt).astype(np.float64)
        if np.any(np.diff(w_hat) < 0):
            raise FormatError("prefix table is not nondecreasing")
        spatial = StepSpatial(t, w_s)
        spatial.w_hat = w_hat
    elif kind == "exp":
        spatial = ExpSpatial(np.frombuffer(_take(f, 2 * width, "exp parameters"), dt))
    else:
        spatial = LinearSpatial()
    if f.read(1):
        raise FormatError("trailing bytes after spatial section")
    for p in [*head.params(), *spatial.params()]:
        if not np.all(np.isfinite(p)):
            raise FormatError("non-finite parameters in relevance checkpoint")
    model = RelevanceModel(d, dist_max, spatial, head)
    model.frozen = True
    return model, prov

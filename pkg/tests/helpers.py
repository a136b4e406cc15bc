"""Builders shared by the test modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from geolist.core import Dataset, GeoTable, GroundTruthSet
from geolist.data import SynthConfig, generate
from geolist.index import (ClusterClassifier, IndexTrainConfig, PseudoLabelConfig, partition_dataset,
                           train_index)
from geolist.nn import DenseNet
from geolist.relevance import RelevanceModel, StepSpatial, TrainConfig, train_relevance


def random_dataset(rng: np.random.Generator, n: int, nq: int = 5, d: int = 4, ties: bool = False,
                   k: int = 10) -> Dataset:
    """Unstructured objects/queries; with ``ties`` every object is duplicated once."""
    base = n // 2 if ties else n
    locs = rng.uniform(0, 1, (base, 2))
    embs = rng.standard_normal((base, d))
    if ties:
        locs = np.vstack([locs, locs])[:n]
        embs = np.vstack([embs, embs])[:n]
        locs = np.vstack([locs, rng.uniform(0, 1, (n - len(locs), 2))])
        embs = np.vstack([embs, rng.standard_normal((n - len(embs), d))])
    ids = rng.permutation(n * 3)[:n]
    objects = GeoTable(ids, locs, embs)
    queries = GeoTable(np.arange(nq), rng.uniform(0, 1, (nq, 2)), rng.standard_normal((nq, d)),
                       np.full(nq, k))
    records = [(q, int(ids[rng.integers(n)])) for q in range(nq)]
    return Dataset(objects, queries, GroundTruthSet(records, {q: "test" for q in range(nq)}))


def random_model(rng: np.random.Generator, d: int, dist_max: float, t: int = 50) -> RelevanceModel:
    head = DenseNet.create([d, 2], seed=int(rng.integers(1 << 30)))
    head.layers[0].b[:] = rng.standard_normal(2)
    sp = StepSpatial(t, rng.standard_normal(t + 1))
    return RelevanceModel(d, dist_max, sp, head).freeze()


def two_blobs(n_per: int = 60, nq_per: int = 20, d: int = 8, seed: int = 0) -> Dataset:
    """Two far-apart blobs in both embedding and location; positives stay inside a blob."""
    cfg = SynthConfig(n_objects=2 * n_per, n_queries=2 * nq_per, d=d, n_topics=2,
                      topic_embedding_spread=0.3, spatial_hotspot_spread=0.01,
                      positives_per_query=3, seed=seed, k=5,
                      topic_centroids=np.eye(2, d).tolist(),
                      hotspots=[[30.2, 120.2], [30.8, 120.8]])
    return generate(cfg)


# -- the planted 20k pipeline used by several acceptance criteria ---------------------

PLANTED = dict(n_objects=20_000, n_queries=2_000, d=32, n_topics=10, seed=7)
PLANTED_C = 10
REL_EPOCHS, REL_LR = 20, 1e-2
IDX_EPOCHS, IDX_LR, IDX_M = 30, 1e-3, 4


def default_window(n: int, c: int) -> tuple[int, int]:
    return round(1.25 * n / c), round(0.95 * n)


@dataclass
class Planted:
    ds: Dataset
    rel: RelevanceModel
    clf: ClusterClassifier
    index: object


def build_planted() -> Planted:
    ds = generate(SynthConfig(**PLANTED))
    rel = train_relevance(ds, TrainConfig(epochs=REL_EPOCHS, learning_rate=REL_LR, seed=7))
    clf = ClusterClassifier.create(ds.d, PLANTED_C, seed=7)
    lo, hi = default_window(ds.n, PLANTED_C)
    train_index(ds, rel, clf, PseudoLabelConfig(lo, hi, IDX_M),
                IndexTrainConfig(epochs=IDX_EPOCHS, learning_rate=IDX_LR, seed=7))
    return Planted(ds, rel, clf, partition_dataset(ds, clf))

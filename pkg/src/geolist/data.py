"""Synthetic geo-textual datasets and their on-disk format.

A dataset directory holds::

    objects.tsv            id, lat, lon
    queries.tsv            id, lat, lon, k
    records.tsv            query_id, object_id, split
    object_embeddings.bin  LISTEMB1 | u32 n | u32 d | n*d float32 (row r <-> r-th TSV row)
    query_embeddings.bin
    manifest.json          generator config and content hash
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, DatasetError, GeoTable, GroundTruthSet, euclid

EMB_MAGIC = b"LISTEMB1"
DATA_FILES = ("objects.tsv", "queries.tsv", "records.tsv", "object_embeddings.bin",
              "query_embeddings.bin")
REGION = (30.0, 31.0, 120.0, 121.0)  # lat_min, lat_max, lon_min, lon_max


class DataFormatError(DatasetError):
    pass


# -- generator ----------------------------------------------------------------------

def step_decay(sd):
    """Three plateaus, all of the mass below SDist 0.1."""
    sd = np.asarray(sd)
    return np.select([sd < 0.02, sd < 0.05, sd < 0.1], [1.0, 0.6, 0.3], 0.0)


def exponential_decay(sd):
    return np.exp(-np.asarray(sd) / 0.05)


def linear_decay(sd):
    return np.maximum(0.0, 1.0 - np.asarray(sd) / 0.2)


DECAYS = {"step": step_decay, "exponential": exponential_decay, "linear": linear_decay}


@dataclass
class SynthConfig:
    n_objects: int = 20_000
    n_queries: int = 2_000
    d: int = 32
    n_topics: int = 10
    topic_embedding_spread: float = 1.0
    spatial_hotspot_spread: float = 0.04
    query_noise: float = 1.0
    positives_per_query: int = 5
    distance_decay: str = "step"
    seed: int = 0
    k: int = 20
    # optional fixed (n_topics, d) centroids / (n_topics, 2) hotspots
    topic_centroids: list | None = field(default=None, repr=False)
    hotspots: list | None = field(default=None, repr=False)

    def validate(self) -> None:
        errs = []
        if self.n_objects < 1:
            errs.append("n_objects must be >= 1")
        if self.n_queries < 1:
            errs.append("n_queries must be >= 1")
        if self.d < 2:
            errs.append("d must be >= 2")
        if not 1 <= self.n_topics <= min(self.n_objects, 1000):
            errs.append("n_topics must be in [1, min(n_objects, 1000)]")
        if not self.topic_embedding_spread > 0 or not self.spatial_hotspot_spread > 0:
            errs.append("spreads must be > 0")
        if self.query_noise < 0:
            errs.append("query_noise must be >= 0")
        if not 1 <= self.positives_per_query <= self.n_objects:
            errs.append("positives_per_query must be in [1, n_objects]")
        if self.distance_decay not in DECAYS:
            errs.append(f"distance_decay must be one of {sorted(DECAYS)}")
        if self.k < 1:
            errs.append("k must be >= 1")
        if self.topic_centroids is not None and np.shape(self.topic_centroids) != (self.n_topics, self.d):
            errs.append("topic_centroids must have shape (n_topics, d)")
        if self.hotspots is not None and np.shape(self.hotspots) != (self.n_topics, 2):
            errs.append("hotspots must have shape (n_topics, 2)")
        if errs:
            raise ValueError("invalid SynthConfig: " + "; ".join(errs))

    def to_dict(self) -> dict:
        return asdict(self)


def _unit_f32(x: np.ndarray) -> np.ndarray:
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    # float32-representable so a write/read round trip is exact
    return x.astype(np.float32).astype(np.float64)


def _clip_region(locs: np.ndarray) -> np.ndarray:
    lat0, lat1, lon0, lon1 = REGION
    return np.column_stack([np.clip(locs[:, 0], lat0, lat1), np.clip(locs[:, 1], lon0, lon1)])


def hidden_scores(q_embs, q_locs, o_embs, o_locs, dist_max: float, decay: str) -> np.ndarray:
    """Generative relevance cos(q, o) + decay(SDist) for a block of queries, (nq, n)."""
    cos = q_embs @ o_embs.T / np.outer(np.linalg.norm(q_embs, axis=1), np.linalg.norm(o_embs, axis=1))
    sd = np.minimum(euclid(q_locs[:, None, :], o_locs[None, :, :]) / dist_max, 1.0)
    return cos + DECAYS[decay](sd)


def generate(cfg: SynthConfig) -> Dataset:
    """Planted topic/hotspot data with top-by-hidden-score positives.

    Object embeddings are a topic centroid plus isotropic noise of expected
    norm ``topic_embedding_spread``; locations are the topic hotspot plus
    Gaussian noise of std ``spatial_hotspot_spread`` per axis.  Queries are
    drawn the same way with both noises scaled by ``query_noise``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, T = cfg.d, cfg.n_topics
    lat0, lat1, lon0, lon1 = REGION
    centroids = (np.asarray(cfg.topic_centroids, dtype=np.float64) if cfg.topic_centroids is not None
                 else rng.standard_normal((T, d)))
    centroids = centroids / np.linalg.norm(centroids, axis=1, keepdims=True)
    if cfg.hotspots is not None:
        hotspots = np.asarray(cfg.hotspots, dtype=np.float64)
    else:
        hotspots = np.column_stack([rng.uniform(lat0 + 0.1, lat1 - 0.1, T),
                                    rng.uniform(lon0 + 0.1, lon1 - 0.1, T)])
    # objects and queries use independent streams so n_objects does not shift queries
    orng, qrng = (np.random.default_rng(s) for s in rng.spawn(2))

    def draw(r, n, noise):
        topic = r.integers(T, size=n)
        emb = centroids[topic] + noise * cfg.topic_embedding_spread * r.standard_normal((n, d)) / np.sqrt(d)
        loc = hotspots[topic] + noise * cfg.spatial_hotspot_spread * r.standard_normal((n, 2))
        return topic, _unit_f32(emb), _clip_region(loc)

    o_topic, o_emb, o_loc = draw(orng, cfg.n_objects, 1.0)
    q_topic, q_emb, q_loc = draw(qrng, cfg.n_queries, cfg.query_noise)
    objects = GeoTable(np.arange(cfg.n_objects), o_loc, o_emb)
    queries = GeoTable(np.arange(cfg.n_queries), q_loc, q_emb, np.full(cfg.n_queries, cfg.k))

    probe = Dataset(objects, GeoTable(np.empty(0), np.empty((0, 2)), np.empty((0, d))),
                    GroundTruthSet([], {}))
    records = []
    P = cfg.positives_per_query
    block = max(1, 4_000_000 // cfg.n_objects)
    for s in range(0, cfg.n_queries, block):
        g = hidden_scores(q_emb[s:s + block], q_loc[s:s + block], o_emb, o_loc,
                          probe.dist_max, cfg.distance_decay)
        for r, row in enumerate(g):
            # ties by ascending id
            top = np.lexsort((objects.ids, -row))[:P]
            records += [(s + r, int(o)) for o in top]

    order = rng.permutation(cfg.n_queries)
    n_train = int(round(0.8 * cfg.n_queries))
    n_val = int(round(0.1 * cfg.n_queries))
    split_of = {}
    for i, q in enumerate(order.tolist()):
        split_of[q] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    ds = Dataset(objects, queries, GroundTruthSet(records, split_of))
    ds.meta = {"generator": {k: v for k, v in cfg.to_dict().items()
                             if k not in ("topic_centroids", "hotspots")},
               "object_topic": o_topic, "query_topic": q_topic}
    return ds


# -- file format -----------------------------------------------------------------

def write_embeddings(path, embs: np.ndarray) -> None:
    embs = np.asarray(embs)
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", embs.shape[0], embs.shape[1]))
        f.write(np.ascontiguousarray(embs, dtype="<f4").tobytes())


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(EMB_MAGIC))
        if magic != EMB_MAGIC:
            raise DataFormatError(f"{path.name}: bad magic {magic!r} at offset 0")
        header = f.read(8)
        if len(header) != 8:
            raise DataFormatError(f"{path.name}: truncated header at offset {len(EMB_MAGIC)}")
        n, d = struct.unpack("<II", header)
        if d < 1:
            raise DataFormatError(f"{path.name}: dimension {d} in header at offset 12")
        payload = f.read()
    need = 4 * n * d
    if len(payload) != need:
        raise DataFormatError(f"{path.name}: row-count mismatch, header says {n} rows of d={d} "
                              f"({need} bytes) but payload at offset 16 has {len(payload)} bytes")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
    if len(bad):
        raise DataFormatError(f"{path.name}: non-finite float in row {bad[0]} "
                              f"(offset {16 + 4 * d * bad[0]})")
    return arr.astype(np.float64)


def _write_tsv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_tsv(path, header) -> list[list[str]]:
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows or rows[0] != list(header):
        raise DataFormatError(f"{path.name}: expected header {list(header)} at line 1")
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataFormatError(f"{path.name}: line {i} has {len(r)} fields, expected {len(header)}")
    return rows[1:]


def content_hash(directory) -> str:
    h = hashlib.sha256()
    for name in DATA_FILES:
        with open(Path(directory) / name, "rb") as f:
            h.update(name.encode())
            h.update(f.read())
    return h.hexdigest()[:16]


def write_dataset(dataset: Dataset, directory) -> str:
    """Write all files atomically into ``directory``; returns the content hash."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=directory, prefix=".tmp-"))
    objs, qs = dataset.objects, dataset.queries
    _write_tsv(tmp / "objects.tsv", ("id", "lat", "lon"),
               ([int(i), repr(float(a)), repr(float(b))] for i, (a, b) in zip(objs.ids, objs.locs)))
    ks = qs.ks if qs.ks is not None else np.full(len(qs), 10)
    _write_tsv(tmp / "queries.tsv", ("id", "lat", "lon", "k"),
               ([int(i), repr(float(a)), repr(float(b)), int(k)]
                for i, (a, b), k in zip(qs.ids, qs.locs, ks)))
    truth = dataset.truth
    _write_tsv(tmp / "records.tsv", ("query_id", "object_id", "split"),
               ([q, o, truth.split_of.get(q, "train")] for q, o in truth.records()))
    write_embeddings(tmp / "object_embeddings.bin", objs.embs)
    write_embeddings(tmp / "query_embeddings.bin", qs.embs if len(qs) else np.empty((0, objs.d)))
    digest = content_hash(tmp)
    meta = {k: v for k, v in getattr(dataset, "meta", {}).items() if k == "generator"}
    manifest = {"hash": digest, "n_objects": len(objs), "n_queries": len(qs), "d": objs.d,
                "dist_max": dataset.dist_max, "dist_max_exact": dataset.dist_max_exact, **meta}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in (*DATA_FILES, "manifest.json"):
        os.replace(tmp / name, directory / name)
    tmp.rmdir()
    return digest


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    for name in DATA_FILES:
        if not (directory / name).exists():
            raise DataFormatError(f"missing {name} in {directory}")
    o_rows = _read_tsv(directory / "objects.tsv", ("id", "lat", "lon"))
    q_rows = _read_tsv(directory / "queries.tsv", ("id", "lat", "lon", "k"))
    r_rows = _read_tsv(directory / "records.tsv", ("query_id", "object_id", "split"))
    o_emb = read_embeddings(directory / "object_embeddings.bin")
    q_emb = read_embeddings(directory / "query_embeddings.bin")
    if len(o_emb) != len(o_rows):
        raise DataFormatError(f"object_embeddings.bin: row-count mismatch, {len(o_emb)} rows "
                              f"for {len(o_rows)} objects in objects.tsv")
    if len(q_emb) != len(q_rows):
        raise DataFormatError(f"query_embeddings.bin: row-count mismatch, {len(q_emb)} rows "
                              f"for {len(q_rows)} queries in queries.tsv")
    if len(q_rows) and q_emb.shape[1] != o_emb.shape[1]:
        raise DataFormatError(f"query_embeddings.bin: d={q_emb.shape[1]} differs from "
                              f"object_embeddings.bin d={o_emb.shape[1]}")
    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
        if "d" in manifest and manifest["d"] != o_emb.shape[1]:
            raise DataFormatError(f"object_embeddings.bin: d={o_emb.shape[1]} but manifest says "
                                  f"d={manifest['d']}")
    try:
        objects = GeoTable(np.array([int(r[0]) for r in o_rows], dtype=np.int64),
                           np.array([[float(r[1]), float(r[2])] for r in o_rows]).reshape(-1, 2), o_emb)
        queries = GeoTable(np.array([int(r[0]) for r in q_rows], dtype=np.int64),
                           np.array([[float(r[1]), float(r[2])] for r in q_rows]).reshape(-1, 2),
                           q_emb.reshape(len(q_rows), o_emb.shape[1]),
                           np.array([int(r[3]) for r in q_rows], dtype=np.int64))
        split_of = {}
        records = []
        for q, o, s in r_rows:
            records.append((int(q), int(o)))
            if split_of.setdefault(int(q), s) != s:
                raise DataFormatError(f"records.tsv: query {q} appears in two splits")
        ds = Dataset(objects, queries, GroundTruthSet(records, split_of))
    except DataFormatError:
        raise
    except (ValueError, KeyError) as e:
        raise DataFormatError(f"{directory}: {e}") from None
    ds.meta = {"manifest": manifest, "hash": content_hash(directory)}
    return ds

"""Command-line pipeline: gen -> train-model -> train-index -> build -> query / eval / bench."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import struct
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import GeoTable, SpatialQuery
from .data import SynthConfig, generate, read_dataset, read_embeddings, write_dataset
from .eval import evaluate, tradeoff_sweep, write_tradeoff_csv
from .index import (ClusterClassifier, IndexTrainConfig, PseudoLabelConfig, evaluate_clusters,
                    partition_dataset, read_index, train_index, write_index)
from .nn import FormatError, read_net, write_net
from .relevance import TrainConfig, read_relevance, train_relevance, write_relevance
from .search import brute_force_search, ivf_build, list_search

log = logging.getLogger("geolist")

CLF_MAGIC = b"LISTCLF1"


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    # paths
    data: str = "data"
    model: str = "model.bin"
    classifier: str = "classifier.bin"
    index: str = "index.bin"
    # synthetic data
    n_objects: int = 20_000
    n_queries: int = 2_000
    d: int = 32
    n_topics: int = 10
    topic_spread: float = 1.0
    hotspot_spread: float = 0.04
    query_noise: float = 1.0
    positives: int = 5
    decay: str = "step"
    # relevance model
    t: int = 1000
    spatial: str = "step"
    b: int = 8
    hard_pool: int = 100
    batch_size: int = 32
    epochs: int = 20
    lr: float = 1e-2
    in_batch: bool = True
    # index; 0 / -1 mean "derive from n"
    c: int = 0
    l: int = 3
    hidden: int = 0
    cr: int = 1
    cr_o: int = 1
    k: int = 20
    neg_start: int = -1
    neg_end: int = -1
    m: int = 4
    index_epochs: int = 30
    index_lr: float = 1e-3
    index_batch: int = 64
    # baselines and evaluation
    alpha: float = 0.9
    kmeans_iters: int = 50
    cr_values: str = "1,2,3"
    split: str = "test"
    seed: int = 0
    threads: int = 1

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise CLIError(f"unknown config key {key!r}")
        t = types[key]
        try:
            if t == "bool":
                val = raw.strip().lower() in ("1", "true", "yes", "on")
            elif t == "int":
                val = int(raw)
            elif t == "float":
                val = float(raw)
            else:
                val = raw.strip()
        except ValueError:
            raise CLIError(f"bad value {raw!r} for config key {key!r}") from None
        setattr(self, key, val)

    def load(self, path: str) -> None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise CLIError(f"--config: cannot read {path}: {e.strerror}") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"--config {path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            self.set(key.strip(), val)

    def resolved_c(self, n: int) -> int:
        return self.c if self.c > 0 else max(2, round(n / 10_000))

    def resolved_window(self, n: int) -> tuple[int, int]:
        c = self.resolved_c(n)
        start = self.neg_start if self.neg_start >= 0 else min(n - 1, round(1.25 * n / c))
        end = self.neg_end if self.neg_end > 0 else max(start + 1, round(0.95 * n))
        return start, min(end, n)

    def dump(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()[:16]


# -- helpers -----------------------------------------------------------------------

def atomic_write(path, write_fn, mode: str = "wb") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            write_fn(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_path(path, write_fn) -> None:
    """Like :func:`atomic_write` for writers that take a path instead of a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def emit_config(cfg: RunConfig, out_path) -> None:
    out = Path(out_path)
    target = out / "run_config.txt" if out.is_dir() else out.with_name(out.name + ".config")
    atomic_write(target, lambda f: f.write(cfg.dump()), "w")


def _need(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{flag}: no such file or directory: {path}")
    return p


def load_data(cfg: RunConfig):
    return read_dataset(_need(cfg.data, "--data"))


def load_model(cfg: RunConfig, ds):
    with open(_need(cfg.model, "--model"), "rb") as f:
        model, prov = read_relevance(f)
    meta = json.loads(prov or "{}")
    if meta.get("dataset") != ds.meta["hash"]:
        raise CLIError(f"--model {cfg.model} was trained on dataset {meta.get('dataset')}, "
                       f"but --data is {ds.meta['hash']}")
    return model


def write_classifier(clf: ClusterClassifier, f, provenance: str) -> None:
    prov = provenance.encode()
    f.write(CLF_MAGIC)
    f.write(struct.pack("<I", len(prov)))
    f.write(prov)
    write_net(clf.net, f)


def read_classifier(f) -> tuple[ClusterClassifier, str]:
    magic = f.read(len(CLF_MAGIC))
    if magic != CLF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CLF_MAGIC!r}")
    raw = f.read(4)
    if len(raw) != 4:
        raise FormatError("truncated payload reading provenance length at offset 8")
    (n,) = struct.unpack("<I", raw)
    prov = f.read(n)
    if len(prov) != n:
        raise FormatError("truncated payload reading provenance at offset 12")
    net = read_net(f)
    if f.read(1):
        raise FormatError("trailing bytes after classifier network")
    return ClusterClassifier(net), prov.decode()


def load_index(cfg: RunConfig, ds):
    with open(_need(cfg.index, "--index"), "rb") as f:
        idx, prov = read_index(f, ds.objects)
    meta = json.loads(prov or "{}")
    if meta.get("dataset") != ds.meta["hash"]:
        raise CLIError(f"--index {cfg.index} was built on dataset {meta.get('dataset')}, "
                       f"but --data is {ds.meta['hash']}")
    if meta.get("model") != file_digest(cfg.model):
        raise CLIError(f"--index {cfg.index} was trained against a different --model")
    return idx


def _provenance(cfg: RunConfig, ds, **extra) -> str:
    return json.dumps({"dataset": ds.meta["hash"], "config": cfg.digest(), **extra}, sort_keys=True)


# -- commands ----------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out: str) -> str:
    synth = SynthConfig(n_objects=cfg.n_objects, n_queries=cfg.n_queries, d=cfg.d,
                        n_topics=cfg.n_topics, topic_embedding_spread=cfg.topic_spread,
                        spatial_hotspot_spread=cfg.hotspot_spread, query_noise=cfg.query_noise,
                        positives_per_query=cfg.positives, distance_decay=cfg.decay,
                        seed=cfg.seed, k=cfg.k)
    digest = write_dataset(generate(synth), out)
    emit_config(cfg, out)
    print(f"dataset {digest} written to {out}")
    return digest


def cmd_train_model(cfg: RunConfig, out: str) -> None:
    ds = load_data(cfg)
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, hard_negatives=cfg.b,
                     learning_rate=cfg.lr, seed=cfg.seed, hard_pool_size=cfg.hard_pool,
                     in_batch_negatives=cfg.in_batch, t=cfg.t, spatial=cfg.spatial)
    model = train_relevance(ds, tc)
    atomic_write(out, lambda f: write_relevance(model, f, _provenance(cfg, ds)))
    emit_config(cfg, out)
    final = f"{model.history[-1]:.4f}" if model.history else "n/a"
    print(f"relevance model written to {out} (final loss {final})")


def cmd_train_index(cfg: RunConfig, out: str) -> None:
    ds = load_data(cfg)
    model = load_model(cfg, ds)
    c = cfg.resolved_c(ds.n)
    start, end = cfg.resolved_window(ds.n)
    clf = ClusterClassifier.create(ds.d, c, cfg.l, cfg.hidden or None, seed=cfg.seed)
    tcfg = IndexTrainConfig(epochs=cfg.index_epochs, batch_size=cfg.index_batch,
                            learning_rate=cfg.index_lr, seed=cfg.seed)
    train_index(ds, model, clf, PseudoLabelConfig(start, end, cfg.m), tcfg)
    prov = _provenance(cfg, ds, model=file_digest(cfg.model))
    atomic_write(out, lambda f: write_classifier(clf, f, prov))
    emit_config(cfg, out)
    print(f"classifier (c={c}, window=[{start}, {end})) written to {out}")


def cmd_build(cfg: RunConfig, out: str) -> None:
    ds = load_data(cfg)
    with open(_need(cfg.classifier, "--classifier"), "rb") as f:
        clf, prov = read_classifier(f)
    meta = json.loads(prov or "{}")
    if meta.get("dataset") != ds.meta["hash"]:
        raise CLIError(f"--classifier {cfg.classifier} was trained on a different dataset")
    if clf.input_dim != ds.d + 2:
        raise CLIError(f"--classifier expects d={clf.input_dim - 2}, dataset has d={ds.d}")
    idx = partition_dataset(ds, clf, cfg.cr_o)
    atomic_write(out, lambda f: write_index(idx, f, prov))
    emit_config(cfg, out)
    rep = evaluate_clusters(idx, ds.queries, ds.split_queries("val"), ds.truth)
    print(f"index written to {out}: {rep.summary()}")


def _parse_emb(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise CLIError("--emb: expected comma-separated floats") from None


def load_queries(path: str) -> GeoTable:
    d = _need(path, "--queries")
    rows = []
    with open(d / "queries.tsv", newline="") as f:
        rd = csv.reader(f, delimiter="\t")
        header = next(rd, None)
        if header != ["id", "lat", "lon", "k"]:
            raise CLIError(f"--queries: {d / 'queries.tsv'} must start with header id lat lon k")
        rows = list(rd)
    embs = read_embeddings(d / "query_embeddings.bin")
    if len(embs) != len(rows):
        raise CLIError(f"--queries: row-count mismatch between queries.tsv and query_embeddings.bin")
    return GeoTable(np.array([int(r[0]) for r in rows]),
                    np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2),
                    embs, np.array([int(r[3]) for r in rows]))


def cmd_query(cfg: RunConfig, out: str, queries: str | None = None, lat=None, lon=None,
              emb: str | None = None) -> None:
    ds = load_data(cfg)
    model = load_model(cfg, ds)
    idx = load_index(cfg, ds)
    if emb is not None:
        if lat is None or lon is None:
            raise CLIError("--emb needs --lat and --lon")
        qs = [SpatialQuery(0, (lat, lon), _parse_emb(emb), cfg.k)]
    elif queries is not None:
        qs = list(load_queries(queries))
    else:
        qs = [ds.queries.query(q) for q in ds.split_queries(cfg.split)]
    for q in qs:
        if len(q.emb) != ds.d:
            raise CLIError(f"query {q.id}: embedding has d={len(q.emb)}, dataset has d={ds.d}")

    def run(q):
        t0 = time.perf_counter_ns()
        res = list_search(q, idx, model, q.k, cfg.cr)
        return q, res, time.perf_counter_ns() - t0

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(run, qs))

    def write(f):
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["query_id", "rank", "object_id", "score", "candidates_scanned", "elapsed_ns"])
        for q, res, ns in results:
            for rank, it in enumerate(res.items, 1):
                w.writerow([q.id, rank, it.object_id, repr(it.score), res.candidates_scanned, ns])

    atomic_write(out, write, "w")
    emit_config(cfg, out)
    print(f"{len(results)} queries answered, results in {out}")


def _systems(cfg: RunConfig, ds, model, need_list: bool = True):
    c = cfg.resolved_c(ds.n)
    out = {}
    if need_list:
        idx = load_index(cfg, ds)
        out["list"] = lambda cr: (lambda q: list_search(q, idx, model, q.k, cr))
    _, ivf = ivf_build(ds, c, "embedding_only", cr_o=cfg.cr_o, max_iters=cfg.kmeans_iters, seed=cfg.seed)
    _, ivfs = ivf_build(ds, c, "spatially_weighted", cfg.alpha, cfg.cr_o, cfg.kmeans_iters, cfg.seed)
    out["ivf"] = lambda cr: (lambda q: list_search(q, ivf, model, q.k, cr))
    out["ivf_s"] = lambda cr: (lambda q: list_search(q, ivfs, model, q.k, cr))
    out["brute"] = lambda _: (lambda q: brute_force_search(q, ds, model, q.k))
    return out, c


def cmd_eval(cfg: RunConfig, out: str | None, system: str) -> None:
    ds = load_data(cfg)
    model = load_model(cfg, ds)
    systems, c = _systems(cfg, ds, model, need_list=system == "list")
    if system not in systems:
        raise CLIError(f"--system must be one of list, brute, ivf, ivf_s (got {system!r})")
    rep = evaluate(systems[system](cfg.cr), ds.queries, ds.split_queries(cfg.split), ds.truth)
    print(f"system={system} cr={cfg.cr} c={c}")
    print(rep.pretty())
    if out:
        atomic_path(out, rep.write_csv)
        emit_config(cfg, out)


def cmd_bench(cfg: RunConfig, out: str) -> None:
    ds = load_data(cfg)
    model = load_model(cfg, ds)
    systems, c = _systems(cfg, ds, model)
    crs = [int(x) for x in cfg.cr_values.split(",") if x.strip()]
    crs = [cr for cr in crs if 1 <= cr <= c]
    plan = {name: ("cr", crs, make) for name, make in systems.items() if name != "brute"}
    plan["brute"] = ("none", [0], systems["brute"])
    rows = tradeoff_sweep(plan, ds.queries, ds.split_queries(cfg.split), ds.truth)
    atomic_path(out, lambda p: write_tradeoff_csv(rows, p))
    emit_config(cfg, out)
    for r in rows:
        print(f"{r['system']:>6} {r['param_name']}={r['param_value']}: recall@10={r['recall10']:.4f} "
              f"ndcg@1={r['ndcg1']:.4f} candidates={r['mean_candidates']:.0f} "
              f"latency={r['mean_latency_ns'] / 1e3:.1f}us")


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="geolist", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser
    sub.add_parser = lambda *a, **kw: _add(*a, parents=[common], **kw)

    def paths(sp, *names):
        for n in names:
            sp.add_argument(f"--{n}")
        return sp

    sub.add_parser("gen", help="generate a synthetic dataset")
    paths(sub.add_parser("train-model", help="train the relevance model"), "data")
    paths(sub.add_parser("train-index", help="train the cluster classifier"), "data", "model")
    paths(sub.add_parser("build", help="partition objects into an index"), "data", "classifier")
    q = paths(sub.add_parser("query", help="answer queries with the index"), "data", "model", "index")
    q.add_argument("--cr", type=int)
    q.add_argument("--queries", help="directory with queries.tsv and query_embeddings.bin")
    q.add_argument("--lat", type=float)
    q.add_argument("--lon", type=float)
    q.add_argument("--emb", help="comma-separated query embedding")
    e = paths(sub.add_parser("eval", help="effectiveness and latency of one system"),
              "data", "model", "index")
    e.add_argument("--system", default="list")
    e.add_argument("--cr", type=int)
    paths(sub.add_parser("bench", help="cr trade-off sweep to CSV"), "data", "model", "index")
    return p


DEFAULT_OUT = {"gen": "data", "train-model": "model.bin", "train-index": "classifier.bin",
               "build": "index.bin", "query": "results.tsv", "eval": None, "bench": "tradeoff.csv"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig()
        if getattr(args, "config", None):
            cfg.load(args.config)
        for kv in getattr(args, "set", []):
            if "=" not in kv:
                raise CLIError(f"--set expects KEY=VALUE, got {kv!r}")
            cfg.set(*kv.split("=", 1))
        for key in ("seed", "threads", "data", "model", "index", "classifier", "cr"):
            val = getattr(args, key, None)
            if val is not None:
                setattr(cfg, key, val)
        out = getattr(args, "out", None) or DEFAULT_OUT[args.command]
        cmd = args.command
        if cmd == "gen":
            cmd_gen(cfg, out)
        elif cmd == "train-model":
            cmd_train_model(cfg, out)
        elif cmd == "train-index":
            cmd_train_index(cfg, out)
        elif cmd == "build":
            cmd_build(cfg, out)
        elif cmd == "query":
            cmd_query(cfg, out, args.queries, args.lat, args.lon, args.emb)
        elif cmd == "eval":
            cmd_eval(cfg, out, args.system)
        elif cmd == "bench":
            cmd_bench(cfg, out)
    except (CLIError, FormatError, ValueError, KeyError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"geolist {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured numbers,
whatever pytest's capture setting, then asserts.  Run on its own with::

    pytest tests/test_acceptance.py -v
"""
from __future__ import annotations

import io
import sys
import time

import numpy as np
import pytest

from geolist.core import Bounds, Dataset, GeoTable, GroundTruthSet
from geolist.data import (DataFormatError, SynthConfig, generate, read_dataset, read_embeddings,
                          write_dataset, write_embeddings)
from geolist.eval import evaluate, read_tradeoff_csv, recall_at_k, write_tradeoff_csv
from geolist.index import (ClusterClassifier, IndexTrainConfig, PseudoLabelConfig, cluster_quality,
                           evaluate_clusters, imbalance_factor, mcl_batch_loss_and_grads, partition,
                           partition_dataset, read_index, train_index, write_index)
from geolist.nn import DenseNet, FormatError, gradcheck, read_net, softplus, write_net
from geolist.relevance import (ExpSpatial, LinearSpatial, RelevanceModel, StepSpatial, TrainConfig,
                               _Batch, batch_loss_and_grads, read_relevance, train_relevance,
                               write_relevance)
from geolist.search import brute_force_search, ivf_build, list_search

from helpers import PLANTED, PLANTED_C, default_window, random_dataset, random_model


@pytest.fixture
def report(capsys):
    def _report(num: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\ncriterion {num:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
        assert ok, f"criterion {num} ({title}) failed: {detail}"
    return _report


# -- 1 ---------------------------------------------------------------------------

def test_c01_step_equivalence(report):
    t0 = time.perf_counter()
    grid = np.linspace(0.0, 1.0, 10_001)
    rng = np.random.default_rng(1)
    worst, monotone = 0.0, True
    for trial in range(100):
        t = 1000
        scale = 10.0 ** rng.uniform(-2, 1)
        sp = StepSpatial(t, rng.standard_normal(t + 1) * scale + rng.normal(0, 2)).freeze()
        # literal indicator form, evaluated as one matrix product over the grid
        train = (grid[:, None] >= sp.thresholds[None, :]).astype(np.float64) @ softplus(sp.w_s)
        infer = sp.infer(grid)
        worst = max(worst, float(np.abs(infer - train).max()))
        monotone &= bool(np.all(np.diff(train) >= 0) and np.all(np.diff(infer) >= 0))
        if trial < 2:  # scalar code paths on a subsample
            for s in grid[::97]:
                worst = max(worst, abs(sp.infer_scalar(s) - sp.train_scalar(s)))
    elapsed = time.perf_counter() - t0
    report(1, "step equivalence", worst <= 1e-9 and monotone and elapsed < 5.0,
           f"max |infer-train|={worst:.2e}, monotone={monotone}, {elapsed:.2f}s")


# -- 2 ---------------------------------------------------------------------------

def _contrastive_fixture(spatial, seed=0):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 30, nq=4, d=5)
    model = RelevanceModel(ds.d, ds.dist_max, spatial, seed=seed)
    model.head.layers[0].W[:] = rng.standard_normal((5, 2))
    cand = np.array([rng.permutation(30)[:6] for _ in range(4)])
    mask = np.ones_like(cand, dtype=bool)
    mask[1, 4:] = False
    batch = _Batch(np.arange(4), cand, mask)
    return model, lambda: batch_loss_and_grads(model, ds, batch)


def test_c02_gradients(report):
    t0 = time.perf_counter()
    res = {}
    # (a) weight head alone: the spatial module is linear, so only head parameters move
    model, fn = _contrastive_fixture(LinearSpatial())
    res["head+contrastive"] = gradcheck(model.head.params(), fn)
    # (b) step module; t small enough to probe every step weight
    rng = np.random.default_rng(2)
    model, fn = _contrastive_fixture(StepSpatial(20, rng.standard_normal(21)))
    res["step+contrastive"] = gradcheck(model.params(), fn)
    # (c) classifier + MCL on a 3-object toy
    clf = ClusterClassifier.create(4, 3, layers=3, hidden=6, seed=3)
    x = rng.standard_normal((3, 6))
    res["classifier+MCL"] = gradcheck(
        clf.net.params(), lambda: mcl_batch_loss_and_grads(clf, x[:1], x[1:2], x[None, 2:3]))
    # (d) both ablation scorers
    for name, sp in (("linear_sin", LinearSpatial()), ("exp_learnable", ExpSpatial([0.3, -0.2]))):
        model, fn = _contrastive_fixture(sp, seed=4)
        res[name] = gradcheck(model.params(), fn)
    elapsed = time.perf_counter() - t0
    ok = all(r.passed for r in res.values()) and elapsed < 30
    report(2, "gradient correctness", ok,
           ", ".join(f"{k} {r.max_rel_error:.1e}" for k, r in res.items()) + f", {elapsed:.1f}s")


# -- 3 ---------------------------------------------------------------------------

def test_c03_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = 0
    for trial in range(50):
        n = int(rng.integers(2, 501))
        ds = random_dataset(rng, n, nq=6, d=int(rng.integers(2, 9)), ties=trial % 2 == 0,
                            k=int(rng.integers(1, 30)))
        model = random_model(rng, ds.d, ds.dist_max)
        single = partition_dataset(ds, ClusterClassifier.create(ds.d, 1, seed=trial))
        c = int(rng.integers(2, 7))
        multi = partition_dataset(ds, ClusterClassifier.create(ds.d, c, seed=trial))
        for q in ds.queries:
            want = brute_force_search(q, ds, model).items
            mismatches += list_search(q, single, model).items != want
            mismatches += list_search(q, multi, model, cr=c).items != want
    elapsed = time.perf_counter() - t0
    report(3, "oracle equivalence", mismatches == 0 and elapsed < 60,
           f"{mismatches} mismatching result lists over 600 searches, {elapsed:.1f}s")


# -- 4 ---------------------------------------------------------------------------

def test_c04_cluster_metrics(report):
    # three clusters; per-query fractions worked out by hand
    lists = [[0, 1, 2], [3, 4], [5]]
    truth = GroundTruthSet([(10, 0), (10, 1),      # both in cluster 0 -> 1
                            (11, 0), (11, 3),      # one of two in cluster 0 -> 1/2
                            (12, 3), (12, 5),      # routed to 1: one of two -> 1/2
                            (13, 4), (13, 0), (13, 1), (13, 2)],  # routed to 2: 0 of 4 -> 0
                           {})
    rep = cluster_quality(lists, {10: 0, 11: 0, 12: 1, 13: 2}, truth)
    checks = {
        "P(C_0)": (rep.precision[0], 0.75),
        "P(C_1)": (rep.precision[1], 0.5),
        "P(C_2)": (rep.precision[2], 0.0),
        "P(C)": (rep.p_c, (1 + 0.5 + 0.5 + 0) / 4),
        "IF": (rep.imbalance, (9 + 4 + 1) / 36),
        "IF'": (rep.imbalance_norm, 3 * 14 / 36),
    }
    for c in (1, 2, 3, 7):
        checks[f"IF equal c={c}"] = (imbalance_factor([4] * c), 1 / c)
        checks[f"IF' equal c={c}"] = (c * imbalance_factor([4] * c), 1.0)
    bad = {k: v for k, v in checks.items() if v[0] != v[1]}
    report(4, "cluster metrics", not bad, f"{len(checks) - len(bad)}/{len(checks)} exact"
           + (f", mismatches {bad}" if bad else ""))


# -- 5 and 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_planted_clusters(planted, report):
    ds, n = planted.ds, planted.ds.n
    val = ds.split_queries("val")
    test_ids = ds.split_queries("test")
    ours = evaluate_clusters(planted.index, ds.queries, val, ds.truth)
    _, ivf = ivf_build(ds, PLANTED_C, "embedding_only", seed=7)
    theirs = evaluate_clusters(ivf, ds.queries, val, ds.truth)
    r1 = evaluate(lambda q: list_search(q, planted.index, planted.rel, q.k, 1), ds.queries,
                  test_ids, ds.truth)
    ok = (ours.p_c >= theirs.p_c and ours.p_c >= 0.8 and ours.imbalance_norm <= 2.0
          and r1.mean_candidates <= 2 * n / PLANTED_C)
    report(5, "planted-cluster effectiveness", ok,
           f"LIST P(C)={ours.p_c:.4f} vs IVF P(C)={theirs.p_c:.4f}, LIST IF'={ours.imbalance_norm:.3f}, "
           f"mean candidates={r1.mean_candidates:.0f} (limit {2 * n / PLANTED_C:.0f})")


@pytest.mark.slow
def test_c06_near_brute_force_recall(planted, report):
    ds, n = planted.ds, planted.ds.n
    ids = ds.split_queries("test")
    bf = evaluate(lambda q: brute_force_search(q, ds, planted.rel, q.k), ds.queries, ids, ds.truth)
    r2 = evaluate(lambda q: list_search(q, planted.index, planted.rel, q.k, 2), ds.queries, ids,
                  ds.truth)
    frac = r2.mean_candidates / n
    ratio = r2.means["recall@10"] / bf.means["recall@10"]
    report(6, "near-brute-force recall", ratio >= 0.9 and frac <= 0.3,
           f"recall@10 {r2.means['recall@10']:.4f} vs brute {bf.means['recall@10']:.4f} "
           f"(ratio {ratio:.3f}), scanned {100 * frac:.1f}% of objects")


# -- 7 ---------------------------------------------------------------------------

ABLATION = dict(n_objects=5_000, n_queries=2_000, d=32, n_topics=10, seed=7)


@pytest.mark.slow
def test_c07_spatial_ablation(report):
    ds = generate(SynthConfig(**ABLATION, distance_decay="step"))
    ids = ds.split_queries("test")
    ndcg1 = {}
    for kind in ("step", "linear", "exp"):
        rel = train_relevance(ds, TrainConfig(epochs=40, learning_rate=1e-2, spatial=kind, seed=7))
        rep = evaluate(lambda q: brute_force_search(q, ds, rel, q.k), ds.queries, ids, ds.truth)
        ndcg1[kind] = rep.means["ndcg@1"]
    first = ndcg1["step"] >= ndcg1["linear"]
    second = ndcg1["linear"] >= ndcg1["exp"]
    report(7, "spatial-module ablation", first and second,
           f"NDCG@1 full={ndcg1['step']:.4f}, linear={ndcg1['linear']:.4f}, exp={ndcg1['exp']:.4f}; "
           f"full>=linear {first}, linear>=exp {second}")


# -- 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_c08_monotone_cr(report):
    violations = []
    superset_ok = exact_ok = True
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        ds = generate(SynthConfig(n_objects=int(rng.integers(800, 2000)), n_queries=300, d=16,
                                  n_topics=int(rng.integers(3, 8)), seed=100 + trial))
        rel = train_relevance(ds, TrainConfig(epochs=3, learning_rate=1e-2, seed=trial))
        c = int(rng.integers(3, 7))
        clf = ClusterClassifier.create(ds.d, c, seed=trial)
        lo, hi = default_window(ds.n, c)
        train_index(ds, rel, clf, PseudoLabelConfig(lo, hi, 4),
                    IndexTrainConfig(epochs=5, learning_rate=1e-3, seed=trial))
        idx = partition_dataset(ds, clf)
        ids = ds.split_queries("test")
        curve = []
        for cr in range(1, c + 1):
            rep = evaluate(lambda q: list_search(q, idx, rel, q.k, cr), ds.queries, ids, ds.truth)
            curve.append(rep.means["recall@10"])
        if any(b < a for a, b in zip(curve, curve[1:])):
            violations.append((trial, [round(v, 4) for v in curve]))
        for qid in ids[:20]:
            q = ds.queries.query(qid)
            scanned = [set(sum((idx.lists[j] for j in idx.route(q.emb, q.loc, cr)), []))
                       for cr in range(1, c + 1)]
            superset_ok &= all(a <= b for a, b in zip(scanned, scanned[1:]))
            # recall against the exact top-10 is the quantity the nesting makes monotone
            exact = set(brute_force_search(q, ds, rel, 10).ids)
            found = [len(exact & set(list_search(q, idx, rel, 10, cr).ids)) for cr in range(1, c + 1)]
            exact_ok &= all(a <= b for a, b in zip(found, found[1:]))
    report(8, "monotone cr", not violations,
           f"{20 - len(violations)}/20 trials with nondecreasing ground-truth recall@10"
           + (f", violations (trial, curve) {violations}" if violations else "")
           + f"; candidate sets nested={superset_ok}, recall of exact top-10 monotone={exact_ok}")


# -- 9 ---------------------------------------------------------------------------

def _r2(x, y):
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (slope * x + icept)
    return slope, 1 - resid.var() / y.var()


@pytest.mark.slow
def test_c09_scalability(planted, report):
    sizes = [10_000, 20_000, 40_000, 80_000]
    systems = {}
    for n in sizes:
        ds = generate(SynthConfig(**{**PLANTED, "n_objects": n, "n_queries": 300}))
        idx = partition(ds.objects, planted.clf, planted.ds.bounds)
        systems[n] = (ds, {
            "brute": lambda q, ds=ds: brute_force_search(q, ds.objects, planted.rel, q.k),
            "list": lambda q, idx=idx: list_search(q, idx, planted.rel, q.k, 1)})
    # all data is built before any timing; sizes are interleaved over three rounds
    lat = {(n, name): [] for n in sizes for name in ("brute", "list")}
    for _ in range(3):
        for n in sizes:
            ds, fns = systems[n]
            ids = ds.queries.ids.tolist()
            for name, fn in fns.items():
                evaluate(fn, ds.queries, ids[:10], ds.truth)  # warm-up
                lat[n, name] += evaluate(fn, ds.queries, ids, ds.truth).latency_ns
    brute = [float(np.median(lat[n, "brute"])) for n in sizes]
    listed = [float(np.median(lat[n, "list"])) for n in sizes]
    x = np.array(sizes, dtype=float)
    sb, r2 = _r2(x, np.array(brute))
    sl, _ = _r2(x, np.array(listed))
    ratio = sl / sb
    report(9, "scalability shape", r2 >= 0.98 and ratio <= 0.5,
           f"brute median us {[round(b / 1e3) for b in brute]} (R^2={r2:.4f}), "
           f"LIST c={PLANTED_C} median us {[round(v / 1e3) for v in listed]}, slope ratio {ratio:.3f}")


# -- 10 ----------------------------------------------------------------------------

def _truncations_fail(blob: bytes, reader, errors) -> tuple[int, int]:
    """Every strict prefix must raise a named error; returns (failures, probed)."""
    cuts = sorted(set(range(0, min(len(blob), 64))) | set(range(0, len(blob), max(1, len(blob) // 200))))
    failures = 0
    for cut in cuts:
        try:
            reader(blob[:cut])
        except errors:
            continue
        failures += 1
    return failures, len(cuts)


def test_c10_format_robustness(tmp_path, report):
    rng = np.random.default_rng(10)
    problems = []
    ds = generate(SynthConfig(n_objects=300, n_queries=40, d=8, n_topics=3, seed=10))

    # dataset directory and embedding files
    write_dataset(ds, tmp_path / "ds")
    back = read_dataset(tmp_path / "ds")
    same = (np.array_equal(back.objects.ids, ds.objects.ids)
            and np.array_equal(back.objects.embs, ds.objects.embs)
            and np.array_equal(back.objects.locs, ds.objects.locs)
            and np.array_equal(back.queries.embs, ds.queries.embs)
            and np.array_equal(back.queries.locs, ds.queries.locs)
            and np.array_equal(back.queries.ks, ds.queries.ks) and back.truth == ds.truth)
    if not same:
        problems.append("dataset round trip")
    emb_path = tmp_path / "e.bin"
    arr = rng.standard_normal((17, 5)).astype(np.float32)
    write_embeddings(emb_path, arr)
    if not np.array_equal(read_embeddings(emb_path), arr):
        problems.append("embeddings round trip")
    blob = emb_path.read_bytes()

    def read_emb_bytes(b):
        emb_path.write_bytes(b)
        return read_embeddings(emb_path)

    bad, probed = _truncations_fail(blob, read_emb_bytes, DataFormatError)
    if bad:
        problems.append(f"embeddings: {bad}/{probed} truncations read silently")
    for corrupt in (b"XXXXEMB1" + blob[8:], blob[:8] + (18).to_bytes(4, "little") + blob[12:]):
        try:
            read_emb_bytes(corrupt)
            problems.append("embeddings: corrupted header accepted")
        except DataFormatError:
            pass

    # network, relevance checkpoint, index
    net = DenseNet.create([6, 5, 3], seed=1)
    buf = io.BytesIO()
    write_net(net, buf)
    net_blob = buf.getvalue()
    net2 = read_net(io.BytesIO(net_blob))
    buf2 = io.BytesIO()
    write_net(net2, buf2)
    if buf2.getvalue() != net_blob or not all(
            np.array_equal(a.astype(np.float32), b) for a, b in zip(net.params(), net2.params())):
        problems.append("network round trip")

    rel = train_relevance(ds, TrainConfig(epochs=1, seed=1))
    buf = io.BytesIO()
    write_relevance(rel, buf, "prov")
    rel_blob = buf.getvalue()
    rel2, prov = read_relevance(io.BytesIO(rel_blob))
    buf2 = io.BytesIO()
    write_relevance(rel2, buf2, prov)
    if buf2.getvalue() != rel_blob or prov != "prov":
        problems.append("relevance checkpoint round trip")
    copy = rel.copy()
    q = ds.queries.query(0)
    if not np.array_equal(copy.score(q.emb, q.loc, ds.objects.embs, ds.objects.locs),
                          rel.score(q.emb, q.loc, ds.objects.embs, ds.objects.locs)):
        problems.append("full-precision copy")

    clf = ClusterClassifier.create(ds.d, 3, seed=2)
    idx = partition_dataset(ds, clf, cr_o=2)
    buf = io.BytesIO()
    write_index(idx, buf, "p")
    idx_blob = buf.getvalue()
    idx2, _ = read_index(io.BytesIO(idx_blob), ds.objects)
    buf2 = io.BytesIO()
    write_index(idx2, buf2, "p")
    if idx2.lists != idx.lists or buf2.getvalue() != idx_blob:
        problems.append("index round trip")

    # the network format is embedded in the others, so it is checked via header fields
    corruptions = {
        "network": [b"\0" * 7 + net_blob[7:], net_blob[:7] + b"\0\0\0\0" + net_blob[11:],
                    net_blob[:19] + b"\x09" + net_blob[20:]],
        "relevance": [b"\0" * 8 + rel_blob[8:], rel_blob + b"\0"],
        "index": [b"\0" * 8 + idx_blob[8:], idx_blob + b"\0",
                  idx_blob[:8] + (1).to_bytes(4, "little") + idx_blob[12:]],
    }
    for name, blob_, reader in (
            ("network", net_blob, lambda b: read_net(io.BytesIO(b))),
            ("relevance", rel_blob, lambda b: read_relevance(io.BytesIO(b))),
            ("index", idx_blob, lambda b: read_index(io.BytesIO(b), ds.objects))):
        bad, probed = _truncations_fail(blob_, reader, FormatError)
        if bad:
            problems.append(f"{name}: {bad}/{probed} truncations read silently")
        for corrupt in corruptions[name]:
            try:
                reader(corrupt)
                problems.append(f"{name}: corrupted bytes accepted")
            except FormatError:
                pass

    # trade-off CSV
    rows = [{"system": "list", "param_name": "cr", "param_value": 2, "recall10": 0.1 + 0.2,
             "recall20": 1 / 3, "ndcg1": 0.5, "ndcg5": 0.7, "mean_latency_ns": 1234.5,
             "mean_candidates": 99.25}]
    write_tradeoff_csv(rows, tmp_path / "t.csv")
    if read_tradeoff_csv(tmp_path / "t.csv") != rows:
        problems.append("trade-off CSV round trip")

    report(10, "format robustness", not problems,
           "all round trips exact, every truncation and corruption raised a named error"
           if not problems else "; ".join(problems))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))

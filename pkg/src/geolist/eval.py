"""Effectiveness metrics, timing and trade-off sweeps."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import GeoTable, GroundTruthSet

log = logging.getLogger(__name__)

DEFAULT_METRICS = (("recall", 10), ("recall", 20), ("ndcg", 1), ("ndcg", 5))
TRADEOFF_COLUMNS = ("system", "param_name", "param_value", "recall10", "recall20", "ndcg1",
                    "ndcg5", "mean_latency_ns", "mean_candidates")


def recall_at_k(result_ids: Sequence[int], positives: set, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not positives:
        raise ValueError("recall is undefined without positives")
    return len(set(result_ids[:k]) & positives) / len(positives)


def ndcg_at_k(result_ids: Sequence[int], positives: set, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not positives:
        raise ValueError("NDCG is undefined without positives")
    dcg = sum(1.0 / math.log2(i + 2) for i, o in enumerate(result_ids[:k]) if o in positives)
    idcg = sum(1.0 / math.log2(i + 2) for i in range(min(len(positives), k)))
    return dcg / idcg


_METRIC_FN = {"recall": recall_at_k, "ndcg": ndcg_at_k}


@dataclass
class MetricReport:
    means: dict[str, float]
    per_query: dict[str, list[float]]
    query_ids: list[int]
    latency_ns: list[int] = field(default_factory=list)
    candidates: list[int] = field(default_factory=list)

    @property
    def mean_latency_ns(self) -> float:
        return float(np.mean(self.latency_ns)) if self.latency_ns else float("nan")

    @property
    def median_latency_ns(self) -> float:
        return float(np.median(self.latency_ns)) if self.latency_ns else float("nan")

    @property
    def mean_candidates(self) -> float:
        return float(np.mean(self.candidates)) if self.candidates else float("nan")

    def pretty(self) -> str:
        lines = [f"queries evaluated: {len(self.query_ids)}"]
        lines += [f"{name:>10}: {v:.4f}" for name, v in self.means.items()]
        lines.append(f"latency ns: mean {self.mean_latency_ns:.0f}, median {self.median_latency_ns:.0f}")
        lines.append(f"candidates scanned: mean {self.mean_candidates:.1f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        names = list(self.means)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, delimiter=",", lineterminator="\n")
            w.writerow(["query_id", *names, "latency_ns", "candidates_scanned"])
            for i, q in enumerate(self.query_ids):
                w.writerow([q, *(repr(self.per_query[n][i]) for n in names),
                            self.latency_ns[i], self.candidates[i]])
            w.writerow(["mean", *(repr(self.means[n]) for n in names),
                        repr(self.mean_latency_ns), repr(self.mean_candidates)])


def evaluate(search_fn: Callable, queries: GeoTable, query_ids: Iterable[int], truth: GroundTruthSet,
             metrics: Sequence[tuple[str, int]] = DEFAULT_METRICS) -> MetricReport:
    """Run ``search_fn(query) -> SearchResult`` on each query and aggregate.

    Queries without positives are skipped.  Only the search call is timed.
    """
    depth = max(k for _, k in metrics)
    names = [f"{m}@{k}" for m, k in metrics]
    per_query = {n: [] for n in names}
    used, lat, cand = [], [], []
    skipped = 0
    for qid in query_ids:
        pos = truth.pos(qid)
        if not pos:
            skipped += 1
            continue
        q = queries.query(qid)
        q = type(q)(q.id, q.loc, q.emb, max(q.k, depth))
        t0 = time.perf_counter_ns()
        res = search_fn(q)
        lat.append(time.perf_counter_ns() - t0)
        cand.append(int(res.candidates_scanned))
        ids = res.ids
        for (m, k), n in zip(metrics, names):
            per_query[n].append(_METRIC_FN[m](ids, pos, k))
        used.append(int(qid))
    if skipped:
        log.warning("%d queries without positives excluded from metrics", skipped)
    means = {n: float(np.mean(v)) if v else float("nan") for n, v in per_query.items()}
    return MetricReport(means, per_query, used, lat, cand)


def tradeoff_row(system: str, param_name: str, param_value, report: MetricReport) -> dict:
    m = report.means
    return {
        "system": system, "param_name": param_name, "param_value": param_value,
        "recall10": m.get("recall@10", float("nan")), "recall20": m.get("recall@20", float("nan")),
        "ndcg1": m.get("ndcg@1", float("nan")), "ndcg5": m.get("ndcg@5", float("nan")),
        "mean_latency_ns": report.mean_latency_ns, "mean_candidates": report.mean_candidates,
    }


def tradeoff_sweep(systems: dict[str, tuple[str, Sequence, Callable]], queries: GeoTable,
                   query_ids: Sequence[int], truth: GroundTruthSet) -> list[dict]:
    """One row per (system, setting).

    ``systems`` maps a name to ``(param_name, values, make_search_fn)`` where
    ``make_search_fn(value)`` returns a search function.  A system with no
    knob uses ``("none", [0], ...)``.
    """
    rows = []
    for name, (param, values, make) in systems.items():
        for v in values:
            rep = evaluate(make(v), queries, query_ids, truth)
            rows.append(tradeoff_row(name, param, v, rep))
            log.info("%s %s=%s recall@10=%.4f candidates=%.0f", name, param, v,
                     rows[-1]["recall10"], rows[-1]["mean_candidates"])
    return rows


def write_tradeoff_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRADEOFF_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_tradeoff_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            row = {"system": r["system"], "param_name": r["param_name"]}
            pv = r["param_value"]
            row["param_value"] = int(pv) if pv.lstrip("-").isdigit() else float(pv)
            for k in TRADEOFF_COLUMNS[3:]:
                row[k] = float(r[k])
            out.append(row)
    return out

"""Link ranking (raw / static / time-aware filtering, mean-tie ranks) and time metrics."""

from __future__ import annotations

import json
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import model as gm
from .numerics import no_grad, precision
from .tkg_store import Dataset, Direction, Quadruple
from .training import QueryBatch, build_queries, time_targets_mask

PROTOCOLS = ("raw", "static", "time-aware")


def rank_with_ties(scores, truth: int, mask: Iterable[int] = ()) -> float:
    """Rank of ``truth`` among unmasked candidates; ties share the mean of their positions."""
    scores = np.asarray(scores)
    mask = set(int(m) for m in mask)
    if truth in mask:
        raise ValueError("the true id must not be masked")
    keep = np.ones(len(scores), dtype=bool)
    if mask:
        keep[list(mask)] = False
    target = scores[truth]
    higher = int(np.count_nonzero(scores[keep] > target))
    ties = int(np.count_nonzero(scores[keep] == target))  # includes truth itself
    return higher + (ties + 1) / 2.0


class FactIndex:
    """All known facts (train+valid+test) keyed for filter-mask construction."""

    def __init__(self, facts: Iterable[Quadruple]):
        self.by_time: dict[tuple[Direction, int, int, float], set[int]] = defaultdict(set)
        self.static: dict[tuple[Direction, int, int], set[int]] = defaultdict(set)
        for q in facts:
            self.by_time[(Direction.SUBJECT, q.subject, q.predicate, q.timestamp)].add(q.object)
            self.by_time[(Direction.OBJECT, q.object, q.predicate, q.timestamp)].add(q.subject)
            self.static[(Direction.SUBJECT, q.subject, q.predicate)].add(q.object)
            self.static[(Direction.OBJECT, q.object, q.predicate)].add(q.subject)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "FactIndex":
        return cls(dataset.train + dataset.valid + dataset.test)


def build_filter_mask(protocol: str, direction: Direction, anchor: int, predicate: int, truth: int,
                      t: float, index: FactIndex) -> set[int]:
    """Competitors to exclude for query ``(anchor, predicate, ?, t)`` (or its mirror)."""
    direction = Direction(direction)
    if protocol == "raw":
        return set()
    if protocol == "static":
        known = index.static.get((direction, anchor, predicate), set())
    elif protocol == "time-aware":
        known = index.by_time.get((direction, anchor, predicate, t), set())
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return {c for c in known if c != truth}


def aggregate_link(ranks: Sequence[float], ks=(1, 3, 10)) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.float64)
    if len(ranks) == 0:
        raise ValueError("no ranks to aggregate")
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in ks:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


def aggregate_time(abs_errors: Sequence[float], ks=(1, 3, 10)) -> dict[str, float]:
    err = np.asarray(abs_errors, dtype=np.float64)
    if len(err) == 0:
        raise ValueError("no time errors to aggregate")
    out = {"mae": float(np.mean(err))}
    for k in ks:
        out[f"chits@{k}"] = float(np.mean(err < k))
    return out


# ---------------------------------------------------------------------------
# model evaluation


@dataclass
class RankResult:
    query: int
    direction: Direction
    rank: float
    protocol: str


@dataclass
class TimeResult:
    query: int
    t_true: float
    t_pred: float

    @property
    def abs_error(self) -> float:
        return abs(self.t_true - self.t_pred)


@dataclass
class EvalReport:
    split: str
    protocol: str
    metrics: dict[str, float]
    per_direction: dict[str, dict[str, float]]
    ranks: dict[str, list[RankResult]] = field(repr=False)
    times: list[TimeResult] = field(repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"split": self.split, "protocol": self.protocol, "metrics": self.metrics,
                "per_direction": self.per_direction}


def eval_queries(dataset: Dataset, split: str, max_history: int, train_only_history: bool = False) -> QueryBatch:
    """Quadruples of ``split`` with histories of all earlier facts (or train facts only)."""
    events = dataset.train if train_only_history else dataset.train + dataset.valid + dataset.test
    return build_queries(dataset.split(split), events, max_history)


def score_queries(model: gm.GHNN, queries: QueryBatch, chunk: int = 512, threads: int = 1) -> np.ndarray:
    """Log-intensity of every candidate: rows ``[0, Q)`` object queries, ``[Q, 2Q)`` subject queries."""
    Q = len(queries.quads)
    t = queries.times

    def run(lo: int) -> np.ndarray:
        hi = min(lo + chunk, Q)
        hists = queries.sp[lo:hi] + queries.op[lo:hi]
        with no_grad(), precision(model.dtype):
            enc = gm.encode_batch(model, gm.make_history_batch(hists))
            tt = np.concatenate([t[lo:hi], t[lo:hi]])
            return np.asarray(gm.log_intensity_all(model, enc, tt).data, dtype=np.float64)

    starts = list(range(0, Q, chunk))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    sp = [p[: len(p) // 2] for p in parts]
    op = [p[len(p) // 2:] for p in parts]
    n = model.config.num_entities
    return np.concatenate(sp + op, axis=0) if parts else np.zeros((0, n))


def predict_times(model: gm.GHNN, queries: QueryBatch, horizon: float, grid_points: int,
                  renormalize: bool = True, chunk: int = 256) -> np.ndarray:
    """Expected next-occurrence time per quadruple (nan when both histories are empty)."""
    Q = len(queries.quads)
    out = np.full(Q, np.nan)
    mask = time_targets_mask(queries)
    idx = np.flatnonzero(mask)
    for lo in range(0, len(idx), chunk):
        sub = queries.take(idx[lo:lo + chunk])
        with no_grad(), precision(model.dtype):
            enc_sp = gm.encode_history(model, sub.sp)
            enc_op = gm.encode_history(model, sub.op)
            pred = gm.time_density_and_expectation(model, enc_sp, enc_op, sub.events, horizon, grid_points,
                                                   renormalize)
        out[idx[lo:lo + chunk]] = pred.expected.data
    return out


def rank_scores(scores: np.ndarray, queries: QueryBatch, protocol: str, index: FactIndex) -> list[RankResult]:
    Q = len(queries.quads)
    results = []
    for i, q in enumerate(queries.quads):
        mask = build_filter_mask(protocol, Direction.SUBJECT, q.subject, q.predicate, q.object, q.timestamp, index)
        results.append(RankResult(i, Direction.SUBJECT, rank_with_ties(scores[i], q.object, mask), protocol))
    for i, q in enumerate(queries.quads):
        mask = build_filter_mask(protocol, Direction.OBJECT, q.object, q.predicate, q.subject, q.timestamp, index)
        results.append(RankResult(i, Direction.OBJECT, rank_with_ties(scores[Q + i], q.subject, mask), protocol))
    return results


def evaluate_link(model: gm.GHNN, dataset: Dataset, split: str, protocol: str = "time-aware",
                  max_history: int = 10, train_only_history: bool = False) -> dict[str, float]:
    queries = eval_queries(dataset, split, max_history, train_only_history)
    scores = score_queries(model, queries)
    ranks = rank_scores(scores, queries, protocol, FactIndex.from_dataset(dataset))
    return aggregate_link([r.rank for r in ranks])


def evaluate(model: gm.GHNN, dataset: Dataset, split: str = "test", protocol: str = "time-aware",
             max_history: int = 10, horizon: float | None = None, grid_points: int = 1000,
             renormalize: bool = True, train_only_history: bool = False, threads: int = 1,
             protocols: Sequence[str] | None = None, time_ks=(1, 3, 10)) -> EvalReport:
    """Rank both directions of every quadruple in ``split`` and predict its occurrence time.

    ``protocols`` lists every protocol to rank under (defaults to ``protocol`` only);
    ``metrics`` holds the primary protocol, per-protocol MRRs are added as
    ``<protocol>/mrr`` etc.
    """
    if dataset.num_entities != model.config.num_entities or dataset.num_predicates != model.config.num_predicates:
        raise ValueError("dataset vocabulary does not match the model")
    protocols = list(protocols or [protocol])
    if protocol not in protocols:
        protocols.insert(0, protocol)
    queries = eval_queries(dataset, split, max_history, train_only_history)
    if not queries.quads:
        raise ValueError(f"split {split!r} is empty")
    scores = score_queries(model, queries, threads=threads)
    index = FactIndex.from_dataset(dataset)
    ranks = {p: rank_scores(scores, queries, p, index) for p in protocols}
    metrics = dict(aggregate_link([r.rank for r in ranks[protocol]]))
    per_direction = {}
    for d in Direction:
        per_direction[d.value] = aggregate_link([r.rank for r in ranks[protocol] if r.direction == d])
    for p in protocols:
        for k, v in aggregate_link([r.rank for r in ranks[p]]).items():
            metrics[f"{p}/{k}"] = v
    times: list[TimeResult] = []
    if horizon is not None:
        pred = predict_times(model, queries, horizon, grid_points, renormalize)
        times = [TimeResult(i, q.timestamp, float(pred[i])) for i, q in enumerate(queries.quads)
                 if not np.isnan(pred[i])]
        if times:
            metrics.update(aggregate_time([r.abs_error for r in times], time_ks))
            metrics["time_queries"] = len(times)
    metrics["queries"] = len(ranks[protocol])
    return EvalReport(split, protocol, metrics, per_direction, ranks, times, scores)


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_dump(report: EvalReport, queries: Sequence[Quadruple], path) -> None:
    """Tab-separated per-query lines: query, direction, rank, t_true, t_pred."""
    t_pred = {r.query: r.t_pred for r in report.times}
    with open(path, "w") as fh:
        fh.write("query\tdirection\trank\tt_true\tt_pred\n")
        for r in report.ranks[report.protocol]:
            q = queries[r.query]
            tp = t_pred.get(r.query, float("nan"))
            fh.write(f"{q.subject} {q.predicate} {q.object} {q.timestamp:g}\t{r.direction.value}\t"
                     f"{r.rank:g}\t{q.timestamp:g}\t{tp:.6g}\n")


def save_scores(report: EvalReport, queries: Sequence[Quadruple], path) -> None:
    """Score matrix plus query metadata, for re-ranking outside this package."""
    quads = np.array([(q.subject, q.predicate, q.object) for q in queries], dtype=np.int64).reshape(-1, 3)
    times = np.array([q.timestamp for q in queries], dtype=np.float64)
    np.savez(path, scores=report.scores, quads=quads, times=times)

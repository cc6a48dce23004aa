"""Top-K recommendation and accuracy / long-tail metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from hid.dataset import Catalog, Session

DEFAULT_K = 20


@dataclass
class MetricReport:
    K: int
    hr: float
    mrr: float
    thr: float | None  # None when no test label is a tail item
    tmrr: float | None
    tcov: float  # |recommended tail| / |tail items|
    tcov_all: float  # |recommended tail| / |V|, the formula as printed
    tail: float
    n_sessions: int
    n_tail_sessions: int

    def to_json(self) -> dict:
        return asdict(self)


def _mean(values) -> float:
    # correctly rounded sum, so the result does not depend on session order
    values = list(values)
    return math.fsum(values) / len(values)


def topk_from_scores(scores: np.ndarray, K: int) -> np.ndarray:
    """Row-wise top-K indices by descending score; equal scores keep ascending item order."""
    scores = np.atleast_2d(scores)
    if K > scores.shape[1]:
        raise ValueError(f"K={K} exceeds the number of items {scores.shape[1]}")
    return np.argsort(-scores, axis=1, kind="stable")[:, :K]


def recommend_topk(model, session: list[int], K: int = DEFAULT_K) -> list[int]:
    return topk_from_scores(model.scores([session]), K)[0].tolist()


def hit_and_rank(topk, label: int) -> tuple[int, float]:
    topk = list(topk)
    if label in topk:
        return 1, 1.0 / (topk.index(label) + 1)
    return 0, 0.0


def tail_metrics(topk_lists, labels, catalog: Catalog) -> tuple[float | None, float | None]:
    hits, rr = [], []
    for topk, label in zip(topk_lists, labels):
        if catalog.is_head[label]:
            continue
        h, r = hit_and_rank(topk, label)
        hits.append(h)
        rr.append(r)
    if not hits:
        return None, None
    return _mean(hits), _mean(rr)


def tail_coverage(topk_lists, catalog: Catalog, denominator: str = "tail") -> float:
    tail = ~catalog.is_head
    seen = np.zeros(catalog.m, dtype=bool)
    for topk in topk_lists:
        seen[np.asarray(topk, dtype=np.int64)] = True
    covered = int((seen & tail).sum())
    if denominator == "tail":
        return covered / int(tail.sum()) if tail.any() else 0.0
    if denominator == "all":
        return covered / catalog.m
    raise ValueError(f"denominator must be 'tail' or 'all', got {denominator!r}")


def tail_share(topk_lists, catalog: Catalog, K: int) -> float:
    if K < 1:
        raise ValueError("K must be >= 1")
    topk_lists = list(topk_lists)
    if not topk_lists:
        return 0.0
    tail = ~catalog.is_head
    return _mean([tail[np.asarray(t, dtype=np.int64)].sum() / K for t in topk_lists])


def metrics_from_topk(topk: np.ndarray, labels, catalog: Catalog, K: int) -> MetricReport:
    """All six metrics in one vectorized pass over a ``(U, K)`` recommendation matrix."""
    topk = np.asarray(topk, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if topk.shape[0] == 0:
        raise ValueError("no sessions to evaluate")
    match = topk == labels[:, None]
    hit = match.any(axis=1)
    pos = np.argmax(match, axis=1)
    rr = np.where(hit, 1.0 / (pos + 1), 0.0)
    is_tail_label = ~catalog.is_head[labels]
    tail = ~catalog.is_head
    n_tail = int(tail.sum())
    seen = np.zeros(catalog.m, dtype=bool)
    seen[topk.reshape(-1)] = True
    covered = int((seen & tail).sum())
    return MetricReport(
        K=K,
        hr=_mean(hit.astype(np.float64).tolist()),
        mrr=_mean(rr.tolist()),
        thr=_mean(hit[is_tail_label].astype(np.float64).tolist()) if is_tail_label.any() else None,
        tmrr=_mean(rr[is_tail_label].tolist()) if is_tail_label.any() else None,
        tcov=covered / n_tail if n_tail else 0.0,
        tcov_all=covered / catalog.m,
        tail=_mean((tail[topk].sum(axis=1) / K).tolist()),
        n_sessions=int(labels.size),
        n_tail_sessions=int(is_tail_label.sum()),
    )


def evaluate(model, sessions: list[Session], catalog: Catalog, K: int = DEFAULT_K) -> MetricReport:
    if not sessions:
        raise ValueError("test split is empty")
    scores = model.scores([s.items for s in sessions])
    topk = topk_from_scores(scores, K)
    return metrics_from_topk(topk, [s.label for s in sessions], catalog, K)


def write_metrics(path: str | Path, report: MetricReport, extra: dict | None = None) -> None:
    obj = report.to_json()
    if extra:
        obj.update(extra)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def plot_metrics(path: str | Path, report: MetricReport) -> None:
    """Bar chart of the six metrics as a reproducible SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hid"
    names = ["HR", "MRR", "tHR", "tMRR", "tCov", "Tail"]
    values = [report.hr, report.mrr, report.thr or 0.0, report.tmrr or 0.0, report.tcov, report.tail]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(names, values, color="#4c72b0")
    ax.set_ylim(0, 1)
    ax.set_title(f"@{report.K}")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)

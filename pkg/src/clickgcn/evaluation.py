"""Offline retrieval metrics: top-k accuracy, AUC and frequency buckets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import ClickLog

BUCKETS = ("head", "torso", "tail")

_TOPK_STREAM = 0
_AUC_STREAM = 1


@dataclass
class Embeddings:
    """Precomputed final embeddings for every query and item node."""

    queries: np.ndarray
    items: np.ndarray
    name: str = "model"

    @classmethod
    def from_model(cls, model, name: str = "model") -> "Embeddings":
        return cls(model.embed_queries(), model.embed_items(), name)


def negative_pool(n_items: int, positive: int, size: int, seed: int, pair: int,
                  stream: int = _TOPK_STREAM) -> np.ndarray:
    """Uniform sample of distinct items other than ``positive``.

    Seeded by (seed, stream, pair) so every model sees the same pool and
    pairs can be processed in any order.
    """
    size = min(size, n_items - 1)
    rng = np.random.default_rng([seed, stream, pair])
    draw = rng.choice(n_items - 1, size=size, replace=False)
    return draw + (draw >= positive)


def positive_rank(pos_score: float, neg_scores: np.ndarray) -> int:
    """1 + #negatives strictly above + floor(#ties / 2)."""
    above = int(np.count_nonzero(neg_scores > pos_score))
    ties = int(np.count_nonzero(neg_scores == pos_score))
    return 1 + above + ties // 2


def pair_ranks(emb: Embeddings, pairs: np.ndarray, pool_size: int = 100, seed: int = 0) -> np.ndarray:
    ranks = np.empty(len(pairs), dtype=np.int64)
    n_items = len(emb.items)
    for j, (q, i) in enumerate(pairs):
        pool = negative_pool(n_items, i, pool_size, seed, j, _TOPK_STREAM)
        zq = emb.queries[q]
        ranks[j] = positive_rank(emb.items[i] @ zq, emb.items[pool] @ zq)
    return ranks


def topk_accuracy(emb: Embeddings, pairs: np.ndarray, pool_size: int = 100,
                  k_list=(1, 10), seed: int = 0) -> dict[int, float]:
    if pool_size < max(k_list):
        raise ValueError("pool_size must be >= max(k_list)")
    ranks = pair_ranks(emb, pairs, pool_size, seed)
    return {k: float(np.mean(ranks <= k)) for k in k_list}


def auc_from_scores(pos_scores, neg_scores) -> float:
    """AUC over every (positive, negative) pair, ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.sort(np.asarray(neg_scores, dtype=np.float64))
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return float(wins / (len(pos) * len(neg)))


def auc_counts(pos_score: float, neg_scores: np.ndarray) -> tuple[float, int]:
    wins = np.count_nonzero(neg_scores < pos_score) + 0.5 * np.count_nonzero(neg_scores == pos_score)
    return float(wins), len(neg_scores)


def auc(emb: Embeddings, pairs: np.ndarray, negatives_per_pos: int = 100, seed: int = 0) -> float:
    """Fraction of (positive, own sampled negative) pairs ordered correctly."""
    wins = total = 0.0
    for j, (q, i) in enumerate(pairs):
        pool = negative_pool(len(emb.items), i, negatives_per_pos, seed, j, _AUC_STREAM)
        zq = emb.queries[q]
        w, n = auc_counts(emb.items[i] @ zq, emb.items[pool] @ zq)
        wins += w
        total += n
    return wins / total


def bucket_queries(train: ClickLog, eval_pairs=None) -> np.ndarray:
    """Bucket (0 head, 1 torso, 2 tail) for every query of ``train``'s table.

    Queries sorted by training frequency (desc, index asc); head is the
    shortest prefix holding >= 1/3 of all clicks, torso the shortest
    non-empty continuation reaching >= 2/3, tail the rest, including queries
    with no training clicks.
    """
    freq = train.query_freq
    buckets = np.full(train.n_queries, 2, dtype=np.int64)
    seen = np.flatnonzero(freq > 0)
    if len(seen) == 0:
        return buckets
    order = seen[np.lexsort((seen, -freq[seen]))]
    cum = np.cumsum(freq[order])
    total = int(cum[-1])
    head_end = int(np.argmax(3 * cum >= total)) + 1
    buckets[order[:head_end]] = 0
    if head_end < len(order):
        rest = 3 * cum[head_end:] >= 2 * total
        torso_end = head_end + int(np.argmax(rest)) + 1
        buckets[order[head_end:torso_end]] = 1
    return buckets


def error_reduction_rate(base_top1_pct: float, new_top1_pct: float) -> float:
    """Relative shrinkage of the top-1 error, in percent."""
    if base_top1_pct == 100:
        raise ValueError("error reduction rate is undefined for a perfect baseline")
    if not 0 <= base_top1_pct < 100:
        raise ValueError("base_top1_pct must be in [0, 100)")
    return 100.0 * (new_top1_pct - base_top1_pct) / (100.0 - base_top1_pct)


@dataclass
class EvalReport:
    name: str
    top1: float
    top10: float
    auc: float
    sec_per_step: float | None
    bucket_top1: dict[str, float]
    bucket_pairs: dict[str, int]
    hits1: np.ndarray = field(repr=False)
    pair_buckets: np.ndarray = field(repr=False)
    baseline: "EvalReport | None" = None

    @property
    def error_reduction(self) -> dict[str, float] | None:
        if self.baseline is None:
            return None
        out = {"overall": error_reduction_rate(100 * self.baseline.top1, 100 * self.top1)}
        for b in BUCKETS:
            if self.bucket_pairs[b]:
                out[b] = error_reduction_rate(100 * self.baseline.bucket_top1[b],
                                              100 * self.bucket_top1[b])
        return out


def _report(emb: Embeddings, pairs, buckets, pool_size, negatives_per_pos, seed, sec_per_step):
    ranks = pair_ranks(emb, pairs, pool_size, seed)
    hits1 = ranks <= 1
    pair_buckets = buckets[pairs[:, 0]]
    bucket_top1, bucket_pairs = {}, {}
    for b, name in enumerate(BUCKETS):
        sel = pair_buckets == b
        bucket_pairs[name] = int(sel.sum())
        bucket_top1[name] = float(hits1[sel].mean()) if sel.any() else float("nan")
    return EvalReport(emb.name, float(hits1.mean()), float(np.mean(ranks <= 10)),
                      auc(emb, pairs, negatives_per_pos, seed), sec_per_step,
                      bucket_top1, bucket_pairs, hits1, pair_buckets)


def evaluate(model: Embeddings, eval_pairs: np.ndarray, train: ClickLog,
             baseline: Embeddings | None = None, pool_size: int = 100,
             negatives_per_pos: int = 100, seed: int = 0, sec_per_step: float | None = None,
             baseline_sec_per_step: float | None = None) -> EvalReport:
    """Score ``model`` (and optionally ``baseline``) on identical negative pools."""
    eval_pairs = np.asarray(eval_pairs, dtype=np.int64).reshape(-1, 2)
    if len(eval_pairs) == 0:
        raise ValueError("evaluation set is empty")
    if pool_size < 10:
        raise ValueError("pool_size must be >= 10 for top-10 accuracy")
    buckets = bucket_queries(train)
    report = _report(model, eval_pairs, buckets, pool_size, negatives_per_pos, seed, sec_per_step)
    if baseline is not None:
        report.baseline = _report(baseline, eval_pairs, buckets, pool_size, negatives_per_pos,
                                  seed, baseline_sec_per_step)
    return report


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "n/a"
    return f"{x:.4f}"


def _pct(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return "n/a"
    return f"{100 * x:.2f}%"


def format_report(report: EvalReport) -> str:
    """Text tables (overall metrics, then per-bucket top-1) plus key=value lines."""
    rows = [r for r in (report.baseline, report) if r is not None]
    lines = [f"{'method':<16}{'Top-1':>10}{'Top-10':>10}{'AUC':>10}{'Sec./Step':>12}"]
    for r in rows:
        lines.append(f"{r.name:<16}{_pct(r.top1):>10}{_pct(r.top10):>10}"
                     f"{r.auc:>10.4f}{_fmt(r.sec_per_step):>12}")
    lines.append("")
    lines.append(f"{'top-1':<24}" + "".join(f"{b.capitalize():>10}" for b in BUCKETS))
    for r in rows:
        lines.append(f"{r.name:<24}" + "".join(f"{_pct(r.bucket_top1[b]):>10}" for b in BUCKETS))
    err = report.error_reduction
    if err is not None:
        base = report.baseline
        diff = [report.bucket_top1[b] - base.bucket_top1[b] for b in BUCKETS]
        lines.append(f"{'Difference':<24}" + "".join(f"{_pct(d):>10}" for d in diff))
        lines.append(f"{'Error reduction rate':<24}"
                     + "".join(f"{err.get(b, float('nan')):>9.2f}%" for b in BUCKETS))
    lines.append("")
    lines.append("[metrics]")
    kv = {"top1": report.top1, "top10": report.top10, "auc": report.auc,
          "sec_per_step": report.sec_per_step, "eval_pairs": len(report.hits1)}
    for b in BUCKETS:
        kv[f"{b}_top1"] = report.bucket_top1[b]
        kv[f"{b}_pairs"] = report.bucket_pairs[b]
    if err is not None:
        base = report.baseline
        kv.update({"baseline_top1": base.top1, "baseline_top10": base.top10,
                   "baseline_auc": base.auc})
        for b in BUCKETS:
            kv[f"baseline_{b}_top1"] = base.bucket_top1[b]
        for key, val in err.items():
            kv[f"error_reduction_{key}"] = val
    for key, val in kv.items():
        if val is None:
            val = "n/a"
        elif isinstance(val, float):
            val = f"{val:.6f}"
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"

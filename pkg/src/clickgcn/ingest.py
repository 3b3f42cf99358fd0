"""Catalog and click-log parsing, vocabulary, synthetic data and train/eval split."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

OOV = 0


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class Vocab:
    """Token table. ``tokens[0]`` is the OOV slot and has no surface form."""

    tokens: list[str]
    counts: list[int]
    _ids: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.counts) or not self.tokens:
            raise ValueError("tokens and counts must be non-empty and aligned")
        self._ids = {tok: i for i, tok in enumerate(self.tokens) if i != OOV}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, OOV)

    def token(self, idx: int) -> str | None:
        return None if idx == OOV else self.tokens[idx]

    @classmethod
    def from_ids(cls, mapping: dict[str, int]) -> "Vocab":
        """Build from an explicit token->id map (ids must be dense from 1)."""
        size = len(mapping) + 1
        tokens = [""] * size
        for tok, i in mapping.items():
            if not 1 <= i < size or tokens[i]:
                raise ValueError(f"ids must be dense in [1, {size}): {mapping}")
            tokens[i] = tok
        return cls(tokens, [0] * size)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id(tok) for tok in text.lower().split()]


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    """Count lowercase whitespace tokens; ids by count desc, then token asc."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counter = Counter(tok for text in texts for tok in text.lower().split())
    kept = sorted(
        ((tok, c) for tok, c in counter.items() if c >= min_count),
        key=lambda tc: (-tc[1], tc[0]),
    )
    return Vocab([""] + [t for t, _ in kept], [0] + [c for _, c in kept])


@dataclass
class Catalog:
    external_ids: list[str]
    titles: list[str]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.external_ids) != len(self.titles):
            raise ValueError("external_ids and titles must be aligned")
        self.index = {ext: i for i, ext in enumerate(self.external_ids)}
        if len(self.index) != len(self.external_ids):
            raise ValueError("duplicate external item id")

    def __len__(self) -> int:
        return len(self.external_ids)

    def title_tokens(self, vocab: Vocab) -> list[list[int]]:
        return [tokenize(t, vocab) for t in self.titles]


@dataclass
class ClickLog:
    """Aggregated click records over a distinct-query table.

    Query texts are stored normalized (lowercase, single spaces). Records are
    parallel arrays; ``query_texts`` may contain queries without records
    (e.g. the train half of a split keeps the full table).
    """

    query_texts: list[str]
    query_ids: np.ndarray
    item_ids: np.ndarray
    counts: np.ndarray
    n_items: int
    dropped_rows: int = 0
    query_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.query_ids = np.asarray(self.query_ids, dtype=np.int64)
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if not (len(self.query_ids) == len(self.item_ids) == len(self.counts)):
            raise ValueError("record arrays must be aligned")
        if len(self.counts) and self.counts.min() <= 0:
            raise ValueError("click counts must be positive")
        self.query_index = {q: i for i, q in enumerate(self.query_texts)}

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def n_queries(self) -> int:
        return len(self.query_texts)

    @property
    def query_freq(self) -> np.ndarray:
        return np.bincount(self.query_ids, weights=self.counts,
                           minlength=self.n_queries).astype(np.int64)

    def query_tokens(self, vocab: Vocab) -> list[list[int]]:
        return [tokenize(q, vocab) for q in self.query_texts]

    def subset(self, rows: np.ndarray) -> "ClickLog":
        """Records at ``rows``, sharing this log's query table."""
        return ClickLog(list(self.query_texts), self.query_ids[rows],
                        self.item_ids[rows], self.counts[rows], self.n_items)


def _read_rows(path, ncols: int):
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            cols = line.split("\t")
            if len(cols) != ncols:
                raise ParseError(path, lineno, f"expected {ncols} columns, got {len(cols)}")
            yield lineno, cols


def read_catalog_titles(path) -> list[str]:
    return [cols[1] for _, cols in _read_rows(path, 2)]


def read_click_queries(path) -> list[str]:
    return [cols[0] for _, cols in _read_rows(path, 3)]


def parse_catalog(path) -> Catalog:
    ids, titles, seen = [], [], set()
    for lineno, (ext, title) in _read_rows(path, 2):
        if ext in seen:
            raise ParseError(path, lineno, f"duplicate item id {ext!r}")
        seen.add(ext)
        ids.append(ext)
        titles.append(title)
    return Catalog(ids, titles)


def parse_clicks(path, catalog: Catalog) -> ClickLog:
    """Parse ``query<TAB>item_id<TAB>count`` rows, summing duplicate pairs.

    Query indices follow first appearance; rows naming unknown items are
    dropped and counted.
    """
    queries: dict[str, int] = {}
    pairs: dict[tuple[int, int], int] = {}
    dropped = 0
    for lineno, (qtext, ext, raw) in _read_rows(path, 3):
        try:
            count = int(raw)
        except ValueError:
            raise ParseError(path, lineno, f"count is not an integer: {raw!r}") from None
        if count <= 0:
            raise ParseError(path, lineno, f"count must be positive: {count}")
        item = catalog.index.get(ext)
        if item is None:
            dropped += 1
            continue
        q = queries.setdefault(normalize(qtext), len(queries))
        pairs[q, item] = pairs.get((q, item), 0) + count
    if dropped:
        logger.warning("%s: dropped %d click rows with unknown item ids", path, dropped)
    keys = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    return ClickLog(list(queries), keys[:, 0], keys[:, 1],
                    np.fromiter(pairs.values(), dtype=np.int64, count=len(pairs)),
                    n_items=len(catalog), dropped_rows=dropped)


def write_catalog(catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ext, title in zip(catalog.external_ids, catalog.titles):
            fh.write(f"{ext}\t{title}\n")


def write_clicks(log: ClickLog, catalog: Catalog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q, i, c in zip(log.query_ids, log.item_ids, log.counts):
            fh.write(f"{log.query_texts[q]}\t{catalog.external_ids[i]}\t{c}\n")


def generate_synthetic(n_clusters: int = 20, n_queries: int = 2000, n_items: int = 1000,
                       n_clicks: int = 100_000, zipf_s: float = 1.1, noise_eps: float = 0.1,
                       seed: int = 0) -> tuple[Catalog, ClickLog]:
    """Clustered Zipfian click data.

    Query ``n`` and item ``n`` belong to cluster ``n % n_clusters``. Each
    text is a shared cluster token plus a unique token. Queries are drawn
    with probability proportional to ``rank ** -zipf_s``; the clicked item
    is uniform within the query's cluster with probability ``1 - noise_eps``
    and uniform over the catalog otherwise.
    """
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if not 0.0 <= noise_eps <= 1.0:
        raise ValueError("noise_eps must be in [0, 1]")
    if zipf_s <= 0:
        raise ValueError("zipf_s must be > 0")
    if n_items < n_clusters:
        raise ValueError("need at least one item per cluster")
    rng = np.random.default_rng(seed)

    catalog = Catalog([f"I{n}" for n in range(n_items)],
                      [f"c{n % n_clusters} i{n}" for n in range(n_items)])

    p = np.arange(1, n_queries + 1, dtype=np.float64) ** -zipf_s
    q = rng.choice(n_queries, size=n_clicks, p=p / p.sum())
    cluster = q % n_clusters
    per_cluster = np.bincount(np.arange(n_items) % n_clusters, minlength=n_clusters)
    # item n of cluster c is c + n_clusters * j, j uniform in [0, per_cluster[c])
    local = np.floor(rng.random(n_clicks) * per_cluster[cluster]).astype(np.int64)
    in_cluster = cluster + n_clusters * local
    noisy = rng.random(n_clicks) < noise_eps
    anywhere = rng.integers(0, n_items, size=n_clicks)
    item = np.where(noisy, anywhere, in_cluster)

    pair_key = q * n_items + item
    keys, counts = np.unique(pair_key, return_counts=True)
    rec_q, rec_i = keys // n_items, keys % n_items
    used, rec_q = np.unique(rec_q, return_inverse=True)
    texts = [f"c{n % n_clusters} q{n}" for n in used]
    return catalog, ClickLog(texts, rec_q, rec_i, counts, n_items=n_items)


def split_train_eval(log: ClickLog, eval_fraction: float, seed: int):
    """Hold out ``floor(eval_fraction * len(log))`` shuffled records.

    Returns ``(train_log, eval_pairs)`` where ``eval_pairs`` is an ``(n, 2)``
    int array of (query index, item index).
    """
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(log))
    n_eval = math.floor(eval_fraction * len(log))
    held = perm[:n_eval]
    train = log.subset(np.sort(perm[n_eval:]))
    pairs = np.stack([log.query_ids[held], log.item_ids[held]], axis=1)
    return train, pairs

"""Weighted bipartite click graph, pruning and neighbor sampling.

Nodes live in one global id space: query ``q`` is node ``q`` and item ``i``
is node ``n_queries + i``. Each node's neighbor list is stored CSR-style,
sorted by weight descending with ties broken by neighbor id ascending.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .ingest import ClickLog

GRAPH_MAGIC = b"SGCG"
GRAPH_VERSION = 1

DEFAULT_MAX_NEIGHBORS = 50
DEFAULT_FANOUT = 10

PAD = -1


@dataclass(frozen=True)
class Adjacency:
    """One direction of the graph: row ``r``'s neighbors are
    ``neighbors[offsets[r]:offsets[r+1]]`` (local indices of the other side)."""

    offsets: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.offsets[r], self.offsets[r + 1]
        return self.neighbors[lo:hi], self.weights[lo:hi]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)


@dataclass(frozen=True)
class BipartiteGraph:
    n_queries: int
    n_items: int
    query_items: Adjacency
    item_queries: Adjacency

    @property
    def n_nodes(self) -> int:
        return self.n_queries + self.n_items

    def query_node(self, q) -> int:
        return q

    def item_node(self, i):
        return self.n_queries + i

    def is_query(self, node):
        return node < self.n_queries

    def neighbors(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        """Global neighbor ids and weights of ``node``."""
        lo, hi = self.csr[0][node], self.csr[0][node + 1]
        return self.csr[1][lo:hi], self.csr[2][lo:hi]

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both directions stacked over global ids: (offsets, neighbors, weights)."""
        qi, iq = self.query_items, self.item_queries
        offsets = np.concatenate([qi.offsets, qi.offsets[-1] + iq.offsets[1:]])
        neighbors = np.concatenate([qi.neighbors.astype(np.int64) + self.n_queries,
                                    iq.neighbors.astype(np.int64)])
        weights = np.concatenate([qi.weights, iq.weights])
        return offsets.astype(np.int64), neighbors, weights


def _adjacency(rows: np.ndarray, cols: np.ndarray, weights: np.ndarray, n_rows: int) -> Adjacency:
    order = np.lexsort((cols, -weights, rows))
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=offsets[1:])
    return Adjacency(offsets, cols[order].astype(np.uint32), weights[order].astype(np.float32))


def build_graph(log: ClickLog) -> BipartiteGraph:
    """One undirected edge per aggregated record, weight = click count."""
    if len(log) == 0:
        raise ValueError("cannot build a graph from an empty click log")
    w = log.counts.astype(np.float64)
    return BipartiteGraph(
        log.n_queries, log.n_items,
        _adjacency(log.query_ids, log.item_ids, w, log.n_queries),
        _adjacency(log.item_ids, log.query_ids, w, log.n_items),
    )


def _prune(adj: Adjacency, max_neighbors: int) -> Adjacency:
    deg = adj.degrees
    row = np.repeat(np.arange(len(deg)), deg)
    pos = np.arange(len(adj.neighbors)) - adj.offsets[row]
    keep = pos < max_neighbors
    offsets = np.zeros_like(adj.offsets)
    np.cumsum(np.minimum(deg, max_neighbors), out=offsets[1:])
    return Adjacency(offsets, adj.neighbors[keep], adj.weights[keep])


def prune_neighbors(graph: BipartiteGraph, max_neighbors: int = DEFAULT_MAX_NEIGHBORS) -> BipartiteGraph:
    """Keep each node's ``max_neighbors`` heaviest edges, per direction."""
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    return BipartiteGraph(graph.n_queries, graph.n_items,
                          _prune(graph.query_items, max_neighbors),
                          _prune(graph.item_queries, max_neighbors))


def _mask_nodes(graph: BipartiteGraph, mask):
    """(query, item) local pairs -> global node id arrays, or None."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=np.int64)
    return mask[..., 0], mask[..., 1] + graph.n_queries


def sample_rows(graph: BipartiteGraph, nodes: np.ndarray, k: int,
                rng: np.random.Generator | None = None, masks=None) -> np.ndarray:
    """Pick up to ``k`` neighbors for every entry of ``nodes``.

    ``nodes`` may contain ``PAD``; ``masks`` is a pair of global-id arrays
    aligned with ``nodes`` naming the edge to hide. With ``rng=None`` the
    first ``k`` surviving entries (heaviest first) are returned; otherwise
    rows with more than ``k`` candidates draw ``k`` without replacement,
    each draw proportional to weight among the remaining ones. Returns an
    ``(len(nodes), k)`` array padded with ``PAD``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    nodes = np.asarray(nodes, dtype=np.int64)
    offsets, nbrs, weights = graph.csr
    live = nodes >= 0
    start = np.where(live, offsets[np.where(live, nodes, 0)], 0)
    deg = np.where(live, offsets[np.where(live, nodes, 0) + 1] - start, 0)
    width = int(deg.max()) if len(deg) else 0
    out = np.full((len(nodes), k), PAD, dtype=np.int64)
    if width == 0:
        return out

    col = np.arange(width)
    valid = col < deg[:, None]
    idx = np.where(valid, start[:, None] + col, 0)
    cand = nbrs[idx]
    if masks is not None:
        mq, mi = masks
        mq, mi = mq[:, None], mi[:, None]
        node = nodes[:, None]
        valid &= ~(((node == mq) & (cand == mi)) | ((node == mi) & (cand == mq)))

    # stable compaction keeps list order: the heaviest surviving entries first
    order = np.argsort(~valid, axis=1, kind="stable")
    if rng is not None:
        # Efraimidis-Spirakis keys log(u)/w: top-k by key has the law of
        # k successive weight-proportional draws without replacement
        u = 1.0 - rng.random((len(nodes), width))
        keys = np.where(valid, np.log(u) / weights[idx], -np.inf)
        drawn = np.argsort(-keys, axis=1, kind="stable")
        crowded = valid.sum(axis=1) > k
        order = np.where(crowded[:, None], drawn, order)

    take = order[:, :k]
    picked = np.take_along_axis(cand, take, axis=1)
    ok = np.take_along_axis(valid, take, axis=1)
    out[:, :take.shape[1]] = np.where(ok, picked, PAD)
    return out


def sample_neighbors(graph: BipartiteGraph, node: int, k: int, rng: np.random.Generator,
                     mask: tuple[int, int] | None = None) -> list[int]:
    """Weighted sample of up to ``k`` distinct neighbors of one node.

    ``mask`` is a (query index, item index) edge removed in both directions.
    """
    masks = _mask_nodes(graph, None if mask is None else [mask])
    row = sample_rows(graph, [node], k, rng, masks)[0]
    return [int(x) for x in row if x != PAD]


def deterministic_neighbors(graph: BipartiteGraph, node: int, k: int,
                            mask: tuple[int, int] | None = None) -> list[int]:
    """The ``k`` heaviest neighbors of ``node`` after masking."""
    masks = _mask_nodes(graph, None if mask is None else [mask])
    row = sample_rows(graph, [node], k, None, masks)[0]
    return [int(x) for x in row if x != PAD]


@dataclass(frozen=True)
class SampledTree:
    """Layered sampled neighborhoods for a batch of targets.

    ``levels[l]`` has shape ``(n_targets, fanout ** l)``; the parent of slot
    ``j`` at level ``l`` is slot ``j // fanout`` at level ``l - 1``. Empty
    slots hold ``PAD``. ``mask`` is the per-target (query, item) edge hidden
    at every level, as global ids, or None.
    """

    levels: list[np.ndarray]
    fanout: int
    mask: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def targets(self) -> np.ndarray:
        return self.levels[0][:, 0]

    def __len__(self) -> int:
        return len(self.levels[0])

    def parent_slots(self, level: int) -> np.ndarray:
        return np.arange(self.fanout ** level) // self.fanout

    def edges(self, target: int = 0):
        """(parent, child) global-id pairs of one target's tree."""
        for lvl in range(1, len(self.levels)):
            kids = self.levels[lvl][target]
            parents = self.levels[lvl - 1][target][self.parent_slots(lvl)]
            for p, c in zip(parents, kids):
                if c != PAD:
                    yield int(p), int(c)


def sample_tree(graph: BipartiteGraph, targets, depth: int, k: int = DEFAULT_FANOUT,
                rng: np.random.Generator | None = None, masks=None) -> SampledTree:
    """Sample a depth-``depth`` tree per target (``rng=None``: top-k by weight).

    ``targets`` is a global node id or an array of them; ``masks`` is one
    (query index, item index) pair or an array of pairs aligned with targets.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    gmask = _mask_nodes(graph, None if masks is None
                        else np.broadcast_to(np.asarray(masks), (len(targets), 2)))
    levels = [targets[:, None].copy()]
    for lvl in range(1, depth + 1):
        parents = levels[-1].reshape(-1)
        row_masks = None
        if gmask is not None:
            reps = k ** (lvl - 1)
            row_masks = (np.repeat(gmask[0], reps), np.repeat(gmask[1], reps))
        kids = sample_rows(graph, parents, k, rng, row_masks)
        levels.append(kids.reshape(len(targets), -1))
    return SampledTree(levels, k, gmask)


def graph_to_bytes(graph: BipartiteGraph) -> bytes:
    parts = [GRAPH_MAGIC, struct.pack("<III", GRAPH_VERSION, graph.n_queries, graph.n_items)]
    for adj in (graph.query_items, graph.item_queries):
        parts.append(adj.offsets.astype("<u8").tobytes())
        parts.append(adj.neighbors.astype("<u4").tobytes())
        parts.append(adj.weights.astype("<f4").tobytes())
    return b"".join(parts)


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return bytes(self.take(n)).decode("utf-8")

    def magic(self, expected: bytes, version: int):
        if bytes(self.take(4)) != expected:
            raise FormatError("bad magic")
        (ver,) = self.unpack("<I")
        if ver != version:
            raise FormatError(f"unsupported format version {ver} (expected {version})")

    def done(self):
        if self.pos != len(self.data):
            raise FormatError("trailing bytes after end of data")


def graph_from_bytes(data: bytes) -> BipartiteGraph:
    r = _Reader(data)
    r.magic(GRAPH_MAGIC, GRAPH_VERSION)
    n_q, n_i = r.unpack("<II")
    sides = []
    for n_rows in (n_q, n_i):
        offsets = r.array("<u8", n_rows + 1).astype(np.int64)
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise FormatError("inconsistent offsets")
        n_edges = int(offsets[-1])
        sides.append(Adjacency(offsets, r.array("<u4", n_edges).astype(np.uint32),
                               r.array("<f4", n_edges).astype(np.float32)))
    r.done()
    return BipartiteGraph(n_q, n_i, *sides)


def save_graph(graph: BipartiteGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(graph_to_bytes(graph))


def load_graph(path) -> BipartiteGraph:
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())

"""Two-tower training with in-batch softmax, analytic gradients and Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import DEFAULT_FANOUT, DEFAULT_MAX_NEIGHBORS, BipartiteGraph, build_graph, sample_tree
from .ingest import Catalog, ClickLog, Vocab
from .model import (DEFAULT_DIM, DEFAULT_LAYERS, ForwardTrace, ModelParams, NodeTexts,
                    backward, forward, scatter_token_grads)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 5
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dim: int = DEFAULT_DIM
    layers: int = DEFAULT_LAYERS
    fanout: int = DEFAULT_FANOUT
    max_neighbors: int = DEFAULT_MAX_NEIGHBORS
    variant: str = "mask"
    seed: int = 0
    negatives: str = "in-batch"
    eval_every: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for in-batch negatives")
        if self.negatives != "in-batch":
            raise ValueError("only in-batch negatives are supported")
        if self.fanout < 1 or self.layers < 0 or self.dim < 1 or self.epochs < 0:
            raise ValueError("fanout >= 1, layers >= 0, dim >= 1, epochs >= 0 required")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class GradientSet:
    embeddings: np.ndarray
    attention: np.ndarray | None

    def __add__(self, other: "GradientSet") -> "GradientSet":
        att = None if self.attention is None else self.attention + other.attention
        return GradientSet(self.embeddings + other.embeddings, att)


@dataclass
class OptState:
    m_emb: np.ndarray
    v_emb: np.ndarray
    m_att: np.ndarray | None
    v_att: np.ndarray | None
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptState":
        att = params.attention
        return cls(np.zeros_like(params.embeddings), np.zeros_like(params.embeddings),
                   None if att is None else np.zeros_like(att),
                   None if att is None else np.zeros_like(att))

    def copy(self) -> "OptState":
        cp = lambda a: None if a is None else a.copy()
        return OptState(self.m_emb.copy(), self.v_emb.copy(), cp(self.m_att), cp(self.v_att), self.t)


def sampled_softmax_loss(scores, pos_index: int) -> tuple[float, np.ndarray]:
    """``-log softmax(scores)[pos_index]`` and its gradient w.r.t. scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) < 2:
        raise ValueError("need a vector of at least two scores")
    if not 0 <= pos_index < len(scores):
        raise IndexError("pos_index out of range")
    loss, grad = softmax_xent_rows(scores[None, :], np.array([pos_index]))
    return float(loss[0]), grad[0]


def softmax_xent_rows(scores: np.ndarray, pos: np.ndarray):
    """Row-wise version: per-row losses and ``softmax - onehot``."""
    shifted = scores - scores.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    denom = ex.sum(axis=1, keepdims=True)
    rows = np.arange(len(scores))
    loss = np.log(denom[:, 0]) - shifted[rows, pos]
    grad = ex / denom
    grad[rows, pos] -= 1
    return loss, grad


@dataclass
class BatchOutput:
    z_query: np.ndarray
    z_item: np.ndarray
    scores: np.ndarray
    trace: ForwardTrace = field(repr=False)


def batch_forward(pairs: np.ndarray, graph: BipartiteGraph, params: ModelParams,
                  texts: NodeTexts, fanout: int, rng: np.random.Generator | None) -> BatchOutput:
    """Embed both towers for a batch of (query, item) pairs and score all B x B.

    Query trees come first, item trees second, in a single forward. The mask
    variant hides each pair's own edge in both of its trees. ``rng=None``
    uses top-weight neighborhoods.
    """
    pairs = np.asarray(pairs, dtype=np.int64)
    b = len(pairs)
    if b < 2:
        raise ValueError("batch needs at least two pairs")
    targets = np.concatenate([pairs[:, 0], pairs[:, 1] + graph.n_queries])
    masks = np.concatenate([pairs, pairs]) if params.variant == "mask" else None
    tree = sample_tree(graph, targets, params.n_layers, fanout, rng, masks)
    z, trace = forward(tree, params, texts)
    zq, zi = z[:b], z[b:]
    return BatchOutput(zq, zi, zq @ zi.T, trace)


def batch_loss(out: BatchOutput):
    """Mean in-batch softmax loss (diagonal positives) and dL/dscores."""
    b = len(out.scores)
    losses, grad = softmax_xent_rows(out.scores.astype(np.float64), np.arange(b))
    return float(losses.mean()), grad / b


def backward_batch(out: BatchOutput, dscores: np.ndarray, params: ModelParams,
                   texts: NodeTexts) -> GradientSet:
    dscores = dscores.astype(params.dtype)
    dz = np.concatenate([dscores @ out.z_item, dscores.T @ out.z_query])
    dnode, d_att = backward(out.trace, dz, params)
    d_emb = scatter_token_grads(out.trace.unique_nodes, dnode, texts, params.vocab_size)
    return GradientSet(d_emb, d_att)


def adam_step(params: ModelParams, grads: GradientSet, opt: OptState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam, in place. Embedding rows whose gradient is all
    zero are skipped entirely (moments included); attention is dense."""
    opt.t += 1
    c1 = 1 - beta1 ** opt.t
    c2 = 1 - beta2 ** opt.t

    def update(theta, g, m, v):
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(theta.dtype)

    rows = np.flatnonzero(np.any(grads.embeddings != 0, axis=1))
    if len(rows):
        m, v, theta = opt.m_emb[rows], opt.v_emb[rows], params.embeddings[rows]
        update(theta, grads.embeddings[rows], m, v)
        opt.m_emb[rows], opt.v_emb[rows], params.embeddings[rows] = m, v, theta
    if params.attention is not None:
        update(params.attention, grads.attention, opt.m_att, opt.v_att)
    return params, opt


def finite_difference_check(params: ModelParams, pairs: np.ndarray, graph: BipartiteGraph,
                            texts: NodeTexts, fanout: int, seed: int | None, eps: float = 1e-5,
                            deterministic: bool = False):
    """Analytic and central-difference gradients, coordinate by coordinate.

    Every loss evaluation replays the tree sampling from ``seed`` so both
    perturbations see the same trees. Coordinates: every embedding entry of
    a token touched by the batch's trees, then every attention entry.
    Returns ``(coords, analytic, numeric)``.
    """
    if params.dtype != np.float64:
        raise ValueError("gradient checking requires float64 parameters")
    if not deterministic and not isinstance(seed, (int, np.integer)):
        raise TypeError("grad_check needs an integer seed so sampling can be replayed")

    def run(p):
        rng = None if deterministic else np.random.default_rng(seed)
        out = batch_forward(pairs, graph, p, texts, fanout, rng)
        return out, batch_loss(out)

    out, (_, dscores) = run(params)
    grads = backward_batch(out, dscores, params, texts)

    nodes = out.trace.unique_nodes[out.trace.unique_nodes >= 0]
    toks = texts.tokens[nodes]
    touched = np.unique(toks[toks >= 0])
    coords = [("embeddings", (int(r), c)) for r in touched for c in range(params.dim)]
    if params.attention is not None:
        coords += [("attention", idx) for idx in np.ndindex(params.attention.shape)]

    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    for j, (name, idx) in enumerate(coords):
        arr = getattr(params, name)
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = run(params)[1][0]
        arr[idx] = orig - eps
        lm = run(params)[1][0]
        arr[idx] = orig
        numeric[j] = (lp - lm) / (2 * eps)
        analytic[j] = getattr(grads, name)[idx]
    return coords, analytic, numeric


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(params: ModelParams, pairs: np.ndarray, graph: BipartiteGraph, texts: NodeTexts,
               fanout: int, seed: int | None, eps: float = 1e-5, deterministic: bool = False) -> float:
    """Max over checked coordinates of ``|a - n| / max(1e-8, |a| + |n|)``."""
    _, analytic, numeric = finite_difference_check(params, pairs, graph, texts, fanout, seed,
                                                   eps, deterministic)
    return float(relative_errors(analytic, numeric).max()) if len(analytic) else 0.0


def node_texts(log: ClickLog, catalog: Catalog, vocab: Vocab) -> NodeTexts:
    """Token ids for every graph node: queries of ``log`` then catalog items."""
    return NodeTexts.from_lists(log.query_tokens(vocab) + catalog.title_tokens(vocab))


@dataclass
class EpochStats:
    epoch: int
    steps: int
    mean_loss: float
    sec_per_step: float


class TrainingError(RuntimeError):
    pass


def train(cfg: TrainConfig, graph: BipartiteGraph, log: ClickLog, catalog: Catalog, vocab: Vocab,
          metrics=None, on_epoch=None):
    """Train on the records of ``log`` (the training split).

    ``metrics`` is an optional text stream receiving one
    ``epoch<TAB>step<TAB>loss<TAB>sec_per_step`` line per step. ``on_epoch``
    is called as ``on_epoch(params, stats)`` every ``cfg.eval_every`` epochs.
    Returns ``(params, [EpochStats, ...])``.
    """
    if graph.n_queries != log.n_queries or graph.n_items != len(catalog):
        raise ValueError("graph does not match the click log / catalog")
    texts = node_texts(log, catalog, vocab)
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(len(vocab), cfg.dim, cfg.layers, cfg.variant, rng)
    opt = OptState.zeros_like(params)
    pairs = np.stack([log.query_ids, log.item_ids], axis=1)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        losses, times = [], []
        for lo in range(0, len(order), cfg.batch_size):
            batch = pairs[order[lo:lo + cfg.batch_size]]
            if len(batch) < 2:
                continue
            tic = time.perf_counter()
            out = batch_forward(batch, graph, params, texts, cfg.fanout, rng)
            loss, dscores = batch_loss(out)
            step += 1
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            grads = backward_batch(out, dscores, params, texts)
            adam_step(params, grads, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            elapsed = time.perf_counter() - tic
            losses.append(loss)
            times.append(elapsed)
            if metrics is not None:
                metrics.write(f"{epoch}\t{step}\t{loss:.6f}\t{elapsed:.6f}\n")
        stats = EpochStats(epoch, len(losses), float(np.mean(losses)) if losses else float("nan"),
                           float(np.mean(times)) if times else 0.0)
        history.append(stats)
        logger.info("epoch %d: %d steps, loss %.4f, %.4f s/step",
                    epoch, stats.steps, stats.mean_loss, stats.sec_per_step)
        if on_epoch is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            on_epoch(params, stats)
    return params, history


@dataclass
class CheckInstance:
    params: ModelParams
    pairs: np.ndarray
    graph: BipartiteGraph
    texts: NodeTexts
    fanout: int
    seed: int


def random_check_instance(seed: int, variant: str, layers: int, dim: int = 4, n_queries: int = 7,
                          n_items: int = 7, n_edges: int = 18, vocab_size: int = 16,
                          batch: int = 3, fanout: int = 2) -> CheckInstance:
    """Small random graph, texts and f64 params for gradient checking.

    The batch uses distinct queries and distinct items; repeated targets
    make some gradients cancel exactly, which finite differences cannot
    resolve below roundoff.
    """
    rng = np.random.default_rng(seed)
    edges = set()
    while len(edges) < n_edges:
        edges.add((int(rng.integers(n_queries)), int(rng.integers(n_items))))
    q, i = np.array(sorted(edges)).T
    log = ClickLog([f"q{n}" for n in range(n_queries)], q, i,
                   rng.integers(1, 6, len(q)), n_items)
    graph = build_graph(log)
    texts = NodeTexts.from_lists([
        rng.choice(np.arange(1, vocab_size), size=int(rng.integers(1, 4)), replace=False).tolist()
        for _ in range(n_queries + n_items)])
    for _ in range(1000):
        rows = rng.choice(len(log), batch, replace=False)
        if len(set(q[rows])) == batch and len(set(i[rows])) == batch:
            break
    else:
        raise RuntimeError("could not draw a batch with distinct targets")
    pairs = np.stack([q[rows], i[rows]], axis=1)
    params = ModelParams.init(vocab_size, dim, layers, variant, rng, np.float64, scale=1.0)
    return CheckInstance(params, pairs, graph, texts, fanout, seed)


def well_conditioned_instance(seed: int, variant: str, layers: int, dim: int = 4,
                              min_grad: float = 1e-4, tries: int = 100) -> CheckInstance:
    """First instance from ``seed, seed+1, ...`` whose checked analytic
    gradients all have magnitude >= ``min_grad``.

    Central differences at eps=1e-5 carry ~1e-11 absolute roundoff, so a
    relative error with a 1e-8 floor is only meaningful away from zero
    (e.g. the parent half of an attention vector has exactly zero gradient
    whenever every sibling group's logits share a sign).
    """
    for s in range(seed, seed + tries):
        inst = random_check_instance(s, variant, layers, dim)
        g = analytic_gradients(inst)
        if np.min(np.abs(g)) >= min_grad:
            return inst
    raise RuntimeError(f"no well-conditioned instance in seeds {seed}..{seed + tries - 1}")


def analytic_gradients(inst: CheckInstance) -> np.ndarray:
    """Analytic gradient at the coordinates ``finite_difference_check`` visits."""
    p = inst.params
    out = batch_forward(inst.pairs, inst.graph, p, inst.texts, inst.fanout,
                        np.random.default_rng(inst.seed))
    grads = backward_batch(out, batch_loss(out)[1], p, inst.texts)
    nodes = out.trace.unique_nodes[out.trace.unique_nodes >= 0]
    toks = inst.texts.tokens[nodes]
    touched = np.unique(toks[toks >= 0])
    parts = [grads.embeddings[touched].ravel()]
    if grads.attention is not None:
        parts.append(grads.attention.ravel())
    return np.concatenate(parts)

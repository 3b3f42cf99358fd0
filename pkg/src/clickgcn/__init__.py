"""Graph-convolution two-tower embeddings for query/item retrieval over click graphs."""

from .graph import BipartiteGraph, build_graph, prune_neighbors, sample_tree
from .ingest import Catalog, ClickLog, Vocab, build_vocab, generate_synthetic, split_train_eval
from .model import GraphModel, ModelParams, forward
from .training import TrainConfig, train

__version__ = "0.1.0"

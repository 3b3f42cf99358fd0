import sys

import numpy as np
import pytest

from clickgcn.graph import build_graph, prune_neighbors
from clickgcn.ingest import build_vocab, generate_synthetic, split_train_eval
from clickgcn.training import node_texts


@pytest.fixture(scope="session")
def small_data():
    catalog, log = generate_synthetic(n_clusters=4, n_queries=60, n_items=40,
                                      n_clicks=3000, seed=11)
    vocab = build_vocab(catalog.titles + log.query_texts)
    train, eval_pairs = split_train_eval(log, 0.2, seed=3)
    graph = prune_neighbors(build_graph(train), 50)
    texts = node_texts(log, catalog, vocab)
    return dict(catalog=catalog, log=log, vocab=vocab, train=train, eval_pairs=eval_pairs,
                graph=graph, texts=texts)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

import numpy as np

from clickgcn.ingest import ClickLog


def make_log(records, n_queries=None, n_items=None):
    """ClickLog from (q, i, count) triples with placeholder query texts."""
    q, i, c = (np.array(x, dtype=np.int64) for x in zip(*records))
    nq = n_queries if n_queries is not None else int(q.max()) + 1
    ni = n_items if n_items is not None else int(i.max()) + 1
    return ClickLog([f"query {n}" for n in range(nq)], q, i, c, ni)

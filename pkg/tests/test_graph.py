import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clickgcn.graph import (PAD, FormatError, build_graph, deterministic_neighbors, graph_from_bytes,
                            graph_to_bytes, load_graph, prune_neighbors, sample_neighbors,
                            sample_tree, save_graph)
from helpers import make_log


def local(graph, node):
    """Neighbor list of a node as (local index, weight) pairs."""
    nbrs, w = graph.neighbors(node)
    off = 0 if node >= graph.n_queries else graph.n_queries
    return [(int(n) - off, float(x)) for n, x in zip(nbrs, w)]


def star(weights, n_queries=1):
    """Query 0 linked to items 0..len(weights)-1 with the given weights."""
    return build_graph(make_log([(0, i, w) for i, w in enumerate(weights)], n_queries=n_queries))


class TestBuild:
    def test_two_records(self):
        g = build_graph(make_log([(0, 0, 3), (0, 1, 1)]))
        assert local(g, 0) == [(0, 3.0), (1, 1.0)]
        assert local(g, g.item_node(0)) == [(0, 3.0)]
        assert local(g, g.item_node(1)) == [(0, 1.0)]

    def test_single_record(self):
        g = build_graph(make_log([(0, 0, 5)]))
        assert len(local(g, 0)) == len(local(g, g.item_node(0))) == 1

    def test_weight_ties_by_index(self):
        g = build_graph(make_log([(0, 7, 2), (0, 3, 2)], n_items=8))
        assert local(g, 0) == [(3, 2.0), (7, 2.0)]

    def test_empty_log_rejected(self):
        log = make_log([(0, 0, 1)]).subset(np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            build_graph(log)

    @settings(max_examples=50, deadline=None)
    @given(st.dictionaries(st.tuples(st.integers(0, 5), st.integers(0, 6)),
                           st.integers(1, 9), min_size=1, max_size=30))
    def test_symmetry_and_order(self, edges):
        records = [(q, i, c) for (q, i), c in sorted(edges.items())]
        g = build_graph(make_log(records, n_queries=6, n_items=7))
        fwd = {(q, i): w for q in range(6) for i, w in local(g, q)}
        back = {(q, i): w for i in range(7) for q, w in local(g, g.item_node(i))}
        assert fwd == back == {k: float(v) for k, v in edges.items()}
        for node in range(g.n_nodes):
            lst = local(g, node)
            assert lst == sorted(lst, key=lambda t: (-t[1], t[0]))


class TestPrune:
    def test_keeps_heaviest_fifty(self):
        g = prune_neighbors(star(range(1, 61)), 50)
        weights = [w for _, w in local(g, 0)]
        assert weights == [float(w) for w in range(60, 10, -1)]

    def test_equal_weights_keep_low_indices(self):
        g = prune_neighbors(star([1] * 60), 50)
        assert [i for i, _ in local(g, 0)] == list(range(50))

    def test_short_list_unchanged(self):
        g = star(range(1, 11))
        assert local(prune_neighbors(g, 50), 0) == local(g, 0)

    def test_original_untouched_and_idempotent(self, small_data):
        full = build_graph(small_data["train"])
        before = graph_to_bytes(full)
        once = prune_neighbors(full, 3)
        assert graph_to_bytes(full) == before
        assert graph_to_bytes(prune_neighbors(once, 3)) == graph_to_bytes(once)
        assert once.query_items.degrees.max() <= 3
        assert once.item_queries.degrees.max() <= 3

    def test_directions_pruned_independently(self):
        # item 0 is clicked by three queries; pruning to 1 leaves it only q2,
        # but q0 and q1 still list item 0
        g = prune_neighbors(build_graph(make_log([(0, 0, 1), (1, 0, 2), (2, 0, 3)])), 1)
        assert local(g, g.item_node(0)) == [(2, 3.0)]
        assert local(g, 0) == [(0, 1.0)]

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            prune_neighbors(star([1, 2]), 0)


class TestSampling:
    def test_weight_proportional_first_draw(self):
        g = star([3, 1])
        rng = np.random.default_rng(0)
        hits = sum(sample_neighbors(g, 0, 1, rng) == [g.item_node(0)] for _ in range(10_000))
        assert abs(hits / 10_000 - 0.75) <= 0.02

    def test_first_draw_within_three_standard_errors(self):
        w = np.array([5.0, 3.0, 1.0, 1.0])
        g = star(w)
        rng = np.random.default_rng(1)
        n = 20_000
        counts = np.zeros(4)
        for _ in range(n):
            counts[sample_neighbors(g, 0, 1, rng)[0] - 1] += 1
        p = w / w.sum()
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(counts / n - p) <= 3 * se)

    def test_two_draws_renormalized(self):
        # weights a=2, b=1, c=1: P(c is one of the two draws without replacement)
        g = star([2, 1, 1])
        rng = np.random.default_rng(2)
        n = 20_000
        c_drawn = sum(sample_neighbors(g, 0, 2, rng) in ([1, 3], [2, 3], [3, 1], [3, 2])
                      for _ in range(n)) / n
        exact = 2 / 4 * 1 / 2 + 1 / 4 * 1 / 3 + 1 / 4   # c drawn second or first
        assert abs(c_drawn - exact) <= 3 * np.sqrt(exact * (1 - exact) / n)

    def test_small_list_returned_in_order(self):
        g = star([1, 4])
        assert sample_neighbors(g, 0, 5, np.random.default_rng(0)) == [2, 1]

    def test_mask_removes_edge(self):
        g = star([1, 4])
        assert sample_neighbors(g, 0, 5, np.random.default_rng(0), mask=(0, 1)) == [1]
        assert sample_neighbors(g, g.item_node(1), 5, np.random.default_rng(0), mask=(0, 1)) == []

    def test_draws_are_distinct_and_in_neighborhood(self, small_data):
        g = small_data["graph"]
        rng = np.random.default_rng(5)
        for node in range(0, g.n_nodes, 3):
            nbrs = set(g.neighbors(node)[0].tolist())
            got = sample_neighbors(g, node, 4, rng)
            assert len(got) == len(set(got)) == min(4, len(nbrs))
            assert set(got) <= nbrs

    def test_same_rng_state_same_draws(self):
        g = star(range(1, 30))
        a = sample_neighbors(g, 0, 5, np.random.default_rng(9))
        b = sample_neighbors(g, 0, 5, np.random.default_rng(9))
        assert a == b

    def test_deterministic_top_k(self):
        g = star([5, 4, 3])
        assert deterministic_neighbors(g, 0, 2) == [1, 2]
        assert deterministic_neighbors(g, 0, 2, mask=(0, 0)) == [2, 3]

    def test_deterministic_empty_row(self):
        g = build_graph(make_log([(0, 0, 1)], n_items=2))
        assert deterministic_neighbors(g, g.item_node(1), 3) == []

    def test_zero_fanout_rejected(self):
        with pytest.raises(ValueError):
            deterministic_neighbors(star([1]), 0, 0)


class TestTree:
    def test_depth_zero(self, small_data):
        t = sample_tree(small_data["graph"], 4, 0, 3, np.random.default_rng(0))
        assert t.depth == 0 and t.levels[0].tolist() == [[4]]
        assert list(t.edges()) == []

    def test_sides_alternate(self, small_data):
        g = small_data["graph"]
        t = sample_tree(g, [0, 1, 2], 2, 3, np.random.default_rng(0))
        assert [lvl.shape for lvl in t.levels] == [(3, 1), (3, 3), (3, 9)]
        one, two = t.levels[1], t.levels[2]
        assert np.all(one[one != PAD] >= g.n_queries)
        assert np.all(two[two != PAD] < g.n_queries)

    def test_children_are_neighbors(self, small_data):
        g = small_data["graph"]
        t = sample_tree(g, g.item_node(3), 2, 4, np.random.default_rng(1))
        for p, c in t.edges():
            assert c in g.neighbors(p)[0]

    def test_mask_holds_at_every_level(self, small_data):
        g, train = small_data["graph"], small_data["train"]
        rng = np.random.default_rng(4)
        for r in range(0, len(train), 7):
            q, i = int(train.query_ids[r]), int(train.item_ids[r])
            inode = g.item_node(i)
            for target in (q, inode):
                t = sample_tree(g, target, 3, 10, rng, masks=(q, i))
                bad = {(q, inode), (inode, q)}
                assert not bad & set(t.edges())

    def test_mask_keeps_other_paths(self):
        # q0-i0 masked, but q0 still reaches i0's other query through i1
        g = build_graph(make_log([(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]))
        t = sample_tree(g, 0, 2, 5, None, masks=(0, 0))
        assert t.levels[1].tolist() == [[g.item_node(1), PAD, PAD, PAD, PAD]]
        assert 1 in t.levels[2][0]

    def test_negative_depth_rejected(self, small_data):
        with pytest.raises(ValueError):
            sample_tree(small_data["graph"], 0, -1)


class TestPersistence:
    def test_round_trip(self, small_data, tmp_path):
        g = small_data["graph"]
        path = tmp_path / "g.bin"
        save_graph(g, path)
        back = load_graph(path)
        assert graph_to_bytes(back) == path.read_bytes()
        for side in ("query_items", "item_queries"):
            a, b = getattr(g, side), getattr(back, side)
            assert np.array_equal(a.offsets, b.offsets)
            assert np.array_equal(a.neighbors, b.neighbors)
            assert np.array_equal(a.weights, b.weights)

    def test_layout(self):
        data = graph_to_bytes(build_graph(make_log([(0, 0, 3), (0, 1, 1)])))
        assert data[:4] == b"SGCG"
        assert np.frombuffer(data[4:16], "<u4").tolist() == [1, 1, 2]
        # q side: offsets 2*u64, 2 neighbors u32, 2 weights f32; i side: 3*u64, 2 u32, 2 f32
        assert len(data) == 16 + (16 + 8 + 8) + (24 + 8 + 8)

    def test_bad_magic(self, small_data):
        data = bytearray(graph_to_bytes(small_data["graph"]))
        data[:4] = b"XXXX"
        with pytest.raises(FormatError, match="bad magic"):
            graph_from_bytes(bytes(data))

    def test_truncated(self, small_data):
        data = graph_to_bytes(small_data["graph"])
        with pytest.raises(FormatError, match="unexpected end of file"):
            graph_from_bytes(data[:-3])

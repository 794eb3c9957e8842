import numpy as np
import pytest

from fedcal.graph import (
    Graph,
    PartitionSpec,
    edge_homophily,
    generate_sbm,
    induced_subgraph,
    k_hop_sets,
    load_graph,
    partition_nonoverlapping,
    partition_overlapping,
    save_graph_files,
    split_masks,
)


def path_graph(n, feat_dim=2):
    edges = [(i, i + 1) for i in range(n - 1)]
    feats = np.arange(n * feat_dim, dtype=float).reshape(n, feat_dim)
    return Graph.from_edges(feats, np.zeros(n, dtype=int), edges)


class TestGraphInvariants:
    def test_from_edges_normalizes(self):
        g = Graph.from_edges(
            np.zeros((3, 1)), [0, 1, -1], [(0, 1), (1, 0), (2, 2), (1, 2)]
        )
        assert list(g.neighbors[1]) == [0, 2]
        assert list(g.neighbors[2]) == [1]  # self-loop dropped

    def test_rejects_overlapping_masks(self):
        m = np.array([True, False])
        with pytest.raises(ValueError):
            Graph.from_edges(np.zeros((2, 1)), [0, 0], [], train_mask=m, val_mask=m)

    def test_rejects_unlabeled_train_node(self):
        with pytest.raises(ValueError):
            Graph.from_edges(
                np.zeros((2, 1)), [-1, 0], [],
                train_mask=np.array([True, False]),
            )

    def test_induced_subgraph_preserves_symmetry(self):
        g = generate_sbm(40, 2, 0.3, 0.1, 3, 1.0, seed=5)
        sub = induced_subgraph(g, [0, 3, 5, 7, 11, 20, 21])
        sub.validate()
        assert np.array_equal(sub.node_ids, [0, 3, 5, 7, 11, 20, 21])


class TestPartitionNonOverlapping:
    def test_path_two_halves(self):
        g = path_graph(10)
        parts = partition_nonoverlapping(g, PartitionSpec(2, seed=0))
        assert sorted(p.num_nodes for p in parts) == [5, 5]
        ids = np.concatenate([p.node_ids for p in parts])
        assert sorted(ids.tolist()) == list(range(10))

    def test_singleton_clients(self):
        g = path_graph(6)
        parts = partition_nonoverlapping(g, PartitionSpec(6, seed=1))
        assert [p.num_nodes for p in parts] == [1] * 6

    def test_sbm_cover_and_disjoint(self):
        g = generate_sbm(600, 2, 0.05, 0.01, 4, 1.0, seed=2)
        parts = partition_nonoverlapping(g, PartitionSpec(5, seed=2))
        ids = np.concatenate([p.node_ids for p in parts])
        assert len(ids) == 600
        assert len(set(ids.tolist())) == 600

    @pytest.mark.parametrize("m", [2, 5, 10])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_disjoint_cover_and_balance(self, m, seed):
        g = generate_sbm(300, 3, 0.05, 0.02, 4, 1.0, seed=seed)
        parts = partition_nonoverlapping(g, PartitionSpec(m, seed=seed))
        ids = np.concatenate([p.node_ids for p in parts])
        assert sorted(ids.tolist()) == list(range(300))
        target = 300 / m
        for p in parts:
            assert 0.8 * target - 1e-9 <= p.num_nodes <= 1.2 * target + 1e-9
            p.validate()

    def test_rejects_more_parts_than_nodes(self):
        with pytest.raises(ValueError):
            partition_nonoverlapping(path_graph(3), PartitionSpec(4, seed=0))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PartitionSpec(1)
        with pytest.raises(ValueError):
            PartitionSpec(6, "overlapping")
        with pytest.raises(ValueError):
            PartitionSpec(5, "bogus")


class TestPartitionOverlapping:
    def test_five_clients_from_whole_graph(self):
        g = generate_sbm(100, 2, 0.1, 0.02, 3, 1.0, seed=0)
        parts = partition_overlapping(g, PartitionSpec(5, "overlapping", seed=0))
        assert len(parts) == 5
        for p in parts:
            assert p.num_nodes == 50  # ceil(100/2)
            assert set(p.node_ids.tolist()) <= set(range(100))

    def test_clients_within_temporary_subgraph(self):
        g = generate_sbm(200, 2, 0.08, 0.02, 3, 1.0, seed=3)
        spec = PartitionSpec(10, "overlapping", seed=3)
        parts = partition_overlapping(g, spec)
        assert len(parts) == 10
        temp = partition_nonoverlapping(g, PartitionSpec(2, seed=3))
        temp_sets = [set(t.node_ids.tolist()) for t in temp]
        for ti in range(2):
            for s in range(5):
                client = parts[ti * 5 + s]
                assert set(client.node_ids.tolist()) <= temp_sets[ti]

    def test_overlap_matches_hypergeometric_expectation(self):
        # two samples of k of n nodes overlap in k^2/n on average
        g = generate_sbm(80, 2, 0.1, 0.05, 3, 1.0, seed=1)
        k = 40
        expected = k * k / 80
        overlaps = []
        for seed in range(100):
            parts = partition_overlapping(g, PartitionSpec(5, "overlapping", seed=seed))
            a = set(parts[0].node_ids.tolist())
            b = set(parts[1].node_ids.tolist())
            overlaps.append(len(a & b))
        assert abs(np.mean(overlaps) - expected) <= 0.1 * expected

    def test_rejects_non_multiple_of_five(self):
        g = path_graph(10)
        with pytest.raises(ValueError):
            partition_overlapping(g, PartitionSpec(6, "non-overlapping", seed=0))


class TestGenerateSbm:
    def test_extreme_probabilities_give_two_cliques(self):
        g = generate_sbm(20, 2, 1.0, 0.0, 2, 1.0, seed=0)
        for v in range(20):
            for u in g.neighbors[v]:
                assert g.labels[u] == g.labels[v]
        # each class of 10 nodes forms a clique
        assert g.num_edges == 2 * (10 * 9 // 2)

    def test_equal_probabilities_mix_classes(self):
        ratios = []
        for seed in range(20):
            g = generate_sbm(200, 4, 0.05, 0.05, 3, 1.0, seed=seed)
            ratios.append(edge_homophily(g))
        assert abs(np.mean(ratios) - 0.25) <= 0.05

    def test_zero_separation_collapses_class_means(self):
        gaps = []
        for seed in range(5):
            g = generate_sbm(600, 2, 0.02, 0.02, 8, 0.0, seed=seed)
            m0 = g.features[g.labels == 0].mean(axis=0)
            m1 = g.features[g.labels == 1].mean(axis=0)
            gaps.append(np.linalg.norm(m0 - m1))
        # pure-noise class means differ by about sqrt(2 d / n_c)
        assert np.mean(gaps) <= 4 * np.sqrt(2 * 8 / 300)

    def test_homophily_direction(self):
        homo = generate_sbm(300, 2, 0.1, 0.01, 3, 1.0, seed=0)
        hetero = generate_sbm(300, 2, 0.01, 0.1, 3, 1.0, seed=0)
        assert edge_homophily(homo) > 0.5 > edge_homophily(hetero)

    def test_rejects_bad_probabilities(self):
        with pytest.raises(ValueError):
            generate_sbm(10, 2, 1.5, 0.0, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            generate_sbm(10, 2, 0.5, 0.0, 2, -1.0, seed=0)


class TestFilesAndSplits:
    def test_round_trip(self, tmp_path):
        g = generate_sbm(30, 3, 0.2, 0.05, 4, 1.0, seed=9)
        paths = [tmp_path / name for name in ("e.txt", "x.txt", "y.txt")]
        save_graph_files(g, *paths)
        loaded = load_graph(*paths)
        assert loaded.num_nodes == 30
        assert np.allclose(loaded.features, g.features)
        assert np.array_equal(loaded.labels, g.labels)
        for v in range(30):
            assert np.array_equal(loaded.neighbors[v], g.neighbors[v])

    def test_parse_error_carries_line_number(self, tmp_path):
        (tmp_path / "x.txt").write_text("1.0 2.0\n1.0 bad\n")
        (tmp_path / "y.txt").write_text("0\n1\n")
        (tmp_path / "e.txt").write_text("0 1\n")
        with pytest.raises(ValueError, match="x.txt:2"):
            load_graph(tmp_path / "e.txt", tmp_path / "x.txt", tmp_path / "y.txt")

    def test_label_out_of_range(self, tmp_path):
        (tmp_path / "x.txt").write_text("1.0\n2.0\n")
        (tmp_path / "y.txt").write_text("0\n5\n")
        (tmp_path / "e.txt").write_text("0 1\n")
        with pytest.raises(ValueError, match="label 5"):
            load_graph(
                tmp_path / "e.txt", tmp_path / "x.txt", tmp_path / "y.txt",
                num_classes=2,
            )

    def test_malformed_edge_line(self, tmp_path):
        (tmp_path / "x.txt").write_text("1.0\n2.0\n")
        (tmp_path / "y.txt").write_text("0\n1\n")
        (tmp_path / "e.txt").write_text("# comment is fine\n0 1 2\n")
        with pytest.raises(ValueError, match="e.txt:2"):
            load_graph(tmp_path / "e.txt", tmp_path / "x.txt", tmp_path / "y.txt")

    def test_default_split_sizes(self):
        g = Graph.from_edges(np.zeros((100, 1)), np.zeros(100, dtype=int), [])
        g = split_masks(g, seed=0)
        assert int(g.train_mask.sum()) == 20
        assert int(g.val_mask.sum()) == 40
        assert int(g.test_mask.sum()) == 40

    def test_stratification(self):
        labels = np.array([0] * 50 + [1] * 50)
        g = Graph.from_edges(np.zeros((100, 1)), labels, [])
        g = split_masks(g, seed=1)
        for c in (0, 1):
            assert int((g.train_mask & (labels == c)).sum()) == 10

    def test_all_train_ratio(self):
        g = Graph.from_edges(np.zeros((30, 1)), np.zeros(30, dtype=int), [])
        g = split_masks(g, ratios=(1.0, 0.0, 0.0), seed=0)
        assert int(g.train_mask.sum()) == 30

    def test_unlabeled_nodes_stay_out(self):
        labels = np.array([0, 1, -1, -1, 0, 1])
        g = Graph.from_edges(np.zeros((6, 1)), labels, [])
        g = split_masks(g, ratios=(0.5, 0.25, 0.25), seed=0)
        assert not g.train_mask[2] and not g.val_mask[2] and not g.test_mask[2]
        assert not g.train_mask[3] and not g.val_mask[3] and not g.test_mask[3]

    def test_split_deterministic(self):
        g = generate_sbm(60, 3, 0.1, 0.05, 2, 1.0, seed=4)
        a = split_masks(g, seed=7)
        b = split_masks(g, seed=7)
        assert np.array_equal(a.train_mask, b.train_mask)
        assert np.array_equal(a.val_mask, b.val_mask)
        assert np.array_equal(a.test_mask, b.test_mask)

    def test_rejects_ratio_overflow(self):
        g = path_graph(4)
        with pytest.raises(ValueError):
            split_masks(g, ratios=(0.8, 0.3, 0.3), seed=0)


class TestKHopSets:
    def test_path(self):
        g = path_graph(3)
        assert list(k_hop_sets(g, 0, 1)) == [1]
        assert list(k_hop_sets(g, 0, 2)) == [2]

    def test_triangle_has_no_second_ring(self):
        g = Graph.from_edges(
            np.zeros((3, 1)), np.zeros(3, dtype=int), [(0, 1), (1, 2), (0, 2)]
        )
        for v in range(3):
            assert len(k_hop_sets(g, v, 2)) == 0

    def test_matches_bfs_oracle(self):
        g = generate_sbm(50, 2, 0.08, 0.03, 2, 1.0, seed=6)

        def bfs_ring(v, k):
            dist = {v: 0}
            frontier = [v]
            for level in range(1, k + 1):
                nxt = []
                for node in frontier:
                    for u in g.neighbors[node]:
                        if int(u) not in dist:
                            dist[int(u)] = level
                            nxt.append(int(u))
                frontier = nxt
            return sorted(u for u, d in dist.items() if d == k)

        for v in range(50):
            assert list(k_hop_sets(g, v, 1)) == bfs_ring(v, 1)
            assert list(k_hop_sets(g, v, 2)) == bfs_ring(v, 2)

    def test_rings_disjoint(self):
        g = generate_sbm(40, 2, 0.1, 0.05, 2, 1.0, seed=8)
        for v in range(40):
            one = set(k_hop_sets(g, v, 1).tolist())
            two = set(k_hop_sets(g, v, 2).tolist())
            assert not (two & one)
            assert v not in two

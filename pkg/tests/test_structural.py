import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcal.graph import Graph, HopAggregator, generate_sbm
from fedcal.numerics import random_orthogonal
from fedcal.structural import (
    MatchingMatrix,
    RadialSequence,
    StructuralTemplates,
    init_templates,
    ot_distance,
    radial_sequence,
    radial_sequences_from_rings,
    sample_structural_batch,
    sinkhorn_match,
    structural_loss,
    structural_loss_ego,
)


def star_graph(leaves, feat_dim=3):
    edges = [(0, i) for i in range(1, leaves + 1)]
    n = leaves + 1
    return Graph.from_edges(
        np.ones((n, feat_dim)), np.zeros(n, dtype=int), edges
    )


def random_radials(count, d, seed):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        rows = rng.standard_normal((2, d))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        out.append(RadialSequence(rows=rows, anchor_node=i))
    return out


class TestSampling:
    def test_full_batch_covers_all_nodes(self):
        g = star_graph(9)
        batch = sample_structural_batch(g, 10, seed=0)
        assert sorted(batch.tolist()) == list(range(10))

    def test_oversized_batch_clamped(self):
        g = star_graph(4)
        batch = sample_structural_batch(g, 100, seed=0)
        assert sorted(batch.tolist()) == list(range(5))

    def test_deterministic(self):
        g = star_graph(20)
        assert np.array_equal(
            sample_structural_batch(g, 7, seed=5),
            sample_structural_batch(g, 7, seed=5),
        )

    def test_inclusion_frequency(self):
        g = generate_sbm(600, 2, 0.01, 0.01, 2, 1.0, seed=0)
        hits = np.zeros(600)
        for seed in range(50):
            hits[sample_structural_batch(g, 100, seed=seed)] += 1
        freq = hits / 50
        assert abs(freq.mean() - 1 / 6) <= 1e-9
        assert np.abs(freq - 1 / 6).max() <= 0.05 + 1 / 6


class TestRadialSequence:
    def test_star_center(self):
        g = star_graph(5)
        ego = np.tile(np.array([[3.0, 4.0, 0.0]]), (6, 1))
        rad = radial_sequence(g, ego, 0)
        expected = np.array([0.6, 0.8, 0.0])
        assert np.allclose(rad.rows[0], expected, atol=1e-12)
        assert np.allclose(rad.rows[1], expected, atol=1e-12)

    def test_isolated_node_falls_back_to_ego(self):
        g = Graph.from_edges(np.ones((1, 2)), [0], [])
        ego = np.array([[3.0, 4.0]])
        rad = radial_sequence(g, ego, 0)
        assert np.allclose(rad.rows, [[0.6, 0.8], [0.6, 0.8]], atol=1e-12)

    def test_path_hand_case(self):
        # path 0-1-2-3, hand-set scalar egos
        g = Graph.from_edges(
            np.zeros((4, 1)), np.zeros(4, dtype=int), [(0, 1), (1, 2), (2, 3)]
        )
        ego = np.array([[1.0], [2.0], [3.0], [4.0]])
        rad = radial_sequence(g, ego, 1)
        # ring1(1) = mean(1, 3) = 2 ; ring2(1) = {3} -> 4 ; hop2 = (2+4)/2 = 3
        assert np.allclose(rad.rows, [[1.0], [1.0]])
        rad0 = radial_sequence(g, ego, 0)
        # ring1(0) = 2 ; ring2(0) = {2} -> 3 ; hop2 = 2.5 ; all normalize to 1
        assert np.allclose(rad0.rows, [[1.0], [1.0]])
        # sign is preserved through normalization
        rad_neg = radial_sequence(g, -ego, 0)
        assert np.allclose(rad_neg.rows, [[-1.0], [-1.0]])

    def test_matches_aggregator_rings(self):
        g = generate_sbm(30, 2, 0.15, 0.05, 4, 1.0, seed=3)
        rng = np.random.default_rng(0)
        ego = rng.standard_normal((30, 5))
        agg = HopAggregator(g)
        hop1, hop2 = agg.rings(ego)
        batch = np.arange(30)
        fast = radial_sequences_from_rings(hop1, hop2, batch)
        for v in range(30):
            slow = radial_sequence(g, ego, v)
            assert np.abs(slow.rows - fast[v].rows).max() <= 1e-12

    def test_rows_unit_norm(self):
        g = generate_sbm(20, 2, 0.2, 0.1, 3, 1.0, seed=1)
        rng = np.random.default_rng(1)
        ego = rng.standard_normal((20, 4))
        for v in range(20):
            rows = radial_sequence(g, ego, v).rows
            norms = np.linalg.norm(rows, axis=1)
            assert np.abs(norms[norms > 0] - 1.0).max() <= 1e-12


class TestOtDistance:
    def test_identity(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert ot_distance(a, a) == 0.0

    def test_row_swap_absorbed(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert ot_distance(a, a[::-1]) == 0.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = rng.standard_normal((2, 3))
            b = rng.standard_normal((2, 3))
            perms = [
                0.5 * (np.sum((a[0] - b[0]) ** 2) + np.sum((a[1] - b[1]) ** 2)),
                0.5 * (np.sum((a[0] - b[1]) ** 2) + np.sum((a[1] - b[0]) ** 2)),
            ]
            assert abs(ot_distance(a, b) - min(perms)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_nonnegativity(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 4))
        b = rng.standard_normal((2, 4))
        assert ot_distance(a, b) >= 0.0
        assert abs(ot_distance(a, b) - ot_distance(b, a)) <= 1e-12

    def test_orthogonal_invariance_applied_to_both(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 5))
        b = rng.standard_normal((2, 5))
        q = random_orthogonal(5, 4)
        assert abs(ot_distance(a, b) - ot_distance(a @ q.T, b @ q.T)) <= 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ot_distance(np.zeros((2, 3)), np.zeros((2, 4)))


class TestSinkhorn:
    def test_constant_cost_gives_uniform_rows(self):
        radials = [
            RadialSequence(rows=np.eye(2, 3), anchor_node=i) for i in range(4)
        ]
        templates = StructuralTemplates(
            rows=np.tile(np.eye(2, 3)[None], (3, 1, 1))
        )
        match = sinkhorn_match(radials, templates)
        assert np.abs(match.f - 1 / 3).max() <= 1e-9

    def test_near_hard_assignment_limit(self):
        d = 4
        rng = np.random.default_rng(5)
        rows_a = rng.standard_normal((2, d))
        rows_b = rows_a + 10.0
        radials = [
            RadialSequence(rows=rows_a, anchor_node=0),
            RadialSequence(rows=rows_b, anchor_node=1),
        ]
        templates = StructuralTemplates(rows=np.stack([rows_a, rows_b]))
        match = sinkhorn_match(radials, templates, epsilon=0.01)
        assert match.f[0, 0] >= 0.99
        assert match.f[1, 1] >= 0.99

    def test_marginals(self):
        # a sharp epsilon on contested assignments converges slowly, so
        # give the solver room; marginals are the claim at convergence
        radials = random_radials(6, 4, seed=6)
        templates = init_templates(3, 4, seed=6)
        match = sinkhorn_match(radials, templates, max_iters=50000)
        assert match.converged
        assert np.abs(match.f.sum(axis=1) - 1.0).max() <= 1e-6
        assert np.abs(match.f.sum(axis=0) - 6 / 3).max() <= 1e-4

    def test_row_sums_hold_even_unconverged(self):
        radials = random_radials(6, 4, seed=6)
        templates = init_templates(3, 4, seed=6)
        match = sinkhorn_match(radials, templates, max_iters=50)
        assert not match.converged
        assert np.abs(match.f.sum(axis=1) - 1.0).max() <= 1e-6

    def test_debug_trace_monotone(self):
        radials = random_radials(8, 5, seed=7)
        templates = init_templates(4, 5, seed=7)
        match = sinkhorn_match(radials, templates, debug=True)
        trace = match.objective_trace
        assert trace is not None and len(trace) >= 2
        assert np.all(np.diff(trace) >= -1e-12)

    def test_nonconvergence_flagged_not_fatal(self):
        radials = random_radials(5, 3, seed=8)
        templates = init_templates(4, 3, seed=8)
        match = sinkhorn_match(radials, templates, max_iters=1, tol=1e-14)
        assert not match.converged
        assert match.f.shape == (5, 4)
        assert np.all(np.isfinite(match.f))

    def test_rejects_bad_epsilon(self):
        radials = random_radials(2, 3, seed=9)
        templates = init_templates(2, 3, seed=9)
        with pytest.raises(ValueError):
            sinkhorn_match(radials, templates, epsilon=0.0)


class TestStructuralLoss:
    def test_zero_at_hard_assigned_templates(self):
        radials = random_radials(3, 4, seed=10)
        templates = StructuralTemplates(rows=np.stack([r.rows for r in radials]))
        match = MatchingMatrix(f=np.eye(3))
        loss, grad = structural_loss(match, radials, templates)
        assert loss <= 1e-20
        assert np.abs(grad).max() <= 1e-12

    def test_zero_template_unit_rows(self):
        radials = random_radials(5, 4, seed=11)
        templates = StructuralTemplates(rows=np.zeros((1, 2, 4)))
        match = MatchingMatrix(f=np.ones((5, 1)))
        loss, _ = structural_loss(match, radials, templates)
        assert abs(loss - 1.0) <= 1e-12

    def test_invariant_to_joint_reordering(self):
        radials = random_radials(6, 3, seed=12)
        templates = init_templates(3, 3, seed=12)
        match = sinkhorn_match(radials, templates)
        loss, _ = structural_loss(match, radials, templates)
        perm = np.array([3, 0, 5, 1, 4, 2])
        shuffled = [radials[i] for i in perm]
        match2 = MatchingMatrix(f=match.f[perm])
        loss2, _ = structural_loss(match2, shuffled, templates)
        assert abs(loss - loss2) <= 1e-12

    def test_row_gradient_matches_finite_differences(self):
        radials = random_radials(4, 3, seed=13)
        templates = init_templates(2, 3, seed=13)
        match = sinkhorn_match(radials, templates)
        loss, grad = structural_loss(match, radials, templates)
        eps = 1e-6
        for (b, r, j) in [(0, 0, 1), (2, 1, 0), (3, 0, 2)]:
            plus = [RadialSequence(rows=x.rows.copy(), anchor_node=x.anchor_node)
                    for x in radials]
            plus[b].rows[r, j] += eps
            up, _ = structural_loss(match, plus, templates)
            plus[b].rows[r, j] -= 2 * eps
            down, _ = structural_loss(match, plus, templates)
            num = (up - down) / (2 * eps)
            assert abs(num - grad[b, r, j]) / max(abs(num), 1e-8) <= 1e-4


class TestStructuralLossEgo:
    def test_gradient_matches_finite_differences(self):
        g = generate_sbm(15, 2, 0.25, 0.1, 3, 1.0, seed=14)
        rng = np.random.default_rng(14)
        ego = rng.standard_normal((15, 4)) * 0.7
        agg = HopAggregator(g)
        templates = init_templates(3, 4, seed=14)
        batch = sample_structural_batch(g, 6, seed=14)
        hop1, hop2 = agg.rings(ego)
        radials = radial_sequences_from_rings(hop1, hop2, batch)
        match = sinkhorn_match(radials, templates)

        loss, grad = structural_loss_ego(g, ego, match, batch, templates, agg)
        eps = 1e-6
        rng2 = np.random.default_rng(15)
        for _ in range(12):
            i = rng2.integers(15)
            j = rng2.integers(4)
            bumped = ego.copy()
            bumped[i, j] += eps
            up, _ = structural_loss_ego(g, bumped, match, batch, templates, agg)
            bumped[i, j] -= 2 * eps
            down, _ = structural_loss_ego(g, bumped, match, batch, templates, agg)
            num = (up - down) / (2 * eps)
            if abs(num) < 1e-12 and abs(grad[i, j]) < 1e-12:
                continue
            assert abs(num - grad[i, j]) / max(abs(num), abs(grad[i, j]), 1e-8) <= 1e-4

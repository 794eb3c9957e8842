"""Local structural manifolds, optimal-transport matching, structural loss.

Each sampled node is summarized by a radial sequence: its l2-normalized
1-hop and 2-hop ring means stacked into a 2 x d matrix, read as the
uniform two-point empirical measure on those rows. Templates mirror the
same shape. The transport distance between two such measures has a
closed form (the optimum sits at one of the two permutation couplings),
and a log-domain Sinkhorn solve assigns each radial sequence a
distribution over templates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .graph import Graph, HopAggregator, k_hop_sets
from .numerics import l2_normalize_rows

__all__ = [
    "RadialSequence",
    "StructuralTemplates",
    "MatchingMatrix",
    "init_templates",
    "sample_structural_batch",
    "radial_sequence",
    "radial_sequences_from_rings",
    "ot_distance",
    "sinkhorn_match",
    "structural_loss",
    "structural_loss_ego",
]


@dataclass
class RadialSequence:
    """2 x d matrix: row 0 the 1-hop ring, row 1 the 2-hop ring."""

    rows: np.ndarray
    anchor_node: int


@dataclass
class StructuralTemplates:
    """Q structural templates, stored as a (Q, 2, d) array."""

    rows: np.ndarray

    @property
    def count(self) -> int:
        return self.rows.shape[0]


@dataclass
class MatchingMatrix:
    """Row-stochastic B x Q assignment of radial sequences to templates.

    converged=False flags a Sinkhorn run that hit max_iters before the
    marginal residual dropped below tol; the last iterate is still
    returned and usable. objective_trace holds the per-iteration dual
    value of the entropic transport problem when requested: Sinkhorn is
    block-coordinate ascent on that dual, so the trace is non-decreasing
    and converges to the entropic objective value at the solution.
    """

    f: np.ndarray
    converged: bool = True
    iterations: int = 0
    objective_trace: np.ndarray = None


def init_templates(num_templates: int, dim: int, seed) -> StructuralTemplates:
    """Random templates: seeded Gaussian rows scaled to unit norm."""
    if num_templates < 1:
        raise ValueError("need at least one template")
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((num_templates, 2, dim))
    rows /= np.linalg.norm(rows, axis=2, keepdims=True)
    return StructuralTemplates(rows=rows)


def sample_structural_batch(g: Graph, batch_size: int, seed) -> np.ndarray:
    """Uniform sample of batch_size nodes without replacement (all if fewer)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    size = min(batch_size, g.num_nodes)
    return rng.choice(g.num_nodes, size=size, replace=False)


def radial_sequence(g: Graph, ego: np.ndarray, node: int) -> RadialSequence:
    """Normalized ring means around one node.

    Ring means use the shared fallbacks: an empty 2-hop ring reuses the
    1-hop aggregate and an empty 1-hop ring reuses the node's own ego
    row. Zero rows stay zero after normalization.
    """
    one = g.neighbors[node]
    agg1 = ego[one].mean(axis=0) if len(one) else ego[node].copy()
    two = k_hop_sets(g, node, 2)
    agg2 = ego[two].mean(axis=0) if len(two) else agg1
    rows = np.vstack([agg1, 0.5 * (agg1 + agg2)])
    return RadialSequence(rows=l2_normalize_rows(rows), anchor_node=int(node))


def radial_sequences_from_rings(hop1: np.ndarray, hop2: np.ndarray, batch):
    """Radial sequences for a node batch from precomputed ring means."""
    out = []
    for b in batch:
        rows = np.vstack([hop1[b], hop2[b]])
        out.append(RadialSequence(rows=l2_normalize_rows(rows), anchor_node=int(b)))
    return out


def _pair_costs(a: np.ndarray, b: np.ndarray):
    """(identity, swapped) total squared-distance costs of the two couplings."""
    c = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return c[0, 0] + c[1, 1], c[0, 1] + c[1, 0]


def ot_distance(a, b) -> float:
    """Transport cost between two 2 x d row sets under uniform weights.

    Accepts RadialSequence values or raw 2 x d arrays. With two support
    points per side and squared-Euclidean ground cost, the optimal
    coupling is one of the two permutations, so the value is half the
    cheaper permutation's total cost.
    """
    a = np.asarray(getattr(a, "rows", a), dtype=np.float64)
    b = np.asarray(getattr(b, "rows", b), dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != 2:
        raise ValueError(f"expected matching 2 x d arrays, got {a.shape} vs {b.shape}")
    keep, swap = _pair_costs(a, b)
    return 0.5 * float(min(keep, swap))


def _stacked_pair_costs(rows: np.ndarray, templates: StructuralTemplates):
    """(keep, swap) coupling costs for all radials x templates at once.

    rows is (B, 2, d); returns two (B, Q) arrays of total squared
    distances under the identity and swapped row pairings.
    """
    t = templates.rows                                 # (Q, 2, d)
    diff_keep = rows[:, None, :, :] - t[None, :, :, :]
    diff_swap = rows[:, None, :, :] - t[None, :, ::-1, :]
    return (diff_keep ** 2).sum(axis=(2, 3)), (diff_swap ** 2).sum(axis=(2, 3))


def _stack_rows(radials) -> np.ndarray:
    return np.stack([rad.rows for rad in radials])


def _cost_matrix(radials, templates: StructuralTemplates) -> np.ndarray:
    keep, swap = _stacked_pair_costs(_stack_rows(radials), templates)
    return 0.5 * np.minimum(keep, swap)


def sinkhorn_match(radials, templates: StructuralTemplates, epsilon: float = 0.05,
                   max_iters: int = 500, tol: float = 1e-6,
                   debug: bool = False) -> MatchingMatrix:
    """Entropic assignment of radial sequences to templates.

    Runs log-domain Sinkhorn with uniform marginals (1/B rows, 1/Q
    columns) on the kernel exp(-cost/epsilon), the costs pre-scaled by
    their mean. Each iteration ends with a row update, so row marginals
    are exact and convergence is measured on the column-marginal l1
    residual. The returned matrix is the coupling times B, making every
    row a probability distribution over templates. Non-convergence is
    reported through the converged flag, not an exception.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    nb = len(radials)
    nq = templates.count
    if nb == 0:
        raise ValueError("need at least one radial sequence")
    cost = _cost_matrix(radials, templates)
    mean = cost.mean()
    scaled = cost / mean if mean > 0 else cost
    log_kernel = -scaled / epsilon
    log_a = np.full(nb, -np.log(nb))
    log_b = np.full(nq, -np.log(nq))
    u = np.zeros(nb)
    v = np.zeros(nq)
    trace = [] if debug else None
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        v = log_b - logsumexp(log_kernel + u[:, None], axis=0)
        u = log_a - logsumexp(log_kernel + v[None, :], axis=1)
        if debug:
            # dual of the entropic problem, in the scaled-cost units
            mass = np.exp(u[:, None] + log_kernel + v[None, :]).sum()
            trace.append(
                epsilon * (float(u @ np.exp(log_a)) + float(v @ np.exp(log_b)) - mass)
            )
        coupling = np.exp(u[:, None] + log_kernel + v[None, :])
        residual = np.abs(coupling.sum(axis=0) - np.exp(log_b)).sum()
        if residual < tol:
            converged = True
            break
    coupling = np.exp(u[:, None] + log_kernel + v[None, :])
    return MatchingMatrix(
        f=nb * coupling,
        converged=converged,
        iterations=iters,
        objective_trace=np.array(trace) if debug else None,
    )


def structural_loss(matching: MatchingMatrix, radials,
                    templates: StructuralTemplates):
    """Assignment-weighted transport cost with gradient on the radial rows.

    loss = (1/B) sum_b sum_q f[b,q] * ot_distance(radial_b, template_q).
    The optimal permutation of every pair is held fixed (identity at
    ties), giving the deterministic subgradient
    d loss / d row = (1/B) sum_q f[b,q] (row - matched template row).
    """
    f = matching.f
    nb = len(radials)
    if f.shape != (nb, templates.count):
        raise ValueError(
            f"matching shape {f.shape} does not fit B={nb}, Q={templates.count}"
        )
    rows = _stack_rows(radials)                        # (B, 2, d)
    keep, swap = _stacked_pair_costs(rows, templates)
    swapped = swap < keep                              # ties keep the identity
    loss = float((f * 0.5 * np.minimum(keep, swap)).sum() / nb)

    t_keep = np.broadcast_to(templates.rows[None], (nb,) + templates.rows.shape)
    t_perm = np.where(swapped[:, :, None, None], t_keep[:, :, ::-1, :], t_keep)
    diff = rows[:, None, :, :] - t_perm                # (B, Q, 2, d)
    grad_rows = (f[:, :, None, None] * diff).sum(axis=1) / nb
    return loss, grad_rows


def structural_loss_ego(g: Graph, ego: np.ndarray, matching: MatchingMatrix,
                        batch, templates: StructuralTemplates,
                        agg: HopAggregator = None, rings=None):
    """Structural loss with the gradient chained back to the ego rows.

    Recomputes the batch's ring means from ego (or reuses precomputed
    rings), normalizes them into radial sequences, and pulls the loss
    gradient through the normalization and the ring-mean operators onto
    every contributing ego row. Gradients treat exactly-zero ring rows
    as constants, matching the zero-row normalization policy.
    """
    if agg is None:
        agg = HopAggregator(g)
    hop1, hop2 = agg.rings(ego) if rings is None else rings
    radials = radial_sequences_from_rings(hop1, hop2, batch)
    loss, grad_rows = structural_loss(matching, radials, templates)

    g_hop1 = np.zeros_like(hop1)
    g_hop2 = np.zeros_like(hop2)
    for i, b in enumerate(batch):
        for ring, store in ((0, g_hop1), (1, g_hop2)):
            h = hop1[b] if ring == 0 else hop2[b]
            norm = np.linalg.norm(h)
            if norm == 0.0:
                continue
            r = h / norm
            gr = grad_rows[i, ring]
            store[b] += (gr - np.dot(gr, r) * r) / norm
    grad_ego = agg.backward(g_hop1, g_hop2)
    return loss, grad_ego

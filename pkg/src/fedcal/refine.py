"""Server-side refinement of the semantic anchors and structural templates.

Anchors move along a clipped combination of the mean client deviation
(difficulty-weighted) and a mutual-repulsion term, then project back to
the unit sphere; the repulsion keeps the frame near maximal
equidistance, and a drift metric tracks how far the pairwise Gram
entries stray from -1/(C-1).

Templates solve a weighted barycenter problem under the two-point
Gromov-Wasserstein discrepancy. For two-point uniform metric-measure
spaces GW depends only on the intra-pair distances, so the solve splits
into a 1-D scale search plus an assignment-weighted mean for position.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import softmax
from .semantic import EtfAnchors
from .structural import MatchingMatrix, RadialSequence, StructuralTemplates

log = logging.getLogger(__name__)

__all__ = [
    "SemanticReport",
    "StructuralReport",
    "RefineConfig",
    "deviation_vectors",
    "difficulty_weights",
    "constraint_vector",
    "refine_anchor",
    "refine_all_anchors",
    "gram_drift",
    "gw_2point",
    "template_objective",
    "update_template",
]


@dataclass
class SemanticReport:
    """Client upload: calibrated class means and per-class mean anchor loss."""

    k: np.ndarray               # (d, C), columns rotation @ class mean
    present_mask: np.ndarray    # (C,) bool
    per_class_loss: np.ndarray  # (C,), zero where absent


@dataclass
class StructuralReport:
    """Client upload: sampled radial sequences and their matching matrix."""

    radials: list
    matching: MatchingMatrix


@dataclass
class RefineConfig:
    tau: float = 1.0        # difficulty-weight temperature
    eta: float = 0.1        # max anchor step (chord length)
    eps: float = 1e-8       # division guard in the step clip
    gw_lr: float = 1.0      # reserved; the template solve is closed-form
    gw_iters: int = 200     # golden-section iterations for the scale search

    def __post_init__(self):
        if self.tau <= 0 or self.eta <= 0 or self.eps <= 0:
            raise ValueError("tau, eta and eps must be positive")
        if self.gw_iters < 1:
            raise ValueError("gw_iters must be >= 1")


def deviation_vectors(reports, anchors: EtfAnchors) -> np.ndarray:
    """(d, C) mean deviation of reported calibrated means from each anchor.

    Column i averages k[:, i] - delta[:, i] over the clients reporting
    class i; classes nobody reports get a zero column.
    """
    if not reports:
        raise ValueError("need at least one semantic report")
    d, c = anchors.delta.shape
    out = np.zeros((d, c))
    counts = np.zeros(c)
    for rep in reports:
        for i in np.nonzero(rep.present_mask)[0]:
            out[:, i] += rep.k[:, i] - anchors.delta[:, i]
            counts[i] += 1
    nz = counts > 0
    out[:, nz] /= counts[nz]
    return out


def difficulty_weights(reports, tau: float) -> np.ndarray:
    """Softmax-over-temperature of the mean per-class anchor losses."""
    if not reports:
        raise ValueError("need at least one semantic report")
    c = reports[0].per_class_loss.shape[0]
    totals = np.zeros(c)
    counts = np.zeros(c)
    for rep in reports:
        present = rep.present_mask
        totals[present] += rep.per_class_loss[present]
        counts[present] += 1
    mean = np.where(counts > 0, totals / np.maximum(counts, 1), 0.0)
    return softmax(mean, tau)


def constraint_vector(anchors: EtfAnchors, i: int) -> np.ndarray:
    """Repulsion term -sum_{j != i} delta_j / ||delta_i - delta_j||^2."""
    delta = anchors.delta
    c = delta.shape[1]
    out = np.zeros(delta.shape[0])
    for j in range(c):
        if j == i:
            continue
        gap = np.linalg.norm(delta[:, i] - delta[:, j])
        if gap <= 1e-6:
            raise RuntimeError(
                f"anchors {i} and {j} coincide (distance {gap:.2e}); repulsion undefined"
            )
        out -= delta[:, j] / gap ** 2
    return out


def refine_anchor(delta_i: np.ndarray, v_i: np.ndarray, gamma_i: float,
                  s_i: np.ndarray, cfg: RefineConfig) -> np.ndarray:
    """One anchor update: clipped candidate step, then spherical projection.

    candidate = delta + gamma * v + s; the step toward it is scaled by
    t = min(1, eta / (||candidate - delta|| + eps)) so the pre-projection
    chord never exceeds eta, and the result is renormalized to the unit
    sphere.
    """
    norm = np.linalg.norm(delta_i)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"anchor norm {norm} is not 1 within 1e-6")
    candidate = delta_i + gamma_i * v_i + s_i
    step = candidate - delta_i
    t = min(1.0, cfg.eta / (np.linalg.norm(step) + cfg.eps))
    moved = delta_i + t * step
    moved_norm = np.linalg.norm(moved)
    if moved_norm <= 1e-12:
        raise RuntimeError("anchor update collapsed to the origin; projection undefined")
    return moved / moved_norm


def gram_drift(anchors: EtfAnchors) -> float:
    """Max deviation of pairwise anchor inner products from -1/(C-1)."""
    delta = anchors.delta
    c = delta.shape[1]
    gram = delta.T @ delta
    off = gram[~np.eye(c, dtype=bool)]
    return float(np.abs(off + 1.0 / (c - 1)).max())


def refine_all_anchors(anchors: EtfAnchors, reports, cfg: RefineConfig):
    """Refine every reported anchor; returns (new anchors, gram drift).

    Classes reported by no client keep their anchor unchanged for the
    round (their deviation is undefined). The drift of the refined frame
    is logged, not corrected: the repulsion term is what keeps the frame
    near maximal equidistance.
    """
    vs = deviation_vectors(reports, anchors)
    gammas = difficulty_weights(reports, cfg.tau)
    reported = np.zeros(anchors.num_classes, dtype=bool)
    for rep in reports:
        reported |= rep.present_mask
    new_delta = anchors.delta.copy()
    for i in range(anchors.num_classes):
        if not reported[i]:
            continue
        s_i = constraint_vector(anchors, i)
        new_delta[:, i] = refine_anchor(
            anchors.delta[:, i], vs[:, i], float(gammas[i]), s_i, cfg
        )
    refined = EtfAnchors(delta=new_delta)
    return refined, gram_drift(refined)


def _intra_distance(rows: np.ndarray) -> float:
    return float(np.linalg.norm(rows[0] - rows[1]))


def _gw_values(alphas, beta: float) -> np.ndarray:
    """Two-point GW discrepancies as a function of the intra-distances.

    The coupling polytope is the one-parameter family T(t), t in [0, 1/2],
    and the transport cost is the quadratic
        (alpha^2 + beta^2)/2 - 4 alpha beta (t^2 + (1/2 - t)^2),
    minimized in closed form: concave in t for alpha*beta >= 0 (always,
    distances being non-negative) so a boundary coupling wins; the
    clipped vertex t=1/4 covers the convex branch.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    base = (alphas ** 2 + beta ** 2) / 2.0
    boundary = base - alphas * beta            # s = 1/4 at t in {0, 1/2}
    vertex = base - alphas * beta / 2.0        # s = 1/8 at t = 1/4
    concave = alphas * beta >= 0.0
    best = np.where(concave, boundary, np.minimum(boundary, vertex))
    return np.maximum(best, 0.0)


def _gw_value(alpha: float, beta: float) -> float:
    return float(_gw_values(np.array([alpha]), beta)[0])


def gw_2point(a, b) -> float:
    """Gromov-Wasserstein discrepancy of two 2 x d uniform point sets.

    Depends only on the two intra-pair distances, hence invariant to
    rotations, reflections and translations of either side.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return _gw_value(_intra_distance(a), _intra_distance(b))


def _collect_assignments(structural_reports, q: int):
    """Weights and intra-distances of every radial assigned to template q."""
    weights, alphas, rows = [], [], []
    for rep in structural_reports:
        f = rep.matching.f
        for i, rad in enumerate(rep.radials):
            weights.append(float(f[i, q]))
            alphas.append(_intra_distance(rad.rows))
            rows.append(rad.rows)
    return np.array(weights), np.array(alphas), rows


def template_objective(structural_reports, q: int, template_rows: np.ndarray) -> float:
    """Weighted GW objective of one template against all assigned radials."""
    weights, alphas, _ = _collect_assignments(structural_reports, q)
    beta = _intra_distance(template_rows)
    return float((weights * _gw_values(alphas, beta)).sum())


def _golden_section(fn, lo: float, hi: float, iters: int) -> float:
    """Minimize a unimodal fn on [lo, hi]; returns the best midpoint."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - inv_phi * (b - a)
    x2 = a + inv_phi * (b - a)
    f1, f2 = fn(x1), fn(x2)
    for _ in range(iters):
        if b - a < 1e-12:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = fn(x2)
    return (a + b) / 2.0


def update_template(q: int, structural_reports, templates: StructuralTemplates,
                    cfg: RefineConfig, rng=None) -> np.ndarray:
    """Barycenter update of one template; returns its new 2 x d rows.

    Stage one finds the intra-distance beta* minimizing the weighted GW
    objective by golden-section search on [0, max alpha] (GW sees a
    template only through its intra-distance). Stage two positions the
    template at the assignment-weighted mean of its radials and moves
    the two rows symmetrically about their midpoint to realize beta*.
    Templates with zero total assignment are returned unchanged.
    """
    weights, alphas, rows = _collect_assignments(structural_reports, q)
    total = weights.sum()
    if total <= 0.0:
        log.debug("template %d has zero total assignment; left unchanged", q)
        return templates.rows[q].copy()

    hi = float(alphas.max()) if len(alphas) else 0.0
    if hi <= 0.0:
        beta = 0.0
    else:
        def objective(b):
            return float((weights * _gw_values(alphas, b)).sum())

        beta = _golden_section(objective, 0.0, hi, cfg.gw_iters)

    mean_rows = np.zeros_like(templates.rows[q])
    for w, r in zip(weights, rows):
        mean_rows += w * r
    mean_rows /= total
    mid = mean_rows.mean(axis=0)
    axis = mean_rows[0] - mean_rows[1]
    norm = np.linalg.norm(axis)
    if norm <= 1e-12:
        if rng is None:
            rng = np.random.default_rng(q)
        axis = rng.standard_normal(mean_rows.shape[1])
        norm = np.linalg.norm(axis)
    direction = axis / norm
    half = beta / 2.0
    return np.vstack([mid + half * direction, mid - half * direction])

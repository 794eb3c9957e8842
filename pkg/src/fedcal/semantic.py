"""Global semantic anchors and client-side semantic calibration.

The server keeps one unit-norm anchor per class, arranged as a simplex
equiangular tight frame: every pair of distinct anchors has inner
product -1/(C-1), the most mutually repulsive configuration C unit
vectors admit. Clients summarize their ego-embeddings as per-class
means, rotate those means onto the anchors with the closed-form
orthogonal Procrustes solution, and penalize per-node distance between
the rotated ego-embedding and the anchor of its label.

Embeddings are column vectors here: calibration is r @ h. Per-client
losses are normalized by the labeled-train count so the three local
loss terms share a scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import random_orthogonal, svd

__all__ = [
    "EtfAnchors",
    "SemanticManifold",
    "CalibrationRotation",
    "construct_etf",
    "class_means",
    "procrustes",
    "semantic_loss",
    "semantic_per_class_loss",
]


@dataclass(frozen=True)
class EtfAnchors:
    """d x C matrix whose columns are the per-class anchors."""

    delta: np.ndarray

    @property
    def dim(self) -> int:
        return self.delta.shape[0]

    @property
    def num_classes(self) -> int:
        return self.delta.shape[1]


@dataclass
class SemanticManifold:
    """Per-class mean ego-embeddings; absent classes are zeroed and masked."""

    p: np.ndarray               # (d, C)
    present_mask: np.ndarray    # (C,) bool


@dataclass
class CalibrationRotation:
    """Orthogonal d x d map aligning a client manifold to the anchors."""

    r: np.ndarray


def construct_etf(num_classes: int, dim: int, seed) -> EtfAnchors:
    """Simplex-ETF anchors: scaled, centered columns of a random isometry.

    Requires dim >= num_classes so the centered simplex embeds with its
    exact Gram structure (unit norms, off-diagonal -1/(C-1)).
    """
    c = int(num_classes)
    if c < 2:
        raise ValueError("need at least two classes")
    if dim < c:
        raise ValueError(
            f"dim={dim} < num_classes={c}: the centered simplex needs rank "
            f"{c} columns of an isometry to keep its exact Gram structure"
        )
    phi = random_orthogonal(dim, seed)[:, :c]
    center = np.eye(c) - np.ones((c, c)) / c
    delta = np.sqrt(c / (c - 1.0)) * (phi @ center)
    return EtfAnchors(delta=delta)


def class_means(ego: np.ndarray, labels: np.ndarray, train_mask: np.ndarray,
                num_classes: int) -> SemanticManifold:
    """Column c = mean ego-embedding over labeled train nodes of class c."""
    d = ego.shape[1]
    p = np.zeros((d, num_classes))
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        rows = np.nonzero(train_mask & (labels == c))[0]
        if len(rows):
            p[:, c] = ego[rows].mean(axis=0)
            present[c] = True
    return SemanticManifold(p=p, present_mask=present)


def procrustes(manifold: SemanticManifold, anchors: EtfAnchors) -> CalibrationRotation:
    """Orthogonal map minimizing ||r @ p - delta||_F over present classes.

    Closed form: with the SVD of delta_present @ p_present.T = u s vt,
    the minimizer is r = u @ vt. Absent-class columns are excluded so
    zero columns cannot bias the rotation.
    """
    present = manifold.present_mask
    if not present.any():
        raise RuntimeError("procrustes needs at least one present class")
    cross = anchors.delta[:, present] @ manifold.p[:, present].T
    f = svd(cross)
    return CalibrationRotation(r=f.u @ f.vt)


def semantic_loss(ego: np.ndarray, labels: np.ndarray, train_mask: np.ndarray,
                  rotation: CalibrationRotation, anchors: EtfAnchors):
    """Mean squared anchor distance of calibrated train egos, with gradient.

    loss = (1/T) sum_v ||r @ h_v - delta_{y_v}||^2 over the T labeled
    train nodes; grad wrt each such ego row is (2/T) r.T (r h - delta).
    """
    train = np.nonzero(train_mask & (labels >= 0))[0]
    grad = np.zeros_like(ego)
    if len(train) == 0:
        return 0.0, grad
    r = rotation.r
    residual = ego[train] @ r.T - anchors.delta[:, labels[train]].T
    loss = float((residual ** 2).sum()) / len(train)
    grad[train] = (2.0 / len(train)) * (residual @ r)
    return loss, grad


def semantic_per_class_loss(ego: np.ndarray, labels: np.ndarray,
                            train_mask: np.ndarray,
                            rotation: CalibrationRotation,
                            anchors: EtfAnchors) -> np.ndarray:
    """Class-conditional mean of the squared anchor distances (0 if absent)."""
    c = anchors.num_classes
    out = np.zeros(c)
    r = rotation.r
    for cls in range(c):
        rows = np.nonzero(train_mask & (labels == cls))[0]
        if len(rows):
            residual = ego[rows] @ r.T - anchors.delta[:, cls]
            out[cls] = float((residual ** 2).sum(axis=1).mean())
    return out

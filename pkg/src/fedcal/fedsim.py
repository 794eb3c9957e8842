"""Federated round loop: broadcast, local training, reports, refinement.

Each round the server broadcasts the current anchors and templates;
every client recomputes its calibration rotation and template matching,
freezes them, runs a few full-batch gradient epochs on the combined
objective, and uploads manifold statistics only (calibrated class
means, per-class losses, radial sequences, the matching matrix, scalar
metrics). The server then refines the anchors and templates behind a
barrier. Models are fully personalized: no parameter averaging happens
anywhere, the only thing exchanged is manifold statistics.

Every random draw flows through a generator seeded by (config seed,
purpose tag, client id, round), so histories are bitwise reproducible
no matter how many worker threads execute the clients.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .graph import (
    Graph,
    HopAggregator,
    PartitionSpec,
    generate_sbm,
    load_graph,
    partition_nonoverlapping,
    partition_overlapping,
    split_masks,
)
from .model import ModelParams, forward, init_params, lr_schedule, sgd_step, total_loss
from .refine import (
    RefineConfig,
    SemanticReport,
    StructuralReport,
    gram_drift,
    refine_all_anchors,
    template_objective,
    update_template,
)
from .semantic import (
    CalibrationRotation,
    EtfAnchors,
    class_means,
    construct_etf,
    procrustes,
    semantic_per_class_loss,
)
from .structural import (
    MatchingMatrix,
    StructuralTemplates,
    init_templates,
    radial_sequences_from_rings,
    sample_structural_batch,
    sinkhorn_match,
)

__all__ = [
    "DatasetSpec",
    "FederationConfig",
    "ClientState",
    "RoundRecord",
    "HistoryRow",
    "FederationResult",
    "FederationError",
    "build_dataset",
    "setup_federation",
    "run_client_round",
    "run_federation",
    "evaluate",
    "export_history",
    "import_history",
    "records_to_rows",
    "export_embeddings",
]

# fixed sub-stream tags so seeds never collide across purposes
_TAG_DATA, _TAG_SPLIT, _TAG_PART, _TAG_TEMPL, _TAG_ANCH = 101, 102, 103, 104, 105
_TAG_INIT, _TAG_BATCH = 300, 301


class FederationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    """Where the root graph comes from: a seeded generator or three files."""

    kind: str = "synthetic"             # "synthetic" | "files"
    nodes: int = 600
    p_in: float = 0.1
    p_out: float = 0.01
    feat_dim: int = 16
    feat_sep: float = 1.0
    edges_path: str = None
    features_path: str = None
    labels_path: str = None
    split: tuple = (0.2, 0.4, 0.4)

    def __post_init__(self):
        if self.kind not in ("synthetic", "files"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "files":
            missing = [
                name for name in ("edges_path", "features_path", "labels_path")
                if getattr(self, name) is None
            ]
            if missing:
                raise ValueError(f"files dataset needs {', '.join(missing)}")


@dataclass
class FederationConfig:
    num_clients: int = 5
    rounds: int = 60
    local_epochs: int = 3
    embed_dim: int = 8
    num_classes: int = 2
    batch_nodes: int = 64               # sampled nodes per client per round
    num_templates: int = 4
    lr0: float = 0.05
    lr_decay_steps: float = 200.0
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 500
    sinkhorn_tol: float = 1e-6
    refine: RefineConfig = field(default_factory=RefineConfig)
    seed: int = 0
    partition_mode: str = "non-overlapping"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    task_metric: str = "accuracy"       # "accuracy" | "auc"
    semantic_enabled: bool = True
    structural_enabled: bool = True
    refine_enabled: bool = True

    def __post_init__(self):
        for name in ("num_clients", "local_epochs", "embed_dim", "num_classes",
                     "batch_nodes", "num_templates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.embed_dim < self.num_classes:
            raise ValueError("embed_dim must be >= num_classes")
        if self.task_metric not in ("accuracy", "auc"):
            raise ValueError(f"unknown task_metric {self.task_metric!r}")
        if self.partition_mode not in ("non-overlapping", "overlapping"):
            raise ValueError(f"unknown partition mode {self.partition_mode!r}")


@dataclass
class ClientState:
    """Everything one client owns; never visible to other clients."""

    client_id: int
    graph: Graph
    agg: HopAggregator
    params: ModelParams
    rotation: CalibrationRotation = None
    batch: np.ndarray = None
    matching: MatchingMatrix = None


@dataclass
class RoundRecord:
    round_idx: int
    ce: list
    sem: list
    stru: list
    val: list
    test: list
    drift: float
    gw_objectives: list

    @property
    def gw_objective_mean(self) -> float:
        return float(np.mean(self.gw_objectives)) if self.gw_objectives else 0.0

    @property
    def mean_test(self) -> float:
        return float(np.mean(self.test))


@dataclass
class HistoryRow:
    """One CSV line of the run history (per round, per client)."""

    round: int
    client_id: int
    ce_loss: float
    sem_loss: float
    str_loss: float
    val_metric: float
    test_metric: float
    anchor_gram_drift: float
    gw_objective_mean: float


@dataclass
class FederationResult:
    records: list
    clients: list
    anchors: EtfAnchors
    templates: StructuralTemplates


def build_dataset(cfg: FederationConfig) -> Graph:
    """Root graph with stratified masks, derived deterministically from cfg."""
    spec = cfg.dataset
    if spec.kind == "synthetic":
        g = generate_sbm(
            spec.nodes, cfg.num_classes, spec.p_in, spec.p_out,
            spec.feat_dim, spec.feat_sep, seed=(cfg.seed, _TAG_DATA),
        )
    else:
        g = load_graph(
            spec.edges_path, spec.features_path, spec.labels_path,
            num_classes=cfg.num_classes,
        )
    return split_masks(g, ratios=spec.split, seed=(cfg.seed, _TAG_SPLIT))


def setup_federation(cfg: FederationConfig):
    """(clients, anchors, templates, root graph) at round zero."""
    g = build_dataset(cfg)
    if cfg.num_clients == 1:
        parts = [g]
    else:
        pspec = PartitionSpec(cfg.num_clients, cfg.partition_mode,
                              seed=(cfg.seed, _TAG_PART))
        if cfg.partition_mode == "non-overlapping":
            parts = partition_nonoverlapping(g, pspec)
        else:
            parts = partition_overlapping(g, pspec)
    clients = []
    for i, part in enumerate(parts):
        params = init_params(
            part.feat_dim, cfg.embed_dim, cfg.num_classes,
            seed=(cfg.seed, _TAG_INIT, i),
        )
        clients.append(ClientState(i, part, HopAggregator(part), params))
    anchors = construct_etf(cfg.num_classes, cfg.embed_dim, seed=(cfg.seed, _TAG_ANCH))
    templates = init_templates(cfg.num_templates, cfg.embed_dim,
                               seed=(cfg.seed, _TAG_TEMPL))
    return clients, anchors, templates, g


@dataclass
class ClientRoundResult:
    params: ModelParams
    rotation: CalibrationRotation
    batch: np.ndarray
    matching: MatchingMatrix
    semantic_report: SemanticReport
    structural_report: StructuralReport
    ce: float
    sem: float
    stru: float
    val_metric: float
    test_metric: float
    epoch_losses: list


def run_client_round(state: ClientState, anchors: EtfAnchors,
                     templates: StructuralTemplates, cfg: FederationConfig,
                     round_idx: int) -> ClientRoundResult:
    """One client's full round; pure in state, safe to run concurrently."""
    g = state.graph
    agg = state.agg
    params = state.params

    cache = forward(params, g, agg)
    manifold = class_means(cache.ego, g.labels, g.train_mask, cfg.num_classes)
    rotation = procrustes(manifold, anchors)

    batch = None
    matching = None
    if cfg.structural_enabled:
        batch = sample_structural_batch(
            g, cfg.batch_nodes, seed=(cfg.seed, _TAG_BATCH, state.client_id, round_idx)
        )
        radials = radial_sequences_from_rings(cache.hop1, cache.hop2, batch)
        matching = sinkhorn_match(
            radials, templates, epsilon=cfg.sinkhorn_epsilon,
            max_iters=cfg.sinkhorn_iters, tol=cfg.sinkhorn_tol,
        )

    loss_anchors = anchors if cfg.semantic_enabled else None
    loss_templates = templates if cfg.structural_enabled else None
    epoch_losses = []
    for epoch in range(cfg.local_epochs):
        t = round_idx * cfg.local_epochs + epoch
        total, _, grads = total_loss(
            params, g, loss_anchors, rotation, loss_templates, matching, batch, agg
        )
        epoch_losses.append(total)
        params = sgd_step(params, grads, lr_schedule(t, cfg.lr0, cfg.lr_decay_steps))

    final_cache = forward(params, g, agg)
    final_total, (ce, sem, stru), _ = total_loss(
        params, g, loss_anchors, rotation, loss_templates, matching, batch, agg
    )
    epoch_losses.append(final_total)

    final_manifold = class_means(final_cache.ego, g.labels, g.train_mask, cfg.num_classes)
    k = rotation.r @ final_manifold.p
    k[:, ~final_manifold.present_mask] = 0.0
    per_class = semantic_per_class_loss(
        final_cache.ego, g.labels, g.train_mask, rotation, anchors
    )
    semantic_report = SemanticReport(
        k=k, present_mask=final_manifold.present_mask, per_class_loss=per_class
    )
    if cfg.structural_enabled:
        final_radials = radial_sequences_from_rings(
            final_cache.hop1, final_cache.hop2, batch
        )
        structural_report = StructuralReport(radials=final_radials, matching=matching)
    else:
        structural_report = StructuralReport(
            radials=[], matching=MatchingMatrix(f=np.zeros((0, cfg.num_templates)))
        )

    val = _metric_from_logits(final_cache.logits, g, "val", cfg.task_metric)
    test = _metric_from_logits(final_cache.logits, g, "test", cfg.task_metric)
    return ClientRoundResult(
        params=params, rotation=rotation, batch=batch, matching=matching,
        semantic_report=semantic_report, structural_report=structural_report,
        ce=ce, sem=sem, stru=stru, val_metric=val, test_metric=test,
        epoch_losses=epoch_losses,
    )


def _metric_from_logits(logits, g: Graph, split: str, metric: str) -> float:
    mask = g.val_mask if split == "val" else g.test_mask
    idx = np.nonzero(mask & (g.labels >= 0))[0]
    if len(idx) == 0:
        raise RuntimeError(f"{split} split is empty")
    y = g.labels[idx]
    if metric == "accuracy":
        pred = logits[idx].argmax(axis=1)
        return float((pred == y).mean())
    if metric == "auc":
        if logits.shape[1] != 2:
            raise RuntimeError("auc needs a binary task")
        pos = y == 1
        n_pos = int(pos.sum())
        n_neg = len(y) - n_pos
        if n_pos == 0 or n_neg == 0:
            raise RuntimeError(f"{split} split holds a single class; auc undefined")
        z = logits[idx]
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p1 = e[:, 1] / e.sum(axis=1)
        ranks = rankdata(p1, method="average")
        return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
    raise ValueError(f"unknown metric {metric!r}")


def evaluate(state: ClientState, split: str, metric: str = "accuracy") -> float:
    """Validation or test metric of one client's current model."""
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    cache = forward(state.params, state.graph, state.agg)
    return _metric_from_logits(cache.logits, state.graph, split, metric)


def run_federation(cfg: FederationConfig, threads: int = 1) -> FederationResult:
    """Full federated run; deterministic for a seed at any thread count."""
    clients, anchors, templates, _ = setup_federation(cfg)
    records = []
    for round_idx in range(cfg.rounds):
        def one(state):
            try:
                return run_client_round(state, anchors, templates, cfg, round_idx)
            except Exception as exc:
                raise FederationError(
                    f"client {state.client_id} failed at round {round_idx}: {exc}"
                ) from exc

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, clients))
        else:
            results = [one(state) for state in clients]

        for state, res in zip(clients, results):
            state.params = res.params
            state.rotation = res.rotation
            state.batch = res.batch
            state.matching = res.matching

        sem_reports = [r.semantic_report for r in results]
        str_reports = [r.structural_report for r in results]

        if cfg.refine_enabled:
            anchors, drift = refine_all_anchors(anchors, sem_reports, cfg.refine)
        else:
            drift = gram_drift(anchors)

        gw_objectives = []
        if cfg.structural_enabled:
            new_rows = templates.rows.copy()
            for q in range(cfg.num_templates):
                if cfg.refine_enabled:
                    new_rows[q] = update_template(q, str_reports, templates, cfg.refine)
                gw_objectives.append(template_objective(str_reports, q, new_rows[q]))
            if cfg.refine_enabled:
                templates = StructuralTemplates(rows=new_rows)

        records.append(RoundRecord(
            round_idx=round_idx,
            ce=[r.ce for r in results],
            sem=[r.sem for r in results],
            stru=[r.stru for r in results],
            val=[r.val_metric for r in results],
            test=[r.test_metric for r in results],
            drift=drift,
            gw_objectives=gw_objectives,
        ))
    return FederationResult(records=records, clients=clients,
                            anchors=anchors, templates=templates)


_HISTORY_COLUMNS = [
    "round", "client_id", "ce_loss", "sem_loss", "str_loss",
    "val_metric", "test_metric", "anchor_gram_drift", "gw_objective_mean",
]


def records_to_rows(records) -> list:
    rows = []
    for rec in records:
        for cid in range(len(rec.ce)):
            rows.append(HistoryRow(
                round=rec.round_idx,
                client_id=cid,
                ce_loss=float(rec.ce[cid]),
                sem_loss=float(rec.sem[cid]),
                str_loss=float(rec.stru[cid]),
                val_metric=float(rec.val[cid]),
                test_metric=float(rec.test[cid]),
                anchor_gram_drift=float(rec.drift),
                gw_objective_mean=rec.gw_objective_mean,
            ))
    return rows


def export_history(records, path):
    """Write the run history CSV (floats as shortest round-trip reprs)."""
    rows = records_to_rows(records)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HISTORY_COLUMNS)
        for row in rows:
            writer.writerow([
                row.round, row.client_id,
                repr(row.ce_loss), repr(row.sem_loss), repr(row.str_loss),
                repr(row.val_metric), repr(row.test_metric),
                repr(row.anchor_gram_drift), repr(row.gw_objective_mean),
            ])


def import_history(path) -> list:
    """Parse a history CSV back into HistoryRow values (bit-exact floats)."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected history header {header}")
        for parts in reader:
            rows.append(HistoryRow(
                round=int(parts[0]), client_id=int(parts[1]),
                ce_loss=float(parts[2]), sem_loss=float(parts[3]),
                str_loss=float(parts[4]), val_metric=float(parts[5]),
                test_metric=float(parts[6]), anchor_gram_drift=float(parts[7]),
                gw_objective_mean=float(parts[8]),
            ))
    return rows


def export_embeddings(state: ClientState, path):
    """CSV of calibrated ego-embeddings: node id, label, then d columns."""
    cache = forward(state.params, state.graph, state.agg)
    r = state.rotation.r if state.rotation is not None else np.eye(cache.ego.shape[1])
    calibrated = cache.ego @ r.T
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["node_id", "label"] + [f"e_{j}" for j in range(calibrated.shape[1])]
        )
        for i in range(state.graph.num_nodes):
            writer.writerow(
                [int(state.graph.node_ids[i]), int(state.graph.labels[i])]
                + [repr(float(x)) for x in calibrated[i]]
            )

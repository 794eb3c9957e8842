"""Command-line entry point.

Commands:
  gen-data   write a seeded synthetic graph as edges/features/labels files
  run        execute a federated run, writing history.csv, summary.json,
             per-client model dumps and (optionally) embedding CSVs
  eval       recompute metrics from a finished run's saved models
  report     aggregate several history CSVs into a mean/std table

Configs are flat text files, one ``section.key = value`` per line, ``#``
starting a comment line. Unknown keys are rejected. The full key list
lives in the README and in _CONFIG_SCHEMA below.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .fedsim import (
    DatasetSpec,
    FederationConfig,
    FederationError,
    build_dataset,
    evaluate,
    export_embeddings,
    export_history,
    import_history,
    run_federation,
    setup_federation,
)
from .graph import edge_homophily, save_graph_files
from .model import ModelParams
from .refine import RefineConfig

__all__ = ["main", "parse_config_file", "build_run_config", "save_params", "load_params"]


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


# key -> (parser, default); None default means "no entry unless given"
_CONFIG_SCHEMA = {
    "federation.clients": (int, 5),
    "federation.rounds": (int, 60),
    "federation.local_epochs": (int, 3),
    "federation.embed_dim": (int, 8),
    "federation.classes": (int, 2),
    "federation.batch_nodes": (int, 64),
    "federation.templates": (int, 4),
    "federation.seed": (int, 0),
    "federation.metric": (str, "accuracy"),
    "partition.mode": (str, "non-overlapping"),
    "train.lr0": (float, 0.05),
    "train.lr_decay_steps": (float, 200.0),
    "sinkhorn.epsilon": (float, 0.05),
    "sinkhorn.max_iters": (int, 500),
    "sinkhorn.tol": (float, 1e-6),
    "refine.tau": (float, 1.0),
    "refine.eta": (float, 0.1),
    "refine.eps": (float, 1e-8),
    "refine.gw_lr": (float, 1.0),
    "refine.gw_iters": (int, 200),
    "dataset.kind": (str, "synthetic"),
    "dataset.nodes": (int, 600),
    "dataset.p_in": (float, 0.1),
    "dataset.p_out": (float, 0.01),
    "dataset.feat_dim": (int, 16),
    "dataset.feat_sep": (float, 1.0),
    "dataset.edges": (str, None),
    "dataset.features": (str, None),
    "dataset.labels": (str, None),
    "split.train": (float, 0.2),
    "split.val": (float, 0.4),
    "split.test": (float, 0.4),
    "output.dir": (str, "out"),
    "output.embeddings": (_parse_bool, False),
}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file -> raw string dict; unknown keys are errors."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    raw = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_SCHEMA:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            if key in raw:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    return raw


class RunConfig:
    """Parsed, validated configuration for one run."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def federation_config(self, seed=None, ablate=()) -> FederationConfig:
        v = self.values
        dataset = DatasetSpec(
            kind=v["dataset.kind"],
            nodes=v["dataset.nodes"],
            p_in=v["dataset.p_in"],
            p_out=v["dataset.p_out"],
            feat_dim=v["dataset.feat_dim"],
            feat_sep=v["dataset.feat_sep"],
            edges_path=v["dataset.edges"],
            features_path=v["dataset.features"],
            labels_path=v["dataset.labels"],
            split=(v["split.train"], v["split.val"], v["split.test"]),
        )
        refine = RefineConfig(
            tau=v["refine.tau"], eta=v["refine.eta"], eps=v["refine.eps"],
            gw_lr=v["refine.gw_lr"], gw_iters=v["refine.gw_iters"],
        )
        return FederationConfig(
            num_clients=v["federation.clients"],
            rounds=v["federation.rounds"],
            local_epochs=v["federation.local_epochs"],
            embed_dim=v["federation.embed_dim"],
            num_classes=v["federation.classes"],
            batch_nodes=v["federation.batch_nodes"],
            num_templates=v["federation.templates"],
            lr0=v["train.lr0"],
            lr_decay_steps=v["train.lr_decay_steps"],
            sinkhorn_epsilon=v["sinkhorn.epsilon"],
            sinkhorn_iters=v["sinkhorn.max_iters"],
            sinkhorn_tol=v["sinkhorn.tol"],
            refine=refine,
            seed=v["federation.seed"] if seed is None else int(seed),
            partition_mode=v["partition.mode"],
            dataset=dataset,
            task_metric=v["federation.metric"],
            semantic_enabled="semantic" not in ablate,
            structural_enabled="structural" not in ablate,
            refine_enabled="refinement" not in ablate,
        )


def build_run_config(raw: dict, overrides: dict = None) -> RunConfig:
    values = {}
    for key, (caster, default) in _CONFIG_SCHEMA.items():
        if key in raw:
            try:
                values[key] = caster(raw[key])
            except ValueError as exc:
                raise ValueError(f"bad value for {key}: {exc}")
        else:
            values[key] = default
    if overrides:
        values.update(overrides)
    return RunConfig(values)


def write_resolved_config(cfg: RunConfig, path):
    """Persist every key explicitly so a run can be replayed byte-for-byte."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(_CONFIG_SCHEMA):
            value = cfg.values[key]
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            fh.write(f"{key} = {value}\n")


def save_params(params: ModelParams, path):
    """Self-describing text dump: named shapes followed by row-major values."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# fedcal-params 1\n")
        for name in ("w_ego", "w_cls", "b_cls"):
            arr = np.atleast_2d(getattr(params, name))
            fh.write(f"shape {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_params(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("# fedcal-params"):
        raise ValueError(f"{path}: not a fedcal parameter dump")
    arrays = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        parts = lines[i].split()
        if len(parts) != 4 or parts[0] != "shape":
            raise ValueError(f"{path}: malformed shape header at line {i + 1}")
        name, rows, cols = parts[1], int(parts[2]), int(parts[3])
        data = []
        for r in range(rows):
            i += 1
            if i >= len(lines):
                raise ValueError(f"{path}: truncated array {name}")
            row = [float(x) for x in lines[i].split()]
            if len(row) != cols:
                raise ValueError(
                    f"{path}: array {name} row {r} has {len(row)} values, expected {cols}"
                )
            data.append(row)
        arrays[name] = np.asarray(data, dtype=np.float64)
        i += 1
    missing = {"w_ego", "w_cls", "b_cls"} - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing arrays {sorted(missing)}")
    return ModelParams(
        w_ego=arrays["w_ego"], w_cls=arrays["w_cls"], b_cls=arrays["b_cls"][0]
    )


def cmd_gen_data(args) -> int:
    cfg = build_run_config(parse_config_file(args.config))
    if cfg["dataset.kind"] != "synthetic":
        raise ValueError("gen-data needs dataset.kind = synthetic")
    fed = cfg.federation_config(seed=args.seed)
    g = build_dataset(fed)
    out = args.out or cfg["output.dir"]
    os.makedirs(out, exist_ok=True)
    save_graph_files(
        g,
        os.path.join(out, "edges.txt"),
        os.path.join(out, "features.txt"),
        os.path.join(out, "labels.txt"),
    )
    print(f"nodes={g.num_nodes} edges={g.num_edges} homophily={edge_homophily(g):.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = build_run_config(parse_config_file(args.config))
    ablate = tuple(args.ablate or ())
    fed = cfg.federation_config(seed=args.seed, ablate=ablate)
    result = run_federation(fed, threads=args.threads)
    out = args.out or cfg["output.dir"]
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)

    export_history(result.records, os.path.join(out, "history.csv"))
    resolved = dict(cfg.values)
    resolved["federation.seed"] = fed.seed
    write_resolved_config(RunConfig(resolved), os.path.join(out, "config.resolved"))

    per_val = [evaluate(c, "val", fed.task_metric) for c in result.clients]
    per_test = [evaluate(c, "test", fed.task_metric) for c in result.clients]
    summary = {
        "rounds": fed.rounds,
        "clients": fed.num_clients,
        "metric": fed.task_metric,
        "ablate": list(ablate),
        "per_client_val": per_val,
        "per_client_test": per_test,
        "mean_val": float(np.mean(per_val)),
        "mean_test": float(np.mean(per_test)),
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for client in result.clients:
        save_params(
            client.params, os.path.join(out, "models", f"client_{client.client_id}.txt")
        )
        if cfg["output.embeddings"]:
            export_embeddings(
                client, os.path.join(out, f"embeddings_{client.client_id}.csv")
            )
    print(f"run complete: mean_test={summary['mean_test']:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    config_path = args.config or os.path.join(args.model_dir, "config.resolved")
    cfg = build_run_config(parse_config_file(config_path))
    fed = cfg.federation_config()
    clients, _, _, _ = setup_federation(fed)
    metrics = []
    for client in clients:
        dump = os.path.join(args.model_dir, "models", f"client_{client.client_id}.txt")
        if not os.path.exists(dump):
            raise FileNotFoundError(f"missing model dump: {dump}")
        params = load_params(dump)
        if params.w_ego.shape != client.params.w_ego.shape or \
                params.w_cls.shape != client.params.w_cls.shape:
            raise ValueError(
                f"{dump}: parameter shapes do not match the configured model"
            )
        client.params = params
        metrics.append(evaluate(client, args.split, fed.task_metric))
    for cid, value in enumerate(metrics):
        print(f"client {cid} {args.split} {fed.task_metric}: {value:.6f}")
    print(f"mean {args.split} {fed.task_metric}: {float(np.mean(metrics)):.6f}")
    return 0


def cmd_report(args) -> int:
    lines = []
    finals = []
    width = max(len(p) for p in args.histories)
    lines.append(f"{'history':<{width}}  final_test_mean  final_test_std")
    for path in args.histories:
        rows = import_history(path)
        if not rows:
            lines.append(f"{path:<{width}}  {'n/a':>15}  {'n/a':>14}")
            continue
        last = max(r.round for r in rows)
        tests = [r.test_metric for r in rows if r.round == last]
        finals.append(float(np.mean(tests)))
        lines.append(
            f"{path:<{width}}  {np.mean(tests):>15.4f}  {np.std(tests):>14.4f}"
        )
    if finals:
        lines.append(
            f"{'aggregate':<{width}}  {np.mean(finals):>15.4f}  {np.std(finals):>14.4f}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcal",
        description="Deterministic federated graph-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="execute a federated run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablate", action="append",
                   choices=["semantic", "structural", "refinement"],
                   help="disable one mechanism (repeatable)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="recompute metrics from saved models")
    p.add_argument("--model-dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate history CSVs")
    p.add_argument("histories", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FederationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

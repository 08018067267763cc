"""Command-line entry points: ``python -m fewshot_qp <command> [flags]``.

Commands: gen-data, train, eval, sweep-shot, sweep-qp-iters, compare-learners,
selftest. Every command writes ``summary.json`` into ``--out``; failures
write ``error.json`` there instead and exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checks
from . import config as cfgmod
from . import embedding as emb
from .base_learners import LearnerConfig
from .episodes import ClassDataset, load_dataset, save_dataset, synthetic_task_distribution
from .meta_loop import EvalRecord, evaluate, meta_train

log = logging.getLogger("fewshot_qp")

# independent random streams derived from the run seed
DATA_STREAM, EVAL_STREAM, TIMING_STREAM = 1, 2, 3


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def build_dataset(cfg: cfgmod.ExperimentConfig) -> ClassDataset:
    d = cfg.data
    if d.path is not None:
        return load_dataset(d.path, d.format, d.manifest)
    rng = np.random.default_rng([cfg.seed, DATA_STREAM])
    return synthetic_task_distribution(d.classes, d.informative_dim, d.noise_dim,
                                       d.cluster_spread, d.items_per_class, rng)


class Run:
    """Output directory plus the resolved config of one command invocation."""

    def __init__(self, command: str, cfg: cfgmod.ExperimentConfig, out: Path, workers: int = 1):
        self.command, self.cfg, self.out, self.workers = command, cfg, out, workers
        out.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()

    @property
    def header(self) -> dict:
        return {"schema_version": cfgmod.SCHEMA_VERSION, "command": self.command,
                "seed": self.cfg.seed, "config": cfgmod.to_dict(self.cfg),
                "config_hash": cfgmod.config_hash(self.cfg)}

    def write_summary(self, results: dict) -> Path:
        doc = {**self.header, "results": results,
               "wall_seconds": round(time.perf_counter() - self.t0, 3)}
        path = self.out / "summary.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path

    def child(self, name: str, cfg: cfgmod.ExperimentConfig) -> "Run":
        return Run(self.command, cfg, self.out / name, self.workers)


def _with(cfg: cfgmod.ExperimentConfig, **changes) -> cfgmod.ExperimentConfig:
    """Copy of ``cfg`` with dotted-path replacements, e.g. ``meta__learner__kind``."""
    for key, value in changes.items():
        path = key.split("__")

        def rec(obj, parts):
            if len(parts) == 1:
                return dataclasses.replace(obj, **{parts[0]: value})
            return dataclasses.replace(obj, **{parts[0]: rec(getattr(obj, parts[0]), parts[1:])})

        cfg = rec(cfg, path)
    return cfg


# ------------------------------------------------------------------ pieces

def train_run(run: Run, dataset: ClassDataset):
    """Meta-train, streaming validation records to ``metrics.jsonl``; writes the checkpoint."""
    cfg = run.cfg
    metrics_path = run.out / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        fh.write(_dumps({"record": "config", **run.header}) + "\n")

        def on_record(entry):
            fh.write(_dumps({"record": "validation", "seed": cfg.seed, **entry}) + "\n")
            fh.flush()
            log.info("epoch %d val acc %.4f +- %.4f gamma %.3f", entry["epoch"],
                     entry["accuracy"], entry["ci95"], entry["gamma"])

        params, scale, metrics = meta_train(cfg.meta, dataset, cfg.seed, run.workers, on_record)
        fh.write(_dumps({"record": "selected", "seed": cfg.seed, "best_epoch": metrics.best_epoch,
                         "gamma": scale.gamma}) + "\n")
    ckpt = run.out / "checkpoint.json"
    emb.save_checkpoint(ckpt, cfg.meta.embedding, params, cfg.seed,
                        {"gamma": scale.gamma, "best_epoch": metrics.best_epoch,
                         "config": cfgmod.to_dict(cfg), "config_hash": cfgmod.config_hash(cfg)})
    return params, scale.gamma, metrics


def evaluate_shots(cfg: cfgmod.ExperimentConfig, params, gamma: float, dataset: ClassDataset,
                   learner: Optional[LearnerConfig] = None, shuffle_labels: bool = False,
                   spec: Optional[emb.EmbeddingSpec] = None) -> List[EvalRecord]:
    """One record per configured test shot; every shot uses its own fixed episode stream."""
    ev = cfg.eval
    way = ev.way or cfg.meta.episodes.way
    out = []
    for shot in ev.shots:
        rng = np.random.default_rng([cfg.seed, EVAL_STREAM, shot])
        out.append(evaluate(params, gamma, spec or cfg.meta.embedding, dataset, ev.split,
                            learner or cfg.meta.learner, ev.episodes, rng, way, shot, ev.query,
                            cfg.meta.solver, shuffle_labels=shuffle_labels))
        log.info("%s %d-shot acc %.4f +- %.4f", ev.split, shot, out[-1].accuracy, out[-1].ci95)
    return out


def median_timings(cfg: cfgmod.ExperimentConfig, params, gamma: float, dataset: ClassDataset,
                   shot: int, learner: Optional[LearnerConfig] = None) -> dict:
    ev = cfg.eval
    n = max(ev.timing_episodes, 200)
    times: list = []
    evaluate(params, gamma, cfg.meta.embedding, dataset, ev.split, learner or cfg.meta.learner,
             n, np.random.default_rng([cfg.seed, TIMING_STREAM, shot]),
             ev.way or cfg.meta.episodes.way, shot, ev.query, cfg.meta.solver, timings=times)
    t = np.asarray(times) * 1e3
    return {"embed_ms": float(np.median(t[:, 0])), "solver_ms": float(np.median(t[:, 1])),
            "timing_episodes": n}


def append_test_records(path: Path, seed: int, records: Sequence[EvalRecord], **extra) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(_dumps({"record": "test", "seed": seed, **extra, **r.__dict__}) + "\n")


def write_sweep_csv(path: Path, columns: Sequence[str], rows: List[dict], sort_key) -> Path:
    """Write the whole table at once, sorted by the sweep key, with a schema column."""
    rows = sorted(rows, key=sort_key)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["schema_version", *columns], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({"schema_version": cfgmod.SCHEMA_VERSION, **row})
    return path


def _record_row(r: EvalRecord) -> dict:
    return {"test_shot": r.shot, "accuracy": f"{r.accuracy:.6f}", "std": f"{r.std:.6f}",
            "ci95": f"{r.ci95:.6f}", "episodes": r.episodes}


_RECORD_COLUMNS = ["test_shot", "accuracy", "std", "ci95", "episodes"]


def _load_model(path: str):
    spec, params, _, extra = emb.load_checkpoint(path)
    return spec, params, float(extra.get("gamma", 1.0))


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    fmt = args.format
    target = run.out / f"dataset.{fmt}"
    manifest = save_dataset(dataset, target, fmt)
    return {"dataset": str(target), "manifest": str(manifest), "format": fmt,
            "classes": {k: len(v) for k, v in dataset.splits.items()}, "dim": dataset.dim}


def cmd_train(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    params, gamma, metrics = train_run(run, dataset)
    records = evaluate_shots(run.cfg, params, gamma, dataset)
    append_test_records(run.out / "metrics.jsonl", run.cfg.seed, records)
    return {"checkpoint": str(run.out / "checkpoint.json"), "best_epoch": metrics.best_epoch,
            "gamma": gamma, "train_loss": metrics.train_loss,
            "test": [r.__dict__ for r in records]}


def cmd_eval(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    if args.checkpoint:
        spec, params, gamma = _load_model(args.checkpoint)
    else:
        # the untrained initialization, i.e. what train would start from
        spec = run.cfg.meta.embedding
        init_ss = np.random.SeedSequence(run.cfg.seed).spawn(3)[0]
        params = emb.init_params(spec, np.random.default_rng(init_ss))
        gamma = run.cfg.meta.gamma_init
    records = evaluate_shots(run.cfg, params, gamma, dataset, shuffle_labels=args.shuffle_labels,
                             spec=spec)
    path = run.out / "metrics.jsonl"
    path.write_text(_dumps({"record": "config", **run.header}) + "\n")
    append_test_records(path, run.cfg.seed, records, shuffled_labels=args.shuffle_labels)
    return {"checkpoint": args.checkpoint, "shuffled_labels": args.shuffle_labels,
            "test": [r.__dict__ for r in records]}


def cmd_sweep_shot(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    rows = []
    for train_shot in run.cfg.sweep.train_shots:
        sub = run.child(f"train_shot_{train_shot}",
                        _with(run.cfg, meta__episodes=dataclasses.replace(
                            run.cfg.meta.episodes, train_shot=int(train_shot))))
        params, gamma, _ = train_run(sub, dataset)
        records = evaluate_shots(sub.cfg, params, gamma, dataset)
        append_test_records(sub.out / "metrics.jsonl", sub.cfg.seed, records)
        rows += [{"train_shot": train_shot, **_record_row(r)} for r in records]
    path = write_sweep_csv(run.out / "sweep.csv", ["train_shot", *_RECORD_COLUMNS], rows,
                           lambda r: (r["train_shot"], r["test_shot"]))
    return {"sweep_csv": str(path), "rows": rows}


def cmd_sweep_qp_iters(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    if args.checkpoint:
        spec, params, gamma = _load_model(args.checkpoint)
    else:
        sub = run.child("train", run.cfg)
        params, gamma, _ = train_run(sub, dataset)
        spec = run.cfg.meta.embedding
    rows = []
    for cap in run.cfg.sweep.qp_iters:
        learner = dataclasses.replace(run.cfg.meta.learner, qp_iteration_cap=cap)
        records = evaluate_shots(run.cfg, params, gamma, dataset, learner=learner, spec=spec)
        rows += [{"qp_iteration_cap": "converged" if cap is None else cap, **_record_row(r)}
                 for r in records]
    path = write_sweep_csv(
        run.out / "sweep.csv", ["qp_iteration_cap", *_RECORD_COLUMNS], rows,
        lambda r: (r["qp_iteration_cap"] == "converged",
                   0 if r["qp_iteration_cap"] == "converged" else r["qp_iteration_cap"],
                   r["test_shot"]))
    return {"sweep_csv": str(path), "rows": rows}


def cmd_compare_learners(run: Run, args) -> dict:
    dataset = build_dataset(run.cfg)
    rows = []
    for kind in run.cfg.sweep.learners:
        learner = dataclasses.replace(run.cfg.meta.learner, kind=kind)
        sub = run.child(kind, _with(run.cfg, meta__learner=learner))
        params, gamma, _ = train_run(sub, dataset)
        records = evaluate_shots(sub.cfg, params, gamma, dataset)
        append_test_records(sub.out / "metrics.jsonl", sub.cfg.seed, records)
        for r in records:
            t = median_timings(sub.cfg, params, gamma, dataset, r.shot)
            rows.append({"learner": kind, **_record_row(r),
                         "embed_ms": f"{t['embed_ms']:.4f}", "solver_ms": f"{t['solver_ms']:.4f}",
                         "timing_episodes": t["timing_episodes"]})
    path = write_sweep_csv(run.out / "sweep.csv",
                           ["learner", *_RECORD_COLUMNS, "embed_ms", "solver_ms",
                            "timing_episodes"],
                           rows, lambda r: (r["learner"], r["test_shot"]))
    return {"sweep_csv": str(path), "rows": rows}


def cmd_selftest(run: Run, args) -> dict:
    results = checks.selftest_suite(quick=not args.full)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    summary = {"passed": not failed, "checks": [dataclasses.asdict(r) for r in results]}
    if failed:
        raise SelftestFailure(f"failed checks: {', '.join(failed)}", summary)
    return summary


class SelftestFailure(RuntimeError):
    def __init__(self, message, details):
        super().__init__(message)
        self.details = details


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-shot": cmd_sweep_shot,
    "sweep-qp-iters": cmd_sweep_qp_iters,
    "compare-learners": cmd_compare_learners,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-key override, repeatable")
    common.add_argument("--workers", type=int, default=1, help="parallel episodes per batch")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="fewshot-qp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "gen-data":
            p.add_argument("--format", choices=("csv", "idx"), default="csv")
        if name in ("eval", "sweep-qp-iters"):
            p.add_argument("--checkpoint", help="checkpoint.json from a train run")
        if name == "eval":
            p.add_argument("--shuffle-labels", action="store_true",
                           help="permute query labels per episode (chance-level control)")
        if name == "selftest":
            p.add_argument("--full", action="store_true", help="run full-size oracle suites")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    out = Path(args.out or f"runs/{args.command}")
    cfg = None
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        cfg = cfgmod.load(args.config, args.overrides, args.seed)
        run = Run(args.command, cfg, out, args.workers)
        results = COMMANDS[args.command](run, args)
        run.write_summary(results)
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes error.json
        doc = {"schema_version": cfgmod.SCHEMA_VERSION, "command": args.command,
               "error": type(exc).__name__, "message": str(exc),
               "seed": cfg.seed if cfg is not None else args.seed,
               "config": cfgmod.to_dict(cfg) if cfg is not None else None,
               "traceback": traceback.format_exc()}
        if isinstance(exc, SelftestFailure):
            doc["details"] = exc.details
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        except OSError:
            pass
        print(json.dumps({k: doc[k] for k in ("command", "error", "message")}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

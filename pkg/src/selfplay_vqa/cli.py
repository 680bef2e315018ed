"""Operator surface: train, eval, report, and pool-inspection commands."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import datetime
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import corpus, inference, selfplay
from .config import ENGINE_VERSION, EngineConfig, build_gateway, build_runner, load_config
from .errors import ConfigError, EngineError

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def run_lock(run_dir: Path):
    """Advisory lock so two commands do not share a run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {run_dir} is locked by another command ({lock_path})")
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(OSError):
            lock_path.unlink()


def _load_split(config: EngineConfig, task: corpus.TaskSpec, split: str, allow_unlabeled: bool = False):
    if split not in task.split_paths:
        raise ConfigError(f"task {task.name!r} has no {split!r} split configured")
    root = config.base_dir / config.dataset_root
    return corpus.load_dataset(root / task.split_paths[split], split, dataset_root=root, allow_unlabeled=allow_unlabeled)


def _write_manifest(run_dir: Path, config: EngineConfig, command: str, task_name: str) -> None:
    manifest = {
        "command": command,
        "task": task_name,
        "config_hash": config.config_hash(),
        "engine_version": ENGINE_VERSION,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "train": {
            "steps": config.train.steps,
            "shots_schedule": list(config.train.shots_schedule),
            "n_samples": config.train.n_samples,
            "refinement_rounds": config.train.refinement_rounds,
            "rng_seed": config.train.rng_seed,
        },
        "seeds": [seed.tag for seed in config.seeds],
    }
    (run_dir / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def cmd_train(config: EngineConfig, task_name: str) -> int:
    task = config.task(task_name)
    examples = _load_split(config, task, "train")
    gateway = build_gateway(config)
    runner = build_runner(config)
    run_dir = config.base_dir / config.run_dir
    train = config.train
    if config.deterministic and train.worker_parallelism != 1:
        train = dataclasses.replace(train, worker_parallelism=1)
    with run_lock(run_dir):
        histories = selfplay.run_training(
            task,
            config.seeds,
            examples,
            train,
            gateway,
            runner,
            config.orchestrator_backend,
            config.limits(),
            out_dir=run_dir,
            provenance=config.config_hash(),
        )
        for seed_tag, history in histories.items():
            stats_path = run_dir / "pools" / task.name / seed_tag / "stats.csv"
            stats_path.parent.mkdir(parents=True, exist_ok=True)
            stats_path.write_text(selfplay.stats_to_csv(history), encoding="utf-8")
        _write_manifest(run_dir, config, "train", task.name)
    print(f"trained {len(histories)} seeds x {train.steps} steps -> {run_dir}")
    return 0


def _load_eval_pools(config: EngineConfig, task: corpus.TaskSpec, run_dir: Path):
    last_step = config.train.steps - 1
    pools = []
    for seed in config.seeds:
        directory = selfplay.pool_dir(run_dir, task.name, seed.tag, last_step)
        if not (directory / "manifest.json").is_file():
            raise ConfigError(
                f"missing pool for task={task.name} seed={seed.tag} step={last_step}: {directory}"
            )
        pools.append(selfplay.load_pool(directory))
    return pools


def cmd_eval(config: EngineConfig, task_name: str, split: str, aggregators) -> int:
    task = config.task(task_name)
    aggregators = tuple(aggregators) if aggregators else config.aggregators
    examples = _load_split(config, task, split, allow_unlabeled=True)
    if inference.ORACLE in aggregators and any(not example.labeled for example in examples):
        raise ConfigError(f"oracle aggregation requires labels, but split {split!r} has unlabeled examples")
    gateway = build_gateway(config)
    runner = build_runner(config)
    run_dir = config.base_dir / config.run_dir
    pools = _load_eval_pools(config, task, run_dir)
    train_examples = _load_split(config, task, "train")
    pools.append(
        inference.build_direct_qa_pool(train_examples, config.direct_qa_pool_size, config.train.rng_seed)
    )

    eval_dir = run_dir / "eval"
    stem = f"{task.name}_{split}"
    with run_lock(run_dir):
        eval_dir.mkdir(parents=True, exist_ok=True)
        report = inference.evaluate_mixed(
            task,
            pools,
            examples,
            config.strategy(),
            aggregators,
            gateway,
            runner,
            config.orchestrator_backend,
            config.judge_backend,
            config.limits(),
            per_example_out=str(eval_dir / f"{stem}_candidates.jsonl"),
        )
        (eval_dir / f"{stem}_summary.csv").write_text(report.summary_csv(), encoding="utf-8")
        (eval_dir / f"{stem}_summary.md").write_text(report.summary_markdown() + "\n", encoding="utf-8")
    print(report.summary_markdown())
    print(f"best single pool: {report.best_single_tag}; ties: {report.tie_count}")
    return 0


def cmd_report(run_dirs) -> int:
    rows = []
    hashes = set()
    for run_dir in run_dirs:
        manifest_path = Path(run_dir) / "run_manifest.json"
        if not manifest_path.is_file():
            raise ConfigError(f"no run manifest in {run_dir}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        hashes.add(manifest.get("config_hash", ""))
        for stats_path in sorted(Path(run_dir).glob("pools/*/*/stats.csv")):
            seed_tag = stats_path.parent.name
            task_name = stats_path.parent.parent.name
            reader = csv.DictReader(io.StringIO(stats_path.read_text(encoding="utf-8")))
            for record in reader:
                rows.append(
                    {
                        "run": str(run_dir),
                        "task": task_name,
                        "seed": seed_tag,
                        **record,
                    }
                )
    mismatch = len(hashes) > 1
    header = ["run", "task", "seed", "step", "shots", "metric_pct", "cpr_pct", "pool_after", "rescues"]
    print("| " + " | ".join(header) + " |")
    print("|" + "---|" * len(header))
    for row in rows:
        print("| " + " | ".join(str(row.get(col, "")) for col in header) + " |")
    if mismatch:
        print("WARNING: config hashes differ across runs; comparisons may not be like-for-like")
    return 0


def cmd_pools(config: EngineConfig, task_name: str, action: str) -> int:
    task = config.task(task_name)
    run_dir = config.base_dir / config.run_dir
    pools_root = run_dir / "pools" / task.name
    if not pools_root.is_dir():
        raise ConfigError(f"no pools for task {task.name!r} under {run_dir}")
    if action == "inspect":
        for manifest_path in sorted(pools_root.glob("*/step_*/manifest.json")):
            pool = selfplay.load_pool(manifest_path.parent)
            print(f"== {manifest_path.parent} ({len(pool.exemplars)} exemplars)")
            for ex in pool.exemplars:
                print(f"-- {ex.example_id}: Q: {ex.question}")
                print(f"   A: {ex.answer}")
                if ex.program:
                    for line in ex.program.splitlines():
                        print(f"   | {line}")
        return 0
    if action == "audit":
        examples = _load_split(config, task, "train")
        failures = selfplay.audit_run_dir(run_dir, task, examples)
        if failures:
            for failure in failures:
                print(f"AUDIT FAIL {failure}")
            return 1
        print("audit ok: every persisted exemplar still matches its gold label")
        return 0
    raise ConfigError(f"unknown pools action {action!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfplay-vqa", description=__doc__)
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to the engine config JSON")
        p.add_argument("--task", required=True, help="task name from the config")
        p.add_argument("--deterministic", action="store_true", help="force parallelism 1")
        p.add_argument("--parallelism", type=int, default=None)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")

    p_train = sub.add_parser("train", help="run the self-play training loop")
    add_common(p_train)

    p_eval = sub.add_parser("eval", help="evaluate pools with mixed-shot aggregation")
    add_common(p_eval)
    p_eval.add_argument("--split", default="validation")
    p_eval.add_argument("--aggregator", action="append", default=[], choices=list(inference.AGGREGATORS))

    p_report = sub.add_parser("report", help="compare runs")
    p_report.add_argument("run_dirs", nargs="+")

    p_pools = sub.add_parser("pools", help="inspect or audit persisted pools")
    p_pools.add_argument("action", choices=["inspect", "audit"])
    add_common(p_pools)

    return parser


def _config_from_args(args) -> EngineConfig:
    overrides = list(args.overrides)
    if args.parallelism is not None:
        overrides.append(f"train.worker_parallelism={args.parallelism}")
    if args.deterministic:
        # applied last: determinism always wins over an explicit parallelism
        overrides.append("deterministic=true")
        overrides.append("train.worker_parallelism=1")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        if args.command == "train":
            return cmd_train(_config_from_args(args), args.task)
        if args.command == "eval":
            return cmd_eval(_config_from_args(args), args.task, args.split, args.aggregator)
        if args.command == "report":
            return cmd_report(args.run_dirs)
        if args.command == "pools":
            return cmd_pools(_config_from_args(args), args.task, args.action)
        raise ConfigError(f"unknown command {args.command!r}")
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

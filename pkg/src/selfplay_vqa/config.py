"""Engine configuration: a single JSON file, hashable for run manifests.

Backends may be real HTTP endpoints or scripted doubles loaded from rule
files, so hermetic smoke runs are expressible purely in configuration.
Credentials never appear in config files, only environment variable names.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from .corpus import TaskSpec
from .errors import ConfigError
from .inference import (
    AGGREGATORS,
    COMPLEXITY_CLUSTER,
    EMBEDDING_SIMILARITY,
    UNIFORM_RANDOM,
    SamplingStrategy,
    TrigramEmbedder,
)
from .modelgw import BackendConfig, Gateway, ResponseCache, ScriptedBackend, ScriptedRule
from .prompts import SeedKind
from .sandbox import GuestRunResult, ProcessRunner, RunLimits, ScriptedRunner, ToolCall
from .selfplay import TrainConfig

ENGINE_VERSION = "0.1.0"


@dataclass
class EngineConfig:
    tasks: list[TaskSpec]
    backends: list[dict]
    seeds: list[SeedKind]
    train: TrainConfig
    orchestrator_backend: str
    judge_backend: str
    strategy_kind: str = UNIFORM_RANDOM
    strategy_k: int = 8
    strategy_seed: int = 0
    aggregators: tuple[str, ...] = ("majority", "judge", "oracle")
    direct_qa_pool_size: int = 32
    sandbox: dict = field(default_factory=dict)
    dataset_root: str = "."
    cache_dir: Optional[str] = None
    run_dir: str = "runs/default"
    deterministic: bool = False
    raw: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path)

    def task(self, name: str) -> TaskSpec:
        for task in self.tasks:
            if task.name == name:
                return task
        raise ConfigError(f"no task named {name!r} in config")

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.raw, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()

    def strategy(self) -> SamplingStrategy:
        embedder = None
        if self.strategy_kind in (EMBEDDING_SIMILARITY, COMPLEXITY_CLUSTER):
            embedder = TrigramEmbedder()
        return SamplingStrategy(
            kind=self.strategy_kind, k=self.strategy_k, embedder=embedder, seed=self.strategy_seed
        )

    def limits(self) -> RunLimits:
        section = self.sandbox
        return RunLimits(
            wall_timeout=float(section.get("wall_timeout", 20.0)),
            max_tool_calls=int(section.get("max_tool_calls", 16)),
            max_output_bytes=int(section.get("max_output_bytes", 1 << 20)),
        )


def _set_dotted(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            node[key] = {}
        node = node[key]
    node[keys[-1]] = value


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key.path=value`` overrides; values parse as JSON when they can."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw_value = item.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        _set_dotted(doc, dotted, value)
    return doc


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> EngineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    apply_overrides(doc, overrides)
    return parse_config(doc, base_dir=path.parent)


def parse_config(doc: dict, base_dir: str | Path = ".") -> EngineConfig:
    base_dir = Path(base_dir)
    try:
        tasks = [
            TaskSpec(
                name=t["name"],
                metric_kind=t["metric_kind"],
                split_paths=dict(t.get("split_paths", {})),
                answer_var=t.get("answer_var", "ans"),
            )
            for t in doc.get("tasks", [])
        ]
        backends = list(doc.get("backends", []))
        seeds = [
            SeedKind(kind=s["kind"], tool_backend=s.get("tool_backend"))
            for s in doc.get("seeds", [])
        ]
        train_doc = doc.get("train", {})
        train = TrainConfig(
            steps=int(train_doc.get("steps", 3)),
            shots_schedule=tuple(train_doc.get("shots_schedule", [0, 4, 8])),
            n_samples=int(train_doc.get("n_samples", 4)),
            refinement_rounds=int(train_doc.get("refinement_rounds", 2)),
            rng_seed=int(train_doc.get("rng_seed", 0)),
            worker_parallelism=int(train_doc.get("worker_parallelism", 1)),
            temperature=float(train_doc.get("temperature", 0.0)),
            max_output=int(train_doc.get("max_output", 4096)),
        )
        inference_doc = doc.get("inference", {})
        config = EngineConfig(
            tasks=tasks,
            backends=backends,
            seeds=seeds,
            train=train,
            orchestrator_backend=doc.get("orchestrator_backend", ""),
            judge_backend=doc.get("judge_backend", doc.get("orchestrator_backend", "")),
            strategy_kind=inference_doc.get("strategy", UNIFORM_RANDOM),
            strategy_k=int(inference_doc.get("k", 8)),
            strategy_seed=int(inference_doc.get("strategy_seed", 0)),
            aggregators=tuple(inference_doc.get("aggregators", ["majority", "judge", "oracle"])),
            direct_qa_pool_size=int(inference_doc.get("direct_qa_pool_size", 32)),
            sandbox=dict(doc.get("sandbox", {})),
            dataset_root=doc.get("dataset_root", "."),
            cache_dir=doc.get("cache_dir"),
            run_dir=doc.get("run_dir", "runs/default"),
            deterministic=bool(doc.get("deterministic", False)),
            raw=doc,
            base_dir=base_dir,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    validate_config(config)
    return config


def validate_config(config: EngineConfig) -> None:
    backend_ids = {b.get("backend_id") for b in config.backends}
    if not config.tasks:
        raise ConfigError("config must define at least one task")
    if config.orchestrator_backend not in backend_ids:
        raise ConfigError(f"orchestrator backend {config.orchestrator_backend!r} is not a configured backend")
    if config.judge_backend and config.judge_backend not in backend_ids:
        raise ConfigError(f"judge backend {config.judge_backend!r} is not a configured backend")
    for seed in config.seeds:
        if not seed.uses_sandbox:
            raise ConfigError(
                f"seed {seed.tag} cannot be trained; the direct-QA pool is built "
                "from the training split at eval time"
            )
        if seed.tool_backend and seed.tool_backend not in backend_ids:
            raise ConfigError(f"seed {seed.tag}: tool backend {seed.tool_backend!r} is not a configured backend")
    for aggregator in config.aggregators:
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {aggregator!r}")
    runner_kind = config.sandbox.get("runner", "process")
    if runner_kind not in ("process", "scripted"):
        raise ConfigError(f"unknown sandbox runner {runner_kind!r}")
    if runner_kind == "process" and not config.sandbox.get("shim_path"):
        raise ConfigError("sandbox.runner=process requires sandbox.shim_path")
    if runner_kind == "scripted" and not config.sandbox.get("script_path"):
        raise ConfigError("sandbox.runner=scripted requires sandbox.script_path")


def _load_backend_script(path: Path) -> list[ScriptedRule]:
    doc = json.loads(path.read_text(encoding="utf-8"))
    rules = []
    for rule in doc.get("rules", []):
        match = rule.get("match", {})
        if not isinstance(match, (str, dict)):
            raise ConfigError(f"{path}: scripted rule match must be a string or object")
        rules.append(ScriptedRule(match=match, replies=list(rule.get("replies", []))))
    return rules


def build_gateway(config: EngineConfig) -> Gateway:
    cache = ResponseCache(config.base_dir / config.cache_dir) if config.cache_dir else None
    max_in_flight = config.raw.get("max_in_flight")
    gateway = Gateway(cache=cache, max_in_flight=int(max_in_flight) if max_in_flight else None)
    for doc in config.backends:
        kind = doc.get("kind", "http")
        backend_config = BackendConfig(
            backend_id=doc["backend_id"],
            endpoint=doc.get("endpoint", ""),
            auth_env=doc.get("auth_env", ""),
            rate_limit=float(doc.get("rate_limit", 10.0)),
            timeout=float(doc.get("timeout", 60.0)),
            max_attempts=int(doc.get("max_attempts", 3)),
            backoff=float(doc.get("backoff", 0.5)),
        )
        if kind == "scripted":
            script_path = config.base_dir / doc["script_path"]
            gateway.register(backend_config, ScriptedBackend(_load_backend_script(script_path)))
        elif kind == "http":
            if not backend_config.endpoint:
                raise ConfigError(f"backend {backend_config.backend_id!r}: http backends need an endpoint")
            gateway.register(backend_config)
        else:
            raise ConfigError(f"backend {backend_config.backend_id!r}: unknown kind {kind!r}")
    return gateway


def _load_runner_script(path: Path) -> ScriptedRunner:
    doc = json.loads(path.read_text(encoding="utf-8"))
    runner = ScriptedRunner()
    for rule in doc.get("rules", []):
        result_doc = rule.get("result", {})
        tool_calls = [
            ToolCall(method=c.get("method", "answer"), question=c.get("question"), reply=c.get("reply", ""))
            for c in result_doc.get("tool_calls", [])
        ]
        runner.script(
            rule["source"],
            GuestRunResult(
                status=result_doc.get("status", "error"),
                answer=result_doc.get("answer"),
                error_type=result_doc.get("error_type"),
                error_trace=result_doc.get("error_trace"),
                tool_calls=tool_calls,
            ),
        )
    return runner


def build_runner(config: EngineConfig):
    import sys

    section = config.sandbox
    if section.get("runner", "process") == "scripted":
        return _load_runner_script(config.base_dir / section["script_path"])
    shim_path = config.base_dir / section["shim_path"]
    if not shim_path.is_file():
        raise ConfigError(f"guest shim not found: {shim_path}")
    return ProcessRunner([sys.executable, str(shim_path)])

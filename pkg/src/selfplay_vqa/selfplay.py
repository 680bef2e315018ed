"""The self-play training loop: seed, execute, refine, filter, promote.

Each training step solves the task's training examples with the current
few-shot pool (zero-shot at step 0), keeps the runs whose answers match the
gold labels, and promotes them into the next pool. Pools are persisted as
JSONL plus a manifest so runs can be audited and reproduced byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import metrics, prompts
from .corpus import TaskSpec, VqaExample
from .errors import ConfigError, EngineError
from .modelgw import ORCHESTRATOR, Gateway, Sampling, image_tool, make_request
from .prompts import Exemplar, SeedKind
from .sandbox import GuestProgram, GuestRunResult, RunLimits, ToolHandle

logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"```(?:python)?\s*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3
    shots_schedule: tuple[int, ...] = (0, 4, 8)
    n_samples: int = 4
    refinement_rounds: int = 2
    rng_seed: int = 0
    worker_parallelism: int = 1
    temperature: float = 0.0
    max_output: int = 4096

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if len(self.shots_schedule) < self.steps:
            raise ConfigError("shots_schedule must cover every training step")
        if self.shots_schedule[0] != 0:
            raise ConfigError("step 0 is the zero-shot step; shots_schedule[0] must be 0")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.refinement_rounds < 0:
            raise ConfigError("refinement_rounds must be >= 0")
        if self.worker_parallelism < 1:
            raise ConfigError("worker_parallelism must be >= 1")


@dataclass
class FewShotPool:
    seed_kind: SeedKind
    step_index: int
    exemplars: list[Exemplar] = field(default_factory=list)
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.exemplars)

    def example_ids(self) -> set[str]:
        return {ex.example_id for ex in self.exemplars}


@dataclass
class StepStats:
    step_index: int
    metric_value: float
    code_pass_rate: float
    pool_size_before: int
    pool_size_after: int
    refinement_rescues: int
    shots: int
    n_examples: int

    @staticmethod
    def csv_header() -> list[str]:
        return [
            "step", "shots", "metric_pct", "cpr_pct",
            "pool_before", "pool_after", "rescues", "n",
        ]

    def csv_row(self) -> list[str]:
        return [
            str(self.step_index),
            str(self.shots),
            f"{100 * self.metric_value:.1f}",
            f"{100 * self.code_pass_rate:.1f}",
            str(self.pool_size_before),
            str(self.pool_size_after),
            str(self.refinement_rescues),
            str(self.n_examples),
        ]


def extract_code(reply: str) -> str:
    """Pull program source out of a model reply, tolerating markdown fences."""
    match = _FENCE_RE.search(reply)
    if match:
        return match.group(1).strip("\n")
    return reply.strip("\n")


def example_rng(rng_seed: int, step_index: int, example_id: str) -> random.Random:
    """Deterministic per-example RNG, stable across processes and platforms."""
    digest = hashlib.sha256(f"{rng_seed}:{step_index}:{example_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def draw_exemplars(pool: FewShotPool, k: int, rng: random.Random) -> list[Exemplar]:
    """k distinct exemplars drawn uniformly without replacement (all, if fewer)."""
    if k <= 0 or not pool.exemplars:
        return []
    items = list(pool.exemplars)
    if len(items) <= k:
        return items
    picked = []
    for i in range(k):
        j = rng.randrange(i, len(items))
        items[i], items[j] = items[j], items[i]
        picked.append(items[i])
    return picked


@dataclass
class SolveOutcome:
    result: GuestRunResult
    program: str
    rescued: bool


def solve_example(
    example: VqaExample,
    seed: SeedKind,
    pool_sample: list[Exemplar],
    config: TrainConfig,
    gateway: Gateway,
    runner,
    backend_id: str,
    task: TaskSpec,
    limits: RunLimits,
) -> SolveOutcome:
    """Generate candidate programs for one example, executing and refining.

    Candidates are tried in sample order; a failing candidate gets up to
    ``refinement_rounds`` refinement cycles before the next candidate is
    considered. Returns the first candidate whose final run is ok, else the
    last failing attempt.
    """
    if pool_sample:
        base_parts = prompts.render_few_shot(pool_sample, example)
    else:
        base_parts = prompts.render_zero_shot(seed, example)
    sampling = Sampling(
        temperature=config.temperature,
        n_samples=config.n_samples,
        max_output=config.max_output,
    )
    try:
        response = gateway.cached_generate(backend_id, make_request(base_parts, sampling, ORCHESTRATOR))
    except EngineError as exc:
        raise type(exc)(f"example {example.id}: {exc}") from exc

    tool: Optional[ToolHandle] = None
    if seed.kind == prompts.TOOL_API:
        tool = image_tool(gateway, seed.tool_backend, example.image_ref)

    last: Optional[SolveOutcome] = None
    for index, reply in enumerate(response.candidates):
        program_text = extract_code(reply)
        if not program_text:
            continue
        program = GuestProgram(
            source=program_text,
            answer_var=task.answer_var,
            example_id=example.id,
            seed_tag=seed.tag,
            attempt=index,
        )
        result = runner.run(program, example.image_ref, tool, limits)
        if result.ok:
            return SolveOutcome(result=result, program=program_text, rescued=False)
        last = SolveOutcome(result=result, program=program_text, rescued=False)

        current_program = program_text
        current_result = result
        for round_index in range(config.refinement_rounds):
            refinement_class = prompts.classify_error(current_result)
            refine_parts = base_parts + prompts.render_refinement(
                refinement_class,
                current_program,
                current_result.error_type or "",
                current_result.error_trace or "",
                task.answer_var,
            )
            refine_sampling = Sampling(temperature=config.temperature, n_samples=1, max_output=config.max_output)
            try:
                refine_response = gateway.cached_generate(
                    backend_id, make_request(refine_parts, refine_sampling, ORCHESTRATOR)
                )
            except EngineError as exc:
                raise type(exc)(f"example {example.id}: {exc}") from exc
            refined_text = extract_code(refine_response.candidates[0])
            if not refined_text:
                break
            refined_program = GuestProgram(
                source=refined_text,
                answer_var=task.answer_var,
                example_id=example.id,
                seed_tag=seed.tag,
                attempt=index,
            )
            refined_result = runner.run(refined_program, example.image_ref, tool, limits)
            if refined_result.ok:
                return SolveOutcome(result=refined_result, program=refined_text, rescued=True)
            current_program = refined_text
            current_result = refined_result
            last = SolveOutcome(result=refined_result, program=refined_text, rescued=False)
    if last is None:
        last = SolveOutcome(
            result=GuestRunResult(status="error", error_type="NoCandidates", error_trace="backend produced no usable programs"),
            program="",
            rescued=False,
        )
    return last


def run_training_step(
    task: TaskSpec,
    seed: SeedKind,
    prev_pool: Optional[FewShotPool],
    examples: Sequence[VqaExample],
    config: TrainConfig,
    step_index: int,
    gateway: Gateway,
    runner,
    backend_id: str,
    limits: RunLimits,
    provenance: str = "",
) -> tuple[FewShotPool, StepStats]:
    """Solve every example at this step's shot count and promote the matches."""
    if not examples:
        raise EngineError("run_training_step requires at least one example")
    shots = config.shots_schedule[step_index]
    if step_index >= 1 and (prev_pool is None or not prev_pool.exemplars):
        logger.warning(
            "task %s seed %s step %d: previous pool is empty; degenerating to zero-shot",
            task.name, seed.tag, step_index,
        )
        prev_pool = None

    def solve_one(example: VqaExample) -> SolveOutcome:
        sample: list[Exemplar] = []
        if shots > 0 and prev_pool is not None:
            rng = example_rng(config.rng_seed, step_index, example.id)
            sample = draw_exemplars(prev_pool, shots, rng)
        return solve_example(
            example, seed, sample, config, gateway, runner, backend_id, task, limits
        )

    if config.worker_parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.worker_parallelism) as pool:
            outcomes = list(pool.map(solve_one, examples))
    else:
        outcomes = [solve_one(example) for example in examples]

    new_pool = FewShotPool(seed_kind=seed, step_index=step_index, provenance=provenance)
    promoted_ids: set[str] = set()
    rescues = 0
    for example, outcome in zip(examples, outcomes):
        if outcome.rescued and outcome.result.ok:
            rescues += 1
        if not outcome.result.ok:
            continue
        answer = outcome.result.answer or ""
        if not metrics.answer_matches(answer, example.gold_answers, task.metric_kind):
            continue
        if example.id in promoted_ids:
            continue
        promoted_ids.add(example.id)
        new_pool.exemplars.append(
            Exemplar(
                example_id=example.id,
                image_ref=example.image_ref,
                question=example.question,
                program=outcome.program,
                answer=answer,
                seed_kind=seed,
                step_index=step_index,
            )
        )

    report = metrics.aggregate_report(
        [(example, outcome.result) for example, outcome in zip(examples, outcomes)],
        task.metric_kind,
        task=task.name,
        split="train",
    )
    stats = StepStats(
        step_index=step_index,
        metric_value=report.metric_value,
        code_pass_rate=report.code_pass_rate,
        pool_size_before=len(prev_pool) if prev_pool else 0,
        pool_size_after=len(new_pool),
        refinement_rescues=rescues,
        shots=shots if prev_pool is not None or step_index == 0 else 0,
        n_examples=len(examples),
    )
    return new_pool, stats


def run_training(
    task: TaskSpec,
    seeds: Sequence[SeedKind],
    examples: Sequence[VqaExample],
    config: TrainConfig,
    gateway: Gateway,
    runner,
    backend_id: str,
    limits: RunLimits,
    out_dir: str | Path | None = None,
    provenance: str = "",
) -> dict[str, list[tuple[FewShotPool, StepStats]]]:
    """Run all training steps for every seed, persisting pools when asked.

    Each step consumes the pool produced by the immediately previous step.
    """
    if not examples:
        raise EngineError("run_training requires a loaded training split")
    results: dict[str, list[tuple[FewShotPool, StepStats]]] = {}
    for seed in seeds:
        history: list[tuple[FewShotPool, StepStats]] = []
        prev_pool: Optional[FewShotPool] = None
        for step_index in range(config.steps):
            try:
                pool, stats = run_training_step(
                    task, seed, prev_pool, examples, config, step_index,
                    gateway, runner, backend_id, limits, provenance=provenance,
                )
            except EngineError as exc:
                raise type(exc)(f"seed {seed.tag} step {step_index}: {exc}") from exc
            history.append((pool, stats))
            prev_pool = pool
            logger.info(
                "task %s seed %s step %d: metric=%.3f cpr=%.3f pool=%d rescues=%d",
                task.name, seed.tag, step_index,
                stats.metric_value, stats.code_pass_rate,
                stats.pool_size_after, stats.refinement_rescues,
            )
            if out_dir is not None:
                save_pool(pool, pool_dir(out_dir, task.name, seed.tag, step_index), stats)
        results[seed.tag] = history
    return results


def pool_dir(base: str | Path, task_name: str, seed_tag: str, step_index: int) -> Path:
    return Path(base) / "pools" / task_name / seed_tag / f"step_{step_index}"


def save_pool(pool: FewShotPool, directory: str | Path, stats: Optional[StepStats] = None) -> None:
    """Persist exemplars as JSONL plus a manifest; bytes are deterministic."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / "exemplars.jsonl").open("w", encoding="utf-8") as fh:
        for ex in pool.exemplars:
            record = {
                "example_id": ex.example_id,
                "image": ex.image_ref,
                "question": ex.question,
                "program": ex.program,
                "answer": ex.answer,
                "seed": {"kind": ex.seed_kind.kind, "tool_backend": ex.seed_kind.tool_backend},
                "step": ex.step_index,
            }
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    manifest = {
        "seed": {"kind": pool.seed_kind.kind, "tool_backend": pool.seed_kind.tool_backend},
        "step_index": pool.step_index,
        "n_exemplars": len(pool.exemplars),
        "provenance": pool.provenance,
    }
    if stats is not None:
        manifest["stats"] = {
            "metric_value": stats.metric_value,
            "code_pass_rate": stats.code_pass_rate,
            "pool_size_before": stats.pool_size_before,
            "pool_size_after": stats.pool_size_after,
            "refinement_rescues": stats.refinement_rescues,
            "shots": stats.shots,
            "n_examples": stats.n_examples,
        }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def load_pool(directory: str | Path) -> FewShotPool:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    seed = SeedKind(kind=manifest["seed"]["kind"], tool_backend=manifest["seed"]["tool_backend"])
    pool = FewShotPool(seed_kind=seed, step_index=manifest["step_index"], provenance=manifest.get("provenance", ""))
    with (directory / "exemplars.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            ex_seed = SeedKind(kind=record["seed"]["kind"], tool_backend=record["seed"]["tool_backend"])
            pool.exemplars.append(
                Exemplar(
                    example_id=record["example_id"],
                    image_ref=record["image"],
                    question=record["question"],
                    program=record["program"],
                    answer=record["answer"],
                    seed_kind=ex_seed,
                    step_index=record["step"],
                )
            )
    return pool


def stats_to_csv(history: Sequence[tuple[FewShotPool, StepStats]]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(StepStats.csv_header())
    for _, stats in history:
        writer.writerow(stats.csv_row())
    return buf.getvalue()


def audit_pool(pool: FewShotPool, examples_by_id: dict[str, VqaExample], metric_kind: str) -> list[str]:
    """Re-score every exemplar against its gold label; return failing ids."""
    failures = []
    seen: set[str] = set()
    for ex in pool.exemplars:
        if ex.example_id in seen:
            failures.append(f"{ex.example_id}: duplicate exemplar in pool")
            continue
        seen.add(ex.example_id)
        example = examples_by_id.get(ex.example_id)
        if example is None:
            failures.append(f"{ex.example_id}: no such example in split")
            continue
        if not metrics.answer_matches(ex.answer, example.gold_answers, metric_kind):
            failures.append(f"{ex.example_id}: stored answer {ex.answer!r} no longer matches gold")
    return failures


def audit_run_dir(run_dir: str | Path, task: TaskSpec, examples: Sequence[VqaExample]) -> list[str]:
    """Promotion-soundness audit over every persisted pool in a run directory."""
    examples_by_id = {example.id: example for example in examples}
    failures = []
    pools_root = Path(run_dir) / "pools" / task.name
    if not pools_root.is_dir():
        return [f"no pools directory for task {task.name}"]
    for manifest_path in sorted(pools_root.glob("*/step_*/manifest.json")):
        pool = load_pool(manifest_path.parent)
        for failure in audit_pool(pool, examples_by_id, task.metric_kind):
            failures.append(f"{manifest_path.parent}: {failure}")
    return failures

"""Inference over few-shot pools and aggregation of their answers.

Each configured pool answers every evaluation example independently; the
per-pool candidates are then combined by majority vote, by a judge model
choosing among them, or by an oracle upper bound that picks a correct
candidate whenever one exists.
"""

from __future__ import annotations

import io
import json
import logging
import math
import random
import re
import tokenize
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

from . import metrics, prompts
from .corpus import TaskSpec, VqaExample
from .errors import ConfigError, EngineError
from .metrics import MetricReport
from .modelgw import JUDGE, ORCHESTRATOR, Gateway, Sampling, image_tool, make_request
from .prompts import DIRECT_QA, Exemplar, SeedKind
from .sandbox import GuestProgram, GuestRunResult, RunLimits
from .selfplay import FewShotPool, example_rng, extract_code

logger = logging.getLogger(__name__)

UNIFORM_RANDOM = "uniform_random"
EMBEDDING_SIMILARITY = "embedding_similarity"
COMPLEXITY_CLUSTER = "complexity_cluster"

MAJORITY = "majority"
JUDGE_METHOD = "judge"
ORACLE = "oracle"

AGGREGATORS = (MAJORITY, JUDGE_METHOD, ORACLE)

_FINAL_CHOICE_RE = re.compile(r"final\s+choice\s*:\s*answer\s+(\d+)\s*:", re.IGNORECASE)
_CONTROL_KEYWORDS = frozenset(
    ["if", "elif", "else", "for", "while", "try", "except", "finally", "with", "lambda"]
)


class TrigramEmbedder:
    """Character 3-gram term-frequency embedding over text; the default
    stand-in for an image-text embedding model."""

    def embed(self, text: str) -> dict[str, float]:
        s = f"  {text.strip().lower()}  "
        counts: Counter[str] = Counter(s[i : i + 3] for i in range(len(s) - 2))
        total = sum(counts.values()) or 1
        return {gram: count / total for gram, count in counts.items()}


def cosine(u: dict[str, float], v: dict[str, float]) -> float:
    if not u or not v:
        return 0.0
    if len(v) < len(u):
        u, v = v, u
    dot = sum(weight * v.get(gram, 0.0) for gram, weight in u.items())
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return dot / (nu * nv)


@dataclass(frozen=True)
class SamplingStrategy:
    kind: str = UNIFORM_RANDOM
    k: int = 8
    embedder: object | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (UNIFORM_RANDOM, EMBEDDING_SIMILARITY, COMPLEXITY_CLUSTER):
            raise ConfigError(f"unknown sampling strategy {self.kind!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.kind in (EMBEDDING_SIMILARITY, COMPLEXITY_CLUSTER) and self.embedder is None:
            raise ConfigError(f"{self.kind} requires an embedder")


@dataclass
class CandidateAnswer:
    pool_id: int
    pool_tag: str
    answer: Optional[str]
    run: Optional[GuestRunResult] = None

    @property
    def present(self) -> bool:
        return self.answer is not None


@dataclass
class AggregateDecision:
    final_answer: str
    method: str
    chosen_pool_id: int
    rationale: Optional[str] = None
    is_upper_bound: bool = False
    fallback_cause: Optional[str] = None
    no_correct_present: bool = False


def code_complexity(program: str) -> int:
    """Lexical complexity: control-flow keywords plus call sites, with
    comments and strings stripped."""
    keywords = 0
    calls = 0
    try:
        tokens = list(tokenize.generate_tokens(io.StringIO(program).readline))
    except (tokenize.TokenError, IndentationError, SyntaxError):
        return _complexity_fallback(program)
    # Two-token lookback: "NAME (" is a call unless the name is a keyword or
    # the name being declared by a def/class; ") (" and "] (" are calls too.
    prev = ("", "")
    before_prev = ("", "")
    for tok in tokens:
        if tok.type in (tokenize.COMMENT, tokenize.STRING, tokenize.NL, tokenize.NEWLINE, tokenize.INDENT, tokenize.DEDENT):
            continue
        if tok.type == tokenize.NAME and tok.string in _CONTROL_KEYWORDS:
            keywords += 1
        if tok.type == tokenize.OP and tok.string == "(":
            kind, name = prev
            if kind == "NAME" and name not in _CONTROL_KEYWORDS and name not in ("def", "class") and before_prev[1] not in ("def", "class"):
                calls += 1
            elif kind == "OP" and name in (")", "]"):
                calls += 1
        if tok.type == tokenize.NAME:
            current = ("NAME", tok.string)
        elif tok.type == tokenize.OP:
            current = ("OP", tok.string)
        else:
            current = ("OTHER", tok.string)
        before_prev = prev
        prev = current
    return keywords + calls


def _complexity_fallback(program: str) -> int:
    text = re.sub(r"(?s)(\"\"\".*?\"\"\"|'''.*?'''|\"[^\"\n]*\"|'[^'\n]*')", "", program)
    text = re.sub(r"#[^\n]*", "", text)
    keywords = sum(len(re.findall(rf"\b{kw}\b", text)) for kw in _CONTROL_KEYWORDS)
    calls = len(re.findall(r"[\w\)\]]\s*\(", text))
    return keywords + calls


def sample_exemplars(pool: FewShotPool, example: VqaExample, strategy: SamplingStrategy) -> list[Exemplar]:
    """Pick the exemplars to show for one example, per the configured strategy.

    Pools smaller than k are returned whole.
    """
    if not pool.exemplars:
        raise EngineError("cannot sample from an empty pool")
    exemplars = list(pool.exemplars)
    k = strategy.k
    if len(exemplars) <= k:
        return exemplars

    if strategy.kind == UNIFORM_RANDOM:
        rng = example_rng(strategy.seed, -1, example.id)
        picked = []
        items = exemplars
        for i in range(k):
            j = rng.randrange(i, len(items))
            items[i], items[j] = items[j], items[i]
            picked.append(items[i])
        return picked

    embedder = strategy.embedder
    target = embedder.embed(example.question)

    if strategy.kind == EMBEDDING_SIMILARITY:
        scored = [
            (-cosine(target, embedder.embed(ex.question)), index, ex)
            for index, ex in enumerate(exemplars)
        ]
        scored.sort(key=lambda item: (item[0], item[1]))
        return [ex for _, _, ex in scored[:k]]

    # complexity_cluster: tertile buckets by program complexity, then pick the
    # bucket whose centroid question embedding is nearest the example.
    ranked = sorted(exemplars, key=lambda ex: (code_complexity(ex.program), ex.example_id))
    n = len(ranked)
    cut1, cut2 = max(1, n // 3), max(2, 2 * n // 3)
    buckets = [ranked[:cut1], ranked[cut1:cut2], ranked[cut2:]]
    buckets = [bucket for bucket in buckets if bucket]
    best_bucket = buckets[0]
    best_sim = -2.0
    for bucket in buckets:
        centroid: Counter[str] = Counter()
        for ex in bucket:
            for gram, weight in embedder.embed(ex.question).items():
                centroid[gram] += weight / len(bucket)
        sim = cosine(target, dict(centroid))
        if sim > best_sim:
            best_sim = sim
            best_bucket = bucket
    if len(best_bucket) <= k:
        return list(best_bucket)
    rng = example_rng(strategy.seed, -2, example.id)
    items = list(best_bucket)
    picked = []
    for i in range(k):
        j = rng.randrange(i, len(items))
        items[i], items[j] = items[j], items[i]
        picked.append(items[i])
    return picked


def infer_one(
    example: VqaExample,
    pool: FewShotPool,
    strategy: SamplingStrategy,
    gateway: Gateway,
    runner,
    backend_id: str,
    task: TaskSpec,
    limits: RunLimits,
    pool_id: int,
) -> CandidateAnswer:
    """One pool's answer for one example; failures land in the candidate."""
    seed = pool.seed_kind
    sample = sample_exemplars(pool, example, strategy) if pool.exemplars else []
    parts = prompts.render_few_shot(sample, example) if sample else prompts.render_zero_shot(seed, example)
    sampling = Sampling(temperature=0.0, n_samples=1)
    try:
        response = gateway.cached_generate(backend_id, make_request(parts, sampling, ORCHESTRATOR))
    except EngineError as exc:
        logger.warning("pool %s example %s: gateway failure: %s", pool.seed_kind.tag, example.id, exc)
        return CandidateAnswer(
            pool_id=pool_id,
            pool_tag=seed.tag,
            answer=None,
            run=GuestRunResult(status="error", error_type="GatewayError", error_trace=str(exc)),
        )
    reply = response.candidates[0]

    if seed.kind == DIRECT_QA:
        answer = reply.strip()
        return CandidateAnswer(pool_id=pool_id, pool_tag=seed.tag, answer=answer or None, run=None)

    program_text = extract_code(reply)
    if not program_text:
        return CandidateAnswer(
            pool_id=pool_id, pool_tag=seed.tag, answer=None,
            run=GuestRunResult(status="error", error_type="NoCandidates", error_trace="empty model reply"),
        )
    tool = None
    if seed.kind == prompts.TOOL_API:
        tool = image_tool(gateway, seed.tool_backend, example.image_ref)
    program = GuestProgram(
        source=program_text, answer_var=task.answer_var, example_id=example.id, seed_tag=seed.tag
    )
    result = runner.run(program, example.image_ref, tool, limits)
    return CandidateAnswer(
        pool_id=pool_id,
        pool_tag=seed.tag,
        answer=result.answer if result.ok else None,
        run=result,
    )


def canonical_answer(text: str) -> str:
    """Normalization used when counting votes: trim, lowercase, and collapse
    numerically equal strings ("100" == "100.0")."""
    value = metrics.parse_numeric(text)
    if value is not None:
        if value == int(value):
            return str(int(value))
        return repr(value)
    return text.strip().lower()


def majority_vote(candidates: Sequence[CandidateAnswer]) -> AggregateDecision:
    """Plurality over normalized answers; ties break toward the lowest pool id."""
    present = [c for c in candidates if c.present]
    if not present:
        raise EngineError("majority_vote requires at least one present answer")
    tally: Counter[str] = Counter(canonical_answer(c.answer) for c in present)
    best_count = max(tally.values())
    winners = {answer for answer, count in tally.items() if count == best_count}
    for candidate in sorted(present, key=lambda c: c.pool_id):
        if canonical_answer(candidate.answer) in winners:
            return AggregateDecision(
                final_answer=candidate.answer,
                method=MAJORITY,
                chosen_pool_id=candidate.pool_id,
            )
    raise AssertionError("unreachable: some present candidate must hold the winning answer")


def judge_select(
    example: VqaExample,
    candidates: Sequence[CandidateAnswer],
    gateway: Gateway,
    judge_backend: str,
) -> AggregateDecision:
    """Ask the judge backend to choose; fall back to majority when unusable.

    The reply is scanned for "Final Choice: Answer N: X" (last occurrence
    wins, case-insensitive). Out-of-range choices, unparsable replies, and
    backend failures all fall back to the majority vote, with the cause
    recorded on the decision.
    """
    present = [c for c in candidates if c.present]
    if not present:
        raise EngineError("judge_select requires at least one present answer")
    answers = [c.answer for c in present]
    parts = prompts.render_judge(example, answers)
    try:
        response = gateway.cached_generate(judge_backend, make_request(parts, Sampling(), JUDGE))
    except EngineError as exc:
        decision = majority_vote(candidates)
        decision.method = JUDGE_METHOD
        decision.fallback_cause = f"judge backend failed: {exc}"
        return decision
    reply = response.candidates[0]
    matches = _FINAL_CHOICE_RE.findall(reply)
    if matches:
        index = int(matches[-1])
        if 1 <= index <= len(present):
            chosen = present[index - 1]
            return AggregateDecision(
                final_answer=chosen.answer,
                method=JUDGE_METHOD,
                chosen_pool_id=chosen.pool_id,
                rationale=reply,
            )
        cause = f"choice {index} out of range 1..{len(present)}"
    else:
        cause = "no Final Choice pattern in judge reply"
    decision = majority_vote(candidates)
    decision.method = JUDGE_METHOD
    decision.rationale = reply
    decision.fallback_cause = cause
    return decision


def oracle_select(
    candidates: Sequence[CandidateAnswer],
    gold_answers: Sequence[str],
    metric_kind: str,
) -> AggregateDecision:
    """Upper-bound selector: the first correct candidate, else the first present."""
    present = [c for c in candidates if c.present]
    if not present:
        raise EngineError("oracle_select requires at least one present answer")
    for candidate in present:
        if metrics.answer_matches(candidate.answer, gold_answers, metric_kind):
            return AggregateDecision(
                final_answer=candidate.answer,
                method=ORACLE,
                chosen_pool_id=candidate.pool_id,
                is_upper_bound=True,
            )
    first = present[0]
    return AggregateDecision(
        final_answer=first.answer,
        method=ORACLE,
        chosen_pool_id=first.pool_id,
        is_upper_bound=True,
        no_correct_present=True,
    )


@dataclass
class MixedEvalReport:
    per_pool: list[MetricReport]
    aggregated: dict[str, MetricReport]
    deltas: dict[str, float]
    best_single_tag: str
    tie_count: int = 0
    per_example_path: Optional[str] = None

    def summary_csv(self) -> str:
        import csv as _csv

        buf = io.StringIO()
        writer = _csv.writer(buf, lineterminator="\n")
        writer.writerow(["row_kind", "name", "metric_pct", "cpr_pct", "delta_pct", "n"])
        for report in self.per_pool:
            writer.writerow(
                ["pool", report.task, f"{100 * report.metric_value:.1f}",
                 f"{100 * report.code_pass_rate:.1f}", "", str(report.n_examples)]
            )
        for method, report in self.aggregated.items():
            writer.writerow(
                ["aggregate", method, f"{100 * report.metric_value:.1f}",
                 f"{100 * report.code_pass_rate:.1f}", f"{100 * self.deltas[method]:+.1f}",
                 str(report.n_examples)]
            )
        return buf.getvalue()

    def summary_markdown(self) -> str:
        lines = [
            "| kind | name | metric% | CPR% | delta% |",
            "|---|---|---|---|---|",
        ]
        for report in self.per_pool:
            lines.append(
                f"| pool | {report.task} | {100 * report.metric_value:.1f} "
                f"| {100 * report.code_pass_rate:.1f} | |"
            )
        for method, report in self.aggregated.items():
            lines.append(
                f"| aggregate | {method} | {100 * report.metric_value:.1f} "
                f"| {100 * report.code_pass_rate:.1f} | {100 * self.deltas[method]:+.1f} |"
            )
        return "\n".join(lines)


def evaluate_mixed(
    task: TaskSpec,
    pools: Sequence[FewShotPool],
    examples: Sequence[VqaExample],
    strategy: SamplingStrategy,
    aggregators: Sequence[str],
    gateway: Gateway,
    runner,
    backend_id: str,
    judge_backend: str,
    limits: RunLimits,
    per_example_out: Optional[str] = None,
) -> MixedEvalReport:
    """Run every pool on every example, aggregate, and score everything.

    Also reports per-pool single-run metrics so the aggregated improvement
    over the best single pool (delta%) is computed the way the summary
    tables expect.
    """
    if not pools:
        raise ConfigError("evaluate_mixed requires at least one pool")
    for aggregator in aggregators:
        if aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {aggregator!r}")
    if ORACLE in aggregators and any(not example.labeled for example in examples):
        raise ConfigError("oracle aggregation requires gold labels on the split")
    if not examples:
        raise EngineError("evaluate_mixed requires at least one example")

    all_candidates: list[list[CandidateAnswer]] = []
    for example in examples:
        row = [
            infer_one(example, pool, strategy, gateway, runner, backend_id, task, limits, pool_id)
            for pool_id, pool in enumerate(pools)
        ]
        all_candidates.append(row)

    per_pool_reports = []
    pool_values = []
    for pool_id, pool in enumerate(pools):
        outcomes = []
        for example, row in zip(examples, all_candidates):
            candidate = row[pool_id]
            outcome = candidate.run if candidate.run is not None else (candidate.answer or "")
            outcomes.append((example, outcome))
        report = metrics.aggregate_report(outcomes, task.metric_kind, task=pool.seed_kind.tag, split=examples[0].split)
        per_pool_reports.append(report)
        pool_values.append(report.metric_value)
    best_single = max(pool_values)
    best_single_tag = per_pool_reports[pool_values.index(best_single)].task

    tie_count = 0
    decisions: dict[str, list[Optional[AggregateDecision]]] = {m: [] for m in aggregators}
    for example, row in zip(examples, all_candidates):
        present = [c for c in row if c.present]
        if present:
            tally = Counter(canonical_answer(c.answer) for c in present)
            top = max(tally.values())
            if sum(1 for count in tally.values() if count == top) > 1:
                tie_count += 1
        for method in aggregators:
            if not present:
                decisions[method].append(None)
                continue
            if method == MAJORITY:
                decisions[method].append(majority_vote(row))
            elif method == JUDGE_METHOD:
                decisions[method].append(judge_select(example, row, gateway, judge_backend))
            else:
                decisions[method].append(oracle_select(row, example.gold_answers, task.metric_kind))

    aggregated = {}
    deltas = {}
    for method in aggregators:
        outcomes = []
        for example, decision in zip(examples, decisions[method]):
            outcomes.append((example, decision.final_answer if decision is not None else GuestRunResult(status="error", error_type="NoAnswer")))
        report = metrics.aggregate_report(outcomes, task.metric_kind, task=method, split=examples[0].split)
        aggregated[method] = report
        deltas[method] = (report.metric_value - best_single) / best_single if best_single > 0 else 0.0

    per_example_path = None
    if per_example_out:
        per_example_path = per_example_out
        with open(per_example_out, "w", encoding="utf-8") as fh:
            for index, (example, row) in enumerate(zip(examples, all_candidates)):
                record = {
                    "id": example.id,
                    "question": example.question,
                    "gold": list(example.gold_answers),
                    "candidates": [
                        {
                            "pool": c.pool_tag,
                            "answer": c.answer,
                            "status": c.run.status if c.run else "ok",
                        }
                        for c in row
                    ],
                    "decisions": {
                        method: (
                            {
                                "answer": decision.final_answer,
                                "pool_id": decision.chosen_pool_id,
                                "fallback": decision.fallback_cause,
                            }
                            if decision is not None
                            else None
                        )
                        for method, decision in ((m, decisions[m][index]) for m in aggregators)
                    },
                }
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")

    return MixedEvalReport(
        per_pool=per_pool_reports,
        aggregated=aggregated,
        deltas=deltas,
        best_single_tag=best_single_tag,
        tie_count=tie_count,
        per_example_path=per_example_path,
    )


def build_direct_qa_pool(examples: Sequence[VqaExample], n: int, seed: int) -> FewShotPool:
    """The standard few-shot pool: labeled training examples, no programs."""
    rng = random.Random(seed)
    labeled = [example for example in examples if example.labeled]
    items = list(labeled)
    k = min(n, len(items))
    for i in range(k):
        j = rng.randrange(i, len(items))
        items[i], items[j] = items[j], items[i]
    direct = SeedKind(kind=DIRECT_QA)
    pool = FewShotPool(seed_kind=direct, step_index=0)
    for example in items[:k]:
        pool.exemplars.append(
            Exemplar(
                example_id=example.id,
                image_ref=example.image_ref,
                question=example.question,
                program="",
                answer=example.gold_answers[0],
                seed_kind=direct,
                step_index=0,
            )
        )
    return pool

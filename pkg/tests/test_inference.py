import random

import pytest

from selfplay_vqa.corpus import VqaExample
from selfplay_vqa.errors import ConfigError, EngineError
from selfplay_vqa.inference import (
    COMPLEXITY_CLUSTER,
    EMBEDDING_SIMILARITY,
    JUDGE_METHOD,
    MAJORITY,
    ORACLE,
    UNIFORM_RANDOM,
    AggregateDecision,
    CandidateAnswer,
    SamplingStrategy,
    TrigramEmbedder,
    build_direct_qa_pool,
    canonical_answer,
    code_complexity,
    cosine,
    evaluate_mixed,
    infer_one,
    judge_select,
    majority_vote,
    oracle_select,
    sample_exemplars,
)
from selfplay_vqa.modelgw import ScriptedBackend
from selfplay_vqa.prompts import DIRECT_QA, POT, Exemplar, SeedKind
from selfplay_vqa.sandbox import OK, GuestRunResult, scripted_runner
from selfplay_vqa.selfplay import FewShotPool

from conftest import FIXTURES, make_examples, make_gateway

POT_SEED = SeedKind(kind=POT)


def make_pool(n, seed=POT_SEED, program_of=lambda i: f"prog_{i}"):
    pool = FewShotPool(seed_kind=seed, step_index=0)
    for i in range(n):
        pool.exemplars.append(Exemplar(
            example_id=f"x{i:02d}", image_ref=f"/img/x{i}.png", question=f"pool question {i}?",
            program=program_of(i) if seed.kind != DIRECT_QA else "",
            answer=str(i), seed_kind=seed, step_index=0))
    return pool


def cand(pool_id, answer, status=OK):
    run = None
    if answer is None:
        run = GuestRunResult(status="error", error_type="E")
    else:
        run = GuestRunResult(status=status, answer=answer)
    return CandidateAnswer(pool_id=pool_id, pool_tag=f"p{pool_id}", answer=answer, run=run)


class ExactMatchEmbedder:
    """Degenerate embedder: identical text -> identical one-hot vector."""

    def embed(self, text):
        return {text: 1.0}


class TestComplexity:
    def test_straight_line_counts_only_calls(self):
        assert code_complexity("a = 1\nb = 2\nc = a + b") == 0
        assert code_complexity("a = max(1, 2)\nb = min(3, 4)") == 2

    def test_control_flow_strictly_increases(self):
        body = "x = i"
        wrapped = "for i in range(3):\n    if i > 1:\n        x = i"
        assert code_complexity(wrapped) > code_complexity(body)

    def test_refined_chart_program_golden(self):
        src = (FIXTURES / "guest_programs" / "pie_third_largest_refined.py").read_text()
        assert code_complexity(src) == 3

    def test_comments_and_strings_stripped(self):
        assert code_complexity("# if for while f(x)\ns = 'call() if'\nans = s") == 0

    def test_fallback_on_syntax_error(self):
        assert code_complexity("if x:\n  broken(\nfor y") >= 2


class TestSampleExemplars:
    def test_small_pool_returned_whole(self):
        pool = make_pool(3)
        example = make_examples(1)[0]
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=8)
        assert len(sample_exemplars(pool, example, strategy)) == 3

    def test_uniform_deterministic(self):
        pool = make_pool(20)
        example = make_examples(1)[0]
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=4, seed=5)
        a = [e.example_id for e in sample_exemplars(pool, example, strategy)]
        b = [e.example_id for e in sample_exemplars(pool, example, strategy)]
        assert a == b and len(a) == 4

    def test_embedding_exact_match_ranks_first(self):
        pool = make_pool(10)
        target_q = pool.exemplars[7].question
        example = VqaExample(id="t", image_ref="/img/t.png", question=target_q,
                             gold_answers=("x",), split="validation")
        strategy = SamplingStrategy(kind=EMBEDDING_SIMILARITY, k=3, embedder=ExactMatchEmbedder())
        picked = sample_exemplars(pool, example, strategy)
        assert picked[0].question == target_q

    def test_complexity_cluster_prefers_similar_bucket(self):
        # low-complexity programs get questions about dogs, high about cats
        pool = FewShotPool(seed_kind=POT_SEED, step_index=0)
        for i in range(6):
            pool.exemplars.append(Exemplar(
                example_id=f"lo{i}", image_ref="i.png", question=f"how many dogs {i}?",
                program="a = 1", answer="1", seed_kind=POT_SEED, step_index=0))
        for i in range(6):
            program = "for i in range(3):\n    if i:\n        b = f(i)\nans = b"
            pool.exemplars.append(Exemplar(
                example_id=f"hi{i}", image_ref="i.png", question=f"how many cats {i}?",
                program=program, answer="2", seed_kind=POT_SEED, step_index=0))
        example = VqaExample(id="t", image_ref="i.png", question="how many cats 9?",
                             gold_answers=("2",), split="validation")
        strategy = SamplingStrategy(kind=COMPLEXITY_CLUSTER, k=4, embedder=TrigramEmbedder(), seed=1)
        picked = sample_exemplars(pool, example, strategy)
        assert picked
        assert all(e.example_id.startswith("hi") for e in picked)

    def test_small_pool_rule_applies_to_every_strategy(self):
        pool = make_pool(3)
        example = make_examples(1)[0]
        for kind in (UNIFORM_RANDOM, EMBEDDING_SIMILARITY, COMPLEXITY_CLUSTER):
            strategy = SamplingStrategy(kind=kind, k=8, embedder=TrigramEmbedder(), seed=0)
            picked = sample_exemplars(pool, example, strategy)
            assert {e.example_id for e in picked} == {e.example_id for e in pool.exemplars}, kind

    def test_empty_pool_rejected(self):
        example = make_examples(1)[0]
        with pytest.raises(EngineError):
            sample_exemplars(FewShotPool(seed_kind=POT_SEED, step_index=0), example,
                             SamplingStrategy(kind=UNIFORM_RANDOM, k=2))

    def test_strategy_validation(self):
        with pytest.raises(ConfigError):
            SamplingStrategy(kind=EMBEDDING_SIMILARITY, k=2)
        with pytest.raises(ConfigError):
            SamplingStrategy(kind=UNIFORM_RANDOM, k=0)

    def test_cosine_basics(self):
        e = TrigramEmbedder()
        assert cosine(e.embed("hello world"), e.embed("hello world")) == pytest.approx(1.0)
        assert cosine(e.embed("abc"), e.embed("xyz qrs")) < 0.5


class TestMajority:
    def test_plurality(self):
        decision = majority_vote([cand(0, "A"), cand(1, "B"), cand(2, "A"), cand(3, "C")])
        assert decision.final_answer == "A"
        assert decision.method == MAJORITY

    def test_tie_breaks_by_pool_order(self):
        decision = majority_vote([cand(0, "A"), cand(1, "B")])
        assert decision.final_answer == "A"
        assert decision.chosen_pool_id == 0

    def test_numeric_canonicalization_merges(self):
        decision = majority_vote([cand(0, "100"), cand(1, "100.0"), cand(2, "7")])
        assert decision.final_answer == "100"

    def test_absent_answers_excluded(self):
        decision = majority_vote([cand(0, None), cand(1, "B"), cand(2, None)])
        assert decision.final_answer == "B"

    def test_no_present_answers_rejected(self):
        with pytest.raises(EngineError):
            majority_vote([cand(0, None)])

    def test_single_candidate_returned(self):
        decision = majority_vote([cand(2, "only")])
        assert decision.final_answer == "only" and decision.chosen_pool_id == 2

    def test_selective(self):
        candidates = [cand(i, a) for i, a in enumerate(["x", "y", "x", "z"])]
        decision = majority_vote(candidates)
        assert decision.final_answer in {c.answer for c in candidates}

    def test_canonical_idempotent(self):
        for text in ["100", "100.0", " Foo ", "34%", "$1,2 foo"]:
            assert canonical_answer(canonical_answer(text)) == canonical_answer(text)


def judge_gateway(reply):
    backend = ScriptedBackend()
    backend.add({"role": "judge"}, [reply])
    return make_gateway(backend, backend_id="judgeb")


class TestJudge:
    def test_scripted_choice(self):
        example = make_examples(1)[0]
        gateway = judge_gateway("thinking...\nFinal Choice: Answer 2: B")
        decision = judge_select(example, [cand(0, "A"), cand(1, "B")], gateway, "judgeb")
        assert decision.final_answer == "B"
        assert decision.chosen_pool_id == 1
        assert decision.fallback_cause is None

    def test_last_occurrence_wins(self):
        example = make_examples(1)[0]
        gateway = judge_gateway("Final Choice: Answer 1: A\nrevised\nFinal Choice: Answer 2: B")
        decision = judge_select(example, [cand(0, "A"), cand(1, "B")], gateway, "judgeb")
        assert decision.final_answer == "B"

    def test_free_text_falls_back_to_majority(self):
        example = make_examples(1)[0]
        gateway = judge_gateway("I like option two the most")
        decision = judge_select(example, [cand(0, "A"), cand(1, "B"), cand(2, "A")], gateway, "judgeb")
        assert decision.final_answer == "A"
        assert decision.method == JUDGE_METHOD
        assert decision.fallback_cause is not None

    def test_out_of_range_falls_back(self):
        example = make_examples(1)[0]
        gateway = judge_gateway("Final Choice: Answer 9: Z")
        decision = judge_select(example, [cand(0, "A"), cand(1, "B"), cand(2, "A"), cand(3, "C")], gateway, "judgeb")
        assert decision.final_answer == "A"
        assert "out of range" in decision.fallback_cause

    def test_backend_failure_falls_back(self):
        example = make_examples(1)[0]
        backend = ScriptedBackend()  # no rules: every request misses
        gateway = make_gateway(backend, backend_id="judgeb")
        decision = judge_select(example, [cand(0, "A"), cand(1, "A"), cand(2, "B")], gateway, "judgeb")
        assert decision.final_answer == "A"
        assert "failed" in decision.fallback_cause

    def test_numbering_skips_absent_candidates(self):
        example = make_examples(1)[0]
        gateway = judge_gateway("Final Choice: Answer 1: B")
        decision = judge_select(example, [cand(0, None), cand(1, "B")], gateway, "judgeb")
        assert decision.final_answer == "B"
        assert decision.chosen_pool_id == 1


class TestOracle:
    def test_picks_gold_candidate(self):
        decision = oracle_select([cand(0, "X"), cand(1, "gold"), cand(2, "Y")], ["gold"], "relaxed_accuracy")
        assert decision.final_answer == "gold"
        assert decision.chosen_pool_id == 1
        assert decision.is_upper_bound

    def test_no_match_flags(self):
        decision = oracle_select([cand(0, "X"), cand(1, "Y")], ["gold"], "relaxed_accuracy")
        assert decision.final_answer == "X"
        assert decision.no_correct_present

    def test_anls_threshold_match(self):
        decision = oracle_select([cand(0, "helo"), cand(1, "zzz")], ["hello"], "anls")
        assert decision.final_answer == "helo"
        assert not decision.no_correct_present

    def test_dominance_randomized(self):
        rng = random.Random(42)
        for _ in range(200):
            gold = str(rng.randint(0, 5))
            candidates = []
            for pool_id in range(4):
                roll = rng.random()
                if roll < 0.25:
                    candidates.append(cand(pool_id, None))
                elif roll < 0.6:
                    candidates.append(cand(pool_id, str(rng.randint(0, 5))))
                else:
                    candidates.append(cand(pool_id, gold))
            if not any(c.present for c in candidates):
                continue
            decision = oracle_select(candidates, [gold], "relaxed_accuracy")
            oracle_correct = decision.final_answer == gold
            any_pool_correct = any(c.present and c.answer == gold for c in candidates)
            assert oracle_correct == any_pool_correct


def mixed_world(task, examples, pool_answers):
    """Scripted world with one pool per answer function."""
    pools = []
    backend = ScriptedBackend()
    runner = scripted_runner()
    for pool_index, answer_of in enumerate(pool_answers):
        seed = POT_SEED
        pool = FewShotPool(seed_kind=seed, step_index=0)
        pool.exemplars.append(Exemplar(
            example_id=f"seed{pool_index}", image_ref=f"/img/seed{pool_index}.png",
            question=f"seed question {pool_index}?", program=f"seed_prog_{pool_index}",
            answer="0", seed_kind=seed, step_index=0))
        pools.append(pool)
        for example in examples:
            answer = answer_of(example)
            marker = f"P{pool_index}_{example.id}"
            if answer is None:
                runner.script(marker, GuestRunResult(status="error", error_type="E"))
            else:
                runner.script(marker, GuestRunResult(status=OK, answer=answer))
            backend.add(
                {"question_contains": example.question, "text_contains": f"seed_prog_{pool_index}"},
                [marker],
            )
    gateway = make_gateway(backend)
    return pools, gateway, runner


class TestEvaluateMixed:
    def test_oracle_beats_best_single_with_disjoint_errors(self, task_ra, limits):
        examples = make_examples(10, split="validation")
        # pool A correct on 0-4, pool B correct on 5-9: each 50%, oracle 100%
        pool_answers = [
            lambda e: e.gold_answers[0] if int(e.id[1:]) < 5 else "wrong",
            lambda e: e.gold_answers[0] if int(e.id[1:]) >= 5 else "miss",
        ]
        pools, gateway, runner = mixed_world(task_ra, examples, pool_answers)
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=1, seed=0)
        report = evaluate_mixed(task_ra, pools, examples, strategy, [MAJORITY, ORACLE],
                                gateway, runner, "orch", "orch", limits)
        per_pool = [r.metric_value for r in report.per_pool]
        assert max(per_pool) == pytest.approx(0.5)
        assert report.aggregated[ORACLE].metric_value == pytest.approx(1.0)
        assert report.aggregated[ORACLE].metric_value >= max(per_pool)
        assert report.deltas[ORACLE] == pytest.approx(1.0)  # (1.0 - 0.5) / 0.5

    def test_unanimous_majority_equals_pool_metric(self, task_ra, limits):
        examples = make_examples(6, split="validation")
        answer_fn = lambda e: e.gold_answers[0] if int(e.id[1:]) % 2 == 0 else "no"
        pools, gateway, runner = mixed_world(task_ra, examples, [answer_fn, answer_fn])
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=1, seed=0)
        report = evaluate_mixed(task_ra, pools, examples, strategy, [MAJORITY],
                                gateway, runner, "orch", "orch", limits)
        assert report.aggregated[MAJORITY].metric_value == pytest.approx(report.per_pool[0].metric_value)

    def test_per_example_jsonl_written(self, task_ra, limits, tmp_path):
        examples = make_examples(3, split="validation")
        pools, gateway, runner = mixed_world(task_ra, examples, [lambda e: e.gold_answers[0]])
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=1, seed=0)
        out = tmp_path / "candidates.jsonl"
        report = evaluate_mixed(task_ra, pools, examples, strategy, [MAJORITY],
                                gateway, runner, "orch", "orch", limits, per_example_out=str(out))
        import json
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == 3
        assert rows[0]["decisions"]["majority"]["answer"] == examples[0].gold_answers[0]
        csv_text = report.summary_csv()
        assert csv_text.splitlines()[0].startswith("row_kind,name")

    def test_oracle_requires_labels(self, task_ra, limits):
        labeled = make_examples(2, split="validation")
        unlabeled = [VqaExample(id="u1", image_ref="/img/u1.png", question="q?",
                                gold_answers=(), split="validation")]
        pools, gateway, runner = mixed_world(task_ra, labeled, [lambda e: "x"])
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=1, seed=0)
        with pytest.raises(ConfigError):
            evaluate_mixed(task_ra, pools, labeled + unlabeled, strategy, [ORACLE],
                           gateway, runner, "orch", "orch", limits)

    def test_direct_qa_pool_skips_sandbox(self, task_ra, limits):
        examples = make_examples(2, split="validation")
        train = make_examples(5)
        pool = build_direct_qa_pool(train, 3, seed=0)
        assert len(pool) == 3
        backend = ScriptedBackend()
        backend.add({"max_images": 99}, ["direct answer"])
        gateway = make_gateway(backend)
        runner = scripted_runner()  # would raise ScriptedMiss if consulted
        strategy = SamplingStrategy(kind=UNIFORM_RANDOM, k=2, seed=0)
        candidate = infer_one(examples[0], pool, strategy, gateway, runner, "orch", task_ra, limits, pool_id=3)
        assert candidate.answer == "direct answer"
        assert candidate.run is None
        assert len(runner.log) == 0


class TestDecisionSelectivity:
    def test_all_methods_selective_randomized(self, task_ra):
        rng = random.Random(7)
        example = make_examples(1, split="validation")[0]
        gateway = judge_gateway("no pattern here")
        for _ in range(100):
            candidates = [cand(i, rng.choice(["a", "b", "c", None])) for i in range(4)]
            if not any(c.present for c in candidates):
                continue
            answers = {c.answer for c in candidates if c.present}
            assert majority_vote(candidates).final_answer in answers
            assert oracle_select(candidates, ["a"], "relaxed_accuracy").final_answer in answers
            assert judge_select(example, candidates, gateway, "judgeb").final_answer in answers

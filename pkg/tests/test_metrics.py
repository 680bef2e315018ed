import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selfplay_vqa.metrics import (
    MetricReport,
    aggregate_report,
    anls_score,
    answer_matches,
    example_score,
    levenshtein,
    levenshtein_row,
    parse_numeric,
    relaxed_match,
    reports_to_csv,
)
from selfplay_vqa.sandbox import GuestRunResult

from conftest import make_examples


@lru_cache(maxsize=None)
def lev_reference(a: str, b: str) -> int:
    """Independent oracle: the textbook recursive definition, memoized."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    if a[0] == b[0]:
        return lev_reference(a[1:], b[1:])
    return 1 + min(
        lev_reference(a[1:], b[1:]),
        lev_reference(a[1:], b),
        lev_reference(a, b[1:]),
    )


class TestParseNumeric:
    def test_percent(self):
        assert parse_numeric("34%") == 34.0

    def test_thousands(self):
        assert parse_numeric("1,234.5") == 1234.5

    def test_dollar(self):
        assert parse_numeric("$1,200") == 1200.0

    def test_string(self):
        assert parse_numeric("Twitter") is None

    def test_not_pure_number(self):
        assert parse_numeric("34 apples") is None
        assert parse_numeric("inf") is None
        assert parse_numeric("nan") is None

    def test_negative_and_exponent(self):
        assert parse_numeric("-5") == -5.0
        assert parse_numeric("1e3") == 1000.0


class TestRelaxedMatch:
    def test_within_tolerance(self):
        assert relaxed_match("104", "100")

    def test_outside_tolerance(self):
        assert not relaxed_match("106", "100")

    def test_boundary_inclusive(self):
        assert relaxed_match("105", "100")

    def test_case_insensitive_strings(self):
        assert relaxed_match("twitter", "Twitter")
        assert relaxed_match("  Twitter ", "twitter")

    def test_zero_gold_exact(self):
        assert relaxed_match("0", "0")
        assert not relaxed_match("0.001", "0")

    def test_reflexive(self):
        for x in ["", "abc", "3.5", "100%", "$4"]:
            assert relaxed_match(x, x)

    def test_randomized_against_arithmetic_oracle(self):
        rng = random.Random(999)
        for _ in range(200):
            gold = round(rng.uniform(-500, 500), rng.randint(0, 3))
            pred = round(gold + rng.uniform(-0.12, 0.12) * abs(gold or 1), 6)
            expect = abs(pred - gold) <= 0.05 * abs(gold) if gold != 0 else pred == 0
            assert relaxed_match(str(pred), str(gold)) == expect, (pred, gold)


class TestAnls:
    def test_identical(self):
        assert anls_score("hello", ["hello"]) == 1.0

    def test_quarter_distance(self):
        assert anls_score("100", ["1000"]) == 0.75

    def test_cutoff_zeroes(self):
        assert anls_score("abc", ["xyz"]) == 0.0

    def test_max_over_golds(self):
        assert anls_score("100", ["xyz", "1000"]) == 0.75

    def test_case_and_trim(self):
        assert anls_score(" HELLO ", ["hello"]) == 1.0

    def test_both_empty(self):
        assert anls_score("", [""]) == 1.0

    def test_empty_golds_rejected(self):
        with pytest.raises(ValueError):
            anls_score("x", [])

    @given(st.text(max_size=12), st.text(max_size=12))
    @settings(max_examples=300, deadline=None)
    def test_symmetric_singleton(self, a, b):
        assert anls_score(a, [b]) == pytest.approx(anls_score(b, [a]))

    @given(st.text(max_size=20), st.lists(st.text(max_size=20), min_size=1, max_size=4))
    @settings(max_examples=300, deadline=None)
    def test_range(self, pred, golds):
        score = anls_score(pred, golds)
        assert 0.0 <= score <= 1.0


class TestLevenshtein:
    @given(st.text(max_size=10), st.text(max_size=10))
    @settings(max_examples=500, deadline=None)
    def test_agrees_with_recursive_oracle(self, a, b):
        assert levenshtein(a, b) == lev_reference(a, b)

    @given(st.text(max_size=8), st.text(max_size=8), st.text(max_size=8))
    @settings(max_examples=300, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)

    def test_long_strings_use_dp_path(self):
        a = "x" * 120 + "abc"
        b = "x" * 120 + "abd"
        assert levenshtein(a, b) == 1
        rng = random.Random(5)
        for _ in range(30):
            a = "".join(rng.choice("ab") for _ in range(rng.randint(60, 150)))
            b = "".join(rng.choice("ab") for _ in range(rng.randint(60, 150)))
            row = [list(range(len(b) + 1))]
            for i, ca in enumerate(a, 1):
                row.append([i] + [0] * len(b))
                for j, cb in enumerate(b, 1):
                    row[i][j] = min(row[i - 1][j] + 1, row[i][j - 1] + 1, row[i - 1][j - 1] + (ca != cb))
            assert levenshtein(a, b) == row[len(a)][len(b)]

    def test_row_matches_scalar(self):
        texts = ["", "a", "abc", "zzzz", "abcd" * 20]
        assert levenshtein_row("abc", texts) == [levenshtein("abc", t) for t in texts]

    @given(st.text(max_size=10), st.lists(st.text(max_size=10), max_size=12))
    @settings(max_examples=400, deadline=None)
    def test_row_matches_scalar_property(self, a, texts):
        # duplicates and arbitrary order must not disturb the shared-prefix walk
        assert levenshtein_row(a, texts) == [levenshtein(a, t) for t in texts]


class TestAggregateReport:
    def test_mixed_outcomes(self, task_ra):
        examples = make_examples(4)
        outcomes = [
            (examples[0], GuestRunResult(status="ok", answer="0")),     # correct
            (examples[1], GuestRunResult(status="ok", answer="1")),     # correct
            (examples[2], GuestRunResult(status="ok", answer="wrong")),  # ok but wrong
            (examples[3], GuestRunResult(status="error", error_type="TypeError")),
        ]
        report = aggregate_report(outcomes, "relaxed_accuracy")
        assert report.metric_value == pytest.approx(0.50)
        assert report.code_pass_rate == pytest.approx(0.75)
        assert report.n_examples == 4

    def test_all_crashed(self):
        examples = make_examples(3)
        outcomes = [(e, GuestRunResult(status="error", error_type="X")) for e in examples]
        report = aggregate_report(outcomes, "relaxed_accuracy")
        assert report.metric_value == 0.0
        assert report.code_pass_rate == 0.0

    def test_singleton_correct(self):
        example = make_examples(1)[0]
        report = aggregate_report([(example, GuestRunResult(status="ok", answer="0"))], "relaxed_accuracy")
        assert report.metric_value == 1.0
        assert report.code_pass_rate == 1.0

    def test_direct_answer_counts_as_pass(self):
        example = make_examples(1)[0]
        report = aggregate_report([(example, "0")], "relaxed_accuracy")
        assert report.metric_value == 1.0 and report.code_pass_rate == 1.0

    def test_missing_answer_is_not_a_pass(self):
        example = make_examples(1)[0]
        report = aggregate_report([(example, GuestRunResult(status="ok", answer=None))], "relaxed_accuracy")
        assert report.code_pass_rate == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            aggregate_report([], "anls")

    def test_metric_never_exceeds_cpr(self, task_ra):
        rng = random.Random(11)
        examples = make_examples(30)
        outcomes = []
        for e in examples:
            roll = rng.random()
            if roll < 0.3:
                outcomes.append((e, GuestRunResult(status="error", error_type="E")))
            elif roll < 0.6:
                outcomes.append((e, GuestRunResult(status="ok", answer="nope")))
            else:
                outcomes.append((e, GuestRunResult(status="ok", answer=e.gold_answers[0])))
        report = aggregate_report(outcomes, "relaxed_accuracy")
        assert report.metric_value <= report.code_pass_rate

    def test_csv_and_markdown(self):
        report = MetricReport(task="t", split="validation", metric_value=0.5,
                              code_pass_rate=0.75, n_examples=4)
        assert report.csv_row() == ["t", "validation", "50.0", "75.0", "4"]
        assert "| t | validation | 50.0 | 75.0 | 4 |" == report.markdown_row()
        csv_text = reports_to_csv([report])
        assert csv_text.splitlines()[0] == "task,split,metric_pct,cpr_pct,n"


class TestAnswerMatches:
    def test_ra_uses_first_gold(self):
        assert answer_matches("104", ["100", "zzz"], "relaxed_accuracy")
        assert not answer_matches("zzz", ["100", "zzz"], "relaxed_accuracy")

    def test_anls_uses_all_golds(self):
        assert answer_matches("zzz", ["100", "zzz"], "anls")

    def test_example_score_kinds(self):
        assert example_score("104", ["100"], "relaxed_accuracy") == 1.0
        assert example_score("100", ["1000"], "anls") == pytest.approx(0.75)

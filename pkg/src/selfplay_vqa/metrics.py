"""Task metrics: relaxed accuracy, ANLS, code pass rate, and run reports.

Relaxed accuracy matches numeric answers within a 5% tolerance of the gold
value and other answers by case-insensitive trimmed string equality. ANLS is
the averaged normalized Levenshtein similarity with the standard 0.5 cutoff,
taking the max over multiple gold labels.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

RELAXED_TOLERANCE = 0.05
ANLS_THRESHOLD = 0.5

_NUMBER_RE = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")

# Myers bit-parallel scan: pattern bitmasks are cached because ANLS scoring
# reuses the same prediction against several gold labels.
_BITS = [1 << i for i in range(64)]
_PATTERN_CACHE: dict[str, tuple[dict, int, int, int]] = {}
_PATTERN_CACHE_LIMIT = 65536


def parse_numeric(text: str) -> Optional[float]:
    """Parse an answer as a number, or None when it is not purely numeric.

    Strips surrounding whitespace, "," thousands separators, one trailing
    "%", and one leading "$".
    """
    s = text.strip().replace(",", "")
    if s.startswith("$"):
        s = s[1:]
    if s.endswith("%"):
        s = s[:-1]
    s = s.strip()
    if not _NUMBER_RE.match(s):
        return None
    return float(s)


def _pattern_entry(a: str) -> tuple[dict, int, int, int]:
    entry = _PATTERN_CACHE.get(a)
    if entry is not None:
        return entry
    peq: dict[str, int] = {}
    get = peq.get
    for ch, bit in zip(a, _BITS):
        peq[ch] = get(ch, 0) | bit
    m = len(a)
    entry = (peq, (1 << m) - 1, 1 << (m - 1), m)
    if len(_PATTERN_CACHE) >= _PATTERN_CACHE_LIMIT:
        _PATTERN_CACHE.clear()
    _PATTERN_CACHE[a] = entry
    return entry


def _scan(entry: tuple[dict, int, int, int], text: str) -> int:
    """Myers 1999 bit-parallel edit distance of a preprocessed pattern vs text."""
    peq, full, high, m = entry
    vp = full
    vn = 0
    score = m
    get = peq.get
    for ch in text:
        eq = get(ch, 0)
        xv = eq | vn
        xh = (((eq & vp) + vp) ^ vp) | eq
        ph = vn | (full ^ ((xh | vp) & full))
        mh = vp & xh
        if ph & high:
            score += 1
        elif mh & high:
            score -= 1
        ph = ((ph << 1) | 1) & full
        mh = (mh << 1) & full
        vp = mh | (full ^ ((xv | ph) & full))
        vn = ph & xv
    return score


def _lev_dp(a: str, b: str) -> int:
    """Two-row dynamic program, used when both strings exceed the word size."""
    if len(a) < len(b):
        a, b = b, a
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        prev = row[0]
        row[0] = i
        for j, cb in enumerate(b, 1):
            cur = row[j]
            row[j] = min(cur + 1, row[j - 1] + 1, prev + (ca != cb))
            prev = cur
    return row[-1]


def levenshtein(a: str, b: str) -> int:
    """Edit distance between two strings (insert/delete/substitute, unit cost)."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    if len(a) > 63:
        return _lev_dp(a, b)
    return _scan(_pattern_entry(a), b)


def levenshtein_row(a: str, texts: Sequence[str]) -> list[int]:
    """Edit distances from ``a`` to each text, preprocessing ``a`` once.

    Texts are processed in sorted order so scan state is shared across
    common prefixes; with many related references this does far less work
    than independent scans, and the arithmetic is identical.
    """
    if not a:
        return [len(t) for t in texts]
    if len(a) > 63:
        return [_lev_dp(a, t) for t in texts]
    peq, full, high, m = _pattern_entry(a)
    get = peq.get
    out = [0] * len(texts)
    order = sorted(range(len(texts)), key=texts.__getitem__)
    states: list[tuple[int, int, int]] = []  # (vp, vn, score) after each char
    prev = ""
    for index in order:
        t = texts[index]
        shared = 0
        limit = min(len(t), len(states))
        while shared < limit and t[shared] == prev[shared]:
            shared += 1
        del states[shared:]
        if states:
            vp, vn, score = states[-1]
        else:
            vp, vn, score = full, 0, m
        for ch in t[shared:]:
            eq = get(ch, 0)
            xv = eq | vn
            xh = (((eq & vp) + vp) ^ vp) | eq
            ph = vn | (full ^ ((xh | vp) & full))
            mh = vp & xh
            if ph & high:
                score += 1
            elif mh & high:
                score -= 1
            ph = ((ph << 1) | 1) & full
            mh = (mh << 1) & full
            vp = mh | (full ^ ((xv | ph) & full))
            vn = ph & xv
            states.append((vp, vn, score))
        out[index] = score
        prev = t
    return out


def relaxed_match(pred: str, gold: str) -> bool:
    """Relaxed-accuracy match: 5% numeric tolerance, else exact string match.

    A gold of exactly 0 admits no tolerance (5% of 0 is 0). String comparison
    is case-insensitive and whitespace-trimmed.
    """
    p = parse_numeric(pred)
    g = parse_numeric(gold)
    if p is not None and g is not None:
        if g == 0:
            return p == 0
        return abs(p - g) <= RELAXED_TOLERANCE * abs(g)
    return pred.strip().lower() == gold.strip().lower()


def anls_score(pred: str, golds: Sequence[str]) -> float:
    """ANLS of a prediction against one or more gold labels.

    Per gold: normalized Levenshtein distance NL over lowercased, trimmed
    strings (0 when both are empty); the per-gold score is 1-NL when
    NL < 0.5, else 0. Returns the max over golds.
    """
    if not golds:
        raise ValueError("golds must be nonempty")
    p = pred.strip().lower()
    normed = [g.strip().lower() for g in golds]
    distances = levenshtein_row(p, normed)
    best = 0.0
    for g, dist in zip(normed, distances):
        denom = max(len(p), len(g))
        nl = 0.0 if denom == 0 else dist / denom
        score = 1.0 - nl if nl < ANLS_THRESHOLD else 0.0
        if score > best:
            best = score
    return best


def answer_matches(pred: str, golds: Sequence[str], metric_kind: str) -> bool:
    """Whether an answer counts as correct under the task metric.

    Relaxed accuracy checks against the first gold; ANLS counts a prediction
    as correct when its best per-gold similarity exceeds the 0.5 cutoff.
    """
    if not golds:
        return False
    if metric_kind == "relaxed_accuracy":
        return relaxed_match(pred, golds[0])
    return anls_score(pred, golds) > ANLS_THRESHOLD


def example_score(pred: str, golds: Sequence[str], metric_kind: str) -> float:
    """Per-example score: 0/1 for relaxed accuracy, the ANLS value otherwise."""
    if not golds:
        return 0.0
    if metric_kind == "relaxed_accuracy":
        return 1.0 if relaxed_match(pred, golds[0]) else 0.0
    return anls_score(pred, golds)


@dataclass
class MetricReport:
    """Scores for one run over one split: task metric, CPR, per-example rows."""

    task: str
    split: str
    metric_value: float
    code_pass_rate: float
    n_examples: int
    per_example: list[tuple[str, float, str]] = field(default_factory=list)

    def csv_row(self) -> list[str]:
        return [
            self.task,
            self.split,
            f"{100 * self.metric_value:.1f}",
            f"{100 * self.code_pass_rate:.1f}",
            str(self.n_examples),
        ]

    def markdown_row(self) -> str:
        return (
            f"| {self.task} | {self.split} | {100 * self.metric_value:.1f} "
            f"| {100 * self.code_pass_rate:.1f} | {self.n_examples} |"
        )

    @staticmethod
    def csv_header() -> list[str]:
        return ["task", "split", "metric_pct", "cpr_pct", "n"]

    @staticmethod
    def markdown_header() -> str:
        return "| task | split | metric% | CPR% | n |\n|---|---|---|---|---|"


def aggregate_report(results, metric_kind: str, task: str = "", split: str = "") -> MetricReport:
    """Score a list of (example, outcome) pairs into a MetricReport.

    An outcome is either a GuestRunResult-like object (``status``/``answer``
    attributes) or a direct answer string. Failed runs score 0 and do not
    count toward the code pass rate.
    """
    if not results:
        raise ValueError("results must be nonempty")
    per_example = []
    passed = 0
    total_score = 0.0
    for example, outcome in results:
        if isinstance(outcome, str):
            answer: Optional[str] = outcome
            status = "ok"
        else:
            answer = outcome.answer
            status = outcome.status
        ok = status == "ok" and answer is not None
        if ok:
            passed += 1
            score = example_score(answer, example.gold_answers, metric_kind)
        else:
            score = 0.0
        total_score += score
        per_example.append((example.id, score, status))
    n = len(results)
    metric_value = total_score / n
    cpr = passed / n
    if metric_kind == "relaxed_accuracy":
        assert metric_value <= cpr + 1e-9, "failed runs must score 0"
    return MetricReport(
        task=task,
        split=split,
        metric_value=metric_value,
        code_pass_rate=cpr,
        n_examples=n,
        per_example=per_example,
    )


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MetricReport.csv_header())
    for report in reports:
        writer.writerow(report.csv_row())
    return buf.getvalue()

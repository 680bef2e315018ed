"""Dataset ingestion: task definitions, JSONL loading, and seeded subsampling.

Datasets are JSON-lines files, one record per line with keys ``id``,
``image``, ``question``, ``answers``. Image values are paths relative to a
dataset root; the engine validates they resolve but never decodes pixels.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DatasetError

RELAXED_ACCURACY = "relaxed_accuracy"
ANLS = "anls"

METRIC_KINDS = (RELAXED_ACCURACY, ANLS)
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class TaskSpec:
    """One VQA task: where its splits live and how it is scored."""

    name: str
    metric_kind: str
    split_paths: dict[str, str] = field(default_factory=dict)
    answer_var: str = "ans"

    def __post_init__(self):
        if not self.name:
            raise DatasetError("task name must be nonempty")
        if self.metric_kind not in METRIC_KINDS:
            raise DatasetError(
                f"unknown metric_kind {self.metric_kind!r}; expected one of {METRIC_KINDS}"
            )


@dataclass(frozen=True)
class VqaExample:
    """One image+question+gold-answers record from a task split."""

    id: str
    image_ref: str
    question: str
    gold_answers: tuple[str, ...]
    split: str

    @property
    def labeled(self) -> bool:
        return len(self.gold_answers) > 0


def load_dataset(
    path: str | Path,
    split: str,
    dataset_root: str | Path | None = None,
    allow_unlabeled: bool = False,
) -> list[VqaExample]:
    """Load one split from a JSONL file, validating records and image refs.

    Image paths are resolved against ``dataset_root`` (default: the file's
    directory). Records with an empty ``answers`` list are rejected unless
    ``allow_unlabeled`` is set, which is how unlabeled test splits load.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    root = Path(dataset_root) if dataset_root is not None else path.parent

    examples: list[VqaExample] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("id", "image", "question"):
                if not record.get(key):
                    raise DatasetError(f"{path}:{lineno}: record missing {key!r}")
            answers = record.get("answers")
            if not isinstance(answers, list) or not all(isinstance(a, str) for a in (answers or [])):
                raise DatasetError(f"{path}:{lineno}: 'answers' must be a list of strings")
            if not answers and not allow_unlabeled:
                raise DatasetError(f"{path}:{lineno}: record has no answers")
            rid = str(record["id"])
            if rid in seen_ids:
                raise DatasetError(f"{path}:{lineno}: duplicate id {rid!r} within split")
            seen_ids.add(rid)
            image_ref = str(record["image"])
            if not (root / image_ref).is_file():
                raise DatasetError(f"missing image for id {rid!r}: {root / image_ref}")
            examples.append(
                VqaExample(
                    id=rid,
                    image_ref=str(root / image_ref),
                    question=str(record["question"]),
                    gold_answers=tuple(answers),
                    split=split,
                )
            )
    return examples


def save_dataset(examples: list[VqaExample], path: str | Path, dataset_root: str | Path | None = None) -> None:
    """Write examples in the canonical JSONL form ``load_dataset`` reads.

    Canonical form is what round-trips byte-identically: key order
    id/image/question/answers, compact separators, one record per line.
    Image refs are written relative to ``dataset_root`` when given.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            image = ex.image_ref
            if dataset_root is not None:
                try:
                    image = str(Path(image).relative_to(dataset_root))
                except ValueError:
                    pass
            record = {
                "id": ex.id,
                "image": image,
                "question": ex.question,
                "answers": list(ex.gold_answers),
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(", ", ": ")) + "\n")


def sample_subset(examples: list[VqaExample], n: int, seed: int) -> list[VqaExample]:
    """Draw min(n, len) distinct examples, deterministically for a fixed seed.

    Implemented as an explicit partial Fisher-Yates shuffle so the result is
    a permutation prefix and stable across platforms and Python versions.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    pool = list(examples)
    rng = random.Random(seed)
    k = min(n, len(pool))
    for i in range(k):
        j = rng.randrange(i, len(pool))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]

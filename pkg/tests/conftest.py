"""Shared test fixtures: tiny datasets, scripted backends, scripted runners."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from selfplay_vqa.corpus import TaskSpec, VqaExample
from selfplay_vqa.modelgw import BackendConfig, Gateway, ScriptedBackend
from selfplay_vqa.sandbox import RunLimits

FIXTURES = Path(__file__).parent / "fixtures"
STUB_GUESTS = Path(__file__).parent / "stub_guests"
REPO_ROOT = Path(__file__).parent.parent


def make_dataset(root: Path, name: str, records: list[dict]) -> Path:
    """Write a dataset file plus the dummy image files its records reference."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{name}.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            image = record.get("image", f"{record['id']}.png")
            (root / image).parent.mkdir(parents=True, exist_ok=True)
            (root / image).touch()
            full = {"id": record["id"], "image": image,
                    "question": record.get("question", f"What is {record['id']}?"),
                    "answers": record.get("answers", ["42"])}
            fh.write(json.dumps(full, ensure_ascii=False) + "\n")
    return path


def make_examples(n: int, split: str = "train", answer_of=lambda i: str(i)) -> list[VqaExample]:
    return [
        VqaExample(
            id=f"e{i:03d}",
            image_ref=f"/img/e{i:03d}.png",
            question=f"What is item #{i}?",
            gold_answers=(answer_of(i),),
            split=split,
        )
        for i in range(n)
    ]


@pytest.fixture
def task_ra() -> TaskSpec:
    return TaskSpec(name="toytask", metric_kind="relaxed_accuracy")


@pytest.fixture
def task_anls() -> TaskSpec:
    return TaskSpec(name="toydocs", metric_kind="anls")


@pytest.fixture
def limits() -> RunLimits:
    return RunLimits(wall_timeout=10.0, max_tool_calls=16, max_output_bytes=1 << 20)


def make_gateway(backend: ScriptedBackend, backend_id: str = "orch", cache=None) -> Gateway:
    gateway = Gateway(cache=cache)
    gateway.register(BackendConfig(backend_id=backend_id, rate_limit=10000.0), backend)
    return gateway

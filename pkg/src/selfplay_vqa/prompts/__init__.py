"""Prompt rendering: seed templates, refinement prompts, judge prompts.

Templates live as plain-text data files next to this module and are verified
against golden hashes in ``manifest.json`` at load time. Placeholders use
``{name}`` tokens and are substituted by literal replacement, never
``str.format``, so template bodies may contain arbitrary braces.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources

from ..errors import PromptError

POT = "pot"
TOOL_API = "tool_api"
DIRECT_QA = "direct_qa"

TEXT = "text"
IMAGE = "image"

MISSING_ANSWER_VAR = "missing_answer_var"
UNRESOLVED_NAME = "unresolved_name"
GENERIC = "generic"

REFINEMENT_CLASSES = (MISSING_ANSWER_VAR, UNRESOLVED_NAME, GENERIC)

_REFINE_TEMPLATE_IDS = {
    MISSING_ANSWER_VAR: "refine_missing_answer",
    UNRESOLVED_NAME: "refine_name_error",
    GENERIC: "refine_generic",
}

_UNRESOLVED_NAME_ERRORS = ("NameError", "UnboundLocalError")


@dataclass(frozen=True)
class PromptPart:
    """One element of a multimodal prompt: text, or a slot holding an image ref."""

    kind: str
    payload: str

    def __post_init__(self):
        if self.kind not in (TEXT, IMAGE):
            raise PromptError(f"unknown part kind {self.kind!r}")


def text_part(payload: str) -> PromptPart:
    return PromptPart(TEXT, payload)


def image_part(image_ref: str) -> PromptPart:
    return PromptPart(IMAGE, image_ref)


@dataclass(frozen=True)
class SeedKind:
    """A zero-shot prompt family that bootstraps one self-play environment."""

    kind: str
    tool_backend: str | None = None

    def __post_init__(self):
        if self.kind not in (POT, TOOL_API, DIRECT_QA):
            raise PromptError(f"unknown seed kind {self.kind!r}")
        if self.kind == TOOL_API and not self.tool_backend:
            raise PromptError("tool_api seed requires a tool_backend")
        if self.kind != TOOL_API and self.tool_backend:
            raise PromptError(f"{self.kind} seed takes no tool_backend")

    @property
    def tag(self) -> str:
        if self.kind == TOOL_API:
            return f"tool_{self.tool_backend}"
        return self.kind

    @property
    def uses_sandbox(self) -> bool:
        return self.kind in (POT, TOOL_API)


@dataclass(frozen=True)
class Exemplar:
    """A solved training example eligible for few-shot prompting.

    ``program`` is empty only for direct-QA exemplars, where the shown
    completion is the answer itself.
    """

    example_id: str
    image_ref: str
    question: str
    program: str
    answer: str
    seed_kind: SeedKind
    step_index: int

    def __post_init__(self):
        if self.seed_kind.kind != DIRECT_QA and not self.program:
            raise PromptError(f"exemplar {self.example_id}: program must be nonempty")

    @property
    def shown_completion(self) -> str:
        return self.answer if self.seed_kind.kind == DIRECT_QA else self.program


class _TemplateStore:
    def __init__(self):
        self._templates: dict[str, str] | None = None

    def _load(self) -> dict[str, str]:
        if self._templates is not None:
            return self._templates
        base = resources.files(__package__) / "templates"
        manifest = json.loads((base / "manifest.json").read_text(encoding="utf-8"))
        templates = {}
        for template_id, entry in manifest.items():
            data = (base / entry["file"]).read_bytes()
            digest = hashlib.sha256(data).hexdigest()
            if digest != entry["sha256"]:
                raise PromptError(
                    f"template {template_id!r} does not match its golden hash "
                    f"(expected {entry['sha256']}, got {digest})"
                )
            templates[template_id] = data.decode("utf-8")
        self._templates = templates
        return templates

    def get(self, template_id: str) -> str:
        templates = self._load()
        if template_id not in templates:
            raise PromptError(f"no template registered under {template_id!r}")
        return templates[template_id]


_STORE = _TemplateStore()


def get_template(template_id: str) -> str:
    """Return the stored template text, hash-verified on first access."""
    return _STORE.get(template_id)


def _substitute(template: str, values: dict[str, str]) -> str:
    out = template
    for name, value in values.items():
        out = out.replace("{" + name + "}", value)
    return out


def seed_instructions(seed: SeedKind) -> str:
    """The instruction block for a seed kind, interface description included."""
    if seed.kind == POT:
        return get_template("pot_zero_shot")
    if seed.kind == TOOL_API:
        return _substitute(
            get_template("tool_zero_shot"),
            {"INTERFACE_DESCRIPTION_PROMPT": get_template("tool_interface")},
        )
    return get_template("direct_qa")


def render_zero_shot(seed: SeedKind, example) -> list[PromptPart]:
    """Seed instructions, then the image, then the question."""
    return [
        text_part(seed_instructions(seed)),
        image_part(example.image_ref),
        text_part(example.question),
    ]


def render_few_shot(pool_sample: list[Exemplar], example) -> list[PromptPart]:
    """Seed instructions, then (image, question, completion) per exemplar,
    then the target image and question. 1 + 3k + 2 parts for k exemplars."""
    if not pool_sample:
        raise PromptError("few-shot rendering requires at least one exemplar")
    seed = pool_sample[0].seed_kind
    parts = [text_part(seed_instructions(seed))]
    for ex in pool_sample:
        parts.append(image_part(ex.image_ref))
        parts.append(text_part(ex.question))
        parts.append(text_part(ex.shown_completion))
    parts.append(image_part(example.image_ref))
    parts.append(text_part(example.question))
    return parts


def classify_error(result) -> str:
    """Map a failed run onto its refinement class.

    An ok run without the answer variable is a missing-answer failure;
    unresolved-name exceptions get the import-hint prompt; everything else,
    timeouts included, is generic.
    """
    status = result.status
    if status == "ok":
        if result.answer is None:
            return MISSING_ANSWER_VAR
        raise PromptError("classify_error called on a fully successful run")
    if result.error_type in _UNRESOLVED_NAME_ERRORS:
        return UNRESOLVED_NAME
    return GENERIC


def render_refinement(
    refinement_class: str,
    prior_program: str,
    error_type: str,
    error_trace: str,
    answer_var: str,
) -> list[PromptPart]:
    """Echo the failed program, then the class's template with placeholders filled."""
    if refinement_class not in REFINEMENT_CLASSES:
        raise PromptError(f"unknown refinement class {refinement_class!r}")
    filled = _substitute(
        get_template(_REFINE_TEMPLATE_IDS[refinement_class]),
        {"answer_var": answer_var, "error_type": error_type, "error_trace": error_trace},
    )
    return [text_part(prior_program), text_part(filled)]


def render_judge(example, candidates: list[str]) -> list[PromptPart]:
    """Judge template, the image, the question, then the numbered candidates."""
    if not candidates:
        raise PromptError("judge rendering requires at least one candidate")
    numbered = "\n".join(f"Answer {i}: {answer}" for i, answer in enumerate(candidates, 1))
    return [
        text_part(get_template("judge")),
        image_part(example.image_ref),
        text_part(example.question),
        text_part(numbered),
    ]

"""Prompt templates and rendering.

A template is an instruction paragraph, a blank line, and a body with ``{c}``,
``{x}`` and ``{y_hat}`` placeholders. Few-shot demonstrations reuse the body
with the answer filled in after the cue and are stacked between the
instruction and the test instance.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InvalidArgumentError

QUESTION_PLACEHOLDER = "[QUESTION]"
CONTEXT_PLACEHOLDER = "[CONTEXT]"
DEFAULT_SHOTS = 2


class TemplateKind(enum.Enum):
    PARAMETRIC = "parametric"
    CONTEXTUAL = "contextual"
    ABSTENTION = "abstention"
    VERIFICATION = "verification"
    NULL_PARAMETRIC = "null_parametric"
    NULL_CONTEXTUAL = "null_contextual"

    @property
    def is_null(self) -> bool:
        return self in (TemplateKind.NULL_PARAMETRIC, TemplateKind.NULL_CONTEXTUAL)


DEFAULT_TEMPLATES: dict[TemplateKind, str] = {
    TemplateKind.PARAMETRIC: "Answer the following question.\n\nQuestion: {x}\nAnswer:",
    TemplateKind.CONTEXTUAL: (
        "Answer the following question based on the given context.\n\n"
        "Context: {c}\nQuestion: {x}\nAnswer:"
    ),
    TemplateKind.ABSTENTION: (
        "Answer the following question based on the given context. "
        "If the question cannot be answered, respond with 'unknown'.\n\n"
        "Context: {c}\nQuestion: {x}\nAnswer:"
    ),
    TemplateKind.VERIFICATION: (
        "Context: {c}\nQuestion: {x}\nProposed answer: {y_hat}\n"
        "Is the proposed answer to the question known or unknown?\nAnswer:"
    ),
}

# null kinds borrow the body of their instance-level counterpart
_NULL_BASE = {
    TemplateKind.NULL_PARAMETRIC: TemplateKind.PARAMETRIC,
    TemplateKind.NULL_CONTEXTUAL: TemplateKind.CONTEXTUAL,
}


@dataclass(frozen=True)
class Demo:
    question: str
    context: str
    answer: str


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    kind: TemplateKind
    demo_count: int = 0
    generated_prefix: str = ""

    def extend(self, generated_prefix: str) -> "RenderedPrompt":
        """Same prompt conditioned on a different generated prefix."""
        base = self.text[: len(self.text) - len(self.generated_prefix)]
        return replace(self, text=base + generated_prefix, generated_prefix=generated_prefix)


def _split(template: str) -> tuple[str, str]:
    head, sep, body = template.partition("\n\n")
    if not sep:
        return "", template
    return head, body


_SLOT = re.compile(r"\{(c|x|y_hat)\}")


def _fill(body: str, context: str | None, question: str | None, y_hat: str | None) -> str:
    # one pass, so braces inside a filled value are never re-expanded
    values = {"c": context, "x": question, "y_hat": y_hat}

    def sub(m: re.Match) -> str:
        v = values[m.group(1)]
        return m.group(0) if v is None else v

    return _SLOT.sub(sub, body)


@dataclass
class PromptKit:
    """Renders every template kind from a fixed template table."""

    templates: Mapping[TemplateKind, str] = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    null_demos: bool = True

    def __post_init__(self) -> None:
        missing = [k for k in DEFAULT_TEMPLATES if k not in self.templates]
        if missing:
            merged = dict(DEFAULT_TEMPLATES)
            merged.update(self.templates)
            self.templates = merged

    def render(
        self,
        kind: TemplateKind,
        context: str | None = None,
        question: str | None = None,
        candidate_answer: str | None = None,
        demos: Sequence[Demo] = (),
        generated_prefix: str = "",
    ) -> RenderedPrompt:
        if kind.is_null:
            base = _NULL_BASE[kind]
            question = QUESTION_PLACEHOLDER
            context = CONTEXT_PLACEHOLDER if kind is TemplateKind.NULL_CONTEXTUAL else None
            candidate_answer = None
            if not self.null_demos:
                demos = ()
        else:
            base = kind
            _check_required(kind, context, question, candidate_answer)
        if base is TemplateKind.VERIFICATION:
            demos = ()
        if base is TemplateKind.PARAMETRIC:
            context = None

        head, body = _split(self.templates[base])
        blocks = [head] if head else []
        for demo in demos:
            shot = _fill(body, demo.context if base is not TemplateKind.PARAMETRIC else None,
                         demo.question, None)
            blocks.append(f"{shot} {demo.answer}")
        blocks.append(_fill(body, context, question, candidate_answer))
        text = "\n\n".join(blocks) + generated_prefix
        return RenderedPrompt(text=text, kind=kind, demo_count=len(demos), generated_prefix=generated_prefix)


def _check_required(kind: TemplateKind, context, question, candidate_answer) -> None:
    need = {"question": question}
    if kind in (TemplateKind.CONTEXTUAL, TemplateKind.ABSTENTION, TemplateKind.VERIFICATION):
        need["context"] = context
    if kind is TemplateKind.VERIFICATION:
        need["candidate_answer"] = candidate_answer
    missing = [name for name, value in need.items() if value is None]
    if missing:
        raise InvalidArgumentError(f"{kind.value} prompt requires {', '.join(missing)}")


_DEFAULT_KIT = PromptKit()


def render(
    kind: TemplateKind,
    context: str | None = None,
    question: str | None = None,
    candidate_answer: str | None = None,
    demos: Sequence[Demo] = (),
    generated_prefix: str = "",
) -> RenderedPrompt:
    """Render with the built-in wording."""
    return _DEFAULT_KIT.render(kind, context, question, candidate_answer, demos, generated_prefix)


_HEADER = re.compile(r"^\[([a-z_]+)\]$")


def parse_template_file(text: str) -> dict[TemplateKind, str]:
    """Parse override blocks of the form::

        [contextual]
        Instruction line.

        Context: {c}
        Question: {x}
        Answer:

    Trailing blank lines of each block are dropped. Null kinds cannot be
    overridden; they always follow their instance-level template.
    """
    out: dict[TemplateKind, str] = {}
    current: TemplateKind | None = None
    lines: list[str] = []

    def flush() -> None:
        if current is not None:
            out[current] = "\n".join(lines).strip("\n")

    for raw in text.splitlines():
        stripped = raw.strip()
        header = _HEADER.match(stripped)
        if header:
            flush()
            name = header.group(1)
            try:
                current = TemplateKind(name)
            except ValueError:
                raise InvalidArgumentError(f"unknown template kind {name!r}") from None
            if current.is_null:
                raise InvalidArgumentError(f"{name} follows its base template and cannot be overridden")
            lines = []
        elif current is None:
            if stripped:
                raise InvalidArgumentError("template file must start with a [kind] header")
        else:
            lines.append(raw)
    flush()
    return out


def load_prompt_kit(path: str | Path | None = None, null_demos: bool = True) -> PromptKit:
    templates = dict(DEFAULT_TEMPLATES)
    if path is not None:
        templates.update(parse_template_file(Path(path).read_text(encoding="utf-8")))
    return PromptKit(templates=templates, null_demos=null_demos)

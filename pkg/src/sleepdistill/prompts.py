"""Prompt rendering from external template files.

Templates live under templates/ with {{name}} placeholders and are
listed in templates/manifest.cfg; code never concatenates prompt prose
inline. Rendering is pure: same inputs, same string. The multi-turn
dialogue used for question generation is a value type with a word-based
token budget and whole-turn eviction.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .reports import PhysioRuleSet, SleepReport

TEMPLATE_IDS = ("Pr1", "Pr2", "Pr3", "FewShotCoT", "PlainQA", "CoTOnly")
ABLATION_VARIANTS = ("PlainQA", "CoTOnly", "FewShotCoT")

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")


class MissingPlaceholderError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str]


@dataclass(frozen=True)
class QuestionCategory:
    kind: str
    exemplar_text: str


# The three worked examples embedded in the few-shot prompt, one per
# question category. Fixed, not rotated per query.
QUESTION_CATEGORIES = (
    QuestionCategory("DirectLookup", "Is my weight within the normal range?"),
    QuestionCategory("GlobalSummary", "How often should I have a heart health check-up?"),
    QuestionCategory("OutOfContext", "Do I need to change my drinking habits to improve my sleep?"),
)

# The chain-of-thought directive shared by the FewShotCoT and CoTOnly
# variants; used by tests to check the ablation nesting.
COT_DIRECTIVE = (
    "First, identify relevant information from the sleep report based on the "
    "question, then respond using the specific information found."
)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load all templates named in the manifest; validates that each
    declared placeholder actually occurs in its template body."""
    if directory is None:
        root = resources.files("sleepdistill") / "templates"
        read = lambda name: (root / name).read_text(encoding="utf-8")
    else:
        root = Path(directory)
        read = lambda name: (root / name).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(read("manifest.cfg"))
    templates: dict[str, PromptTemplate] = {}
    for template_id in parser.sections():
        sec = parser[template_id]
        body = read(sec["file"])
        required = frozenset(
            name.strip()
            for name in sec.get("placeholders", "").split(",")
            if name.strip()
        )
        present = set(_PLACEHOLDER_RE.findall(body))
        missing = required - present
        if missing:
            raise MissingPlaceholderError(
                f"template {template_id}: declared placeholders absent from body: "
                f"{sorted(missing)}"
            )
        templates[template_id] = PromptTemplate(template_id, body, required)
    return templates


_default_templates: dict[str, PromptTemplate] | None = None


def default_templates() -> dict[str, PromptTemplate]:
    global _default_templates
    if _default_templates is None:
        _default_templates = load_templates()
    return _default_templates


def render_template(template: PromptTemplate, **bindings: object) -> str:
    """Substitute placeholders; every required placeholder must be bound
    to a nonempty value and no marker may survive."""
    for name in template.required_placeholders:
        value = bindings.get(name)
        if value is None or str(value) == "":
            raise MissingPlaceholderError(
                f"template {template.template_id}: placeholder {name!r} missing or empty"
            )
    text = template.body
    for name, value in bindings.items():
        text = text.replace("{{" + name + "}}", str(value))
    leftover = _PLACEHOLDER_RE.findall(text)
    if leftover:
        raise MissingPlaceholderError(
            f"template {template.template_id}: unbound placeholders {sorted(set(leftover))}"
        )
    return text.rstrip("\n")


def render_named(template_id: str, templates=None, **bindings: object) -> str:
    ts = templates if templates is not None else default_templates()
    return render_template(ts[template_id], **bindings)


def estimate_units(text: str) -> float:
    """Budget units: whitespace-delimited words times 1.3."""
    return len(text.split()) * 1.3


@dataclass(frozen=True)
class DialogueState:
    """Running multi-turn dialogue with a unit budget.

    Roles must alternate user/assistant after an optional leading system
    turn; appends evict the oldest non-system turns whole until the
    serialized length fits the budget (the newest turn is always kept).
    """

    turns: tuple[tuple[str, str], ...] = ()
    token_budget: int = 8192

    def __post_init__(self):
        for i, (role, _) in enumerate(self.turns):
            if role == "system":
                if i != 0:
                    raise ValueError("system turn only allowed first")
            elif role not in ("user", "assistant"):
                raise ValueError(f"unknown role {role!r}")
        non_system = [r for r, _ in self.turns if r != "system"]
        for i, role in enumerate(non_system):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise ValueError("user/assistant turns must alternate")

    def units(self) -> float:
        return sum(estimate_units(content) for _, content in self.turns)

    def append(self, role: str, content: str) -> "DialogueState":
        turns = list(self.turns) + [(role, content)]
        system = [t for t in turns if t[0] == "system"]
        rest = [t for t in turns if t[0] != "system"]

        def total(ts):
            return sum(estimate_units(c) for _, c in ts)

        while rest[:-1] and total(system + rest) > self.token_budget:
            rest.pop(0)
        # Keep the alternation well-formed after eviction: drop a leading
        # assistant turn left behind by removing its user turn.
        while rest and rest[0][0] == "assistant":
            rest.pop(0)
        return DialogueState(tuple(system + rest), self.token_budget)


def render_pr1(
    exemplar: SleepReport,
    rules: PhysioRuleSet,
    count: int,
    templates=None,
) -> str:
    """Report-production prompt: exemplar, count, and the rule list."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return render_named(
        "Pr1",
        templates=templates,
        exemplar_report=exemplar.rendered_text,
        report_count=count,
        nights=exemplar.nights,
        rules=rules.describe(),
    )


def render_pr2(rep: SleepReport, desc: str, templates=None) -> str:
    """Suggestion prompt: full report text plus the assessment narrative."""
    return render_named(
        "Pr2", templates=templates, report=rep.rendered_text, description=desc
    )


def render_pr3(
    rep: SleepReport,
    n_questions: int,
    dialogue: DialogueState,
    templates=None,
) -> tuple[str, DialogueState]:
    """Question-generation prompt, threaded through the running dialogue.

    Returns the rendered prompt and the dialogue with it appended as the
    next user turn; earlier reports' turns stay in context within budget
    to suppress repeated questions across reports.
    """
    if n_questions < 1:
        raise ValueError("n_questions must be at least 1")
    prompt = render_named(
        "Pr3",
        templates=templates,
        question_count=n_questions,
        report=rep.rendered_text,
    )
    return prompt, dialogue.append("user", prompt)


def render_fewshot_cot(rep: SleepReport, question: str, templates=None) -> str:
    """Few-shot CoT answer prompt: directive, three worked examples, the
    report, and the user question last."""
    if not question.strip():
        raise ValueError("question must be nonempty")
    return render_named(
        "FewShotCoT",
        templates=templates,
        report=rep.rendered_text,
        question=question,
    )


def render_variant(
    template_id: str, report_text: str, question: str, templates=None
) -> str:
    """Render one of the ablation variants (PlainQA, CoTOnly, FewShotCoT)."""
    if template_id not in ABLATION_VARIANTS:
        raise ValueError(f"unknown variant {template_id!r}; expected one of {ABLATION_VARIANTS}")
    return render_named(
        template_id, templates=templates, report=report_text, question=question
    )


_QUESTION_LINE_RE = re.compile(r"^Question\s+(\d+):\s*(.+?)\s*$")


def parse_question_lines(text: str) -> tuple[list[str], int]:
    """Extract "Question N: ..." lines; returns (questions, dropped_count)
    where dropped counts nonconforming nonempty lines."""
    questions: list[str] = []
    dropped = 0
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _QUESTION_LINE_RE.match(line)
        if m:
            questions.append(m.group(2))
        else:
            dropped += 1
    return questions, dropped

"""Scoring: LLM-judge rubric scoring, exact match, aggregation, ablation.

The judge prompt embeds the four dimension definitions and demands a
strict machine-readable score block; anything unparseable gets exactly
one re-ask with a format reminder before the item errors. Aggregates
keep full precision; display rounding (one decimal, half away from zero)
is a formatting concern only, and rows whose externally printed average
cannot be explained by that rounding are flagged rather than matched.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .gateway import ChatClient, FinishReason
from .prompts import ABLATION_VARIANTS, default_templates, render_named, render_variant

DIMENSIONS = ("personalization", "relevance", "completeness", "accuracy")
# The first dimension also circulates under the spelling "Penalization";
# tables print both.
DIMENSION_TITLES = {
    "personalization": "Personalization (Penalization)",
    "relevance": "Relevance",
    "completeness": "Completeness",
    "accuracy": "Accuracy",
}


class JudgeParseFailureError(RuntimeError):
    pass


class EmptyInputError(ValueError):
    pass


class AblationAbortedError(RuntimeError):
    pass


@dataclass(frozen=True)
class JudgeScorecard:
    item_id: str
    personalization: int
    relevance: int
    completeness: int
    accuracy: int
    judge_rationale: str = ""
    judge_backend: str = ""

    def __post_init__(self):
        for dim in DIMENSIONS:
            v = getattr(self, dim)
            if v not in (1, 2, 3, 4, 5):
                raise ValueError(f"{dim} score {v!r} outside 1..5")

    def scores(self) -> dict[str, int]:
        return {dim: getattr(self, dim) for dim in DIMENSIONS}


@dataclass(frozen=True)
class AggregateRow:
    system_name: str
    dimension_means: dict[str, float]
    overall_mean: float
    n_items: int

    def display_overall(self) -> str:
        return display_round(self.overall_mean)


@dataclass(frozen=True)
class EmResult:
    n: int
    matches: int

    @property
    def em(self) -> float:
        return self.matches / self.n if self.n else 0.0


_SCORE_RE = {
    dim: re.compile(rf"^{dim}\s*=\s*(-?\d+)\s*$", re.MULTILINE) for dim in DIMENSIONS
}
_RATIONALE_RE = re.compile(r"^rationale:\s*(.+)$", re.MULTILINE)


def _parse_score_block(text: str) -> tuple[dict[str, int], str]:
    scores: dict[str, int] = {}
    for dim, pattern in _SCORE_RE.items():
        m = pattern.search(text)
        if not m:
            raise JudgeParseFailureError(f"missing {dim}= line in judge output")
        value = int(m.group(1))
        if value not in (1, 2, 3, 4, 5):
            raise JudgeParseFailureError(f"{dim} score {value} outside 1..5")
        scores[dim] = value
    m = _RATIONALE_RE.search(text)
    return scores, (m.group(1).strip() if m else "")


def score_response(
    report_text: str,
    question: str,
    answer: str,
    judge: ChatClient,
    item_id: str = "",
    templates=None,
) -> JudgeScorecard:
    """Judge one answer on the four dimensions.

    Scores are parsed from the strict block the rubric demands; no score
    is ever imputed. One re-ask with a format reminder, then
    JudgeParseFailureError.
    """
    prompt = render_named(
        "JudgeRubric",
        templates=templates,
        report=report_text,
        question=question,
        answer=answer,
    )
    resp = judge.ask(prompt, tag=f"judge:{item_id}")
    if resp.finish_reason is FinishReason.ERROR:
        raise JudgeParseFailureError(f"judge backend error: {resp.error}")
    try:
        scores, rationale = _parse_score_block(resp.content)
    except JudgeParseFailureError:
        reminder = render_named("JudgeFormatReminder", templates=templates)
        retry = judge.ask(
            reminder,
            history=(("user", prompt), ("assistant", resp.content)),
            tag=f"judge-retry:{item_id}",
        )
        if retry.finish_reason is FinishReason.ERROR:
            raise JudgeParseFailureError(f"judge backend error on retry: {retry.error}")
        scores, rationale = _parse_score_block(retry.content)
    return JudgeScorecard(
        item_id=item_id,
        judge_rationale=rationale,
        judge_backend=judge.backend_id,
        **scores,
    )


def aggregate(cards: list[JudgeScorecard], system_name: str) -> AggregateRow:
    """Per-dimension arithmetic means plus the mean of those four means."""
    if not cards:
        raise EmptyInputError("cannot aggregate zero scorecards")
    dim_means = {
        dim: sum(getattr(c, dim) for c in cards) / len(cards) for dim in DIMENSIONS
    }
    overall = sum(dim_means.values()) / len(DIMENSIONS)
    return AggregateRow(
        system_name=system_name,
        dimension_means=dim_means,
        overall_mean=overall,
        n_items=len(cards),
    )


def row_from_dimension_means(
    system_name: str, means: dict[str, float], n_items: int = 0
) -> AggregateRow:
    """Build a row from already-averaged dimension values (for checking
    externally reported tables)."""
    missing = [d for d in DIMENSIONS if d not in means]
    if missing:
        raise ValueError(f"missing dimensions: {missing}")
    dim_means = {d: float(means[d]) for d in DIMENSIONS}
    return AggregateRow(
        system_name=system_name,
        dimension_means=dim_means,
        overall_mean=sum(dim_means.values()) / len(DIMENSIONS),
        n_items=n_items,
    )


def display_round(value: float) -> str:
    """One decimal, ties away from zero; full precision stays in the row."""
    return str(Decimal(repr(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def printed_average_unexplained(row: AggregateRow, printed: float) -> bool:
    """True when a reported average matches neither the full-precision mean
    nor its display rounding, i.e. rounding cannot explain the figure."""
    if abs(row.overall_mean - printed) < 1e-9:
        return False
    return display_round(row.overall_mean) != display_round(printed)


def format_table(rows: list[AggregateRow], printed: dict[str, float] | None = None) -> str:
    headers = ["System"] + [DIMENSION_TITLES[d] for d in DIMENSIONS] + ["Average"]
    lines = [" | ".join(headers)]
    for row in rows:
        cells = [row.system_name]
        cells += [f"{row.dimension_means[d]:.3f}" for d in DIMENSIONS]
        avg = f"{row.overall_mean:.3f} (displays {row.display_overall()})"
        if printed and row.system_name in printed:
            if printed_average_unexplained(row, printed[row.system_name]):
                avg += f" [FLAG: printed {printed[row.system_name]} unexplained by rounding]"
        cells.append(avg)
        lines.append(" | ".join(cells))
    return "\n".join(lines)


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b", re.IGNORECASE)
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return re.sub(r"\s+", " ", text).strip()


def exact_match(pred: str, gold: str) -> int:
    return int(normalize_answer(pred) == normalize_answer(gold))


def em_score(pairs: list[tuple[str, str]]) -> EmResult:
    matches = sum(exact_match(pred, gold) for pred, gold in pairs)
    return EmResult(n=len(pairs), matches=matches)


def load_qa_pairs(path: str | Path) -> list[tuple[str, str]]:
    """Question/answer pairs from either accepted shape.

    JSON: a list of objects with "question" and "answer" keys.
    Delimited text: one pair per line, question TAB answer.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        data = json.loads(text)
        return [(str(row["question"]), str(row["answer"])) for row in data]
    pairs = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{i + 1}: expected question<TAB>answer")
        q, a = line.split("\t", 1)
        pairs.append((q.strip(), a.strip()))
    return pairs


@dataclass(frozen=True)
class EvalItem:
    item_id: str
    report_text: str
    question: str


def answer_items(
    items: list[EvalItem],
    variant: str,
    student: ChatClient,
    templates=None,
) -> list[tuple[EvalItem, str | None]]:
    """Render the variant prompt per item and collect student answers;
    a failed item carries None."""
    out = []
    for item in items:
        prompt = render_variant(variant, item.report_text, item.question, templates)
        try:
            answer = student.ask_text(prompt, tag=f"student:{variant}:{item.item_id}")
        except Exception:
            answer = None
        out.append((item, answer))
    return out


def run_ablation(
    testset: list[EvalItem],
    variants: list[str],
    student: ChatClient,
    judge: ChatClient,
    templates=None,
    max_failure_ratio: float = 0.10,
) -> list[AggregateRow]:
    """Prompt-variant ablation: answer with the student, score with the
    judge, aggregate per variant in input order.

    A variant whose per-item failures exceed max_failure_ratio aborts
    with a report instead of returning a misleading row.
    """
    if not testset:
        raise EmptyInputError("testset is empty")
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; expected subset of {ABLATION_VARIANTS}")
    rows = []
    for variant in variants:
        cards: list[JudgeScorecard] = []
        failures: list[str] = []
        for item, answer in answer_items(testset, variant, student, templates):
            if answer is None:
                failures.append(f"{item.item_id}: student failed")
                continue
            try:
                cards.append(
                    score_response(
                        item.report_text,
                        item.question,
                        answer,
                        judge,
                        item_id=f"{variant}:{item.item_id}",
                        templates=templates,
                    )
                )
            except JudgeParseFailureError as exc:
                failures.append(f"{item.item_id}: {exc}")
        if len(failures) > max_failure_ratio * len(testset):
            raise AblationAbortedError(
                f"variant {variant}: {len(failures)}/{len(testset)} items failed: "
                + "; ".join(failures[:5])
            )
        rows.append(aggregate(cards, variant))
    return rows


def persist_eval(
    run_id: str,
    cards: list[JudgeScorecard],
    summary: dict,
    out_dir: str | Path,
) -> Path:
    """Write eval/{run_id}/scorecards.jsonl and summary.json."""
    run_dir = Path(out_dir) / "eval" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for card in cards:
        lines.append(
            json.dumps(
                {
                    "item_id": card.item_id,
                    **card.scores(),
                    "rationale": card.judge_rationale,
                    "judge_backend": card.judge_backend,
                },
                ensure_ascii=False,
                sort_keys=True,
            )
        )
    (run_dir / "scorecards.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8"
    )
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return run_dir

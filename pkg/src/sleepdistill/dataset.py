"""Instruction-corpus assembly: splits, sweeps, dedup, and file emission.

Splitting happens at the report level so a report's context never leaks
between train and test; a post-build audit enforces that. Sweep plans
vary only the personal-QA train count and draw from one fixed shuffle,
which makes consecutive sweep train sets nested by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import string
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .reports import SleepReport


class InsufficientPoolError(ValueError):
    pass


class LeakageDetectedError(RuntimeError):
    """Internal audit failure; must be impossible by construction."""


class TaskType(str, Enum):
    SUGGESTION = "suggestion_generation"
    PERSONAL_QA = "personal_qa"
    KNOWLEDGE_QA = "knowledge_qa"


@dataclass(frozen=True)
class Provenance:
    generator: str = ""
    template_id: str = ""
    timestamp: str = ""


@dataclass(frozen=True)
class InstructionRecord:
    record_id: str
    task_type: TaskType
    instruction: str
    input: str
    output: str
    source_report_id: str | None = None
    provenance: Provenance = Provenance()

    def __post_init__(self):
        if not self.instruction:
            raise ValueError(f"record {self.record_id}: instruction must be nonempty")
        if not self.output:
            raise ValueError(f"record {self.record_id}: output must be nonempty")
        if self.task_type in (TaskType.SUGGESTION, TaskType.PERSONAL_QA):
            if not self.source_report_id:
                raise ValueError(
                    f"record {self.record_id}: {self.task_type.value} records "
                    "must carry a source_report_id"
                )


@dataclass(frozen=True)
class HoldoutSpec:
    """A named held-out set drawn from pool records with a matching
    provenance generator tag; those records never enter train or test."""

    name: str
    task_type: TaskType
    count: int
    generator_tag: str


@dataclass(frozen=True)
class SplitPlan:
    suggestions_train: int = 80
    suggestions_test: int = 20
    personal_train: int = 12000
    personal_test: int = 3000
    knowledge_train: int = 600
    knowledge_test: int = 200
    holdouts: tuple[HoldoutSpec, ...] = ()
    seed: int = 0
    # How many reports go to the test side; defaults to suggestions_test
    # (one suggestion per report).
    test_report_count: int | None = None

    def __post_init__(self):
        for name in (
            "suggestions_train",
            "suggestions_test",
            "personal_train",
            "personal_test",
            "knowledge_train",
            "knowledge_test",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def resolved_test_reports(self) -> int:
        return (
            self.test_report_count
            if self.test_report_count is not None
            else self.suggestions_test
        )


def reference_plan(seed: int = 0) -> SplitPlan:
    """The published composition: 80/12000/600 train, 20/3000/200 test,
    plus a 100-question externally generated personal holdout."""
    return SplitPlan(
        suggestions_train=80,
        suggestions_test=20,
        personal_train=12000,
        personal_test=3000,
        knowledge_train=600,
        knowledge_test=200,
        holdouts=(
            HoldoutSpec(
                name="external_personal",
                task_type=TaskType.PERSONAL_QA,
                count=100,
                generator_tag="external",
            ),
        ),
        seed=seed,
    )


@dataclass
class CorpusSplits:
    train: list[InstructionRecord]
    test: list[InstructionRecord]
    holdouts: dict[str, list[InstructionRecord]]
    surviving_pool_sizes: dict[str, int] = field(default_factory=dict)


def _check_unique_ids(*groups: list[InstructionRecord]) -> None:
    seen: set[str] = set()
    for group in groups:
        for rec in group:
            if rec.record_id in seen:
                raise ValueError(f"duplicate record_id {rec.record_id!r}")
            seen.add(rec.record_id)


def _shuffled(items: list, seed_material: str) -> list:
    digest = hashlib.sha256(seed_material.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def build_corpus(
    reports: list[SleepReport],
    suggestions: list[InstructionRecord],
    personal_qa_pool: list[InstructionRecord],
    knowledge_qa_pool: list[InstructionRecord],
    plan: SplitPlan,
) -> CorpusSplits:
    """Assemble train/test/holdout splits with exact counts.

    Report-linked records follow their report's side of a seeded
    report-level split; knowledge records split independently. Holdout
    records are extracted first by generator tag and never enter the
    other splits. Deterministic in plan.seed.
    """
    _check_unique_ids(suggestions, personal_qa_pool, knowledge_qa_pool)
    for rec in suggestions:
        if rec.task_type is not TaskType.SUGGESTION:
            raise ValueError(f"record {rec.record_id} in suggestions pool is {rec.task_type}")
    for rec in personal_qa_pool:
        if rec.task_type is not TaskType.PERSONAL_QA:
            raise ValueError(f"record {rec.record_id} in personal pool is {rec.task_type}")
    for rec in knowledge_qa_pool:
        if rec.task_type is not TaskType.KNOWLEDGE_QA:
            raise ValueError(f"record {rec.record_id} in knowledge pool is {rec.task_type}")

    pools = {
        TaskType.SUGGESTION: list(suggestions),
        TaskType.PERSONAL_QA: list(personal_qa_pool),
        TaskType.KNOWLEDGE_QA: list(knowledge_qa_pool),
    }

    holdouts: dict[str, list[InstructionRecord]] = {}
    for spec in plan.holdouts:
        pool = pools[spec.task_type]
        tagged = [r for r in pool if r.provenance.generator == spec.generator_tag]
        if len(tagged) < spec.count:
            raise InsufficientPoolError(
                f"holdout {spec.name!r} needs {spec.count} records tagged "
                f"{spec.generator_tag!r}, pool has {len(tagged)}"
            )
        chosen = _shuffled(tagged, f"{plan.seed}:holdout:{spec.name}")[: spec.count]
        chosen_ids = {r.record_id for r in chosen}
        tagged_ids = {r.record_id for r in tagged}
        holdouts[spec.name] = sorted(chosen, key=lambda r: r.record_id)
        # All tagged records leave the pool, picked or not.
        pools[spec.task_type] = [r for r in pool if r.record_id not in tagged_ids]
        del chosen_ids

    report_ids = sorted({rep.report_id for rep in reports})
    n_test_reports = plan.resolved_test_reports()
    if n_test_reports > len(report_ids):
        raise InsufficientPoolError(
            f"plan needs {n_test_reports} test reports, corpus has {len(report_ids)}"
        )
    shuffled_reports = _shuffled(report_ids, f"{plan.seed}:reports")
    test_reports = set(shuffled_reports[:n_test_reports])
    train_reports = set(shuffled_reports[n_test_reports:])

    def take(records, count, label, side_key):
        if len(records) < count:
            raise InsufficientPoolError(
                f"{label} needs {count} records, only {len(records)} available"
            )
        return _shuffled(records, f"{plan.seed}:{side_key}")[:count]

    train: list[InstructionRecord] = []
    test: list[InstructionRecord] = []

    for task, train_n, test_n in (
        (TaskType.SUGGESTION, plan.suggestions_train, plan.suggestions_test),
        (TaskType.PERSONAL_QA, plan.personal_train, plan.personal_test),
    ):
        pool = pools[task]
        train_side = [r for r in pool if r.source_report_id in train_reports]
        test_side = [r for r in pool if r.source_report_id in test_reports]
        orphans = [
            r
            for r in pool
            if r.source_report_id not in train_reports
            and r.source_report_id not in test_reports
        ]
        if orphans:
            raise InsufficientPoolError(
                f"{task.value}: {len(orphans)} records reference unknown reports "
                f"(first: {orphans[0].source_report_id!r})"
            )
        train.extend(take(train_side, train_n, f"{task.value} train", f"{task.value}:train"))
        test.extend(take(test_side, test_n, f"{task.value} test", f"{task.value}:test"))

    knowledge = _shuffled(pools[TaskType.KNOWLEDGE_QA], f"{plan.seed}:knowledge")
    need = plan.knowledge_train + plan.knowledge_test
    if len(knowledge) < need:
        raise InsufficientPoolError(
            f"knowledge pool needs {need} records, has {len(knowledge)}"
        )
    train.extend(knowledge[: plan.knowledge_train])
    test.extend(knowledge[plan.knowledge_train : need])

    splits = CorpusSplits(
        train=train,
        test=test,
        holdouts=holdouts,
        surviving_pool_sizes={t.value: len(p) for t, p in pools.items()},
    )
    audit_leakage(splits, test_reports)
    return splits


def audit_leakage(splits: CorpusSplits, test_report_ids: set[str]) -> None:
    """Assert no train record comes from (or contains context of) a test report."""
    test_contexts = {
        rec.input
        for rec in splits.test
        if rec.source_report_id in test_report_ids and rec.input
    }
    for rec in splits.train:
        if rec.source_report_id in test_report_ids:
            raise LeakageDetectedError(
                f"train record {rec.record_id} sourced from test report "
                f"{rec.source_report_id}"
            )
        for ctx in test_contexts:
            if ctx and ctx in rec.input:
                raise LeakageDetectedError(
                    f"train record {rec.record_id} embeds a test report context"
                )


def sweep_plans(base: SplitPlan, personal_counts: list[int]) -> list[SplitPlan]:
    """One plan per personal-QA train count, everything else fixed at base.

    All plans share base.seed, so build_corpus selects each train set as
    a prefix of the same shuffled order: smaller counts are subsets of
    larger ones.
    """
    plans = []
    for count in personal_counts:
        if count < 0:
            raise ValueError("personal counts must be nonnegative")
        plans.append(replace(base, personal_train=count))
    return plans


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def _normalize_instruction(text: str) -> str:
    text = text.lower().translate(_PUNCT_TABLE)
    return re.sub(r"\s+", " ", text).strip()


def dedupe(records: list[InstructionRecord]) -> tuple[list[InstructionRecord], int]:
    """Drop records whose normalized instruction repeats an earlier record
    for the same source report; order is preserved."""
    seen: set[tuple[str | None, str]] = set()
    kept: list[InstructionRecord] = []
    dropped = 0
    for rec in records:
        key = (rec.source_report_id, _normalize_instruction(rec.instruction))
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        kept.append(rec)
    return kept, dropped


@dataclass(frozen=True)
class TrainingHyperparams:
    lr: str = "1.0e-5"
    batch_size: int = 1
    lora_rank: int = 8
    epochs: int = 10

    def render(self) -> str:
        return (
            f"lr={self.lr}\n"
            f"batch_size={self.batch_size}\n"
            f"lora_rank={self.lora_rank}\n"
            f"epochs={self.epochs}\n"
        )


def _record_line(rec: InstructionRecord) -> str:
    return json.dumps(
        {
            "id": rec.record_id,
            "task": rec.task_type.value,
            "instruction": rec.instruction,
            "input": rec.input,
            "output": rec.output,
        },
        ensure_ascii=False,
        sort_keys=True,
    )


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + f".tmp-{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_jsonl(records: list[InstructionRecord], path: Path) -> str:
    body = "".join(_record_line(rec) + "\n" for rec in records)
    _atomic_write(path, body)
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def emit_artifacts(
    splits: CorpusSplits,
    out_dir: str | Path,
    hyperparams: TrainingHyperparams | None = None,
    extra_manifest: dict | None = None,
) -> dict:
    """Write train/test/holdout JSONL files, the manifest, and train_config.

    The manifest records counts and content hashes; counts are verified
    against actual line counts on re-read before returning.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hp = hyperparams if hyperparams is not None else TrainingHyperparams()

    hashes = {"train.jsonl": write_jsonl(splits.train, out / "train.jsonl")}
    hashes["test.jsonl"] = write_jsonl(splits.test, out / "test.jsonl")
    counts = {"train": len(splits.train), "test": len(splits.test)}
    for name, records in sorted(splits.holdouts.items()):
        filename = f"holdout_{name}.jsonl"
        hashes[filename] = write_jsonl(records, out / filename)
        counts[f"holdout_{name}"] = len(records)

    _atomic_write(out / "train_config", hp.render())

    def task_counts(records):
        out_counts: dict[str, int] = {}
        for rec in records:
            out_counts[rec.task_type.value] = out_counts.get(rec.task_type.value, 0) + 1
        return out_counts

    manifest = {
        "counts": counts,
        "task_counts": {
            "train": task_counts(splits.train),
            "test": task_counts(splits.test),
        },
        "sha256": hashes,
        "surviving_pool_sizes": splits.surviving_pool_sizes,
        "train_config": {
            "lr": hp.lr,
            "batch_size": hp.batch_size,
            "lora_rank": hp.lora_rank,
            "epochs": hp.epochs,
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    for filename, expected in (
        ("train.jsonl", counts["train"]),
        ("test.jsonl", counts["test"]),
    ):
        actual = len(read_jsonl(out / filename))
        if actual != expected:
            raise OSError(
                f"{filename}: wrote {expected} records but re-read {actual}"
            )
    return manifest

"""Pipeline orchestration as subcommands over one declarative config.

All randomness flows from a single top-level seed through named
sub-streams, so re-running any stage with the same config, seed, and
cache reproduces byte-identical outputs. Logs go to stderr; data goes to
files under the run's output directory.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import dataset as dataset_mod
from . import judge as judge_mod
from .assess import assess as assess_report
from .assess import load_thresholds, render_description
from .dataset import (
    HoldoutSpec,
    InstructionRecord,
    Provenance,
    SplitPlan,
    TaskType,
)
from .gateway import (
    ChatClient,
    Gateway,
    GatewayError,
    HttpBackend,
    MockBackend,
    TripwireBackend,
)
from .prompts import (
    DialogueState,
    default_templates,
    load_templates,
    parse_question_lines,
    render_fewshot_cot,
    render_pr2,
    render_pr3,
)
from .reports import (
    RuleConflictError,
    generate_report,
    load_corpus,
    load_rule_set,
    sample_profiles,
    save_report,
    validate_report,
)

log = logging.getLogger("sleepdistill")

SUGGESTION_INSTRUCTION = (
    "Please generate personalized recommendations based on the following sleep report."
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: Path = Path("runs/default")
    parallelism: int = 4
    rules_path: str | None = None
    templates_dir: str | None = None
    reports_count: int = 100
    questions_per_report: int = 150
    temperature_synthesis: float = 1.0
    temperature_judging: float = 0.0
    dialogue_budget: int = 8192
    backends: dict[str, dict] = field(default_factory=dict)
    split: SplitPlan = field(default_factory=dataset_mod.reference_plan)

    def templates(self):
        if self.templates_dir is None:
            return default_templates()
        return load_templates(self.templates_dir)


_DEFAULT_BACKENDS = {
    "teacher": {"kind": "mock"},
    "student": {"kind": "mock"},
    "judge": {"kind": "mock"},
}


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig(backends=dict(_DEFAULT_BACKENDS))
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if parser.has_section("run"):
        run = parser["run"]
        cfg.seed = run.getint("seed", cfg.seed)
        cfg.out_dir = Path(run.get("out", str(cfg.out_dir)))
        cfg.parallelism = run.getint("parallelism", cfg.parallelism)
        cfg.temperature_synthesis = run.getfloat(
            "temperature_synthesis", cfg.temperature_synthesis
        )
        cfg.temperature_judging = run.getfloat(
            "temperature_judging", cfg.temperature_judging
        )
        cfg.dialogue_budget = run.getint("dialogue_budget", cfg.dialogue_budget)
    if parser.has_section("paths"):
        paths = parser["paths"]
        cfg.rules_path = paths.get("rules", cfg.rules_path)
        cfg.templates_dir = paths.get("templates", cfg.templates_dir)
        for name, value in (("rules", cfg.rules_path), ("templates", cfg.templates_dir)):
            if value is not None and not Path(value).exists():
                raise ConfigError(f"[paths] {name} does not exist: {value}")
    if parser.has_section("counts"):
        counts = parser["counts"]
        cfg.reports_count = counts.getint("reports", cfg.reports_count)
        cfg.questions_per_report = counts.getint(
            "questions_per_report", cfg.questions_per_report
        )
    if parser.has_section("split"):
        sp = parser["split"]
        base = dataset_mod.reference_plan()
        holdout_n = sp.getint("holdout_external", 100)
        holdouts = (
            (
                HoldoutSpec(
                    name="external_personal",
                    task_type=TaskType.PERSONAL_QA,
                    count=holdout_n,
                    generator_tag="external",
                ),
            )
            if holdout_n > 0
            else ()
        )
        cfg.split = SplitPlan(
            suggestions_train=sp.getint("suggestions_train", base.suggestions_train),
            suggestions_test=sp.getint("suggestions_test", base.suggestions_test),
            personal_train=sp.getint("personal_train", base.personal_train),
            personal_test=sp.getint("personal_test", base.personal_test),
            knowledge_train=sp.getint("knowledge_train", base.knowledge_train),
            knowledge_test=sp.getint("knowledge_test", base.knowledge_test),
            holdouts=holdouts,
        )
    for section in parser.sections():
        if section.startswith("backend."):
            backend_id = section.split(".", 1)[1]
            cfg.backends[backend_id] = dict(parser[section])
    return cfg


def stage_seed(seed: int, stream: str) -> int:
    """Named sub-stream of the top-level seed; adding a stage never
    perturbs another stage's draws."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_gateway(cfg: RunConfig, no_cache: bool = False) -> Gateway:
    backends = {}
    for backend_id, spec in cfg.backends.items():
        kind = spec.get("kind", "mock")
        if kind == "mock":
            responses = spec.get("responses")
            backends[backend_id] = (
                MockBackend.from_file(responses) if responses else MockBackend()
            )
        elif kind == "http":
            if "base_url" not in spec:
                raise ConfigError(f"backend {backend_id!r}: http kind needs base_url")
            backends[backend_id] = HttpBackend(
                base_url=spec["base_url"],
                auth_env_var=spec.get("auth_env_var", ""),
                timeout_s=float(spec.get("timeout_s", 60.0)),
            )
        elif kind == "tripwire":
            backends[backend_id] = TripwireBackend()
        else:
            raise ConfigError(f"backend {backend_id!r}: unknown kind {kind!r}")
    return Gateway(backends, cache_dir=cfg.out_dir / "cache", no_cache=no_cache)


def make_client(cfg: RunConfig, gw: Gateway, backend_id: str, temperature: float) -> ChatClient:
    if backend_id not in cfg.backends:
        raise ConfigError(f"backend {backend_id!r} not configured")
    model = cfg.backends[backend_id].get("model", backend_id)
    return ChatClient(
        gateway=gw, backend_id=backend_id, model_name=model, temperature=temperature
    )


def cmd_synth(cfg: RunConfig, args) -> int:
    rule_set = load_rule_set(cfg.rules_path)
    profiles = sample_profiles(args.count, stage_seed(cfg.seed, "reports"))
    reports = [
        generate_report(p, rule_set, report_id=f"rpt-{i:04d}")
        for i, p in enumerate(profiles)
    ]
    bad = [(r.report_id, validate_report(r, rule_set)) for r in reports]
    bad = [(rid, v) for rid, v in bad if v]
    if bad:
        raise RuleConflictError(f"generated reports failed validation: {bad[:3]}")
    out = cfg.out_dir / "reports"
    if args.dry_run:
        print(f"DRY-RUN: would write {len(reports)} reports plus manifest to {out}")
        return 0
    hashes = {}
    for rep in reports:
        save_report(rep, out)
        blob = (out / f"{rep.report_id}.json").read_bytes() + rep.rendered_text.encode()
        hashes[rep.report_id] = hashlib.sha256(blob).hexdigest()
    manifest = {
        "count": len(reports),
        "seed": cfg.seed,
        "report_ids": [r.report_id for r in reports],
        "sha256": hashes,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.info("wrote %d reports to %s", len(reports), out)
    return 0


def cmd_assess(cfg: RunConfig, args) -> int:
    reports = load_corpus(cfg.out_dir / "reports")
    if not reports:
        raise ConfigError(f"no reports found under {cfg.out_dir / 'reports'}")
    thresholds = load_thresholds(cfg.rules_path)
    out = cfg.out_dir / "assessments"
    if args.dry_run:
        print(f"DRY-RUN: would assess {len(reports)} reports into {out}")
        return 0
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        a = assess_report(rep, thresholds)
        (out / f"{rep.report_id}.json").write_text(a.to_json() + "\n", encoding="utf-8")
        (out / f"{rep.report_id}.txt").write_text(
            render_description(a, rep), encoding="utf-8"
        )
    log.info("wrote %d assessments to %s", len(reports), out)
    return 0


def _pool_dict(rec: InstructionRecord) -> dict:
    return {
        "id": rec.record_id,
        "task": rec.task_type.value,
        "instruction": rec.instruction,
        "input": rec.input,
        "output": rec.output,
        "source_report_id": rec.source_report_id,
        "generator": rec.provenance.generator,
        "template_id": rec.provenance.template_id,
    }


def _pool_record(row: dict) -> InstructionRecord:
    return InstructionRecord(
        record_id=row["id"],
        task_type=TaskType(row["task"]),
        instruction=row["instruction"],
        input=row.get("input", ""),
        output=row["output"],
        source_report_id=row.get("source_report_id"),
        provenance=Provenance(
            generator=row.get("generator", ""),
            template_id=row.get("template_id", ""),
        ),
    )


def _write_pool(records: list[InstructionRecord], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = "".join(
        json.dumps(_pool_dict(r), ensure_ascii=False, sort_keys=True) + "\n"
        for r in records
    )
    path.write_text(body, encoding="utf-8")


def _read_pool(path: Path) -> list[InstructionRecord]:
    return [_pool_record(row) for row in dataset_mod.read_jsonl(path)]


def cmd_suggest(cfg: RunConfig, args) -> int:
    reports = load_corpus(cfg.out_dir / "reports")
    if not reports:
        raise ConfigError(f"no reports found under {cfg.out_dir / 'reports'}")
    thresholds = load_thresholds(cfg.rules_path)
    templates = cfg.templates()
    gw = make_gateway(cfg, no_cache=args.no_cache)
    client = make_client(cfg, gw, args.backend, cfg.temperature_synthesis)
    if args.dry_run:
        print(
            f"DRY-RUN: would request {len(reports)} suggestions via backend "
            f"{args.backend!r} into {cfg.out_dir / 'suggestions.jsonl'}"
        )
        return 0
    records = []
    for rep in reports:
        desc = render_description(assess_report(rep, thresholds), rep)
        prompt = render_pr2(rep, desc, templates=templates)
        output = client.ask_text(prompt, tag=f"suggest:{rep.report_id}")
        records.append(
            InstructionRecord(
                record_id=f"sug-{rep.report_id}",
                task_type=TaskType.SUGGESTION,
                instruction=SUGGESTION_INSTRUCTION,
                input=rep.rendered_text + "\n\n" + desc,
                output=output,
                source_report_id=rep.report_id,
                provenance=Provenance(generator=args.backend, template_id="Pr2"),
            )
        )
    _write_pool(records, cfg.out_dir / "suggestions.jsonl")
    log.info("wrote %d suggestion records", len(records))
    return 0


def cmd_questions(cfg: RunConfig, args) -> int:
    reports = load_corpus(cfg.out_dir / "reports")
    if not reports:
        raise ConfigError(f"no reports found under {cfg.out_dir / 'reports'}")
    templates = cfg.templates()
    gw = make_gateway(cfg, no_cache=args.no_cache)
    client = make_client(cfg, gw, args.backend, cfg.temperature_synthesis)
    out_path = cfg.out_dir / args.out_file
    if args.dry_run:
        print(
            f"DRY-RUN: would generate {args.per_report} questions per report for "
            f"{len(reports)} reports via backend {args.backend!r} into {out_path}"
        )
        return 0
    generator_tag = args.tag or args.backend
    dialogue = DialogueState(token_budget=cfg.dialogue_budget)
    records: list[InstructionRecord] = []
    nonconforming = 0
    for rep in reports:
        _, dialogue = render_pr3(rep, args.per_report, dialogue, templates=templates)
        resp = client.send_messages(dialogue.turns, tag=f"questions:{rep.report_id}")
        if resp.error:
            raise GatewayError(f"question generation failed for {rep.report_id}: {resp.error}")
        dialogue = dialogue.append("assistant", resp.content)
        questions, dropped = parse_question_lines(resp.content)
        nonconforming += dropped
        answers = gw.map_bounded(
            [
                client.request_for(
                    render_fewshot_cot(rep, q, templates=templates),
                    tag=f"answer:{rep.report_id}:{k}",
                )
                for k, q in enumerate(questions)
            ],
            parallelism=cfg.parallelism,
        )
        for k, (question, answer) in enumerate(zip(questions, answers)):
            if answer.error or not answer.content:
                log.warning("answer failed for %s question %d", rep.report_id, k)
                continue
            records.append(
                InstructionRecord(
                    record_id=f"q-{rep.report_id}-{k:04d}",
                    task_type=TaskType.PERSONAL_QA,
                    instruction=question,
                    input=rep.rendered_text,
                    output=answer.content,
                    source_report_id=rep.report_id,
                    provenance=Provenance(generator=generator_tag, template_id="Pr3"),
                )
            )
    records, duplicates = dataset_mod.dedupe(records)
    _write_pool(records, out_path)
    log.info(
        "wrote %d question records (%d nonconforming lines, %d duplicates dropped)",
        len(records),
        nonconforming,
        duplicates,
    )
    return 0


def _load_knowledge_pool(path: str) -> list[InstructionRecord]:
    pairs = judge_mod.load_qa_pairs(path)
    return [
        InstructionRecord(
            record_id=f"k-{i:05d}",
            task_type=TaskType.KNOWLEDGE_QA,
            instruction=q,
            input="",
            output=a,
            provenance=Provenance(generator="knowledge-file"),
        )
        for i, (q, a) in enumerate(pairs)
    ]


def cmd_build_dataset(cfg: RunConfig, args) -> int:
    reports = load_corpus(cfg.out_dir / "reports")
    suggestions = _read_pool(cfg.out_dir / "suggestions.jsonl")
    personal = _read_pool(cfg.out_dir / "questions.jsonl")
    knowledge = _load_knowledge_pool(args.knowledge_file) if args.knowledge_file else []
    if args.holdout_file:
        holdout_pool = _read_pool(Path(args.holdout_file))
        personal = personal + [
            replace(r, provenance=replace(r.provenance, generator="external"))
            if r.provenance.generator != "external"
            else r
            for r in holdout_pool
        ]
    personal, duplicates = dataset_mod.dedupe(personal)
    plan = replace(
        cfg.split,
        seed=stage_seed(cfg.seed, "splits"),
        suggestions_train=args.suggestions
        if args.suggestions is not None
        else cfg.split.suggestions_train,
        personal_train=args.personal_qa
        if args.personal_qa is not None
        else cfg.split.personal_train,
        knowledge_train=args.knowledge_qa
        if args.knowledge_qa is not None
        else cfg.split.knowledge_train,
    )
    if not args.holdout_file:
        plan = replace(plan, holdouts=())
    out = cfg.out_dir / "dataset"
    if args.dry_run:
        print(
            f"DRY-RUN: would build corpus (train {plan.suggestions_train}/"
            f"{plan.personal_train}/{plan.knowledge_train}) into {out}"
        )
        return 0
    splits = dataset_mod.build_corpus(reports, suggestions, personal, knowledge, plan)
    manifest = dataset_mod.emit_artifacts(
        splits, out, extra_manifest={"seed": cfg.seed, "dedupe_dropped": duplicates}
    )
    log.info(
        "dataset: train=%d test=%d holdouts=%s",
        manifest["counts"]["train"],
        manifest["counts"]["test"],
        {k: v for k, v in manifest["counts"].items() if k.startswith("holdout")},
    )
    return 0


def cmd_sweep(cfg: RunConfig, args) -> int:
    counts = [int(c) for c in args.personal_counts.split(",")]
    reports = load_corpus(cfg.out_dir / "reports")
    suggestions = _read_pool(cfg.out_dir / "suggestions.jsonl")
    personal = _read_pool(cfg.out_dir / "questions.jsonl")
    knowledge = _load_knowledge_pool(args.knowledge_file) if args.knowledge_file else []
    personal, _ = dataset_mod.dedupe(personal)
    base = replace(cfg.split, seed=stage_seed(cfg.seed, "splits"), holdouts=())
    plans = dataset_mod.sweep_plans(base, counts)
    out_root = cfg.out_dir / "sweep"
    if args.dry_run:
        print(f"DRY-RUN: would build {len(plans)} sweep datasets under {out_root}")
        return 0
    sweep_manifest = {}
    previous_ids: set[str] | None = None
    for plan in plans:
        splits = dataset_mod.build_corpus(reports, suggestions, personal, knowledge, plan)
        out = out_root / f"personal_{plan.personal_train}"
        manifest = dataset_mod.emit_artifacts(splits, out)
        train_ids = {
            r.record_id
            for r in splits.train
            if r.task_type is TaskType.PERSONAL_QA
        }
        if previous_ids is not None and not previous_ids.issubset(train_ids):
            raise dataset_mod.LeakageDetectedError(
                "sweep nesting broken: smaller plan is not a subset of the larger one"
            )
        previous_ids = train_ids
        sweep_manifest[str(plan.personal_train)] = manifest["sha256"]["train.jsonl"]
    (out_root / "manifest.json").write_text(
        json.dumps(sweep_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.info("wrote %d sweep datasets under %s", len(plans), out_root)
    return 0


def _load_eval_items(path: str, task: str, limit: int | None) -> list[judge_mod.EvalItem]:
    rows = dataset_mod.read_jsonl(path)
    items = [
        judge_mod.EvalItem(
            item_id=row["id"], report_text=row.get("input", ""), question=row["instruction"]
        )
        for row in rows
        if row.get("task") == task
    ]
    return items[:limit] if limit else items


def cmd_evaluate(cfg: RunConfig, args) -> int:
    items = _load_eval_items(args.testset, args.task, args.limit)
    if not items:
        raise ConfigError(f"no {args.task!r} items in {args.testset}")
    templates = cfg.templates()
    gw = make_gateway(cfg, no_cache=args.no_cache)
    student = make_client(cfg, gw, args.student_backend, cfg.temperature_judging)
    judge_client = make_client(cfg, gw, args.judge_backend, cfg.temperature_judging)
    if args.dry_run:
        print(f"DRY-RUN: would evaluate {len(items)} items as run {args.run_id!r}")
        return 0
    cards = []
    failures = []
    for item, answer in judge_mod.answer_items(items, "FewShotCoT", student, templates):
        if answer is None:
            failures.append(item.item_id)
            continue
        try:
            cards.append(
                judge_mod.score_response(
                    item.report_text,
                    item.question,
                    answer,
                    judge_client,
                    item_id=item.item_id,
                    templates=templates,
                )
            )
        except judge_mod.JudgeParseFailureError as exc:
            failures.append(f"{item.item_id}: {exc}")
    if not cards:
        raise ConfigError("every evaluation item failed")
    row = judge_mod.aggregate(cards, args.run_id)
    summary = {
        "run_id": args.run_id,
        "n_items": row.n_items,
        "failures": failures,
        "dimension_means": row.dimension_means,
        "overall_mean": row.overall_mean,
        "overall_display": row.display_overall(),
        "student_backend": args.student_backend,
        "judge_backend": args.judge_backend,
        "template_ids": ["FewShotCoT", "JudgeRubric"],
        "seed": cfg.seed,
    }
    run_dir = judge_mod.persist_eval(args.run_id, cards, summary, cfg.out_dir)
    log.info("evaluation written to %s", run_dir)
    print(judge_mod.format_table([row]))
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    items = _load_eval_items(args.testset, args.task, args.limit)
    if not items:
        raise ConfigError(f"no {args.task!r} items in {args.testset}")
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    templates = cfg.templates()
    gw = make_gateway(cfg, no_cache=args.no_cache)
    student = make_client(cfg, gw, args.student_backend, cfg.temperature_judging)
    judge_client = make_client(cfg, gw, args.judge_backend, cfg.temperature_judging)
    if args.dry_run:
        print(f"DRY-RUN: would run ablation over {variants} on {len(items)} items")
        return 0
    rows = judge_mod.run_ablation(items, variants, student, judge_client, templates)
    out = cfg.out_dir / "ablation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps(
            [
                {
                    "variant": row.system_name,
                    "dimension_means": row.dimension_means,
                    "overall_mean": row.overall_mean,
                    "overall_display": row.display_overall(),
                    "n_items": row.n_items,
                }
                for row in rows
            ],
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(judge_mod.format_table(rows))
    return 0


def cmd_em(cfg: RunConfig, args) -> int:
    gold = judge_mod.load_qa_pairs(args.gold)
    pred_lines = [
        line for line in Path(args.predictions).read_text(encoding="utf-8").splitlines()
    ]
    if len(pred_lines) != len(gold):
        raise ConfigError(
            f"{len(pred_lines)} predictions for {len(gold)} gold answers"
        )
    result = judge_mod.em_score(
        [(pred, answer) for pred, (_, answer) in zip(pred_lines, gold)]
    )
    if args.dry_run:
        print(f"DRY-RUN: would score {result.n} pairs")
        return 0
    out = cfg.out_dir / "em.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps({"n": result.n, "matches": result.matches, "em": result.em}, indent=2)
        + "\n",
        encoding="utf-8",
    )
    print(f"EM: {result.em:.4f} ({result.matches}/{result.n})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sleepdistill",
        description="Synthetic sleep-report pipeline: synthesize, assess, "
        "build instruction datasets, and evaluate with a judge.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="declarative run config (INI format)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--rules", help="override the rules config file")
    common.add_argument("--dry-run", action="store_true", help="print the plan, touch nothing")
    common.add_argument("--no-cache", action="store_true", help="bypass cache reads (still writes)")

    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate the report corpus")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("assess", parents=[common], help="assess every report")
    p.set_defaults(func=cmd_assess)

    p = sub.add_parser("suggest", parents=[common], help="generate suggestions via the teacher")
    p.add_argument("--backend", default="teacher")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("questions", parents=[common], help="generate personal QA via the teacher")
    p.add_argument("--backend", default="teacher")
    p.add_argument("--per-report", type=int, default=None)
    p.add_argument("--tag", default="", help="provenance generator tag for the records")
    p.add_argument("--out-file", default="questions.jsonl")
    p.set_defaults(func=cmd_questions)

    p = sub.add_parser("build-dataset", parents=[common], help="assemble train/test/holdout files")
    p.add_argument("--suggestions", type=int, default=None, help="suggestion train count")
    p.add_argument("--personal-qa", type=int, default=None, help="personal QA train count")
    p.add_argument("--knowledge-qa", type=int, default=None, help="knowledge QA train count")
    p.add_argument("--knowledge-file", help="knowledge QA pairs (JSON list or TSV)")
    p.add_argument("--holdout-file", help="externally generated personal questions (pool JSONL)")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("sweep", parents=[common], help="nested personal-QA count sweep")
    p.add_argument("--personal-counts", default="4000,6000,8000,10000,12000")
    p.add_argument("--knowledge-file", help="knowledge QA pairs (JSON list or TSV)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", parents=[common], help="judge student answers on a testset")
    p.add_argument("--testset", required=True)
    p.add_argument("--run-id", default="run0")
    p.add_argument("--task", default=TaskType.PERSONAL_QA.value)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--student-backend", default="student")
    p.add_argument("--judge-backend", default="judge")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="prompt-variant ablation")
    p.add_argument("--testset", required=True)
    p.add_argument("--variants", default="PlainQA,CoTOnly,FewShotCoT")
    p.add_argument("--task", default=TaskType.PERSONAL_QA.value)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--student-backend", default="student")
    p.add_argument("--judge-backend", default="judge")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("em", parents=[common], help="exact-match scoring")
    p.add_argument("--predictions", required=True, help="one prediction per line")
    p.add_argument("--gold", required=True, help="QA pairs (JSON list or TSV)")
    p.set_defaults(func=cmd_em)

    return parser


def dispatch(argv: list[str]) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = Path(args.out)
        if args.rules is not None:
            if not Path(args.rules).exists():
                raise ConfigError(f"rules file does not exist: {args.rules}")
            cfg.rules_path = args.rules
        if getattr(args, "count", None) is not None:
            cfg.reports_count = args.count
        if getattr(args, "per_report", None) is not None:
            cfg.questions_per_report = args.per_report
        args.count = cfg.reports_count
        args.per_report = cfg.questions_per_report
        return args.func(cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (GatewayError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

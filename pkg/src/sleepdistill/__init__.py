"""Synthetic sleep-report pipeline: HRV synthesis, rule-checked report
generation, deterministic assessment, instruction-dataset assembly, and
LLM-judge evaluation, all runnable offline against a mock backend."""

__version__ = "0.1.0"

from .assess import AssessmentThresholds, SleepAssessment, assess, render_description
from .dataset import (
    InstructionRecord,
    SplitPlan,
    TaskType,
    build_corpus,
    dedupe,
    emit_artifacts,
    sweep_plans,
)
from .gateway import ChatClient, ChatRequest, ChatResponse, Gateway, MockBackend
from .hrv import (
    HrvMetrics,
    MetricTargets,
    RRSeries,
    ReferenceRanges,
    compute_frequency_domain,
    compute_time_domain,
    load_reference_ranges,
    synthesize_rr,
    validate_ranges,
)
from .judge import JudgeScorecard, aggregate, exact_match, run_ablation, score_response
from .prompts import (
    DialogueState,
    render_fewshot_cot,
    render_pr1,
    render_pr2,
    render_pr3,
)
from .reports import (
    PhysioRuleSet,
    SleepProfile,
    SleepReport,
    generate_report,
    llm_generate_reports,
    load_exemplar_report,
    load_rule_set,
    parse_report_text,
    render_report_text,
    sample_profiles,
    validate_report,
)

"""Rule-constrained synthetic sleep reports.

Two generation paths share one contract: a deterministic offline
generator (test default) and an LLM-backed path that renders the
report-production prompt, parses the responses, and validates every
parsed report against the same physiological rule set. Reports render to
a fixed text layout that parses back without numeric loss.
"""

from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .hrv import (
    RangeStatus,
    ReferenceRanges,
    classify_metric,
    load_reference_ranges,
)


class RuleConflictError(ValueError):
    pass


class ReportParseError(ValueError):
    pass


class Archetype(str, Enum):
    HEALTHY_ADULT = "HealthyAdult"
    HIGH_STRESS = "HighStress"
    POOR_SLEEP_HYGIENE = "PoorSleepHygiene"
    APNEA_PRONE = "ApneaProne"
    ELDERLY_LOW_HRV = "ElderlyLowHRV"
    ATHLETE_HIGH_HRV = "AthleteHighHRV"


# Per-archetype windows the target means are drawn from. An artifact
# choice: wide enough that nightly means span several deciles of the
# general ranges across a population, narrow enough that no archetype
# can violate the cross-metric rules below.
ARCHETYPE_TARGETS: dict[Archetype, dict[str, tuple[float, float]]] = {
    Archetype.HEALTHY_ADULT: {
        "sdnn": (45, 65), "rmssd": (30, 46), "lf_hf": (0.8, 1.8),
        "pnn50": (20, 40), "sleep_hours": (7.0, 8.5), "apnea": (0, 4),
    },
    Archetype.HIGH_STRESS: {
        "sdnn": (28, 42), "rmssd": (15, 26), "lf_hf": (2.6, 4.5),
        "pnn50": (4, 12), "sleep_hours": (5.5, 7.0), "apnea": (2, 8),
    },
    Archetype.POOR_SLEEP_HYGIENE: {
        "sdnn": (35, 50), "rmssd": (20, 35), "lf_hf": (1.8, 3.0),
        "pnn50": (8, 20), "sleep_hours": (4.8, 6.2), "apnea": (3, 10),
    },
    Archetype.APNEA_PRONE: {
        "sdnn": (30, 45), "rmssd": (18, 30), "lf_hf": (2.0, 3.5),
        "pnn50": (6, 16), "sleep_hours": (6.0, 7.5), "apnea": (16, 34),
    },
    Archetype.ELDERLY_LOW_HRV: {
        "sdnn": (22, 32), "rmssd": (12, 20), "lf_hf": (1.2, 2.4),
        "pnn50": (2, 8), "sleep_hours": (5.5, 7.5), "apnea": (4, 12),
    },
    Archetype.ATHLETE_HIGH_HRV: {
        "sdnn": (70, 110), "rmssd": (38, 46), "lf_hf": (0.5, 1.2),
        "pnn50": (30, 46), "sleep_hours": (7.5, 9.0), "apnea": (0, 3),
    },
}

_RANGED_METRICS = ("sdnn", "rmssd", "lf_hf", "pnn50")


@dataclass(frozen=True)
class SleepProfile:
    archetype: Archetype
    target_means: dict[str, float]
    nights: int = 6
    seed: int = 0


@dataclass(frozen=True)
class Condition:
    metric: str
    op: str
    value: float

    def holds(self, means: dict[str, float]) -> bool:
        x = means.get(self.metric)
        if x is None:
            return False
        return {
            "<": x < self.value,
            "<=": x <= self.value,
            ">": x > self.value,
            ">=": x >= self.value,
        }[self.op]

    def __str__(self) -> str:
        return f"{self.metric} {self.op} {_fmt_num(self.value)}"


@dataclass(frozen=True)
class CrossRule:
    name: str
    consequent: Condition
    antecedent: Condition | None = None

    def violated_by(self, means: dict[str, float]) -> bool:
        if self.antecedent is not None and not self.antecedent.holds(means):
            return False
        return not self.consequent.holds(means)

    def __str__(self) -> str:
        if self.antecedent is None:
            return str(self.consequent)
        return f"if {self.antecedent} then {self.consequent}"


@dataclass(frozen=True)
class PhysioRuleSet:
    """Per-metric bounds, cross-metric rules, and report structure requirements."""

    ranges: ReferenceRanges
    rules: tuple[CrossRule, ...]
    header_prefix: str = "Sleep Quality Report:"
    required_sections: tuple[str, ...] = ()
    min_sleep_hours: float = 4.0
    max_sleep_hours: float = 12.0
    max_apnea_per_night: int = 60

    def describe(self) -> str:
        """Human-readable rule summary, embedded in the report-production prompt."""
        lines = []
        for name, r in sorted(self.ranges.metrics.items()):
            line = f"- {name} stays within {_fmt_num(r.general_min)} to {_fmt_num(r.general_max)} {r.unit}".rstrip()
            if r.drift_max is not None:
                line += f"; night-to-night change at most {r.drift_max:.0%}"
            lines.append(line)
        for rule in self.rules:
            lines.append(f"- {rule}")
        lines.append(
            f"- sleep duration stays within {_fmt_num(self.min_sleep_hours)} to "
            f"{_fmt_num(self.max_sleep_hours)} hours; apnea events per night at most "
            f"{self.max_apnea_per_night}"
        )
        return "\n".join(lines)


@dataclass(frozen=True)
class StageMinutes:
    light: tuple[int, ...]
    deep: tuple[int, ...]
    rem: tuple[int, ...]


@dataclass(frozen=True)
class SleepReport:
    report_id: str
    nights: int
    sdnn: tuple[float, ...]
    rmssd: tuple[float, ...]
    lf_hf: tuple[float, ...]
    pnn50: tuple[float, ...]
    avg_sleep_hours: float
    sleep_hours: tuple[float, ...]
    stage_minutes: StageMinutes
    apnea_events_per_night: tuple[int, ...]
    rendered_text: str = ""

    def metric_means(self) -> dict[str, float]:
        def mean(xs):
            return float(sum(xs) / len(xs)) if xs else float("nan")

        return {
            "sdnn": mean(self.sdnn),
            "rmssd": mean(self.rmssd),
            "lf_hf": mean(self.lf_hf),
            "pnn50": mean(self.pnn50),
            "sleep_hours": mean(self.sleep_hours),
            "apnea": mean(self.apnea_events_per_night),
        }


@dataclass(frozen=True)
class Violation:
    rule: str
    field: str
    value: object
    message: str


@dataclass(frozen=True)
class ReportProvenance:
    report_id: str
    source: str
    backend_id: str = ""
    template_id: str = ""
    repairs: int = 0
    accepted: bool = True
    reason: str = ""


_COND_RE = re.compile(r"^\s*(\w+)\s+(<=|>=|<|>)\s+([-\d.]+)\s*$")
_RULE_METRICS = ("sdnn", "rmssd", "lf_hf", "pnn50", "sleep_hours", "apnea")


def _parse_condition(text: str) -> Condition:
    m = _COND_RE.match(text)
    if not m:
        raise RuleConflictError(f"cannot parse rule condition {text!r}")
    metric, op, value = m.groups()
    if metric not in _RULE_METRICS:
        raise RuleConflictError(f"unknown rule metric {metric!r}")
    return Condition(metric, op, float(value))


def _parse_rule(name: str, text: str) -> CrossRule:
    if text.strip().lower().startswith("if "):
        body = text.strip()[3:]
        if " then " not in body:
            raise RuleConflictError(f"rule {name!r} missing 'then' clause")
        ante, cons = body.split(" then ", 1)
        return CrossRule(name, _parse_condition(cons), _parse_condition(ante))
    return CrossRule(name, _parse_condition(text))


def _check_satisfiable(rules: tuple[CrossRule, ...], ranges: ReferenceRanges) -> None:
    """Reject rule sets whose consequents can never hold, and contradictory pairs."""

    def interval(cond: Condition) -> tuple[float, float]:
        if cond.op in ("<", "<="):
            return (float("-inf"), cond.value)
        return (cond.value, float("inf"))

    for rule in rules:
        r = ranges.get(rule.consequent.metric)
        if r is None:
            continue
        lo, hi = interval(rule.consequent)
        if max(lo, r.general_min) > min(hi, r.general_max):
            raise RuleConflictError(
                f"rule {rule.name!r} requires {rule.consequent}, impossible within "
                f"the general range [{r.general_min}, {r.general_max}]"
            )
    for i, a in enumerate(rules):
        for b in rules[i + 1 :]:
            if a.antecedent != b.antecedent:
                continue
            if a.consequent.metric != b.consequent.metric:
                continue
            lo_a, hi_a = interval(a.consequent)
            lo_b, hi_b = interval(b.consequent)
            if max(lo_a, lo_b) > min(hi_a, hi_b):
                raise RuleConflictError(
                    f"rules {a.name!r} and {b.name!r} are mutually unsatisfiable"
                )


def load_rule_set(path: str | Path | None = None) -> PhysioRuleSet:
    """Load the physiological rule set from a declarative config file.

    With no path the packaged defaults are used. Sections: [ranges.<metric>]
    with general_min / general_max / drift_max and friends, [report] for
    structure requirements, and [rules] with one cross-metric rule per key
    (either "metric <cmp> value" or "if metric <cmp> value then
    metric <cmp> value", evaluated on nightly means).
    """
    ranges = load_reference_ranges(path)
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        text = (resources.files("sleepdistill") / "data/default_rules.cfg").read_text(
            encoding="utf-8"
        )
        parser.read_string(text)
    else:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    rep = parser["report"] if parser.has_section("report") else {}
    sections = tuple(
        s.strip()
        for s in rep.get(
            "required_sections",
            "Sleep Quality Overview, Cardiac Health, Stress and Stress Resilience, "
            "Sleep Apnea and Sleep Interruptions, Comprehensive Impact Analysis",
        ).split(",")
    )
    rules: list[CrossRule] = []
    if parser.has_section("rules"):
        for name, text in parser["rules"].items():
            rules.append(_parse_rule(name, text))
    rule_set = PhysioRuleSet(
        ranges=ranges,
        rules=tuple(rules),
        header_prefix=rep.get("header_prefix", "Sleep Quality Report:")
        if rep
        else "Sleep Quality Report:",
        required_sections=sections,
        min_sleep_hours=float(rep.get("min_sleep_hours", 4.0)) if rep else 4.0,
        max_sleep_hours=float(rep.get("max_sleep_hours", 12.0)) if rep else 12.0,
        max_apnea_per_night=int(rep.get("max_apnea_per_night", 60)) if rep else 60,
    )
    _check_satisfiable(rule_set.rules, ranges)
    return rule_set


def sample_profiles(n: int, seed: int) -> list[SleepProfile]:
    """Draw n subject profiles cycling through all archetypes.

    Deterministic in seed; every archetype holds at least a 10% share
    once n reaches 20.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    archetypes = list(Archetype)
    profiles = []
    for i in range(n):
        arch = archetypes[i % len(archetypes)]
        windows = ARCHETYPE_TARGETS[arch]
        targets = {
            name: round(float(rng.uniform(lo, hi)), 2)
            for name, (lo, hi) in windows.items()
            if name != "apnea"
        }
        lo, hi = windows["apnea"]
        targets["apnea"] = float(rng.integers(int(lo), int(hi) + 1))
        profiles.append(
            SleepProfile(
                archetype=arch,
                target_means=targets,
                nights=6,
                seed=int(rng.integers(0, 2**63)),
            )
        )
    return profiles


def _walk(rng, target, nights, lo, hi, step, decimals):
    # Bounded multiplicative walk: keeps night-to-night drift well under
    # the 15% validation cap while staying inside [lo, hi].
    x = float(rng.uniform(max(lo, target * 0.97), min(hi, target * 1.03)))
    values = []
    for _ in range(nights):
        values.append(round(min(max(x, lo), hi), decimals))
        x *= 1.0 + float(rng.uniform(-step, step))
    return values


def generate_report(
    profile: SleepProfile,
    rule_set: PhysioRuleSet,
    report_id: str | None = None,
) -> SleepReport:
    """Deterministic offline report generation honoring every rule.

    Draws nightly values around the profile targets, then validates; rule
    violations trigger a bounded redraw rather than clipping, and a
    profile whose targets cannot satisfy the rule set raises
    RuleConflictError.
    """
    if profile.nights < 1:
        raise ValueError("profile.nights must be at least 1")
    rng = np.random.default_rng(profile.seed)
    rid = report_id if report_id is not None else f"rpt-{profile.seed & 0xFFFFFFFFFFFFFFFF:016x}"
    last_violations: list[Violation] = []
    for _ in range(20):
        report = _draw_report(profile, rule_set, rng, rid)
        violations = validate_report(report, rule_set)
        if not violations:
            return report
        last_violations = violations
    raise RuleConflictError(
        f"profile {profile.archetype.value} targets cannot satisfy the rule set: "
        + "; ".join(v.message for v in last_violations[:4])
    )


def _draw_report(profile, rule_set, rng, report_id) -> SleepReport:
    nights = profile.nights
    t = profile.target_means
    arrays = {}
    for name, decimals in (("sdnn", 1), ("rmssd", 1), ("pnn50", 1), ("lf_hf", 2)):
        r = rule_set.ranges.require(name)
        target = t[name]
        lo = max(r.general_min, target * 0.9)
        hi = min(r.general_max, target * 1.1)
        arrays[name] = tuple(_walk(rng, target, nights, lo, hi, 0.05, decimals))
    sleep_target = t.get("sleep_hours", 7.5)
    lo = max(rule_set.min_sleep_hours, sleep_target - 0.6)
    hi = min(rule_set.max_sleep_hours, sleep_target + 0.6)
    hours = []
    x = float(rng.uniform(sleep_target - 0.2, sleep_target + 0.2))
    for _ in range(nights):
        hours.append(round(min(max(x, lo), hi), 1))
        x += float(rng.uniform(-0.25, 0.25))
    avg = round(sum(hours) / nights, 1)
    light, deep, rem = [], [], []
    for h in hours:
        total = h * 60.0
        light.append(int(total * rng.uniform(0.50, 0.56)))
        deep.append(int(total * rng.uniform(0.15, 0.20)))
        rem.append(int(total * rng.uniform(0.19, 0.23)))
    apnea_target = int(t.get("apnea", 0))
    apnea = tuple(
        int(min(max(apnea_target + int(rng.integers(-2, 3)), 0), rule_set.max_apnea_per_night))
        for _ in range(nights)
    )
    report = SleepReport(
        report_id=report_id,
        nights=nights,
        sdnn=arrays["sdnn"],
        rmssd=arrays["rmssd"],
        lf_hf=arrays["lf_hf"],
        pnn50=arrays["pnn50"],
        avg_sleep_hours=avg,
        sleep_hours=tuple(hours),
        stage_minutes=StageMinutes(tuple(light), tuple(deep), tuple(rem)),
        apnea_events_per_night=apnea,
    )
    return replace(report, rendered_text=render_report_text(report, rule_set.ranges))


def _fmt_num(v: float) -> str:
    f = float(v)
    if f == int(f):
        return str(int(f))
    return repr(f)


def _fmt_list(values, fmt=_fmt_num) -> str:
    return "[" + ", ".join(fmt(v) for v in values) + "]"


def _fmt_pnn50(v: float) -> str:
    return f"{float(v):.1f}"


def _stress_phrases(lf_hf_mean: float) -> tuple[str, str]:
    if lf_hf_mean < 2.0:
        return "low", "strong parasympathetic activity"
    if lf_hf_mean < 3.0:
        return "moderate", "balanced autonomic activity"
    return "high", "pronounced sympathetic dominance"


def render_report_text(rep: SleepReport, ranges: ReferenceRanges | None = None) -> str:
    """Deterministic report text; every numeric field appears and parses back."""
    if ranges is None:
        ranges = _default_ranges()
    means = rep.metric_means()
    avg = _fmt_num(rep.avg_sleep_hours)
    if 7.0 <= rep.avg_sleep_hours <= 9.0:
        sleep_clause = "meeting the recommended 7-9 hours of sleep for adults"
    elif rep.avg_sleep_hours < 7.0:
        sleep_clause = "below the recommended 7-9 hours of sleep for adults"
    else:
        sleep_clause = "above the recommended 7-9 hours of sleep for adults"
    stress_word, autonomic = _stress_phrases(means["lf_hf"])
    apnea_avg = _fmt_num(round(means["apnea"], 1))

    def desc(name):
        r = ranges.get(name)
        return r.description if r is not None and r.description else "n/a"

    return (
        "Sleep Quality Report:\n"
        "\n"
        "1. Sleep Quality Overview\n"
        f"   - During the observation period, the subject's average sleep duration "
        f"was {avg} hours, {sleep_clause}.\n"
        f"   - Nightly sleep duration (hours): {_fmt_list(rep.sleep_hours)}\n"
        f"   - Light sleep (minutes per night): {_fmt_list(rep.stage_minutes.light)}\n"
        f"   - Deep sleep (minutes per night): {_fmt_list(rep.stage_minutes.deep)}\n"
        f"   - REM sleep (minutes per night): {_fmt_list(rep.stage_minutes.rem)}\n"
        "\n"
        "2. Cardiac Health\n"
        "   - Analysis of heart rate variability (HRV) parameters, including SDNN, "
        "RMSSD, LF/HF, and PNN50, provides an assessment of the subject's autonomic "
        "nervous system balance and cardiac health status.\n"
        "\n"
        "3. Stress and Stress Resilience\n"
        f"   - Analysis of the LF/HF ratio and HF components shows that the "
        f"subject's stress level was {stress_word} during the observation period, "
        f"with {autonomic}.\n"
        "\n"
        "4. Sleep Apnea and Sleep Interruptions\n"
        f"   - The subject experienced an average of {apnea_avg} sleep apnea events "
        "per night.\n"
        f"   - Apnea events per night: {_fmt_list(rep.apnea_events_per_night)}\n"
        "\n"
        "Comprehensive Impact Analysis\n"
        f"Overall, the subject's average sleep duration was {avg} hours with "
        f"{apnea_avg} apnea events per night; HRV means: SDNN "
        f"{_fmt_num(round(means['sdnn'], 1))} ms, RMSSD "
        f"{_fmt_num(round(means['rmssd'], 1))} ms, LF/HF "
        f"{_fmt_num(round(means['lf_hf'], 2))}, PNN50 "
        f"{_fmt_num(round(means['pnn50'], 1))}%.\n"
        "\n"
        "HRV Parameters Calculation:\n"
        "\n"
        f"- SDNN: {_fmt_list(rep.sdnn)}\n"
        f"  - Description: {desc('sdnn')}\n"
        "\n"
        f"- RMSSD: {_fmt_list(rep.rmssd)}\n"
        f"  - Description: {desc('rmssd')}\n"
        "\n"
        f"- LF/HF: {_fmt_list(rep.lf_hf)}\n"
        f"  - Description: {desc('lf_hf')}\n"
        "\n"
        f"- PNN50: {_fmt_list(rep.pnn50, _fmt_pnn50)}\n"
        f"  - Description: {desc('pnn50')}\n"
    )


_default_ranges_cache: ReferenceRanges | None = None


def _default_ranges() -> ReferenceRanges:
    global _default_ranges_cache
    if _default_ranges_cache is None:
        _default_ranges_cache = load_reference_ranges()
    return _default_ranges_cache


_PARSE_PATTERNS = {
    "avg_sleep_hours": re.compile(r"average sleep duration was ([0-9.]+) hours"),
    "sleep_hours": re.compile(r"Nightly sleep duration \(hours\): \[([^\]]*)\]"),
    "light": re.compile(r"Light sleep \(minutes per night\): \[([^\]]*)\]"),
    "deep": re.compile(r"Deep sleep \(minutes per night\): \[([^\]]*)\]"),
    "rem": re.compile(r"REM sleep \(minutes per night\): \[([^\]]*)\]"),
    "apnea": re.compile(r"Apnea events per night: \[([^\]]*)\]"),
    "sdnn": re.compile(r"-\s*\**SDNN\**:\s*\[([^\]]*)\]"),
    "rmssd": re.compile(r"-\s*\**RMSSD\**:\s*\[([^\]]*)\]"),
    "lf_hf": re.compile(r"-\s*\**LF/HF\**:\s*\[([^\]]*)\]"),
    "pnn50": re.compile(r"-\s*\**PNN50\**:\s*\[([^\]]*)\]"),
}


def _floats(text: str) -> tuple[float, ...]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    return tuple(float(s) for s in items)


def parse_report_text(text: str, report_id: str = "parsed") -> SleepReport:
    """Parse a rendered report back into its numeric fields.

    Raises ReportParseError when a mandatory block (the four HRV arrays,
    apnea counts, or sleep durations) is missing.
    """
    found: dict[str, object] = {}
    for key, pattern in _PARSE_PATTERNS.items():
        m = pattern.search(text)
        if not m:
            raise ReportParseError(f"report text missing the {key} block")
        found[key] = m.group(1)
    sdnn = _floats(found["sdnn"])
    if not sdnn:
        raise ReportParseError("empty SDNN array")
    nights = len(sdnn)
    return SleepReport(
        report_id=report_id,
        nights=nights,
        sdnn=sdnn,
        rmssd=_floats(found["rmssd"]),
        lf_hf=_floats(found["lf_hf"]),
        pnn50=_floats(found["pnn50"]),
        avg_sleep_hours=float(found["avg_sleep_hours"]),
        sleep_hours=_floats(found["sleep_hours"]),
        stage_minutes=StageMinutes(
            light=tuple(int(v) for v in _floats(found["light"])),
            deep=tuple(int(v) for v in _floats(found["deep"])),
            rem=tuple(int(v) for v in _floats(found["rem"])),
        ),
        apnea_events_per_night=tuple(int(v) for v in _floats(found["apnea"])),
        rendered_text=text,
    )


def validate_report(rep: SleepReport, rule_set: PhysioRuleSet) -> list[Violation]:
    """All structural invariants plus every rule; empty list means valid."""
    violations: list[Violation] = []

    def add(rule, field_name, value, message):
        violations.append(Violation(rule, field_name, value, message))

    if rep.nights < 1:
        add("structure", "nights", rep.nights, "nights must be at least 1")
        return violations

    arrays = {
        "sdnn": rep.sdnn,
        "rmssd": rep.rmssd,
        "lf_hf": rep.lf_hf,
        "pnn50": rep.pnn50,
        "sleep_hours": rep.sleep_hours,
        "apnea_events_per_night": rep.apnea_events_per_night,
        "stage_minutes.light": rep.stage_minutes.light,
        "stage_minutes.deep": rep.stage_minutes.deep,
        "stage_minutes.rem": rep.stage_minutes.rem,
    }
    for name, xs in arrays.items():
        if len(xs) != rep.nights:
            add(
                "arity",
                name,
                len(xs),
                f"{name} has {len(xs)} values for {rep.nights} nights",
            )

    for name in _RANGED_METRICS:
        r = rule_set.ranges.get(name)
        if r is None:
            continue
        for i, v in enumerate(arrays[name]):
            if classify_metric(name, v, rule_set.ranges) is RangeStatus.OUT_OF_GENERAL:
                add(
                    "general_range",
                    name,
                    v,
                    f"{name} night {i + 1} value {v} outside general range "
                    f"[{r.general_min}, {r.general_max}]",
                )
        if r.drift_max is not None:
            xs = arrays[name]
            floor = 0.01 * (r.general_max - r.general_min)
            for i in range(len(xs) - 1):
                if xs[i] < floor:
                    continue
                drift = abs(xs[i + 1] - xs[i]) / xs[i]
                if drift > r.drift_max:
                    add(
                        "drift",
                        name,
                        drift,
                        f"{name} drift {drift:.2%} between nights {i + 1} and {i + 2} "
                        f"exceeds {r.drift_max:.0%}",
                    )

    for i, h in enumerate(rep.sleep_hours):
        if not (rule_set.min_sleep_hours <= h <= rule_set.max_sleep_hours):
            add(
                "sleep_bounds",
                "sleep_hours",
                h,
                f"sleep duration {h} h on night {i + 1} outside "
                f"[{rule_set.min_sleep_hours}, {rule_set.max_sleep_hours}]",
            )
    if rep.sleep_hours and abs(
        rep.avg_sleep_hours - sum(rep.sleep_hours) / len(rep.sleep_hours)
    ) > 0.06:
        add(
            "sleep_avg",
            "avg_sleep_hours",
            rep.avg_sleep_hours,
            "avg_sleep_hours inconsistent with nightly durations",
        )

    n_stage = min(
        rep.nights,
        len(rep.stage_minutes.light),
        len(rep.stage_minutes.deep),
        len(rep.stage_minutes.rem),
        len(rep.sleep_hours),
    )
    for i in range(n_stage):
        total = (
            rep.stage_minutes.light[i]
            + rep.stage_minutes.deep[i]
            + rep.stage_minutes.rem[i]
        )
        budget = rep.sleep_hours[i] * 60.0
        if min(
            rep.stage_minutes.light[i],
            rep.stage_minutes.deep[i],
            rep.stage_minutes.rem[i],
        ) < 0:
            add("stage_bounds", "stage_minutes", i, f"negative stage minutes on night {i + 1}")
        if total > budget:
            add(
                "stage_sum",
                "stage_minutes",
                total,
                f"stage minutes {total} exceed sleep duration "
                f"{budget:.0f} min on night {i + 1}",
            )

    for i, a in enumerate(rep.apnea_events_per_night):
        if a < 0 or a > rule_set.max_apnea_per_night:
            add(
                "apnea_bounds",
                "apnea_events_per_night",
                a,
                f"apnea count {a} on night {i + 1} outside "
                f"[0, {rule_set.max_apnea_per_night}]",
            )

    if not rep.rendered_text.startswith(rule_set.header_prefix):
        add(
            "header",
            "rendered_text",
            rep.rendered_text[:40],
            f"rendered text must start with {rule_set.header_prefix!r}",
        )
    for section in rule_set.required_sections:
        if section not in rep.rendered_text:
            add("sections", "rendered_text", section, f"missing section {section!r}")

    means = rep.metric_means()
    for rule in rule_set.rules:
        if rule.violated_by(means):
            add(
                rule.name,
                rule.consequent.metric,
                round(means[rule.consequent.metric], 3),
                f"rule {rule.name!r} violated: {rule}",
            )
    return violations


def llm_generate_reports(
    exemplar: SleepReport,
    rule_set: PhysioRuleSet,
    n: int,
    client,
    repair_retries: int = 2,
    templates=None,
    batch_size: int = 10,
    parallelism: int = 4,
):
    """LLM-backed report generation over the same contract as generate_report.

    Generation is batched: one report-production prompt per batch_size
    reports, sent with at most `parallelism` requests in flight, outputs
    kept in input order. Each response is split into report blocks, each
    block parsed and validated, and invalid blocks are re-prompted with
    their violation list up to repair_retries times before being dropped.
    Gateway errors propagate; parse failures drop the block.
    """
    from .gateway import FinishReason
    from .prompts import render_named, render_pr1

    batch_counts = [batch_size] * (n // batch_size)
    if n % batch_size:
        batch_counts.append(n % batch_size)
    requests, prompts = [], []
    for b, count in enumerate(batch_counts):
        prompt = render_pr1(exemplar, rule_set, count, templates=templates)
        prompts.append(prompt)
        requests.append(client.request_for(prompt, tag=f"report-synthesis-{b}"))
    responses = client.gateway.map_bounded(requests, parallelism=parallelism)
    blocks: list[tuple[str, str]] = []  # (pr1 prompt, report block)
    for prompt, count, resp in zip(prompts, batch_counts, responses):
        if resp.finish_reason is FinishReason.ERROR:
            from .gateway import BackendUnavailableError

            raise BackendUnavailableError(resp.error or "report synthesis failed")
        for block in _split_report_blocks(resp.content, rule_set.header_prefix)[:count]:
            blocks.append((prompt, block))

    reports: list[SleepReport] = []
    provenance: list[ReportProvenance] = []
    parse_failures = 0
    dropped = 0
    for idx, (prompt, block) in enumerate(blocks[:n]):
        rid = f"llm-{idx:04d}"
        accepted = None
        repairs = 0
        current = block
        for attempt in range(repair_retries + 1):
            try:
                parsed = parse_report_text(current, report_id=rid)
            except ReportParseError as exc:
                parse_failures += 1
                provenance.append(
                    ReportProvenance(
                        rid,
                        source="llm",
                        backend_id=client.backend_id,
                        template_id="Pr1",
                        repairs=repairs,
                        accepted=False,
                        reason=f"parse failure: {exc}",
                    )
                )
                break
            violations = validate_report(parsed, rule_set)
            if not violations:
                accepted = parsed
                break
            if attempt == repair_retries:
                provenance.append(
                    ReportProvenance(
                        rid,
                        source="llm",
                        backend_id=client.backend_id,
                        template_id="Pr1",
                        repairs=repairs,
                        accepted=False,
                        reason="; ".join(v.message for v in violations[:4]),
                    )
                )
                break
            repairs += 1
            repair_msg = render_named(
                "ReportRepair",
                templates=templates,
                violations="\n".join(f"- {v.message}" for v in violations),
            )
            current = client.ask_text(
                repair_msg,
                history=(("user", prompt), ("assistant", current)),
                tag=f"report-repair-{rid}",
            )
            if not current.startswith(rule_set.header_prefix):
                start = current.find(rule_set.header_prefix)
                current = current[start:] if start >= 0 else current
        if accepted is not None:
            reports.append(accepted)
            provenance.append(
                ReportProvenance(
                    rid,
                    source="llm",
                    backend_id=client.backend_id,
                    template_id="Pr1",
                    repairs=repairs,
                    accepted=True,
                )
            )
        else:
            dropped += 1
    return LlmGenerationResult(reports, provenance, parse_failures, dropped)


@dataclass
class LlmGenerationResult:
    reports: list[SleepReport]
    provenance: list[ReportProvenance]
    parse_failures: int
    dropped: int


def _split_report_blocks(text: str, prefix: str) -> list[str]:
    starts = [m.start() for m in re.finditer(re.escape(prefix), text)]
    blocks = []
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else len(text)
        blocks.append(text[start:end].strip())
    return blocks


def _report_to_dict(rep: SleepReport) -> dict:
    return {
        "report_id": rep.report_id,
        "nights": rep.nights,
        "sdnn": list(rep.sdnn),
        "rmssd": list(rep.rmssd),
        "lf_hf": list(rep.lf_hf),
        "pnn50": list(rep.pnn50),
        "avg_sleep_hours": rep.avg_sleep_hours,
        "sleep_hours": list(rep.sleep_hours),
        "stage_minutes": {
            "light": list(rep.stage_minutes.light),
            "deep": list(rep.stage_minutes.deep),
            "rem": list(rep.stage_minutes.rem),
        },
        "apnea_events_per_night": list(rep.apnea_events_per_night),
    }


def _report_from_dict(data: dict, rendered_text: str = "") -> SleepReport:
    return SleepReport(
        report_id=data["report_id"],
        nights=int(data["nights"]),
        sdnn=tuple(float(v) for v in data["sdnn"]),
        rmssd=tuple(float(v) for v in data["rmssd"]),
        lf_hf=tuple(float(v) for v in data["lf_hf"]),
        pnn50=tuple(float(v) for v in data["pnn50"]),
        avg_sleep_hours=float(data["avg_sleep_hours"]),
        sleep_hours=tuple(float(v) for v in data["sleep_hours"]),
        stage_minutes=StageMinutes(
            light=tuple(int(v) for v in data["stage_minutes"]["light"]),
            deep=tuple(int(v) for v in data["stage_minutes"]["deep"]),
            rem=tuple(int(v) for v in data["stage_minutes"]["rem"]),
        ),
        apnea_events_per_night=tuple(
            int(v) for v in data["apnea_events_per_night"]
        ),
        rendered_text=rendered_text,
    )


def save_report(rep: SleepReport, directory: str | Path) -> None:
    """Persist one report as {id}.json (data) plus {id}.txt (rendered text)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{rep.report_id}.json").write_text(
        json.dumps(_report_to_dict(rep), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (directory / f"{rep.report_id}.txt").write_text(rep.rendered_text, encoding="utf-8")


def load_report(directory: str | Path, report_id: str) -> SleepReport:
    directory = Path(directory)
    data = json.loads((directory / f"{report_id}.json").read_text(encoding="utf-8"))
    text_path = directory / f"{report_id}.txt"
    text = text_path.read_text(encoding="utf-8") if text_path.exists() else ""
    return _report_from_dict(data, text)


def load_corpus(directory: str | Path) -> list[SleepReport]:
    directory = Path(directory)
    reports = []
    for path in sorted(directory.glob("*.json")):
        if path.name == "manifest.json":
            continue
        reports.append(load_report(directory, path.stem))
    return reports


def load_exemplar_report() -> SleepReport:
    """The canonical six-night exemplar subject, with its source defects intact.

    The LF/HF array carries five values against six nights and the RMSSD
    values sit above the stated general range; validate_report flags both
    rather than papering over them.
    """
    data = json.loads(
        (resources.files("sleepdistill") / "data/exemplar_report.json").read_text(
            encoding="utf-8"
        )
    )
    rep = _report_from_dict(data)
    return replace(rep, rendered_text=render_report_text(rep))

"""Deterministic sleep assessment: report in, categorical labels out.

Labels are computed from nightly-metric means against a configurable
threshold table. The defaults reproduce the canonical exemplar's labels
(low stress, good resilience, mild fatigue, good autonomic activity) and
live in the same declarative config file as the physiological rules.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .reports import SleepReport


class Rating(str, Enum):
    GOOD = "Good"
    MODERATE = "Moderate"
    POOR = "Poor"


class StressLevel(str, Enum):
    LOW = "Low"
    MODERATE = "Moderate"
    HIGH = "High"


class FatigueLevel(str, Enum):
    NONE = "None"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


class ApneaSeverity(str, Enum):
    NONE = "None"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


# Ordinal positions for monotonicity checks (higher index = worse).
SEVERITY_ORDER = [s.value for s in ApneaSeverity]
FATIGUE_ORDER = [f.value for f in FatigueLevel]
RATING_ORDER = [Rating.GOOD.value, Rating.MODERATE.value, Rating.POOR.value]
STRESS_ORDER = [s.value for s in StressLevel]


@dataclass(frozen=True)
class AssessmentThresholds:
    """Threshold table; all boundaries are half-open with the lower
    severity winning at an exact threshold value."""

    stress_lf_hf_moderate: float = 2.0
    stress_lf_hf_high: float = 3.0
    apnea_mild: float = 5.0
    apnea_moderate: float = 15.0
    apnea_severe: float = 30.0
    fatigue_sleep_mild: float = 7.0
    fatigue_sleep_moderate: float = 6.0
    fatigue_sleep_severe: float = 5.0
    cardiac_sdnn_good: float = 34.0
    cardiac_sdnn_moderate: float = 20.0
    resilience_rmssd_low: float = 27.0
    resilience_pnn50_low: float = 10.0
    ans_lf_hf_low: float = 0.5
    ans_lf_hf_high: float = 2.0
    ans_extreme_factor: float = 2.0


def load_thresholds(path: str | Path | None = None) -> AssessmentThresholds:
    """Read the [assess] section of the declarative config (packaged default if None)."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        text = (resources.files("sleepdistill") / "data/default_rules.cfg").read_text(
            encoding="utf-8"
        )
        parser.read_string(text)
    else:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    if not parser.has_section("assess"):
        return AssessmentThresholds()
    sec = parser["assess"]
    defaults = AssessmentThresholds()
    kwargs = {
        name: sec.getfloat(name, fallback=getattr(defaults, name))
        for name in defaults.__dataclass_fields__
    }
    return AssessmentThresholds(**kwargs)


@dataclass(frozen=True)
class SleepAssessment:
    stress_resilience: Rating
    stress_level: StressLevel
    fatigue_level: FatigueLevel
    ans_activity: Rating
    cardiac_health: Rating
    apnea_severity: ApneaSeverity
    narrative_notes: tuple[str, ...] = ()

    def labels(self) -> dict[str, str]:
        return {
            "Stress Resilience": self.stress_resilience.value,
            "Stress Level": self.stress_level.value,
            "Fatigue Level": self.fatigue_level.value,
            "Autonomic Nervous System Activity": self.ans_activity.value,
            "Cardiac Health": self.cardiac_health.value,
            "Sleep Apnea Severity": self.apnea_severity.value,
        }

    def to_json(self) -> str:
        data = {k: v for k, v in self.labels().items()}
        data["narrative_notes"] = list(self.narrative_notes)
        return json.dumps(data, indent=2, sort_keys=True)


def _apnea_severity(mean_apnea: float, th: AssessmentThresholds) -> ApneaSeverity:
    if mean_apnea < th.apnea_mild:
        return ApneaSeverity.NONE
    if mean_apnea < th.apnea_moderate:
        return ApneaSeverity.MILD
    if mean_apnea < th.apnea_severe:
        return ApneaSeverity.MODERATE
    return ApneaSeverity.SEVERE


def _fatigue(sleep_hours: float, apnea: ApneaSeverity, th: AssessmentThresholds) -> FatigueLevel:
    if sleep_hours < th.fatigue_sleep_severe:
        from_sleep = FatigueLevel.SEVERE
    elif sleep_hours < th.fatigue_sleep_moderate:
        from_sleep = FatigueLevel.MODERATE
    elif sleep_hours < th.fatigue_sleep_mild:
        from_sleep = FatigueLevel.MILD
    else:
        from_sleep = FatigueLevel.NONE
    from_apnea = FatigueLevel(apnea.value) if apnea.value in FATIGUE_ORDER else FatigueLevel.NONE
    worse = max(FATIGUE_ORDER.index(from_sleep.value), FATIGUE_ORDER.index(from_apnea.value))
    return FatigueLevel(FATIGUE_ORDER[worse])


def assess(rep: SleepReport, thresholds: AssessmentThresholds | None = None) -> SleepAssessment:
    """Map a report to its categorical assessment; pure in the report."""
    th = thresholds if thresholds is not None else AssessmentThresholds()
    means = rep.metric_means()
    notes: list[str] = []

    lf_hf = means["lf_hf"]
    if lf_hf < th.stress_lf_hf_moderate:
        stress = StressLevel.LOW
    elif lf_hf < th.stress_lf_hf_high:
        stress = StressLevel.MODERATE
    else:
        stress = StressLevel.HIGH
    notes.append(f"stress_level={stress.value}: LF/HF mean {lf_hf:.2f} (moderate at {th.stress_lf_hf_moderate}, high at {th.stress_lf_hf_high})")

    rmssd, pnn50 = means["rmssd"], means["pnn50"]
    strong = (rmssd >= th.resilience_rmssd_low, pnn50 >= th.resilience_pnn50_low)
    if all(strong):
        resilience = Rating.GOOD
    elif any(strong):
        resilience = Rating.MODERATE
    else:
        resilience = Rating.POOR
    notes.append(
        f"stress_resilience={resilience.value}: RMSSD mean {rmssd:.1f} "
        f"(low below {th.resilience_rmssd_low}), PNN50 mean {pnn50:.1f} "
        f"(low below {th.resilience_pnn50_low})"
    )

    sdnn = means["sdnn"]
    if sdnn >= th.cardiac_sdnn_good:
        cardiac = Rating.GOOD
    elif sdnn >= th.cardiac_sdnn_moderate:
        cardiac = Rating.MODERATE
    else:
        cardiac = Rating.POOR
    notes.append(f"cardiac_health={cardiac.value}: SDNN mean {sdnn:.1f} (good at {th.cardiac_sdnn_good})")

    in_band = th.ans_lf_hf_low <= lf_hf <= th.ans_lf_hf_high
    span = th.ans_lf_hf_high - th.ans_lf_hf_low
    far_out = (
        lf_hf < th.ans_lf_hf_low - span * (th.ans_extreme_factor - 1.0)
        or lf_hf > th.ans_lf_hf_high + span * (th.ans_extreme_factor - 1.0)
    )
    if in_band and rmssd >= th.resilience_rmssd_low:
        ans = Rating.GOOD
    elif far_out and rmssd < th.resilience_rmssd_low:
        ans = Rating.POOR
    else:
        ans = Rating.MODERATE
    notes.append(
        f"ans_activity={ans.value}: LF/HF mean {lf_hf:.2f} vs healthy band "
        f"[{th.ans_lf_hf_low}, {th.ans_lf_hf_high}], RMSSD mean {rmssd:.1f}"
    )

    apnea = _apnea_severity(means["apnea"], th)
    notes.append(
        f"apnea_severity={apnea.value}: {means['apnea']:.1f} events/night "
        f"(mild at {th.apnea_mild:.0f}, moderate at {th.apnea_moderate:.0f}, "
        f"severe at {th.apnea_severe:.0f})"
    )

    fatigue = _fatigue(means["sleep_hours"], apnea, th)
    notes.append(
        f"fatigue_level={fatigue.value}: sleep mean {means['sleep_hours']:.1f} h, "
        f"apnea severity {apnea.value}"
    )

    return SleepAssessment(
        stress_resilience=resilience,
        stress_level=stress,
        fatigue_level=fatigue,
        ans_activity=ans,
        cardiac_health=cardiac,
        apnea_severity=apnea,
        narrative_notes=tuple(notes),
    )


def render_description(a: SleepAssessment, rep: SleepReport) -> str:
    """Deterministic narrative form of an assessment, consumed by the
    suggestion prompt. Mirrors the report layout: four numbered sections,
    a comprehensive-impact block, and one bullet per label."""
    means = rep.metric_means()
    bullets = "\n".join(f"- **{k}**: {v}" for k, v in a.labels().items())
    return (
        "Sleep Assessment:\n"
        "\n"
        "1. Sleep Quality Overview\n"
        f"   - Average sleep duration of {rep.avg_sleep_hours} hours across "
        f"{rep.nights} nights; fatigue level assessed as {a.fatigue_level.value}.\n"
        "\n"
        "2. Cardiac Health\n"
        f"   - Mean SDNN {means['sdnn']:.1f} ms and mean RMSSD {means['rmssd']:.1f} ms; "
        f"cardiac health assessed as {a.cardiac_health.value}.\n"
        "\n"
        "3. Stress and Stress Resilience\n"
        f"   - Mean LF/HF {means['lf_hf']:.2f}; stress level {a.stress_level.value}, "
        f"stress resilience {a.stress_resilience.value}.\n"
        "\n"
        "4. Sleep Apnea and Sleep Interruptions\n"
        f"   - Average of {means['apnea']:.1f} apnea events per night; severity "
        f"{a.apnea_severity.value}.\n"
        "\n"
        "Comprehensive Impact Analysis\n"
        f"Overall, stress level is {a.stress_level.value.lower()}, stress resilience "
        f"is {a.stress_resilience.value.lower()}, autonomic nervous system activity "
        f"is {a.ans_activity.value.lower()}, cardiac health is "
        f"{a.cardiac_health.value.lower()}, and fatigue is "
        f"{a.fatigue_level.value.lower()}.\n"
        "\n"
        f"{bullets}\n"
    )

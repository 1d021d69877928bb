"""HRV metric computation and RR-interval synthesis.

Time-domain metrics follow the standard definitions: SDNN is the sample
standard deviation (N-1 denominator) of the intervals, RMSSD the root
mean square of successive differences, and PNN50 the percentage of
successive differences strictly greater than 50 ms. Frequency-domain
powers come from Welch's method on the tachogram after linear resampling
to a uniform 4 Hz grid; LF is integrated over [0.04, 0.15) Hz and HF
over [0.15, 0.40] Hz.

The generator inverts metric targets back into an RR series by spectral
synthesis: random-phase cosines with power placed inside the LF and HF
bands, plus a below-band drift component and an above-band beat-jitter
component that absorb variance without moving the LF/HF ratio. A short
self-calibration loop against the estimators in this module brings the
round trip inside tolerance.
"""

from __future__ import annotations

import configparser
import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import welch

PLAUSIBLE_MS = (300.0, 2000.0)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
RESAMPLE_HZ = 4.0
WELCH_NPERSEG = 256
MIN_RECORDING_S = 120.0
# Band powers below this (ms^2) are treated as exactly zero.
POWER_FLOOR = 1e-10

# The synthesizer keeps the HF band below the beat-rate Nyquist frequency,
# which bounds the feasible mean RR (1/(2 * 1.2 s) = 0.417 Hz > 0.40 Hz).
SYNTH_MEAN_RR_MS = (600.0, 1200.0)


class EmptySeriesError(ValueError):
    pass


class SingleIntervalError(ValueError):
    pass


class ImplausibleIntervalError(ValueError):
    pass


class RecordingTooShortError(ValueError):
    pass


class InfeasibleTargetsError(ValueError):
    pass


class DegenerateSpectrumWarning(UserWarning):
    """Both band powers are numerically zero; LF/HF is undefined."""


@dataclass(frozen=True)
class RRSeries:
    """An ordered sequence of NN intervals in milliseconds."""

    intervals_ms: tuple[float, ...]
    start_epoch_s: float = 0.0

    def __post_init__(self):
        vals = tuple(float(v) for v in self.intervals_ms)
        object.__setattr__(self, "intervals_ms", vals)
        if not vals:
            raise EmptySeriesError("RR series must contain at least one interval")
        lo, hi = PLAUSIBLE_MS
        for v in vals:
            if not (lo <= v <= hi):
                raise ImplausibleIntervalError(
                    f"interval {v} ms outside plausibility band [{lo}, {hi}] ms"
                )

    def __len__(self) -> int:
        return len(self.intervals_ms)

    @property
    def duration_s(self) -> float:
        """Cumulative RR time in seconds."""
        return sum(self.intervals_ms) / 1000.0

    def beat_times_s(self) -> np.ndarray:
        """Timestamps of each beat (strictly increasing)."""
        return self.start_epoch_s + np.cumsum(self.intervals_ms) / 1000.0

    def to_json(self) -> str:
        return json.dumps([int(round(v)) for v in self.intervals_ms])

    @classmethod
    def from_json(cls, text: str, start_epoch_s: float = 0.0) -> "RRSeries":
        return cls(tuple(float(v) for v in json.loads(text)), start_epoch_s)


@dataclass(frozen=True)
class HrvMetrics:
    """Metric bundle; unset families stay None."""

    sdnn_ms: float | None = None
    rmssd_ms: float | None = None
    pnn50_pct: float | None = None
    lf_power: float | None = None
    hf_power: float | None = None
    lf_hf: float | None = None
    window_s: float | None = None

    def merged_with(self, other: "HrvMetrics") -> "HrvMetrics":
        def pick(a, b):
            return a if a is not None else b

        return HrvMetrics(
            sdnn_ms=pick(self.sdnn_ms, other.sdnn_ms),
            rmssd_ms=pick(self.rmssd_ms, other.rmssd_ms),
            pnn50_pct=pick(self.pnn50_pct, other.pnn50_pct),
            lf_power=pick(self.lf_power, other.lf_power),
            hf_power=pick(self.hf_power, other.hf_power),
            lf_hf=pick(self.lf_hf, other.lf_hf),
            window_s=pick(self.window_s, other.window_s),
        )


class Direction(str, Enum):
    HIGHER_GOOD = "higher_good"
    BAND = "band"


class RangeStatus(str, Enum):
    IN_GENERAL = "InGeneral"
    OUT_OF_GENERAL = "OutOfGeneral"
    BELOW_HEALTHY_TYPICAL = "BelowHealthyTypical"
    ABOVE_HEALTHY_TYPICAL = "AboveHealthyTypical"


@dataclass(frozen=True)
class MetricRange:
    name: str
    general_min: float
    general_max: float
    healthy_low: float | None = None
    healthy_high: float | None = None
    direction: Direction = Direction.BAND
    drift_max: float | None = None
    unit: str = ""
    description: str = ""

    def __post_init__(self):
        if not self.general_min < self.general_max:
            raise ValueError(
                f"{self.name}: general_min must be below general_max "
                f"({self.general_min} >= {self.general_max})"
            )


@dataclass(frozen=True)
class ReferenceRanges:
    metrics: dict[str, MetricRange]

    def get(self, name: str) -> MetricRange | None:
        return self.metrics.get(name)

    def require(self, name: str) -> MetricRange:
        try:
            return self.metrics[name]
        except KeyError:
            raise KeyError(f"no reference range defined for metric {name!r}") from None


@dataclass(frozen=True)
class RangeFlag:
    metric: str
    value: float
    status: RangeStatus
    note: str = ""


def load_reference_ranges(path: str | Path | None = None) -> ReferenceRanges:
    """Load per-metric ranges from a declarative config (packaged default if None)."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        text = (resources.files("sleepdistill") / "data/default_rules.cfg").read_text(
            encoding="utf-8"
        )
        parser.read_string(text)
    else:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    metrics: dict[str, MetricRange] = {}
    for section in parser.sections():
        if not section.startswith("ranges."):
            continue
        name = section.split(".", 1)[1]
        sec = parser[section]
        metrics[name] = MetricRange(
            name=name,
            general_min=sec.getfloat("general_min"),
            general_max=sec.getfloat("general_max"),
            healthy_low=sec.getfloat("healthy_low", fallback=None),
            healthy_high=sec.getfloat("healthy_high", fallback=None),
            direction=Direction(sec.get("direction", "band")),
            drift_max=sec.getfloat("drift_max", fallback=None),
            unit=sec.get("unit", ""),
            description=sec.get("description", ""),
        )
    if not metrics:
        raise ValueError(f"no [ranges.*] sections found in {path}")
    return ReferenceRanges(metrics)


def classify_metric(name: str, value: float, ranges: ReferenceRanges) -> RangeStatus:
    """Classify one metric value against its reference range."""
    r = ranges.require(name)
    if not (r.general_min <= value <= r.general_max):
        return RangeStatus.OUT_OF_GENERAL
    if r.healthy_low is not None and value < r.healthy_low:
        return RangeStatus.BELOW_HEALTHY_TYPICAL
    if (
        r.direction is Direction.BAND
        and r.healthy_high is not None
        and value > r.healthy_high
    ):
        return RangeStatus.ABOVE_HEALTHY_TYPICAL
    return RangeStatus.IN_GENERAL


_METRIC_FIELDS = (
    ("sdnn", "sdnn_ms"),
    ("rmssd", "rmssd_ms"),
    ("pnn50", "pnn50_pct"),
    ("lf_hf", "lf_hf"),
)


def validate_ranges(m: HrvMetrics, ranges: ReferenceRanges) -> list[RangeFlag]:
    """Flag metric values that fall outside their reference ranges.

    Returns at most one flag per metric (the most severe status); an empty
    list means every present metric is inside its general range and
    satisfies its healthy-typical note. Never raises.
    """
    flags: list[RangeFlag] = []
    for name, attr in _METRIC_FIELDS:
        value = getattr(m, attr)
        if value is None or ranges.get(name) is None:
            continue
        status = classify_metric(name, value, ranges)
        if status is not RangeStatus.IN_GENERAL:
            r = ranges.require(name)
            flags.append(
                RangeFlag(
                    metric=name,
                    value=value,
                    status=status,
                    note=f"general [{r.general_min}, {r.general_max}]"
                    + (
                        f", healthy low {r.healthy_low}"
                        if r.healthy_low is not None
                        else ""
                    ),
                )
            )
    return flags


def compute_time_domain(rr: RRSeries) -> HrvMetrics:
    """SDNN, RMSSD and PNN50 for one series.

    Needs at least two intervals; RMSSD and PNN50 are undefined for a
    single interval and reported as an error rather than zero.
    """
    x = np.asarray(rr.intervals_ms, dtype=float)
    if x.size < 2:
        raise SingleIntervalError(
            "RMSSD and PNN50 need at least two intervals (one successive difference)"
        )
    diffs = np.diff(x)
    sdnn = float(np.std(x, ddof=1))
    rmssd = float(np.sqrt(np.mean(diffs * diffs)))
    pnn50 = float(100.0 * np.count_nonzero(np.abs(diffs) > 50.0) / diffs.size)
    return HrvMetrics(
        sdnn_ms=sdnn, rmssd_ms=rmssd, pnn50_pct=pnn50, window_s=rr.duration_s
    )


def compute_frequency_domain(rr: RRSeries) -> HrvMetrics:
    """LF power, HF power and their ratio for one series.

    The tachogram is resampled to a uniform 4 Hz grid by linear
    interpolation and the PSD estimated by Welch's method (256-sample
    segments, 50% overlap, Hann window). Requires at least 120 s of
    cumulative RR time. For a degenerate (near-constant) series both
    powers are zero, lf_hf is absent and DegenerateSpectrumWarning is
    emitted.
    """
    if rr.duration_s < MIN_RECORDING_S:
        raise RecordingTooShortError(
            f"need at least {MIN_RECORDING_S:.0f} s of cumulative RR time, "
            f"got {rr.duration_s:.1f} s"
        )
    x = np.asarray(rr.intervals_ms, dtype=float)
    t = rr.beat_times_s()
    grid = np.arange(t[0], t[-1], 1.0 / RESAMPLE_HZ)
    tach = np.interp(grid, t, x)
    freqs, psd = welch(
        tach,
        fs=RESAMPLE_HZ,
        window="hann",
        nperseg=WELCH_NPERSEG,
        noverlap=WELCH_NPERSEG // 2,
        detrend="constant",
    )
    lf_mask = (freqs >= LF_BAND[0]) & (freqs < LF_BAND[1])
    hf_mask = (freqs >= HF_BAND[0]) & (freqs <= HF_BAND[1])
    lf = float(trapezoid(psd[lf_mask], freqs[lf_mask]))
    hf = float(trapezoid(psd[hf_mask], freqs[hf_mask]))
    if lf < POWER_FLOOR:
        lf = 0.0
    if hf < POWER_FLOOR:
        hf = 0.0
    if lf == 0.0 and hf == 0.0:
        warnings.warn(
            "band powers are numerically zero; LF/HF undefined",
            DegenerateSpectrumWarning,
            stacklevel=2,
        )
    lf_hf = lf / hf if hf > 0.0 else None
    return HrvMetrics(
        lf_power=lf, hf_power=hf, lf_hf=lf_hf, window_s=rr.duration_s
    )


def compute_all(rr: RRSeries) -> HrvMetrics:
    return compute_time_domain(rr).merged_with(compute_frequency_domain(rr))


@dataclass(frozen=True)
class MetricTargets:
    """Targets for synthesize_rr; lf_hf may be omitted."""

    mean_rr_ms: float
    sdnn_ms: float
    rmssd_ms: float
    lf_hf: float | None = None


# Component centers for the synthesizer (Hz). VLF sits below the LF band,
# the jitter component above the HF band; neither moves the LF/HF ratio.
_F_VLF = 0.025
_F_LF = 0.095
_F_HF = 0.275


def _d2(f: float, delta_s: float) -> float:
    # Power gain of the first-difference filter at frequency f.
    return 4.0 * math.sin(math.pi * f * delta_s) ** 2


def _solve_powers(
    s2: float, r2: float, ratio: float, delta_s: float
) -> tuple[float, float, float, float, float | None]:
    """Allocate variance among vlf / lf / hf / jitter components.

    Returns (p_vlf, p_lf, p_hf, p_jitter, f_jitter). The analyzed-band
    power q is split so that lf/hf equals `ratio`; the slack components
    make the total variance and the successive-difference power come out
    at s2 and r2.
    """
    nyq = 1.0 / (2.0 * delta_s)
    f_j: float | None = 0.5 * (0.42 + 0.95 * nyq)
    if f_j <= 0.42:
        f_j = None
    d2v = _d2(_F_VLF, delta_s)
    d_band = (ratio * _d2(_F_LF, delta_s) + _d2(_F_HF, delta_s)) / (1.0 + ratio)
    if r2 <= s2 * d_band:
        if d_band <= d2v:
            raise InfeasibleTargetsError("degenerate band geometry for this mean RR")
        q = (r2 - d2v * s2) / (d_band - d2v)
        if q < 0.0:
            raise InfeasibleTargetsError(
                "rmssd target too low relative to sdnn target"
            )
        q = min(q, s2)
        p_vlf, p_j = s2 - q, 0.0
    else:
        if f_j is None:
            raise InfeasibleTargetsError(
                "rmssd target too high relative to sdnn for this mean RR"
            )
        d2j = _d2(f_j, delta_s)
        if r2 > s2 * d2j:
            raise InfeasibleTargetsError(
                "rmssd target too high relative to sdnn target"
            )
        q = (d2j * s2 - r2) / (d2j - d_band)
        q = min(max(q, 0.0), s2)
        p_vlf, p_j = 0.0, s2 - q
    p_hf = q / (1.0 + ratio)
    p_lf = ratio * p_hf
    return p_vlf, p_lf, p_hf, p_j, f_j


def synthesize_rr(
    targets: MetricTargets,
    duration_s: float,
    seed: int,
    ranges: ReferenceRanges | None = None,
) -> RRSeries:
    """Generate an RR series whose measured metrics match the targets.

    The round trip through compute_time_domain / compute_frequency_domain
    lands within 5% relative on mean/sdnn/rmssd and 15% on lf_hf, or an
    InfeasibleTargetsError is raised; targets are never silently clipped.
    Identical seeds produce identical series.
    """
    if duration_s < MIN_RECORDING_S:
        raise ValueError(f"duration_s must be at least {MIN_RECORDING_S:.0f} s")
    mean, sdnn_t, rmssd_t = targets.mean_rr_ms, targets.sdnn_ms, targets.rmssd_ms
    if sdnn_t < 0.0 or rmssd_t < 0.0:
        raise InfeasibleTargetsError("sdnn and rmssd targets must be nonnegative")
    if not (SYNTH_MEAN_RR_MS[0] <= mean <= SYNTH_MEAN_RR_MS[1]):
        raise InfeasibleTargetsError(
            f"mean_rr_ms {mean} outside generator band {SYNTH_MEAN_RR_MS}"
        )
    if ranges is not None:
        pairs = [("sdnn", sdnn_t), ("rmssd", rmssd_t), ("mean_rr", mean)]
        if targets.lf_hf is not None:
            pairs.append(("lf_hf", targets.lf_hf))
        for name, value in pairs:
            r = ranges.get(name)
            if r is not None and not (r.general_min <= value <= r.general_max):
                if not (name in ("sdnn", "rmssd") and value == 0.0):
                    raise InfeasibleTargetsError(
                        f"target {name}={value} outside general range "
                        f"[{r.general_min}, {r.general_max}]"
                    )

    delta = mean / 1000.0
    n = int(math.ceil(duration_s / delta)) + 2

    if sdnn_t == 0.0:
        if rmssd_t != 0.0:
            raise InfeasibleTargetsError("rmssd target must be 0 when sdnn target is 0")
        return RRSeries(tuple([mean] * n))
    if rmssd_t == 0.0:
        raise InfeasibleTargetsError("rmssd target 0 requires sdnn target 0")

    ratio_t = targets.lf_hf if targets.lf_hf is not None else 1.5
    if ratio_t <= 0.0:
        raise InfeasibleTargetsError("lf_hf target must be positive")

    rng = np.random.default_rng(seed)
    freqs = np.fft.rfftfreq(n, d=delta)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=freqs.size)
    nyq = 1.0 / (2.0 * delta)
    times = np.arange(n) * delta

    kappa = beta = scale = 1.0
    best: tuple[np.ndarray, tuple[float, float, float]] | None = None
    for _ in range(8):
        p_vlf, p_lf, p_hf, p_j, f_j = _solve_powers(
            sdnn_t**2, (rmssd_t**2) / beta, ratio_t / kappa, delta
        )
        components = [
            (p_vlf, _F_VLF, 0.012, 0.035, 0.006),
            (p_lf, _F_LF, 0.05, 0.14, 0.006),
            (p_hf, _F_HF, 0.17, 0.38, 0.006),
        ]
        if p_j > 0.0 and f_j is not None:
            components.append((p_j, f_j, 0.42, 0.97 * nyq, 0.01))
        p_bin = np.zeros(freqs.size)
        for power, center, lo, hi, sigma in components:
            if power <= 0.0:
                continue
            mask = (freqs >= lo) & (freqs <= hi)
            w = np.exp(-0.5 * ((freqs - center) / sigma) ** 2) * mask
            total = w.sum()
            if total == 0.0:
                raise InfeasibleTargetsError(
                    "recording too short to resolve the synthesis bands"
                )
            p_bin += power * w / total
        amps = np.sqrt(2.0 * p_bin) * scale
        x = amps @ np.cos(2.0 * np.pi * np.outer(freqs, times) + phases[:, None])
        x = mean + (x - x.mean())

        series = RRSeries(tuple(x)) if _plausible(x) else None
        if series is None:
            raise InfeasibleTargetsError(
                "targets drive intervals outside the plausibility band"
            )
        td = compute_time_domain(series)
        fd = compute_frequency_domain(series)
        ratio_a = fd.lf_hf if fd.lf_hf is not None else float("inf")
        errs = (
            abs(td.sdnn_ms / sdnn_t - 1.0),
            abs(td.rmssd_ms / rmssd_t - 1.0),
            abs(ratio_a / ratio_t - 1.0) if targets.lf_hf is not None else 0.0,
        )
        if best is None or sum(errs) < sum(best[1]):
            best = (x, errs)
        if errs[0] < 0.02 and errs[1] < 0.025 and errs[2] < 0.07:
            return series
        scale *= sdnn_t / td.sdnn_ms
        beta *= (td.rmssd_ms / rmssd_t) ** 2 / (td.sdnn_ms / sdnn_t) ** 2
        if targets.lf_hf is not None and math.isfinite(ratio_a) and ratio_a > 0:
            kappa *= ratio_a / ratio_t

    assert best is not None
    x, errs = best
    if errs[0] <= 0.05 and errs[1] <= 0.05 and errs[2] <= 0.15:
        return RRSeries(tuple(x))
    raise InfeasibleTargetsError(
        f"calibration failed to reach targets (relative errors {errs})"
    )


def _plausible(x: np.ndarray) -> bool:
    return bool(x.min() >= PLAUSIBLE_MS[0] and x.max() <= PLAUSIBLE_MS[1])

"""Sleep-apnea backend analytic: SpO2 dip detection, AHI scoring, heart stats.

A dip opens at the first sample whose SpO2 drops below the threshold and
stays open until a sample rises above it; samples exactly at the threshold
extend an open dip but never start one. The dip count normalized per hour is
the AHI, classified No/Minimal, Mild, Moderate, or Severe at 5/15/30.

All functions are pure over immutable traces and safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .model import (
    ModelError,
    OximeterSample,
    Severity,
    canonical_json_bytes,
    parse_input_file,
    samples_to_wire,
)


@dataclass(frozen=True)
class AnalyticConfig:
    spo2_threshold: int = 88
    hr_window_samples: int = 20  # 10 s at the default 2 Hz sensing rate
    hr_rise_bpm: float = 5.0
    verify_dips: bool = True

    def __post_init__(self):
        if not 0 < self.spo2_threshold <= 100:
            raise ModelError("spo2_threshold must be in (0, 100]")
        if self.hr_window_samples < 1:
            raise ModelError("hr_window_samples must be >= 1")


DEFAULT_CONFIG = AnalyticConfig()


@dataclass(frozen=True)
class DipEvent:
    start_index: int
    end_index: int
    min_spo2_in_dip: int
    hr_verified: bool


@dataclass(frozen=True)
class DipSummary:
    raw: int
    verified: int
    events: tuple[DipEvent, ...]


def dip_rise_verified(samples: Sequence[OximeterSample], start_index: int, config: AnalyticConfig) -> bool:
    """Check for a heart-rate rise around a dip start.

    The maximum HR over the dip-start sample and the window after it must
    exceed the mean HR over the window before it by at least hr_rise_bpm.
    Windows truncate at trace ends; an empty pre-window passes vacuously.
    """
    w = config.hr_window_samples
    pre = samples[max(0, start_index - w):start_index]
    if not pre:
        return True
    pre_mean = sum(s.heart_rate_bpm for s in pre) / len(pre)
    post = samples[start_index:start_index + w + 1]
    post_max = max(s.heart_rate_bpm for s in post)
    return post_max - pre_mean >= config.hr_rise_bpm


def count_dips(samples: Sequence[OximeterSample], config: AnalyticConfig = DEFAULT_CONFIG) -> DipSummary:
    """Run the dip state machine over a time-ordered trace."""
    threshold = config.spo2_threshold
    events: list[DipEvent] = []
    in_dip = False
    start = 0
    dip_min = 101
    for i, s in enumerate(samples):
        if not in_dip:
            if s.spo2_pct < threshold:
                in_dip = True
                start = i
                dip_min = s.spo2_pct
        else:
            if s.spo2_pct > threshold:
                events.append(DipEvent(start, i - 1, dip_min, False))
                in_dip = False
            else:
                dip_min = min(dip_min, s.spo2_pct)
    if in_dip:
        events.append(DipEvent(start, len(samples) - 1, dip_min, False))

    if config.verify_dips:
        events = [
            DipEvent(e.start_index, e.end_index, e.min_spo2_in_dip,
                     dip_rise_verified(samples, e.start_index, config))
            for e in events
        ]
        verified = sum(1 for e in events if e.hr_verified)
    else:
        events = [DipEvent(e.start_index, e.end_index, e.min_spo2_in_dip, True) for e in events]
        verified = len(events)
    return DipSummary(raw=len(events), verified=verified, events=tuple(events))


def compute_ahi(dip_count: int, recorded_seconds: float) -> float:
    if recorded_seconds <= 0:
        raise ModelError("recorded_seconds must be positive")
    return dip_count * 3600.0 / recorded_seconds


def classify(ahi_per_hour: float) -> Severity:
    """Map an AHI to its severity band; lower bounds are inclusive."""
    if ahi_per_hour < 0:
        raise ModelError("ahi_per_hour must be non-negative")
    if ahi_per_hour < 5:
        return Severity.NO_MINIMAL
    if ahi_per_hour < 15:
        return Severity.MILD
    if ahi_per_hour < 30:
        return Severity.MODERATE
    return Severity.SEVERE


@dataclass(frozen=True)
class HeartStats:
    hr_min: float
    hr_max: float
    hr_avg: float
    hr_avg_delta: float
    min_spo2: int


def heart_stats(samples: Sequence[OximeterSample]) -> HeartStats:
    if not samples:
        raise ModelError("heart_stats requires a non-empty trace")
    rates = [s.heart_rate_bpm for s in samples]
    if len(rates) > 1:
        avg_delta = sum(abs(b - a) for a, b in zip(rates, rates[1:])) / (len(rates) - 1)
    else:
        avg_delta = 0.0
    return HeartStats(
        hr_min=float(min(rates)),
        hr_max=float(max(rates)),
        hr_avg=sum(rates) / len(rates),
        hr_avg_delta=avg_delta,
        min_spo2=min(s.spo2_pct for s in samples),
    )


def extract_dip_patterns(
    samples: Sequence[OximeterSample],
    events: Sequence[DipEvent],
    config: AnalyticConfig = DEFAULT_CONFIG,
) -> list[list[OximeterSample]]:
    """Slice the trace around each dip, one window per event, clipped to bounds.

    The HR sub-series around a dip stands in for a recorded ECG segment.
    """
    w = config.hr_window_samples
    out = []
    for e in events:
        lo = max(0, e.start_index - w)
        hi = min(len(samples), e.end_index + w + 1)
        out.append(list(samples[lo:hi]))
    return out


def trace_duration_seconds(samples: Sequence[OximeterSample]) -> float:
    """Recording length derived from the trace itself (the input file carries
    no explicit duration): the final timestamp in seconds."""
    if not samples:
        return 0.0
    return samples[-1].timestamp_ms / 1000.0


def result_fields(samples: Sequence[OximeterSample], config: AnalyticConfig = DEFAULT_CONFIG) -> dict:
    """Analysis output as a plain dict (everything but task id and latency).

    Empty traces yield zero counts with the heart statistics nulled out to
    flag that no signal was seen.
    """
    if not samples:
        return {
            "dip_count_raw": 0,
            "dip_count_verified": 0,
            "ahi_per_hour": 0.0,
            "severity": Severity.NO_MINIMAL.value,
            "min_spo2": None,
            "hr_min": None,
            "hr_max": None,
            "hr_avg": None,
            "hr_avg_delta": None,
            "dip_patterns": [],
        }
    summary = count_dips(samples, config)
    effective = summary.verified if config.verify_dips else summary.raw
    duration = trace_duration_seconds(samples)
    ahi = compute_ahi(effective, duration) if duration > 0 else 0.0
    stats = heart_stats(samples)
    patterns = extract_dip_patterns(samples, summary.events, config)
    return {
        "dip_count_raw": summary.raw,
        "dip_count_verified": summary.verified if config.verify_dips else summary.raw,
        "ahi_per_hour": ahi,
        "severity": classify(ahi).value,
        "min_spo2": stats.min_spo2,
        "hr_min": stats.hr_min,
        "hr_max": stats.hr_max,
        "hr_avg": stats.hr_avg,
        "hr_avg_delta": stats.hr_avg_delta,
        "dip_patterns": [samples_to_wire(p) for p in patterns],
    }


def analyze(input_file_bytes: bytes, config: AnalyticConfig = DEFAULT_CONFIG) -> bytes:
    """Whole backend program: parse the input file, emit the output file.

    Output is canonical JSON, byte-identical for identical input and config.
    Parse errors propagate with their line numbers.
    """
    samples = parse_input_file(input_file_bytes)
    return canonical_json_bytes(result_fields(samples, config))


def parse_output(output_file_bytes: bytes) -> dict:
    try:
        fields = json.loads(output_file_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"bad analytic output: {exc}") from None
    if not isinstance(fields, dict):
        raise ModelError("analytic output must be a JSON object")
    return fields

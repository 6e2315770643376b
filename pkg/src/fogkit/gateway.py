"""Gateway stand-in for the pulse-oximeter front end.

Simulates an oximeter stream (or replays a scripted trace), drives the
record -> ingest -> analyze -> poll session flow against a broker, and
renders the chain status table.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path

from .analytic import classify
from .model import (
    ModelError,
    MsgType,
    OximeterSample,
    ParseError,
    SignalChunk,
    ingest_body,
    parse_input_file,
)
from .transport import ByteAccount, HttpClient, RemoteError, TransportError

log = logging.getLogger(__name__)

PROFILES = ("healthy", "mild", "moderate", "severe", "scripted")

# Dip injection rates per hour; the midpoints of the severity bands (healthy
# traces carry no dips at all).
_PROFILE_RATES = {"healthy": 0.0, "mild": 10.0, "moderate": 22.0, "severe": 45.0}

DEFAULT_PAD_BYTES = 18432  # 18 KB transmitted per chunk

_DIP_LEN_RANGE = (3, 8)
_HR_RISE_SPAN = 10  # samples of elevated HR from each dip start


class GatewayError(Exception):
    def __init__(self, message: str, exit_code: int):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass(frozen=True)
class SessionConfig:
    master_address: str = ""
    record_seconds: float = 180.0
    sensing_hz: float = 2.0
    profile: str = "healthy"
    seed: int = 0
    script_path: str | None = None
    pad_to_bytes: int = DEFAULT_PAD_BYTES
    session_id: str = ""
    app_id: str | None = None
    poll_ms: int = 250
    timeout_seconds: float = 120.0

    def __post_init__(self):
        if self.record_seconds <= 0:
            raise ModelError("record_seconds must be positive")
        if self.sensing_hz <= 0:
            raise ModelError("sensing_hz must be positive")
        if self.profile not in PROFILES:
            raise ModelError(f"unknown profile {self.profile!r}")
        if self.profile == "scripted" and not self.script_path:
            raise ModelError("scripted profile requires a script file")


def _target_dip_count(rate_per_hour: float, duration_seconds: float) -> int:
    """Dip count whose AHI lands in the intended band, when representable.

    Each dip over a short recording is worth a large AHI step (20/h for a
    3-minute trace), so some bands are only reachable for longer recordings;
    in that case the nearest count is used.
    """
    if rate_per_hour <= 0 or duration_seconds <= 0:
        return 0
    nominal = rate_per_hour * duration_seconds / 3600.0
    band = classify(rate_per_hour)
    best = round(nominal)
    candidates = sorted(range(0, int(nominal) + 3), key=lambda c: abs(c - nominal))
    for count in candidates:
        if classify(count * 3600.0 / duration_seconds) == band:
            return count
    return best


def simulate_stream(config: SessionConfig) -> SignalChunk:
    """Produce a seeded, reproducible trace for the configured profile."""
    session_id = config.session_id or f"sess-{config.profile}-{config.seed}"
    if config.profile == "scripted":
        try:
            raw = Path(config.script_path).read_bytes()
        except OSError as exc:
            raise GatewayError(f"cannot read script file: {exc}", 3) from None
        samples = parse_input_file(raw)
        recorded = samples[-1].timestamp_ms / 1000.0 if samples else 0.0
        return SignalChunk(session_id=session_id, samples=tuple(samples), recorded_seconds=recorded)

    rng = random.Random(config.seed)
    period_ms = 1000.0 / config.sensing_hz
    n = max(1, round(config.record_seconds * config.sensing_hz))
    hr = [68 + rng.randint(0, 6) for _ in range(n)]
    spo2 = [94 + rng.randint(0, 5) for _ in range(n)]

    duration = (n - 1) * period_ms / 1000.0  # what the analytic will infer
    count = _target_dip_count(_PROFILE_RATES[config.profile], duration) if duration > 0 else 0
    if count:
        seg = n // count
        min_len = _DIP_LEN_RANGE[1] + _HR_RISE_SPAN + 4
        if seg < min_len:
            count = max(1, n // min_len)
            seg = n // count
            log.warning("trace too short for requested dip rate; injecting %d dips", count)
        for k in range(count):
            dip_len = rng.randint(*_DIP_LEN_RANGE)
            lo = k * seg + 2
            hi = (k + 1) * seg - dip_len - _HR_RISE_SPAN - 2
            start = rng.randint(lo, max(lo, hi))
            for j in range(start, start + dip_len):
                spo2[j] = rng.randint(80, 87)
            for j in range(start, min(n, start + _HR_RISE_SPAN)):
                hr[j] = 80 + rng.randint(0, 4)

    samples = tuple(
        OximeterSample(round(i * period_ms), hr[i], spo2[i]) for i in range(n)
    )
    return SignalChunk(session_id=session_id, samples=samples, recorded_seconds=config.record_seconds)


@dataclass
class SessionReport:
    session_id: str
    task_id: str
    receipt: dict
    result: dict
    elapsed_seconds: float


def execute_session(config: SessionConfig, client: HttpClient | None = None) -> SessionReport:
    """Record, ingest, request analysis, and poll until the result arrives."""
    chunk = simulate_stream(config)
    body = ingest_body(chunk, config.pad_to_bytes)
    client = client or HttpClient("gateway", ByteAccount())
    started = time.monotonic()
    try:
        receipt = client.post(config.master_address, "/ingest", MsgType.INGEST, body)
        task = client.post(config.master_address, "/analyze", MsgType.ANALYZE,
                           {"session_id": chunk.session_id, "app_id": config.app_id})
    except TransportError as exc:
        raise GatewayError(f"broker unreachable: {exc}", 1) from None
    except RemoteError as exc:
        raise GatewayError(f"request rejected: {exc}", 2) from None
    task_id = task["task_id"]
    deadline = started + config.timeout_seconds
    while True:
        try:
            outcome = client.get(config.master_address, f"/result/{task_id}")
        except TransportError as exc:
            raise GatewayError(f"broker unreachable while polling: {exc}", 1) from None
        except RemoteError as exc:
            raise GatewayError(f"result query rejected: {exc}", 2) from None
        if outcome["status"] == "completed":
            return SessionReport(
                session_id=chunk.session_id,
                task_id=task_id,
                receipt=receipt,
                result=outcome["result"],
                elapsed_seconds=time.monotonic() - started,
            )
        if outcome["status"] == "failed":
            raise GatewayError(f"task {task_id} failed: {outcome['failure']}", 2)
        if time.monotonic() > deadline:
            raise GatewayError(f"task {task_id} still pending after {config.timeout_seconds}s", 2)
        time.sleep(config.poll_ms / 1000.0)


def render_session_report(report: SessionReport) -> str:
    r = report.result
    lines = [
        f"session {report.session_id} task {report.task_id}",
        f"  severity       : {r['severity']}",
        f"  ahi_per_hour   : {r['ahi_per_hour']:.3f}",
        f"  dips raw/ok    : {r['dip_count_raw']}/{r['dip_count_verified']}",
        f"  min SpO2       : {r['min_spo2']}",
        f"  heart rate     : min {r['hr_min']} max {r['hr_max']} avg "
        f"{r['hr_avg'] if r['hr_avg'] is None else round(r['hr_avg'], 2)}"
        f" avg-delta {r['hr_avg_delta'] if r['hr_avg_delta'] is None else round(r['hr_avg_delta'], 2)}",
        f"  dip patterns   : {len(r['dip_patterns'])}",
        f"  latency_ms     : {r['latency_ms']:.1f}",
    ]
    if report.receipt.get("block_hash"):
        lines.append(f"  block          : {report.receipt['block_hash']}")
    if report.receipt.get("warning"):
        lines.append(f"  warning        : {report.receipt['warning']}")
    return "\n".join(lines)


def fetch_chain_status(master_address: str, client: HttpClient | None = None) -> dict:
    client = client or HttpClient("gateway", ByteAccount())
    try:
        return client.get(master_address, "/chain/status")
    except TransportError as exc:
        raise GatewayError(f"broker unreachable: {exc}", 1) from None
    except RemoteError as exc:
        raise GatewayError(f"chain status rejected: {exc}", 2) from None


def render_chain_status(status: dict) -> str:
    if not status.get("blockchain_enabled"):
        return "chain disabled on this master"
    master = status["master"]
    lines = [
        f"master chain: length {master['length']} tip {master['tip_hash']}",
        f"{'node':20} {'len':>5} {'tip':64} flag",
    ]
    for row in status["workers"]:
        tip = row.get("tip_hash") or "-"
        length = row.get("length") if row.get("length") is not None else "-"
        flag = "ok" if row.get("matches_master") else "MISMATCH"
        if row.get("error"):
            flag = f"UNREACHABLE ({row['error']})"
        lines.append(f"{row['node_id']:20} {length!s:>5} {tip:64} {flag}")
    return "\n".join(lines)

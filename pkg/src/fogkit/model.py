"""Shared domain types, canonical serializations, and the JSON-over-HTTP envelope.

Everything defined here is immutable after construction and safe to share
between threads. The wire format is canonical JSON (sorted keys, no spaces,
UTF-8) so that encoding the same value twice yields identical bytes; the
bench harness relies on that for byte-accurate network accounting.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class ModelError(ValueError):
    """A domain value violates its invariants."""


class ParseError(ModelError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class EnvelopeError(ModelError):
    """Wire envelope cannot be encoded or decoded."""


class NodeRole(str, Enum):
    BROKER = "broker"
    COMPUTE = "compute-worker"
    REPOSITORY = "repository-worker"
    CLOUD = "cloud-instance"


WORKER_ROLES = frozenset({NodeRole.COMPUTE, NodeRole.REPOSITORY})


class Severity(str, Enum):
    NO_MINIMAL = "NoMinimal"
    MILD = "Mild"
    MODERATE = "Moderate"
    SEVERE = "Severe"


class MsgType(str, Enum):
    REGISTER = "register"
    INGEST = "ingest"
    ANALYZE = "analyze"
    RESULT_QUERY = "result_query"
    CHAIN_STATUS = "chain_status"
    HEALTH = "health"
    COMPLETE = "task_complete"
    WORKER_LIST = "worker_list"
    EXECUTE = "execute"
    STATUS = "status"
    DATA_STORE = "data_store"
    DATA_FETCH = "data_fetch"
    CREDENTIAL_PUT = "credential_put"
    CREDENTIAL_GET = "credential_get"
    BLOCK_PUSH = "block_push"
    IMAGE_PUSH = "image_push"
    CHAIN_TIP = "chain_tip"
    CHAIN_FETCH = "chain_fetch"
    CHAIN_REPLACE = "chain_replace"
    APP_FETCH = "app_fetch"
    PROMOTION = "promotion"
    CLOUD_RECORD = "cloud_record"
    CLOUD_RESULT = "cloud_result"
    ACK = "ack"
    ERROR = "error"


def canonical_json_bytes(obj) -> bytes:
    """Deterministic JSON encoding: sorted keys, minimal separators, UTF-8."""
    try:
        text = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    except (TypeError, ValueError) as exc:
        raise EnvelopeError(f"value is not JSON-serializable: {exc}") from None
    return text.encode("utf-8")


@dataclass(frozen=True)
class NodeDescriptor:
    """Identity, address, and role of one node in a deployment."""

    node_id: str
    address: str
    role: NodeRole
    capacity_slots: int = 1

    def __post_init__(self):
        if not self.node_id:
            raise ModelError("node_id must be non-empty")
        host, _, port = self.address.rpartition(":")
        if not host or not port.isdigit():
            raise ModelError(f"address {self.address!r} is not host:port")
        if self.capacity_slots < 1:
            raise ModelError("capacity_slots must be >= 1")

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "address": self.address,
            "role": self.role.value,
            "capacity_slots": self.capacity_slots,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeDescriptor":
        try:
            return cls(
                node_id=d["node_id"],
                address=d["address"],
                role=NodeRole(d["role"]),
                capacity_slots=int(d["capacity_slots"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ModelError(f"bad node descriptor: {exc}") from None


@dataclass(frozen=True)
class OximeterSample:
    """One oximeter reading: session-relative timestamp, heart rate, SpO2."""

    timestamp_ms: int
    heart_rate_bpm: int
    spo2_pct: int

    def __post_init__(self):
        if self.timestamp_ms < 0:
            raise ModelError("timestamp_ms must be non-negative")
        if self.heart_rate_bpm < 0:
            raise ModelError("heart_rate_bpm must be non-negative")
        if not 0 <= self.spo2_pct <= 100:
            raise ModelError("spo2_pct must be in [0, 100]")


@dataclass(frozen=True)
class SignalChunk:
    """A recorded oximeter trace for one session."""

    session_id: str
    samples: tuple[OximeterSample, ...]
    recorded_seconds: float

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.recorded_seconds < 0:
            raise ModelError("recorded_seconds must be non-negative")
        last = -1
        for i, s in enumerate(self.samples):
            if s.timestamp_ms <= last:
                raise ModelError(f"timestamps not strictly increasing at sample {i}")
            last = s.timestamp_ms
        if self.samples and self.recorded_seconds * 1000.0 < self.samples[-1].timestamp_ms:
            raise ModelError("recorded_seconds shorter than the trace")


@dataclass(frozen=True)
class AnalysisTask:
    """A unit of backend work tracked by a broker."""

    task_id: str
    session_id: str
    app_id: str
    input_ref: str
    created_at: int  # wall-clock ms


@dataclass(frozen=True)
class AnalysisResult:
    """Outcome of one analysis task."""

    task_id: str | None
    dip_count_raw: int
    dip_count_verified: int
    ahi_per_hour: float
    severity: Severity
    min_spo2: int | None
    hr_min: float | None
    hr_max: float | None
    hr_avg: float | None
    hr_avg_delta: float | None
    dip_patterns: tuple
    latency_ms: float | None

    def __post_init__(self):
        object.__setattr__(self, "dip_patterns", tuple(self.dip_patterns))
        if self.dip_count_verified > self.dip_count_raw:
            raise ModelError("dip_count_verified exceeds dip_count_raw")
        if self.ahi_per_hour < 0:
            raise ModelError("ahi_per_hour must be non-negative")
        if self.hr_min is not None and self.hr_avg is not None and self.hr_max is not None:
            if not (self.hr_min <= self.hr_avg <= self.hr_max):
                raise ModelError("heart statistics out of order")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "dip_count_raw": self.dip_count_raw,
            "dip_count_verified": self.dip_count_verified,
            "ahi_per_hour": self.ahi_per_hour,
            "severity": self.severity.value,
            "min_spo2": self.min_spo2,
            "hr_min": self.hr_min,
            "hr_max": self.hr_max,
            "hr_avg": self.hr_avg,
            "hr_avg_delta": self.hr_avg_delta,
            "dip_patterns": [list(map(list, p)) for p in self.dip_patterns],
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisResult":
        try:
            return cls(
                task_id=d.get("task_id"),
                dip_count_raw=int(d["dip_count_raw"]),
                dip_count_verified=int(d["dip_count_verified"]),
                ahi_per_hour=float(d["ahi_per_hour"]),
                severity=Severity(d["severity"]),
                min_spo2=d["min_spo2"],
                hr_min=d["hr_min"],
                hr_max=d["hr_max"],
                hr_avg=d["hr_avg"],
                hr_avg_delta=d["hr_avg_delta"],
                dip_patterns=tuple(tuple(map(tuple, p)) for p in d["dip_patterns"]),
                latency_ms=d.get("latency_ms"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ModelError(f"bad analysis result: {exc}") from None


@dataclass(frozen=True)
class WireEnvelope:
    """The JSON message wrapper every node exchanges over HTTP."""

    msg_type: MsgType
    sender_id: str
    body: dict
    body_bytes: int = field(init=False, compare=False, default=0)

    def __post_init__(self):
        if not isinstance(self.body, dict):
            raise EnvelopeError("envelope body must be a JSON object")
        object.__setattr__(self, "body_bytes", len(canonical_json_bytes(self.body)))


def encode_envelope(msg: WireEnvelope) -> bytes:
    """Encode an envelope to canonical bytes; decode(encode(m)) == m."""
    return canonical_json_bytes(
        {"msg_type": msg.msg_type.value, "sender_id": msg.sender_id, "body": msg.body}
    )


def decode_envelope(raw: bytes) -> WireEnvelope:
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EnvelopeError(f"undecodable envelope: {exc}") from None
    if not isinstance(obj, dict):
        raise EnvelopeError("envelope is not a JSON object")
    try:
        msg_type = MsgType(obj["msg_type"])
        sender_id = obj["sender_id"]
        body = obj["body"]
    except KeyError as exc:
        raise EnvelopeError(f"envelope missing field {exc}") from None
    except ValueError:
        raise EnvelopeError(f"unknown msg_type {obj.get('msg_type')!r}") from None
    if not isinstance(sender_id, str):
        raise EnvelopeError("sender_id must be a string")
    if not isinstance(body, dict):
        raise EnvelopeError("envelope body must be a JSON object")
    return WireEnvelope(msg_type=msg_type, sender_id=sender_id, body=body)


# --- analytic input file: "<timestamp_ms> <heart_rate_bpm> <spo2_pct>\n" ---

def serialize_trace(chunk: SignalChunk) -> bytes:
    """Render a chunk as the three-column input file the analytics consume."""
    lines = [f"{s.timestamp_ms} {s.heart_rate_bpm} {s.spo2_pct}\n" for s in chunk.samples]
    return "".join(lines).encode("ascii")


def parse_input_file(data: bytes | str) -> list[OximeterSample]:
    if isinstance(data, bytes):
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input file is not ASCII: {exc}")
    else:
        text = data
    samples: list[OximeterSample] = []
    last_ts = -1
    for line_no, line in enumerate(text.split("\n"), start=1):
        if line == "":
            continue  # trailing newline or blank line
        cols = line.split()
        if len(cols) != 3:
            raise ParseError(f"expected 3 columns, got {len(cols)}", line_no)
        try:
            ts, hr, spo2 = int(cols[0]), int(cols[1]), int(cols[2])
        except ValueError:
            raise ParseError(f"non-numeric column in {line!r}", line_no) from None
        if ts <= last_ts:
            raise ParseError(f"timestamp {ts} not greater than previous {last_ts}", line_no)
        last_ts = ts
        try:
            samples.append(OximeterSample(ts, hr, spo2))
        except ModelError as exc:
            raise ParseError(str(exc), line_no) from None
    return samples


# --- ingest body: the padded payload a gateway transmits per chunk ---

def samples_to_wire(samples: Iterable[OximeterSample]) -> list[list[int]]:
    return [[s.timestamp_ms, s.heart_rate_bpm, s.spo2_pct] for s in samples]


def samples_from_wire(rows: Sequence) -> list[OximeterSample]:
    out = []
    for row in rows:
        if len(row) != 3:
            raise ModelError(f"sample row must have 3 entries, got {row!r}")
        out.append(OximeterSample(int(row[0]), int(row[1]), int(row[2])))
    return out


def ingest_body(chunk: SignalChunk, pad_to_bytes: int = 0) -> dict:
    """Build the ingest payload, padded with a filler field up to a byte target.

    Padding keeps every transmitted chunk the same size regardless of trace
    content; the filler is part of the payload the ledger hashes.
    """
    body = {
        "session_id": chunk.session_id,
        "recorded_seconds": chunk.recorded_seconds,
        "samples": samples_to_wire(chunk.samples),
        "filler": "",
    }
    if pad_to_bytes > 0:
        deficit = pad_to_bytes - len(canonical_json_bytes(body))
        if deficit > 0:
            body["filler"] = "x" * deficit
    return body


def chunk_from_ingest_body(body: dict) -> SignalChunk:
    try:
        return SignalChunk(
            session_id=body["session_id"],
            samples=tuple(samples_from_wire(body["samples"])),
            recorded_seconds=float(body["recorded_seconds"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelError(f"bad ingest body: {exc}") from None


def b64encode_str(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_bytes(text: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise ModelError(f"bad base64 payload: {exc}") from None

"""Simulated cloud backend: a polled input file, task/thread execution models,
and a configurable WAN delay model standing in for a real provider link.

Records are handed over through an append-only newline-delimited file with an
offset cursor, polled on a fixed period. Execution happens on a bounded pool
of simulated instances; transfers sleep for the modelled WAN delay and are
charged to the byte account like any other envelope.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .analytic import (
    AnalyticConfig,
    DEFAULT_CONFIG,
    DipEvent,
    classify,
    compute_ahi,
    count_dips,
    dip_rise_verified,
    extract_dip_patterns,
    result_fields,
    trace_duration_seconds,
)
from .model import (
    ModelError,
    MsgType,
    OximeterSample,
    WireEnvelope,
    b64decode_bytes,
    canonical_json_bytes,
    chunk_from_ingest_body,
    samples_to_wire,
)
from .transport import ByteAccount

log = logging.getLogger(__name__)

RECORD_MODELS = ("task", "thread")


@dataclass(frozen=True)
class WanModel:
    rtt_ms: float = 100.0
    uplink_bps: float = 2_000_000.0  # 2 Mbps up, 7 Mbps down
    downlink_bps: float = 7_000_000.0

    def __post_init__(self):
        if self.rtt_ms <= 0 or self.uplink_bps <= 0 or self.downlink_bps <= 0:
            raise ModelError("WAN parameters must be positive")


def simulate_delay(direction: str, payload_bytes: int, wan: WanModel) -> float:
    """One-way delay in ms: half the RTT plus the serialization time."""
    if direction == "up":
        bps = wan.uplink_bps
    elif direction == "down":
        bps = wan.downlink_bps
    else:
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    return wan.rtt_ms / 2.0 + payload_bytes * 8.0 / bps * 1000.0


@dataclass(frozen=True)
class CloudInputRecord:
    task_id: str
    app_id: str
    payload_b64: str
    model: str = "task"
    shards: int = 1
    block_hash: str | None = None

    def __post_init__(self):
        if self.model not in RECORD_MODELS:
            raise ModelError(f"unknown cloud model {self.model!r}")
        if self.model == "task" and self.shards != 1:
            raise ModelError("task model requires shards == 1")
        if self.shards < 1:
            raise ModelError("shards must be >= 1")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "app_id": self.app_id,
            "payload_b64": self.payload_b64,
            "model": self.model,
            "shards": self.shards,
            "block_hash": self.block_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CloudInputRecord":
        try:
            return cls(
                task_id=d["task_id"],
                app_id=d["app_id"],
                payload_b64=d["payload_b64"],
                model=d.get("model", "task"),
                shards=int(d.get("shards", 1)),
                block_hash=d.get("block_hash"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"bad cloud record: {exc}") from None


class CloudInputFile:
    """Append-only record file with a read cursor; crash-consistent handoff."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.touch(exist_ok=True)
        self._write_lock = threading.Lock()
        self._cursor = 0

    def append(self, record: CloudInputRecord) -> int:
        line = canonical_json_bytes(record.to_dict()) + b"\n"
        with self._write_lock:
            with self.path.open("ab") as fh:
                fh.write(line)
                fh.flush()
        return len(line)

    def read_new_lines(self) -> list[bytes]:
        with self.path.open("rb") as fh:
            fh.seek(self._cursor)
            data = fh.read()
        lines = []
        consumed = 0
        for raw in data.split(b"\n"):
            if raw == b"" or consumed + len(raw) + 1 > len(data):
                break  # ignore a trailing partial line until it is complete
            lines.append(raw)
            consumed += len(raw) + 1
        self._cursor += consumed
        return lines


# --- per-shard analysis pieces and their exact merge ---

@dataclass(frozen=True)
class _ShardPiece:
    seg_start: int
    seg_len: int
    events: tuple[DipEvent, ...]  # global indices
    has_above: bool
    prefix_has_below: bool
    exit_in_dip: bool
    sum_hr: int
    min_hr: int
    max_hr: int
    sum_abs_delta: int
    first_hr: int
    last_hr: int
    min_spo2: int


def analyze_shard(
    samples: Sequence[OximeterSample],
    seg_start: int,
    seg_end: int,
    config: AnalyticConfig,
) -> _ShardPiece:
    """Analyze one contiguous segment independently.

    The segment is examined on its own for dip detection; verification windows
    read up to one window of halo context on each side, which is exactly what
    the full-trace verification around any dip starting inside the segment
    would see.
    """
    seg = samples[seg_start:seg_end]
    threshold = config.spo2_threshold
    local = count_dips(seg, replace(config, verify_dips=False))
    w = config.hr_window_samples
    halo_lo = max(0, seg_start - w)
    halo_hi = min(len(samples), seg_end + w)
    halo = samples[halo_lo:halo_hi]
    events = []
    for e in local.events:
        g_start = seg_start + e.start_index
        verified = (
            dip_rise_verified(halo, g_start - halo_lo, config) if config.verify_dips else True
        )
        events.append(DipEvent(g_start, seg_start + e.end_index, e.min_spo2_in_dip, verified))
    prefix_has_below = False
    has_above = False
    for s in seg:
        if s.spo2_pct > threshold:
            has_above = True
            break
        if s.spo2_pct < threshold:
            prefix_has_below = True
    if not has_above:
        has_above = any(s.spo2_pct > threshold for s in seg)
    rates = [s.heart_rate_bpm for s in seg]
    return _ShardPiece(
        seg_start=seg_start,
        seg_len=len(seg),
        events=tuple(events),
        has_above=has_above,
        prefix_has_below=prefix_has_below,
        exit_in_dip=bool(local.events) and local.events[-1].end_index == len(seg) - 1,
        sum_hr=sum(rates),
        min_hr=min(rates),
        max_hr=max(rates),
        sum_abs_delta=sum(abs(b - a) for a, b in zip(rates, rates[1:])),
        first_hr=rates[0],
        last_hr=rates[-1],
        min_spo2=min(s.spo2_pct for s in seg),
    )


def merge_shards(
    samples: Sequence[OximeterSample],
    pieces: Sequence[_ShardPiece],
    config: AnalyticConfig,
) -> dict:
    """Stitch shard pieces into the exact single-pass result.

    A dip left open at a shard boundary and continuing into the next shard is
    one event: the successor's spurious re-detection is folded into the
    predecessor and the predecessor's span extended. Averages merge through
    weighted sums, so the output is value-identical to the task model.
    """
    threshold = config.spo2_threshold
    merged: list[DipEvent] = []
    open_dip = False
    for piece in pieces:
        events = list(piece.events)
        if open_dip:
            seg = samples[piece.seg_start:piece.seg_start + piece.seg_len]
            close_at = None
            for i, s in enumerate(seg):
                if s.spo2_pct > threshold:
                    close_at = piece.seg_start + i
                    break
            ext_end = (close_at - 1) if close_at is not None else piece.seg_start + piece.seg_len - 1
            prev = merged[-1]
            ext_min = min(s.spo2_pct for s in samples[prev.end_index + 1:ext_end + 1]) if ext_end > prev.end_index else 101
            merged[-1] = DipEvent(
                prev.start_index, ext_end, min(prev.min_spo2_in_dip, ext_min), prev.hr_verified
            )
            if piece.prefix_has_below and events:
                events.pop(0)  # local re-detection of the continuing dip
        merged.extend(events)
        open_dip = piece.exit_in_dip if piece.has_above else (open_dip or piece.exit_in_dip)

    raw = len(merged)
    verified = sum(1 for e in merged if e.hr_verified) if config.verify_dips else raw
    n_total = sum(p.seg_len for p in pieces)
    sum_hr = sum(p.sum_hr for p in pieces)
    sum_abs = sum(p.sum_abs_delta for p in pieces)
    for prev, nxt in zip(pieces, pieces[1:]):
        sum_abs += abs(nxt.first_hr - prev.last_hr)
    duration = trace_duration_seconds(samples)
    effective = verified if config.verify_dips else raw
    ahi = compute_ahi(effective, duration) if duration > 0 else 0.0
    patterns = extract_dip_patterns(samples, merged, config)
    return {
        "dip_count_raw": raw,
        "dip_count_verified": verified,
        "ahi_per_hour": ahi,
        "severity": classify(ahi).value,
        "min_spo2": min(p.min_spo2 for p in pieces),
        "hr_min": float(min(p.min_hr for p in pieces)),
        "hr_max": float(max(p.max_hr for p in pieces)),
        "hr_avg": sum_hr / n_total,
        "hr_avg_delta": (sum_abs / (n_total - 1)) if n_total > 1 else 0.0,
        "dip_patterns": [samples_to_wire(p) for p in patterns],
    }


def split_segments(n_samples: int, shards: int) -> list[tuple[int, int]]:
    if shards < 1:
        raise ModelError("shards must be >= 1")
    if n_samples < shards:
        raise ModelError(f"cannot split {n_samples} samples into {shards} segments")
    base, extra = divmod(n_samples, shards)
    bounds = []
    start = 0
    for i in range(shards):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


class CloudExecutor:
    """The polling cloud plugin: picks up pending records and runs them."""

    def __init__(
        self,
        owner_id: str,
        input_file: CloudInputFile,
        wan: WanModel,
        result_sink: Callable[[dict], None],
        *,
        poll_ms: int = 500,
        instances: int = 2,
        slowdown: float = 1.0,
        account: ByteAccount | None = None,
        block_lookup: Callable[[str], dict | None] | None = None,
        analytic_config: AnalyticConfig = DEFAULT_CONFIG,
    ):
        self.owner_id = owner_id
        self.input_file = input_file
        self.wan = wan
        self.result_sink = result_sink
        self.poll_ms = poll_ms
        self.instances = instances
        self.slowdown = slowdown
        self.account = account or ByteAccount()
        self.block_lookup = block_lookup
        self.analytic_config = analytic_config

        self._lock = threading.Lock()
        self._states: dict[str, str] = {}
        self._quarantined: list[dict] = []
        self._cpu_busy_ms = 0.0
        self._stop = threading.Event()
        self._poller: threading.Thread | None = None
        self._record_pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix=f"{owner_id}-cloudrec")
        self._instance_pool = ThreadPoolExecutor(max_workers=instances, thread_name_prefix=f"{owner_id}-cloudvm")

    # --- lifecycle ---

    def start(self) -> None:
        self._poller = threading.Thread(target=self._poll_loop, name=f"{self.owner_id}-cloudpoll", daemon=True)
        self._poller.start()

    def stop(self) -> None:
        self._stop.set()
        if self._poller is not None:
            self._poller.join(timeout=5)
        self._record_pool.shutdown(wait=False, cancel_futures=True)
        self._instance_pool.shutdown(wait=False, cancel_futures=True)

    def _poll_loop(self) -> None:
        while not self._stop.wait(self.poll_ms / 1000.0):
            try:
                self.poll_cycle()
            except Exception:
                log.exception("%s: poll cycle failed", self.owner_id)

    # --- polling ---

    def poll_cycle(self) -> int:
        """Pick up every pending record; returns how many started running."""
        picked = 0
        for raw in self.input_file.read_new_lines():
            try:
                record = CloudInputRecord.from_dict(json.loads(raw.decode("utf-8")))
            except (ModelError, ValueError, UnicodeDecodeError) as exc:
                with self._lock:
                    self._quarantined.append({"line": raw.decode("utf-8", "replace"), "error": str(exc)})
                log.warning("%s: quarantined malformed cloud record: %s", self.owner_id, exc)
                continue
            with self._lock:
                if self._states.get(record.task_id) in ("running", "done"):
                    continue  # the state machine is one-way
                self._states[record.task_id] = "running"
            picked += 1
            self._record_pool.submit(self._execute_record, record)
        return picked

    @property
    def quarantined(self) -> list[dict]:
        with self._lock:
            return list(self._quarantined)

    def states(self) -> dict[str, str]:
        with self._lock:
            return dict(self._states)

    @property
    def cpu_busy_ms(self) -> float:
        with self._lock:
            return self._cpu_busy_ms

    # --- execution models ---

    def _execute_record(self, record: CloudInputRecord) -> None:
        try:
            if not self._verify_membership(record):
                self._finish(record, {"status": "failed", "kind": "integrity",
                                      "reason": "payload does not match its ledger block"})
                return
            payload = b64decode_bytes(record.payload_b64)
            samples = chunk_from_ingest_body(json.loads(payload.decode("utf-8"))).samples
            if record.model == "task":
                outcome = self.run_task_model(record, samples)
            else:
                outcome = self.run_thread_model(record, samples)
            self._finish(record, outcome)
        except Exception as exc:
            log.warning("%s: cloud execution of %s failed: %s", self.owner_id, record.task_id, exc)
            self._finish(record, {"status": "failed", "kind": "analytic", "reason": str(exc)})

    def _verify_membership(self, record: CloudInputRecord) -> bool:
        if record.block_hash is None or self.block_lookup is None:
            return True
        block = self.block_lookup(record.block_hash)
        return block is not None and block.get("payload_b64") == record.payload_b64

    def _charge(self, msg_type: MsgType, body: dict) -> int:
        env = WireEnvelope(msg_type=msg_type, sender_id=self.owner_id, body=body)
        self.account.add(env.body_bytes)
        return env.body_bytes

    def _sleep_ms(self, ms: float) -> None:
        if ms > 0:
            time.sleep(ms / 1000.0)

    def run_task_model(self, record: CloudInputRecord, samples) -> dict:
        """Whole input on one simulated instance, WAN-delayed both ways."""
        def instance_job() -> dict:
            self._charge(MsgType.CLOUD_RECORD, record.to_dict())
            self._sleep_ms(simulate_delay("up", len(b64decode_bytes(record.payload_b64)), self.wan))
            started = time.perf_counter()
            fields = result_fields(samples, self.analytic_config)
            exec_ms = (time.perf_counter() - started) * 1000.0 * self.slowdown
            if self.slowdown > 1.0:
                self._sleep_ms(exec_ms - exec_ms / self.slowdown)
            with self._lock:
                self._cpu_busy_ms += exec_ms
            result_body = {"task_id": record.task_id, "result": fields}
            down_bytes = self._charge(MsgType.CLOUD_RESULT, result_body)
            self._sleep_ms(simulate_delay("down", down_bytes, self.wan))
            return fields

        fields = self._instance_pool.submit(instance_job).result()
        return {"status": "completed", "result": fields}

    def run_thread_model(self, record: CloudInputRecord, samples) -> dict:
        """Input split into contiguous segments, one per simulated instance."""
        if record.shards < 2:
            raise ModelError("thread model requires at least 2 shards")
        bounds = split_segments(len(samples), record.shards)

        def shard_job(lo: int, hi: int) -> _ShardPiece:
            shard_rows = samples_to_wire(samples[lo:hi])
            shard_body = {"task_id": record.task_id, "range": [lo, hi], "samples": shard_rows}
            up_bytes = self._charge(MsgType.CLOUD_RECORD, shard_body)
            self._sleep_ms(simulate_delay("up", up_bytes, self.wan))
            started = time.perf_counter()
            piece = analyze_shard(samples, lo, hi, self.analytic_config)
            exec_ms = (time.perf_counter() - started) * 1000.0 * self.slowdown
            if self.slowdown > 1.0:
                self._sleep_ms(exec_ms - exec_ms / self.slowdown)
            with self._lock:
                self._cpu_busy_ms += exec_ms
            down_bytes = self._charge(
                MsgType.CLOUD_RESULT, {"task_id": record.task_id, "range": [lo, hi], "piece": "summary"}
            )
            self._sleep_ms(simulate_delay("down", down_bytes, self.wan))
            return piece

        futures = [self._instance_pool.submit(shard_job, lo, hi) for lo, hi in bounds]
        pieces = [f.result() for f in futures]  # any shard failure fails the task
        fields = merge_shards(samples, pieces, self.analytic_config)
        return {"status": "completed", "result": fields}

    def _finish(self, record: CloudInputRecord, outcome: dict) -> None:
        with self._lock:
            self._states[record.task_id] = "done"
        payload = {"task_id": record.task_id, "worker_id": self.owner_id, "exec_ms": 0.0,
                   "result": None, "kind": None, "reason": None}
        payload.update(outcome)
        try:
            self.result_sink(payload)
        except Exception:
            log.exception("%s: result sink failed for %s", self.owner_id, record.task_id)

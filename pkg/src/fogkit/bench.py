"""Experiment harness: runs the With/Without Interval x With/Without
Blockchain x Fog/Cloud/Integrated matrix on an in-process cluster, measures
task throughput, latency, and network bytes, and checks the expected
orderings between settings.

Every scenario analyzes the same seeded pool of pre-recorded chunks, one
sequential task per chunk, so that only the settings differ between cells.
Fast settings may drain the pool before the submission window closes; slow
ones are cut off by it.
"""

from __future__ import annotations

import csv
import io
import logging
import threading
import time
from dataclasses import dataclass, field

from .cloudsim import WanModel
from .broker import BrokerNode
from .gateway import DEFAULT_PAD_BYTES, SessionConfig, simulate_stream
from .model import ModelError, MsgType, NodeRole, SignalChunk, ingest_body
from .transport import ByteAccount, HttpClient, RemoteError, TransportError
from .worker import WorkerNode

log = logging.getLogger(__name__)

INTERVAL_MS = 5000
INTERVALS = ("with", "without")
BLOCKCHAIN = (True, False)
INFRAS = ("fog_only", "cloud_only", "integrated")

_POOL_PROFILES = ("healthy", "moderate", "severe")
_RESULT_POLL_S = 0.02
_TASK_TIMEOUT_S = 90.0
_PROMOTION_WAIT_S = 30.0


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScenarioSettings:
    interval: str
    blockchain: bool
    infra: str
    duration_seconds: int = 300
    recording_seconds: int = 180
    workers: int = 1
    seed: int = 0
    rtt_ms: float = 100.0
    difficulty: int = 3

    def __post_init__(self):
        if self.interval not in INTERVALS:
            raise ModelError(f"interval must be one of {INTERVALS}")
        if self.infra not in INFRAS:
            raise ModelError(f"infra must be one of {INFRAS}")
        if self.duration_seconds <= 0:
            raise ModelError("duration_seconds must be positive")
        if self.infra != "cloud_only" and self.workers < 1:
            raise ModelError("fog settings need at least one worker")

    @property
    def cell(self) -> str:
        return f"{self.infra}/{self.interval}-interval/chain-{'on' if self.blockchain else 'off'}"


@dataclass(frozen=True)
class FaultPlan:
    kill_master_at_s: float


@dataclass
class MetricsReport:
    settings: ScenarioSettings
    tasks_completed: int
    latency_ms: list[float]
    bytes_transferred: int
    cpu_busy_ms: float
    wall_seconds: float
    dispatch_gaps_ms: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tasks_completed != len(self.latency_ms):
            raise ModelError("tasks_completed must match the latency sample count")

    @property
    def median_latency_ms(self) -> float:
        return _median(self.latency_ms)

    @property
    def p95_latency_ms(self) -> float:
        return _percentile(self.latency_ms, 0.95)


def _median(values: list[float]) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def _percentile(values: list[float], q: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = min(len(ordered) - 1, max(0, int(round(q * len(ordered) + 0.5)) - 1))
    return ordered[idx]


def pool_size(settings: ScenarioSettings) -> int:
    """Chunks recorded ahead of a scenario.

    Sized so the paced (with-interval) schedule cannot drain it inside the
    submission window while every unpaced cell can, keeping the analyzed data
    identical across cells.
    """
    return max(2, settings.duration_seconds // 4)


def make_pool(settings: ScenarioSettings) -> list[SignalChunk]:
    chunks = []
    for i in range(pool_size(settings)):
        profile = _POOL_PROFILES[i % len(_POOL_PROFILES)]
        config = SessionConfig(
            record_seconds=settings.recording_seconds,
            profile=profile,
            seed=settings.seed * 100003 + i,
            session_id=f"s{i:04d}",
        )
        chunks.append(simulate_stream(config))
    return chunks


class _Cluster:
    def __init__(self, settings: ScenarioSettings, tag: str):
        wan = WanModel(rtt_ms=settings.rtt_ms)
        self.settings = settings
        self.repo = WorkerNode(f"{tag}-repo", role=NodeRole.REPOSITORY, capacity_slots=1)
        self.computes = [
            WorkerNode(f"{tag}-w{i}", role=NodeRole.COMPUTE, capacity_slots=1)
            for i in range(settings.workers)
        ]
        self.broker = BrokerNode(
            f"{tag}-m",
            mode=settings.infra,
            blockchain_enabled=settings.blockchain,
            difficulty=settings.difficulty,
            interval_ms=INTERVAL_MS if settings.interval == "with" else 0,
            heartbeat_ms=1000,
            wan=wan,
        )

    @property
    def workers(self) -> list[WorkerNode]:
        return [self.repo, *self.computes]

    def start(self) -> None:
        for worker in self.workers:
            worker.start()
        self.broker.start()
        for worker in self.workers:  # repo registers first and holds the image
            worker.register_with(self.broker.address)

    def stop(self) -> None:
        try:
            self.broker.stop()
        finally:
            for worker in self.workers:
                worker.stop()

    def active_brokers(self) -> list[BrokerNode]:
        brokers = [self.broker]
        for worker in self.workers:
            brokers.extend(worker._promoted_brokers)
        return brokers

    def byte_total(self, driver_account: ByteAccount) -> int:
        total = driver_account.total
        for broker in self.active_brokers():
            total += broker.account.total
        for worker in self.workers:
            total += worker.account.total
        return total

    def cpu_total_ms(self) -> float:
        total = sum(w.status().cpu_busy_ms for w in self.workers)
        for broker in self.active_brokers():
            if broker._cloud is not None:
                total += broker._cloud.cpu_busy_ms
        return total


def run_scenario(settings: ScenarioSettings, fault: FaultPlan | None = None) -> MetricsReport:
    """Drive one scenario end to end and aggregate its metrics."""
    tag = f"b{settings.seed}-{settings.infra[:3]}-{settings.interval[:4]}-{'on' if settings.blockchain else 'off'}"
    cluster = _Cluster(settings, tag)
    try:
        cluster.start()
    except Exception as exc:
        cluster.stop()
        raise ScenarioError(f"cluster launch failed: {exc}") from exc
    try:
        return _Driver(cluster, settings, fault).run()
    finally:
        cluster.stop()


class _Driver:
    def __init__(self, cluster: _Cluster, settings: ScenarioSettings, fault: FaultPlan | None):
        self.cluster = cluster
        self.settings = settings
        self.fault = fault
        self.account = ByteAccount()
        self.client = HttpClient(f"{cluster.broker.node_id}-gateway", self.account)
        self.master_address = cluster.broker.address
        self.master_id = cluster.broker.node_id
        self.kill_at_mono: float | None = None
        self.promoted_at_mono: float | None = None
        self.observed_completed: list[str] = []

    def run(self) -> MetricsReport:
        pool = make_pool(self.settings)
        started = time.monotonic()
        fault_thread = None
        if self.fault is not None:
            fault_thread = threading.Thread(target=self._fault_runner, args=(started,), daemon=True)
            fault_thread.start()
        deadline = started + self.settings.duration_seconds
        for chunk in pool:
            if time.monotonic() >= deadline:
                break
            task_id = self._submit(chunk)
            outcome_at = self._await_result(task_id)
            self.observed_completed.append(task_id)
            if self.settings.interval == "with":
                wake = outcome_at + INTERVAL_MS / 1000.0
                while True:
                    remaining = wake - time.monotonic()
                    if remaining <= 0:
                        break
                    time.sleep(remaining)
        if fault_thread is not None:
            fault_thread.join(timeout=10)
        wall = time.monotonic() - started
        return self._collect(wall, started)

    # --- fault injection ---

    def _fault_runner(self, started: float) -> None:
        delay = self.fault.kill_master_at_s - (time.monotonic() - started)
        if delay > 0:
            time.sleep(delay)
        self.kill_at_mono = time.monotonic()
        self.cluster.broker.kill()
        log.warning("fault: master %s killed at t=%.1fs", self.master_id, self.fault.kill_master_at_s)
        deadline = time.monotonic() + _PROMOTION_WAIT_S
        while time.monotonic() < deadline:
            for worker in self.cluster.workers:
                try:
                    promos = self.client.get(worker.address, "/promotion")["promotions"]
                except (TransportError, RemoteError):
                    continue
                if self.master_id in promos:
                    self.promoted_at_mono = time.monotonic()
                    return
            time.sleep(0.025)

    def _discover_master(self) -> str:
        deadline = time.monotonic() + _PROMOTION_WAIT_S
        while time.monotonic() < deadline:
            for worker in self.cluster.workers:
                try:
                    promos = self.client.get(worker.address, "/promotion")["promotions"]
                except (TransportError, RemoteError):
                    continue
                if self.master_id in promos:
                    return promos[self.master_id]
            time.sleep(0.05)
        raise ScenarioError("master lost and no replica promoted")

    def _with_failover(self, fn):
        try:
            return fn()
        except (TransportError, RemoteError) as exc:
            if self.fault is None:
                raise ScenarioError(f"node failure without fault injection: {exc}") from exc
            self.master_address = self._discover_master()
            return fn()

    # --- task flow ---

    def _submit(self, chunk: SignalChunk) -> str:
        body = ingest_body(chunk, DEFAULT_PAD_BYTES)

        def attempt() -> str:
            self.client.post(self.master_address, "/ingest", MsgType.INGEST, body)
            reply = self.client.post(self.master_address, "/analyze", MsgType.ANALYZE,
                                     {"session_id": chunk.session_id})
            return reply["task_id"]

        return self._with_failover(attempt)

    def _await_result(self, task_id: str) -> float:
        deadline = time.monotonic() + _TASK_TIMEOUT_S

        def poll() -> dict:
            return self.client.get(self.master_address, f"/result/{task_id}")

        while True:
            outcome = self._with_failover(poll)
            if outcome["status"] == "completed":
                return time.monotonic()
            if outcome["status"] == "failed":
                raise ScenarioError(f"task {task_id} failed mid-scenario: {outcome['failure']}")
            if time.monotonic() > deadline:
                raise ScenarioError(f"task {task_id} timed out")
            time.sleep(_RESULT_POLL_S)

    # --- metrics ---

    def _collect(self, wall: float, started: float) -> MetricsReport:
        active = self.cluster.active_brokers()[-1]
        entries = active.task_entries()
        latencies = [e["latency_ms"] for e in entries.values()
                     if e["state"] == "completed" and e["latency_ms"] is not None]
        gaps: list[float] = []
        per_node: dict[str, list[float]] = {}
        for broker in self.cluster.active_brokers():
            for stamp, node in broker.dispatch_times():
                per_node.setdefault(node, []).append(stamp)
        for stamps in per_node.values():
            stamps.sort()
            gaps.extend((b - a) * 1000.0 for a, b in zip(stamps, stamps[1:]))
        extras = {
            "pool_size": pool_size(self.settings),
            "observed_completed": list(self.observed_completed),
            "final_states": {t: e["state"] for t, e in entries.items()},
            "master_id": self.master_id,
        }
        if self.kill_at_mono is not None:
            extras["kill_at_s"] = self.kill_at_mono - started
            if self.promoted_at_mono is not None:
                extras["promotion_delay_s"] = self.promoted_at_mono - self.kill_at_mono
        return MetricsReport(
            settings=self.settings,
            tasks_completed=len(latencies),
            latency_ms=sorted(latencies),
            bytes_transferred=self.cluster.byte_total(self.account),
            cpu_busy_ms=self.cluster.cpu_total_ms(),
            wall_seconds=wall,
            dispatch_gaps_ms=gaps,
            extras=extras,
        )


def matrix_settings(seed: int, duration: int = 300, workers: int = 1,
                    recording: int = 180, rtt_ms: float = 100.0) -> list[ScenarioSettings]:
    cells = []
    for infra in INFRAS:
        for interval in INTERVALS:
            for blockchain in BLOCKCHAIN:
                cells.append(ScenarioSettings(
                    interval=interval, blockchain=blockchain, infra=infra,
                    duration_seconds=duration, recording_seconds=recording,
                    workers=workers, seed=seed, rtt_ms=rtt_ms,
                ))
    return cells


def run_matrix(seed: int, duration: int = 300, workers: int = 1,
               recording: int = 180, rtt_ms: float = 100.0,
               progress=None) -> list[MetricsReport]:
    reports = []
    for settings in matrix_settings(seed, duration, workers, recording, rtt_ms):
        if progress:
            progress(f"running {settings.cell} (seed {seed})")
        reports.append(run_scenario(settings))
    return reports


# --- trend assertions ---

@dataclass(frozen=True)
class TrendCheck:
    name: str
    cell: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class ReportRow:
    interval: str
    blockchain: str  # "on" | "off"
    infra: str
    tasks: int
    median_latency_ms: float
    p95_latency_ms: float
    bytes: int
    cpu_busy_ms: int


def report_row(report: MetricsReport) -> ReportRow:
    s = report.settings
    return ReportRow(
        interval=s.interval,
        blockchain="on" if s.blockchain else "off",
        infra=s.infra,
        tasks=report.tasks_completed,
        median_latency_ms=report.median_latency_ms,
        p95_latency_ms=report.p95_latency_ms,
        bytes=report.bytes_transferred,
        cpu_busy_ms=int(report.cpu_busy_ms),
    )


def _as_rows(reports) -> dict[tuple[str, str, str], ReportRow]:
    rows = {}
    for item in reports:
        row = item if isinstance(item, ReportRow) else report_row(item)
        rows[(row.infra, row.interval, row.blockchain)] = row
    expected = {(i, iv, bc) for i in INFRAS for iv in INTERVALS for bc in ("on", "off")}
    missing = expected - set(rows)
    if missing:
        raise ScenarioError(f"incomplete matrix, missing cells: {sorted(missing)}")
    return rows


def assert_trends(reports) -> list[TrendCheck]:
    """Evaluate the expected orderings over a full 12-cell matrix.

    Failed checks are reported, not raised; only an incomplete matrix is an
    error.
    """
    rows = _as_rows(reports)
    checks: list[TrendCheck] = []

    def add(name: str, cell: str, passed: bool, detail: str):
        checks.append(TrendCheck(name, cell, passed, detail))

    for iv in INTERVALS:
        for bc in ("on", "off"):
            fog, integ, cloud = (rows[("fog_only", iv, bc)], rows[("integrated", iv, bc)],
                                 rows[("cloud_only", iv, bc)])
            add("T1-tasks-fog-first", f"{iv}/{bc}",
                fog.tasks >= integ.tasks >= cloud.tasks,
                f"tasks fog={fog.tasks} integrated={integ.tasks} cloud={cloud.tasks}")
            add("L1-latency-fog-below-cloud", f"{iv}/{bc}",
                fog.median_latency_ms < cloud.median_latency_ms,
                f"median fog={fog.median_latency_ms:.1f}ms cloud={cloud.median_latency_ms:.1f}ms")
            add("N2-bytes-fog-below-cloud", f"{iv}/{bc}",
                fog.bytes < cloud.bytes,
                f"bytes fog={fog.bytes} cloud={cloud.bytes}")
    for infra in INFRAS:
        for bc in ("on", "off"):
            with_iv, without_iv = rows[(infra, "with", bc)], rows[(infra, "without", bc)]
            add("T2-interval-throttles", f"{infra}/{bc}",
                without_iv.tasks > with_iv.tasks,
                f"tasks without={without_iv.tasks} with={with_iv.tasks}")
        for iv in INTERVALS:
            on, off = rows[(infra, iv, "on")], rows[(infra, iv, "off")]
            add("T3-chain-off-not-slower", f"{infra}/{iv}",
                off.tasks >= on.tasks,
                f"tasks off={off.tasks} on={on.tasks}")
            add("N1-chain-adds-bytes", f"{infra}/{iv}",
                on.bytes > off.bytes,
                f"bytes on={on.bytes} off={off.bytes}")
    return checks


# --- CSV export / import ---

CSV_COLUMNS = ("interval", "blockchain", "infra", "tasks",
               "median_latency_ms", "p95_latency_ms", "bytes", "cpu_busy_ms")


def export_csv(reports) -> bytes:
    rows = [item if isinstance(item, ReportRow) else report_row(item) for item in reports]
    rows.sort(key=lambda r: (r.infra, r.interval, r.blockchain))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([
            r.interval, r.blockchain, r.infra, r.tasks,
            f"{r.median_latency_ms:.3f}", f"{r.p95_latency_ms:.3f}",
            r.bytes, r.cpu_busy_ms,
        ])
    return buf.getvalue().encode("ascii")


def parse_csv(data: bytes) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(data.decode("ascii")))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ScenarioError(f"unexpected CSV header: {header}")
    rows = []
    for record in reader:
        if not record:
            continue
        rows.append(ReportRow(
            interval=record[0],
            blockchain=record[1],
            infra=record[2],
            tasks=int(record[3]),
            median_latency_ms=float(record[4]),
            p95_latency_ms=float(record[5]),
            bytes=int(record[6]),
            cpu_busy_ms=int(record[7]),
        ))
    return rows

"""Master node daemon: ingests gateway data, anchors it in the ledger,
provisions fog-first/cloud-second, dispatches tasks, collects results,
monitors workers, and keeps a promotable image replicated on one worker.

Chain appends, task-state mutation, and image versioning are serialized
through one coordinator lock; reads and the HTTP surface are concurrent.
"""

from __future__ import annotations

import logging
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import apps, crypto
from .cloudsim import CloudExecutor, CloudInputFile, CloudInputRecord, WanModel
from .ledger import (
    BlockKeyRecord,
    Chain,
    resolve_majority,
    validate_chain,
)
from .model import (
    ModelError,
    MsgType,
    NodeDescriptor,
    NodeRole,
    WORKER_ROLES,
    WireEnvelope,
    b64encode_str,
    canonical_json_bytes,
    chunk_from_ingest_body,
)
from .transport import (
    ByteAccount,
    HttpClient,
    NodeHttpServer,
    RemoteError,
    TransportError,
    bad_request,
    conflict,
    not_found,
    unavailable,
)
from .worker import CRED_ARCHIVE_KEY, CRED_BLOCK_KEY

log = logging.getLogger(__name__)

QUEUED = "queued"
DISPATCHED = "dispatched"
COMPLETED = "completed"
FAILED = "failed"

FAILURE_MISS_LIMIT = 3


@dataclass
class _TaskEntry:
    task_id: str
    session_id: str
    app_id: str
    data_key: str
    created_at_ms: int
    created_mono: float
    state: str = QUEUED
    assigned_node: str | None = None
    assigned_at_ms: int | None = None
    completed_at_ms: int | None = None
    latency_ms: float | None = None
    result: dict | None = None
    failure: dict | None = None
    attempts: int = 0
    lmv: int = 0  # state version at last modification

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "session_id": self.session_id,
            "app_id": self.app_id,
            "data_key": self.data_key,
            "created_at_ms": self.created_at_ms,
            "state": self.state,
            "assigned_node": self.assigned_node,
            "assigned_at_ms": self.assigned_at_ms,
            "completed_at_ms": self.completed_at_ms,
            "latency_ms": self.latency_ms,
            "result": self.result,
            "failure": self.failure,
            "attempts": self.attempts,
            "lmv": self.lmv,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "_TaskEntry":
        entry = cls(
            task_id=d["task_id"],
            session_id=d["session_id"],
            app_id=d["app_id"],
            data_key=d["data_key"],
            created_at_ms=d["created_at_ms"],
            created_mono=time.monotonic(),
        )
        entry.state = d["state"]
        entry.assigned_node = d.get("assigned_node")
        entry.assigned_at_ms = d.get("assigned_at_ms")
        entry.completed_at_ms = d.get("completed_at_ms")
        entry.latency_ms = d.get("latency_ms")
        entry.result = d.get("result")
        entry.failure = d.get("failure")
        entry.attempts = d.get("attempts", 0)
        entry.lmv = d.get("lmv", 0)
        return entry


@dataclass
class _WorkerHandle:
    descriptor: NodeDescriptor
    borrowed: bool = False
    inflight: int = 0
    misses: int = 0
    suspect: bool = False
    next_eligible_mono: float = 0.0
    last_status: dict | None = field(default=None, repr=False)

    @property
    def idle(self) -> bool:
        return self.inflight < self.descriptor.capacity_slots and not self.suspect


class BrokerNode:
    def __init__(
        self,
        node_id: str,
        *,
        mode: str = "integrated",
        blockchain_enabled: bool = True,
        difficulty: int = 3,
        interval_ms: int = 0,
        heartbeat_ms: int = 1000,
        wan: WanModel | None = None,
        cloud_poll_ms: int = 500,
        cloud_instances: int = 2,
        cloud_slowdown: float = 1.0,
        cloud_model: str = "task",
        cloud_shards: int = 1,
        peers: tuple[str, ...] = (),
        workers: tuple[str, ...] = (),
        default_app: str = apps.SLEEP_APNEA_APP_ID,
        port: int = 0,
        initial_image: dict | None = None,
        host_worker_id: str | None = None,
    ):
        if mode not in ("fog_only", "cloud_only", "integrated"):
            raise ModelError(f"unknown provisioning mode {mode!r}")
        self.node_id = node_id
        self.mode = mode
        self.blockchain_enabled = blockchain_enabled
        self.difficulty = difficulty
        self.interval_ms = interval_ms
        self.heartbeat_ms = heartbeat_ms
        self.wan = wan or WanModel()
        self.cloud_poll_ms = cloud_poll_ms
        self.cloud_instances = cloud_instances
        self.cloud_slowdown = cloud_slowdown
        self.cloud_model = cloud_model
        self.cloud_shards = cloud_shards
        self.peers = tuple(peers)
        self.startup_workers = tuple(workers)
        self.default_app = default_app
        self.cloud_enabled = mode in ("cloud_only", "integrated")
        self._host_worker_id = host_worker_id

        self.account = ByteAccount()
        self.client = HttpClient(node_id, self.account)
        self._server = NodeHttpServer(node_id, self.account, port=port)
        self.address: str | None = None

        self._lock = threading.RLock()
        self._dispatch_cond = threading.Condition(self._lock)
        self._workers: dict[str, _WorkerHandle] = {}
        self._order: list[str] = []  # registration order
        self._tasks: dict[str, _TaskEntry] = {}
        self._sessions: dict[str, list[str]] = {}
        self._version = 0
        self._task_seq = 0
        self._ingest_seq = 0
        self._sweep_count = 0
        self._dispatch_log: list[tuple[float, str]] = []  # (monotonic s, node_id)
        self._cloud_next_eligible = 0.0
        self._started_mono = time.monotonic()
        self._stop = threading.Event()

        self._chain: Chain | None = None
        self._block_by_hash: dict[str, dict] = {}
        self._key_records: list[dict] = []
        self._archive_key_b64 = crypto.new_storage_key()

        self._replica_target: str | None = None
        self._acked_version: int | None = None
        self._acked_chain_len = 0
        self._acked_keyrec_len = 0
        self._replica_lagging = False
        self._replicate_mutex = threading.Lock()

        self._cloud_id = f"{node_id}::cloud"
        self._cloud_dir = tempfile.TemporaryDirectory(prefix=f"broker-{node_id}-cloud-")
        self._cloud_file: CloudInputFile | None = None
        self._cloud: CloudExecutor | None = None

        self._threads: list[threading.Thread] = []

        if initial_image is not None:
            self._restore(initial_image)
        elif self.blockchain_enabled:
            self._chain = Chain.new(self.difficulty)
            self._index_block(self._chain.blocks[0])

        self._routes()

    # --- lifecycle ---

    def start(self) -> str:
        self.address = self._server.start()
        self._started_mono = time.monotonic()
        if self.cloud_enabled:
            self._cloud_file = CloudInputFile(Path(self._cloud_dir.name) / "cloud-input.ndjson")
            self._cloud = CloudExecutor(
                self._cloud_id,
                self._cloud_file,
                self.wan,
                result_sink=self._cloud_sink,
                poll_ms=self.cloud_poll_ms,
                instances=self.cloud_instances,
                slowdown=self.cloud_slowdown,
                account=self.account,
                block_lookup=self._lookup_block,
            )
            self._cloud.start()
            with self._lock:
                if self._cloud_id not in self._workers:
                    self._add_handle(NodeDescriptor(
                        self._cloud_id, "127.0.0.1:0", NodeRole.CLOUD,
                        max(1, self.cloud_instances),
                    ))
        for t_name, fn in (("sweep", self._sweep_loop), ("dispatch", self._dispatch_loop)):
            t = threading.Thread(target=fn, name=f"{self.node_id}-{t_name}", daemon=True)
            t.start()
            self._threads.append(t)
        for addr in self.startup_workers:
            try:
                reply = self.client.get(addr, "/health")
                self.register_worker(NodeDescriptor.from_dict(reply["node"]))
            except (TransportError, RemoteError, ModelError) as exc:
                log.warning("%s: startup worker %s unreachable: %s", self.node_id, addr, exc)
        return self.address

    def stop(self) -> None:
        self._stop.set()
        with self._dispatch_cond:
            self._dispatch_cond.notify_all()
        if self._cloud is not None:
            self._cloud.stop()
        for t in self._threads:
            t.join(timeout=5)
        self._server.stop()
        self.client.close()
        self._cloud_dir.cleanup()

    def kill(self) -> None:
        """Crash simulation: drop off the network without any handover."""
        self._stop.set()
        with self._dispatch_cond:
            self._dispatch_cond.notify_all()
        self._server.stop()
        if self._cloud is not None:
            self._cloud.stop()

    @property
    def descriptor(self) -> NodeDescriptor:
        if self.address is None:
            raise RuntimeError("broker not started")
        return NodeDescriptor(self.node_id, self.address, NodeRole.BROKER, 1)

    # --- registration ---

    def register_worker(self, desc: NodeDescriptor, borrowed: bool = False) -> dict:
        if desc.role not in WORKER_ROLES and desc.role is not NodeRole.CLOUD:
            raise bad_request(f"{desc.role.value} cannot register as a worker")
        with self._lock:
            existing = self._workers.get(desc.node_id)
            if existing is not None:
                if existing.descriptor.address != desc.address:
                    raise conflict(
                        f"{desc.node_id} already registered at {existing.descriptor.address}"
                    )
                return {"registered": True, "already_known": True}
            self._add_handle(desc, borrowed=borrowed)
            self._version += 1
        if not borrowed:
            self._push_archive_key(desc)
            self._sync_chain_to(desc)
            with self._lock:
                if self._replica_target is None and desc.role in WORKER_ROLES:
                    self._set_replica_target(desc.node_id)
            self._replicate_now()
        self._notify_dispatch()
        return {"registered": True, "already_known": False}

    def _add_handle(self, desc: NodeDescriptor, borrowed: bool = False) -> None:
        self._workers[desc.node_id] = _WorkerHandle(descriptor=desc, borrowed=borrowed)
        self._order.append(desc.node_id)

    def _set_replica_target(self, node_id: str | None) -> None:
        self._replica_target = node_id
        self._acked_version = None
        self._acked_chain_len = 0
        self._acked_keyrec_len = 0
        self._replica_lagging = False

    def _push_archive_key(self, desc: NodeDescriptor) -> None:
        try:
            self.client.post(desc.address, "/credential", MsgType.CREDENTIAL_PUT, {
                "master_id": self.node_id,
                "kind": CRED_ARCHIVE_KEY,
                "block_index": None,
                "payload": self._archive_key_b64,
            })
        except (TransportError, RemoteError) as exc:
            log.warning("%s: archive key push to %s failed: %s", self.node_id, desc.node_id, exc)

    def _sync_chain_to(self, desc: NodeDescriptor) -> None:
        if not self.blockchain_enabled:
            return
        with self._lock:
            chain = self._chain.to_dict()
            records = list(self._key_records)
        if len(chain["blocks"]) <= 1 and not records:
            return
        try:
            for record in records:
                self.client.post(desc.address, "/credential", MsgType.CREDENTIAL_PUT, {
                    "master_id": self.node_id,
                    "kind": CRED_BLOCK_KEY,
                    "block_index": record["block_index"],
                    "payload": record["pub_key_b64"],
                })
            self.client.post(desc.address, "/chain/replace", MsgType.CHAIN_REPLACE,
                             {"master_id": self.node_id, "chain": chain})
        except (TransportError, RemoteError) as exc:
            log.warning("%s: chain sync to %s failed: %s", self.node_id, desc.node_id, exc)

    # --- ingest ---

    def ingest(self, body: dict) -> dict:
        chunk = chunk_from_ingest_body(body)
        if not chunk.samples:
            raise bad_request("ingest requires a non-empty trace")
        body_bytes = canonical_json_bytes(body)
        repo = self._pick_repository()
        if repo is None:
            raise unavailable("no repository worker registered")
        with self._lock:
            self._ingest_seq += 1
            data_key = f"{self.node_id}/{chunk.session_id}/{self._ingest_seq}"
        try:
            self.client.post(repo.descriptor.address, "/data", MsgType.DATA_STORE, {
                "data_key": data_key,
                "owner_master": self.node_id,
                "payload_b64": b64encode_str(body_bytes),
            })
        except (TransportError, RemoteError) as exc:
            raise unavailable(f"repository store failed: {exc}") from None

        block_hash = None
        warning = None
        if self.blockchain_enabled:
            block_hash, warning = self._anchor_payload(body_bytes)

        with self._lock:
            self._sessions.setdefault(chunk.session_id, []).append(data_key)
            self._version += 1
        self._replicate_now()
        receipt = {"data_key": data_key, "block_hash": block_hash}
        if warning:
            receipt["warning"] = warning
        return receipt

    def _anchor_payload(self, payload: bytes) -> tuple[str, str | None]:
        with self._lock:
            block = self._chain.append_payload(payload)
            self._index_block(block)
            record = {"block_index": block.index, "pub_key_b64": block.pub_key_b64,
                      "distributed_to": []}
            self._key_records.append(record)
            self._version += 1
            targets = [h for h in self._worker_handles() if not h.borrowed]
        failures = 0
        rejected = False
        delivered = []
        for handle in targets:
            addr = handle.descriptor.address
            try:
                self.client.post(addr, "/credential", MsgType.CREDENTIAL_PUT, {
                    "master_id": self.node_id,
                    "kind": CRED_BLOCK_KEY,
                    "block_index": block.index,
                    "payload": block.pub_key_b64,
                })
                reply = self.client.post(addr, "/block", MsgType.BLOCK_PUSH, {
                    "master_id": self.node_id,
                    "difficulty": self.difficulty,
                    "block": block.to_dict(),
                })
                if reply.get("accepted"):
                    delivered.append(handle.descriptor.node_id)
                else:
                    rejected = True
                    log.warning("%s: %s rejected block %d: %s", self.node_id,
                                handle.descriptor.node_id, block.index, reply.get("verdict"))
            except (TransportError, RemoteError) as exc:
                failures += 1
                log.warning("%s: block push to %s failed: %s", self.node_id,
                            handle.descriptor.node_id, exc)
        if rejected:
            if self.repair_replicas():
                delivered = [h.descriptor.node_id for h in targets
                             if self._replica_tip_matches(h, block.hash)]
        with self._lock:
            record["distributed_to"] = sorted(delivered)
        undelivered = len(targets) - len(delivered)
        if targets and undelivered * 2 > len(targets):
            raise unavailable(f"block {block.index} undelivered to {undelivered}/{len(targets)} workers")
        warning = None
        if undelivered:
            warning = f"block {block.index} missing on {undelivered} worker(s)"
        return block.hash, warning

    def _replica_tip_matches(self, handle: _WorkerHandle, tip_hash: str) -> bool:
        try:
            reply = self.client.get(handle.descriptor.address, "/chain/tip",
                                    params={"master": self.node_id})
            return reply.get("tip_hash") == tip_hash
        except (TransportError, RemoteError):
            return False

    def _index_block(self, block) -> None:
        self._block_by_hash[block.hash] = block.to_dict()

    def _lookup_block(self, block_hash: str) -> dict | None:
        with self._lock:
            return self._block_by_hash.get(block_hash)

    def _pick_repository(self) -> _WorkerHandle | None:
        with self._lock:
            for node_id in self._order:
                handle = self._workers.get(node_id)
                if handle and not handle.borrowed and handle.descriptor.role is NodeRole.REPOSITORY:
                    return handle
        return None

    def _worker_handles(self) -> list[_WorkerHandle]:
        return [self._workers[n] for n in self._order
                if n in self._workers and self._workers[n].descriptor.role in WORKER_ROLES]

    # --- ledger repair ---

    def repair_replicas(self) -> bool:
        """Copy the majority chain over any deviant replica."""
        with self._lock:
            handles = [h for h in self._worker_handles() if not h.borrowed]
        replicas = {}
        for handle in handles:
            try:
                reply = self.client.get(handle.descriptor.address, "/chain",
                                        params={"master": self.node_id})
                replicas[handle.descriptor.node_id] = Chain.from_dict(reply["chain"])
            except (TransportError, RemoteError, ModelError) as exc:
                log.warning("%s: replica fetch from %s failed: %s", self.node_id,
                            handle.descriptor.node_id, exc)
        if not replicas:
            return False
        outcome = resolve_majority(replicas)
        if outcome.no_majority:
            log.error("%s: no majority among %d replicas; operator attention required",
                      self.node_id, len(replicas))
            return False
        for node_id in outcome.deviants:
            handle = self._workers.get(node_id)
            if handle is None:
                continue
            try:
                self.client.post(handle.descriptor.address, "/chain/replace", MsgType.CHAIN_REPLACE, {
                    "master_id": self.node_id,
                    "chain": outcome.canonical.to_dict(),
                })
                log.warning("%s: repaired deviant replica on %s", self.node_id, node_id)
            except (TransportError, RemoteError) as exc:
                log.warning("%s: repair push to %s failed: %s", self.node_id, node_id, exc)
        return True

    # --- task intake / provisioning / dispatch ---

    def create_task(self, session_id: str, app_id: str | None = None) -> str:
        with self._lock:
            pending = self._sessions.get(session_id)
            if not pending:
                raise not_found(f"no unanalyzed data for session {session_id}")
            data_key = pending.pop(0)
            self._task_seq += 1
            task_id = f"t{self._task_seq:05d}"
            self._version += 1
            entry = _TaskEntry(
                task_id=task_id,
                session_id=session_id,
                app_id=app_id or self.default_app,
                data_key=data_key,
                created_at_ms=int(time.time() * 1000),
                created_mono=time.monotonic(),
                lmv=self._version,
            )
            self._tasks[task_id] = entry
        self._replicate_now()
        self._notify_dispatch()
        return task_id

    def _notify_dispatch(self) -> None:
        with self._dispatch_cond:
            self._dispatch_cond.notify_all()

    def _dispatch_loop(self) -> None:
        while not self._stop.is_set():
            with self._dispatch_cond:
                self._dispatch_cond.wait(timeout=0.1)
                if self._stop.is_set():
                    return
            try:
                self._dispatch_pending()
            except Exception:
                log.exception("%s: dispatch pass failed", self.node_id)

    def _dispatch_pending(self) -> None:
        while True:
            with self._lock:
                queued = sorted(
                    (e for e in self._tasks.values() if e.state == QUEUED),
                    key=lambda e: e.task_id,
                )
                if not queued:
                    return
                entry = queued[0]
                assignment = self._provision(entry)
                if assignment is None:
                    if not self._worker_handles() and not self.cloud_enabled:
                        log.warning("%s: task %s queued with no workers and no cloud",
                                    self.node_id, entry.task_id)
                    return
                kind, handle = assignment
                now = time.monotonic()
                entry.state = DISPATCHED
                entry.attempts += 1
                entry.assigned_at_ms = int(time.time() * 1000)
                self._version += 1
                entry.lmv = self._version
                self._dispatch_log.append((now, handle.descriptor.node_id))
                entry.assigned_node = handle.descriptor.node_id
                handle.inflight += 1
                repo = self._pick_repository()
                repo_address = repo.descriptor.address if repo else None
            if kind == "fog":
                self._dispatch_fog(entry, handle, repo_address)
            else:
                self._dispatch_cloud(entry)
            self._replicate_now()

    def _provision(self, entry: _TaskEntry):
        """Pick a destination per the provisioning mode; None leaves it queued."""
        now = time.monotonic()
        if self.mode in ("fog_only", "integrated"):
            for handle in self._fog_candidates():
                if handle.idle and now >= handle.next_eligible_mono:
                    return "fog", handle
        if self.mode in ("cloud_only", "integrated") and self.cloud_enabled:
            if now >= self._cloud_next_eligible:
                return "cloud", self._workers[self._cloud_id]
        return None

    def _fog_candidates(self) -> list[_WorkerHandle]:
        own = [self._workers[n] for n in self._order
               if n in self._workers
               and self._workers[n].descriptor.role is NodeRole.COMPUTE
               and not self._workers[n].borrowed]
        borrowed = [self._workers[n] for n in self._order
                    if n in self._workers and self._workers[n].borrowed]
        if any(h.idle for h in own) or not self.peers:
            return own + borrowed
        return own + borrowed + self._borrow_candidates({h.descriptor.node_id for h in own + borrowed})

    def _borrow_candidates(self, known: set[str]) -> list[_WorkerHandle]:
        found = []
        for peer in self.peers:
            try:
                reply = self.client.get(peer, "/workers")
            except (TransportError, RemoteError):
                continue
            for row in reply.get("workers", []):
                try:
                    desc = NodeDescriptor.from_dict(row["node"])
                except ModelError:
                    continue
                if desc.role is not NodeRole.COMPUTE or not row.get("idle"):
                    continue
                if desc.node_id in known or desc.node_id in self._workers:
                    continue
                self._add_handle(desc, borrowed=True)
                found.append(self._workers[desc.node_id])
        return found

    def _dispatch_fog(self, entry: _TaskEntry, handle: _WorkerHandle, repo_address: str | None) -> None:
        body = {
            "task_id": entry.task_id,
            "app_id": entry.app_id,
            "data_key": entry.data_key,
            "owner_master": self.node_id,
            "repo_address": repo_address,
            "reply_to": self.address,
        }
        try:
            self.client.post(handle.descriptor.address, "/execute", MsgType.EXECUTE, body)
        except (TransportError, RemoteError) as exc:
            log.warning("%s: dispatch of %s to %s failed, requeueing: %s",
                        self.node_id, entry.task_id, handle.descriptor.node_id, exc)
            with self._lock:
                handle.suspect = True
                handle.inflight = max(0, handle.inflight - 1)
                entry.state = QUEUED
                entry.assigned_node = None
                self._version += 1
                entry.lmv = self._version

    def _dispatch_cloud(self, entry: _TaskEntry) -> None:
        block_hash = None
        if self.blockchain_enabled:
            block_hash = self._block_hash_for_key(entry.data_key)
        payload_b64 = self._payload_for_key(entry.data_key)
        if payload_b64 is None:
            with self._lock:
                entry.state = FAILED
                entry.failure = {"kind": "unavailable", "reason": "input unavailable for cloud dispatch"}
                self._version += 1
                entry.lmv = self._version
            return
        record = CloudInputRecord(
            task_id=entry.task_id,
            app_id=entry.app_id,
            payload_b64=payload_b64,
            model=self.cloud_model,
            shards=self.cloud_shards if self.cloud_model == "thread" else 1,
            block_hash=block_hash,
        )
        env = WireEnvelope(MsgType.CLOUD_RECORD, self.node_id, record.to_dict())
        self.account.add(env.body_bytes)  # the cloud input file handoff
        self._cloud_file.append(record)

    def _payload_for_key(self, data_key: str) -> str | None:
        repo = self._pick_repository()
        if repo is None:
            return None
        try:
            reply = self.client.get(repo.descriptor.address, f"/data/{data_key}",
                                    params={"master": self.node_id})
            return reply["payload_b64"]
        except (TransportError, RemoteError) as exc:
            log.warning("%s: cloud input fetch for %s failed: %s", self.node_id, data_key, exc)
            return None

    def _block_hash_for_key(self, data_key: str) -> str | None:
        payload_b64 = self._payload_for_key(data_key)
        if payload_b64 is None:
            return None
        with self._lock:
            for block_hash, block in self._block_by_hash.items():
                if block["payload_b64"] == payload_b64:
                    return block_hash
        return None

    # --- completion ---

    def _cloud_sink(self, payload: dict) -> None:
        try:
            self.handle_completion(payload)
        except Exception:
            log.exception("%s: cloud completion failed", self.node_id)

    def handle_completion(self, payload: dict) -> dict:
        task_id = payload.get("task_id")
        with self._lock:
            entry = self._tasks.get(task_id)
            if entry is None:
                raise not_found(f"unknown task {task_id}")
            if entry.state in (COMPLETED, FAILED):
                return {"accepted": False, "state": entry.state}
            sender = payload.get("worker_id")
            if entry.assigned_node is not None and sender is not None and sender != entry.assigned_node:
                log.warning("%s: stale completion for %s from %s (assigned %s)",
                            self.node_id, task_id, sender, entry.assigned_node)
                return {"accepted": False, "state": entry.state}
            now_mono = time.monotonic()
            handle = self._workers.get(entry.assigned_node or "")
            if handle is not None:
                handle.inflight = max(0, handle.inflight - 1)
                handle.next_eligible_mono = now_mono + self.interval_ms / 1000.0
            if entry.assigned_node == self._cloud_id:
                self._cloud_next_eligible = now_mono + self.interval_ms / 1000.0
            entry.completed_at_ms = int(time.time() * 1000)
            entry.latency_ms = (now_mono - entry.created_mono) * 1000.0
            if payload.get("status") == "completed":
                entry.state = COMPLETED
                result = dict(payload.get("result") or {})
                result["task_id"] = task_id
                result["latency_ms"] = entry.latency_ms
                entry.result = result
            else:
                entry.state = FAILED
                entry.failure = {"kind": payload.get("kind"), "reason": payload.get("reason")}
                if payload.get("kind") == "integrity":
                    log.error("%s: integrity alarm from %s on task %s: %s",
                              self.node_id, sender, task_id, payload.get("reason"))
            self._version += 1
            entry.lmv = self._version
        self._replicate_now()
        self._notify_dispatch()
        return {"accepted": True, "state": entry.state}

    def collect_result(self, task_id: str) -> dict:
        with self._lock:
            entry = self._tasks.get(task_id)
            if entry is None:
                raise not_found(f"unknown task {task_id}")
            if entry.state == COMPLETED and self._result_visible(entry):
                return {"status": COMPLETED, "result": entry.result, "failure": None}
            if entry.state == FAILED:
                return {"status": FAILED, "result": None, "failure": entry.failure}
            return {"status": "pending", "result": None, "failure": None}

    def _result_visible(self, entry: _TaskEntry) -> bool:
        # A completed task becomes visible once the replica holds it, so a
        # master crash cannot lose a completion the caller already saw.
        if self._replica_target is None or self._replica_lagging:
            return True
        return self._acked_version is not None and entry.lmv <= self._acked_version

    # --- heartbeat monitoring ---

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_ms / 1000.0):
            try:
                self.heartbeat_sweep()
            except Exception:
                log.exception("%s: heartbeat sweep failed", self.node_id)

    def heartbeat_sweep(self) -> list[tuple[str, dict | None]]:
        with self._lock:
            self._sweep_count += 1
            handles = list(self._worker_handles())
        results: list[tuple[str, dict | None]] = []
        timeout = max(1.0, self.heartbeat_ms / 1000.0)
        for handle in handles:
            node_id = handle.descriptor.node_id
            try:
                reply = self.client.get(handle.descriptor.address, "/status", timeout=timeout)
                with self._lock:
                    handle.misses = 0
                    handle.suspect = False
                    handle.last_status = reply
                results.append((node_id, reply))
            except (TransportError, RemoteError):
                declare_failed = False
                with self._lock:
                    handle.misses += 1
                    if handle.misses >= FAILURE_MISS_LIMIT:
                        declare_failed = True
                results.append((node_id, None))
                if declare_failed:
                    self._declare_worker_failed(node_id)
        if self._replica_lagging:
            self._replicate_now()
        self._notify_dispatch()
        return results

    def _declare_worker_failed(self, node_id: str) -> None:
        with self._lock:
            handle = self._workers.pop(node_id, None)
            if handle is None:
                return
            self._order.remove(node_id)
            requeued = []
            for entry in self._tasks.values():
                if entry.state == DISPATCHED and entry.assigned_node == node_id:
                    entry.state = QUEUED
                    entry.assigned_node = None
                    self._version += 1
                    entry.lmv = self._version
                    requeued.append(entry.task_id)
            self._version += 1
            if self._replica_target == node_id:
                replacement = next(
                    (h.descriptor.node_id for h in self._worker_handles()
                     if not h.borrowed and h.descriptor.node_id != node_id), None,
                )
                self._set_replica_target(replacement)
        log.warning("%s: worker %s failed after %d missed sweeps; requeued %s and shared "
                    "its assignment state with the remaining workers",
                    self.node_id, node_id, FAILURE_MISS_LIMIT, requeued or "nothing")
        self._replicate_now()

    # --- image replication ---

    def replicate_to(self, node_id: str) -> dict:
        with self._lock:
            handle = self._workers.get(node_id)
            if handle is None or handle.borrowed or handle.descriptor.role not in WORKER_ROLES:
                raise not_found(f"{node_id} is not a registered worker")
            self._set_replica_target(node_id)
        self._replicate_now()
        with self._lock:
            return {"target": node_id, "acked_version": self._acked_version}

    def _replicate_now(self) -> None:
        with self._replicate_mutex:
            with self._lock:
                target_id = self._replica_target
                handle = self._workers.get(target_id) if target_id else None
                if handle is None:
                    return
                if self._acked_version == self._version:
                    return
                payload = self._build_image_payload(full=self._acked_version is None)
                address = handle.descriptor.address
                chain_len = len(self._chain) if self._chain else 0
                keyrec_len = len(self._key_records)
                version = self._version
            try:
                self.client.post(address, "/image", MsgType.IMAGE_PUSH, payload)
            except RemoteError as exc:
                if exc.code in ("resync", "stale_version"):
                    with self._lock:
                        full = self._build_image_payload(full=True)
                        chain_len = len(self._chain) if self._chain else 0
                        keyrec_len = len(self._key_records)
                        version = self._version
                    try:
                        self.client.post(address, "/image", MsgType.IMAGE_PUSH, full)
                    except (RemoteError, TransportError) as exc2:
                        log.warning("%s: full image push to %s failed: %s", self.node_id, target_id, exc2)
                        with self._lock:
                            self._replica_lagging = True
                        return
                else:
                    log.warning("%s: image push rejected by %s: %s", self.node_id, target_id, exc)
                    with self._lock:
                        self._replica_lagging = True
                    return
            except TransportError as exc:
                log.warning("%s: image push to %s failed, will retry: %s", self.node_id, target_id, exc)
                with self._lock:
                    self._replica_lagging = True
                return
            with self._lock:
                self._acked_version = version
                self._acked_chain_len = chain_len
                self._acked_keyrec_len = keyrec_len
                self._replica_lagging = False

    def _build_image_payload(self, full: bool) -> dict:
        config = {
            "mode": self.mode,
            "blockchain_enabled": self.blockchain_enabled,
            "difficulty": self.difficulty,
            "interval_ms": self.interval_ms,
            "heartbeat_ms": self.heartbeat_ms,
            "cloud_poll_ms": self.cloud_poll_ms,
            "cloud_instances": self.cloud_instances,
            "cloud_slowdown": self.cloud_slowdown,
            "cloud_model": self.cloud_model,
            "cloud_shards": self.cloud_shards,
            "default_app": self.default_app,
            "peers": list(self.peers),
            "wan": {"rtt_ms": self.wan.rtt_ms, "uplink_bps": self.wan.uplink_bps,
                    "downlink_bps": self.wan.downlink_bps},
        }
        registry = [h.descriptor.to_dict() for h in self._worker_handles() if not h.borrowed]
        counters = {"task_seq": self._task_seq, "ingest_seq": self._ingest_seq}
        base = {
            "master_id": self.node_id,
            "image_version": self._version,
            "master_address": self.address,
            "config": config,
            "registry": registry,
            "sessions": {k: list(v) for k, v in self._sessions.items()},
            "counters": counters,
        }
        if full:
            base["mode"] = "full"
            base["archive_key_b64"] = self._archive_key_b64
            base["entries"] = {t: e.to_dict() for t, e in self._tasks.items()}
            base["chain"] = self._chain.to_dict() if self._chain else None
            base["key_records"] = list(self._key_records)
        else:
            base["mode"] = "delta"
            base["base_version"] = self._acked_version
            base["entries"] = {t: e.to_dict() for t, e in self._tasks.items()
                               if e.lmv > (self._acked_version or 0)}
            base["new_blocks"] = ([b.to_dict() for b in self._chain.blocks[self._acked_chain_len:]]
                                  if self._chain else [])
            base["key_records_new"] = list(self._key_records[self._acked_keyrec_len:])
        return base

    def _restore(self, payload: dict) -> None:
        config = payload.get("config", {})
        self._version = int(payload["image_version"])
        self._archive_key_b64 = payload.get("archive_key_b64") or self._archive_key_b64
        counters = payload.get("counters", {})
        self._task_seq = int(counters.get("task_seq", 0))
        self._ingest_seq = int(counters.get("ingest_seq", 0))
        self._sessions = {k: list(v) for k, v in payload.get("sessions", {}).items()}
        if payload.get("chain"):
            self._chain = Chain.from_dict(payload["chain"])
            for block in self._chain.blocks:
                self._index_block(block)
        elif self.blockchain_enabled:
            self._chain = Chain.new(self.difficulty)
            self._index_block(self._chain.blocks[0])
        self._key_records = list(payload.get("key_records", []))
        for raw in payload.get("registry", []):
            desc = NodeDescriptor.from_dict(raw)
            if desc.role is NodeRole.CLOUD:
                continue  # the cloud handle is rebuilt locally
            if desc.node_id not in self._workers:
                self._add_handle(desc)
        for raw in payload.get("entries", {}).values():
            entry = _TaskEntry.from_dict(raw)
            if entry.state == DISPATCHED:
                entry.state = QUEUED  # in-flight work restarts from stored input
                entry.assigned_node = None
            self._tasks[entry.task_id] = entry
        replacement = next(
            (h.descriptor.node_id for h in self._worker_handles()
             if not h.borrowed and h.descriptor.node_id != self._host_worker_id), None,
        )
        self._set_replica_target(replacement)

    @classmethod
    def from_image(cls, payload: dict, host_worker_id: str | None = None, port: int = 0) -> "BrokerNode":
        config = payload.get("config", {})
        wan_cfg = config.get("wan") or {}
        return cls(
            node_id=payload["master_id"],
            mode=config.get("mode", "integrated"),
            blockchain_enabled=config.get("blockchain_enabled", True),
            difficulty=config.get("difficulty", 3),
            interval_ms=config.get("interval_ms", 0),
            heartbeat_ms=config.get("heartbeat_ms", 1000),
            wan=WanModel(**wan_cfg) if wan_cfg else None,
            cloud_poll_ms=config.get("cloud_poll_ms", 500),
            cloud_instances=config.get("cloud_instances", 2),
            cloud_slowdown=config.get("cloud_slowdown", 1.0),
            cloud_model=config.get("cloud_model", "task"),
            cloud_shards=config.get("cloud_shards", 1),
            peers=tuple(config.get("peers", ())),
            default_app=config.get("default_app", apps.SLEEP_APNEA_APP_ID),
            port=port,
            initial_image=payload,
            host_worker_id=host_worker_id,
        )

    # --- introspection used by the CLI, harness, and tests ---

    def chain_status(self) -> dict:
        with self._lock:
            enabled = self.blockchain_enabled
            master_len = len(self._chain) if self._chain else 0
            master_tip = self._chain.tip.hash if self._chain else None
            handles = [h for h in self._worker_handles() if not h.borrowed]
        rows = []
        for handle in handles:
            row = {"node_id": handle.descriptor.node_id, "address": handle.descriptor.address}
            try:
                reply = self.client.get(handle.descriptor.address, "/chain/tip",
                                        params={"master": self.node_id})
                row.update(length=reply["length"], tip_hash=reply["tip_hash"],
                           matches_master=reply["tip_hash"] == master_tip)
            except (TransportError, RemoteError) as exc:
                row.update(length=None, tip_hash=None, matches_master=False, error=str(exc))
            rows.append(row)
        return {
            "blockchain_enabled": enabled,
            "master": {"length": master_len, "tip_hash": master_tip},
            "workers": rows,
        }

    def task_entries(self) -> dict[str, dict]:
        with self._lock:
            return {t: e.to_dict() for t, e in self._tasks.items()}

    def dispatch_times(self) -> list[tuple[float, str]]:
        with self._lock:
            return list(self._dispatch_log)

    def worker_misses(self, node_id: str) -> int | None:
        with self._lock:
            handle = self._workers.get(node_id)
            return handle.misses if handle else None

    def state_version(self) -> int:
        with self._lock:
            return self._version

    def sweep_count(self) -> int:
        with self._lock:
            return self._sweep_count

    def chain_snapshot(self) -> Chain | None:
        with self._lock:
            return self._chain.clone() if self._chain else None

    # --- HTTP surface ---

    def _routes(self) -> None:
        s = self._server
        s.add_route("POST", "/register", self._h_register)
        s.add_route("POST", "/ingest", self._h_ingest)
        s.add_route("POST", "/analyze", self._h_analyze)
        s.add_route("GET", "/result/(?P<task_id>[^/]+)", self._h_result)
        s.add_route("GET", "/chain/status", lambda m, e, q: (MsgType.CHAIN_STATUS, self.chain_status()))
        s.add_route("GET", "/health", lambda m, e, q: (MsgType.ACK, self._health()))
        s.add_route("POST", "/complete", self._h_complete)
        s.add_route("GET", "/workers", lambda m, e, q: (MsgType.WORKER_LIST, self._h_workers()))

    def _health(self) -> dict:
        with self._lock:
            return {
                "node": self.descriptor.to_dict(),
                "uptime_ms": int((time.monotonic() - self._started_mono) * 1000),
                "image_version": self._version,
                "sweep_count": self._sweep_count,
                "workers": len(self._worker_handles()),
                "chain_length": len(self._chain) if self._chain else 0,
                "blockchain_enabled": self.blockchain_enabled,
                "mode": self.mode,
            }

    def _h_register(self, match, env, query):
        if env is None:
            raise bad_request("register requires a body")
        try:
            desc = NodeDescriptor.from_dict(env.body["node"])
        except KeyError as exc:
            raise bad_request(f"register missing {exc}")
        except ModelError as exc:
            raise bad_request(str(exc))
        return MsgType.ACK, self.register_worker(desc)

    def _h_ingest(self, match, env, query):
        if env is None:
            raise bad_request("ingest requires a body")
        try:
            receipt = self.ingest(env.body)
        except ModelError as exc:
            raise bad_request(str(exc))
        return MsgType.ACK, receipt

    def _h_analyze(self, match, env, query):
        if env is None:
            raise bad_request("analyze requires a body")
        session_id = env.body.get("session_id")
        if not session_id:
            raise bad_request("analyze requires session_id")
        task_id = self.create_task(session_id, env.body.get("app_id"))
        return MsgType.ACK, {"task_id": task_id}

    def _h_result(self, match, env, query):
        return MsgType.ACK, self.collect_result(match.group("task_id"))

    def _h_complete(self, match, env, query):
        if env is None:
            raise bad_request("completion requires a body")
        return MsgType.ACK, self.handle_completion(env.body)

    def _h_workers(self) -> dict:
        with self._lock:
            rows = []
            for handle in self._worker_handles():
                if handle.borrowed:
                    continue
                rows.append({
                    "node": handle.descriptor.to_dict(),
                    "inflight": handle.inflight,
                    "idle": handle.idle,
                })
        return {"workers": rows}

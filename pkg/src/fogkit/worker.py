"""Worker node daemon: executor, encrypted data container, credential archive,
ledger replicas, and the master-image store that enables failover promotion.

One worker can serve several masters at once; data, credentials, replica
chains, and images are namespaced by master id so the masters never observe
each other's state.
"""

from __future__ import annotations

import json
import logging
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from . import apps, crypto
from .ledger import Chain, DataBlock, Verdict, validate_chain, verify_block
from .model import (
    ModelError,
    MsgType,
    NodeDescriptor,
    NodeRole,
    b64decode_bytes,
    b64encode_str,
    chunk_from_ingest_body,
    serialize_trace,
)
from .transport import (
    ApiError,
    ByteAccount,
    HttpClient,
    NodeHttpServer,
    RemoteError,
    TransportError,
    auth_failure,
    bad_request,
    conflict,
    not_found,
)

log = logging.getLogger(__name__)

CRED_BLOCK_KEY = "block_key"
CRED_ARCHIVE_KEY = "archive_key"


@dataclass(frozen=True)
class ResourceStatus:
    node_id: str
    busy_slots: int
    total_slots: int
    queued: int
    uptime_ms: int
    cpu_busy_ms: float

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "busy_slots": self.busy_slots,
            "total_slots": self.total_slots,
            "queued": self.queued,
            "uptime_ms": self.uptime_ms,
            "cpu_busy_ms": self.cpu_busy_ms,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceStatus":
        return cls(d["node_id"], int(d["busy_slots"]), int(d["total_slots"]),
                   int(d["queued"]), int(d["uptime_ms"]), float(d["cpu_busy_ms"]))


class _ImageStore:
    def __init__(self, payload: dict):
        self.version: int = payload["image_version"]
        self.master_address: str = payload["master_address"]
        self.config: dict = payload.get("config", {})
        self.archive_key_b64: str | None = payload.get("archive_key_b64")
        self.registry: list[dict] = list(payload.get("registry", []))
        self.entries: dict[str, dict] = dict(payload.get("entries", {}))
        self.sessions: dict = dict(payload.get("sessions", {}))
        self.counters: dict = dict(payload.get("counters", {}))
        self.chain: Chain | None = (
            Chain.from_dict(payload["chain"]) if payload.get("chain") else None
        )
        self.key_records: list[dict] = list(payload.get("key_records", []))

    def apply_delta(self, payload: dict) -> None:
        self.version = payload["image_version"]
        self.master_address = payload.get("master_address", self.master_address)
        self.registry = list(payload.get("registry", self.registry))
        self.entries.update(payload.get("entries", {}))
        for key in payload.get("purged_entries", []):
            self.entries.pop(key, None)
        if "sessions" in payload:
            self.sessions = dict(payload["sessions"])
        if "counters" in payload:
            self.counters = dict(payload["counters"])
        new_blocks = payload.get("new_blocks", [])
        if new_blocks:
            if self.chain is None:
                raise ApiError("resync", "delta carries blocks but no chain is stored", 409)
            for raw in new_blocks:
                self.chain.append_block(DataBlock.from_dict(raw))
        self.key_records.extend(payload.get("key_records_new", []))

    def to_payload(self, master_id: str) -> dict:
        return {
            "master_id": master_id,
            "mode": "full",
            "image_version": self.version,
            "master_address": self.master_address,
            "config": self.config,
            "archive_key_b64": self.archive_key_b64,
            "registry": self.registry,
            "entries": self.entries,
            "sessions": self.sessions,
            "counters": self.counters,
            "chain": self.chain.to_dict() if self.chain else None,
            "key_records": self.key_records,
        }


class WorkerNode:
    """A combined computing + repository node."""

    def __init__(
        self,
        node_id: str,
        role: NodeRole = NodeRole.COMPUTE,
        capacity_slots: int = 1,
        app_ids: tuple[str, ...] = (apps.SLEEP_APNEA_APP_ID,),
        probe_ms: int = 1000,
        probe_miss_limit: int = 3,
        port: int = 0,
    ):
        if role not in (NodeRole.COMPUTE, NodeRole.REPOSITORY):
            raise ModelError(f"{role} is not a worker role")
        self.node_id = node_id
        self.role = role
        self.capacity_slots = capacity_slots
        self.probe_ms = probe_ms
        self.probe_miss_limit = probe_miss_limit

        self.account = ByteAccount()
        self.client = HttpClient(node_id, self.account)
        self._server = NodeHttpServer(node_id, self.account, port=port)
        self.address: str | None = None

        self._lock = threading.RLock()
        self._data: dict[str, dict] = {}
        self._credentials: dict[tuple[str, str, int], dict] = {}
        self._replicas: dict[str, Chain] = {}
        self._images: dict[str, _ImageStore] = {}
        self._promotions: dict[str, str] = {}
        self._promoted_brokers: list = []
        self._monitors: dict[str, threading.Thread] = {}
        self._apps: dict[str, apps.AppDescriptor] = {}
        for app_id in app_ids:
            known = apps.lookup_app(app_id)
            self._apps[app_id] = known[0] if known else apps.AppDescriptor(app_id=app_id)

        self._queue: deque[dict] = deque()
        self._exec_cond = threading.Condition(self._lock)
        self._busy = 0
        self._cpu_busy_ms = 0.0
        self._started_mono = time.monotonic()
        self._stop = threading.Event()
        self._exec_threads: list[threading.Thread] = []
        self._tmpdir = tempfile.TemporaryDirectory(prefix=f"worker-{node_id}-")
        self._routes()

    # --- lifecycle ---

    def start(self) -> str:
        self.address = self._server.start()
        self._started_mono = time.monotonic()
        for i in range(self.capacity_slots):
            t = threading.Thread(target=self._exec_loop, name=f"{self.node_id}-exec{i}", daemon=True)
            t.start()
            self._exec_threads.append(t)
        return self.address

    def stop(self) -> None:
        self._stop.set()
        with self._exec_cond:
            self._exec_cond.notify_all()
        for t in self._exec_threads:
            t.join(timeout=5)
        for broker in self._promoted_brokers:
            broker.stop()
        self._server.stop()
        self.client.close()
        self._tmpdir.cleanup()

    @property
    def descriptor(self) -> NodeDescriptor:
        if self.address is None:
            raise RuntimeError("worker not started")
        return NodeDescriptor(self.node_id, self.address, self.role, self.capacity_slots)

    def register_with(self, broker_address: str) -> dict:
        return self.client.post(
            broker_address, "/register", MsgType.REGISTER, {"node": self.descriptor.to_dict()}
        )

    # --- status ---

    def status(self) -> ResourceStatus:
        with self._lock:
            return ResourceStatus(
                node_id=self.node_id,
                busy_slots=self._busy,
                total_slots=self.capacity_slots,
                queued=len(self._queue),
                uptime_ms=int((time.monotonic() - self._started_mono) * 1000),
                cpu_busy_ms=self._cpu_busy_ms,
            )

    # --- data container ---

    def store_data(self, data_key: str, payload: bytes, owner_master: str) -> None:
        key_b64 = self._archive_key(owner_master)
        if key_b64 is None:
            raise auth_failure(f"no archive key for master {owner_master}")
        blob = crypto.seal(key_b64, payload)
        with self._lock:
            self._data[data_key] = {
                "owner_master": owner_master,
                "ciphertext_b64": blob,
                "created_at": int(time.time() * 1000),
            }

    def fetch_data(self, data_key: str, claimed_master: str) -> bytes:
        with self._lock:
            obj = self._data.get(data_key)
        if obj is None:
            raise not_found(f"no object under {data_key}")
        key_b64 = self._archive_key(claimed_master)
        if key_b64 is None:
            raise auth_failure(f"no archive key for master {claimed_master}")
        try:
            return crypto.open_sealed(key_b64, obj["ciphertext_b64"])
        except crypto.StorageIntegrityError as exc:
            raise auth_failure(str(exc)) from None

    def tamper_data(self, data_key: str) -> None:
        """Test hook: corrupt one stored ciphertext byte."""
        with self._lock:
            obj = self._data[data_key]
            raw = bytearray(b64decode_bytes(obj["ciphertext_b64"]))
            raw[-1] ^= 0x01
            obj["ciphertext_b64"] = b64encode_str(bytes(raw))

    def _archive_key(self, master_id: str) -> str | None:
        with self._lock:
            rec = self._credentials.get((master_id, CRED_ARCHIVE_KEY, -1))
        return rec["record"]["payload"] if rec else None

    # --- credential archive ---

    def put_credential(self, record: dict) -> int:
        try:
            master_id = record["master_id"]
            kind = record["kind"]
        except KeyError as exc:
            raise bad_request(f"credential record missing {exc}")
        index = int(record.get("block_index", -1) if record.get("block_index") is not None else -1)
        with self._lock:
            slot = self._credentials.get((master_id, kind, index))
            version = (slot["version"] + 1) if slot else 1
            self._credentials[(master_id, kind, index)] = {"record": dict(record), "version": version}
        return version

    def get_credential(self, master_id: str, kind: str, block_index: int | None = None) -> dict:
        index = -1 if block_index is None else int(block_index)
        with self._lock:
            slot = self._credentials.get((master_id, kind, index))
        if slot is None:
            raise not_found(f"no credential ({master_id}, {kind}, {block_index})")
        return {"record": slot["record"], "version": slot["version"]}

    # --- ledger replicas ---

    def accept_block(self, master_id: str, block: DataBlock, difficulty: int) -> Verdict:
        with self._lock:
            replica = self._replicas.get(master_id)
            if replica is None:
                replica = Chain.new(difficulty)
                self._replicas[master_id] = replica
            cred = self._credentials.get((master_id, CRED_BLOCK_KEY, block.index))
            if cred is None or cred["record"].get("payload") != block.pub_key_b64:
                log.warning("%s: block %d for %s signed with a non-archived key",
                            self.node_id, block.index, master_id)
                return Verdict.BAD_SIGNATURE
            if block.index != len(replica):
                return Verdict.BAD_LINK
            verdict = verify_block(block, replica.tip, replica.difficulty)
            if verdict is Verdict.OK:
                replica.append_block(block)
            return verdict

    def replica_chain(self, master_id: str) -> Chain | None:
        with self._lock:
            chain = self._replicas.get(master_id)
            return chain.clone() if chain else None

    def replace_chain(self, master_id: str, chain: Chain) -> None:
        check = validate_chain(chain)
        if not check.ok:
            raise bad_request(f"replacement chain invalid at {check.failing_index}: {check.reason}")
        with self._lock:
            self._replicas[master_id] = chain

    def tamper_replica_tip(self, master_id: str) -> None:
        """Test hook: rewrite the replica tip so its hash no longer matches."""
        with self._lock:
            chain = self._replicas[master_id]
            tip = chain.tip
            forged_payload = b64encode_str(b"forged" + tip.payload_bytes()[:8])
            from .ledger import compute_hash  # local import to keep hook self-contained

            new_hash = compute_hash(tip.index, tip.timestamp_ms, forged_payload, tip.prev_hash, tip.nonce)
            chain.blocks[-1] = DataBlock(
                tip.index, tip.timestamp_ms, forged_payload, tip.prev_hash,
                tip.nonce, new_hash, tip.pub_key_b64, tip.signature_b64,
            )

    # --- master image replication ---

    def accept_image(self, payload: dict) -> int:
        master_id = payload.get("master_id")
        if not master_id:
            raise bad_request("image payload missing master_id")
        mode = payload.get("mode", "full")
        version = int(payload["image_version"])
        with self._lock:
            store = self._images.get(master_id)
            if mode == "delta":
                if store is None:
                    raise ApiError("resync", "no base image for delta", 409)
                if version <= store.version:
                    if version == store.version:
                        return store.version  # idempotent re-push
                    raise ApiError("stale_version", f"have v{store.version}, got v{version}", 409)
                if int(payload.get("base_version", -1)) != store.version:
                    raise ApiError("resync", f"delta base {payload.get('base_version')} != v{store.version}", 409)
                store.apply_delta(payload)
            else:
                if store is not None and version < store.version:
                    raise ApiError("stale_version", f"have v{store.version}, got v{version}", 409)
                if store is not None and version == store.version:
                    return store.version
                self._images[master_id] = _ImageStore(payload)
            stored = self._images[master_id].version
        self._ensure_monitor(master_id)
        return stored

    def image_version(self, master_id: str) -> int | None:
        with self._lock:
            store = self._images.get(master_id)
            return store.version if store else None

    def image_chain(self, master_id: str) -> Chain | None:
        with self._lock:
            store = self._images.get(master_id)
            return store.chain.clone() if store and store.chain else None

    def image_entries(self, master_id: str) -> dict[str, dict]:
        with self._lock:
            store = self._images.get(master_id)
            return dict(store.entries) if store else {}

    # --- failover ---

    def _ensure_monitor(self, master_id: str) -> None:
        with self._lock:
            if master_id in self._monitors or master_id in self._promotions:
                return
            t = threading.Thread(
                target=self._monitor_loop, args=(master_id,),
                name=f"{self.node_id}-probe-{master_id}", daemon=True,
            )
            self._monitors[master_id] = t
            t.start()

    def _monitor_loop(self, master_id: str) -> None:
        misses = 0
        while not self._stop.is_set():
            if self._stop.wait(self.probe_ms / 1000.0):
                return
            with self._lock:
                store = self._images.get(master_id)
                if store is None or master_id in self._promotions:
                    return
                address = store.master_address
            try:
                self.client.get(address, "/health", timeout=max(1.0, self.probe_ms / 1000.0))
                misses = 0
            except (TransportError, RemoteError):
                misses += 1
                if misses >= self.probe_miss_limit:
                    try:
                        self.promote(master_id)
                    except Exception:
                        log.exception("%s: promotion of %s failed", self.node_id, master_id)
                    return

    def promote(self, master_id: str) -> str:
        """Start a broker from the stored image and take over the master role."""
        from .broker import BrokerNode  # deferred: broker imports this module

        with self._lock:
            if master_id in self._promotions:
                return self._promotions[master_id]
            store = self._images.get(master_id)
            if store is None:
                raise not_found(f"no image stored for {master_id}")
            payload = store.to_payload(master_id)
        log.warning("%s: master %s unreachable, promoting from image v%d "
                    "(any newer master state is lost)", self.node_id, master_id, payload["image_version"])
        broker = BrokerNode.from_image(payload, host_worker_id=self.node_id)
        address = broker.start()
        with self._lock:
            self._promotions[master_id] = address
            self._promoted_brokers.append(broker)
        log.warning("%s: promoted to master %s at %s", self.node_id, master_id, address)
        return address

    def promotions(self) -> dict[str, str]:
        with self._lock:
            return dict(self._promotions)

    # --- executor ---

    def enqueue_execution(self, job: dict) -> dict:
        for field in ("task_id", "app_id", "data_key", "owner_master", "repo_address", "reply_to"):
            if field not in job:
                raise bad_request(f"execute request missing {field}")
        with self._exec_cond:
            self._queue.append(dict(job))
            self._exec_cond.notify()
            return {"accepted": True, "queued": len(self._queue), "busy_slots": self._busy}

    def _exec_loop(self) -> None:
        while not self._stop.is_set():
            with self._exec_cond:
                while not self._queue and not self._stop.is_set():
                    self._exec_cond.wait(timeout=0.5)
                if self._stop.is_set():
                    return
                job = self._queue.popleft()
                self._busy += 1
            try:
                self._run_job(job)
            finally:
                with self._lock:
                    self._busy -= 1

    def _run_job(self, job: dict) -> None:
        task_id = job["task_id"]
        app_id = job["app_id"]
        started = time.perf_counter()
        try:
            runner = self._resolve_app(app_id, job["repo_address"])
        except ApiError as exc:
            self._post_completion(job, status="failed", kind=exc.code, reason=exc.message)
            return
        try:
            payload = self._fetch_input(job)
        except ApiError as exc:
            kind = "integrity" if exc.code == "auth_failure" else exc.code
            self._post_completion(job, status="failed", kind=kind, reason=exc.message)
            return
        try:
            chunk = chunk_from_ingest_body(json.loads(payload.decode("utf-8")))
            input_path = Path(self._tmpdir.name) / f"{task_id}-input.txt"
            output_path = Path(self._tmpdir.name) / f"{task_id}-output.json"
            input_path.write_bytes(serialize_trace(chunk))
            run_started = time.perf_counter()
            runner(input_path, output_path)
            exec_ms = (time.perf_counter() - run_started) * 1000.0
            fields = json.loads(output_path.read_bytes().decode("utf-8"))
        except Exception as exc:
            log.warning("%s: analytic failure on %s: %s", self.node_id, task_id, exc)
            self._post_completion(job, status="failed", kind="analytic", reason=str(exc))
            return
        with self._lock:
            self._cpu_busy_ms += exec_ms
        total_ms = (time.perf_counter() - started) * 1000.0
        self._post_completion(job, status="completed", result=fields, exec_ms=total_ms)

    def _resolve_app(self, app_id: str, repo_address: str):
        with self._lock:
            known = app_id in self._apps
        if not known:
            try:
                reply = self.client.get(repo_address, f"/app/{app_id}")
            except (TransportError, RemoteError) as exc:
                raise ApiError("catalogue_miss", f"app {app_id} unavailable: {exc}", 404) from None
            descriptor = apps.AppDescriptor.from_dict(reply["descriptor"])
            b64decode_bytes(reply["payload_b64"])  # the simulated executable transfer
            with self._lock:
                self._apps[app_id] = descriptor
        entry = apps.lookup_app(app_id)
        if entry is None:
            raise ApiError("catalogue_miss", f"no entrypoint registered for {app_id}", 404)
        return entry[1]

    def _fetch_input(self, job: dict) -> bytes:
        if job["repo_address"] == self.address:
            return self.fetch_data(job["data_key"], job["owner_master"])
        try:
            reply = self.client.get(
                job["repo_address"], f"/data/{job['data_key']}",
                params={"master": job["owner_master"]},
            )
        except RemoteError as exc:
            raise ApiError(exc.code, exc.message, exc.http_status) from None
        except TransportError as exc:
            raise ApiError("unavailable", str(exc), 503) from None
        return b64decode_bytes(reply["payload_b64"])

    def _post_completion(self, job: dict, status: str, result: dict | None = None,
                         exec_ms: float = 0.0, kind: str | None = None, reason: str | None = None) -> None:
        body = {
            "task_id": job["task_id"],
            "worker_id": self.node_id,
            "status": status,
            "result": result,
            "exec_ms": exec_ms,
            "kind": kind,
            "reason": reason,
        }
        try:
            self.client.post(job["reply_to"], "/complete", MsgType.COMPLETE, body)
        except (TransportError, RemoteError) as exc:
            log.warning("%s: completion for %s undeliverable: %s", self.node_id, job["task_id"], exc)

    # --- HTTP surface ---

    def _routes(self) -> None:
        s = self._server
        s.add_route("GET", "/status", lambda m, e, q: (MsgType.ACK, self.status().to_dict()))
        s.add_route("GET", "/health", lambda m, e, q: (MsgType.ACK, self._health()))
        s.add_route("POST", "/execute", self._h_execute)
        s.add_route("POST", "/data", self._h_data_store)
        s.add_route("GET", "/data/(?P<key>.+)", self._h_data_fetch)
        s.add_route("POST", "/credential", self._h_credential_put)
        s.add_route("GET", "/credential", self._h_credential_get)
        s.add_route("POST", "/block", self._h_block)
        s.add_route("POST", "/image", self._h_image)
        s.add_route("GET", "/chain/tip", self._h_chain_tip)
        s.add_route("GET", "/chain", self._h_chain_fetch)
        s.add_route("POST", "/chain/replace", self._h_chain_replace)
        s.add_route("GET", "/app/(?P<app_id>[^/]+)", self._h_app)
        s.add_route("GET", "/promotion", lambda m, e, q: (MsgType.PROMOTION, {"promotions": self.promotions()}))

    def _health(self) -> dict:
        st = self.status()
        return {"node": self.descriptor.to_dict(), "status": st.to_dict()}

    def _h_execute(self, match, env, query):
        if env is None:
            raise bad_request("execute requires a body")
        return MsgType.ACK, self.enqueue_execution(env.body)

    def _h_data_store(self, match, env, query):
        if env is None:
            raise bad_request("data store requires a body")
        body = env.body
        try:
            payload = b64decode_bytes(body["payload_b64"])
            self.store_data(body["data_key"], payload, body["owner_master"])
        except KeyError as exc:
            raise bad_request(f"data store missing {exc}")
        except ModelError as exc:
            raise bad_request(str(exc))
        return MsgType.ACK, {"stored": True, "data_key": body["data_key"]}

    def _h_data_fetch(self, match, env, query):
        master = query.get("master")
        if not master:
            raise bad_request("data fetch requires ?master=")
        payload = self.fetch_data(match.group("key"), master)
        return MsgType.ACK, {"payload_b64": b64encode_str(payload)}

    def _h_credential_put(self, match, env, query):
        if env is None:
            raise bad_request("credential put requires a body")
        version = self.put_credential(env.body)
        return MsgType.ACK, {"version": version}

    def _h_credential_get(self, match, env, query):
        master = query.get("master")
        kind = query.get("kind")
        if not master or not kind:
            raise bad_request("credential fetch requires ?master=&kind=")
        index = query.get("index")
        return MsgType.ACK, self.get_credential(master, kind, int(index) if index else None)

    def _h_block(self, match, env, query):
        if env is None:
            raise bad_request("block push requires a body")
        body = env.body
        try:
            block = DataBlock.from_dict(body["block"])
            verdict = self.accept_block(body["master_id"], block, int(body["difficulty"]))
        except KeyError as exc:
            raise bad_request(f"block push missing {exc}")
        except ModelError as exc:
            raise bad_request(str(exc))
        return MsgType.ACK, {"verdict": verdict.value, "accepted": verdict is Verdict.OK}

    def _h_image(self, match, env, query):
        if env is None:
            raise bad_request("image push requires a body")
        version = self.accept_image(env.body)
        return MsgType.ACK, {"stored_version": version}

    def _h_chain_tip(self, match, env, query):
        master = query.get("master")
        if not master:
            raise bad_request("chain tip requires ?master=")
        chain = self.replica_chain(master)
        if chain is None:
            raise not_found(f"no replica for {master}")
        return MsgType.ACK, {"length": len(chain), "tip_hash": chain.tip.hash}

    def _h_chain_fetch(self, match, env, query):
        master = query.get("master")
        if not master:
            raise bad_request("chain fetch requires ?master=")
        chain = self.replica_chain(master)
        if chain is None:
            raise not_found(f"no replica for {master}")
        return MsgType.ACK, {"chain": chain.to_dict()}

    def _h_chain_replace(self, match, env, query):
        if env is None:
            raise bad_request("chain replace requires a body")
        body = env.body
        try:
            self.replace_chain(body["master_id"], Chain.from_dict(body["chain"]))
        except KeyError as exc:
            raise bad_request(f"chain replace missing {exc}")
        except ModelError as exc:
            raise bad_request(str(exc))
        return MsgType.ACK, {"replaced": True}

    def _h_app(self, match, env, query):
        app_id = match.group("app_id")
        with self._lock:
            descriptor = self._apps.get(app_id)
        if descriptor is None:
            raise ApiError("catalogue_miss", f"app {app_id} not in catalogue", 404)
        return MsgType.ACK, {
            "descriptor": descriptor.to_dict(),
            "payload_b64": b64encode_str(apps.executable_payload(app_id)),
        }

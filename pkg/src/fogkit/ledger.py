"""Per-master proof-of-work ledger: block mining, verification, and repair.

Each block is hashed with SHA-256 over the string
``<index>|<timestamp_ms>|<payload_b64>|<prev_hash>|<nonce>`` (decimal
integers, ``|`` separators) and mined until the hex digest carries the
required number of leading ``'0'`` characters. Every block is signed with a
fresh Ed25519 keypair over the 32 raw hash bytes.
"""

from __future__ import annotations

import base64
import logging
import time
from dataclasses import dataclass
from enum import Enum
from hashlib import sha256
from typing import Mapping

from . import crypto
from .model import ModelError

log = logging.getLogger(__name__)

GENESIS_PREV_HASH = "0" * 64
DEFAULT_DIFFICULTY = 3
MAX_DIFFICULTY = 6
DEFAULT_MAX_ATTEMPTS = 1 << 28

# The genesis block must be identical on every node, so it is signed with a
# fixed all-zero seed instead of a random keypair.
_GENESIS_SEED = bytes(32)


class MiningExhausted(RuntimeError):
    """The nonce scan hit its attempt cap without satisfying the difficulty."""


class Verdict(str, Enum):
    OK = "ok"
    BAD_HASH = "bad_hash"
    BAD_POW = "bad_pow"
    BAD_LINK = "bad_link"
    BAD_SIGNATURE = "bad_signature"


@dataclass(frozen=True)
class DataBlock:
    index: int
    timestamp_ms: int
    payload_b64: str
    prev_hash: str
    nonce: int
    hash: str
    pub_key_b64: str
    signature_b64: str

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "timestamp_ms": self.timestamp_ms,
            "payload_b64": self.payload_b64,
            "prev_hash": self.prev_hash,
            "nonce": self.nonce,
            "hash": self.hash,
            "pub_key_b64": self.pub_key_b64,
            "signature_b64": self.signature_b64,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DataBlock":
        try:
            return cls(
                index=int(d["index"]),
                timestamp_ms=int(d["timestamp_ms"]),
                payload_b64=d["payload_b64"],
                prev_hash=d["prev_hash"],
                nonce=int(d["nonce"]),
                hash=d["hash"],
                pub_key_b64=d["pub_key_b64"],
                signature_b64=d["signature_b64"],
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ModelError(f"bad block: {exc}") from None

    def payload_bytes(self) -> bytes:
        return base64.b64decode(self.payload_b64)


@dataclass(frozen=True)
class BlockKeyRecord:
    """Which public key signs a given block, and who received that key."""

    block_index: int
    pub_key_b64: str
    distributed_to: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "block_index": self.block_index,
            "pub_key_b64": self.pub_key_b64,
            "distributed_to": sorted(self.distributed_to),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockKeyRecord":
        return cls(int(d["block_index"]), d["pub_key_b64"], frozenset(d["distributed_to"]))


def _check_prev_hash(prev_hash: str) -> None:
    if len(prev_hash) != 64 or any(c not in "0123456789abcdef" for c in prev_hash):
        raise ValueError("prev_hash must be 64 lowercase hex characters")


def compute_hash(index: int, timestamp_ms: int, payload_b64: str, prev_hash: str, nonce: int) -> str:
    _check_prev_hash(prev_hash)
    preimage = f"{index}|{timestamp_ms}|{payload_b64}|{prev_hash}|{nonce}"
    return sha256(preimage.encode("utf-8")).hexdigest()


def _meets_difficulty(digest: str, difficulty: int) -> bool:
    return digest.startswith("0" * difficulty)


def mine(
    index: int,
    timestamp_ms: int,
    payload_b64: str,
    prev_hash: str,
    difficulty: int,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> tuple[int, str]:
    """Scan nonces from 0 and return the first (nonce, hash) meeting difficulty.

    The header prefix is hashed once and the SHA-256 midstate copied per
    nonce, so mining cost does not scale with payload size.
    """
    if difficulty < 0:
        raise ValueError("difficulty must be non-negative")
    _check_prev_hash(prev_hash)
    target = "0" * difficulty
    header = sha256(f"{index}|{timestamp_ms}|{payload_b64}|{prev_hash}|".encode("utf-8"))
    for nonce in range(max_attempts):
        h = header.copy()
        h.update(str(nonce).encode("ascii"))
        digest = h.hexdigest()
        if digest.startswith(target):
            return nonce, digest
    raise MiningExhausted(f"no nonce below {max_attempts} meets difficulty {difficulty}")


def _build_block(
    index: int,
    timestamp_ms: int,
    payload_b64: str,
    prev_hash: str,
    difficulty: int,
    priv_raw: bytes,
    pub_b64: str,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> DataBlock:
    nonce, digest = mine(index, timestamp_ms, payload_b64, prev_hash, difficulty, max_attempts)
    signature = crypto.sign(priv_raw, bytes.fromhex(digest))
    return DataBlock(
        index=index,
        timestamp_ms=timestamp_ms,
        payload_b64=payload_b64,
        prev_hash=prev_hash,
        nonce=nonce,
        hash=digest,
        pub_key_b64=pub_b64,
        signature_b64=signature,
    )


def genesis_block(difficulty: int) -> DataBlock:
    priv_raw, pub_b64 = crypto.signing_keypair_from_seed(_GENESIS_SEED)
    return _build_block(0, 0, "", GENESIS_PREV_HASH, difficulty, priv_raw, pub_b64)


class Chain:
    """An ordered block list rooted at the deterministic genesis block.

    Append is a single-writer operation (the owning master serializes it);
    verification and validation are read-only.
    """

    def __init__(self, blocks: list[DataBlock], difficulty: int):
        if not 0 <= difficulty <= MAX_DIFFICULTY:
            raise ModelError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
        if not blocks:
            raise ModelError("a chain must contain at least the genesis block")
        self.blocks = list(blocks)
        self.difficulty = difficulty

    @classmethod
    def new(cls, difficulty: int = DEFAULT_DIFFICULTY) -> "Chain":
        return cls([genesis_block(difficulty)], difficulty)

    @property
    def tip(self) -> DataBlock:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)

    def append_payload(
        self,
        payload: bytes,
        timestamp_ms: int | None = None,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    ) -> DataBlock:
        """Mine, sign, and append a new block carrying the payload."""
        if timestamp_ms is None:
            timestamp_ms = int(time.time() * 1000)
        priv_raw, pub_b64 = crypto.new_signing_keypair()
        block = _build_block(
            index=len(self.blocks),
            timestamp_ms=timestamp_ms,
            payload_b64=base64.b64encode(payload).decode("ascii"),
            prev_hash=self.tip.hash,
            difficulty=self.difficulty,
            priv_raw=priv_raw,
            pub_b64=pub_b64,
            max_attempts=max_attempts,
        )
        self.blocks.append(block)
        return block

    def append_block(self, block: DataBlock) -> None:
        self.blocks.append(block)

    def clone(self) -> "Chain":
        return Chain(list(self.blocks), self.difficulty)

    def to_dict(self) -> dict:
        return {"difficulty": self.difficulty, "blocks": [b.to_dict() for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "Chain":
        try:
            return cls([DataBlock.from_dict(b) for b in d["blocks"]], int(d["difficulty"]))
        except (KeyError, TypeError) as exc:
            raise ModelError(f"bad chain: {exc}") from None


def verify_block(block: DataBlock, prev_block: DataBlock | None, difficulty: int) -> Verdict:
    """Check one block in the fixed order link -> hash -> pow -> signature."""
    if prev_block is not None:
        if block.prev_hash != prev_block.hash or block.index != prev_block.index + 1:
            return Verdict.BAD_LINK
    else:
        if block.prev_hash != GENESIS_PREV_HASH or block.index != 0:
            return Verdict.BAD_LINK
    try:
        recomputed = compute_hash(
            block.index, block.timestamp_ms, block.payload_b64, block.prev_hash, block.nonce
        )
    except ValueError:
        return Verdict.BAD_HASH
    if recomputed != block.hash:
        return Verdict.BAD_HASH
    if not _meets_difficulty(block.hash, difficulty):
        return Verdict.BAD_POW
    try:
        hash_bytes = bytes.fromhex(block.hash)
    except ValueError:
        return Verdict.BAD_SIGNATURE
    if not crypto.verify(block.pub_key_b64, hash_bytes, block.signature_b64):
        return Verdict.BAD_SIGNATURE
    return Verdict.OK


@dataclass(frozen=True)
class ChainValidation:
    ok: bool
    failing_index: int | None = None
    reason: Verdict | None = None


def validate_chain(chain: Chain) -> ChainValidation:
    """Validate every block against its predecessor; report the first failure."""
    prev: DataBlock | None = None
    for i, block in enumerate(chain.blocks):
        verdict = verify_block(block, prev, chain.difficulty)
        if verdict is not Verdict.OK:
            return ChainValidation(ok=False, failing_index=i, reason=verdict)
        prev = block
    return ChainValidation(ok=True)


@dataclass(frozen=True)
class MajorityOutcome:
    canonical: Chain | None
    deviants: tuple[str, ...]
    no_majority: bool


def resolve_majority(replicas: Mapping[str, Chain]) -> MajorityOutcome:
    """Pick the chain held by a strict majority of replicas, if it validates.

    Chains are identified by (tip hash, length). Holders of any other chain
    are reported as deviants; when no chain reaches a strict majority, or the
    majority chain itself fails validation, the outcome flags no_majority so
    an operator can investigate.
    """
    if not replicas:
        raise ValueError("resolve_majority requires at least one replica")
    groups: dict[tuple[str, int], list[str]] = {}
    for node_id, chain in replicas.items():
        groups.setdefault((chain.tip.hash, len(chain)), []).append(node_id)
    total = len(replicas)
    for key, holders in groups.items():
        if len(holders) * 2 > total:
            candidate = replicas[holders[0]]
            if not validate_chain(candidate).ok:
                log.warning("majority chain fails validation; flagging for operator")
                return MajorityOutcome(None, (), True)
            deviants = tuple(sorted(set(replicas) - set(holders)))
            return MajorityOutcome(candidate, deviants, False)
    return MajorityOutcome(None, (), True)

"""Thin wrappers over Ed25519 signing and AES-GCM storage encryption.

Keys and signatures travel as Base64 text. Stored objects use the layout
nonce || ciphertext || tag, Base64-encoded at rest, so any tampering fails
authentication on decrypt.
"""

from __future__ import annotations

import base64
import os

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

_NONCE_LEN = 12


class StorageIntegrityError(Exception):
    """Decryption failed authentication (wrong key or tampered ciphertext)."""


def new_signing_keypair() -> tuple[bytes, str]:
    """Return (private key raw bytes, public key Base64)."""
    priv = Ed25519PrivateKey.generate()
    return _keypair_parts(priv)


def signing_keypair_from_seed(seed: bytes) -> tuple[bytes, str]:
    """Deterministic keypair from a 32-byte seed (used for the genesis block)."""
    priv = Ed25519PrivateKey.from_private_bytes(seed)
    return _keypair_parts(priv)


def _keypair_parts(priv: Ed25519PrivateKey) -> tuple[bytes, str]:
    priv_raw = priv.private_bytes_raw()
    pub_b64 = base64.b64encode(priv.public_key().public_bytes_raw()).decode("ascii")
    return priv_raw, pub_b64


def sign(priv_raw: bytes, message: bytes) -> str:
    sig = Ed25519PrivateKey.from_private_bytes(priv_raw).sign(message)
    return base64.b64encode(sig).decode("ascii")


def verify(pub_b64: str, message: bytes, sig_b64: str) -> bool:
    try:
        pub = Ed25519PublicKey.from_public_bytes(base64.b64decode(pub_b64, validate=True))
        pub.verify(base64.b64decode(sig_b64, validate=True), message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


def new_storage_key() -> str:
    return base64.b64encode(AESGCM.generate_key(bit_length=256)).decode("ascii")


def seal(key_b64: str, plaintext: bytes) -> str:
    key = base64.b64decode(key_b64)
    nonce = os.urandom(_NONCE_LEN)
    blob = nonce + AESGCM(key).encrypt(nonce, plaintext, None)
    return base64.b64encode(blob).decode("ascii")


def open_sealed(key_b64: str, blob_b64: str) -> bytes:
    try:
        key = base64.b64decode(key_b64)
        blob = base64.b64decode(blob_b64)
        nonce, ciphertext = blob[:_NONCE_LEN], blob[_NONCE_LEN:]
        return AESGCM(key).decrypt(nonce, ciphertext, None)
    except (InvalidTag, ValueError, TypeError) as exc:
        raise StorageIntegrityError(f"authentication failed: {exc}") from None

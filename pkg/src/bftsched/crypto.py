"""Digests and the pluggable signature scheme.

Real key exchange is out of scope; :class:`DigestSigner` produces a
signature as ``sha256(payload || signer)`` which is enough to detect
forged or tampered messages inside the simulator.
"""
from __future__ import annotations

import hashlib
import json
from typing import Any, Protocol


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_record(obj: Any) -> str:
    """Hex SHA-256 of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


class SignatureScheme(Protocol):
    def sign(self, signer: str, payload: bytes) -> bytes: ...

    def verify(self, signer: str, payload: bytes, signature: bytes) -> bool: ...


class DigestSigner:
    """Test-grade scheme: anyone can sign as anyone, but not by accident."""

    def sign(self, signer: str, payload: bytes) -> bytes:
        return hashlib.sha256(payload + b"|" + signer.encode()).digest()

    def verify(self, signer: str, payload: bytes, signature: bytes) -> bool:
        return self.sign(signer, payload) == signature


DEFAULT_SIGNER = DigestSigner()

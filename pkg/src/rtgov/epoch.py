"""Epoch-based attestation cache with fail-closed semantics.

A node attests once per epoch: the attestation authority checks the
enclave measurement and the policy root the node is about to enforce.
Inside the epoch, verifying an action costs one digest comparison. Once
``now - last_attest`` exceeds the TTL the cache is stale and every action
must be denied until a fresh attestation succeeds.

All times are logical milliseconds supplied by the caller.

Reset-signal wire format (big-endian)::

    canonical := b"RSET" 0x01 lp(issuer utf-8) root[32] nonce[16] u64(issued_at_ms)
    wire      := canonical lp(signature)
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from rtgov.keys import KeyPair, verify

DEFAULT_TTL_MS = 60_000
DEFAULT_ATTEST_LATENCY_MS = 200


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def measurement_of(image: str) -> bytes:
    """Simulated launch measurement of an enclave image."""
    return hashlib.sha256(b"enclave-image:" + image.encode()).digest()


class EpochStatus(enum.Enum):
    FRESH = "fresh"
    REATTEST = "reattest"
    HALTED = "halted"
    ATTESTING = "attesting"


@dataclass
class EpochState:
    ttl: int = DEFAULT_TTL_MS
    seq: int = 0
    committed_root: bytes | None = None
    measurement: bytes | None = None
    last_attest: int | None = None
    halted: bool = True
    last_forced_reset: int | None = None
    ready_at: int = 0
    blocking: bool = False

    @property
    def epoch_id(self) -> str:
        return f"E-{self.seq:03d}"

    def stale(self, now: int) -> bool:
        return self.last_attest is None or now - self.last_attest > self.ttl

    @property
    def epoch_end(self) -> int | None:
        return None if self.last_attest is None else self.last_attest + self.ttl


@dataclass(frozen=True)
class AttestationQuote:
    measurement: bytes
    policy_root: bytes
    nonce: bytes
    signature: bytes = b""

    @property
    def canonical(self) -> bytes:
        return b"QUOT\x01" + _lp(self.measurement) + _lp(self.policy_root) + _lp(self.nonce)


class MockEnclave:
    """Stands in for TEE hardware: produces signed quotes for its measurement."""

    def __init__(self, image: str, platform_key: KeyPair) -> None:
        self.image = image
        self.measurement = measurement_of(image)
        self._key = platform_key
        self._counter = 0

    def quote(self, policy_root: bytes, nonce: bytes | None = None) -> AttestationQuote:
        if nonce is None:
            self._counter += 1
            nonce = hashlib.sha256(self.measurement + self._counter.to_bytes(8, "big")).digest()[:16]
        draft = AttestationQuote(self.measurement, policy_root, nonce)
        return AttestationQuote(draft.measurement, draft.policy_root, draft.nonce, self._key.sign(draft.canonical))


@dataclass(frozen=True)
class ResetSignal:
    issuer: str
    policy_root: bytes
    nonce: bytes
    issued_at: int
    signature: bytes = b""

    @property
    def canonical(self) -> bytes:
        return (
            b"RSET\x01"
            + _lp(self.issuer.encode())
            + self.policy_root
            + self.nonce
            + struct.pack(">Q", self.issued_at)
        )

    def to_wire(self) -> bytes:
        return self.canonical + _lp(self.signature)

    @classmethod
    def from_wire(cls, data: bytes) -> "ResetSignal":
        if data[:5] != b"RSET\x01":
            raise ValueError("not a reset signal")
        pos = 5
        (n,) = struct.unpack_from(">I", data, pos)
        issuer = data[pos + 4 : pos + 4 + n].decode()
        pos += 4 + n
        root, nonce = data[pos : pos + 32], data[pos + 32 : pos + 48]
        (issued_at,) = struct.unpack_from(">Q", data, pos + 48)
        pos += 56
        (m,) = struct.unpack_from(">I", data, pos)
        sig = data[pos + 4 : pos + 4 + m]
        if pos + 4 + m != len(data):
            raise ValueError("malformed reset signal")
        return cls(issuer, root, nonce, issued_at, sig)

    @classmethod
    def signed(cls, key: KeyPair, issuer: str, policy_root: bytes, nonce: bytes, issued_at: int) -> "ResetSignal":
        draft = cls(issuer, policy_root, nonce, issued_at)
        return cls(issuer, policy_root, nonce, issued_at, key.sign(draft.canonical))


class AttestationFailed(Exception):
    pass


@dataclass(frozen=True)
class ResetEvent:
    time: int
    issuer: str
    accepted: bool
    reason: str


class EpochManager:
    """Attestation cache for one node.

    ``authority_keys`` are the public keys whose quote signatures are
    trusted (more than one models redundant authorities). ``reset_issuers``
    maps PAP identities allowed to force an epoch reset to their keys.
    ``on_security_event`` receives rejected resets and failed attestations.
    """

    def __init__(
        self,
        expected_measurements: Iterable[bytes],
        authority_keys: Iterable[bytes],
        reset_issuers: Mapping[str, bytes] | None = None,
        ttl: int = DEFAULT_TTL_MS,
        latency: int = DEFAULT_ATTEST_LATENCY_MS,
        first_epoch: int = 0,
        on_security_event: Callable[[str, int], None] | None = None,
    ) -> None:
        if ttl <= 0:
            raise ValueError("epoch TTL must be positive")
        self.expected = set(expected_measurements)
        self.authority_keys = list(authority_keys)
        self.reset_issuers = dict(reset_issuers or {})
        self.latency = latency
        self.state = EpochState(ttl=ttl, seq=first_epoch)
        self.reset_log: list[ResetEvent] = []
        self.digest_comparisons = 0
        self._seen_nonces: set[bytes] = set()
        self._on_security_event = on_security_event

    @property
    def ttl(self) -> int:
        return self.state.ttl

    def _security(self, message: str, now: int) -> None:
        if self._on_security_event is not None:
            self._on_security_event(message, now)

    def attest(self, quote: AttestationQuote, now: int) -> EpochState:
        """Validate ``quote`` and open a new epoch committed to its policy root.

        The round trip takes ``latency`` ms: until ``now + latency`` actions
        that need the new root are deferred (:attr:`EpochStatus.ATTESTING`).
        A refresh of the root already being enforced does not block.
        """
        if not any(verify(k, quote.canonical, quote.signature) for k in self.authority_keys):
            self._security("attestation quote signature invalid", now)
            raise AttestationFailed("quote signature does not verify")
        if quote.measurement not in self.expected:
            self._security("attestation measurement mismatch", now)
            raise AttestationFailed("enclave measurement is not an expected value")
        if quote.nonce in self._seen_nonces:
            self._security("attestation quote replayed", now)
            raise AttestationFailed("quote nonce already used")
        self._seen_nonces.add(quote.nonce)

        s = self.state
        continuing = (
            not s.stale(now) and s.committed_root == quote.policy_root and s.measurement == quote.measurement
        )
        s.seq += 1
        s.committed_root = quote.policy_root
        s.measurement = quote.measurement
        s.last_attest = now
        s.halted = False
        s.ready_at = now + self.latency
        s.blocking = not continuing
        return s

    def observe(self, now: int) -> bool:
        """Refresh the halt flag at an observation point; returns it."""
        self.state.halted = self.state.stale(now)
        return self.state.halted

    def verify(self, local_root: bytes, now: int) -> EpochStatus:
        s = self.state
        if self.observe(now):
            return EpochStatus.HALTED
        if s.blocking and now < s.ready_at:
            return EpochStatus.ATTESTING
        self.digest_comparisons += 1
        if hmac.compare_digest(local_root, s.committed_root or b""):
            return EpochStatus.FRESH
        return EpochStatus.REATTEST

    def emergency_reset(
        self, signal: ResetSignal, now: int, quote: AttestationQuote | None = None
    ) -> bool:
        """Accept a PAP-signed forced reset, at most one per TTL/2."""
        s = self.state
        public = self.reset_issuers.get(signal.issuer)
        if public is None or not signal.signature or not verify(public, signal.canonical, signal.signature):
            return self._reject_reset(signal, now, "unauthenticated")
        if signal.nonce in self._seen_nonces:
            return self._reject_reset(signal, now, "replayed")
        if s.last_forced_reset is not None and 2 * (now - s.last_forced_reset) < s.ttl:
            return self._reject_reset(signal, now, "rate-limited")
        self._seen_nonces.add(signal.nonce)
        s.last_forced_reset = now
        self.reset_log.append(ResetEvent(now, signal.issuer, True, "accepted"))
        if quote is not None:
            self.attest(quote, now)
        return True

    def _reject_reset(self, signal: ResetSignal, now: int, reason: str) -> bool:
        self.reset_log.append(ResetEvent(now, signal.issuer, False, reason))
        self._security(f"emergency reset rejected: {reason}", now)
        return False

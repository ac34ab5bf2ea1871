"""Workload identities and epoch-scoped action credentials.

A credential authorises one action class for one workload inside one
attested epoch, bound to the enclave measurement of that epoch. Replaying
it into a later epoch or onto a different enclave fails validation.

Credential canonical bytes::

    b"ACRD" 0x01 lp(subject uri) lp(action_class) lp(epoch_id) u64(expiry_ms) lp(measurement)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from rtgov.epoch import EpochState
from rtgov.keys import KeyPair, verify


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


@dataclass(frozen=True)
class WorkloadIdentity:
    trust_domain: str
    path: str
    public_key: bytes = b""

    @property
    def uri(self) -> str:
        return f"spiffe://{self.trust_domain}{self.path}"

    @classmethod
    def parse(cls, uri: str, public_key: bytes = b"") -> "WorkloadIdentity":
        prefix = "spiffe://"
        if not uri.startswith(prefix):
            raise ValueError(f"not a workload identity URI: {uri!r}")
        rest = uri[len(prefix) :]
        domain, sep, path = rest.partition("/")
        if not domain or not sep:
            raise ValueError(f"workload identity needs a trust domain and a path: {uri!r}")
        return cls(domain, "/" + path, public_key)


@dataclass(frozen=True)
class ActionCredential:
    subject: str
    action_class: str
    epoch_id: str
    expiry: int
    measurement: bytes
    signature: bytes = b""

    @property
    def canonical(self) -> bytes:
        return (
            b"ACRD\x01"
            + _lp(self.subject.encode())
            + _lp(self.action_class.encode())
            + _lp(self.epoch_id.encode())
            + struct.pack(">Q", self.expiry)
            + _lp(self.measurement)
        )


class InvalidReason(enum.Enum):
    SIGNATURE = "signature"
    SCOPE = "scope"
    MEASUREMENT = "measurement"
    EPOCH = "epoch-mismatch"
    EXPIRED = "expired"


@dataclass(frozen=True)
class CredentialCheck:
    valid: bool
    reason: InvalidReason | None = None

    def __bool__(self) -> bool:
        return self.valid


class CredentialRefused(PermissionError):
    pass


class CredentialIssuer:
    """Node-level issuer of per-epoch action credentials."""

    def __init__(self, key: KeyPair) -> None:
        self._key = key
        self.public = key.public
        self.registry: dict[str, WorkloadIdentity] = {}

    def register(self, identity: WorkloadIdentity) -> None:
        if identity.uri in self.registry:
            raise ValueError(f"identity {identity.uri} already registered")
        self.registry[identity.uri] = identity

    def issue(self, subject: str, action_class: str, epoch: EpochState, now: int) -> ActionCredential:
        if subject not in self.registry:
            raise CredentialRefused(f"unknown workload {subject}")
        if epoch.stale(now) or epoch.measurement is None:
            raise CredentialRefused("epoch is halted; credentials are not issued")
        draft = ActionCredential(subject, action_class, epoch.epoch_id, epoch.epoch_end, epoch.measurement)
        return ActionCredential(
            draft.subject,
            draft.action_class,
            draft.epoch_id,
            draft.expiry,
            draft.measurement,
            self._key.sign(draft.canonical),
        )


def validate_credential(
    cred: ActionCredential,
    action_class: str,
    epoch: EpochState,
    now: int,
    issuer_key: bytes,
) -> CredentialCheck:
    if not verify(issuer_key, cred.canonical, cred.signature):
        return CredentialCheck(False, InvalidReason.SIGNATURE)
    if cred.action_class != action_class:
        return CredentialCheck(False, InvalidReason.SCOPE)
    if cred.measurement != epoch.measurement:
        return CredentialCheck(False, InvalidReason.MEASUREMENT)
    if cred.epoch_id != epoch.epoch_id:
        return CredentialCheck(False, InvalidReason.EPOCH)
    if not now < cred.expiry:
        return CredentialCheck(False, InvalidReason.EXPIRED)
    return CredentialCheck(True)

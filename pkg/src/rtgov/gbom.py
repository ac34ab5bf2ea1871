"""Hash-chained governance audit log with OSCAL assessment-results export.

Every record carries the digest of its predecessor, so the log verifies
end to end: editing, dropping or reordering any record breaks the chain at
the first affected index. Records persist as one canonical JSON object per
line. The OSCAL export groups records by action and keeps the chain fields
under an ``gbom-chain`` key next to the observation props, so an exported
document can be parsed back and verified on its own.
"""

from __future__ import annotations

import hashlib
import json
import uuid
from dataclasses import dataclass, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping

from rtgov.keys import KeyPair, verify

GENESIS_HASH = hashlib.sha256(b"").hexdigest()
OSCAL_SCHEMA = "https://pages.nist.gov/OSCAL/schemas/json/1.1.2/oscal_assessment-results_schema.json"
OSCAL_VERSION = "1.1.2"
CONTROL_ID = "si-17"
TARGET_ID = "ehv-si-17"
PROP_NAMES = ("policy_merkle_root", "tee_measurement", "epoch_id", "dfa_state", "enforcement", "spiffe_svid")
DEFAULT_ORIGIN = datetime(2026, 1, 1, tzinfo=timezone.utc)

PERMIT, DENY, ESCALATE = "PERMIT", "DENY", "ESCALATE"
KINDS = ("decision", "token", "override", "security")


def render_root(root: bytes | None) -> str:
    return "sha256:" + (root.hex() if root else "")


def render_measurement(measurement: bytes | None, platform: str = "sim") -> str:
    return f"{platform}:mrenclave:" + (measurement.hex() if measurement else "")


def iso_time(ms: int, origin: datetime = DEFAULT_ORIGIN) -> str:
    t = origin + timedelta(milliseconds=ms)
    base = t.strftime("%Y-%m-%dT%H:%M:%S")
    frac = t.microsecond // 1000
    return f"{base}.{frac:03d}Z" if frac else f"{base}Z"


def _uuid_from(digest_hex: str) -> str:
    return str(uuid.UUID(bytes=bytes.fromhex(digest_hex)[:16], version=4))


def _canonical(data: Mapping) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


@dataclass(frozen=True)
class GbomRecord:
    index: int
    kind: str
    timestamp: int
    policy_merkle_root: str
    tee_measurement: str
    epoch_id: str
    dfa_state: str
    enforcement: str
    identity: str
    finding_status: str
    action_id: str | None
    detail: str
    prev_hash: str
    record_hash: str
    record_uuid: str
    signature: str = ""

    _UNHASHED = ("record_hash", "record_uuid", "signature")

    def hashed_fields(self) -> dict:
        return {k: getattr(self, k) for k in _FIELD_NAMES if k not in self._UNHASHED}

    def compute_hash(self) -> str:
        return hashlib.sha256(_canonical(self.hashed_fields())).hexdigest()

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in _FIELD_NAMES}

    def to_line(self) -> bytes:
        return _canonical(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping) -> "GbomRecord":
        if set(data) != set(_FIELD_NAMES):
            raise ValueError("record fields do not match the GBOM record schema")
        return cls(**{n: data[n] for n in _FIELD_NAMES})


_FIELD_NAMES = tuple(f.name for f in fields(GbomRecord))


@dataclass(frozen=True)
class OverrideEnvelope:
    target_hash: str
    approver: str
    decision: str  # "approve" | "reject"
    signature: bytes = b""

    @property
    def canonical(self) -> bytes:
        return _canonical({"target": self.target_hash, "approver": self.approver, "decision": self.decision})

    @classmethod
    def signed(cls, key: KeyPair, target_hash: str, approver: str, decision: str) -> "OverrideEnvelope":
        draft = cls(target_hash, approver, decision)
        return cls(target_hash, approver, decision, key.sign(draft.canonical))


class OverrideRejected(PermissionError):
    pass


@dataclass(frozen=True)
class ChainReport:
    valid: bool
    length: int
    broken_at: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.valid


class GbomLog:
    """Append-only audit log.

    There is deliberately no update or delete method. ``path`` (optional)
    receives every record as a canonical JSON line at append time.
    """

    def __init__(
        self,
        path: str | Path | None = None,
        signer: KeyPair | None = None,
        approvers: Mapping[str, bytes] | None = None,
        policy_issuers: Iterable[str] = (),
        origin: datetime = DEFAULT_ORIGIN,
    ) -> None:
        self._records: list[GbomRecord] = []
        self._by_hash: dict[str, GbomRecord] = {}
        self.path = Path(path) if path is not None else None
        self._signer = signer
        self.approvers = dict(approvers or {})
        self.policy_issuers = frozenset(policy_issuers)
        self.origin = origin
        self._overrides: dict[str, dict] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i: int) -> GbomRecord:
        return self._records[i]

    @property
    def records(self) -> tuple[GbomRecord, ...]:
        return tuple(self._records)

    @property
    def head(self) -> str:
        return self._records[-1].record_hash if self._records else GENESIS_HASH

    def append(
        self,
        *,
        kind: str,
        timestamp: int,
        policy_merkle_root: str,
        tee_measurement: str,
        epoch_id: str,
        dfa_state: str,
        enforcement: str,
        identity: str,
        action_id: str | None = None,
        detail: str = "",
    ) -> GbomRecord:
        if kind not in KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        if enforcement not in (PERMIT, DENY, ESCALATE):
            raise ValueError(f"unknown enforcement value {enforcement!r}")
        draft = GbomRecord(
            index=len(self._records),
            kind=kind,
            timestamp=int(timestamp),
            policy_merkle_root=policy_merkle_root,
            tee_measurement=tee_measurement,
            epoch_id=epoch_id,
            dfa_state=dfa_state,
            enforcement=enforcement,
            identity=identity,
            finding_status="satisfied" if enforcement == PERMIT else "not-satisfied",
            action_id=action_id,
            detail=detail,
            prev_hash=self.head,
            record_hash="",
            record_uuid="",
        )
        digest = draft.compute_hash()
        sig = self._signer.sign(bytes.fromhex(digest)).hex() if self._signer else ""
        record = GbomRecord(**{**draft.hashed_fields(), "record_hash": digest, "record_uuid": _uuid_from(digest), "signature": sig})
        self._records.append(record)
        self._by_hash[digest] = record
        if self.path is not None:
            with self.path.open("ab") as fh:
                fh.write(record.to_line() + b"\n")
        return record

    def count(self, kind: str) -> int:
        return sum(1 for r in self._records if r.kind == kind)

    # -- human oversight --------------------------------------------------

    def record_override(self, envelope: OverrideEnvelope, now: int) -> GbomRecord:
        """Chain a signed approval (or rejection) of an escalated decision."""
        if envelope.approver in self.policy_issuers:
            raise OverrideRejected("policy issuers may not approve escalations")
        public = self.approvers.get(envelope.approver)
        if public is None:
            raise OverrideRejected(f"{envelope.approver} is not an allowlisted approver")
        if not verify(public, envelope.canonical, envelope.signature):
            raise OverrideRejected("override envelope signature does not verify")
        if envelope.decision not in ("approve", "reject"):
            raise OverrideRejected(f"unknown override decision {envelope.decision!r}")
        target = self._by_hash.get(envelope.target_hash)
        if target is None or target.kind != "decision" or target.enforcement != ESCALATE:
            raise OverrideRejected("override target must be an ESCALATE decision in this log")
        if envelope.target_hash in self._overrides:
            raise OverrideRejected("escalation already has an override")
        approved = envelope.decision == "approve"
        record = self.append(
            kind="override",
            timestamp=now,
            policy_merkle_root=target.policy_merkle_root,
            tee_measurement=target.tee_measurement,
            epoch_id=target.epoch_id,
            dfa_state=target.dfa_state,
            enforcement=PERMIT if approved else DENY,
            identity=target.identity,
            action_id=target.action_id,
            detail=f"{envelope.decision} {target.record_uuid} by {envelope.approver}",
        )
        self._overrides[envelope.target_hash] = {"approved": approved, "consumed": False}
        return record

    def consume_override(self, target_hash: str) -> bool:
        """Spend an approved override; each authorises one action instance."""
        entry = self._overrides.get(target_hash)
        if entry is None or not entry["approved"] or entry["consumed"]:
            return False
        entry["consumed"] = True
        return True

    # -- persistence / export --------------------------------------------

    @classmethod
    def load(cls, path: str | Path) -> list[GbomRecord]:
        out = []
        for line in Path(path).read_bytes().splitlines():
            if line:
                out.append(GbomRecord.from_dict(json.loads(line)))
        return out

    def export_oscal(self, title: str = "Runtime Governance Bill of Materials", version: str = "1.0.0") -> dict:
        return export_oscal(self._records, origin=self.origin, title=title, version=version)


# --------------------------------------------------------------------------
# OSCAL
# --------------------------------------------------------------------------


def _group(records: Iterable[GbomRecord]) -> list[list[GbomRecord]]:
    groups: list[list[GbomRecord]] = []
    for r in records:
        if groups and r.action_id is not None and groups[-1][0].action_id == r.action_id:
            groups[-1].append(r)
        else:
            groups.append([r])
    return groups


def _observation(r: GbomRecord) -> dict:
    values = (
        r.policy_merkle_root,
        r.tee_measurement,
        r.epoch_id,
        r.dfa_state,
        r.enforcement,
        r.identity,
    )
    return {
        "uuid": r.record_uuid,
        "description": "GCD enforcement outcome" if r.kind != "security" else "Security event",
        "props": [{"name": n, "value": v} for n, v in zip(PROP_NAMES, values)],
        "gbom-chain": {
            "index": r.index,
            "kind": r.kind,
            "timestamp": r.timestamp,
            "finding_status": r.finding_status,
            "action_id": r.action_id,
            "detail": r.detail,
            "prev_hash": r.prev_hash,
            "record_hash": r.record_hash,
            "signature": r.signature,
        },
    }


def _finding(r: GbomRecord) -> dict:
    compliant = r.finding_status == "satisfied"
    return {
        "uuid": _uuid_from(hashlib.sha256(b"finding:" + r.record_hash.encode()).hexdigest()),
        "title": "Action compliant with epoch policy" if compliant else "Action not permitted under epoch policy",
        "description": f"{r.kind} {r.enforcement}: {r.detail}".rstrip(": "),
        "target": {
            "type": "objective-id",
            "target-id": TARGET_ID,
            "status": {"state": r.finding_status},
        },
        "related-observations": [{"observation-uuid": r.record_uuid}],
    }


def export_oscal(
    records: Iterable[GbomRecord],
    origin: datetime = DEFAULT_ORIGIN,
    title: str = "Runtime Governance Bill of Materials",
    version: str = "1.0.0",
) -> dict:
    records = list(records)
    head = records[-1].record_hash if records else GENESIS_HASH
    last = records[-1].timestamp if records else 0
    results = []
    for group in _group(records):
        first = group[0]
        label = "Action" if first.action_id is not None else first.kind.capitalize()
        results.append(
            {
                "uuid": _uuid_from(hashlib.sha256(b"result:" + first.record_hash.encode()).hexdigest()),
                "title": f"{label} {first.action_id or first.index} - Epoch {first.epoch_id}",
                "description": group[-1].detail or f"{first.kind} record",
                "start": iso_time(first.timestamp, origin),
                "end": iso_time(group[-1].timestamp + 1, origin),
                "reviewed-controls": {
                    "control-selections": [{"include-controls": [{"control-id": CONTROL_ID}]}]
                },
                "observations": [_observation(r) for r in group],
                "findings": [_finding(r) for r in group],
            }
        )
    return {
        "$schema": OSCAL_SCHEMA,
        "assessment-results": {
            "uuid": _uuid_from(hashlib.sha256(b"document:" + head.encode()).hexdigest()),
            "metadata": {
                "title": title,
                "last-modified": iso_time(last, origin),
                "version": version,
                "oscal-version": OSCAL_VERSION,
            },
            "results": results,
        },
    }


def records_from_oscal(doc: Mapping) -> list[GbomRecord]:
    """Parse records back out of an exported assessment-results document."""
    out = []
    for result in doc["assessment-results"]["results"]:
        for obs in result["observations"]:
            props = {p["name"]: p["value"] for p in obs["props"]}
            chain = obs["gbom-chain"]
            out.append(
                GbomRecord(
                    index=chain["index"],
                    kind=chain["kind"],
                    timestamp=chain["timestamp"],
                    policy_merkle_root=props["policy_merkle_root"],
                    tee_measurement=props["tee_measurement"],
                    epoch_id=props["epoch_id"],
                    dfa_state=props["dfa_state"],
                    enforcement=props["enforcement"],
                    identity=props["spiffe_svid"],
                    finding_status=chain["finding_status"],
                    action_id=chain["action_id"],
                    detail=chain["detail"],
                    prev_hash=chain["prev_hash"],
                    record_hash=chain["record_hash"],
                    record_uuid=obs["uuid"],
                    signature=chain.get("signature", ""),
                )
            )
    return out


# --------------------------------------------------------------------------
# Verification (audit side)
# --------------------------------------------------------------------------


def _verify_records(records: Iterable[GbomRecord], public_key: bytes | None) -> ChainReport:
    prev = GENESIS_HASH
    n = 0
    for i, r in enumerate(records):
        n = i + 1
        reason = _check(r, i, prev, public_key)
        if reason:
            return ChainReport(False, n, i, reason)
        prev = r.record_hash
    return ChainReport(True, n)


def _check(r: GbomRecord, i: int, prev: str, public_key: bytes | None) -> str:
    if r.index != i:
        return "index out of sequence"
    if r.prev_hash != prev:
        return "prev_hash does not link to the preceding record"
    if r.compute_hash() != r.record_hash:
        return "record_hash does not match record contents"
    if r.record_uuid != _uuid_from(r.record_hash):
        return "record_uuid does not derive from record_hash"
    if r.enforcement == PERMIT and r.finding_status != "satisfied":
        return "PERMIT record without satisfied finding"
    if public_key is not None:
        try:
            signature = bytes.fromhex(r.signature or "")
        except ValueError:
            return "record signature is not hex"
        if signature.hex() != (r.signature or ""):
            return "record signature is not canonical lowercase hex"
        if not verify(public_key, bytes.fromhex(r.record_hash), signature):
            return "record signature does not verify"
    return ""


def _verify_lines(lines: list[bytes], public_key: bytes | None) -> ChainReport:
    """Stream the lines, stopping at the first failure."""
    prev = GENESIS_HASH
    for i, line in enumerate(lines):
        try:
            record = GbomRecord.from_dict(json.loads(line.decode("utf-8")))
        except (ValueError, TypeError, UnicodeDecodeError):
            return ChainReport(False, len(lines), i, "record is not valid canonical JSON")
        if record.to_line() != line:
            return ChainReport(False, len(lines), i, "record bytes are not in canonical form")
        reason = _check(record, i, prev, public_key)
        if reason:
            return ChainReport(False, len(lines), i, reason)
        prev = record.record_hash
    return ChainReport(True, len(lines))


def verify_chain(source, public_key: bytes | None = None) -> ChainReport:
    """Check a log, record list, exported OSCAL document, or NDJSON file.

    Reports the first index at which the chain fails.
    """
    if isinstance(source, GbomLog):
        return _verify_records(source.records, public_key)
    if isinstance(source, (str, Path)):
        lines = [ln for ln in Path(source).read_bytes().split(b"\n") if ln]
        return _verify_lines(lines, public_key)
    if isinstance(source, bytes):
        return _verify_lines([ln for ln in source.split(b"\n") if ln], public_key)
    if isinstance(source, Mapping):
        try:
            records = records_from_oscal(source)
        except (KeyError, TypeError, ValueError) as exc:
            return ChainReport(False, 0, 0, f"document is not a GBOM export: {exc}")
        return _verify_records(records, public_key)
    return _verify_records(list(source), public_key)

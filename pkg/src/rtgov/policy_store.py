"""Causal-DAG CRDT holding signed policy mutations.

Each replica keeps a DAG of signed mutations stamped with vector clocks.
Ingestion is idempotent and order-insensitive, so replicas that have seen
the same mutations derive the same effective policy and the same Merkle
root. No wall-clock value enters any ordering decision.

Mutation wire format (all integers big-endian)::

    canonical := b"PMUT" 0x01
                 lp(issuer utf-8)
                 u32(n_clock) { lp(node utf-8) u64(counter) }*   # nodes ascending
                 u32(n_parents) { parent_id[32] }*               # ids ascending
                 lp(payload)
    wire      := canonical lp(signature)
    lp(x)     := u32(len(x)) x

The mutation id is SHA-256 of ``canonical``; the signature covers
``canonical`` as well.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

from rtgov.grammar import GrammarError, PolicyGrammar, parse_grammar
from rtgov.keys import KeyPair, verify

log = logging.getLogger(__name__)

EMPTY_ROOT = hashlib.sha256(b"").digest()


class Order(enum.Enum):
    DOMINATES = "dominates"
    DOMINATED = "dominated"
    EQUAL = "equal"
    CONCURRENT = "concurrent"


@dataclass(frozen=True)
class VectorClock:
    """Per-node counters; absent nodes read as zero."""

    entries: tuple[tuple[str, int], ...] = ()

    def __post_init__(self) -> None:
        cleaned = tuple(sorted((k, int(v)) for k, v in self.entries if v))
        if any(v < 0 for _, v in cleaned):
            raise ValueError("vector clock counters must be non-negative")
        object.__setattr__(self, "entries", cleaned)

    @classmethod
    def of(cls, mapping: Mapping[str, int] | None = None, **kw: int) -> "VectorClock":
        data = dict(mapping or {})
        data.update(kw)
        return cls(tuple(data.items()))

    def as_dict(self) -> dict[str, int]:
        return dict(self.entries)

    def __getitem__(self, node: str) -> int:
        return self.as_dict().get(node, 0)

    def increment(self, node: str) -> "VectorClock":
        data = self.as_dict()
        data[node] = data.get(node, 0) + 1
        return VectorClock.of(data)

    def merge(self, other: "VectorClock") -> "VectorClock":
        return vc_merge(self, other)

    def compare(self, other: "VectorClock") -> Order:
        return vc_compare(self, other)

    def total(self) -> int:
        return sum(v for _, v in self.entries)

    def __str__(self) -> str:
        return "{" + ", ".join(f"{k}:{v}" for k, v in self.entries) + "}"


def vc_merge(a: VectorClock, b: VectorClock) -> VectorClock:
    """Componentwise maximum (the join)."""
    out = a.as_dict()
    for node, count in b.entries:
        if count > out.get(node, 0):
            out[node] = count
    return VectorClock.of(out)


def vc_compare(a: VectorClock, b: VectorClock) -> Order:
    da, db = a.as_dict(), b.as_dict()
    greater = less = False
    for node in da.keys() | db.keys():
        x, y = da.get(node, 0), db.get(node, 0)
        if x > y:
            greater = True
        elif x < y:
            less = True
    if greater and less:
        return Order.CONCURRENT
    if greater:
        return Order.DOMINATES
    if less:
        return Order.DOMINATED
    return Order.EQUAL


# --------------------------------------------------------------------------
# Mutations
# --------------------------------------------------------------------------


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated mutation encoding")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())


@dataclass(frozen=True)
class PolicyMutation:
    issuer: str
    clock: VectorClock
    parents: frozenset[bytes]
    payload: bytes
    signature: bytes = field(default=b"", compare=False)

    @cached_property
    def canonical(self) -> bytes:
        parts = [b"PMUT\x01", _lp(self.issuer.encode()), struct.pack(">I", len(self.clock.entries))]
        for node, count in self.clock.entries:
            parts.append(_lp(node.encode()) + struct.pack(">Q", count))
        parts.append(struct.pack(">I", len(self.parents)))
        parts.extend(sorted(self.parents))
        parts.append(_lp(self.payload))
        return b"".join(parts)

    @cached_property
    def id(self) -> bytes:
        return hashlib.sha256(self.canonical).digest()

    def to_wire(self) -> bytes:
        return self.canonical + _lp(self.signature)

    @classmethod
    def from_wire(cls, data: bytes) -> "PolicyMutation":
        r = _Reader(data)
        if r.take(5) != b"PMUT\x01":
            raise ValueError("not a policy mutation")
        issuer = r.lp().decode()
        clock = {}
        for _ in range(r.u32()):
            node = r.lp().decode()
            clock[node] = r.u64()
        parents = frozenset(r.take(32) for _ in range(r.u32()))
        payload = r.lp()
        signature = r.lp()
        if r.pos != len(data):
            raise ValueError("trailing bytes after mutation")
        return cls(issuer, VectorClock.of(clock), parents, payload, signature)

    def grammar(self) -> PolicyGrammar:
        return parse_grammar(self.payload.decode("utf-8"))

    def short(self) -> str:
        return self.id.hex()[:12]


def sign_mutation(m: PolicyMutation, key: KeyPair) -> PolicyMutation:
    return PolicyMutation(m.issuer, m.clock, m.parents, m.payload, key.sign(m.canonical))


# --------------------------------------------------------------------------
# Merkle commitment
# --------------------------------------------------------------------------


def merkle_root(leaves: Iterable[bytes]) -> bytes:
    """Binary Merkle root; odd layers duplicate their last node."""
    layer = list(leaves)
    if not layer:
        return EMPTY_ROOT
    while len(layer) > 1:
        if len(layer) % 2:
            layer.append(layer[-1])
        layer = [hashlib.sha256(layer[i] + layer[i + 1]).digest() for i in range(0, len(layer), 2)]
    return layer[0]


# --------------------------------------------------------------------------
# Replica state
# --------------------------------------------------------------------------


class IngestStatus(enum.Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"
    BUFFERED = "buffered"
    BAD_SIGNATURE = "bad-signature"
    UNKNOWN_ISSUER = "unknown-issuer"
    MALFORMED = "malformed"

    @property
    def rejected(self) -> bool:
        return self in (IngestStatus.BAD_SIGNATURE, IngestStatus.UNKNOWN_ISSUER, IngestStatus.MALFORMED)


class UnregisteredIssuer(PermissionError):
    pass


class IncompleteState(RuntimeError):
    pass


class PolicyReplica:
    """One node's copy of the policy CRDT.

    ``issuers`` maps issuer names to their registered Ed25519 public keys;
    it is the allowlist consulted on every ingest.
    """

    def __init__(self, node_id: str, issuers: Mapping[str, bytes]) -> None:
        self.node_id = node_id
        self.issuers = dict(issuers)
        self.dag: dict[bytes, PolicyMutation] = {}
        self.heads: set[bytes] = set()
        self.node_clock = VectorClock()
        self.pending: dict[bytes, PolicyMutation] = {}
        self.rejections: list[tuple[bytes, IngestStatus]] = []
        self._order: list[PolicyMutation] | None = None
        self._root: bytes | None = None

    # -- PAP side ---------------------------------------------------------

    def author(self, payload: bytes | str, issuer: str, key: KeyPair) -> PolicyMutation:
        """Create, sign and locally apply a mutation on top of current heads."""
        if issuer not in self.issuers:
            raise UnregisteredIssuer(f"issuer {issuer!r} is not on the allowlist")
        if self.issuers[issuer] != key.public:
            raise UnregisteredIssuer(f"key does not match the registered key of {issuer!r}")
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        grammar = parse_grammar(payload.decode("utf-8"))
        current = self.active_grammars().get(grammar.name)
        if current is not None and grammar.version <= current.version:
            raise ValueError(
                f"grammar {grammar.name} version {grammar.version} does not exceed "
                f"active version {current.version}"
            )
        draft = PolicyMutation(issuer, self.node_clock.increment(issuer), frozenset(self.heads), payload)
        mutation = sign_mutation(draft, key)
        status = self.ingest(mutation)
        assert status is IngestStatus.ACCEPTED, status
        return mutation

    # -- replication ------------------------------------------------------

    def ingest(self, m: PolicyMutation) -> IngestStatus:
        if m.id in self.dag or m.id in self.pending:
            return IngestStatus.DUPLICATE
        status = self._validate(m)
        if status is not None:
            self.rejections.append((m.id, status))
            log.warning("%s rejected mutation %s: %s", self.node_id, m.short(), status.value)
            return status
        if any(p not in self.dag for p in m.parents):
            self.pending[m.id] = m
            return IngestStatus.BUFFERED
        if not self._clock_consistent(m):
            self.rejections.append((m.id, IngestStatus.MALFORMED))
            log.warning("%s rejected mutation %s: clock does not advance", self.node_id, m.short())
            return IngestStatus.MALFORMED
        self._apply(m)
        self._drain_pending()
        return IngestStatus.ACCEPTED

    def ingest_wire(self, data: bytes) -> IngestStatus:
        try:
            m = PolicyMutation.from_wire(data)
        except (ValueError, UnicodeDecodeError):
            return IngestStatus.MALFORMED
        return self.ingest(m)

    def _validate(self, m: PolicyMutation) -> IngestStatus | None:
        public = self.issuers.get(m.issuer)
        if public is None:
            return IngestStatus.UNKNOWN_ISSUER
        if not verify(public, m.canonical, m.signature):
            return IngestStatus.BAD_SIGNATURE
        try:
            m.grammar()
        except (GrammarError, UnicodeDecodeError):
            return IngestStatus.MALFORMED
        return None

    def _clock_consistent(self, m: PolicyMutation) -> bool:
        floor = VectorClock()
        for p in m.parents:
            floor = vc_merge(floor, self.dag[p].clock)
        if vc_compare(m.clock, floor) not in (Order.DOMINATES,):
            return False
        return m.clock[m.issuer] > floor[m.issuer]

    def _apply(self, m: PolicyMutation) -> None:
        self.dag[m.id] = m
        self.heads -= m.parents
        self.heads.add(m.id)
        self.node_clock = vc_merge(self.node_clock, m.clock)
        self._order = None
        self._root = None

    def _drain_pending(self) -> None:
        progress = True
        while progress and self.pending:
            progress = False
            for mid in sorted(self.pending):
                m = self.pending[mid]
                if all(p in self.dag for p in m.parents):
                    del self.pending[mid]
                    if self._clock_consistent(m):
                        self._apply(m)
                    else:
                        self.rejections.append((mid, IngestStatus.MALFORMED))
                    progress = True

    # -- derived views ----------------------------------------------------

    def effective_policy(self) -> list[PolicyMutation]:
        """Deterministic linear extension of the causal order.

        A mutation is placed only after every mutation its clock dominates
        (parents included). Among ready mutations the smallest id goes
        first, so concurrent siblings land in content-hash order.
        """
        if self._order is not None:
            return list(self._order)
        for m in self.dag.values():
            if any(p not in self.dag for p in m.parents):
                raise IncompleteState(f"mutation {m.short()} has unresolved parents")
        items = sorted(self.dag.values(), key=lambda m: m.id)
        after: dict[bytes, list[bytes]] = {m.id: [] for m in items}
        indegree = {m.id: 0 for m in items}
        for i, a in enumerate(items):
            for b in items[i + 1 :]:
                rel = vc_compare(a.clock, b.clock)
                if rel is Order.DOMINATES:
                    after[b.id].append(a.id)
                    indegree[a.id] += 1
                elif rel is Order.DOMINATED:
                    after[a.id].append(b.id)
                    indegree[b.id] += 1
        ready = [mid for mid, d in indegree.items() if d == 0]
        heapq.heapify(ready)
        order: list[PolicyMutation] = []
        while ready:
            mid = heapq.heappop(ready)
            order.append(self.dag[mid])
            for nxt in after[mid]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    heapq.heappush(ready, nxt)
        self._order = order
        return list(order)

    def merkle_root(self) -> bytes:
        if self._root is None:
            self._root = merkle_root(m.id for m in self.effective_policy())
        return self._root

    def policy_clock(self) -> VectorClock:
        out = VectorClock()
        for m in self.dag.values():
            out = vc_merge(out, m.clock)
        return out

    def active_grammars(self) -> dict[str, PolicyGrammar]:
        """Latest grammar per name; later mutations fully replace earlier ones."""
        out: dict[str, PolicyGrammar] = {}
        for m in self.effective_policy():
            g = m.grammar()
            out[g.name] = g
        return out

    def mutation_ids(self) -> frozenset[bytes]:
        return frozenset(self.dag)

"""Deterministic discrete-event simulation of a governed agent fleet.

Each node bundles a policy replica, an epoch attestation cache, an
enforcement point, a credential issuer and its own audit log. A single
policy administration point publishes signed grammar mutations; nodes
gossip them to each other. All randomness comes from the scenario seed and
all time is logical milliseconds, so two runs of one scenario produce
byte-identical event logs.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from rtgov.epoch import AttestationFailed, EpochManager, MockEnclave, ResetSignal
from rtgov.gbom import DENY, GbomLog, render_measurement, render_root
from rtgov.grammar import Vocabulary, compile_grammar, empty_language, intersect
from rtgov.identity import (
    CredentialCheck,
    CredentialIssuer,
    CredentialRefused,
    InvalidReason,
    WorkloadIdentity,
    validate_credential,
)
from rtgov.keys import KeyPair
from rtgov.pep import (
    GreedySampler,
    MockLogitGenerator,
    PepAudit,
    PolicyEnforcementPoint,
    StagingRejected,
    Verdict,
)
from rtgov.policy_store import IngestStatus, PolicyReplica
from rtgov.resources import default_vocabulary
from rtgov.simulator.analytics import esw_bound, legacy_exposure
from rtgov.simulator.scenario import Scenario

INTENTS = {
    "safe": "administer 0.5 mg/m2 <eoa>",
    "unsafe": "administer 1.5 mg/m2 <eoa>",
    "escalate": "escalate case <eoa>",
}
ACTION_CLASSES = {"administer": "dosage", "escalate": "escalation"}
PAP_ISSUER = "pap"
TRUST_DOMAIN = "clinic.example"
ENCLAVE_IMAGE = "rtgov-pep-enclave"
END_TOKEN = "<eoa>"
INTENT_BIAS = 6.0


@dataclass
class RunMetrics:
    total_actions: int = 0
    permit: int = 0
    deny: int = 0
    escalate: int = 0
    deferred: int = 0
    n_stale: int = 0
    max_staleness_ms: int = 0
    gl_samples_ms: list[int] = field(default_factory=list)
    fail_closed: list[dict] = field(default_factory=list)
    halted_at: dict[str, list[int]] = field(default_factory=dict)
    permits_after_halt: int = 0
    provenance_violations: int = 0
    convergence_ms: int | None = None
    masked_interventions: int = 0
    tokens_generated: int = 0
    resets_accepted: int = 0
    resets_rejected: int = 0
    decision_records: int = 0
    n_unsafe_legacy: int = 0
    esw_bound: int = 0
    digest_comparisons: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        gl = self.gl_samples_ms
        rows = [
            ("actions", self.total_actions),
            ("permit / deny / escalate", f"{self.permit} / {self.deny} / {self.escalate}"),
            ("deferred during attestation", self.deferred),
            ("stale decisions (N_stale)", self.n_stale),
            ("stale-decision bound", self.esw_bound),
            ("max staleness ms", self.max_staleness_ms),
            ("governance latency ms (min/max)", f"{min(gl)} / {max(gl)}" if gl else "-"),
            ("fail-closed transitions", len(self.fail_closed)),
            ("permits after halt", self.permits_after_halt),
            ("provenance violations", self.provenance_violations),
            ("convergence ms", "-" if self.convergence_ms is None else self.convergence_ms),
            ("masked interventions", self.masked_interventions),
            ("forced resets accepted / rejected", f"{self.resets_accepted} / {self.resets_rejected}"),
            ("legacy comparator (actions)", self.n_unsafe_legacy),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


@dataclass
class NodeView:
    node_id: str
    root: bytes
    committed_root: bytes | None
    active_root: bytes
    halted: bool
    log: GbomLog


@dataclass
class RunResult:
    scenario: Scenario
    metrics: RunMetrics
    events: list[dict]
    nodes: dict[str, NodeView]
    published: list[tuple[int, str, str]]

    def event_log_bytes(self) -> bytes:
        return b"".join(_canonical(e) + b"\n" for e in self.events)

    def gbom(self, node: str) -> GbomLog:
        return self.nodes[node].log


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class _Node:
    def __init__(self, sim: "Simulation", node_id: str, index: int) -> None:
        s = sim.scenario
        self.id = node_id
        self.vocab = sim.vocab
        self.replica = PolicyReplica(node_id, {PAP_ISSUER: sim.pap_key.public})
        self.enclave = MockEnclave(ENCLAVE_IMAGE, sim.authority_key)
        self.identity = WorkloadIdentity(TRUST_DOMAIN, f"/agent/{node_id}")
        self.log = GbomLog(policy_issuers=[PAP_ISSUER])
        self.epoch = EpochManager(
            [self.enclave.measurement],
            [sim.authority_key.public],
            {PAP_ISSUER: sim.pap_key.public},
            ttl=s.epoch_ttl_ms,
            latency=s.attest_latency_ms,
            on_security_event=self._security,
        )
        self.issuer = CredentialIssuer(KeyPair.from_seed(f"credential-issuer:{node_id}"))
        self.issuer.register(self.identity)
        self._creds: dict[tuple[str, str], Any] = {}
        initial = empty_language(sim.vocab, sim.empty_root)
        self.pep = PolicyEnforcementPoint(
            initial,
            end_token=sim.end_token,
            sampler=GreedySampler(),
            epoch=self.epoch,
            audit=PepAudit(self.log, self.identity.uri, per_token=s.per_token_audit),
            credential_check=self._credential_ok,
        )
        self.generator = MockLogitGenerator(sim.vocab.size, seed=s.seed * 1000 + index, adversarial=s.adversarial)
        self.pending = None
        self.generation = 0  # invalidates refresh/watchdog events of older epochs
        self.retry_scheduled = False
        self.root_members: dict[bytes, frozenset[bytes]] = {sim.empty_root: frozenset()}
        self.halted_at: list[int] = []

    def _security(self, message: str, now: int) -> None:
        s = self.epoch.state
        self.log.append(
            kind="security",
            timestamp=now,
            policy_merkle_root=render_root(self.pep.active.source_root),
            tee_measurement=render_measurement(s.measurement),
            epoch_id=s.epoch_id,
            dfa_state=self.pep.active.label(self.pep.q),
            enforcement=DENY,
            identity=self.identity.uri,
            detail=message,
        )

    def _credential_ok(self, action, now: int) -> CredentialCheck:
        cls = ACTION_CLASSES.get(self.vocab.lexeme(action[0]), "unknown") if action else "unknown"
        state = self.epoch.state
        key = (state.epoch_id, cls)
        cred = self._creds.get(key)
        if cred is None:
            try:
                cred = self.issuer.issue(self.identity.uri, cls, state, now)
            except CredentialRefused:
                return CredentialCheck(False, InvalidReason.EPOCH)
            self._creds = {k: v for k, v in self._creds.items() if k[0] == state.epoch_id}
            self._creds[key] = cred
        return validate_credential(cred, cls, state, now, self.issuer.public)


class Simulation:
    def __init__(self, scenario: Scenario, vocab: Vocabulary | None = None) -> None:
        self.scenario = scenario
        self.vocab = vocab or default_vocabulary()
        self.end_token = self.vocab.ids([END_TOKEN])[0]
        self.intents = {k: tuple(self.vocab.ids(v.split())) for k, v in INTENTS.items()}
        self.rng = random.Random(scenario.seed)
        self.pap_key = KeyPair.from_seed("policy-administration-point")
        self.authority_key = KeyPair.from_seed("attestation-authority")
        self.rogue_key = KeyPair.from_seed("unregistered-operator")
        self.pap = PolicyReplica(PAP_ISSUER, {PAP_ISSUER: self.pap_key.public})
        self.empty_root = self.pap.merkle_root()
        self._dfa_cache: dict[bytes, Any] = {}
        self.nodes: dict[str, _Node] = {}
        for i, nid in enumerate(scenario.node_ids):
            self.nodes[nid] = _Node(self, nid, i)
        self.published: list[tuple[int, bytes, str]] = []
        self.metrics = RunMetrics()
        self.events: list[dict] = []
        self._queue: list[tuple[int, int, str, tuple]] = []
        self._seq = 0
        self._gl_done: set[tuple[str, bytes]] = set()
        self._mix = [(k, v) for k, v in scenario.mix if v > 0]

    # -- plumbing ---------------------------------------------------------

    def _schedule(self, t: int, kind: str, *args) -> None:
        heapq.heappush(self._queue, (int(t), self._seq, kind, args))
        self._seq += 1

    def _log(self, t: int, event: str, node: str | None = None, **fields) -> None:
        rec = {"t": t, "event": event}
        if node is not None:
            rec["node"] = node
        rec.update(fields)
        self.events.append(rec)

    def _reachable_at(self, node: str, t: int) -> int:
        if node not in self.nodes:
            return t
        return self.scenario.heal_time(node, t)

    def _send(self, src: str, dst: str, t: int, kind: str, *args) -> None:
        lo, hi = self.scenario.delay_ms
        delay = self.rng.randint(lo, hi)
        depart = max(self._reachable_at(src, t), self._reachable_at(dst, t))
        arrive = self._reachable_at(dst, depart + delay)
        self._schedule(arrive, kind, dst, *args)

    def _compile(self, replica: PolicyReplica):
        root = replica.merkle_root()
        cached = self._dfa_cache.get(root)
        if cached is None:
            clock = replica.policy_clock().as_dict()
            grammars = [g for _, g in sorted(replica.active_grammars().items())]
            if not grammars:
                cached = empty_language(self.vocab, root, clock)
            else:
                cached = intersect([compile_grammar(g, self.vocab) for g in grammars]).with_source(root, clock)
            self._dfa_cache[root] = cached
        return cached

    # -- run --------------------------------------------------------------

    def run(self) -> RunResult:
        s = self.scenario
        for pub in s.policy_script:
            self._schedule(pub.at_ms, "publish", pub.source, pub.label)
        for r in s.resets:
            self._schedule(r.at_ms, "reset", r.node, r.authorized)
        if s.actions_per_hour > 0:
            for nid in self.nodes:
                self._schedule(self._next_arrival(0), "action", nid, None, None, True)

        handlers = {
            "publish": self._on_publish,
            "deliver": self._on_deliver,
            "attest": self._on_attest_request,
            "refresh": self._on_refresh,
            "watchdog": self._on_watchdog,
            "action": self._on_action,
            "reset": self._on_reset,
        }
        while self._queue:
            t, _, kind, args = heapq.heappop(self._queue)
            if t > s.duration_ms:
                break
            handlers[kind](t, *args)
        return self._finish()

    def _next_arrival(self, t: int) -> int:
        rate_per_ms = self.scenario.actions_per_hour / self.scenario.nodes / 3_600_000
        return t + int(round(self.rng.expovariate(rate_per_ms)))

    # -- handlers ---------------------------------------------------------

    def _on_publish(self, t: int, source: str, label: str) -> None:
        m = self.pap.author(source, PAP_ISSUER, self.pap_key)
        self.published.append((t, m.id, label))
        self.metrics.convergence_ms = None
        self._log(t, "publish", mutation=m.id.hex(), grammar=label, root=self.pap.merkle_root().hex())
        wire = m.to_wire()
        for nid in self.nodes:
            self._send(PAP_ISSUER, nid, t, "deliver", wire, PAP_ISSUER)

    def _on_deliver(self, t: int, nid: str, wire: bytes, sender: str) -> None:
        node = self.nodes[nid]
        before = node.replica.merkle_root()
        status = node.replica.ingest_wire(wire)
        self._log(t, "deliver", nid, sender=sender, status=status.value)
        if status in (IngestStatus.ACCEPTED, IngestStatus.BUFFERED):
            for peer in self.nodes:
                if peer != nid:
                    self._send(nid, peer, t, "deliver", wire, nid)
        if node.replica.merkle_root() != before:
            self._policy_changed(node, t)
        self._check_convergence(t)

    def _check_convergence(self, t: int) -> None:
        if self.metrics.convergence_ms is not None or not self.published:
            return
        target = self.pap.merkle_root()
        if all(n.replica.merkle_root() == target for n in self.nodes.values()):
            self.metrics.convergence_ms = t - self.published[-1][0]

    def _policy_changed(self, node: _Node, t: int) -> None:
        dfa = self._compile(node.replica)
        node.root_members[dfa.source_root] = node.replica.mutation_ids()
        self._log(t, "compile", node.id, root=dfa.source_root.hex(), states=getattr(dfa, "num_states", None))
        if self.scenario.update_mode == "boundary" or node.epoch.state.last_attest is None:
            self._stage_and_swap(node, dfa, t)
        else:
            node.pending = dfa

    def _stage_and_swap(self, node: _Node, dfa, t: int) -> None:
        try:
            node.pep.stage_dfa(dfa)
        except StagingRejected as exc:
            self._log(t, "stage-rejected", node.id, reason=str(exc))
            return
        self._log(t, "stage", node.id, root=dfa.source_root.hex())
        if node.pep.try_swap():
            self._log(t, "swap", node.id, root=dfa.source_root.hex())
            self._request_attest(node, t)

    def _request_attest(self, node: _Node, t: int) -> None:
        if self.scenario.isolated(node.id, t):
            self._log(t, "attest-unreachable", node.id)
            if not node.retry_scheduled:
                node.retry_scheduled = True
                self._schedule(t + self.scenario.retry_ms, "attest", node.id)
            return
        quote = node.enclave.quote(node.pep.active.source_root)
        try:
            state = node.epoch.attest(quote, t)
        except AttestationFailed as exc:
            self._log(t, "attest-failed", node.id, reason=str(exc))
            return
        self._after_attest(node, t)
        self._log(t, "attest", node.id, epoch=state.epoch_id, root=state.committed_root.hex(), blocking=state.blocking)

    def _after_attest(self, node: _Node, t: int) -> None:
        s = self.scenario
        state = node.epoch.state
        node.generation += 1
        ready = state.ready_at if state.blocking else t
        members = node.root_members.get(state.committed_root, frozenset())
        for tp, mid, _ in self.published:
            if mid in members and (node.id, mid) not in self._gl_done:
                self._gl_done.add((node.id, mid))
                self.metrics.gl_samples_ms.append(ready - tp)
        self._schedule(t + s.epoch_ttl_ms - s.refresh_margin_ms, "refresh", node.id, node.generation)
        self._schedule(t + s.epoch_ttl_ms + 1, "watchdog", node.id, node.generation)

    def _on_attest_request(self, t: int, nid: str) -> None:
        node = self.nodes[nid]
        node.retry_scheduled = False
        self._refresh(node, t)

    def _on_refresh(self, t: int, nid: str, generation: int) -> None:
        node = self.nodes[nid]
        if generation == node.generation:
            self._refresh(node, t)

    def _refresh(self, node: _Node, t: int) -> None:
        if node.pending is not None and not self.scenario.isolated(node.id, t):
            dfa, node.pending = node.pending, None
            self._stage_and_swap(node, dfa, t)
            if node.pep.active is dfa:
                return
        self._request_attest(node, t)

    def _on_watchdog(self, t: int, nid: str, generation: int) -> None:
        node = self.nodes[nid]
        if generation != node.generation or not node.epoch.observe(t):
            return
        node.halted_at.append(t)
        self._log(t, "halt", node.id, last_attest=node.epoch.state.last_attest)
        for p in self.scenario.partitions:
            if node.id in p.nodes and p.start_ms <= t:
                self.metrics.fail_closed.append(
                    {"node": node.id, "partition_start": p.start_ms, "halted_at": t, "fail_closed_ms": t - p.start_ms}
                )
                break

    def _on_reset(self, t: int, nid: str, authorized: bool) -> None:
        node = self.nodes[nid]
        key = self.pap_key if authorized else self.rogue_key
        nonce = self.rng.getrandbits(128).to_bytes(16, "big")
        signal = ResetSignal.signed(key, PAP_ISSUER, node.pep.active.source_root, nonce, t)
        quote = None if self.scenario.isolated(nid, t) else node.enclave.quote(node.pep.active.source_root)
        before = node.epoch.state.seq
        accepted = node.epoch.emergency_reset(signal, t, quote)
        reason = node.epoch.reset_log[-1].reason
        if accepted:
            self.metrics.resets_accepted += 1
            if node.epoch.state.seq != before:
                self._after_attest(node, t)
        else:
            self.metrics.resets_rejected += 1
        self._log(t, "reset", nid, authorized=authorized, accepted=accepted, reason=reason)

    # -- actions ----------------------------------------------------------

    def _pick_intent(self) -> str:
        u = self.rng.random()
        acc = 0.0
        for name, frac in self._mix:
            acc += frac
            if u < acc:
                return name
        return self._mix[-1][0]

    def _on_action(self, t: int, nid: str, action_id: str | None, intent: str | None, fresh: bool) -> None:
        node = self.nodes[nid]
        if fresh:
            intent = self._pick_intent()
            node.pep.action_seq += 1
            action_id = f"{nid}-a{node.pep.action_seq:06d}"
            self._schedule(self._next_arrival(t), "action", nid, None, None, True)
        state = node.epoch.state
        if not state.stale(t) and state.blocking and t < state.ready_at:
            self.metrics.deferred += 1
            self._log(t, "defer", nid, action=action_id, until=state.ready_at)
            self._schedule(state.ready_at, "action", nid, action_id, intent, False)
            return

        tokens = self.intents[intent]
        if self.scenario.generation == "masked":
            generated = self._generate(node, tokens, t, action_id)
            if generated is not None:
                tokens = generated
        decision = node.pep.decide(tokens, t, action_id)
        self._account(node, t, action_id, intent, decision)

    def _generate(self, node: _Node, intent: tuple[int, ...], t: int, action_id: str):
        pep = node.pep
        pep.begin_action()
        out: list[int] = []
        for i in range(len(intent) + 8):
            allowed = pep.active.allowed(pep.q) if pep.q is not None else frozenset()
            bias = {intent[i]: INTENT_BIAS} if i < len(intent) else None
            logits = node.generator(allowed, bias)
            if allowed and int(np.argmax(logits)) not in allowed:
                self.metrics.masked_interventions += 1
            res = pep.step(logits, t, action_id)
            if res.decision is not None:
                return out or None
            out.append(res.token)
            self.metrics.tokens_generated += 1
            if res.boundary:
                break
        return out

    def _account(self, node: _Node, t: int, action_id: str, intent: str, decision) -> None:
        m = self.metrics
        m.total_actions += 1
        verdict = decision.verdict
        if verdict is Verdict.PERMIT:
            m.permit += 1
        elif verdict is Verdict.ESCALATE:
            m.escalate += 1
        else:
            m.deny += 1
        root = node.pep.active.source_root
        state = node.epoch.state
        if verdict is Verdict.PERMIT:
            if state.stale(t):
                m.permits_after_halt += 1
            if state.committed_root != root:
                m.provenance_violations += 1
        if verdict is not Verdict.DENY:
            members = node.root_members.get(root, frozenset())
            missing = [tp for tp, mid, _ in self.published if tp <= t and mid not in members]
            if missing:
                m.n_stale += 1
                m.max_staleness_ms = max(m.max_staleness_ms, t - min(missing))
        self._log(
            t,
            "action",
            node.id,
            action=action_id,
            intent=intent,
            verdict=verdict.value,
            reason=decision.reason.value,
            root=root.hex(),
            epoch=state.epoch_id,
        )

    def _finish(self) -> RunResult:
        s = self.scenario
        m = self.metrics
        m.n_unsafe_legacy = legacy_exposure(s.instances, s.recommendations_per_hour, s.legacy_latency_days)
        m.esw_bound = esw_bound(s.actions_per_hour, s.epoch_ttl_ms / 1000)
        m.halted_at = {nid: list(n.halted_at) for nid, n in self.nodes.items()}
        m.decision_records = sum(n.log.count("decision") for n in self.nodes.values())
        m.digest_comparisons = sum(n.epoch.digest_comparisons for n in self.nodes.values())
        views = {
            nid: NodeView(
                nid,
                n.replica.merkle_root(),
                n.epoch.state.committed_root,
                n.pep.active.source_root,
                n.epoch.state.stale(s.duration_ms),
                n.log,
            )
            for nid, n in self.nodes.items()
        }
        published = [(t, mid.hex(), label) for t, mid, label in self.published]
        return RunResult(s, m, self.events, views, published)


def run(scenario: Scenario, vocab: Vocabulary | None = None) -> RunResult:
    """Execute ``scenario`` to its duration and return metrics, logs and node state."""
    return Simulation(scenario, vocab).run()


@dataclass(frozen=True)
class ConvergenceReport:
    converged: bool
    roots: dict[str, str]
    committed: dict[str, str | None]

    def __bool__(self) -> bool:
        return self.converged


def converge_check(result: RunResult) -> ConvergenceReport:
    """True when every node ends with the same policy Merkle root."""
    roots = {nid: v.root.hex() for nid, v in result.nodes.items()}
    committed = {nid: (v.committed_root.hex() if v.committed_root else None) for nid, v in result.nodes.items()}
    return ConvergenceReport(len(set(roots.values())) <= 1, roots, committed)

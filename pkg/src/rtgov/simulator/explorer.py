"""Breadth-first exhaustive exploration of a small governance model.

The model tracks one node against a policy administrator that publishes a
sequence of increasingly strict dosage grammars. Every interleaving of
publication, delivery, staging, swapping, attestation, epoch expiry,
partition/heal and token-level action generation is enumerated. Two
invariants are checked in every reachable state:

* no action that the committed policy's grammar does not derive is ever
  permitted (checked by direct derivation from the productions, not by
  the compiled automaton);
* an in-flight action's prefix is always walkable in the active automaton.

Fault switches (``mask_enabled=False``, ``swap_anytime=True``) break the
enforcement point on purpose so tests can confirm the checks bite.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterator, NamedTuple

from rtgov.grammar import Dfa, PolicyGrammar, compile_grammar, parse_grammar
from rtgov.resources import default_vocabulary

ACTIONS = {
    "safe_dosage": "administer 0.25 mg/m2 <eoa>",
    "unsafe_dosage": "administer 1.5 mg/m2 <eoa>",
    "escalate_case": "escalate case <eoa>",
}
NETWORK_STATES = ("CONNECTED", "PARTITIONED")

# Dose ceilings per policy version; each version tightens the previous one.
VERSION_DOSES = {
    1: ("0.0", "0.25", "0.5", "0.75", "1.0", "1.25", "1.5"),
    2: ("0.0", "0.25", "0.5", "0.75"),
    3: ("0.0", "0.25", "0.5"),
    4: ("0.25", "0.5"),
    5: ("0.25",),
}


def dosage_grammar(version: int, doses: tuple[str, ...]) -> PolicyGrammar:
    vocab = default_vocabulary()
    lines = [f"grammar vincristine version {version}", "start Action"]
    lines += [f'token "{lex}" = {i}' for i, lex in enumerate(vocab.lexemes)]
    lines += ['rule Action -> "administer" Dose', 'rule Action -> "escalate" Case']
    lines += [f'rule Dose -> "{d}" Unit' for d in doses]
    lines += ['rule Unit -> "mg/m2" "<eoa>"', 'rule Case -> "case" "<eoa>"', "escalate Case"]
    return parse_grammar("\n".join(lines) + "\n")


def derivable(grammar: PolicyGrammar, lexemes: tuple[str, ...]) -> bool:
    """Whether the productions derive exactly ``lexemes`` (no automaton involved)."""
    n = len(lexemes)

    @lru_cache(maxsize=None)
    def derives(nt: str, i: int) -> bool:
        for prod in grammar.productions(nt):
            terms = prod.terminals
            j = i + len(terms)
            if tuple(lexemes[i:j]) != terms:
                continue
            if prod.tail is None:
                if j == n:
                    return True
            elif derives(prod.tail, j):
                return True
        return False

    return derives(grammar.start, 0)


@dataclass(frozen=True)
class ModelConfig:
    max_version: int = 5
    actions: tuple[str, ...] = tuple(ACTIONS)
    network_states: tuple[str, ...] = NETWORK_STATES
    depth_bound: int | None = None
    state_budget: int = 500_000
    mask_enabled: bool = True
    swap_anytime: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.max_version <= len(VERSION_DOSES):
            raise ValueError(f"max_version must be between 1 and {len(VERSION_DOSES)}")
        unknown = set(self.actions) - set(ACTIONS)
        if unknown or not self.actions:
            raise ValueError(f"unknown actions: {sorted(unknown)}")
        if not self.network_states or set(self.network_states) - set(NETWORK_STATES):
            raise ValueError("network states must be drawn from CONNECTED/PARTITIONED")


class ModelState(NamedTuple):
    published: int
    stored: int
    staged: int  # 0 = empty buffer
    active: int
    committed: int
    status: str  # FRESH | STALE
    network: str
    action: str  # "" when idle
    pos: int
    blocked: bool
    dfa: str  # start | interior | accepting | escalating | dead
    last: tuple[str, str, int]  # (action, verdict, committed version) of the latest decision

    def describe(self) -> dict:
        return self._asdict()


@dataclass(frozen=True)
class Violation:
    invariant: str
    state: ModelState
    trace: tuple[str, ...]


@dataclass
class ExplorationReport:
    config: ModelConfig
    generated: int = 0
    distinct: int = 0
    depth: int = 0
    deadlocks: int = 0
    complete: bool = True
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.complete and not self.violations and not self.deadlocks

    def summary(self) -> dict:
        return {
            "versions": self.config.max_version,
            "actions": list(self.config.actions),
            "network_states": list(self.config.network_states),
            "states_generated": self.generated,
            "distinct_states": self.distinct,
            "depth": self.depth,
            "deadlocks": self.deadlocks,
            "complete": self.complete,
            "violations": [
                {"invariant": v.invariant, "state": v.state.describe(), "trace": list(v.trace)} for v in self.violations
            ],
        }


class _Model:
    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        vocab = default_vocabulary()
        self.grammars = {v: dosage_grammar(v, VERSION_DOSES[v]) for v in range(1, config.max_version + 1)}
        self.dfas: dict[int, Dfa] = {v: compile_grammar(g, vocab) for v, g in self.grammars.items()}
        self.lexemes = {a: tuple(ACTIONS[a].split()) for a in config.actions}
        self.tokens = {a: tuple(vocab.ids(lex)) for a, lex in self.lexemes.items()}

    def initial(self) -> ModelState:
        return ModelState(1, 1, 0, 1, 1, "FRESH", self.config.network_states[0], "", 0, False, "start", ("", "", 0))

    def _abstract(self, s: ModelState) -> str:
        if not s.action:
            return "start"
        if s.blocked:
            return "dead"
        dfa = self.dfas[s.active]
        q = dfa.walk(self.tokens[s.action][: s.pos])
        if q is None:
            return "dead"
        if s.pos == 0:
            return "start"
        if dfa.is_escalating(q):
            return "escalating"
        if dfa.is_accepting(q):
            return "accepting"
        return "interior"

    def _with(self, s: ModelState, **kw) -> ModelState:
        n = s._replace(**kw)
        return n._replace(dfa=self._abstract(n))

    def _gate_open(self, s: ModelState) -> bool:
        return s.status == "FRESH" and s.committed == s.active

    def _verdict(self, s: ModelState) -> str:
        if not self._gate_open(s):
            return "DENY"
        if not self.config.mask_enabled:
            return "PERMIT"
        if s.blocked:
            return "DENY"
        dfa = self.dfas[s.active]
        q = dfa.walk(self.tokens[s.action])
        if q is None:
            return "DENY"
        if dfa.is_escalating(q):
            return "ESCALATE"
        return "PERMIT" if dfa.is_accepting(q) else "DENY"

    def successors(self, s: ModelState) -> Iterator[tuple[str, ModelState]]:
        cfg = self.config
        if s.published < cfg.max_version:
            yield "publish", s._replace(published=s.published + 1)
        if s.network == "CONNECTED" and s.stored < s.published:
            yield "deliver", s._replace(stored=s.stored + 1)
        if s.stored > max(s.active, s.staged):
            yield "stage", s._replace(staged=s.stored)
        if s.staged and (not s.action or cfg.swap_anytime):
            aligned = self.dfas[s.staged].walk(self.tokens[s.action][: s.pos]) is not None if s.action else True
            if aligned or cfg.swap_anytime:
                yield "swap", self._with(s, active=s.staged, staged=0)
        if s.network == "CONNECTED" and (s.status != "FRESH" or s.committed != s.active):
            yield "attest", s._replace(committed=s.active, status="FRESH")
        if s.status == "FRESH":
            yield "expire", s._replace(status="STALE")
        for net in cfg.network_states:
            if net != s.network:
                yield net.lower(), s._replace(network=net)
        if not s.action:
            for a in cfg.actions:
                yield f"begin {a}", self._with(s, action=a, pos=0, blocked=False)
            return
        intent = self.tokens[s.action]
        if not s.blocked and s.pos < len(intent):
            if not self._gate_open(s):
                yield "emit refused", self._with(s, blocked=True)
            elif not cfg.mask_enabled:
                yield "emit", self._with(s, pos=s.pos + 1)
            else:
                dfa = self.dfas[s.active]
                q = dfa.walk(intent[: s.pos])
                if q is not None and dfa.transition(q, intent[s.pos]) is not None:
                    yield "emit", self._with(s, pos=s.pos + 1)
                else:
                    yield "emit masked", self._with(s, blocked=True)
        if s.blocked or s.pos == len(intent):
            verdict = self._verdict(s)
            yield f"decide {verdict}", self._with(s, action="", pos=0, blocked=False, last=(s.action, verdict, s.committed))

    def violations(self, s: ModelState) -> list[str]:
        out = []
        action, verdict, version = s.last
        if verdict == "PERMIT" and not derivable(self.grammars[version], self.lexemes[action]):
            out.append("no-invalid-permit")
        if s.action and not s.blocked and self.dfas[s.active].walk(self.tokens[s.action][: s.pos]) is None:
            out.append("prefix-aligned")
        return out


def explore(config: ModelConfig | None = None) -> ExplorationReport:
    """Enumerate every reachable model state breadth-first and check invariants."""
    config = config or ModelConfig()
    model = _Model(config)
    report = ExplorationReport(config)
    init = model.initial()
    parent: dict[ModelState, tuple[ModelState | None, str]] = {init: (None, "init")}
    frontier = deque([(init, 0)])
    report.generated = 1

    def trace(s: ModelState) -> tuple[str, ...]:
        steps = []
        cur: ModelState | None = s
        while cur is not None:
            prev, label = parent[cur]
            steps.append(label)
            cur = prev
        return tuple(reversed(steps))

    for name in model.violations(init):
        report.violations.append(Violation(name, init, ("init",)))
    while frontier:
        s, depth = frontier.popleft()
        report.depth = max(report.depth, depth)
        if config.depth_bound is not None and depth >= config.depth_bound:
            report.complete = False
            continue
        succ = list(model.successors(s))
        if not succ:
            report.deadlocks += 1
        for label, n in succ:
            report.generated += 1
            if n in parent:
                continue
            if len(parent) >= config.state_budget:
                report.complete = False
                continue
            parent[n] = (s, label)
            for name in model.violations(n):
                report.violations.append(Violation(name, n, trace(n)))
            frontier.append((n, depth + 1))
    report.distinct = len(parent)
    return report


def broken(config: ModelConfig, **faults) -> ModelConfig:
    """Copy of ``config`` with enforcement faults switched on."""
    return replace(config, **faults)

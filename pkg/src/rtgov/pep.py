"""Policy enforcement point: grammar-constrained decoding over a DFA.

The generation loop calls :meth:`PolicyEnforcementPoint.step` once per
token. Disallowed logits are set to ``-inf`` before sampling, so a
disallowed token has probability exactly zero whatever its raw score.
Complete candidate actions go through :meth:`PolicyEnforcementPoint.decide`.

Policy updates arrive as freshly compiled automata via :meth:`stage_dfa`
(safe to call from another thread) and become active only at an action
boundary, through :meth:`try_swap`.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from rtgov.epoch import EpochManager, EpochStatus
from rtgov.gbom import DENY, ESCALATE, PERMIT, GbomLog, render_measurement, render_root
from rtgov.grammar import DecompositionPlan, Dfa
from rtgov.identity import CredentialCheck
from rtgov.policy_store import Order, VectorClock, vc_compare

Automaton = Dfa | DecompositionPlan


class Verdict(enum.Enum):
    PERMIT = PERMIT
    DENY = DENY
    ESCALATE = ESCALATE


class Reason(enum.Enum):
    GRAMMAR_ACCEPT = "grammar-accept"
    DEAD_END = "dead-end"
    ESCALATE_MARK = "escalate-mark"
    EPOCH_STALE = "epoch-stale"
    HALT = "halt"
    INCOMPLETE = "incomplete"
    CREDENTIAL = "credential"


_DENY_REASONS = frozenset(
    {Reason.DEAD_END, Reason.EPOCH_STALE, Reason.HALT, Reason.INCOMPLETE, Reason.CREDENTIAL}
)


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: Reason

    def __post_init__(self) -> None:
        if self.reason in _DENY_REASONS and self.verdict is not Verdict.DENY:
            raise ValueError(f"reason {self.reason.value} requires a DENY verdict")


# --------------------------------------------------------------------------
# Masking and sampling
# --------------------------------------------------------------------------


def mask(logits: Sequence[float] | np.ndarray, allowed: Iterable[int] | np.ndarray, vocab_size: int | None = None) -> np.ndarray:
    """Return a copy of ``logits`` with every token outside ``allowed`` at ``-inf``."""
    scores = np.asarray(logits, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("logits must be a one-dimensional vector")
    if vocab_size is not None and scores.shape[0] != vocab_size:
        raise ValueError(f"logits have length {scores.shape[0]}, vocabulary has {vocab_size}")
    if isinstance(allowed, np.ndarray):
        idx = allowed.astype(np.intp, copy=False)
    else:
        idx = np.fromiter(allowed, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= scores.shape[0]):
        raise ValueError("allowed token id outside the logit vector")
    out = np.full(scores.shape, -np.inf)
    out[idx] = scores[idx]
    return out


def softmax(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    top = scores.max()
    if not np.isfinite(top):
        raise ValueError("softmax of a fully masked vector is undefined")
    e = np.exp(scores - top)
    return e / e.sum()


class Sampler(Protocol):
    def __call__(self, masked: np.ndarray) -> int: ...


class GreedySampler:
    def __call__(self, masked: np.ndarray) -> int:
        if not np.isfinite(masked.max()):
            raise ValueError("no token is allowed")
        return int(np.argmax(masked))


class SoftmaxSampler:
    """Seeded inverse-CDF sampling from ``softmax(masked / temperature)``.

    Tokens at ``-inf`` have zero width in the CDF and can never be drawn.
    """

    def __init__(self, seed: int = 0, temperature: float = 1.0) -> None:
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.temperature = temperature
        self._rng = np.random.default_rng(seed)

    def __call__(self, masked: np.ndarray) -> int:
        p = softmax(masked / self.temperature)
        cdf = np.cumsum(p)
        u = self._rng.random() * cdf[-1]
        return int(np.searchsorted(cdf, u, side="right"))


class MockLogitGenerator:
    """Stand-in for a language model: seeded Gaussian logits.

    ``bias`` adds a fixed boost to chosen tokens (to steer toward an intent).
    In adversarial mode every token outside ``allowed`` gets the top score,
    which is the worst case for the mask.
    """

    def __init__(self, vocab_size: int, seed: int = 0, adversarial: bool = False, scale: float = 1.0) -> None:
        self.vocab_size = vocab_size
        self.adversarial = adversarial
        self.scale = scale
        self._rng = np.random.default_rng(seed)

    def __call__(self, allowed: Iterable[int] | None = None, bias: dict[int, float] | None = None) -> np.ndarray:
        out = self._rng.normal(0.0, self.scale, self.vocab_size)
        for tok, b in (bias or {}).items():
            out[tok] += b
        if self.adversarial and allowed is not None:
            keep = np.zeros(self.vocab_size, dtype=bool)
            keep[list(allowed)] = True
            out[~keep] = out.max() + 10.0 * self.scale
        return out


# --------------------------------------------------------------------------
# Enforcement point
# --------------------------------------------------------------------------


class StagingRejected(ValueError):
    pass


def _clock(dfa: Automaton) -> VectorClock:
    return VectorClock(dfa.source_clock)


def is_newer(candidate: Automaton, reference: Automaton) -> bool:
    """Causal dominance of the source clocks, else a fixed canonical order."""
    if candidate.source_root == reference.source_root:
        return False
    rel = vc_compare(_clock(candidate), _clock(reference))
    if rel is Order.DOMINATES:
        return True
    if rel is Order.DOMINATED:
        return False
    a = (_clock(candidate).total(), candidate.source_root)
    b = (_clock(reference).total(), reference.source_root)
    return a > b


@dataclass(frozen=True)
class StepTrace:
    step: int
    dfa_id: int
    state: object
    allowed: frozenset[int]
    token: int | None
    next_state: object
    boundary: bool


@dataclass(frozen=True)
class StepResult:
    logits: np.ndarray | None
    token: int | None
    state: object
    decision: Decision | None = None
    boundary: bool = False


@dataclass
class PepAudit:
    """Where enforcement outcomes are written."""

    log: GbomLog
    identity: str
    per_token: bool = True
    platform: str = "sim"


@dataclass(frozen=True)
class SwapEvent:
    step: int
    old_root: bytes
    new_root: bytes
    aligned_prefix: int


class PolicyEnforcementPoint:
    """Owns the active automaton, the staging buffer and the decoding state.

    ``end_token`` is the explicit end-of-action token; an action boundary is
    reached when it is consumed and the prefix is accepted. Without an end
    token any accepting state counts as a boundary.
    """

    def __init__(
        self,
        dfa: Automaton,
        *,
        end_token: int | None = None,
        sampler: Sampler | None = None,
        epoch: EpochManager | None = None,
        audit: PepAudit | None = None,
        credential_check: Callable[[Sequence[int], int], CredentialCheck] | None = None,
        prefetch: bool = False,
        trace: bool = False,
    ) -> None:
        self.active: Automaton = dfa
        self._staged: Automaton | None = None
        self._lock = threading.Lock()
        self.end_token = end_token
        self.sampler = sampler or GreedySampler()
        self.epoch = epoch
        self.audit = audit
        self.credential_check = credential_check
        self.prefetch_enabled = prefetch
        self.trace_enabled = trace

        self.q = dfa.start
        self.step_count = 0
        self.prefix: list[int] = []
        self.at_boundary = True
        self.action_halted = False
        self.action_seq = 0
        self.prefetched: dict[object, frozenset[int]] = {}
        self.prefetch_hits = 0
        self.swaps: list[SwapEvent] = []
        self.traces: list[StepTrace] = []
        self.decisions = 0

    # -- staging ----------------------------------------------------------

    @property
    def staged(self) -> Automaton | None:
        return self._staged

    def stage_dfa(self, new: Automaton) -> None:
        """Publish ``new`` to the staging buffer in a single reference store."""
        if new.vocab_size != self.active.vocab_size:
            raise StagingRejected("staged automaton uses a different vocabulary")
        with self._lock:
            if not is_newer(new, self.active):
                raise StagingRejected("automaton is not newer than the active policy")
            if self._staged is not None and not is_newer(new, self._staged):
                raise StagingRejected("automaton is not newer than the staged policy")
            self._staged = new

    def try_swap(self) -> bool:
        """Activate the staged automaton if at a boundary and prefix-aligned."""
        if not self.at_boundary:
            return False
        # A boundary closes the finished action, so the in-flight prefix is empty.
        inflight: list[int] = []
        with self._lock:
            staged = self._staged
            if staged is None or staged.walk(inflight) is None:
                return False
            self._staged = None
        self.swaps.append(SwapEvent(self.step_count, self.active.source_root, staged.source_root, len(inflight)))
        self.active = staged
        self._reset_action()
        return True

    def _reset_action(self) -> None:
        self.q = self.active.start
        self.prefix = []
        self.at_boundary = True
        self.action_halted = False
        self.prefetched = {}

    def begin_action(self) -> None:
        """Close out a finished action; retry a swap deferred at its boundary."""
        if self.prefix or self.action_halted:
            self.at_boundary = True
            self._reset_action()
        self.action_seq += 1
        self.try_swap()

    # -- epoch gate -------------------------------------------------------

    def epoch_status(self, now: int) -> EpochStatus:
        if self.epoch is None:
            return EpochStatus.FRESH
        return self.epoch.verify(self.active.source_root, now)

    def _gate(self, now: int) -> Decision | None:
        status = self.epoch_status(now)
        if status is EpochStatus.HALTED:
            return Decision(Verdict.DENY, Reason.HALT)
        if status is not EpochStatus.FRESH:
            return Decision(Verdict.DENY, Reason.EPOCH_STALE)
        return None

    # -- decoding ---------------------------------------------------------

    def prefetch_masks(self) -> dict[object, frozenset[int]]:
        """Precompute allowed sets of every successor of the current state.

        Called before advancing, so the next step finds its mask ready.
        """
        succ = self.active.successors(self.q)
        self.prefetched = {s: self.active.allowed(s) for s in succ.values()}
        return self.prefetched

    def _allowed(self, dfa: Automaton, q) -> frozenset[int]:
        cached = self.prefetched.get(q)
        if cached is not None:
            self.prefetch_hits += 1
            return cached
        return dfa.allowed(q)

    def step(self, logits: Sequence[float] | np.ndarray, now: int = 0, action_id: str | None = None) -> StepResult:
        """Mask, sample and advance one token."""
        if self.at_boundary:
            if self.prefix:
                self.begin_action()
            else:
                self.try_swap()
        refused = self._gate(now)
        if refused is not None:
            return StepResult(None, None, self.q, refused)
        if self.action_halted:
            return StepResult(None, None, self.q, Decision(Verdict.DENY, Reason.DEAD_END))

        dfa = self.active
        q = self.q
        allowed = self._allowed(dfa, q)
        if not allowed:
            self.action_halted = True
            return StepResult(None, None, q, Decision(Verdict.DENY, Reason.DEAD_END))
        if self.prefetch_enabled:
            self.prefetch_masks()
        masked = mask(logits, np.fromiter(allowed, dtype=np.intp, count=len(allowed)), dfa.vocab_size)
        token = int(self.sampler(masked))
        if token not in allowed:
            raise AssertionError(f"sampler produced masked token {token}")
        nxt = dfa.transition(q, token)
        self.q = nxt
        self.prefix.append(token)
        self.step_count += 1
        boundary = dfa.is_accepting(nxt) and (self.end_token is None or token == self.end_token)
        self.at_boundary = boundary
        if self.trace_enabled:
            self.traces.append(StepTrace(self.step_count, id(dfa), q, allowed, token, nxt, boundary))
        if self.audit is not None and self.audit.per_token:
            self._record("token", now, PERMIT, dfa.label(nxt), action_id, f"token {token}")
        if boundary:
            self.try_swap()
        return StepResult(masked, token, nxt, None, boundary)

    def generate(
        self,
        logit_source: Callable[[frozenset[int]], np.ndarray],
        now: int = 0,
        max_tokens: int = 64,
        action_id: str | None = None,
    ) -> tuple[list[int], Decision | None]:
        """Run :meth:`step` until a boundary, a refusal, or ``max_tokens``."""
        self.begin_action()
        out: list[int] = []
        for _ in range(max_tokens):
            res = self.step(logit_source(self.active.allowed(self.q)), now, action_id)
            if res.decision is not None:
                return out, res.decision
            out.append(res.token)
            if res.boundary:
                return out, None
        return out, None

    # -- decisions --------------------------------------------------------

    def evaluate(self, action: Sequence[int], now: int = 0) -> tuple[Decision, object]:
        """Decision for ``action`` plus the last DFA state reached, with no logging."""
        refused = self._gate(now)
        if refused is not None:
            return refused, self.active.start
        if self.credential_check is not None and not self.credential_check(action, now):
            return Decision(Verdict.DENY, Reason.CREDENTIAL), self.active.start
        dfa = self.active
        q = dfa.start
        for tok in action:
            nxt = dfa.transition(q, tok)
            if nxt is None:
                return Decision(Verdict.DENY, Reason.DEAD_END), q
            q = nxt
        if dfa.is_escalating(q):
            return Decision(Verdict.ESCALATE, Reason.ESCALATE_MARK), q
        if dfa.is_accepting(q):
            return Decision(Verdict.PERMIT, Reason.GRAMMAR_ACCEPT), q
        return Decision(Verdict.DENY, Reason.INCOMPLETE), q

    def decide(self, action: Sequence[int], now: int = 0, action_id: str | None = None):
        """Verdict for a complete candidate action; logged when auditing."""
        decision, q = self.evaluate(action, now)
        self.decisions += 1
        if self.audit is not None:
            self._record("decision", now, decision.verdict.value, self.active.label(q), action_id, decision.reason.value)
        return decision

    def _record(self, kind: str, now: int, enforcement: str, state: str, action_id: str | None, detail: str):
        audit = self.audit
        if self.epoch is not None:
            es = self.epoch.state
            measurement, epoch_id = es.measurement, es.epoch_id
        else:
            measurement, epoch_id = None, "E-000"
        return audit.log.append(
            kind=kind,
            timestamp=now,
            policy_merkle_root=render_root(self.active.source_root),
            tee_measurement=render_measurement(measurement, audit.platform),
            epoch_id=epoch_id,
            dfa_state=state,
            enforcement=enforcement,
            identity=audit.identity,
            action_id=action_id,
            detail=detail,
        )


def walk_prefix(dfa: Automaton, tokens: Iterable[int]):
    """Final state after ``tokens``, or ``None`` (DENY) on an undefined move."""
    tokens = list(tokens)
    if any(not 0 <= t < dfa.vocab_size for t in tokens):
        raise ValueError("token id outside the vocabulary")
    return dfa.walk(tokens)

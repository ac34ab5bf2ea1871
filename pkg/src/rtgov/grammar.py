"""Policy grammars and their compilation to deterministic automata.

Policies are right-linear grammars over whole-token terminals. They are
compiled by subset construction into a :class:`Dfa` whose transition table
is stored row-compressed and whose per-state allowed token sets are
precomputed, so the enforcement point can fetch a mask in constant time.

Grammar source format (one directive per line, ``#`` starts a comment)::

    grammar vincristine version 2
    start Action
    token "administer" = 0
    token "0.5" = 3
    rule Action -> "administer" Dose
    rule Dose -> "0.5" Unit
    escalate Case

Terminals are double-quoted lexemes, nonterminals are bare identifiers.
``rule A ->`` with an empty right-hand side is an epsilon production.
"""

from __future__ import annotations

import hashlib
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_STATE_BUDGET = 10_000


class GrammarError(ValueError):
    """Base class for grammar parsing and compilation failures."""


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, line: int, column: int = 1) -> None:
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UnresolvedTerminalError(GrammarError):
    pass


class NonRegularGrammarError(GrammarError):
    def __init__(self, rule: str, kind: str) -> None:
        super().__init__(f"non-regular construction ({kind}) in rule {rule}")
        self.rule = rule
        self.kind = kind


class StateBudgetExceeded(GrammarError):
    def __init__(self, states: int, budget: int) -> None:
        super().__init__(
            f"automaton needs more than {budget} states (reached {states}); "
            "split the policy into independent grammars and apply them as a "
            "hierarchical decomposition"
        )
        self.states = states
        self.budget = budget


class VocabularyMismatch(GrammarError):
    pass


@dataclass(frozen=True)
class Symbol:
    text: str
    terminal: bool

    def __str__(self) -> str:
        return f'"{self.text}"' if self.terminal else self.text


@dataclass(frozen=True)
class Production:
    lhs: str
    rhs: tuple[Symbol, ...]

    @property
    def terminals(self) -> tuple[str, ...]:
        return tuple(s.text for s in self.rhs if s.terminal)

    @property
    def tail(self) -> str | None:
        """Trailing nonterminal, if any (right-linear form)."""
        if self.rhs and not self.rhs[-1].terminal:
            return self.rhs[-1].text
        return None

    def __str__(self) -> str:
        body = " ".join(str(s) for s in self.rhs)
        return f"{self.lhs} -> {body}".rstrip()


@dataclass(frozen=True)
class PolicyGrammar:
    name: str
    version: int
    start: str | None
    rules: tuple[Production, ...]
    terminal_map: tuple[tuple[str, int], ...]
    escalate_marks: frozenset[str] = frozenset()

    @cached_property
    def token_ids(self) -> dict[str, int]:
        return dict(self.terminal_map)

    @cached_property
    def nonterminals(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for rule in self.rules:
            seen.setdefault(rule.lhs)
        return tuple(seen)

    def productions(self, lhs: str) -> list[Production]:
        return [r for r in self.rules if r.lhs == lhs]

    def to_source(self) -> str:
        lines = [f"grammar {self.name} version {self.version}"]
        if self.start is not None:
            lines.append(f"start {self.start}")
        for lexeme, tid in self.terminal_map:
            lines.append(f'token "{_escape(lexeme)}" = {tid}')
        for rule in self.rules:
            body = " ".join(
                f'"{_escape(s.text)}"' if s.terminal else s.text for s in rule.rhs
            )
            lines.append(f"rule {rule.lhs} -> {body}".rstrip())
        for nt in sorted(self.escalate_marks):
            lines.append(f"escalate {nt}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Vocabulary:
    size: int
    lexemes: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.size < 0:
            raise ValueError("vocabulary size must be non-negative")
        if self.lexemes is not None and len(self.lexemes) != self.size:
            raise ValueError("lexeme table length must equal vocabulary size")

    @classmethod
    def from_lexemes(cls, lexemes: Iterable[str]) -> "Vocabulary":
        lex = tuple(lexemes)
        return cls(len(lex), lex)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        """Read a vocabulary file: a JSON list, or one lexeme per line."""
        import json

        text = Path(path).read_text(encoding="utf-8")
        if text.lstrip().startswith("["):
            return cls.from_lexemes(json.loads(text))
        return cls.from_lexemes(line for line in text.splitlines() if line)

    def lexeme(self, token: int) -> str:
        if self.lexemes is None:
            return f"<{token}>"
        return self.lexemes[token]

    def ids(self, lexemes: Iterable[str]) -> list[int]:
        if self.lexemes is None:
            raise VocabularyMismatch("vocabulary carries no lexeme table")
        index = {lex: i for i, lex in enumerate(self.lexemes)}
        return [index[lex] for lex in lexemes]


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r'\s*(?:(?P<str>"(?:[^"\\]|\\.)*")|(?P<arrow>->)|(?P<eq>=)'
    r"|(?P<word>[A-Za-z_][A-Za-z0-9_.\-]*)|(?P<int>\d+)|(?P<bad>\S))"
)


def _lex_line(line: str, lineno: int) -> list[tuple[str, str, int]]:
    out: list[tuple[str, str, int]] = []
    pos = 0
    stripped = line.rstrip()
    while pos < len(stripped):
        m = _TOKEN_RE.match(stripped, pos)
        if m is None:  # pragma: no cover - the pattern always matches non-space
            break
        kind = m.lastgroup
        col = m.start(kind) + 1
        value = m.group(kind)
        if kind == "bad":
            if value == "#":
                break
            raise GrammarSyntaxError(f"unexpected character {value!r}", lineno, col)
        if kind == "str":
            value = re.sub(r"\\(.)", r"\1", value[1:-1])
        out.append((kind, value, col))
        pos = m.end()
    return out


def parse_grammar(text: str) -> PolicyGrammar:
    """Parse and validate a grammar source document."""
    name: str | None = None
    version: int | None = None
    start: str | None = None
    rules: list[Production] = []
    tokens: dict[str, int] = {}
    owners: dict[int, str] = {}
    escalate: set[str] = set()
    escalate_lines: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _lex_line(raw, lineno)
        if not toks:
            continue
        kinds = [k for k, _, _ in toks]
        head_kind, head, _ = toks[0]
        if head_kind != "word":
            raise GrammarSyntaxError("expected a directive", lineno, toks[0][2])

        if head == "grammar":
            if kinds != ["word", "word", "word", "int"] or toks[2][1] != "version":
                raise GrammarSyntaxError(
                    "expected: grammar <name> version <n>", lineno, toks[0][2]
                )
            if name is not None:
                raise GrammarSyntaxError("duplicate grammar header", lineno)
            name, version = toks[1][1], int(toks[3][1])
        elif head == "start":
            if kinds != ["word", "word"]:
                raise GrammarSyntaxError("expected: start <NT>", lineno, toks[0][2])
            start = toks[1][1]
        elif head == "token":
            if kinds != ["word", "str", "eq", "int"]:
                raise GrammarSyntaxError(
                    'expected: token "<lexeme>" = <id>', lineno, toks[0][2]
                )
            lexeme, tid = toks[1][1], int(toks[3][1])
            if lexeme in tokens and tokens[lexeme] != tid:
                raise GrammarSyntaxError(
                    f"terminal {lexeme!r} declared with two ids", lineno, toks[1][2]
                )
            if tid in owners and owners[tid] != lexeme:
                raise GrammarSyntaxError(
                    f"token id {tid} already bound to {owners[tid]!r}", lineno, toks[3][2]
                )
            tokens[lexeme] = tid
            owners[tid] = lexeme
        elif head == "rule":
            if len(toks) < 3 or kinds[1] != "word" or kinds[2] != "arrow":
                raise GrammarSyntaxError("expected: rule <NT> -> symbols", lineno, toks[0][2])
            rhs: list[Symbol] = []
            for kind, value, col in toks[3:]:
                if kind == "str":
                    rhs.append(Symbol(value, True))
                elif kind == "word":
                    rhs.append(Symbol(value, False))
                else:
                    raise GrammarSyntaxError(f"unexpected {value!r} in rule body", lineno, col)
            rules.append(Production(toks[1][1], tuple(rhs)))
        elif head == "escalate":
            if kinds != ["word", "word"]:
                raise GrammarSyntaxError("expected: escalate <NT>", lineno, toks[0][2])
            escalate.add(toks[1][1])
            escalate_lines[toks[1][1]] = lineno
        else:
            raise GrammarSyntaxError(f"unknown directive {head!r}", lineno, toks[0][2])

    if name is None or version is None:
        raise GrammarSyntaxError("missing grammar header", 1)
    if start is None and rules:
        start = rules[0].lhs

    defined = {r.lhs for r in rules}
    for rule in rules:
        for pos, sym in enumerate(rule.rhs):
            if sym.terminal:
                if sym.text not in tokens:
                    raise UnresolvedTerminalError(
                        f"terminal {sym.text!r} in rule {rule} has no token declaration"
                    )
                continue
            if sym.text not in defined:
                raise GrammarError(f"nonterminal {sym.text} in rule {rule} has no productions")
            if pos != len(rule.rhs) - 1:
                kind = "left recursion" if pos == 0 and sym.text == rule.lhs else "center-embedding"
                raise NonRegularGrammarError(str(rule), kind)
    for nt in escalate:
        if nt not in defined:
            raise GrammarSyntaxError(f"escalate mark on unknown nonterminal {nt}", escalate_lines[nt])

    return PolicyGrammar(
        name=name,
        version=version,
        start=start,
        rules=tuple(rules),
        terminal_map=tuple(sorted(tokens.items(), key=lambda kv: kv[1])),
        escalate_marks=frozenset(escalate),
    )


def load_grammar(path: str | Path) -> PolicyGrammar:
    return parse_grammar(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Automaton
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dfa:
    """Immutable deterministic automaton over token ids.

    Transitions are stored CSR-style: the outgoing edges of state ``q`` are
    ``tokens[indptr[q]:indptr[q+1]]`` (ascending) with matching ``targets``.
    A missing edge is the dead state; dead states are never materialised.
    """

    vocab_size: int
    indptr: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray
    accepting: frozenset[int]
    escalating: frozenset[int]
    start: int = 0
    source_root: bytes = b""
    source_clock: tuple[tuple[str, int], ...] = ()
    _rows: tuple[dict[int, int], ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        for arr in (self.indptr, self.tokens, self.targets):
            arr.setflags(write=False)
        if not self._rows:
            rows = tuple(
                dict(zip(self.tokens[a:b].tolist(), self.targets[a:b].tolist()))
                for a, b in zip(self.indptr[:-1].tolist(), self.indptr[1:].tolist())
            )
            object.__setattr__(self, "_rows", rows)

    @property
    def num_states(self) -> int:
        return len(self.indptr) - 1

    @property
    def states(self) -> range:
        return range(self.num_states)

    def _check(self, q: int) -> None:
        if not 0 <= q < self.num_states:
            raise KeyError(f"unknown DFA state {q}")

    def transition(self, q: int, token: int) -> int | None:
        """Successor of ``q`` on ``token``, or ``None`` for the dead state."""
        return self._rows[q].get(token)

    def allowed(self, q: int) -> frozenset[int]:
        self._check(q)
        return frozenset(self._rows[q])

    def allowed_array(self, q: int) -> np.ndarray:
        """Sorted allowed token ids of ``q`` as a read-only index array."""
        self._check(q)
        return self.tokens[self.indptr[q] : self.indptr[q + 1]]

    def allowed_bitmask(self, q: int) -> int:
        """Allowed set of ``q`` as an integer bitmask (bit k = token k)."""
        mask = 0
        for tok in self._rows[q]:
            mask |= 1 << tok
        return mask

    def successors(self, q: int) -> dict[int, int]:
        self._check(q)
        return dict(self._rows[q])

    def is_accepting(self, q: int) -> bool:
        return q in self.accepting

    def is_escalating(self, q: int) -> bool:
        return q in self.escalating

    def label(self, q: int) -> str:
        return f"q{q}"

    def walk(self, tokens: Iterable[int]) -> int | None:
        q: int | None = self.start
        for tok in tokens:
            q = self._rows[q].get(tok)
            if q is None:
                return None
        return q

    def accepts(self, tokens: Iterable[int]) -> bool:
        q = self.walk(tokens)
        return q is not None and q in self.accepting

    def to_bytes(self) -> bytes:
        """Canonical byte encoding; equal automata encode identically."""
        parts = [
            b"DFA1",
            int(self.vocab_size).to_bytes(8, "big"),
            int(self.start).to_bytes(8, "big"),
            self.indptr.astype(">i8").tobytes(),
            self.tokens.astype(">i8").tobytes(),
            self.targets.astype(">i8").tobytes(),
            np.array(sorted(self.accepting), dtype=">i8").tobytes(),
            b"|",
            np.array(sorted(self.escalating), dtype=">i8").tobytes(),
            b"|",
            self.source_root,
        ]
        return b"".join(parts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dfa):
            return NotImplemented
        return self.to_bytes() == other.to_bytes() and self.source_clock == other.source_clock

    def __hash__(self) -> int:
        return hash(self.to_bytes())

    def with_source(self, root: bytes, clock: Mapping[str, int] | None = None) -> "Dfa":
        return Dfa(
            vocab_size=self.vocab_size,
            indptr=self.indptr,
            tokens=self.tokens,
            targets=self.targets,
            accepting=self.accepting,
            escalating=self.escalating,
            start=self.start,
            source_root=root,
            source_clock=tuple(sorted((clock or {}).items())),
            _rows=self._rows,
        )

    def summary(self) -> dict:
        return {
            "states": self.num_states,
            "transitions": int(len(self.tokens)),
            "accepting": len(self.accepting),
            "escalating": len(self.escalating),
            "vocab_size": self.vocab_size,
            "source_root": self.source_root.hex(),
            "fingerprint": self.fingerprint(),
        }

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "start": self.start,
            "indptr": self.indptr.tolist(),
            "tokens": self.tokens.tolist(),
            "targets": self.targets.tolist(),
            "accepting": sorted(self.accepting),
            "escalating": sorted(self.escalating),
            "source_root": self.source_root.hex(),
            "source_clock": [list(kv) for kv in self.source_clock],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Dfa":
        return cls(
            vocab_size=int(data["vocab_size"]),
            indptr=np.asarray(data["indptr"], dtype=np.int64),
            tokens=np.asarray(data["tokens"], dtype=np.int64),
            targets=np.asarray(data["targets"], dtype=np.int64),
            accepting=frozenset(data["accepting"]),
            escalating=frozenset(data["escalating"]),
            start=int(data.get("start", 0)),
            source_root=bytes.fromhex(data.get("source_root", "")),
            source_clock=tuple((k, int(v)) for k, v in data.get("source_clock", [])),
        )


@dataclass(frozen=True)
class DecompositionPlan:
    """Automata applied together, one mask intersection per step.

    Returned by :func:`intersect` when the product would exceed the state
    budget. It exposes the same stepping interface as :class:`Dfa`, with
    states being tuples of component states.
    """

    dfas: tuple[Dfa, ...]
    source_root: bytes = b""
    source_clock: tuple[tuple[str, int], ...] = ()

    @property
    def vocab_size(self) -> int:
        return self.dfas[0].vocab_size

    @property
    def start(self) -> tuple[int, ...]:
        return tuple(d.start for d in self.dfas)

    def transition(self, q: tuple[int, ...], token: int) -> tuple[int, ...] | None:
        out = []
        for d, s in zip(self.dfas, q):
            nxt = d.transition(s, token)
            if nxt is None:
                return None
            out.append(nxt)
        return tuple(out)

    def allowed(self, q: tuple[int, ...]) -> frozenset[int]:
        sets = [d.allowed(s) for d, s in zip(self.dfas, q)]
        return frozenset.intersection(*sets)

    def allowed_array(self, q: tuple[int, ...]) -> np.ndarray:
        arrays = [d.allowed_array(s) for d, s in zip(self.dfas, q)]
        out = arrays[0]
        for arr in arrays[1:]:
            out = np.intersect1d(out, arr, assume_unique=True)
        return out

    def successors(self, q: tuple[int, ...]) -> dict[int, tuple[int, ...]]:
        return {t: self.transition(q, t) for t in sorted(self.allowed(q))}  # type: ignore[misc]

    def is_accepting(self, q: tuple[int, ...]) -> bool:
        return all(d.is_accepting(s) for d, s in zip(self.dfas, q))

    def is_escalating(self, q: tuple[int, ...]) -> bool:
        return self.is_accepting(q) and any(d.is_escalating(s) for d, s in zip(self.dfas, q))

    def label(self, q: tuple[int, ...]) -> str:
        return ".".join(f"q{s}" for s in q)

    def walk(self, tokens: Iterable[int]) -> tuple[int, ...] | None:
        q: tuple[int, ...] | None = self.start
        for tok in tokens:
            q = self.transition(q, tok)
            if q is None:
                return None
        return q

    def accepts(self, tokens: Iterable[int]) -> bool:
        q = self.walk(tokens)
        return q is not None and self.is_accepting(q)

    def with_source(self, root: bytes, clock: Mapping[str, int] | None = None) -> "DecompositionPlan":
        return DecompositionPlan(self.dfas, root, tuple(sorted((clock or {}).items())))


# --------------------------------------------------------------------------
# Compilation
# --------------------------------------------------------------------------

_FINAL = ("final",)


def _build_nfa(grammar: PolicyGrammar):
    """Thompson-style NFA: node -> list of (token or None, node)."""
    ids = grammar.token_ids
    edges: dict[tuple, list[tuple[int | None, tuple]]] = {}
    by_lhs: dict[str, list[tuple[int, Production]]] = {}
    for idx, rule in enumerate(grammar.rules):
        by_lhs.setdefault(rule.lhs, []).append((idx, rule))

    def enter(nt: str, flag: bool) -> tuple:
        return ("nt", nt, flag or nt in grammar.escalate_marks)

    if grammar.start is None:
        return ("final", False), edges

    start = enter(grammar.start, False)
    work = deque([start])
    seen = {start}
    while work:
        node = work.popleft()
        out = edges.setdefault(node, [])
        if node[0] != "nt":
            continue
        _, nt, flag = node
        for idx, rule in by_lhs.get(nt, []):
            terms = [ids[t] for t in rule.terminals]
            tail = rule.tail
            end = enter(tail, flag) if tail is not None else ("final", flag)
            cur = node
            if not terms:
                out_list = edges.setdefault(cur, [])
                out_list.append((None, end))
            for j, tok in enumerate(terms):
                nxt = end if j == len(terms) - 1 else ("mid", idx, j, flag)
                edges.setdefault(cur, []).append((tok, nxt))
                cur = nxt
            for n in [end] + [("mid", idx, j, flag) for j in range(len(terms) - 1)]:
                if n not in seen:
                    seen.add(n)
                    work.append(n)
    return start, edges


def _closure(nodes: Iterable[tuple], edges) -> frozenset:
    stack = list(nodes)
    out = set(stack)
    while stack:
        n = stack.pop()
        for tok, nxt in edges.get(n, ()):
            if tok is None and nxt not in out:
                out.add(nxt)
                stack.append(nxt)
    return frozenset(out)


def _finalize(
    n: int,
    start: int,
    rows: Sequence[Mapping[int, int]],
    accepting: set[int],
    escalating: set[int],
    vocab_size: int,
) -> Dfa:
    """Trim, minimise and canonically renumber a raw automaton."""
    # Trim: keep states that are reachable and can reach acceptance.
    reverse: list[list[int]] = [[] for _ in range(n)]
    for q, row in enumerate(rows):
        for tgt in row.values():
            reverse[tgt].append(q)
    live = set(accepting)
    stack = list(accepting)
    while stack:
        q = stack.pop()
        for p in reverse[q]:
            if p not in live:
                live.add(p)
                stack.append(p)
    trimmed = [
        {t: s for t, s in rows[q].items() if s in live} if q in live else {} for q in range(n)
    ]

    # Moore partition refinement; a missing edge goes to the implicit dead block.
    keep = sorted(live | {start})
    block = {q: (q in accepting, q in escalating) for q in keep}
    labels = {v: i for i, v in enumerate(sorted(set(block.values())))}
    block = {q: labels[block[q]] for q in keep}
    while True:
        sig = {
            q: (block[q], tuple((t, block[s]) for t, s in sorted(trimmed[q].items())))
            for q in keep
        }
        ordered = {v: i for i, v in enumerate(sorted(set(sig.values())))}
        new_block = {q: ordered[sig[q]] for q in keep}
        if len(ordered) == len(set(block.values())):
            block = new_block
            break
        block = new_block

    rep: dict[int, int] = {}
    for q in keep:
        rep.setdefault(block[q], q)

    # Canonical BFS numbering from start, edges in ascending token order.
    number = {block[start]: 0}
    order = [block[start]]
    i = 0
    while i < len(order):
        b = order[i]
        i += 1
        for t, s in sorted(trimmed[rep[b]].items()):
            if block[s] not in number:
                number[block[s]] = len(order)
                order.append(block[s])

    indptr = [0]
    toks: list[int] = []
    tgts: list[int] = []
    for b in order:
        for t, s in sorted(trimmed[rep[b]].items()):
            toks.append(t)
            tgts.append(number[block[s]])
        indptr.append(len(toks))
    acc = frozenset(number[block[q]] for q in keep if q in accepting)
    esc = frozenset(number[block[q]] for q in keep if q in escalating)
    return Dfa(
        vocab_size=vocab_size,
        indptr=np.asarray(indptr, dtype=np.int64),
        tokens=np.asarray(toks, dtype=np.int64),
        targets=np.asarray(tgts, dtype=np.int64),
        accepting=acc,
        escalating=esc,
    )


def compile_grammar(
    grammar: PolicyGrammar,
    vocab: Vocabulary,
    budget: int = DEFAULT_STATE_BUDGET,
    source_root: bytes = b"",
    source_clock: Mapping[str, int] | None = None,
) -> Dfa:
    """Compile ``grammar`` to a trimmed, minimal, canonically numbered DFA."""
    for lexeme, tid in grammar.terminal_map:
        if not 0 <= tid < vocab.size:
            raise VocabularyMismatch(f"token id {tid} ({lexeme!r}) outside vocabulary of {vocab.size}")
        if vocab.lexemes is not None and vocab.lexemes[tid] != lexeme:
            raise VocabularyMismatch(
                f"token id {tid} is {vocab.lexemes[tid]!r} in the vocabulary, grammar says {lexeme!r}"
            )

    start_node, edges = _build_nfa(grammar)
    start = _closure([start_node], edges)
    index = {start: 0}
    subsets = [start]
    rows: list[dict[int, int]] = []
    i = 0
    while i < len(subsets):
        cur = subsets[i]
        i += 1
        moves: dict[int, set] = {}
        for node in cur:
            for tok, nxt in edges.get(node, ()):
                if tok is not None:
                    moves.setdefault(tok, set()).add(nxt)
        row: dict[int, int] = {}
        for tok in sorted(moves):
            tgt = _closure(moves[tok], edges)
            if tgt not in index:
                if len(subsets) >= budget:
                    raise StateBudgetExceeded(len(subsets) + 1, budget)
                index[tgt] = len(subsets)
                subsets.append(tgt)
            row[tok] = index[tgt]
        rows.append(row)

    accepting = {q for q, s in enumerate(subsets) if any(n[0] == "final" for n in s)}
    escalating = {q for q, s in enumerate(subsets) if ("final", True) in s}
    dfa = _finalize(len(subsets), 0, rows, accepting, escalating, vocab.size)
    return dfa.with_source(source_root, source_clock)


def empty_language(vocab: Vocabulary, source_root: bytes = b"", source_clock=None) -> Dfa:
    """Single non-accepting start state: every action is denied."""
    return _finalize(1, 0, [{}], set(), set(), vocab.size).with_source(source_root, source_clock)


def intersect(
    dfas: Sequence[Dfa], budget: int = DEFAULT_STATE_BUDGET
) -> Dfa | DecompositionPlan:
    """Product automaton of ``dfas``, or a decomposition plan over budget."""
    if not dfas:
        raise ValueError("intersect needs at least one automaton")
    sizes = {d.vocab_size for d in dfas}
    if len(sizes) != 1:
        raise VocabularyMismatch(f"automata disagree on vocabulary size: {sorted(sizes)}")
    if len(dfas) == 1:
        return dfas[0]

    roots = {d.source_root for d in dfas}
    root = roots.pop() if len(roots) == 1 else hashlib.sha256(
        b"".join(d.source_root for d in dfas)
    ).digest()
    clock: dict[str, int] = {}
    for d in dfas:
        for node, c in d.source_clock:
            clock[node] = max(clock.get(node, 0), c)

    start = tuple(d.start for d in dfas)
    index = {start: 0}
    tuples = [start]
    rows: list[dict[int, int]] = []
    i = 0
    while i < len(tuples):
        cur = tuples[i]
        i += 1
        common = set(dfas[0]._rows[cur[0]])
        for d, s in zip(dfas[1:], cur[1:]):
            common &= d._rows[s].keys()
        row: dict[int, int] = {}
        for tok in sorted(common):
            nxt = tuple(d._rows[s][tok] for d, s in zip(dfas, cur))
            if nxt not in index:
                if len(tuples) >= budget:
                    return DecompositionPlan(tuple(dfas), root, tuple(sorted(clock.items())))
                index[nxt] = len(tuples)
                tuples.append(nxt)
            row[tok] = index[nxt]
        rows.append(row)

    accepting = {q for q, t in enumerate(tuples) if all(q_ in d.accepting for d, q_ in zip(dfas, t))}
    escalating = {
        q for q in accepting if any(q_ in d.escalating for d, q_ in zip(dfas, tuples[q]))
    }
    product = _finalize(len(tuples), 0, rows, accepting, escalating, dfas[0].vocab_size)
    return product.with_source(root, clock)

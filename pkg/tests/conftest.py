from __future__ import annotations

import random
from collections import deque

import pytest

from rtgov.grammar import PolicyGrammar, Vocabulary, compile_grammar, parse_grammar
from rtgov.keys import KeyPair
from rtgov.resources import bundled_grammar, default_vocabulary


# ---------------------------------------------------------------------------
# Independent derivation oracle: works on raw productions, never on automata.
# A configuration is the tuple of symbols still to be derived.
# ---------------------------------------------------------------------------


def _productive(grammar: PolicyGrammar) -> frozenset[str]:
    """Nonterminals that derive at least one finite terminal string (fixpoint)."""
    done: set[str] = set()
    changed = True
    while changed:
        changed = False
        for lhs in {r.lhs for r in grammar.rules}:
            if lhs in done:
                continue
            if any(all(sym.terminal or sym.text in done for sym in p.rhs) for p in grammar.productions(lhs)):
                done.add(lhs)
                changed = True
    return frozenset(done)


def _expand(grammar: PolicyGrammar, configs: set[tuple]) -> set[tuple]:
    """Rewrite leading nonterminals until every config starts with a terminal or is empty.

    Configs mentioning an unproductive nonterminal can never finish and are dropped.
    """
    live = _productive(grammar)
    configs = {c for c in configs if all(sym.terminal or sym.text in live for sym in c)}
    out: set[tuple] = set()
    seen: set[tuple] = set()
    stack = list(configs)
    while stack:
        cfg = stack.pop()
        if cfg in seen:
            continue
        seen.add(cfg)
        if cfg and not cfg[0].terminal:
            for prod in grammar.productions(cfg[0].text):
                nxt = prod.rhs + cfg[1:]
                if all(sym.terminal or sym.text in live for sym in nxt):
                    stack.append(nxt)
        else:
            out.add(cfg)
    return out


def oracle_start(grammar: PolicyGrammar) -> set[tuple]:
    if grammar.start is None:
        return {()}
    from rtgov.grammar import Symbol

    return _expand(grammar, {(Symbol(grammar.start, False),)})


def oracle_step(grammar: PolicyGrammar, configs: set[tuple], lexeme: str) -> set[tuple]:
    moved = {cfg[1:] for cfg in configs if cfg and cfg[0].text == lexeme}
    return _expand(grammar, moved)


def oracle_accepts(configs: set[tuple]) -> bool:
    return () in configs


def derivable(grammar: PolicyGrammar, lexemes) -> bool:
    configs = oracle_start(grammar)
    for lex in lexemes:
        configs = oracle_step(grammar, configs, lex)
        if not configs:
            return False
    return oracle_accepts(configs)


def compare_languages(grammar: PolicyGrammar, dfa, vocab: Vocabulary, max_len: int = 6) -> int:
    """Walk the prefix tree to ``max_len``; assert DFA and oracle agree everywhere.

    A prefix the oracle cannot extend is rejected together with every
    extension, so pruning there still covers all strings. Returns the number
    of prefixes compared.
    """
    checked = 0
    queue = deque([((), oracle_start(grammar), dfa.start)])
    while queue:
        prefix, configs, q = queue.popleft()
        checked += 1
        if not configs:
            # Empty languages keep a lone, rejecting start state with no exits.
            assert q is None or (not prefix and not dfa.is_accepting(q) and not dfa.allowed(q)), prefix
            continue
        assert q is not None, prefix
        assert dfa.is_accepting(q) == oracle_accepts(configs), prefix
        if len(prefix) == max_len:
            continue
        for tok in range(vocab.size):
            nxt_cfg = oracle_step(grammar, configs, vocab.lexeme(tok))
            queue.append((prefix + (tok,), nxt_cfg, dfa.transition(q, tok)))
    return checked


def random_grammar(rng: random.Random, n_terminals: int, name: str = "g") -> tuple[PolicyGrammar, Vocabulary]:
    """A random right-linear grammar over ``n_terminals`` single-letter-ish lexemes."""
    lexemes = [f"t{i}" for i in range(n_terminals)]
    nts = [f"N{i}" for i in range(rng.randint(1, 4))]
    lines = [f"grammar {name} version 1", f"start {nts[0]}"]
    lines += [f'token "{lex}" = {i}' for i, lex in enumerate(lexemes)]
    for nt in nts:
        for _ in range(rng.randint(1, 3)):
            body = [f'"{rng.choice(lexemes)}"' for _ in range(rng.randint(0, 2))]
            if rng.random() < 0.6:
                body.append(rng.choice(nts))
            lines.append(f"rule {nt} -> {' '.join(body)}".rstrip())
    if rng.random() < 0.3:
        lines.append(f"escalate {rng.choice(nts)}")
    return parse_grammar("\n".join(lines) + "\n"), Vocabulary.from_lexemes(lexemes)


# ---------------------------------------------------------------------------
# Shared fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return default_vocabulary()


@pytest.fixture(scope="session")
def grammar_v1() -> PolicyGrammar:
    return bundled_grammar("vincristine_v1")


@pytest.fixture(scope="session")
def grammar_v2() -> PolicyGrammar:
    return bundled_grammar("vincristine_v2")


@pytest.fixture(scope="session")
def dfa_v1(grammar_v1, vocab):
    return compile_grammar(grammar_v1, vocab, source_root=b"\x01" * 32, source_clock={"pap": 1})


@pytest.fixture(scope="session")
def dfa_v2(grammar_v2, vocab):
    return compile_grammar(grammar_v2, vocab, source_root=b"\x02" * 32, source_clock={"pap": 2})


@pytest.fixture(scope="session")
def pap_key() -> KeyPair:
    return KeyPair.from_seed("test-pap")


@pytest.fixture(scope="session")
def authority_key() -> KeyPair:
    return KeyPair.from_seed("test-authority")


def toks(vocab: Vocabulary, text: str) -> list[int]:
    return vocab.ids(text.split())


# ---------------------------------------------------------------------------
# Acceptance reporting: one PASS/FAIL line per criterion in the summary.
# ---------------------------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by this test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or report.failed:
        entry["seen"] = True
        entry["ok"] = entry["ok"] and report.passed if report.when == "call" else False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {entry['title']}")

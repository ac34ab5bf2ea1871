"""Bundled fixtures: the dosage vocabulary, policy grammars and scenarios."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from rtgov.grammar import PolicyGrammar, Vocabulary, parse_grammar


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("rtgov") / "fixtures" / name))


def default_vocabulary() -> Vocabulary:
    return Vocabulary.load(fixture_path("vocab.txt"))


def bundled_grammar_source(name: str) -> str:
    return fixture_path(f"{name}.grammar").read_text(encoding="utf-8")


def bundled_grammar(name: str) -> PolicyGrammar:
    return parse_grammar(bundled_grammar_source(name))


def scenario_path(name: str) -> Path:
    return fixture_path(f"scenarios/{name}.json")

"""Command-line entry point.

Exit codes: 0 success, 1 a checked invariant or verification failed,
2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rtgov.gbom import GbomLog, export_oscal, verify_chain
from rtgov.grammar import GrammarError, Vocabulary, compile_grammar, load_grammar, parse_grammar
from rtgov.pep import mask
from rtgov.simulator import converge_check, load_scenario, run
from rtgov.simulator.explorer import ACTIONS, NETWORK_STATES, ModelConfig, explore
from rtgov.simulator.scenario import ScenarioError

OK, FAILED, USAGE = 0, 1, 2


@dataclass(frozen=True)
class CommandOutcome:
    code: int
    report: str
    report_path: Path | None = None


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _write_json(path: str | None, data) -> Path | None:
    if not path:
        return None
    out = Path(path)
    out.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _vocab_for(grammar, vocab_path: str | None) -> Vocabulary:
    if vocab_path:
        return Vocabulary.load(vocab_path)
    mapping = dict(grammar.terminal_map)
    size = max(mapping.values(), default=-1) + 1
    by_id = {tid: lex for lex, tid in mapping.items()}
    if len(by_id) == size:
        return Vocabulary.from_lexemes(by_id[i] for i in range(size))
    return Vocabulary(size)


# --------------------------------------------------------------------------
# compile
# --------------------------------------------------------------------------


def cmd_compile(args) -> CommandOutcome:
    text = Path(args.grammar).read_text(encoding="utf-8")
    try:
        grammar = parse_grammar(text)
        vocab = _vocab_for(grammar, args.vocab)
        root = hashlib.sha256(grammar.to_source().encode()).digest()
        dfa = compile_grammar(grammar, vocab, budget=args.budget, source_root=root)
    except GrammarError as exc:
        # a grammar that cannot be compiled is bad input, not a failed check
        return CommandOutcome(USAGE, f"error: compile failed: {exc}")
    summary = {"grammar": grammar.name, "version": grammar.version, **dfa.summary()}
    start_allowed = sorted(dfa.allowed(dfa.start))
    lines = [
        f"grammar      {grammar.name} v{grammar.version}",
        f"states       {summary['states']}",
        f"transitions  {summary['transitions']}",
        f"accepting    {summary['accepting']}  escalating {summary['escalating']}",
        f"vocabulary   {vocab.size}",
        f"start allows {', '.join(vocab.lexeme(t) for t in start_allowed) or '(nothing)'}",
        f"source root  sha256:{summary['source_root']}",
        f"fingerprint  {summary['fingerprint']}",
    ]
    if args.dfa_out:
        Path(args.dfa_out).write_text(json.dumps(dfa.to_dict()) + "\n", encoding="utf-8")
    return CommandOutcome(OK, "\n".join(lines), _write_json(args.json, summary))


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def scenario_checks(result) -> list[tuple[str, bool]]:
    m = result.metrics
    s = result.scenario
    healed = all(p.end_ms < s.duration_ms for p in s.partitions)
    checks = [
        ("no PERMIT while halted", m.permits_after_halt == 0),
        ("PERMIT records bind the committed root", m.provenance_violations == 0),
        ("one audit record per decision", m.decision_records == m.total_actions),
        ("stale decisions within bound", m.n_stale <= m.esw_bound),
        ("staleness within one epoch", m.max_staleness_ms <= s.epoch_ttl_ms),
        ("audit chains verify", all(verify_chain(v.log).valid for v in result.nodes.values())),
    ]
    if healed:
        checks.append(("replicas converge", converge_check(result).converged))
    return checks


def cmd_simulate(args) -> CommandOutcome:
    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        return CommandOutcome(USAGE, f"invalid scenario: {exc}")
    result = run(scenario)
    checks = scenario_checks(result)
    lines = [f"scenario {scenario.name} ({scenario.workload}), seed {scenario.seed}, {scenario.nodes} nodes", ""]
    lines.append(result.metrics.table())
    lines.append("")
    lines += [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in checks]
    if args.events:
        Path(args.events).write_bytes(result.event_log_bytes())
    if args.gbom_dir:
        out = Path(args.gbom_dir)
        out.mkdir(parents=True, exist_ok=True)
        for nid, view in result.nodes.items():
            (out / f"{nid}.ndjson").write_bytes(b"".join(r.to_line() + b"\n" for r in view.log))
    data = {
        "scenario": scenario.name,
        "metrics": result.metrics.to_dict(),
        "checks": {name: ok for name, ok in checks},
        "roots": converge_check(result).roots,
    }
    code = OK if all(ok for _, ok in checks) else FAILED
    return CommandOutcome(code, "\n".join(lines), _write_json(args.json, data))


# --------------------------------------------------------------------------
# explore
# --------------------------------------------------------------------------


def cmd_explore(args) -> CommandOutcome:
    names = tuple(ACTIONS)
    if not 1 <= args.actions <= len(names):
        return CommandOutcome(USAGE, f"--actions must be between 1 and {len(names)}")
    if not 1 <= args.network_states <= len(NETWORK_STATES):
        return CommandOutcome(USAGE, "--network-states must be 1 or 2")
    try:
        config = ModelConfig(
            max_version=args.versions,
            actions=names[: args.actions],
            network_states=NETWORK_STATES[: args.network_states],
            depth_bound=args.depth,
            state_budget=args.budget,
            mask_enabled=args.fault != "mask-off",
            swap_anytime=args.fault == "swap-anytime",
        )
    except ValueError as exc:
        return CommandOutcome(USAGE, str(exc))
    report = explore(config)
    s = report.summary()
    lines = [
        f"versions {s['versions']}, actions {', '.join(s['actions'])}, network {'/'.join(s['network_states'])}",
        f"states generated  {s['states_generated']}",
        f"distinct states   {s['distinct_states']}",
        f"depth             {s['depth']}",
        f"deadlocks         {s['deadlocks']}",
        f"complete          {s['complete']}",
        f"violations        {len(report.violations)}",
    ]
    if report.violations:
        first = report.violations[0]
        lines.append(f"first violation   {first.invariant}: {' -> '.join(first.trace)}")
    return CommandOutcome(OK if report.ok else FAILED, "\n".join(lines), _write_json(args.json, s))


# --------------------------------------------------------------------------
# gbom
# --------------------------------------------------------------------------


def _read_audit(path: Path):
    raw = path.read_bytes()
    stripped = raw.lstrip()
    if stripped.startswith(b"{"):
        try:
            doc = json.loads(raw)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict) and "assessment-results" in doc:
            return doc
    return raw


def cmd_gbom_export(args) -> CommandOutcome:
    path = Path(args.log)
    report = verify_chain(path)
    if not report.valid:
        return CommandOutcome(FAILED, f"refusing to export: chain broken at index {report.broken_at} ({report.reason})")
    doc = export_oscal(GbomLog.load(path))
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        return CommandOutcome(OK, f"exported {report.length} records to {args.out}", Path(args.out))
    return CommandOutcome(OK, text)


def cmd_gbom_verify(args) -> CommandOutcome:
    source = _read_audit(Path(args.log))
    public = bytes.fromhex(args.public_key) if args.public_key else None
    report = verify_chain(source, public)
    if report.valid:
        return CommandOutcome(OK, f"chain valid: {report.length} records")
    return CommandOutcome(FAILED, f"chain broken at index {report.broken_at}: {report.reason}")


# --------------------------------------------------------------------------
# bench-mask
# --------------------------------------------------------------------------


def synthetic_dfa(vocab_size: int, states: int, allowed: int, seed: int):
    """A chain automaton whose states each allow ``allowed`` random tokens."""
    rng = np.random.default_rng(seed)
    allowed = max(1, min(allowed, vocab_size))
    lines = ["grammar bench version 1", "start S0"]
    lines += [f'token "t{i}" = {i}' for i in range(vocab_size)]
    for s in range(states):
        toks = np.sort(rng.choice(vocab_size, size=allowed, replace=False))
        tail = f" S{s + 1}" if s + 1 < states else ""
        lines += [f'rule S{s} -> "t{t}"{tail}' for t in toks.tolist()]
    grammar = parse_grammar("\n".join(lines) + "\n")
    return compile_grammar(grammar, Vocabulary(vocab_size), budget=max(10_000, states + 1))


def hardware_description() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": f"{platform.system()} {platform.release()}",
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def bench_mask(vocab_size: int, iterations: int, seed: int = 0, states: int = 16, allowed: int = 2000, dfa=None) -> dict:
    """Time mask application per step over seeded random logits."""
    dfa = dfa or synthetic_dfa(vocab_size, states, allowed, seed)
    rng = np.random.default_rng(seed + 1)
    pool = rng.normal(size=(8, vocab_size))
    timings = np.empty(iterations, dtype=np.float64)
    check_every = 100
    mismatches = checks = 0
    q = dfa.start
    for i in range(iterations):
        logits = pool[i % len(pool)]
        idx = dfa.allowed_array(q)
        t0 = time.perf_counter_ns()
        masked = mask(logits, idx)
        timings[i] = time.perf_counter_ns() - t0
        if i % check_every == 0:
            checks += 1
            allow = dfa.allowed(q)
            expected = [logits[k] if k in allow else float("-inf") for k in range(vocab_size)]
            if masked.tolist() != expected:
                mismatches += 1
        succ = dfa.successors(q)
        q = next(iter(succ.values())) if succ else dfa.start
    ms = timings / 1e6
    return {
        "vocab_size": vocab_size,
        "iterations": iterations,
        "seed": seed,
        "dfa_states": dfa.num_states,
        "mean_ms": float(ms.mean()) if iterations else 0.0,
        "p50_ms": float(np.percentile(ms, 50)) if iterations else 0.0,
        "p99_ms": float(np.percentile(ms, 99)) if iterations else 0.0,
        "max_ms": float(ms.max()) if iterations else 0.0,
        "oracle_checks": checks,
        "oracle_mismatches": mismatches,
        "hardware": hardware_description(),
    }


def cmd_bench_mask(args) -> CommandOutcome:
    if args.vocab < 1 or args.iterations < 1:
        return CommandOutcome(USAGE, "--vocab and --iterations must be positive")
    dfa = None
    if args.grammar:
        grammar = load_grammar(args.grammar)
        dfa = compile_grammar(grammar, _vocab_for(grammar, args.vocab_file))
        args.vocab = dfa.vocab_size
    stats = bench_mask(args.vocab, args.iterations, args.seed, args.states, args.allowed, dfa)
    hw = stats["hardware"]
    lines = [
        f"vocab {stats['vocab_size']}, {stats['dfa_states']} DFA states, {stats['iterations']} iterations, seed {stats['seed']}",
        f"mean {stats['mean_ms'] * 1000:.1f} us  p50 {stats['p50_ms'] * 1000:.1f} us  "
        f"p99 {stats['p99_ms'] * 1000:.1f} us  max {stats['max_ms'] * 1000:.1f} us",
        f"oracle re-checks {stats['oracle_checks']}, mismatches {stats['oracle_mismatches']}",
        f"hardware {hw['machine']} / {hw['processor']} / {hw['cpu_count']} cpus / {hw['system']} / "
        f"python {hw['python']} / numpy {hw['numpy']}",
    ]
    code = OK if stats["oracle_mismatches"] == 0 else FAILED
    return CommandOutcome(code, "\n".join(lines), _write_json(args.json, stats))


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rtgov", description="Runtime policy governance: compile, simulate, explore, audit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compile", help="compile a policy grammar to a DFA and print its summary")
    c.add_argument("grammar", help="grammar file")
    c.add_argument("vocab", nargs="?", help="vocabulary file (JSON list or one lexeme per line)")
    c.add_argument("--budget", type=int, default=10_000, help="maximum DFA states (default 10000)")
    c.add_argument("--json", help="write the summary as JSON to this path")
    c.add_argument("--dfa-out", help="write the compiled automaton as JSON to this path")
    c.set_defaults(func=cmd_compile)

    s = sub.add_parser("simulate", help="run a scenario file and check run invariants")
    s.add_argument("scenario", help="scenario JSON file")
    s.add_argument("--json", help="write metrics and checks as JSON")
    s.add_argument("--events", help="write the event log (NDJSON)")
    s.add_argument("--gbom-dir", help="write each node's audit log as NDJSON into this directory")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("explore", help="exhaustively explore the governance model")
    e.add_argument("--versions", type=int, default=5, help="policy versions (1-5)")
    e.add_argument("--actions", type=int, default=3, help="number of actions (1-3)")
    e.add_argument("--network-states", type=int, default=2, help="1 = always connected, 2 = partitions")
    e.add_argument("--depth", type=int, default=None, help="depth bound (default unbounded)")
    e.add_argument("--budget", type=int, default=500_000, help="distinct-state budget")
    e.add_argument("--fault", choices=("mask-off", "swap-anytime"), help="inject an enforcement fault")
    e.add_argument("--json", help="write the report as JSON")
    e.set_defaults(func=cmd_explore)

    g = sub.add_parser("gbom", help="audit log export and verification")
    gsub = g.add_subparsers(dest="gbom_command", required=True, parser_class=_Parser)
    ge = gsub.add_parser("export", help="export an NDJSON audit log as OSCAL assessment results")
    ge.add_argument("log")
    ge.add_argument("--out", help="output path (default stdout)")
    ge.set_defaults(func=cmd_gbom_export)
    gv = gsub.add_parser("verify", help="verify an NDJSON log or exported OSCAL document")
    gv.add_argument("log")
    gv.add_argument("--public-key", help="hex Ed25519 key to check record signatures")
    gv.set_defaults(func=cmd_gbom_verify)

    b = sub.add_parser("bench-mask", help="micro-benchmark logit masking")
    b.add_argument("--vocab", type=int, default=50_000, help="vocabulary size (default 50000)")
    b.add_argument("--iterations", type=int, default=10_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--states", type=int, default=16, help="states of the synthetic DFA")
    b.add_argument("--allowed", type=int, default=2000, help="allowed tokens per synthetic state")
    b.add_argument("--grammar", help="benchmark this grammar instead of a synthetic DFA")
    b.add_argument("--vocab-file", help="vocabulary for --grammar")
    b.add_argument("--json", help="write statistics as JSON")
    b.set_defaults(func=cmd_bench_mask)
    return p


def dispatch(argv: list[str] | None = None) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        return CommandOutcome(USAGE, f"{exc}\n{parser.format_usage().rstrip()}")
    except SystemExit as exc:  # --help
        return CommandOutcome(int(exc.code or 0), "")
    try:
        return args.func(args)
    except (OSError, GrammarError) as exc:
        return CommandOutcome(USAGE, f"error: {exc}")


def main(argv: list[str] | None = None) -> int:
    outcome = dispatch(argv)
    if outcome.report:
        stream = sys.stdout if outcome.code == OK else sys.stderr
        print(outcome.report, file=stream)
    if outcome.report_path is not None:
        print(f"report written to {outcome.report_path}", file=sys.stderr)
    return outcome.code


if __name__ == "__main__":
    sys.exit(main())

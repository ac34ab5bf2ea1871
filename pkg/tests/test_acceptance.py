"""End-to-end acceptance checks, one marked test per criterion.

The conftest summary hook prints a PASS/FAIL line for every criterion.
"""

import itertools
import random
import threading
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import compare_languages, oracle_accepts, oracle_start, oracle_step, random_grammar, toks
from rtgov.cli import bench_mask
from rtgov.epoch import EpochManager, ResetSignal
from rtgov.gbom import GbomLog, GbomRecord, render_root, verify_chain
from rtgov.grammar import compile_grammar, intersect
from rtgov.keys import KeyPair
from rtgov.pep import MockLogitGenerator, PolicyEnforcementPoint, SoftmaxSampler, softmax
from rtgov.policy_store import PolicyReplica, VectorClock, vc_merge
from rtgov.resources import bundled_grammar, default_vocabulary, scenario_path
from rtgov.simulator import build_scenario, converge_check, esw_bound, flagged_actions, legacy_exposure, load_scenario, run
from rtgov.simulator.explorer import ModelConfig, broken, explore

criterion = pytest.mark.criterion


def _eoa(vocab):
    return vocab.ids(["<eoa>"])[0]


def _actions(result, node=None):
    return [e for e in result.events if e["event"] == "action" and (node is None or e["node"] == node)]


def _versions(vocab):
    return [
        compile_grammar(bundled_grammar(name), vocab, source_root=bytes([i + 1]) * 32, source_clock={"pap": i + 1})
        for i, name in enumerate(["vincristine_v1", "vincristine_v2"])
    ]


# -- 1 ----------------------------------------------------------------------


@criterion(1, "legacy exposure arithmetic")
def test_legacy_exposure_arithmetic():
    exposure = legacy_exposure(5000, 100, 14)
    assert exposure == 168_000_000
    assert flagged_actions(exposure, "0.0003") == 50_400
    # independent: integer product and exact percentage
    assert 5000 * 100 * 24 * 14 * 3 // 10_000 == 50_400


# -- 2 ----------------------------------------------------------------------


@criterion(2, "stale-decision bound and W4 measurement")
def test_stale_window_bound():
    assert esw_bound(500_000, 60) == 8194 == 500_000 * 59 // 3600
    result = run(load_scenario(scenario_path("w4_midepoch_update")))
    m = result.metrics
    assert result.scenario.actions_per_hour == 500_000 and result.scenario.epoch_ttl_ms == 60_000
    assert m.esw_bound == 8194
    assert m.total_actions > 8194  # the bound is not met trivially
    assert m.n_stale <= 8194
    assert m.max_staleness_ms <= result.scenario.epoch_ttl_ms
    assert m.permits_after_halt == 0 and m.provenance_violations == 0


# -- 3 ----------------------------------------------------------------------


@criterion(3, "safety invariant holds in the explorer; mask fault is caught")
def test_explorer_safety():
    report = explore(ModelConfig())
    assert report.complete
    assert report.violations == [] and report.deadlocks == 0
    summary = report.summary()
    assert summary["versions"] == 5
    assert summary["actions"] == ["safe_dosage", "unsafe_dosage", "escalate_case"]
    assert summary["network_states"] == ["CONNECTED", "PARTITIONED"]
    faulty = explore(broken(ModelConfig(), mask_enabled=False))
    assert len(faulty.violations) >= 1


# -- 4 ----------------------------------------------------------------------


@criterion(4, "mask soundness over 10,000 seeded steps")
def test_mask_soundness(vocab, dfa_v1, dfa_v2):
    fixtures = [dfa_v1, dfa_v2, intersect([dfa_v1, dfa_v2])]
    end = _eoa(vocab)
    steps = 0
    seed = 0
    while steps < 10_000:
        dfa = fixtures[seed % len(fixtures)]
        pep = PolicyEnforcementPoint(dfa, end_token=end, sampler=SoftmaxSampler(seed), trace=True)
        gen = MockLogitGenerator(vocab.size, seed=seed, adversarial=seed % 2 == 0, scale=5.0)
        for _ in range(40):
            res = pep.step(gen(pep.active.allowed(pep.q)))
            assert res.token is not None
            # the set the step actually masked with (a boundary resets the state first)
            allowed = pep.traces[-1].allowed
            assert res.token in allowed
            outside = np.ones(vocab.size, dtype=bool)
            outside[list(allowed)] = False
            probs = softmax(res.logits)
            assert probs[outside].sum() == 0.0
            assert np.all(probs[outside] == 0.0)
            steps += 1
        assert all(tr.token in tr.allowed for tr in pep.traces)
        seed += 1
    assert steps >= 10_000


# -- 5 ----------------------------------------------------------------------


def _compare_product(g1, g2, prod, vocab, max_len=6):
    """Prefix-tree walk: product acceptance equals membership in both languages.

    A missing product state is a rejecting sink, so the walk continues below
    it and checks that no extension lies in both languages.
    """
    queue = deque([((), oracle_start(g1), oracle_start(g2), prod.start)])
    while queue:
        prefix, c1, c2, q = queue.popleft()
        if not c1 or not c2:
            assert q is None or not prod.is_accepting(q), prefix
            continue
        both = oracle_accepts(c1) and oracle_accepts(c2)
        assert (q is not None and prod.is_accepting(q)) == both, prefix
        if len(prefix) == max_len:
            continue
        for tok in range(vocab.size):
            lex = vocab.lexeme(tok)
            nxt = prod.transition(q, tok) if q is not None else None
            queue.append((prefix + (tok,), oracle_step(g1, c1, lex), oracle_step(g2, c2, lex), nxt))


@criterion(5, "grammar compilation and products match brute-force derivation")
def test_oracle_equivalence():
    grammars = 0
    for seed in range(24):
        rng = random.Random(5000 + seed)
        n = 2 + seed % 9  # vocabularies of 2..10 tokens
        g1, vocab = random_grammar(rng, n, "g1")
        g2, _ = random_grammar(rng, n, "g2")
        d1, d2 = compile_grammar(g1, vocab), compile_grammar(g2, vocab)
        compare_languages(g1, d1, vocab, max_len=6)
        compare_languages(g2, d2, vocab, max_len=6)
        _compare_product(g1, g2, intersect([d1, d2]), vocab)
        grammars += 2
    assert grammars >= 20


# -- 6 ----------------------------------------------------------------------


def _mutation_sets():
    keys = {name: KeyPair.from_seed(f"acc-{name}") for name in ("A", "B", "C")}
    issuers = {n: k.public for n, k in keys.items()}
    sets = []
    for seed in range(6):
        rng = random.Random(seed)
        reps = {n: PolicyReplica(n, issuers) for n in keys}
        out, versions = [], {}
        while len(out) < 4:
            issuer = rng.choice(sorted(keys))
            for m in out:
                if rng.random() < 0.5:
                    reps[issuer].ingest(m)
            name = rng.choice(["g", "h"])
            version = versions.get(name, 0) + 1
            versions[name] = version
            src = f'grammar {name} version {version}\ntoken "a" = 0\nrule S -> "a"\n'
            out.append(reps[issuer].author(src, issuer, keys[issuer]))
        sets.append(out)
    return issuers, sets


@criterion(6, "policy replicas converge under every delivery order")
def test_crdt_convergence():
    clock = lambda *c: VectorClock.of(dict(zip("xyz", c)))  # noqa: E731
    assert vc_merge(clock(1, 1, 0), clock(1, 0, 1)) == clock(1, 1, 1)
    issuers, sets = _mutation_sets()
    for muts in sets:
        roots = set()
        for order in itertools.permutations(muts):
            rep = PolicyReplica("r", issuers)
            for m in order:
                rep.ingest(m)
            assert len(rep.dag) == 4 and not rep.pending
            roots.add(rep.merkle_root())
            before = rep.merkle_root()
            for m in order:
                rep.ingest(m)  # idempotent redelivery
            assert rep.merkle_root() == before and len(rep.dag) == 4
        assert len(roots) == 1


# -- 7 ----------------------------------------------------------------------


@criterion(7, "partitioned node fails closed and recovers only by attestation")
def test_fail_closed_partition():
    result = run(load_scenario(scenario_path("w5_partition")))
    s = result.scenario
    assert s.epoch_ttl_ms == 60_000
    (p,) = s.partitions
    assert p.end_ms - p.start_ms == 90_000
    n1 = [e for e in result.events if e.get("node") == "n1"]
    last = max(e["t"] for e in n1 if e["event"] == "attest" and e["t"] < p.start_ms)
    instant = last + s.epoch_ttl_ms
    halt_t = result.metrics.halted_at["n1"][0]
    assert halt_t == instant + 1
    # the halt is the first thing n1 does once the epoch has run out
    first_after = next(e for e in n1 if e["t"] > instant)
    assert first_after["event"] == "halt"
    assert result.metrics.permits_after_halt == 0
    recovered = min(e["t"] for e in n1 if e["event"] == "attest" and e["t"] > halt_t)
    assert recovered >= p.end_ms
    for e in _actions(result, "n1"):
        if halt_t <= e["t"] < recovered + s.attest_latency_ms:
            assert e["verdict"] != "PERMIT", e
    assert any(e["verdict"] == "PERMIT" for e in _actions(result, "n1") if e["t"] > recovered)
    assert converge_check(result)


# -- 8 ----------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), stage_at=st.integers(0, 40))
@criterion(8, "double-buffered swap only at aligned boundaries")
def test_swap_timing(seed, stage_at):
    vocab = default_vocabulary()
    v1, v2 = _versions(vocab)
    pep = PolicyEnforcementPoint(v1, end_token=_eoa(vocab), sampler=SoftmaxSampler(seed), trace=True)
    gen = MockLogitGenerator(vocab.size, seed=seed)
    staged_step = None
    for i in range(48):
        if i == stage_at:
            pep.stage_dfa(v2)
            staged_step = pep.step_count
            staged_at_boundary = pep.at_boundary
        pep.step(gen())
    boundaries = [tr.step for tr in pep.traces if tr.boundary]
    assert len(pep.swaps) == 1
    swap = pep.swaps[0]
    expected = staged_step if staged_at_boundary else min(b for b in boundaries if b >= staged_step)
    assert swap.step == expected
    assert swap.aligned_prefix == 0
    # every step before the swap ran on v1, every step after on v2
    for tr in pep.traces:
        assert tr.dfa_id == (id(v1) if tr.step <= swap.step else id(v2))
    action_dfa = None
    for tr in pep.traces:
        if action_dfa is not None:
            assert tr.dfa_id == action_dfa
        action_dfa = None if tr.boundary else tr.dfa_id


@criterion(8, "double-buffered swap only at aligned boundaries")
def test_swap_under_concurrent_staging():
    vocab = default_vocabulary()
    source = bundled_grammar("vincristine_v2")
    base = compile_grammar(bundled_grammar("vincristine_v1"), vocab, source_root=b"\x00" * 32, source_clock={"pap": 1})
    pep = PolicyEnforcementPoint(base, end_token=_eoa(vocab), sampler=SoftmaxSampler(3), trace=True)
    published = {id(base): base}
    done = threading.Event()

    def publisher():
        for i in range(2, 40):
            dfa = compile_grammar(source, vocab, source_root=bytes([i]) * 32, source_clock={"pap": i})
            published[id(dfa)] = dfa  # registered before the reference store
            pep.stage_dfa(dfa)
        done.set()

    thread = threading.Thread(target=publisher)
    thread.start()
    gen = MockLogitGenerator(vocab.size, seed=3)
    while not done.is_set() or pep.staged is not None:
        pep.step(gen())
    thread.join()
    assert pep.swaps
    for tr in pep.traces:
        assert tr.dfa_id in published
    action_dfa = None
    for tr in pep.traces:
        if action_dfa is not None:
            assert tr.dfa_id == action_dfa
        action_dfa = None if tr.boundary else tr.dfa_id
    clocks = [VectorClock.of({"pap": sw.new_root[0]}) for sw in pep.swaps]
    assert [c["pap"] for c in clocks] == sorted(c["pap"] for c in clocks)


# -- 9 ----------------------------------------------------------------------


@criterion(9, "forced resets are rate limited and authenticated")
def test_reset_rate_limit_audit():
    result = run(load_scenario(scenario_path("reset_storm")))
    half = result.scenario.epoch_ttl_ms // 2
    resets = [e for e in result.events if e["event"] == "reset"]
    assert any(not e["authorized"] for e in resets)
    assert all(not e["accepted"] for e in resets if not e["authorized"])
    for nid in result.nodes:
        accepted = [e["t"] for e in resets if e["node"] == nid and e["accepted"]]
        for t in accepted:
            assert sum(1 for u in accepted if t <= u < t + half) <= 1

    # a randomized storm against a bare manager
    pap, mallory = KeyPair.from_seed("pap"), KeyPair.from_seed("mallory")
    mgr = EpochManager([], [], reset_issuers={"pap": pap.public}, ttl=60_000)
    rng = random.Random(9)
    t = 0
    for i in range(2000):
        t += rng.randint(0, 5000)
        key, name = rng.choice([(pap, "pap"), (mallory, "pap"), (mallory, "mallory")])
        mgr.emergency_reset(ResetSignal.signed(key, name, b"\x01" * 32, i.to_bytes(16, "big"), t), t)
    log = mgr.reset_log
    accepted = [e.time for e in log if e.accepted]
    assert accepted and all(b - a >= 30_000 for a, b in zip(accepted, accepted[1:]))
    assert {e.reason for e in log if e.accepted} == {"accepted"}
    assert sum(e.reason == "unauthenticated" for e in log) > 0


# -- 10 ---------------------------------------------------------------------

OBSERVATION_PROPS = ["policy_merkle_root", "tee_measurement", "epoch_id", "dfa_state", "enforcement", "spiffe_svid"]


def _hundred_records(signer=None):
    rng = random.Random(10)
    log = GbomLog(signer=signer)
    for i in range(100):
        log.append(
            kind="decision",
            timestamp=i * 11,
            policy_merkle_root=render_root(bytes([i % 7]) * 32),
            tee_measurement="sevsnp:mrenclave:" + "ab" * 32,
            epoch_id=f"E-{i // 25 + 1:03d}",
            dfa_state=f"q{i % 17}",
            enforcement=rng.choice(["PERMIT", "DENY", "ESCALATE"]),
            identity="spiffe://ehv.example/agent/twin-001",
            action_id=f"a{i}",
            detail="dosage",
        )
    return log


@criterion(10, "audit log export shape, tamper and reorder detection")
def test_gbom_integrity():
    key = KeyPair.from_seed("auditor")
    log = _hundred_records(signer=key)
    doc = log.export_oscal()
    ar = doc["assessment-results"]
    assert ar["metadata"]["oscal-version"] == "1.1.2"
    for result in ar["results"]:
        for obs in result["observations"]:
            assert [p["name"] for p in obs["props"]] == OBSERVATION_PROPS
        assert result["reviewed-controls"]["control-selections"][0]["include-controls"][0]["control-id"] == "si-17"
    assert verify_chain(doc, key.public).valid

    records = list(log.records)
    assert verify_chain(records, key.public).valid
    # every field of every record
    for i, r in enumerate(records):
        for name, value in r.to_dict().items():
            if isinstance(value, int):
                changed = value + 1
            else:
                changed = (value[:-1] + ("0" if value[-1:] != "0" else "1")) if value else "x"
            tampered = records[:i] + [GbomRecord(**{**r.to_dict(), name: changed})] + records[i + 1 :]
            report = verify_chain(tampered, key.public)
            assert not report.valid and report.broken_at == i, (i, name)
    # single-byte flips in the serialised log, sampled across all records
    lines = [r.to_line() for r in records]
    blob = b"\n".join(lines) + b"\n"
    rng = random.Random(100)
    for pos in rng.sample(range(len(blob)), 1500):
        tampered = bytearray(blob)
        tampered[pos] ^= 1 << rng.randrange(8)
        assert not verify_chain(bytes(tampered), key.public).valid, pos
    # any reordering: every adjacent swap plus random permutations
    for i in range(99):
        swapped = records[:]
        swapped[i], swapped[i + 1] = swapped[i + 1], swapped[i]
        assert verify_chain(swapped).broken_at == i
    for _ in range(100):
        perm = records[:]
        rng.shuffle(perm)
        if perm != records:
            first = next(i for i, (a, b) in enumerate(zip(perm, records)) if a is not b)
            assert verify_chain(perm).broken_at == first

    # record count equals decision count in a simulated run
    sim = run(build_scenario({"name": "count", "seed": 10, "nodes": 3, "duration_ms": 60_000,
                              "workload": "mixed", "fleet": {"actions_per_hour": 7200}}))
    for nid, view in sim.nodes.items():
        assert view.log.count("decision") == len(_actions(sim, nid))
        assert verify_chain(view.log).valid
    assert sim.metrics.decision_records == sim.metrics.total_actions > 0


# -- 11 ---------------------------------------------------------------------


@pytest.mark.parametrize("generation", ["propose", "masked"])
@criterion(11, "tightened dose ceiling enforced under the new root")
def test_vincristine_regression(generation):
    vocab = default_vocabulary()
    high = vocab.ids(["1.5"])[0]
    s = build_scenario({
        "name": "vincristine", "seed": 11, "nodes": 3, "duration_ms": 150_000, "workload": "W4",
        "generation": generation, "fleet": {"actions_per_hour": 36_000},
        "mix": {"safe": 0.3, "unsafe": 0.6, "escalate": 0.1},
    })
    result = run(s)
    new_root = result.nodes["n0"].root
    assert converge_check(result)
    for nid, view in result.nodes.items():
        swaps = [e["t"] for e in result.events if e["event"] == "swap" and e["node"] == nid and e["root"] == new_root.hex()]
        assert swaps, nid
        after = [e for e in _actions(result, nid) if e["root"] == new_root.hex()]
        assert after and min(e["t"] for e in after) >= swaps[0]
        unsafe = [e for e in after if e["intent"] == "unsafe"]
        assert unsafe
        decided = {r.action_id: r for r in view.log if r.kind == "decision"}
        for e in after:
            record = decided[e["action"]]
            assert record.policy_merkle_root == render_root(new_root)
            if generation == "propose" and e["intent"] == "unsafe":
                assert e["verdict"] == "DENY"
        bound = {e["action"] for e in after}
        emitted = [r for r in view.log if r.kind == "token" and r.action_id in bound]
        assert all(r.detail != f"token {high}" for r in emitted)
        if generation == "masked":
            assert emitted


# -- 12 ---------------------------------------------------------------------


@criterion(12, "mask application under 1 ms at vocabulary 50,000")
def test_mask_latency():
    stats = bench_mask(50_000, 10_000, seed=0)
    print(f"bench-mask mean {stats['mean_ms'] * 1000:.1f} us, p99 {stats['p99_ms'] * 1000:.1f} us")
    assert stats["oracle_mismatches"] == 0
    assert stats["mean_ms"] < 1.0

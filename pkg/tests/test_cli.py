import json

import pytest

from rtgov.cli import bench_mask, dispatch, main, synthetic_dfa
from rtgov.resources import fixture_path, scenario_path


def test_compile(capsys, tmp_path):
    out = tmp_path / "summary.json"
    dfa_out = tmp_path / "dfa.json"
    code = main(["compile", str(fixture_path("vincristine_v2.grammar")), str(fixture_path("vocab.txt")),
                 "--json", str(out), "--dfa-out", str(dfa_out)])
    assert code == 0
    summary = json.loads(out.read_text())
    assert summary["states"] == 8
    from rtgov.grammar import Dfa

    assert Dfa.from_dict(json.loads(dfa_out.read_text())).num_states == 8


def test_compile_without_vocab():
    assert dispatch(["compile", str(fixture_path("vincristine_v1.grammar"))]).code == 0


def test_compile_over_budget():
    outcome = dispatch(["compile", str(fixture_path("vincristine_v1.grammar")), "--budget", "2"])
    assert outcome.code == 2 and "more than 2 states" in outcome.report


def test_compile_bad_grammar(tmp_path):
    bad = tmp_path / "bad.grammar"
    bad.write_text('grammar g version 1\ntoken "a" = 0\nrule A -> A A\n')
    outcome = dispatch(["compile", str(bad)])
    assert outcome.code == 2 and "error" in outcome.report


def test_simulate_writes_artifacts(tmp_path):
    gdir = tmp_path / "gbom"
    events = tmp_path / "events.ndjson"
    outcome = dispatch(["simulate", str(scenario_path("lifecycle")), "--json", str(tmp_path / "m.json"),
                        "--events", str(events), "--gbom-dir", str(gdir)])
    assert outcome.code == 0, outcome.report
    assert "FAIL" not in outcome.report
    data = json.loads((tmp_path / "m.json").read_text())
    assert all(data["checks"].values())
    assert events.read_bytes()
    logs = sorted(gdir.glob("*.ndjson"))
    assert len(logs) == 3
    assert dispatch(["gbom", "verify", str(logs[0])]).code == 0


def test_simulate_bad_scenario(tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text(json.dumps({"name": "x", "nodes": -3}))
    assert dispatch(["simulate", str(bad)]).code == 2


def test_gbom_export_and_tamper(tmp_path):
    gdir = tmp_path / "g"
    dispatch(["simulate", str(scenario_path("lifecycle")), "--gbom-dir", str(gdir)])
    log = gdir / "n0.ndjson"
    oscal = tmp_path / "oscal.json"
    assert dispatch(["gbom", "export", str(log), "--out", str(oscal)]).code == 0
    assert dispatch(["gbom", "verify", str(oscal)]).code == 0
    raw = bytearray(log.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    log.write_bytes(bytes(raw))
    outcome = dispatch(["gbom", "verify", str(log)])
    assert outcome.code == 1 and "broken at index" in outcome.report
    assert dispatch(["gbom", "export", str(log)]).code == 1


def test_explore_clean_and_fault():
    ok = dispatch(["explore", "--versions", "2"])
    assert ok.code == 0 and "violations        0" in ok.report
    bad = dispatch(["explore", "--versions", "2", "--fault", "mask-off"])
    assert bad.code == 1 and "first violation" in bad.report


def test_explore_usage():
    assert dispatch(["explore", "--actions", "9"]).code == 2
    assert dispatch(["explore", "--versions", "9"]).code == 2


def test_bench_mask_small(tmp_path):
    out = tmp_path / "b.json"
    outcome = dispatch(["bench-mask", "--vocab", "500", "--iterations", "300", "--allowed", "50", "--json", str(out)])
    assert outcome.code == 0
    stats = json.loads(out.read_text())
    assert stats["oracle_mismatches"] == 0 and stats["oracle_checks"] == 3
    assert stats["hardware"]["numpy"]


def test_bench_mask_grammar():
    outcome = dispatch(["bench-mask", "--grammar", str(fixture_path("vincristine_v2.grammar")), "--iterations", "100"])
    assert outcome.code == 0


def test_synthetic_dfa_allowed_sizes():
    dfa = synthetic_dfa(1000, 4, 30, seed=2)
    assert dfa.vocab_size == 1000
    assert all(len(dfa.allowed(q)) == 30 for q in range(4))


def test_bench_function_seeded():
    a = bench_mask(200, 50, seed=3, allowed=10)
    b = bench_mask(200, 50, seed=3, allowed=10)
    assert a["dfa_states"] == b["dfa_states"] and a["oracle_mismatches"] == 0


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["compile"], ["bench-mask", "--vocab", "0"]])
def test_usage_errors(argv):
    assert dispatch(argv).code == 2


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "rtgov", "explore", "--versions", "1", "--actions", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "violations        0" in proc.stdout

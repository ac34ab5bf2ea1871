"""Scenario documents for the discrete-event simulator.

A scenario is a JSON object. Every key is optional except ``name``;
defaults come from the workload preset named by ``workload``.

```
{
  "name": "w5-partition",
  "workload": "W5",                  # W1..W5 or "mixed"
  "seed": 7,
  "nodes": 3,
  "duration_ms": 240000,
  "epoch_ttl_ms": 60000,
  "attest_latency_ms": 200,
  "refresh_margin_ms": 1000,         # re-attest this long before expiry
  "retry_ms": 1000,                  # attestation retry while unreachable
  "fleet": {"instances": 5000, "recommendations_per_hour": 100,
            "actions_per_hour": 3600, "legacy_latency_days": 14},
  "network": {"delay_ms": [5, 50],
              "partitions": [{"nodes": ["n1"], "start_ms": 60000, "end_ms": 150000}]},
  "mix": {"safe": 0.8, "unsafe": 0.15, "escalate": 0.05},
  "update_mode": "boundary",         # or "epoch"
  "generation": "propose",           # or "masked" (token-level decoding)
  "adversarial": false,
  "per_token_audit": true,
  "policy_script": [{"at_ms": 0, "grammar": "vincristine_v1"},
                    {"at_ms": 90000, "grammar": "vincristine_v2"}],
  "resets": [{"at_ms": 30000, "node": "n0", "authorized": true}]
}
```

``grammar`` names a bundled grammar, a file path (relative to the scenario
file), or is replaced by an inline ``source`` string.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from rtgov.resources import bundled_grammar_source, fixture_path

WORKLOADS = ("W1", "W2", "W3", "W4", "W5", "mixed")

_BASE: dict[str, Any] = {
    "seed": 0,
    "nodes": 3,
    "duration_ms": 120_000,
    "epoch_ttl_ms": 60_000,
    "attest_latency_ms": 200,
    "refresh_margin_ms": 1_000,
    "retry_ms": 1_000,
    "fleet": {"instances": 5000, "recommendations_per_hour": 100, "actions_per_hour": 3600, "legacy_latency_days": 14},
    "network": {"delay_ms": [5, 50], "partitions": []},
    "mix": {"safe": 0.8, "unsafe": 0.15, "escalate": 0.05},
    "update_mode": "boundary",
    "generation": "propose",
    "adversarial": False,
    "per_token_audit": True,
    "policy_script": [{"at_ms": 0, "grammar": "vincristine_v1"}],
    "resets": [],
}

PRESETS: dict[str, dict[str, Any]] = {
    "W1": {"mix": {"safe": 1.0, "unsafe": 0.0, "escalate": 0.0}},
    "W2": {"mix": {"safe": 0.2, "unsafe": 0.8, "escalate": 0.0}, "generation": "masked", "adversarial": True,
           "policy_script": [{"at_ms": 0, "grammar": "vincristine_v2"}]},
    "W3": {"mix": {"safe": 0.3, "unsafe": 0.0, "escalate": 0.7}},
    "W4": {"duration_ms": 150_000,
           "policy_script": [{"at_ms": 0, "grammar": "vincristine_v1"}, {"at_ms": 90_000, "grammar": "vincristine_v2"}]},
    "W5": {"duration_ms": 240_000,
           "network": {"delay_ms": [5, 50], "partitions": [{"nodes": ["n1"], "start_ms": 60_500, "end_ms": 150_500}]}},
    "mixed": {},
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    nodes: frozenset[str]
    start_ms: int
    end_ms: int

    def isolates(self, node: str, t: int) -> bool:
        return node in self.nodes and self.start_ms <= t < self.end_ms


@dataclass(frozen=True)
class Publication:
    at_ms: int
    source: str
    label: str


@dataclass(frozen=True)
class ResetRequest:
    at_ms: int
    node: str
    authorized: bool


@dataclass(frozen=True)
class Scenario:
    name: str
    workload: str
    seed: int
    nodes: int
    duration_ms: int
    epoch_ttl_ms: int
    attest_latency_ms: int
    refresh_margin_ms: int
    retry_ms: int
    instances: int
    recommendations_per_hour: int
    actions_per_hour: float
    legacy_latency_days: int
    delay_ms: tuple[int, int]
    partitions: tuple[Partition, ...]
    mix: tuple[tuple[str, float], ...]
    update_mode: str
    generation: str
    adversarial: bool
    per_token_audit: bool
    policy_script: tuple[Publication, ...]
    resets: tuple[ResetRequest, ...]
    raw: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(f"n{i}" for i in range(self.nodes))

    def isolated(self, node: str, t: int) -> bool:
        return any(p.isolates(node, t) for p in self.partitions)

    def heal_time(self, node: str, t: int) -> int:
        """Earliest time at or after ``t`` at which ``node`` is reachable."""
        while True:
            blocking = [p.end_ms for p in self.partitions if p.isolates(node, t)]
            if not blocking:
                return t
            t = max(blocking)


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _nonneg(name: str, value) -> None:
    if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
        raise ScenarioError(f"{name} must be a non-negative number, got {value!r}")


def _grammar_source(entry: Mapping, base_dir: Path | None) -> tuple[str, str]:
    if "source" in entry:
        return entry["source"], entry.get("grammar", "inline")
    name = entry.get("grammar")
    if not isinstance(name, str):
        raise ScenarioError("policy_script entries need a grammar name or an inline source")
    if fixture_path(f"{name}.grammar").exists():
        return bundled_grammar_source(name), name
    path = Path(name)
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ScenarioError(f"grammar {name!r} is neither bundled nor a readable file")
    return path.read_text(encoding="utf-8"), name


def build_scenario(doc: Mapping[str, Any], base_dir: Path | None = None) -> Scenario:
    """Validate ``doc`` against the schema and fill in preset defaults."""
    if not isinstance(doc, Mapping) or "name" not in doc:
        raise ScenarioError("scenario must be an object with a name")
    workload = doc.get("workload", "mixed")
    if workload not in WORKLOADS:
        raise ScenarioError(f"unknown workload {workload!r}; expected one of {', '.join(WORKLOADS)}")
    known = set(_BASE) | {"name", "workload", "description"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
    d = _merge(_merge(_BASE, PRESETS[workload]), doc)

    for key in ("seed", "duration_ms", "epoch_ttl_ms", "attest_latency_ms", "refresh_margin_ms", "retry_ms"):
        _nonneg(key, d[key])
    if not isinstance(d["nodes"], int) or d["nodes"] < 1:
        raise ScenarioError("nodes must be a positive integer")
    if d["epoch_ttl_ms"] <= 0 or d["retry_ms"] <= 0:
        raise ScenarioError("epoch_ttl_ms and retry_ms must be positive")
    if d["refresh_margin_ms"] >= d["epoch_ttl_ms"]:
        raise ScenarioError("refresh_margin_ms must be shorter than the epoch")
    fleet = d["fleet"]
    for key in ("instances", "recommendations_per_hour", "actions_per_hour", "legacy_latency_days"):
        _nonneg(f"fleet.{key}", fleet[key])

    delay = d["network"]["delay_ms"]
    if len(delay) != 2 or delay[0] > delay[1]:
        raise ScenarioError("network.delay_ms must be [min, max] with min <= max")
    for v in delay:
        _nonneg("network.delay_ms", v)

    node_ids = {f"n{i}" for i in range(d["nodes"])}
    partitions = []
    for p in d["network"]["partitions"]:
        nodes = frozenset(p["nodes"])
        if not nodes <= node_ids:
            raise ScenarioError(f"partition names unknown nodes: {sorted(nodes - node_ids)}")
        _nonneg("partition start_ms", p["start_ms"])
        if not p["start_ms"] <= p["end_ms"] <= d["duration_ms"]:
            raise ScenarioError("partition interval must lie within the run duration")
        partitions.append(Partition(nodes, int(p["start_ms"]), int(p["end_ms"])))

    mix = d["mix"]
    if set(mix) - {"safe", "unsafe", "escalate"}:
        raise ScenarioError("mix keys are safe, unsafe and escalate")
    for k, v in mix.items():
        _nonneg(f"mix.{k}", v)
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ScenarioError("mix fractions must sum to 1")

    if d["update_mode"] not in ("boundary", "epoch"):
        raise ScenarioError("update_mode must be 'boundary' or 'epoch'")
    if d["generation"] not in ("propose", "masked"):
        raise ScenarioError("generation must be 'propose' or 'masked'")

    script = []
    for entry in d["policy_script"]:
        _nonneg("policy_script at_ms", entry.get("at_ms", -1))
        if entry["at_ms"] > d["duration_ms"]:
            raise ScenarioError("policy publication scheduled after the run ends")
        source, label = _grammar_source(entry, base_dir)
        script.append(Publication(int(entry["at_ms"]), source, label))

    resets = []
    for r in d["resets"]:
        _nonneg("reset at_ms", r.get("at_ms", -1))
        if r["node"] not in node_ids:
            raise ScenarioError(f"reset targets unknown node {r['node']!r}")
        resets.append(ResetRequest(int(r["at_ms"]), r["node"], bool(r.get("authorized", True))))

    return Scenario(
        name=str(d["name"]),
        workload=workload,
        seed=int(d["seed"]),
        nodes=d["nodes"],
        duration_ms=int(d["duration_ms"]),
        epoch_ttl_ms=int(d["epoch_ttl_ms"]),
        attest_latency_ms=int(d["attest_latency_ms"]),
        refresh_margin_ms=int(d["refresh_margin_ms"]),
        retry_ms=int(d["retry_ms"]),
        instances=int(fleet["instances"]),
        recommendations_per_hour=int(fleet["recommendations_per_hour"]),
        actions_per_hour=float(fleet["actions_per_hour"]),
        legacy_latency_days=int(fleet["legacy_latency_days"]),
        delay_ms=(int(delay[0]), int(delay[1])),
        partitions=tuple(partitions),
        mix=tuple(sorted(mix.items())),
        update_mode=d["update_mode"],
        generation=d["generation"],
        adversarial=bool(d["adversarial"]),
        per_token_audit=bool(d["per_token_audit"]),
        policy_script=tuple(sorted(script, key=lambda p: p.at_ms)),
        resets=tuple(sorted(resets, key=lambda r: r.at_ms)),
        raw=d,
    )


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return build_scenario(doc, path.parent)

from __future__ import annotations

import json
from typing import Any, Iterable

from vtpm.harness.runner import Verdict
from vtpm.harness.scenarios import expected_outcome
from vtpm.host.defense import PRESETS

SUMMARY_CONTRACT_VERSION = "1.0.0"


def defense_name(verdict: Verdict) -> str | None:
    for name, cfg in PRESETS.items():
        if cfg == verdict.defense:
            return name
    return None


def verdict_entry(verdict: Verdict) -> dict[str, Any]:
    name = defense_name(verdict)
    expected = expected_outcome(verdict.scenario, name) if name is not None else None
    return {
        "scenario": verdict.scenario,
        "defense": name or "custom",
        "defenseConfig": verdict.defense.describe(),
        "seed": verdict.seed,
        "attackSucceeded": verdict.attack_succeeded,
        "expectedSucceeded": expected,
        "matchesExpectation": None if expected is None else expected == verdict.attack_succeeded,
        "checks": dict(verdict.checks),
        "evidence": list(verdict.evidence),
    }


def report(verdicts: Iterable[Verdict], *, include_evidence: bool = True) -> dict[str, Any]:
    entries = [verdict_entry(v) for v in verdicts]
    if not include_evidence:
        for e in entries:
            e.pop("evidence")
    checked = [e for e in entries if e["matchesExpectation"] is not None]
    return {
        "summaryContractVersion": SUMMARY_CONTRACT_VERSION,
        "verdicts": entries,
        "totals": {
            "scenarios": len(entries),
            "attacksSucceeded": sum(1 for e in entries if e["attackSucceeded"]),
            "attacksDefended": sum(1 for e in entries if not e["attackSucceeded"]),
            "unexpected": sum(1 for e in checked if not e["matchesExpectation"]),
        },
        "allAsExpected": all(e["matchesExpectation"] for e in checked),
    }


def render(summary: dict[str, Any]) -> str:
    # insertion order is the contract's field order; never sort keys
    return json.dumps(summary, indent=2, ensure_ascii=False)

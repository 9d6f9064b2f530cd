"""Attack scripts.

A scenario is an ordered list of events run against a fresh world: two users
(`victim`, `attacker`) on one simulated platform, each with a vTPM instance.
The victim seals a secret behind a password and keeps a copy in NV storage;
the attacker has the four capabilities of a malicious cloud insider: reading
source, reading files as root, swapping files, and snapshot/rollback of the
instance directory.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from vtpm.errors import HarnessError
from vtpm.host.defense import PRESETS, DefenseConfig, preset

VICTIM = "victim"
ATTACKER = "attacker"
INSTANCE_FILES = ("nvram.bin", "enclave.bin", "binding.rec", "vm.img")


class EventKind(str, enum.Enum):
    GUESS = "guess"
    SNAPSHOT = "snapshot"
    RESTORE = "restore"
    FILE_SWAP = "file_swap"
    INTERRUPT_SYNC = "interrupt_sync"
    ADVANCE_TIME = "advance_time"
    SHIFT_HOST_CLOCK = "shift_host_clock"
    LAUNCH = "launch"
    READ_FILE = "read_file"
    FOREIGN_UNSEAL = "foreign_unseal"
    ATTEST = "attest"
    REPEAT = "repeat"


ATTEST_VARIANTS = ("honest", "patched", "replay", "forged-signature")


@dataclass(frozen=True)
class Event:
    kind: EventKind
    args: tuple[object, ...] = ()
    body: tuple[Event, ...] = ()

    # constructors keep scripts readable

    @classmethod
    def guess(cls, count: int = 1) -> Event:
        return cls(EventKind.GUESS, (count,))

    @classmethod
    def snapshot(cls, label: str) -> Event:
        return cls(EventKind.SNAPSHOT, (label,))

    @classmethod
    def restore(cls, label: str) -> Event:
        return cls(EventKind.RESTORE, (label,))

    @classmethod
    def file_swap(cls, path_a: str, path_b: str) -> Event:
        return cls(EventKind.FILE_SWAP, (path_a, path_b))

    @classmethod
    def interrupt_sync(cls) -> Event:
        return cls(EventKind.INTERRUPT_SYNC)

    @classmethod
    def advance_time(cls, ms: int) -> Event:
        return cls(EventKind.ADVANCE_TIME, (ms,))

    @classmethod
    def shift_host_clock(cls, ms: int) -> Event:
        return cls(EventKind.SHIFT_HOST_CLOCK, (ms,))

    @classmethod
    def launch(cls, instance: str) -> Event:
        return cls(EventKind.LAUNCH, (instance,))

    @classmethod
    def read_file(cls, path: str) -> Event:
        return cls(EventKind.READ_FILE, (path,))

    @classmethod
    def foreign_unseal(cls, instance: str) -> Event:
        return cls(EventKind.FOREIGN_UNSEAL, (instance,))

    @classmethod
    def attest(cls, variant: str) -> Event:
        return cls(EventKind.ATTEST, (variant,))

    @classmethod
    def repeat(cls, count: int, *body: Event) -> Event:
        return cls(EventKind.REPEAT, (count,), tuple(body))


@dataclass(frozen=True)
class Scenario:
    name: str
    events: tuple[Event, ...]
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    description: str = ""

    def with_defense(self, defense: DefenseConfig | str) -> Scenario:
        return replace(self, defense=preset(defense) if isinstance(defense, str) else defense)


def split_path(path: str) -> tuple[str, str]:
    """`<instance>/<file>` as used by file_swap and read_file."""
    instance, _, name = path.partition("/")
    if instance not in (VICTIM, ATTACKER) or name not in INSTANCE_FILES:
        raise HarnessError("ERR_BAD_SCRIPT", f"bad instance file reference {path!r}")
    return instance, name


def validate(events: tuple[Event, ...] | list[Event]) -> None:
    labels: set[str] = set()

    def walk(items: tuple[Event, ...] | list[Event]) -> None:
        for ev in items:
            kind = EventKind(ev.kind)
            if kind in (EventKind.GUESS, EventKind.ADVANCE_TIME, EventKind.REPEAT):
                if len(ev.args) != 1 or not isinstance(ev.args[0], int) or ev.args[0] < 0:
                    raise HarnessError("ERR_BAD_SCRIPT", f"{kind.value} takes one non-negative integer")
            elif kind == EventKind.SHIFT_HOST_CLOCK:
                if len(ev.args) != 1 or not isinstance(ev.args[0], int):
                    raise HarnessError("ERR_BAD_SCRIPT", "shift_host_clock takes one integer")
            elif kind == EventKind.SNAPSHOT:
                labels.add(str(ev.args[0]))
            elif kind == EventKind.RESTORE:
                if str(ev.args[0]) not in labels:
                    raise HarnessError("ERR_BAD_SCRIPT", f"restore of {ev.args[0]!r} before any snapshot")
            elif kind == EventKind.FILE_SWAP:
                split_path(str(ev.args[0]))
                split_path(str(ev.args[1]))
            elif kind == EventKind.READ_FILE:
                split_path(str(ev.args[0]))
            elif kind in (EventKind.LAUNCH, EventKind.FOREIGN_UNSEAL):
                if ev.args[0] not in (VICTIM, ATTACKER):
                    raise HarnessError("ERR_BAD_SCRIPT", f"unknown instance {ev.args[0]!r}")
            elif kind == EventKind.ATTEST:
                if ev.args[0] not in ATTEST_VARIANTS:
                    raise HarnessError("ERR_BAD_SCRIPT", f"unknown attestation variant {ev.args[0]!r}")
            if ev.body and kind != EventKind.REPEAT:
                raise HarnessError("ERR_BAD_SCRIPT", f"{kind.value} cannot carry a body")
            walk(ev.body)

    try:
        walk(events)
    except ValueError as exc:
        raise HarnessError("ERR_BAD_SCRIPT", str(exc)) from exc


# --- builtin scripts -------------------------------------------------------


def dictionary_script(cycles: int, *, failures_before_snapshot: int = 2) -> tuple[Event, ...]:
    """Guess a little, snapshot, then keep rolling back and guessing again."""
    return (
        Event.guess(failures_before_snapshot),
        Event.snapshot("pre-lockout"),
        Event.repeat(cycles, Event.restore("pre-lockout"), Event.guess(1), Event.advance_time(1)),
    )


def interruption_script(cycles: int) -> tuple[Event, ...]:
    return (
        Event.snapshot("clean"),
        Event.repeat(cycles, Event.interrupt_sync(), Event.guess(1), Event.restore("clean")),
    )


def clock_script(cycles: int, recovery_interval_ms: int) -> tuple[Event, ...]:
    return (
        Event.repeat(cycles, Event.guess(3), Event.shift_host_clock(recovery_interval_ms)),
        Event.advance_time(recovery_interval_ms + 2000),
        Event.guess(1),
    )


def builtin_scenarios(
    defense: DefenseConfig | str = "full",
    *,
    cycles: int = 12,
    recovery_interval_ms: int = 10_000,
) -> list[Scenario]:
    cfg = preset(defense) if isinstance(defense, str) else defense
    return [
        Scenario(
            "nvram-replacement",
            (
                Event.file_swap(f"{VICTIM}/nvram.bin", f"{ATTACKER}/nvram.bin"),
                Event.launch(ATTACKER),
                Event.file_swap(f"{VICTIM}/enclave.bin", f"{ATTACKER}/enclave.bin"),
                Event.launch(VICTIM),
                Event.read_file(f"{ATTACKER}/nvram.bin"),
            ),
            cfg,
            "Swap NVRAM files between two users' instances and boot them.",
        ),
        Scenario(
            "cross-enclave-access",
            (Event.foreign_unseal(VICTIM), Event.read_file(f"{VICTIM}/nvram.bin")),
            cfg,
            "The attacker's own enclave on the same platform opens the victim's NVRAM.",
        ),
        Scenario(
            "forged-attestation",
            (
                Event.attest("honest"),
                Event.attest("patched"),
                Event.attest("replay"),
                Event.attest("forged-signature"),
            ),
            cfg,
            "Obtain an EK certificate for a patched vTPM, a replayed quote, or a forged quote.",
        ),
        Scenario(
            "dictionary-rollback",
            dictionary_script(cycles),
            cfg,
            "Snapshot before lockout and roll back after every wrong password.",
        ),
        Scenario(
            "sync-interruption",
            interruption_script(cycles),
            cfg,
            "Kill the software ledger synchronization, then roll back.",
        ),
        Scenario(
            "clock-manipulation",
            clock_script(max(1, cycles // 3), recovery_interval_ms),
            cfg,
            "Move the host clock past the lockout deadline.",
        ),
    ]


SCENARIO_NAMES = tuple(s.name for s in builtin_scenarios())


def find_scenario(name: str, defense: DefenseConfig | str = "full") -> Scenario:
    for s in builtin_scenarios(defense):
        if s.name == name:
            return s
    raise HarnessError("ERR_BAD_SCRIPT", f"unknown scenario {name!r}; expected one of {list(SCENARIO_NAMES)}")


# which presets are expected to let each attack through
_SUCCEEDS_UNDER: dict[str, frozenset[str]] = {
    "nvram-replacement": frozenset({"off"}),
    "cross-enclave-access": frozenset({"off"}),
    "forged-attestation": frozenset({"off"}),
    "dictionary-rollback": frozenset({"off"}),
    "sync-interruption": frozenset({"off", "software"}),
    "clock-manipulation": frozenset({"off"}),
}


def expected_outcome(scenario: str, defense: str) -> bool:
    """True when the attack is expected to succeed under the named preset."""
    if scenario not in _SUCCEEDS_UNDER:
        raise HarnessError("ERR_BAD_SCRIPT", f"unknown scenario {scenario!r}")
    if defense not in PRESETS:
        raise HarnessError("ERR_BAD_DEFENSE", f"unknown defense preset {defense!r}")
    return defense in _SUCCEEDS_UNDER[scenario]

from __future__ import annotations

from dataclasses import dataclass

from vtpm.errors import HarnessError
from vtpm.protection.rollback import RollbackMechanism


@dataclass(frozen=True)
class DefenseConfig:
    nvram_binding: bool = True
    rollback: RollbackMechanism = RollbackMechanism.COUNTER
    trusted_clock: bool = True
    attestation: bool = True

    def describe(self) -> dict[str, object]:
        return {
            "nvramBinding": self.nvram_binding,
            "rollback": self.rollback.value,
            "trustedClock": self.trusted_clock,
            "attestation": self.attestation,
        }

    @classmethod
    def from_description(cls, described: dict[str, object]) -> DefenseConfig:
        """Inverse of `describe`, as stored in instance.json."""
        try:
            return cls(
                nvram_binding=bool(described["nvramBinding"]),
                rollback=RollbackMechanism(described["rollback"]),
                trusted_clock=bool(described["trustedClock"]),
                attestation=bool(described["attestation"]),
            )
        except (KeyError, ValueError) as exc:
            raise HarnessError("ERR_BAD_DEFENSE", f"unreadable defense description: {exc}") from exc


PRESETS: dict[str, DefenseConfig] = {
    "off": DefenseConfig(nvram_binding=False, rollback=RollbackMechanism.OFF, trusted_clock=False, attestation=False),
    "software": DefenseConfig(rollback=RollbackMechanism.SOFTWARE),
    "full": DefenseConfig(),
}


def preset(name: str) -> DefenseConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise HarnessError("ERR_BAD_DEFENSE", f"unknown defense preset {name!r}; expected one of {sorted(PRESETS)}") from None

"""Settings: optional YAML file, then environment overrides.

Example file (`vtpm-lab.example.yaml` at the repo root):

    rollback:
      mechanism: counter
    clock:
      tick_rate_hz: 1000
      correction_interval_ms: 1000
    tpm:
      max_tries: 3
      recovery_interval_ms: 10000
      rsa_bits: 2048
      test_mode: false
    pca:
      allowlist: []
      validity_ms: 86400000
    platform:
      dir: null
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from vtpm.errors import WorkspaceError
from vtpm.host.instance import InstanceSettings
from vtpm.protection.attestation import DEFAULT_VALIDITY_MS
from vtpm.protection.rollback import RollbackMechanism


DEFAULT_ROOT = Path(".vtpm-lab")

# First set variable wins; VTPM_LAB_SEED is the project-prefixed alias.
SEED_ENV_VARS = ("SVTPM_SIM_SEED", "VTPM_LAB_SEED")


def seed_from_env() -> str | None:
    for var in SEED_ENV_VARS:
        value = os.getenv(var)
        if value:
            return value
    return None


@dataclass(frozen=True)
class Settings:
    root: Path = DEFAULT_ROOT
    rollback: RollbackMechanism = RollbackMechanism.COUNTER
    tick_rate_hz: int = 1000
    correction_interval_ms: int = 1000
    max_tries: int = 3
    recovery_interval_ms: int = 10_000
    rsa_bits: int = 2048
    test_mode: bool = False
    pca_allowlist: tuple[str, ...] = ()
    pca_validity_ms: int = DEFAULT_VALIDITY_MS
    platform_dir: Path | None = None
    seed: str | None = None
    log_level: str = "WARNING"

    def instance_settings(self) -> InstanceSettings:
        return InstanceSettings(
            max_tries=self.max_tries,
            recovery_interval_ms=self.recovery_interval_ms,
            rsa_bits=self.rsa_bits,
            test_mode=self.test_mode,
            tick_rate_hz=self.tick_rate_hz,
            correction_interval_ms=self.correction_interval_ms,
        )

    @property
    def resolved_platform_dir(self) -> Path:
        return self.platform_dir if self.platform_dir is not None else self.root / "platform"


def _section(data: dict[str, Any], name: str) -> dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise WorkspaceError("ERR_BAD_CONFIG", f"config section {name!r} must be a mapping")
    return value


def load_settings(path: Path | str | None = None, *, root: Path | str | None = None) -> Settings:
    config_path = path or os.getenv("VTPM_LAB_CONFIG")
    data: dict[str, Any] = {}
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise WorkspaceError("ERR_BAD_CONFIG", f"cannot read config {config_path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise WorkspaceError("ERR_BAD_CONFIG", "config file must contain a mapping")
        data = loaded or {}

    rollback = _section(data, "rollback")
    clock = _section(data, "clock")
    tpm = _section(data, "tpm")
    pca = _section(data, "pca")
    platform = _section(data, "platform")

    try:
        settings = Settings(
            root=Path(root or os.getenv("VTPM_LAB_ROOT") or DEFAULT_ROOT),
            rollback=RollbackMechanism(rollback.get("mechanism", RollbackMechanism.COUNTER.value)),
            tick_rate_hz=int(clock.get("tick_rate_hz", 1000)),
            correction_interval_ms=int(clock.get("correction_interval_ms", 1000)),
            max_tries=int(tpm.get("max_tries", 3)),
            recovery_interval_ms=int(tpm.get("recovery_interval_ms", 10_000)),
            rsa_bits=int(tpm.get("rsa_bits", 2048)),
            test_mode=bool(tpm.get("test_mode", False)),
            pca_allowlist=tuple(str(v) for v in pca.get("allowlist") or ()),
            pca_validity_ms=int(pca.get("validity_ms", DEFAULT_VALIDITY_MS)),
            platform_dir=Path(platform["dir"]) if platform.get("dir") else None,
            seed=seed_from_env(),
            log_level=os.getenv("VTPM_LAB_LOG_LEVEL", "WARNING").upper(),
        )
    except (TypeError, ValueError) as exc:
        raise WorkspaceError("ERR_BAD_CONFIG", f"invalid config value: {exc}") from exc

    # a deterministic seed implies test mode
    if settings.seed is not None and not settings.test_mode:
        settings = replace(settings, test_mode=True)
    return settings

from __future__ import annotations

import contextlib
import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Iterator

from vtpm.core.rng import DeterministicRng, Rng, SystemRng
from vtpm.enclave.identity import UserKey
from vtpm.enclave.platform import Platform
from vtpm.enclave.timebase import SystemTime
from vtpm.host.defense import DefenseConfig
from vtpm.host.instance import InstanceSettings, VtpmInstance, make_clock, start_ticker
from vtpm.host.workspace import Workspace
from vtpm.protection.nvram import CloudRegistry

from vtpm_lab.config import Settings


logger = logging.getLogger("vtpm-lab")


@dataclass
class Runtime:
    """Everything one CLI invocation needs, opened over a `--root` workspace.

    Platform time comes from the host monotonic clock with a persisted epoch,
    so lockout deadlines recorded by one process still hold in the next. A
    reboot restarts that clock and therefore opens a new epoch.
    """

    settings: Settings
    workspace: Workspace
    platform: Platform
    registry: CloudRegistry

    @classmethod
    def open(cls, settings: Settings) -> Runtime:
        workspace = Workspace(settings.root, platform_dir=settings.platform_dir).ensure()
        platform = Platform(
            workspace.platform_dir,
            time_source=SystemTime(),
            seed=_labelled(settings.seed, "platform"),
            persist_epoch=True,
        )
        registry = CloudRegistry(workspace.registry_dir)
        return cls(settings=settings, workspace=workspace, platform=platform, registry=registry)

    def rng(self, label: str) -> Rng:
        seed = _labelled(self.settings.seed, label)
        return SystemRng() if seed is None else DeterministicRng(seed)

    def defense(self) -> DefenseConfig:
        return DefenseConfig(rollback=self.settings.rollback)

    def instance_defense(self, name: str) -> DefenseConfig:
        meta = self.workspace.read_meta(name)
        return DefenseConfig.from_description(dict(meta["defense"]))  # type: ignore[arg-type]

    def instance_settings(self, name: str | None = None) -> InstanceSettings:
        base = self.settings.instance_settings()
        if name is None:
            return base
        meta = self.workspace.read_meta(name)
        return replace(base, rsa_bits=int(meta.get("rsaBits", base.rsa_bits)))  # type: ignore[arg-type]

    # users

    def provision_user(self, name: str) -> UserKey:
        seed = _labelled(self.settings.seed, f"user/{name}")
        return self.workspace.create_user(name, seed=seed.encode("utf-8") if seed is not None else None)

    # instances

    def create_instance(self, name: str, user: str, *, vm_image: bytes | None = None) -> VtpmInstance:
        defense = self.defense()
        settings = self.settings.instance_settings()
        image = vm_image if vm_image is not None else default_vm_image(name)
        return VtpmInstance.create(
            self.workspace,
            name,
            user,
            platform=self.platform,
            defense=defense,
            vm_image=image,
            clock=make_clock(self.platform, defense, settings),
            registry=self.registry,
            settings=settings,
            rng=self.rng(f"instance/{name}"),
        )

    @contextlib.contextmanager
    def running(self, name: str) -> Iterator[VtpmInstance]:
        """Launch an instance with its clock ticker for the duration of the block."""
        defense = self.instance_defense(name)
        settings = self.instance_settings(name)
        clock = make_clock(self.platform, defense, settings)
        ticker = start_ticker(clock)
        try:
            yield VtpmInstance.launch(
                self.workspace,
                name,
                platform=self.platform,
                defense=defense,
                clock=clock,
                registry=self.registry,
                settings=settings,
                rng=self.rng(f"instance/{name}"),
            )
        finally:
            if ticker is not None:
                ticker.stop()


def default_vm_image(name: str) -> bytes:
    """Stand-in guest disk: a fixed header plus the instance name."""
    return b"VTPM-LAB-VM-IMAGE\x00" + hashlib.sha256(name.encode("utf-8")).digest()


def _labelled(seed: str | None, label: str) -> str | None:
    return None if seed is None else f"{seed}/{label}"

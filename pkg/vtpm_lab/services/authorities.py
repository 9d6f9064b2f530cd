"""The trusted third parties this process serves: Privacy CA and cloud registry.

Built once per process from Settings. The PCA keeps its outstanding challenges
in memory, so a challenge is only redeemable against the process that issued it.
"""
from __future__ import annotations

import hashlib
import logging
import os
import threading
from dataclasses import dataclass

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from vtpm.enclave.identity import vtpm_code_blob
from vtpm.enclave.platform import Platform
from vtpm.enclave.timebase import SystemTime, WallTime
from vtpm.errors import WorkspaceError
from vtpm.host.workspace import Workspace
from vtpm.protection.attestation import PcaPolicy, PrivacyCa, VerificationService
from vtpm.protection.nvram import CloudRegistry

from vtpm_lab.config import Settings, load_settings


logger = logging.getLogger("vtpm-lab")

PCA_KEY_FILE = "pca.key"


def shipped_mrenclave() -> bytes:
    return hashlib.sha256(vtpm_code_blob()).digest()


def pca_policy(settings: Settings) -> PcaPolicy:
    """Configured allowlist, or the measurement of the vTPM code in this tree when none is configured."""
    if settings.pca_allowlist:
        try:
            return PcaPolicy.from_hex(list(settings.pca_allowlist))
        except ValueError as exc:
            raise WorkspaceError("ERR_BAD_CONFIG", f"pca.allowlist holds a non-hex entry: {exc}") from exc
    return PcaPolicy(frozenset({shipped_mrenclave()}))


def _signing_key(workspace: Workspace, settings: Settings) -> Ed25519PrivateKey:
    if settings.seed is not None:
        return Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"vtpm-lab-pca-key" + settings.seed.encode("utf-8")).digest())
    path = workspace.pca_dir / PCA_KEY_FILE
    if path.exists():
        return Ed25519PrivateKey.from_private_bytes(path.read_bytes())
    raw = os.urandom(32)
    path.write_bytes(raw)
    logger.info("[pca/provision] created %s", path)
    return Ed25519PrivateKey.from_private_bytes(raw)


def build_pca(settings: Settings, workspace: Workspace, platform: Platform) -> PrivacyCa:
    return PrivacyCa(
        _signing_key(workspace, settings),
        pca_policy(settings),
        VerificationService(platform.group_public),
        clock=WallTime().monotonic_ms,
        validity_ms=settings.pca_validity_ms,
    )


@dataclass
class Authorities:
    settings: Settings
    pca: PrivacyCa
    registry: CloudRegistry

    @classmethod
    def build(cls, settings: Settings) -> Authorities:
        workspace = Workspace(settings.root, platform_dir=settings.platform_dir).ensure()
        platform = Platform(workspace.platform_dir, time_source=SystemTime(), persist_epoch=True)
        return cls(
            settings=settings,
            pca=build_pca(settings, workspace, platform),
            registry=CloudRegistry(workspace.registry_dir),
        )


_lock = threading.Lock()
_current: Authorities | None = None


def get_authorities() -> Authorities:
    global _current
    with _lock:
        if _current is None:
            _current = Authorities.build(load_settings())
            logger.info("[authorities/build] root=%s", _current.settings.root)
        return _current


def set_authorities(authorities: Authorities | None) -> None:
    """Install (or clear, with None) the process-wide instance; used by `serve` and tests."""
    global _current
    with _lock:
        _current = authorities

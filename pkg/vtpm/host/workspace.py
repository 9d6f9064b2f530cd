"""On-disk layout of a simulator workspace.

    <root>/platform/              platform secret, group key, counters (outside rollback space)
    <root>/ledger/<instance>.ledger   software global failed-tries count (outside rollback space)
    <root>/registry/              cloud registry and channel key
    <root>/pca/pca.key            Privacy CA signing key
    <root>/users/<user>/          user.key, user.pub
    <root>/instances/<instance>/  nvram.bin, enclave.bin, binding.rec, vm.img, instance.json
    <root>/snapshots/<instance>/<label>/   copies of an instance directory

Only `instances/<instance>/` is the rollback space: snapshot and restore never
touch anything else.
"""
from __future__ import annotations

import json
import logging
import re
import shutil
from dataclasses import dataclass
from pathlib import Path

from vtpm.enclave.identity import UserKey
from vtpm.errors import WorkspaceError


logger = logging.getLogger("vtpm-lab")

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$")


def check_name(kind: str, name: str) -> str:
    if not _NAME_RE.match(name):
        raise WorkspaceError("ERR_BAD_NAME", f"invalid {kind} name {name!r}")
    return name


@dataclass(frozen=True)
class InstanceFiles:
    directory: Path

    @property
    def nvram(self) -> Path:
        return self.directory / "nvram.bin"

    @property
    def enclave(self) -> Path:
        return self.directory / "enclave.bin"

    @property
    def binding(self) -> Path:
        return self.directory / "binding.rec"

    @property
    def vm_image(self) -> Path:
        return self.directory / "vm.img"

    @property
    def meta(self) -> Path:
        return self.directory / "instance.json"


class Workspace:
    def __init__(self, root: Path, *, platform_dir: Path | None = None) -> None:
        self.root = Path(root)
        self.platform_dir = Path(platform_dir) if platform_dir is not None else self.root / "platform"
        self.ledger_dir = self.root / "ledger"
        self.registry_dir = self.root / "registry"
        self.pca_dir = self.root / "pca"
        self.users_dir = self.root / "users"
        self.instances_dir = self.root / "instances"
        self.snapshots_dir = self.root / "snapshots"

    def ensure(self) -> Workspace:
        for d in (self.platform_dir, self.ledger_dir, self.registry_dir, self.pca_dir, self.users_dir, self.instances_dir, self.snapshots_dir):
            d.mkdir(parents=True, exist_ok=True)
        return self

    # users

    def create_user(self, name: str, *, seed: bytes | None = None) -> UserKey:
        d = self.users_dir / check_name("user", name)
        if (d / "user.key").exists():
            raise WorkspaceError("ERR_EXISTS", f"user {name!r} already provisioned")
        d.mkdir(parents=True, exist_ok=True)
        key = UserKey.generate(seed)
        (d / "user.key").write_bytes(key.private_bytes())
        (d / "user.pub").write_bytes(key.public_raw)
        logger.info("[workspace/user] provisioned user=%s", name)
        return key

    def load_user(self, name: str) -> UserKey:
        path = self.users_dir / check_name("user", name) / "user.key"
        if not path.exists():
            raise WorkspaceError("ERR_NO_SUCH_USER", f"user {name!r} is not provisioned")
        return UserKey.from_private_bytes(path.read_bytes())

    def user_public(self, name: str) -> bytes:
        path = self.users_dir / check_name("user", name) / "user.pub"
        if not path.exists():
            raise WorkspaceError("ERR_NO_SUCH_USER", f"user {name!r} is not provisioned")
        return path.read_bytes()

    # instances

    def instance(self, name: str) -> InstanceFiles:
        return InstanceFiles(self.instances_dir / check_name("instance", name))

    def existing_instance(self, name: str) -> InstanceFiles:
        files = self.instance(name)
        if not files.meta.exists():
            raise WorkspaceError("ERR_NO_SUCH_INSTANCE", f"instance {name!r} does not exist")
        return files

    def write_meta(self, name: str, meta: dict[str, object]) -> None:
        files = self.instance(name)
        files.directory.mkdir(parents=True, exist_ok=True)
        files.meta.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    def read_meta(self, name: str) -> dict[str, object]:
        return json.loads(self.existing_instance(name).meta.read_text(encoding="utf-8"))

    def ledger_path(self, name: str) -> Path:
        return self.ledger_dir / f"{check_name('instance', name)}.ledger"

    # rollback space

    def snapshot(self, name: str, label: str) -> Path:
        src = self.existing_instance(name).directory
        dst = self.snapshots_dir / name / check_name("snapshot", label)
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
        logger.info("[workspace/snapshot] instance=%s label=%s", name, label)
        return dst

    def restore(self, name: str, label: str) -> None:
        src = self.snapshots_dir / check_name("instance", name) / check_name("snapshot", label)
        if not src.exists():
            raise WorkspaceError("ERR_NO_SUCH_SNAPSHOT", f"no snapshot {label!r} for instance {name!r}")
        dst = self.instance(name).directory
        if dst.exists():
            shutil.rmtree(dst)
        shutil.copytree(src, dst)
        logger.info("[workspace/restore] instance=%s label=%s", name, label)

    def snapshots(self, name: str) -> list[str]:
        d = self.snapshots_dir / check_name("instance", name)
        return sorted(p.name for p in d.iterdir()) if d.exists() else []

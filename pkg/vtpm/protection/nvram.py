"""NVRAM protection: the sealed NVRAM file, the user-key binding between VM
image and enclave, boot-time verification and the remote binding check."""
from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from vtpm.enclave.identity import (
    ED25519_SIG_SIZE,
    EnclaveIdentity,
    SealPolicy,
    UserKey,
    measure,
    verify_ed25519,
)
from vtpm.enclave.platform import Platform
from vtpm.enclave.sealing import SealedBlob
from vtpm.errors import BindingError, EnclaveError, MarshalError
from vtpm.marshal import Reader, Writer

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None  # type: ignore[assignment]


logger = logging.getLogger("vtpm-lab")

_IMAGE_MAGIC = b"SVNV"
NVRAM_FORMAT_VERSION = 1
_RECORD_MAGIC = b"SVBR"
BINDING_RECORD_VERSION = 1

# sealing policy for NVRAM is fixed: the user's own enclaves may read it after upgrades
NVRAM_SEAL_POLICY = SealPolicy.BY_SIGNER


@dataclass(frozen=True)
class NvramImage:
    tpm_state: bytes
    rollback_ledger_ref: bytes = b""
    format_version: int = NVRAM_FORMAT_VERSION

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .raw(_IMAGE_MAGIC)
            .u16(self.format_version)
            .sized16(self.rollback_ledger_ref)
            .sized32(self.tpm_state)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> NvramImage:
        try:
            r = Reader(data)
            r.expect_magic(_IMAGE_MAGIC)
            version = r.u16()
            if version != NVRAM_FORMAT_VERSION:
                raise EnclaveError("ERR_CORRUPT", f"unsupported NVRAM format version {version}")
            ref, state = r.sized16(), r.sized32()
            r.finish()
        except MarshalError as exc:
            raise EnclaveError("ERR_CORRUPT", f"NVRAM image: {exc.message}") from exc
        return cls(tpm_state=state, rollback_ledger_ref=ref, format_version=version)


def store_nvram(platform: Platform, identity: EnclaveIdentity, image: NvramImage) -> SealedBlob:
    return platform.seal(identity, NVRAM_SEAL_POLICY, image.to_bytes())


def load_nvram(platform: Platform, identity: EnclaveIdentity, blob: SealedBlob) -> NvramImage:
    if blob.policy != NVRAM_SEAL_POLICY:
        raise EnclaveError("ERR_POLICY_MISMATCH", "NVRAM must be sealed to the signer")
    return NvramImage.from_bytes(platform.unseal(identity, blob))


class NvramStore:
    """The NVRAM file of one instance. `sealed=False` is the unprotected baseline."""

    def __init__(self, path: Path, platform: Platform, identity: EnclaveIdentity, *, sealed: bool = True) -> None:
        self.path = Path(path)
        self.platform = platform
        self.identity = identity
        self.sealed = sealed

    def encode(self, image: NvramImage) -> bytes:
        if self.sealed:
            return store_nvram(self.platform, self.identity, image).to_bytes()
        return image.to_bytes()

    def decode(self, data: bytes) -> NvramImage:
        if self.sealed:
            return load_nvram(self.platform, self.identity, SealedBlob.from_bytes(data))
        return NvramImage.from_bytes(data)

    def store(self, image: NvramImage) -> None:
        data = self.encode(image)
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, self.path)
        logger.debug("[nvram/store] path=%s bytes=%d sealed=%s", self.path.name, len(data), self.sealed)

    def load(self) -> NvramImage:
        try:
            data = self.path.read_bytes()
        except FileNotFoundError as exc:
            raise EnclaveError("ERR_CORRUPT", f"NVRAM file {self.path} is missing") from exc
        return self.decode(data)


# --- binding ---------------------------------------------------------------


@dataclass(frozen=True)
class BindingRecord:
    vm_image_digest: bytes
    vm_image_signature: bytes
    enclave_mrsigner: bytes

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .raw(_RECORD_MAGIC)
            .u16(BINDING_RECORD_VERSION)
            .fixed(self.vm_image_digest, 32)
            .fixed(self.vm_image_signature, ED25519_SIG_SIZE)
            .fixed(self.enclave_mrsigner, 32)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> BindingRecord:
        try:
            r = Reader(data)
            r.expect_magic(_RECORD_MAGIC)
            if r.u16() != BINDING_RECORD_VERSION:
                raise BindingError("ERR_CORRUPT", "unsupported binding record version")
            record = cls(vm_image_digest=r.raw(32), vm_image_signature=r.raw(ED25519_SIG_SIZE), enclave_mrsigner=r.raw(32))
            r.finish()
        except MarshalError as exc:
            raise BindingError("ERR_CORRUPT", f"binding record: {exc.message}") from exc
        return record


def provision(user_key: UserKey, vm_image: bytes, vtpm_code_blob: bytes) -> tuple[BindingRecord, EnclaveIdentity]:
    identity = measure(vtpm_code_blob, user_key.public_raw)
    digest = hashlib.sha256(vm_image).digest()
    record = BindingRecord(
        vm_image_digest=digest,
        vm_image_signature=user_key.sign(digest),
        enclave_mrsigner=identity.mrsigner,
    )
    logger.info("[binding/provision] mrsigner=%s vm=%s", identity.mrsigner.hex()[:16], digest.hex()[:16])
    return record, identity


def verify_boot_binding(vm_image: bytes, record: BindingRecord, user_pub: bytes) -> bool:
    digest = hashlib.sha256(vm_image).digest()
    checks = (
        hmac.compare_digest(digest, record.vm_image_digest),
        hmac.compare_digest(hashlib.sha256(user_pub).digest(), record.enclave_mrsigner),
        verify_ed25519(user_pub, record.vm_image_digest, record.vm_image_signature),
    )
    if not all(checks):
        logger.warning("[binding/boot] refused digest_ok=%s signer_ok=%s signature_ok=%s", *checks)
        return False
    return True


# --- remote check ----------------------------------------------------------


class BindingVerdict(str, enum.Enum):
    OK = "OK"
    MISMATCH_ENCLAVE = "MISMATCH_ENCLAVE"
    MISMATCH_VM = "MISMATCH_VM"
    BAD_CHANNEL = "BAD_CHANNEL"


@dataclass(frozen=True)
class BindingReport:
    instance: str
    enclave_measurement: bytes
    vm_measurement: bytes
    channel_auth_tag: bytes

    def body(self) -> bytes:
        return Writer().sized16(self.instance.encode("utf-8")).raw(self.enclave_measurement).raw(self.vm_measurement).getvalue()


@dataclass(frozen=True)
class RegistryEntry:
    instance: str
    enclave_measurement: bytes
    vm_digest: bytes


def enclave_measurement(identity: EnclaveIdentity) -> bytes:
    """Both enclave registers: every user runs the same vTPM code, so MRENCLAVE alone names no instance."""
    return hashlib.sha256(b"vtpm-lab-enclave" + identity.mrenclave + identity.mrsigner).digest()


def channel_tag(channel_key: bytes, body: bytes) -> bytes:
    return hmac.new(channel_key, b"vtpm-lab-channel" + body, hashlib.sha256).digest()


def make_binding_report(instance: str, identity: EnclaveIdentity, vm_image: bytes, channel_key: bytes) -> BindingReport:
    draft = BindingReport(instance, enclave_measurement(identity), hashlib.sha256(vm_image).digest(), b"")
    return BindingReport(draft.instance, draft.enclave_measurement, draft.vm_measurement, channel_tag(channel_key, draft.body()))


def remote_binding_check(report: BindingReport, expected: RegistryEntry, channel_key: bytes) -> BindingVerdict:
    if not hmac.compare_digest(channel_tag(channel_key, report.body()), report.channel_auth_tag):
        verdict = BindingVerdict.BAD_CHANNEL
    elif not hmac.compare_digest(report.enclave_measurement, expected.enclave_measurement):
        verdict = BindingVerdict.MISMATCH_ENCLAVE
    elif not hmac.compare_digest(report.vm_measurement, expected.vm_digest):
        verdict = BindingVerdict.MISMATCH_VM
    else:
        verdict = BindingVerdict.OK
    if verdict != BindingVerdict.OK:
        logger.warning("[binding/remote] instance=%s verdict=%s", report.instance, verdict.value)
    return verdict


class CloudRegistry:
    """Trusted third party: append-only `<instance> <enclave_measurement_hex> <vm_digest_hex>` lines.

    The latest line for an instance wins.
    """

    REGISTRY_FILE = "registry.txt"
    CHANNEL_KEY_FILE = "channel.key"

    def __init__(self, directory: Path, *, channel_key: bytes | None = None) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.path = self.directory / self.REGISTRY_FILE
        self._lock = threading.Lock()
        key_path = self.directory / self.CHANNEL_KEY_FILE
        if channel_key is not None:
            key_path.write_bytes(channel_key)
        elif not key_path.exists():
            key_path.write_bytes(os.urandom(32))
        self.channel_key = key_path.read_bytes()

    def register(self, instance: str, measurement: bytes, vm_digest: bytes) -> RegistryEntry:
        if not instance or any(ch.isspace() for ch in instance):
            raise BindingError("ERR_BAD_INSTANCE", f"invalid instance name {instance!r}")
        line = f"{instance} {measurement.hex()} {vm_digest.hex()}\n"
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            if fcntl is not None:
                fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            fh.write(line)
            fh.flush()
            if fcntl is not None:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        logger.info("[registry/register] instance=%s", instance)
        return RegistryEntry(instance, measurement, vm_digest)

    def entries(self) -> list[RegistryEntry]:
        if not self.path.exists():
            return []
        out: list[RegistryEntry] = []
        for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                instance, measurement, vm_digest = parts[0], bytes.fromhex(parts[1]), bytes.fromhex(parts[2])
            except (IndexError, ValueError) as exc:
                raise BindingError("ERR_CORRUPT", f"registry line {lineno} is malformed") from exc
            out.append(RegistryEntry(instance, measurement, vm_digest))
        return out

    def lookup(self, instance: str) -> RegistryEntry:
        matches = [e for e in self.entries() if e.instance == instance]
        if not matches:
            raise BindingError("ERR_NOT_REGISTERED", f"instance {instance!r} is not in the registry")
        return matches[-1]

    def check(self, report: BindingReport) -> BindingVerdict:
        return remote_binding_check(report, self.lookup(report.instance), self.channel_key)

"""The vTPM launcher: boots one instance from its files and runs its command loop.

Boot order: launch the signed enclave, check the VM/enclave binding and the
remote registry, unseal the NVRAM, synchronize the failed-tries count with the rollback
ledger. Each check's outcome is recorded in a BootReport so the harness can
count refusals without catching exceptions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

from vtpm.core import keys
from vtpm.core.client import TpmClient
from vtpm.core.commands import CommandEnv
from vtpm.core.dispatch import dispatch_bytes, sync_epoch
from vtpm.core.lockout import ClockHandle, clamp_lockout_deadline, quarantine
from vtpm.core.rng import Rng, SystemRng
from vtpm.core.state import DEFAULT_MAX_TRIES, DEFAULT_RECOVERY_INTERVAL_MS, Hierarchy, KeyKind, TpmState, new_state
from vtpm.enclave.identity import EnclaveIdentity, SignedEnclave, launch_enclave, sign_enclave, vtpm_code_blob
from vtpm.enclave.platform import Platform
from vtpm.errors import BindingError, EnclaveError, LedgerError, MarshalError, WorkspaceError
from vtpm.host.defense import DefenseConfig
from vtpm.host.workspace import InstanceFiles, Workspace
from vtpm.protection import nvram
from vtpm.protection.nvram import BindingRecord, BindingVerdict, CloudRegistry, NvramImage, NvramStore
from vtpm.protection.clock import (
    DEFAULT_CORRECTION_INTERVAL_MS,
    DEFAULT_TICK_RATE_HZ,
    ClockTicker,
    HostClock,
    TrustedClock,
)
from vtpm.protection.rollback import RollbackGuard, RollbackMechanism, make_guard


logger = logging.getLogger("vtpm-lab")

EK_UNIQUE = b"vtpm-lab-ek"
AIK_UNIQUE = b"vtpm-lab-aik"


@dataclass(frozen=True)
class InstanceSettings:
    max_tries: int = DEFAULT_MAX_TRIES
    recovery_interval_ms: int = DEFAULT_RECOVERY_INTERVAL_MS
    rsa_bits: int = keys.DEFAULT_RSA_BITS
    test_mode: bool = False
    tick_rate_hz: int = DEFAULT_TICK_RATE_HZ
    correction_interval_ms: int = DEFAULT_CORRECTION_INTERVAL_MS


@dataclass
class BootReport:
    enclave: str = "pending"
    boot_binding: str = "skipped"
    remote_check: str = "skipped"
    nvram: str = "pending"
    identity: EnclaveIdentity | None = None
    image: NvramImage | None = None

    @property
    def booted(self) -> bool:
        return (
            self.enclave == "ok"
            and self.boot_binding in ("ok", "skipped")
            and self.remote_check in (BindingVerdict.OK.value, "skipped")
            and self.nvram == "ok"
        )

    def describe(self) -> dict[str, str]:
        return {
            "enclave": self.enclave,
            "bootBinding": self.boot_binding,
            "remoteCheck": self.remote_check,
            "nvram": self.nvram,
        }


def make_clock(platform: Platform, defense: DefenseConfig, settings: InstanceSettings) -> ClockHandle:
    """TrustedClock over platform time, or the host's own clock when that defense is off."""
    if defense.trusted_clock:
        return TrustedClock(
            platform.platform_time,
            tick_rate_hz=settings.tick_rate_hz,
            correction_interval_ms=settings.correction_interval_ms,
        )
    return HostClock(platform.time_source)


def start_ticker(clock: ClockHandle) -> ClockTicker | None:
    if not isinstance(clock, TrustedClock):
        return None
    ticker = ClockTicker(clock)
    ticker.start()
    return ticker


def boot(
    name: str,
    files: InstanceFiles,
    platform: Platform,
    defense: DefenseConfig,
    registry: CloudRegistry | None,
) -> BootReport:
    """Run every boot check over whatever files are in place."""
    report = BootReport()
    try:
        signed = SignedEnclave.from_bytes(files.enclave.read_bytes())
        identity = launch_enclave(signed)
    except (EnclaveError, FileNotFoundError) as exc:
        report.enclave = getattr(exc, "reason", "ERR_MISSING")
        return report
    report.enclave = "ok"
    report.identity = identity

    vm_image = files.vm_image.read_bytes() if files.vm_image.exists() else b""
    if defense.nvram_binding:
        try:
            record = BindingRecord.from_bytes(files.binding.read_bytes())
            ok = nvram.verify_boot_binding(vm_image, record, signed.signer_pub)
        except (BindingError, FileNotFoundError):
            ok = False
        report.boot_binding = "ok" if ok else "refused"
        if registry is not None:
            try:
                bound = nvram.make_binding_report(name, identity, vm_image, registry.channel_key)
                report.remote_check = registry.check(bound).value
            except BindingError as exc:
                report.remote_check = exc.reason

    store = NvramStore(files.nvram, platform, identity, sealed=defense.nvram_binding)
    try:
        report.image = store.load()
        report.nvram = "ok"
    except EnclaveError as exc:
        report.nvram = exc.reason
    if report.image is not None:
        try:
            TpmState.from_bytes(report.image.tpm_state)
        except MarshalError:
            report.nvram = "ERR_CORRUPT"
            report.image = None
    return report


@dataclass
class VtpmInstance:
    name: str
    workspace: Workspace
    platform: Platform
    defense: DefenseConfig
    identity: EnclaveIdentity
    guard: RollbackGuard
    store: NvramStore
    state: TpmState
    clock: ClockHandle
    env: CommandEnv
    boot_report: BootReport = field(default_factory=BootReport)
    ledger_fault: str | None = None

    # --- lifecycle ---------------------------------------------------------

    @classmethod
    def create(
        cls,
        workspace: Workspace,
        name: str,
        user: str,
        *,
        platform: Platform,
        defense: DefenseConfig,
        vm_image: bytes,
        clock: ClockHandle,
        registry: CloudRegistry | None = None,
        settings: InstanceSettings = InstanceSettings(),
        rng: Rng | None = None,
    ) -> VtpmInstance:
        files = workspace.instance(name)
        if files.meta.exists():
            raise WorkspaceError("ERR_EXISTS", f"instance {name!r} already exists")
        files.directory.mkdir(parents=True, exist_ok=True)
        rng = rng or SystemRng()
        user_key = workspace.load_user(user)

        code = vtpm_code_blob()
        signed = sign_enclave(code, user_key)
        record, identity = nvram.provision(user_key, vm_image, code)
        files.enclave.write_bytes(signed.to_bytes())
        files.binding.write_bytes(record.to_bytes())
        files.vm_image.write_bytes(vm_image)
        if registry is not None:
            registry.register(name, nvram.enclave_measurement(identity), record.vm_image_digest)

        state = new_state(
            rng,
            max_tries=settings.max_tries,
            recovery_interval_ms=settings.recovery_interval_ms,
        )
        guard = make_guard(defense.rollback, platform=platform, identity=identity, ledger_path=workspace.ledger_path(name))
        guard.provision(state)
        workspace.write_meta(
            name,
            {
                "user": user,
                "defense": defense.describe(),
                "maxTries": settings.max_tries,
                "recoveryIntervalMs": settings.recovery_interval_ms,
                "rsaBits": settings.rsa_bits,
            },
        )
        inst = cls(
            name=name,
            workspace=workspace,
            platform=platform,
            defense=defense,
            identity=identity,
            guard=guard,
            store=NvramStore(files.nvram, platform, identity, sealed=defense.nvram_binding),
            state=state,
            clock=clock,
            env=CommandEnv(clock=clock, rng=rng, guard=guard, test_mode=settings.test_mode, rsa_bits=settings.rsa_bits),
        )
        inst.persist()
        logger.info("[instance/create] instance=%s user=%s rollback=%s", name, user, defense.rollback.value)
        return inst

    @classmethod
    def launch(
        cls,
        workspace: Workspace,
        name: str,
        *,
        platform: Platform,
        defense: DefenseConfig,
        clock: ClockHandle,
        registry: CloudRegistry | None = None,
        settings: InstanceSettings = InstanceSettings(),
        rng: Rng | None = None,
    ) -> VtpmInstance:
        files = workspace.existing_instance(name)
        report = boot(name, files, platform, defense, registry)
        if report.enclave != "ok":
            raise EnclaveError(report.enclave, f"enclave of {name!r} failed to launch")
        if report.boot_binding == "refused" or report.remote_check not in (BindingVerdict.OK.value, "skipped"):
            logger.warning("[instance/boot] refused instance=%s checks=%s", name, report.describe())
            raise BindingError("ERR_BOOT_REFUSED", f"boot binding checks failed: {report.describe()}")
        if report.nvram != "ok" or report.image is None:
            raise EnclaveError(report.nvram, f"NVRAM of {name!r} could not be loaded")

        identity = report.identity
        assert identity is not None
        rng = rng or SystemRng()
        state = TpmState.from_bytes(report.image.tpm_state)
        guard = make_guard(defense.rollback, platform=platform, identity=identity, ledger_path=workspace.ledger_path(name))
        guard.adopt_ref(report.image.rollback_ledger_ref)
        inst = cls(
            name=name,
            workspace=workspace,
            platform=platform,
            defense=defense,
            identity=identity,
            guard=guard,
            store=NvramStore(files.nvram, platform, identity, sealed=defense.nvram_binding),
            state=state,
            clock=clock,
            env=CommandEnv(clock=clock, rng=rng, guard=guard, test_mode=settings.test_mode, rsa_bits=settings.rsa_bits),
            boot_report=report,
        )
        inst._synchronize()
        inst.state.startup_counter += 1
        inst.persist()
        return inst

    def _synchronize(self) -> None:
        # the enclave cannot tell whether it was rolled back, so every launch resyncs
        sync_epoch(self.state, self.clock)
        clamp_lockout_deadline(self.state, self.clock.now_ms())
        try:
            self.guard.on_restore(self.state, self.clock.now_ms())
        except LedgerError as exc:
            self.ledger_fault = exc.reason
            quarantine(self.state)
            logger.error("[instance/launch] instance=%s rollback ledger fault=%s", self.name, exc.reason)

    def reprovision(self) -> None:
        """Operator recovery from a quarantined (stale counter) vTPM."""
        self.guard.reprovision(self.state)
        self.ledger_fault = None
        self.persist()

    # --- command loop ------------------------------------------------------

    def persist(self) -> None:
        self.store.store(NvramImage(tpm_state=self.state.to_bytes(), rollback_ledger_ref=self.guard.ledger_ref()))

    def execute(self, command: bytes) -> bytes:
        before = (self.state.to_bytes(), self.guard.ledger_ref())
        response = dispatch_bytes(self.state, command, self.clock, env=self.env)
        if (self.state.to_bytes(), self.guard.ledger_ref()) != before:
            self.persist()
        return response

    @property
    def client(self) -> TpmClient:
        return TpmClient(self.execute)

    # --- attestation keys --------------------------------------------------

    def endorsement_public(self, unique: bytes = EK_UNIQUE, kind: KeyKind = KeyKind.RSA_DECRYPTION) -> bytes:
        public, _material = keys.derive_primary_material(
            self.state.eps, Hierarchy.ENDORSEMENT, kind, unique, self.env.rsa_bits
        )
        return public

    def ek_public(self) -> bytes:
        return self.endorsement_public(EK_UNIQUE, KeyKind.RSA_DECRYPTION)

    def aik_public(self) -> bytes:
        return self.endorsement_public(AIK_UNIQUE, KeyKind.RSA_SIGNING)

    @property
    def files(self) -> InstanceFiles:
        return self.workspace.instance(self.name)

    @property
    def nvram_path(self) -> Path:
        return self.files.nvram

    @property
    def rollback_mechanism(self) -> RollbackMechanism:
        return self.guard.mechanism

"""Rollback protection for the dictionary-attack counter.

Two mechanisms keep the failed-tries count from being rolled back with a VM snapshot:

  * software: a global failed-tries shadow in a sealed ledger file outside the
    rollback space, synchronized after every failure and max-merged on
    restore. The synchronization runs after the TPM has answered, so an
    attacker who can interrupt it keeps the shadow stale.
  * counter: a platform monotonic counter incremented before the TPM answers.
    Its UUID is part of the NVRAM image; recovery destroys the counter and
    creates a new one, so a snapshot older than the last recovery carries a
    UUID that no longer exists.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

from vtpm.core.lockout import rederive_lockout
from vtpm.core.state import TpmState
from vtpm.enclave.counters import CounterPolicy
from vtpm.enclave.identity import EnclaveIdentity, SealPolicy
from vtpm.enclave.platform import Platform
from vtpm.enclave.sealing import SealedBlob
from vtpm.errors import EnclaveError, LedgerError, MarshalError
from vtpm.marshal import Reader, Writer


logger = logging.getLogger("vtpm-lab")

_LEDGER_MAGIC = b"SVLG"
LEDGER_FORMAT_VERSION = 1


class RollbackMechanism(str, enum.Enum):
    OFF = "off"
    SOFTWARE = "software"
    COUNTER = "counter"


@dataclass
class RollbackLedger:
    mechanism: RollbackMechanism
    global_failed_tries: int = 0
    counter_uuid: bytes | None = None

    def __post_init__(self) -> None:
        if self.mechanism == RollbackMechanism.SOFTWARE and self.counter_uuid is not None:
            raise ValueError("software ledger carries no counter uuid")
        if self.mechanism == RollbackMechanism.COUNTER and self.global_failed_tries:
            raise ValueError("counter ledger carries no global failed-tries count")

    def to_bytes(self) -> bytes:
        w = Writer().raw(_LEDGER_MAGIC).u16(LEDGER_FORMAT_VERSION)
        w.sized16(self.mechanism.value.encode("ascii")).u32(self.global_failed_tries)
        return w.sized16(self.counter_uuid or b"").getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> RollbackLedger:
        try:
            r = Reader(data)
            r.expect_magic(_LEDGER_MAGIC)
            if r.u16() != LEDGER_FORMAT_VERSION:
                raise LedgerError("ERR_CORRUPT", "unsupported ledger version")
            mechanism = RollbackMechanism(r.sized16().decode("ascii"))
            global_failed, uuid = r.u32(), r.sized16()
            r.finish()
            return cls(mechanism=mechanism, global_failed_tries=global_failed, counter_uuid=uuid or None)
        except (MarshalError, ValueError) as exc:
            raise LedgerError("ERR_CORRUPT", f"ledger: {exc}") from exc


class LedgerFile:
    """Software ledger persisted outside the rollback space, sealed to the signer."""

    def __init__(self, path: Path, platform: Platform, identity: EnclaveIdentity) -> None:
        self.path = Path(path)
        self.platform = platform
        self.identity = identity

    def load(self) -> RollbackLedger:
        if not self.path.exists():
            return RollbackLedger(RollbackMechanism.SOFTWARE)
        try:
            blob = SealedBlob.from_bytes(self.path.read_bytes())
            return RollbackLedger.from_bytes(self.platform.unseal(self.identity, blob))
        except EnclaveError as exc:
            raise LedgerError(exc.reason, f"ledger file {self.path.name}: {exc.message}") from exc

    def save(self, ledger: RollbackLedger) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        blob = self.platform.seal(self.identity, SealPolicy.BY_SIGNER, ledger.to_bytes())
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_bytes(blob.to_bytes())
        tmp.replace(self.path)


class RollbackGuard:
    """No protection: the failed-tries count lives only in the (rollback-able) TPM state."""

    mechanism = RollbackMechanism.OFF

    def __init__(self) -> None:
        self.ledger = RollbackLedger(RollbackMechanism.OFF)

    def on_auth_failure(self, state: TpmState) -> None:
        state.lockout.failed_tries += 1

    def on_lockout_recovery(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0

    def on_restore(self, state: TpmState, now_ms: int) -> TpmState:
        return state

    def provision(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0

    def reprovision(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0
        state.lockout.lockout_until = None
        logger.warning("[rollback/reprovision] mechanism=%s", self.mechanism.value)

    def ledger_ref(self) -> bytes:
        return b""

    def adopt_ref(self, ref: bytes) -> None:
        return None

    def arm_interruption(self, count: int = 1) -> None:
        return None


class SoftwareRollbackGuard(RollbackGuard):
    mechanism = RollbackMechanism.SOFTWARE

    def __init__(self, ledger_file: LedgerFile) -> None:
        self.ledger_file = ledger_file
        self.ledger = ledger_file.load()
        self._interruptions = 0

    def arm_interruption(self, count: int = 1) -> None:
        """Test hook: drop the next `count` synchronizations, as an attacker killing the sync step would."""
        self._interruptions += count

    def _sync(self, value: int) -> None:
        if self._interruptions:
            self._interruptions -= 1
            logger.warning("[rollback/software] synchronization interrupted; global stays %d", self.ledger.global_failed_tries)
            return
        self.ledger.global_failed_tries = value
        self.ledger_file.save(self.ledger)

    def on_auth_failure(self, state: TpmState) -> None:
        state.lockout.failed_tries += 1
        self._sync(min(state.lockout.failed_tries, state.lockout.max_tries))

    def on_lockout_recovery(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0
        self.ledger.global_failed_tries = 0
        self.ledger_file.save(self.ledger)

    def on_restore(self, state: TpmState, now_ms: int) -> TpmState:
        self.ledger = self.ledger_file.load()
        before = state.lockout.failed_tries
        state.lockout.failed_tries = max(before, self.ledger.global_failed_tries)
        rederive_lockout(state, now_ms)
        if state.lockout.failed_tries != before:
            logger.warning(
                "[rollback/software] restore resynced failed_tries %d -> %d", before, state.lockout.failed_tries
            )
        return state

    def provision(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0
        self.ledger = RollbackLedger(RollbackMechanism.SOFTWARE)
        self.ledger_file.save(self.ledger)

    def reprovision(self, state: TpmState) -> None:
        super().reprovision(state)
        self.provision(state)


class CounterRollbackGuard(RollbackGuard):
    mechanism = RollbackMechanism.COUNTER

    def __init__(
        self,
        platform: Platform,
        identity: EnclaveIdentity,
        *,
        policy: CounterPolicy = CounterPolicy.SAME_SIGNER,
    ) -> None:
        self.platform = platform
        self.identity = identity
        self.policy = policy
        self.ledger = RollbackLedger(RollbackMechanism.COUNTER)

    @property
    def uuid(self) -> bytes:
        if self.ledger.counter_uuid is None:
            raise LedgerError("ERR_UNKNOWN_UUID", "no monotonic counter bound to this vTPM")
        return self.ledger.counter_uuid

    def _counter_call(self, op: str, *args: bytes) -> int:
        try:
            if op == "increment":
                return self.platform.counter_increment(self.identity, *args)
            return self.platform.counter_read(self.identity, *args)
        except EnclaveError as exc:
            raise LedgerError(exc.reason, f"counter {op}: {exc.message}") from exc

    def _create(self) -> bytes:
        try:
            uuid = self.platform.counter_create(self.identity, self.policy)
        except EnclaveError as exc:
            raise LedgerError(exc.reason, f"counter create: {exc.message}") from exc
        self.ledger.counter_uuid = uuid
        return uuid

    def on_auth_failure(self, state: TpmState) -> None:
        state.lockout.failed_tries = self._counter_call("increment", self.uuid)

    def on_lockout_recovery(self, state: TpmState) -> None:
        old = self.uuid
        try:
            self.platform.counter_destroy(self.identity, old)
        except EnclaveError as exc:
            raise LedgerError(exc.reason, f"counter destroy: {exc.message}") from exc
        new = self._create()
        state.lockout.failed_tries = 0
        logger.info("[rollback/counter] recovery reapplied counter %s -> %s", old.hex()[:8], new.hex()[:8])

    def on_restore(self, state: TpmState, now_ms: int) -> TpmState:
        value = self._counter_call("read", self.uuid)
        before = state.lockout.failed_tries
        state.lockout.failed_tries = min(value, state.lockout.max_tries)
        rederive_lockout(state, now_ms)
        if state.lockout.failed_tries != before:
            logger.warning("[rollback/counter] restore resynced failed_tries %d -> %d", before, state.lockout.failed_tries)
        return state

    def provision(self, state: TpmState) -> None:
        self._create()
        state.lockout.failed_tries = 0

    def reprovision(self, state: TpmState) -> None:
        if self.ledger.counter_uuid is not None:
            try:
                self.platform.counter_destroy(self.identity, self.ledger.counter_uuid)
            except EnclaveError as exc:
                if exc.reason != "ERR_UNKNOWN_UUID":
                    raise LedgerError(exc.reason, f"counter destroy: {exc.message}") from exc
                logger.info("[rollback/reprovision] counter %s already gone", self.ledger.counter_uuid.hex()[:16])
        super().reprovision(state)
        self.provision(state)

    def ledger_ref(self) -> bytes:
        return self.ledger.counter_uuid or b""

    def adopt_ref(self, ref: bytes) -> None:
        self.ledger.counter_uuid = ref or None


def make_guard(
    mechanism: RollbackMechanism | str,
    *,
    platform: Platform,
    identity: EnclaveIdentity,
    ledger_path: Path,
) -> RollbackGuard:
    mechanism = RollbackMechanism(mechanism)
    if mechanism == RollbackMechanism.SOFTWARE:
        return SoftwareRollbackGuard(LedgerFile(ledger_path, platform, identity))
    if mechanism == RollbackMechanism.COUNTER:
        return CounterRollbackGuard(platform, identity)
    return RollbackGuard()

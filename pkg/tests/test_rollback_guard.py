from __future__ import annotations

import pytest

from vtpm.core.lockout import lockout_tick, record_auth_failure
from vtpm.enclave.counters import CounterPolicy
from vtpm.enclave.identity import UserKey, measure
from vtpm.enclave.platform import Platform
from vtpm.enclave.timebase import VirtualTime
from vtpm.errors import LedgerError
from vtpm.protection.rollback import (
    CounterRollbackGuard,
    LedgerFile,
    RollbackGuard,
    RollbackLedger,
    RollbackMechanism,
    SoftwareRollbackGuard,
    make_guard,
)


@pytest.fixture
def platform(tmp_path) -> Platform:
    return Platform(tmp_path / "platform", time_source=VirtualTime(), seed="rollback-tests")


@pytest.fixture
def identity():
    return measure(b"vtpm", UserKey.generate(b"alice").public_raw)


def _fail(state, clock, guard, times: int) -> None:
    for _ in range(times):
        record_auth_failure(state, clock, guard)


def test_without_protection_a_snapshot_rolls_back_the_count(state, clock) -> None:
    guard = RollbackGuard()
    snapshot = state.clone()
    _fail(state, clock, guard, 2)
    restored = guard.on_restore(snapshot, clock.now_ms())
    assert restored.lockout.failed_tries == 0


def test_software_ledger_resyncs_restored_snapshot(tmp_path, platform, identity, state, clock) -> None:
    guard = SoftwareRollbackGuard(LedgerFile(tmp_path / "ledger.bin", platform, identity))
    guard.provision(state)
    snapshot = state.clone()
    _fail(state, clock, guard, 3)
    assert guard.ledger.global_failed_tries == 3

    # a fresh process reads the sealed ledger from disk
    fresh = SoftwareRollbackGuard(LedgerFile(tmp_path / "ledger.bin", platform, identity))
    restored = fresh.on_restore(snapshot, clock.now_ms())
    assert restored.lockout.failed_tries == 3
    assert restored.lockout.lockout_until == clock.now_ms() + restored.lockout.recovery_interval_ms


def test_interrupted_software_sync_leaves_the_shadow_stale(tmp_path, platform, identity, state, clock) -> None:
    guard = SoftwareRollbackGuard(LedgerFile(tmp_path / "ledger.bin", platform, identity))
    guard.provision(state)
    snapshot = state.clone()
    guard.arm_interruption(2)
    _fail(state, clock, guard, 2)
    assert state.lockout.failed_tries == 2
    assert guard.on_restore(snapshot, clock.now_ms()).lockout.failed_tries == 0


def test_software_recovery_clears_the_ledger(tmp_path, platform, identity, state, clock) -> None:
    guard = SoftwareRollbackGuard(LedgerFile(tmp_path / "ledger.bin", platform, identity))
    guard.provision(state)
    _fail(state, clock, guard, 3)
    clock.advance(state.lockout.recovery_interval_ms)
    lockout_tick(state, clock, guard)
    assert state.lockout.failed_tries == 0
    assert guard.ledger_file.load().global_failed_tries == 0


def test_counter_guard_survives_snapshot_restore(platform, identity, state, clock) -> None:
    guard = CounterRollbackGuard(platform, identity)
    guard.provision(state)
    snapshot = state.clone()
    _fail(state, clock, guard, 2)
    assert platform.counter_read(identity, guard.uuid) == 2

    restored = guard.on_restore(snapshot, clock.now_ms())
    assert restored.lockout.failed_tries == 2
    assert restored.lockout.lockout_until is None


def test_counter_recovery_rotates_uuid_and_orphans_old_snapshots(platform, identity, state, clock) -> None:
    guard = CounterRollbackGuard(platform, identity)
    guard.provision(state)
    old_ref = guard.ledger_ref()
    snapshot = state.clone()
    _fail(state, clock, guard, 3)

    clock.advance(state.lockout.recovery_interval_ms)
    lockout_tick(state, clock, guard)
    assert guard.ledger_ref() != old_ref
    assert platform.counter_read(identity, guard.uuid) == 0

    guard.adopt_ref(old_ref)
    with pytest.raises(LedgerError) as exc:
        guard.on_restore(snapshot, clock.now_ms())
    assert exc.value.reason == "ERR_UNKNOWN_UUID"


def test_counter_guard_without_uuid_refuses(platform, identity, state, clock) -> None:
    guard = CounterRollbackGuard(platform, identity)
    with pytest.raises(LedgerError) as exc:
        guard.on_auth_failure(state)
    assert exc.value.reason == "ERR_UNKNOWN_UUID"


def test_counter_reprovision_replaces_counter(platform, identity, state, clock) -> None:
    guard = CounterRollbackGuard(platform, identity)
    guard.provision(state)
    first = guard.uuid
    _fail(state, clock, guard, 3)
    guard.reprovision(state)
    assert guard.uuid != first
    assert state.lockout.failed_tries == 0
    assert state.lockout.lockout_until is None
    assert platform.counters.live_count() == 1


def test_counter_reprovision_tolerates_a_vanished_counter(platform, identity, state) -> None:
    guard = CounterRollbackGuard(platform, identity)
    guard.provision(state)
    stale = guard.uuid
    platform.counter_destroy(identity, stale)
    guard.reprovision(state)
    assert guard.uuid != stale
    assert platform.counters.live_count() == 1


def test_counter_reprovision_surfaces_other_counter_failures(platform, identity, state) -> None:
    owner = CounterRollbackGuard(platform, identity, policy=CounterPolicy.SAME_MEASUREMENT)
    owner.provision(state)
    updated = measure(b"vtpm v2", UserKey.generate(b"alice").public_raw)
    intruder = CounterRollbackGuard(platform, updated)
    intruder.adopt_ref(owner.ledger_ref())
    with pytest.raises(LedgerError) as exc:
        intruder.reprovision(state)
    assert exc.value.reason == "ERR_ACCESS"
    assert platform.counter_read(identity, owner.uuid) == 0


def test_tampered_ledger_file_is_corrupt(tmp_path, platform, identity) -> None:
    path = tmp_path / "ledger.bin"
    path.write_bytes(b"garbage")
    with pytest.raises(LedgerError) as exc:
        LedgerFile(path, platform, identity).load()
    assert exc.value.reason == "ERR_CORRUPT"


def test_ledger_shape_is_validated() -> None:
    with pytest.raises(ValueError):
        RollbackLedger(RollbackMechanism.SOFTWARE, counter_uuid=b"\x00" * 16)
    with pytest.raises(ValueError):
        RollbackLedger(RollbackMechanism.COUNTER, global_failed_tries=1)
    with pytest.raises(LedgerError):
        RollbackLedger.from_bytes(b"SVLG")


def test_make_guard_selects_mechanism(tmp_path, platform, identity) -> None:
    kwargs = {"platform": platform, "identity": identity, "ledger_path": tmp_path / "ledger.bin"}
    assert type(make_guard("off", **kwargs)) is RollbackGuard
    assert isinstance(make_guard("software", **kwargs), SoftwareRollbackGuard)
    assert isinstance(make_guard(RollbackMechanism.COUNTER, **kwargs), CounterRollbackGuard)
    with pytest.raises(ValueError):
        make_guard("magic", **kwargs)

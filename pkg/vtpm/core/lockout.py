"""Dictionary-attack lockout.

Auth failures go through a guard (rollback_guard implements it) so the
failure count can be mirrored outside the rollback space. Recovery resets the
count wholesale once the trusted clock passes `lockout_until`.
"""
from __future__ import annotations

import logging
from typing import Protocol

from vtpm.core.state import LOCKED_INDEFINITELY, LockoutRecord, TpmState


logger = logging.getLogger("vtpm-lab")


class ClockHandle(Protocol):
    def now_ms(self) -> int: ...


class LockoutGuard(Protocol):
    def on_auth_failure(self, state: TpmState) -> None: ...

    def on_lockout_recovery(self, state: TpmState) -> None: ...


class UnguardedLockout:
    """No rollback protection: the count lives only inside the TPM state."""

    def on_auth_failure(self, state: TpmState) -> None:
        state.lockout.failed_tries += 1

    def on_lockout_recovery(self, state: TpmState) -> None:
        state.lockout.failed_tries = 0


def record_auth_failure(state: TpmState, clock: ClockHandle, guard: LockoutGuard | None = None) -> LockoutRecord:
    (guard or UnguardedLockout()).on_auth_failure(state)
    lo = state.lockout
    lo.failed_tries = min(lo.failed_tries, lo.max_tries)
    if lo.failed_tries >= lo.max_tries and lo.lockout_until is None:
        lo.lockout_until = clock.now_ms() + lo.recovery_interval_ms
        logger.warning(
            "[lockout/engage] failed_tries=%d lockout_until=%d", lo.failed_tries, lo.lockout_until
        )
    else:
        logger.info("[lockout/failure] failed_tries=%d max_tries=%d", lo.failed_tries, lo.max_tries)
    return lo


def lockout_tick(state: TpmState, clock: ClockHandle, guard: LockoutGuard | None = None) -> LockoutRecord:
    lo = state.lockout
    if lo.lockout_until is None or lo.lockout_until == LOCKED_INDEFINITELY:
        return lo
    if clock.now_ms() >= lo.lockout_until:
        (guard or UnguardedLockout()).on_lockout_recovery(state)
        lo.failed_tries = 0
        lo.lockout_until = None
        logger.info("[lockout/recover] failed_tries reset")
    return lo


def rederive_lockout(state: TpmState, now_ms: int) -> LockoutRecord:
    """Make lockout_until consistent with a failed_tries value that was just synchronized."""
    lo = state.lockout
    lo.failed_tries = min(lo.failed_tries, lo.max_tries)
    if lo.failed_tries >= lo.max_tries:
        if lo.lockout_until is None:
            lo.lockout_until = now_ms + lo.recovery_interval_ms
    else:
        lo.lockout_until = None
    return lo


def restart_after_epoch_change(state: TpmState, now_ms: int) -> LockoutRecord:
    # timestamps from the old clock epoch are meaningless; serve the full interval again
    lo = state.lockout
    if lo.lockout_until is not None and lo.lockout_until != LOCKED_INDEFINITELY:
        lo.lockout_until = now_ms + lo.recovery_interval_ms
    return lo


def quarantine(state: TpmState) -> LockoutRecord:
    lo = state.lockout
    lo.failed_tries = lo.max_tries
    lo.lockout_until = LOCKED_INDEFINITELY
    logger.error("[lockout/quarantine] vTPM locked pending operator re-provisioning")
    return lo


def clamp_lockout_deadline(state: TpmState, now_ms: int) -> LockoutRecord:
    """A deadline more than one interval ahead belongs to another clock frame."""
    lo = state.lockout
    limit = now_ms + lo.recovery_interval_ms
    if lo.lockout_until is not None and lo.lockout_until != LOCKED_INDEFINITELY and lo.lockout_until > limit:
        lo.lockout_until = limit
    return lo

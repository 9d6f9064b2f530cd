"""Command routing: wire Command in, wire Response out.

Mutating commands run on a working copy of the state and are committed only on
success. The one exception is the lockout record after ERR_AUTH, which is
carried over so failed guesses always count.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from typing import Callable

from vtpm.core import commands, wire
from vtpm.core.commands import CommandEnv, PcrPolicy
from vtpm.core.lockout import ClockHandle, lockout_tick, quarantine, restart_after_epoch_change
from vtpm.core.state import DIGEST_SIZE, KeyKind, TpmState
from vtpm.core.wire import Command, FieldCursor, Response
from vtpm.errors import ClockError, LedgerError, MarshalError, TpmError


logger = logging.getLogger("vtpm-lab")

Handler = Callable[[FieldCursor, TpmState, CommandEnv], list[wire.Field]]


@dataclass(frozen=True)
class CommandSpec:
    name: str
    handler: Handler
    sessions: bool = False
    mutates: bool = False


# --- payload helpers -------------------------------------------------------


def encode_policy(policy: PcrPolicy | None) -> bytes:
    return b"".join(struct.pack(">B", index) + digest for index, digest in policy or ())


def decode_policy(raw: bytes) -> PcrPolicy | None:
    entry = 1 + DIGEST_SIZE
    if len(raw) % entry:
        raise TpmError("ERR_BAD_FIELDS", "policy entries are 33 bytes each")
    policy = tuple((raw[i], raw[i + 1 : i + entry]) for i in range(0, len(raw), entry))
    return policy or None


def encode_deadline(not_after_ms: int | None) -> bytes:
    return b"" if not_after_ms is None else struct.pack(">Q", not_after_ms)


def decode_deadline(raw: bytes) -> int | None:
    if not raw:
        return None
    if len(raw) != 8:
        raise TpmError("ERR_BAD_FIELDS", "deadline must be empty or 8 bytes")
    return struct.unpack(">Q", raw)[0]


# --- handlers --------------------------------------------------------------


def _pcr_read(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    if not cur.has_more():
        return list(commands.pcr_read_all(state))
    index = cur.u32()
    cur.done()
    return [commands.pcr_read(state, index)]


def _pcr_extend(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    index, digest = cur.u32(), cur.bytes_()
    cur.done()
    return [commands.pcr_extend(state, index, digest)]


def _create_primary(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    hierarchy, kind = cur.u32(), cur.u32()
    auth, key_auth, unique = cur.bytes_(), cur.bytes_(), cur.bytes_()
    cur.done()
    handle = commands.create_primary(state, hierarchy, kind, auth, env=env, key_auth=key_auth, unique=unique)
    return [handle, state.loaded_keys[handle].public_part]


def _create(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    parent, kind = cur.u32(), cur.u32()
    parent_auth, key_auth = cur.bytes_(), cur.bytes_()
    not_after = decode_deadline(cur.bytes_())
    data, policy = cur.bytes_(), decode_policy(cur.bytes_())
    cur.done()
    if kind == KeyKind.SEALED_DATA:
        handle, obj = commands.seal(
            state, parent, data, key_auth, policy, env=env, parent_auth=parent_auth, not_after_ms=not_after
        )
        return [handle, obj.public_part]
    if data or policy:
        raise TpmError("ERR_BAD_FIELDS", "sensitive data and policy apply to sealed objects only")
    handle = commands.create(state, parent, kind, parent_auth, env=env, key_auth=key_auth, not_after_ms=not_after)
    return [handle, state.loaded_keys[handle].public_part]


def _unseal(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, auth = cur.u32(), cur.bytes_()
    cur.done()
    return [commands.unseal(state, handle, auth, env=env)]


def _sign(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, auth, message = cur.u32(), cur.bytes_(), cur.bytes_()
    cur.done()
    return [commands.sign(state, handle, message, auth, env=env)]


def _verify(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, message, signature = cur.u32(), cur.bytes_(), cur.bytes_()
    cur.done()
    return [int(commands.verify(state, handle, message, signature))]


def _rsa_encrypt(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, plaintext = cur.u32(), cur.bytes_()
    cur.done()
    return [commands.rsa_encrypt(state, handle, plaintext, env=env)]


def _rsa_decrypt(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, auth, ciphertext = cur.u32(), cur.bytes_(), cur.bytes_()
    cur.done()
    return [commands.rsa_decrypt(state, handle, ciphertext, auth, env=env)]


def _encrypt_decrypt(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle, auth, decrypt, data = cur.u32(), cur.bytes_(), cur.u32(), cur.bytes_()
    cur.done()
    if decrypt:
        return [commands.aes_decrypt(state, handle, data, auth, env=env)]
    return [commands.aes_encrypt(state, handle, data, auth, env=env)]


def _nv_write(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    index, data = cur.u32(), cur.bytes_()
    cur.done()
    commands.nv_write(state, index, data)
    return []


def _nv_read(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    index = cur.u32()
    cur.done()
    return [commands.nv_read(state, index)]


def _nv_undefine(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    index = cur.u32()
    cur.done()
    commands.nv_undefine(state, index)
    return []


def _flush_context(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle = cur.u32()
    cur.done()
    commands.flush_context(state, handle)
    return []


def _get_random(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    count = cur.u32()
    cur.done()
    return [commands.get_random(count, env=env)]


def _read_clock(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    cur.done()
    return [struct.pack(">Q", commands.read_clock(env))]


def _export_key(cur: FieldCursor, state: TpmState, env: CommandEnv) -> list[wire.Field]:
    handle = cur.u32()
    cur.done()
    return [commands.export_key(state, handle, env=env)]


COMMANDS: dict[int, CommandSpec] = {
    wire.CC_PCR_READ: CommandSpec("pcr_read", _pcr_read),
    wire.CC_PCR_EXTEND: CommandSpec("pcr_extend", _pcr_extend, mutates=True),
    wire.CC_CREATE_PRIMARY: CommandSpec("create_primary", _create_primary, sessions=True, mutates=True),
    wire.CC_CREATE: CommandSpec("create", _create, sessions=True, mutates=True),
    wire.CC_UNSEAL: CommandSpec("unseal", _unseal, sessions=True),
    wire.CC_SIGN: CommandSpec("sign", _sign, sessions=True),
    wire.CC_VERIFY_SIGNATURE: CommandSpec("verify", _verify),
    wire.CC_RSA_ENCRYPT: CommandSpec("rsa_encrypt", _rsa_encrypt),
    wire.CC_RSA_DECRYPT: CommandSpec("rsa_decrypt", _rsa_decrypt, sessions=True),
    wire.CC_ENCRYPT_DECRYPT: CommandSpec("encrypt_decrypt", _encrypt_decrypt, sessions=True),
    wire.CC_NV_WRITE: CommandSpec("nv_write", _nv_write, mutates=True),
    wire.CC_NV_READ: CommandSpec("nv_read", _nv_read),
    wire.CC_NV_UNDEFINE_SPACE: CommandSpec("nv_undefine", _nv_undefine, mutates=True),
    wire.CC_FLUSH_CONTEXT: CommandSpec("flush_context", _flush_context, mutates=True),
    wire.CC_GET_RANDOM: CommandSpec("get_random", _get_random),
    wire.CC_READ_CLOCK: CommandSpec("read_clock", _read_clock),
    wire.CC_VENDOR_EXPORT_KEY: CommandSpec("export_key", _export_key),
}


# --- entry points ----------------------------------------------------------


def sync_epoch(state: TpmState, clock: ClockHandle) -> None:
    try:
        clock.now_ms()
    except ClockError:
        reanchor = getattr(clock, "reanchor", None)
        if reanchor is None:
            raise
        reanchor()
        restart_after_epoch_change(state, clock.now_ms())
        logger.warning("[dispatch/epoch] platform clock reset; lockout deadline restarted")


def dispatch(state: TpmState, cmd: Command, clock: ClockHandle, *, env: CommandEnv | None = None) -> Response:
    spec = COMMANDS.get(cmd.code)
    if spec is None:
        return wire.error_response("ERR_UNKNOWN_CODE")
    if spec.sessions != (cmd.tag == wire.TPM_ST_SESSIONS):
        return wire.error_response("ERR_BAD_TAG")

    env = replace(env, clock=clock) if env is not None else CommandEnv(clock=clock)
    work = state
    try:
        sync_epoch(state, clock)
        lockout_tick(state, clock, env.guard)
        cursor = FieldCursor.of(cmd)
        work = state.clone() if spec.mutates else state
        fields = spec.handler(cursor, work, env)
    except LedgerError as exc:
        # the failure count could not be made durable outside the rollback space
        quarantine(state)
        logger.error("[dispatch/%s] ledger failure reason=%s", spec.name, exc.reason)
        return wire.error_response(exc.reason)
    except (TpmError, MarshalError, ClockError) as exc:
        if exc.reason == "ERR_AUTH" and work is not state:
            state.lockout = work.lockout
        logger.info("[dispatch/%s] rejected reason=%s", spec.name, exc.reason)
        return wire.error_response(exc.reason)
    except Exception:
        logger.exception("[dispatch/%s] internal failure", spec.name)
        return wire.error_response("ERR_INTERNAL")

    if work is not state:
        state.assign(work)
    return wire.success(fields, tag=cmd.tag)


def dispatch_bytes(state: TpmState, data: bytes, clock: ClockHandle, *, env: CommandEnv | None = None) -> bytes:
    """Bytes in, bytes out; malformed input becomes an error response."""
    try:
        cmd = wire.decode_command(data)
    except TpmError as exc:
        return wire.encode_response(wire.error_response(exc.reason))
    return wire.encode_response(dispatch(state, cmd, clock, env=env))

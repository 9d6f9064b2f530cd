"""TPM command subset.

Each operation works directly on a TpmState. Auth-gated operations check the
lockout first and route failures through the guard in `CommandEnv`, so the
same rules apply whether a command arrives over the wire or is called from
Python.
"""
from __future__ import annotations

import hashlib
import hmac
import logging
from dataclasses import dataclass, field

from vtpm.core import keys
from vtpm.core.lockout import ClockHandle, LockoutGuard, lockout_tick, record_auth_failure
from vtpm.core.rng import Rng, SystemRng
from vtpm.core.state import (
    DIGEST_SIZE,
    Hierarchy,
    KeyKind,
    KeyObject,
    PCR_COUNT,
    TpmState,
    check_pcr_index,
)
from vtpm.errors import TpmError


logger = logging.getLogger("vtpm-lab")

MAX_RANDOM_BYTES = 1024
MAX_NV_BYTES = 2048


@dataclass
class CommandEnv:
    clock: ClockHandle
    rng: Rng = field(default_factory=SystemRng)
    guard: LockoutGuard | None = None
    test_mode: bool = False
    rsa_bits: int = keys.DEFAULT_RSA_BITS


PcrPolicy = tuple[tuple[int, bytes], ...]


# --- authorization ---------------------------------------------------------


def require_unlocked(state: TpmState, env: CommandEnv) -> None:
    lockout_tick(state, env.clock, env.guard)
    if state.lockout.is_locked(env.clock.now_ms()):
        raise TpmError("ERR_LOCKED_OUT", f"locked until {state.lockout.lockout_until}")


def check_auth(state: TpmState, env: CommandEnv, expected: bytes, provided: bytes) -> None:
    if hmac.compare_digest(expected, provided):
        return
    record_auth_failure(state, env.clock, env.guard)
    raise TpmError("ERR_AUTH", "authorization value mismatch")


def _key(state: TpmState, handle: int, *kinds: KeyKind) -> KeyObject:
    key = state.loaded_keys.get(handle)
    if key is None:
        raise TpmError("ERR_HANDLE", f"handle {handle:#010x} not loaded")
    if kinds and key.kind not in kinds:
        raise TpmError("ERR_WRONG_KEY_KIND", f"{key.kind.name} cannot be used here")
    return key


def _check_not_expired(key: KeyObject, env: CommandEnv) -> None:
    if key.not_after_ms is not None and env.clock.now_ms() >= key.not_after_ms:
        raise TpmError("ERR_EXPIRED", f"key expired at {key.not_after_ms}")


def _authorize_key(state: TpmState, env: CommandEnv, handle: int, auth: bytes, *kinds: KeyKind) -> KeyObject:
    require_unlocked(state, env)
    key = _key(state, handle, *kinds)
    check_auth(state, env, key.auth_value, auth)
    _check_not_expired(key, env)
    return key


def _authorize_parent(state: TpmState, env: CommandEnv, parent: int, parent_auth: bytes) -> None:
    if not keys.is_storage_parent(state, parent):
        raise TpmError("ERR_WRONG_KEY_KIND", f"{parent:#010x} is not a storage parent")
    if parent in {int(h) for h in Hierarchy}:
        check_auth(state, env, state.hierarchy_auth.get(parent, b""), parent_auth)
    else:
        key = _key(state, parent)
        check_auth(state, env, key.auth_value, parent_auth)
        _check_not_expired(key, env)


# --- PCRs ------------------------------------------------------------------


def pcr_extend(state: TpmState, index: int, digest: bytes) -> bytes:
    check_pcr_index(index)
    if len(digest) != DIGEST_SIZE:
        raise TpmError("ERR_BAD_SIZE", f"extend digest must be {DIGEST_SIZE} bytes")
    new = hashlib.sha256(state.pcr_bank[index] + digest).digest()
    state.pcr_bank[index] = new
    return new


def pcr_read(state: TpmState, index: int) -> bytes:
    check_pcr_index(index)
    return state.pcr_bank[index]


def pcr_read_all(state: TpmState) -> list[bytes]:
    return [state.pcr_bank[i] for i in range(PCR_COUNT)]


def _check_policy_shape(policy: PcrPolicy | None) -> None:
    for index, digest in policy or ():
        check_pcr_index(index)
        if len(digest) != DIGEST_SIZE:
            raise TpmError("ERR_BAD_SIZE", "policy digest must be 32 bytes")


def _policy_satisfied(state: TpmState, policy: PcrPolicy | None) -> bool:
    return all(hmac.compare_digest(state.pcr_bank[i], d) for i, d in policy or ())


# --- object creation -------------------------------------------------------


def create_primary(
    state: TpmState,
    hierarchy: Hierarchy | int,
    kind: KeyKind | int,
    auth: bytes,
    *,
    env: CommandEnv,
    key_auth: bytes = b"",
    unique: bytes = b"",
) -> int:
    try:
        hierarchy = Hierarchy(hierarchy)
        kind = KeyKind(kind)
    except ValueError as exc:
        raise TpmError("ERR_BAD_FIELDS", str(exc)) from exc
    require_unlocked(state, env)
    check_auth(state, env, state.hierarchy_auth.get(int(hierarchy), b""), auth)

    seed = state.seed_for(hierarchy)
    public_part, material = keys.derive_primary_material(seed, hierarchy, kind, unique, env.rsa_bits)
    handle = state.allocate_handle()
    state.loaded_keys[handle] = KeyObject(
        kind=kind,
        public_part=public_part,
        private_part=keys.wrap(seed, public_part, material, env.rng),
        parent=int(hierarchy),
        auth_value=key_auth,
    )
    logger.info("[tpm/create_primary] hierarchy=%s kind=%s handle=%#010x", hierarchy.name, kind.name, handle)
    return handle


def create(
    state: TpmState,
    parent: int,
    kind: KeyKind | int,
    parent_auth: bytes,
    *,
    env: CommandEnv,
    key_auth: bytes = b"",
    not_after_ms: int | None = None,
) -> int:
    try:
        kind = KeyKind(kind)
    except ValueError as exc:
        raise TpmError("ERR_BAD_FIELDS", str(exc)) from exc
    if kind == KeyKind.SEALED_DATA:
        raise TpmError("ERR_WRONG_KEY_KIND", "use seal for sealed data objects")
    require_unlocked(state, env)
    _authorize_parent(state, env, parent, parent_auth)

    public_part, material = keys.generate_ordinary_material(kind, env.rng, env.rsa_bits)
    secret = keys.parent_secret(state, parent)
    handle = state.allocate_handle()
    state.loaded_keys[handle] = KeyObject(
        kind=kind,
        public_part=public_part,
        private_part=keys.wrap(secret, public_part, material, env.rng),
        parent=parent,
        auth_value=key_auth,
        not_after_ms=not_after_ms,
    )
    return handle


def seal(
    state: TpmState,
    parent: int,
    payload: bytes,
    auth: bytes,
    pcr_policy: PcrPolicy | None = None,
    *,
    env: CommandEnv,
    parent_auth: bytes = b"",
    not_after_ms: int | None = None,
) -> tuple[int, KeyObject]:
    """TPM-sense seal: a data object bound to `auth` and optionally to PCR values."""
    _check_policy_shape(pcr_policy)
    if len(payload) > MAX_NV_BYTES:
        raise TpmError("ERR_PAYLOAD_TOO_LARGE", f"sealed payload limited to {MAX_NV_BYTES} bytes")
    require_unlocked(state, env)
    _authorize_parent(state, env, parent, parent_auth)

    nonce = env.rng.read(32)
    public_part = hashlib.sha256(b"vtpm-lab-sealed" + nonce).digest()
    obj = KeyObject(
        kind=KeyKind.SEALED_DATA,
        public_part=public_part,
        private_part=keys.wrap(keys.parent_secret(state, parent), public_part, payload, env.rng),
        parent=parent,
        auth_value=auth,
        pcr_policy=tuple(pcr_policy) if pcr_policy else None,
        not_after_ms=not_after_ms,
    )
    handle = state.allocate_handle()
    state.loaded_keys[handle] = obj
    return handle, obj


def unseal(state: TpmState, handle: int, auth: bytes, *, env: CommandEnv) -> bytes:
    require_unlocked(state, env)
    obj = _key(state, handle, KeyKind.SEALED_DATA)
    check_auth(state, env, obj.auth_value, auth)
    # policy mismatch is not a password guess: no failed_tries increment
    if not _policy_satisfied(state, obj.pcr_policy):
        raise TpmError("ERR_POLICY", "current PCR values do not satisfy the object's policy")
    _check_not_expired(obj, env)
    return keys.private_material(state, obj)


def flush_context(state: TpmState, handle: int) -> None:
    if state.loaded_keys.pop(handle, None) is None:
        raise TpmError("ERR_HANDLE", f"handle {handle:#010x} not loaded")


# --- asymmetric / symmetric operations -------------------------------------


def sign(state: TpmState, handle: int, message: bytes, auth: bytes, *, env: CommandEnv) -> bytes:
    key = _authorize_key(state, env, handle, auth, KeyKind.RSA_SIGNING)
    return keys.rsa_sign(keys.private_material(state, key), message, env.rng)


def verify(state: TpmState, handle: int, message: bytes, signature: bytes) -> bool:
    key = _key(state, handle, KeyKind.RSA_SIGNING)
    return keys.rsa_verify(key.public_part, message, signature)


def rsa_encrypt(state: TpmState, handle: int, plaintext: bytes, *, env: CommandEnv) -> bytes:
    key = _key(state, handle, KeyKind.RSA_DECRYPTION)
    return keys.rsa_encrypt(key.public_part, plaintext, env.rng)


def rsa_decrypt(state: TpmState, handle: int, ciphertext: bytes, auth: bytes, *, env: CommandEnv) -> bytes:
    key = _authorize_key(state, env, handle, auth, KeyKind.RSA_DECRYPTION)
    return keys.rsa_decrypt(keys.private_material(state, key), ciphertext)


def aes_encrypt(state: TpmState, handle: int, plaintext: bytes, auth: bytes, *, env: CommandEnv) -> bytes:
    key = _authorize_key(state, env, handle, auth, KeyKind.AES_SYMMETRIC)
    return keys.aes_cbc_encrypt(keys.private_material(state, key), plaintext, env.rng)


def aes_decrypt(state: TpmState, handle: int, data: bytes, auth: bytes, *, env: CommandEnv) -> bytes:
    key = _authorize_key(state, env, handle, auth, KeyKind.AES_SYMMETRIC)
    return keys.aes_cbc_decrypt(keys.private_material(state, key), data)


# --- NV --------------------------------------------------------------------


def nv_write(state: TpmState, index: int, data: bytes) -> None:
    if len(data) > MAX_NV_BYTES:
        raise TpmError("ERR_PAYLOAD_TOO_LARGE", f"NV data limited to {MAX_NV_BYTES} bytes")
    state.nv_store[index] = bytes(data)


def nv_read(state: TpmState, index: int) -> bytes:
    try:
        return state.nv_store[index]
    except KeyError:
        raise TpmError("ERR_BAD_INDEX", f"NV index {index:#010x} not defined") from None


def nv_undefine(state: TpmState, index: int) -> None:
    if state.nv_store.pop(index, None) is None:
        raise TpmError("ERR_BAD_INDEX", f"NV index {index:#010x} not defined")


# --- misc ------------------------------------------------------------------


def get_random(count: int, *, env: CommandEnv) -> bytes:
    if not 0 < count <= MAX_RANDOM_BYTES:
        raise TpmError("ERR_BAD_SIZE", f"count must be 1..{MAX_RANDOM_BYTES}")
    return env.rng.read(count)


def read_clock(env: CommandEnv) -> int:
    return env.clock.now_ms()


def export_key(state: TpmState, handle: int, *, env: CommandEnv) -> bytes:
    """Unwrapped key material for external oracle checks. Test mode only."""
    if not env.test_mode:
        raise TpmError("ERR_DISABLED", "key export requires test mode")
    key = _key(state, handle)
    return keys.private_material(state, key)

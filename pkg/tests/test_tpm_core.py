from __future__ import annotations

import hashlib

import pytest
from cryptography.hazmat.primitives import hashes, padding as sym_padding
from cryptography.hazmat.primitives.asymmetric import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.serialization import load_der_public_key

from vtpm.core import commands
from vtpm.core.client import TpmClient
from vtpm.core.commands import CommandEnv
from vtpm.core.dispatch import dispatch_bytes
from vtpm.core.rng import DeterministicRng
from vtpm.core.state import PCR_COUNT, Hierarchy, KeyKind, TpmState, new_state
from vtpm.errors import ClockError, TpmError


def _client(state: TpmState, clock, env: CommandEnv) -> TpmClient:
    return TpmClient(lambda data: dispatch_bytes(state, data, clock, env=env))


def _reason(fn, *args, **kwargs) -> str:
    with pytest.raises(TpmError) as exc:
        fn(*args, **kwargs)
    return exc.value.reason


def test_fresh_state_has_zero_pcrs(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    assert tpm.pcr_read_all() == [bytes(32)] * PCR_COUNT


def test_pcr_extend_is_a_sha256_chain(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    d1, d2 = hashlib.sha256(b"one").digest(), hashlib.sha256(b"two").digest()
    tpm.pcr_extend(7, d1)
    tpm.pcr_extend(7, d2)
    expected = hashlib.sha256(hashlib.sha256(bytes(32) + d1).digest() + d2).digest()
    assert tpm.pcr_read(7) == expected
    assert tpm.pcr_read(6) == bytes(32)


def test_pcr_bad_index_and_digest_size(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    assert _reason(tpm.pcr_extend, PCR_COUNT, bytes(32)) == "ERR_BAD_INDEX"
    assert _reason(tpm.pcr_extend, 0, b"short") == "ERR_BAD_SIZE"


def test_new_state_seeds_are_distinct() -> None:
    s = new_state(DeterministicRng(1))
    assert len({s.eps, s.sps, s.pps}) == 3


def test_state_serialization_is_stable(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    tpm.nv_write(0x01000001, b"hello")
    tpm.seal(int(Hierarchy.STORAGE), b"secret", b"pw")
    raw = state.to_bytes()
    assert TpmState.from_bytes(raw).to_bytes() == raw


def test_create_primary_is_deterministic_per_seed_and_template(clock, env) -> None:
    a = new_state(DeterministicRng("same"))
    b = new_state(DeterministicRng("same"))
    _h1, pub_a = _client(a, clock, env).create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, unique=b"x")
    _h2, pub_b = _client(b, clock, env).create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, unique=b"x")
    _h3, pub_c = _client(b, clock, env).create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, unique=b"y")
    assert pub_a == pub_b
    assert pub_c != pub_a


def test_hierarchy_auth_is_checked(state, clock, env) -> None:
    state.hierarchy_auth[int(Hierarchy.ENDORSEMENT)] = b"endorse"
    tpm = _client(state, clock, env)
    assert _reason(tpm.create_primary, Hierarchy.ENDORSEMENT, KeyKind.AES_SYMMETRIC, b"") == "ERR_AUTH"
    handle, _pub = tpm.create_primary(Hierarchy.ENDORSEMENT, KeyKind.AES_SYMMETRIC, b"endorse")
    assert handle in state.loaded_keys


def test_failed_create_primary_commits_only_the_lockout(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    before_handle = state.next_handle
    assert _reason(tpm.create_primary, Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, b"wrong") == "ERR_AUTH"
    assert state.next_handle == before_handle
    assert state.loaded_keys == {}
    assert state.lockout.failed_tries == 1


def test_rsa_sign_verifies_with_independent_library(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, public = tpm.create_primary(Hierarchy.ENDORSEMENT, KeyKind.RSA_SIGNING, unique=b"sig")
    signature = tpm.sign(handle, b"measured boot log")
    assert tpm.verify(handle, b"measured boot log", signature)
    assert not tpm.verify(handle, b"tampered boot log", signature)
    load_der_public_key(public).verify(
        signature,
        b"measured boot log",
        padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32),
        hashes.SHA256(),
    )


def test_rsa_oaep_roundtrip_with_ordinary_key(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create(int(Hierarchy.STORAGE), KeyKind.RSA_DECRYPTION, key_auth=b"k")
    ct = tpm.rsa_encrypt(handle, b"attack at dawn")
    assert tpm.rsa_decrypt(handle, ct, b"k") == b"attack at dawn"
    material = tpm.export_key(handle)
    assert material not in state.loaded_keys[handle].private_part


def test_rsa_encrypt_payload_bound(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create(int(Hierarchy.STORAGE), KeyKind.RSA_DECRYPTION)
    # 1024-bit modulus: 128 - 2*32 - 2 = 62 bytes
    assert _reason(tpm.rsa_encrypt, handle, bytes(63)) == "ERR_PAYLOAD_TOO_LARGE"


def test_aes_cbc_matches_independent_decryption(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, key_auth=b"a")
    data = tpm.aes_encrypt(handle, b"sixteen byte msg!", b"a")
    assert tpm.aes_decrypt(handle, data, b"a") == b"sixteen byte msg!"

    key = tpm.export_key(handle)
    iv, ct = data[:16], data[16:]
    decryptor = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    unpadder = sym_padding.PKCS7(128).unpadder()
    plain = unpadder.update(decryptor.update(ct) + decryptor.finalize()) + unpadder.finalize()
    assert plain == b"sixteen byte msg!"


def test_aes_decrypt_rejects_partial_blocks(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC)
    assert _reason(tpm.aes_decrypt, handle, bytes(20)) == "ERR_BAD_SIZE"


def test_wrong_key_kind(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC)
    assert _reason(tpm.sign, handle, b"m") == "ERR_WRONG_KEY_KIND"


def test_seal_unseal_with_pcr_policy(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    policy = ((0, tpm.pcr_read(0)),)
    handle = tpm.seal(int(Hierarchy.STORAGE), b"disk key", b"pw", policy)
    assert tpm.unseal(handle, b"pw") == b"disk key"

    tpm.pcr_extend(0, hashlib.sha256(b"rootkit").digest())
    assert _reason(tpm.unseal, handle, b"pw") == "ERR_POLICY"
    # a policy mismatch is not a password guess
    assert state.lockout.failed_tries == 0


def test_seal_payload_limit(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    assert _reason(tpm.seal, int(Hierarchy.STORAGE), bytes(commands.MAX_NV_BYTES + 1), b"pw") == "ERR_PAYLOAD_TOO_LARGE"


def test_dictionary_lockout_engages_and_recovers(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle = tpm.seal(int(Hierarchy.STORAGE), b"secret", b"right")
    for _ in range(3):
        assert _reason(tpm.unseal, handle, b"wrong") == "ERR_AUTH"
    assert state.lockout.lockout_until == clock.now + state.lockout.recovery_interval_ms
    assert _reason(tpm.unseal, handle, b"right") == "ERR_LOCKED_OUT"

    clock.advance(state.lockout.recovery_interval_ms - 1)
    assert _reason(tpm.unseal, handle, b"right") == "ERR_LOCKED_OUT"
    clock.advance(1)
    assert tpm.unseal(handle, b"right") == b"secret"
    assert state.lockout.failed_tries == 0
    assert state.lockout.lockout_until is None


def test_failed_tries_never_exceed_max(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle = tpm.seal(int(Hierarchy.STORAGE), b"secret", b"right")
    for _ in range(10):
        _reason(tpm.unseal, handle, b"wrong")
    assert state.lockout.failed_tries == state.lockout.max_tries


def test_time_bound_key_expires(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create(int(Hierarchy.STORAGE), KeyKind.AES_SYMMETRIC, not_after_ms=clock.now + 5)
    tpm.aes_encrypt(handle, b"ok")
    clock.advance(5)
    assert _reason(tpm.aes_encrypt, handle, b"late") == "ERR_EXPIRED"


def test_key_under_ordinary_parent(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    parent, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, key_auth=b"p")
    assert _reason(tpm.create, parent, KeyKind.AES_SYMMETRIC, b"nope") == "ERR_AUTH"
    child, _pub = tpm.create(parent, KeyKind.AES_SYMMETRIC, b"p")
    assert state.loaded_keys[child].parent == parent
    assert tpm.aes_decrypt(child, tpm.aes_encrypt(child, b"x")) == b"x"


def test_nv_and_flush(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    tpm.nv_write(0x01500000, b"counter")
    assert tpm.nv_read(0x01500000) == b"counter"
    tpm.nv_undefine(0x01500000)
    assert _reason(tpm.nv_read, 0x01500000) == "ERR_BAD_INDEX"
    assert _reason(tpm.nv_write, 1, bytes(commands.MAX_NV_BYTES + 1)) == "ERR_PAYLOAD_TOO_LARGE"

    handle, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC)
    tpm.flush(handle)
    assert _reason(tpm.aes_encrypt, handle, b"x") == "ERR_HANDLE"
    assert _reason(tpm.flush, handle) == "ERR_HANDLE"


def test_get_random_bounds_and_clock(state, clock, env) -> None:
    tpm = _client(state, clock, env)
    assert len(tpm.get_random(32)) == 32
    assert _reason(tpm.get_random, 0) == "ERR_BAD_SIZE"
    assert _reason(tpm.get_random, commands.MAX_RANDOM_BYTES + 1) == "ERR_BAD_SIZE"
    assert tpm.read_clock() == clock.now


def test_export_key_requires_test_mode(state, clock) -> None:
    env = CommandEnv(clock=clock, rng=DeterministicRng(0), test_mode=False, rsa_bits=1024)
    tpm = _client(state, clock, env)
    handle, _pub = tpm.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC)
    assert _reason(tpm.export_key, handle) == "ERR_DISABLED"


class _ResetClock:
    """Raises once as a platform clock whose epoch changed, until re-anchored."""

    def __init__(self, now: int) -> None:
        self.now = now
        self.stale = True

    def now_ms(self) -> int:
        if self.stale:
            raise ClockError("ERR_EPOCH_CHANGED", "reset")
        return self.now

    def reanchor(self) -> None:
        self.stale = False


def test_epoch_change_restarts_active_lockout(state) -> None:
    clock = _ResetClock(50_000)
    state.lockout.failed_tries = state.lockout.max_tries
    state.lockout.lockout_until = 7
    env = CommandEnv(clock=clock, rng=DeterministicRng(0))
    tpm = _client(state, clock, env)
    tpm.pcr_read(0)
    assert state.lockout.lockout_until == 50_000 + state.lockout.recovery_interval_ms

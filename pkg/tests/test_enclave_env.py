from __future__ import annotations

import dataclasses

import pytest

from vtpm.enclave.counters import CounterPolicy, CounterStore
from vtpm.enclave.identity import (
    SealPolicy,
    SignedEnclave,
    UserKey,
    launch_enclave,
    measure,
    sign_enclave,
)
from vtpm.enclave.platform import Platform
from vtpm.enclave.quoting import Quote, verify_quote
from vtpm.enclave.sealing import SealedBlob
from vtpm.enclave.timebase import VirtualTime
from vtpm.errors import EnclaveError


@pytest.fixture
def vt() -> VirtualTime:
    return VirtualTime(start_ms=5_000)


@pytest.fixture
def platform(tmp_path, vt) -> Platform:
    return Platform(tmp_path / "platform", time_source=vt, seed="enclave-tests")


def _identity(code: bytes = b"vtpm v1", user: str = "alice"):
    return measure(code, UserKey.generate(user.encode()).public_raw)


def test_signed_enclave_launches_and_rejects_tampering() -> None:
    key = UserKey.generate(b"alice")
    signed = sign_enclave(b"code", key)
    identity = launch_enclave(SignedEnclave.from_bytes(signed.to_bytes()))
    assert identity == measure(b"code", key.public_raw)

    forged = dataclasses.replace(signed, code_blob=b"evil code")
    with pytest.raises(EnclaveError) as exc:
        launch_enclave(forged)
    assert exc.value.reason == "ERR_BAD_SIGNATURE"


def test_truncated_enclave_file_is_corrupt() -> None:
    raw = sign_enclave(b"code", UserKey.generate(b"a")).to_bytes()
    with pytest.raises(EnclaveError) as exc:
        SignedEnclave.from_bytes(raw[:-1])
    assert exc.value.reason == "ERR_CORRUPT"


def test_seal_by_enclave_only_opens_for_same_measurement(platform) -> None:
    v1 = _identity(b"vtpm v1")
    v2 = _identity(b"vtpm v2")
    blob = platform.seal(v1, SealPolicy.BY_ENCLAVE, b"state")
    assert platform.unseal(v1, SealedBlob.from_bytes(blob.to_bytes())) == b"state"
    with pytest.raises(EnclaveError) as exc:
        platform.unseal(v2, blob)
    assert exc.value.reason == "ERR_POLICY_MISMATCH"


def test_seal_by_signer_survives_code_update(platform) -> None:
    v1 = _identity(b"vtpm v1")
    v2 = _identity(b"vtpm v2")
    other_signer = _identity(b"vtpm v1", user="mallory")
    blob = platform.seal(v1, SealPolicy.BY_SIGNER, b"ledger")
    assert platform.unseal(v2, blob) == b"ledger"
    with pytest.raises(EnclaveError):
        platform.unseal(other_signer, blob)


def test_tampered_sealed_blob_fails_authentication(platform) -> None:
    ident = _identity()
    blob = platform.seal(ident, SealPolicy.BY_ENCLAVE, b"state")
    flipped = bytes([blob.ciphertext[0] ^ 1]) + blob.ciphertext[1:]
    with pytest.raises(EnclaveError) as exc:
        platform.unseal(ident, dataclasses.replace(blob, ciphertext=flipped))
    assert exc.value.reason == "ERR_CORRUPT"


def test_sealed_blob_from_another_platform_is_rejected(tmp_path, platform) -> None:
    ident = _identity()
    blob = platform.seal(ident, SealPolicy.BY_ENCLAVE, b"state")
    other = Platform(tmp_path / "other", time_source=VirtualTime(), seed="elsewhere")
    with pytest.raises(EnclaveError) as exc:
        other.unseal(ident, blob)
    assert exc.value.reason == "ERR_CORRUPT"


def test_platform_secret_persists_across_instances(tmp_path, vt) -> None:
    ident = _identity()
    first = Platform(tmp_path / "p", time_source=vt, seed="persist")
    blob = first.seal(ident, SealPolicy.BY_ENCLAVE, b"x")
    second = Platform(tmp_path / "p", time_source=vt)
    assert second.unseal(ident, blob) == b"x"
    assert second.group_public == first.group_public


def test_seeded_platforms_never_reuse_a_seal_nonce(tmp_path, vt) -> None:
    ident = _identity()
    first = Platform(tmp_path / "p", time_source=vt, seed="same-seed")
    blob_one = first.seal(ident, SealPolicy.BY_SIGNER, b"state one")
    second = Platform(tmp_path / "p", time_source=vt, seed="same-seed")
    blob_two = second.seal(ident, SealPolicy.BY_SIGNER, b"state two")

    assert blob_one.nonce != blob_two.nonce
    assert blob_one.ciphertext[:6] != blob_two.ciphertext[:6]
    assert second.unseal(ident, blob_one) == b"state one"
    assert first.unseal(ident, blob_two) == b"state two"


def test_counters_are_monotonic_and_owned(platform) -> None:
    owner = _identity(b"vtpm v1")
    updated = _identity(b"vtpm v2")
    stranger = _identity(user="mallory")
    uuid = platform.counter_create(owner)
    assert platform.counter_read(owner, uuid) == 0
    assert platform.counter_increment(owner, uuid) == 1
    # SAME_SIGNER: an updated build by the same user still owns it
    assert platform.counter_increment(updated, uuid) == 2

    with pytest.raises(EnclaveError) as exc:
        platform.counter_read(stranger, uuid)
    assert exc.value.reason == "ERR_ACCESS"

    platform.counter_destroy(owner, uuid)
    with pytest.raises(EnclaveError) as exc:
        platform.counter_read(owner, uuid)
    assert exc.value.reason == "ERR_UNKNOWN_UUID"


def test_same_measurement_counter_rejects_updated_code(platform) -> None:
    owner = _identity(b"vtpm v1")
    uuid = platform.counter_create(owner, CounterPolicy.SAME_MEASUREMENT)
    with pytest.raises(EnclaveError) as exc:
        platform.counter_increment(_identity(b"vtpm v2"), uuid)
    assert exc.value.reason == "ERR_ACCESS"


def test_counter_values_persist_on_disk(tmp_path) -> None:
    ident = _identity()
    store = CounterStore(tmp_path / "counters.bin")
    uuid = store.create(ident)
    store.increment(ident, uuid)
    assert CounterStore(tmp_path / "counters.bin").read(ident, uuid) == 1


def test_counter_capacity_is_enforced(tmp_path) -> None:
    ident = _identity()
    store = CounterStore(tmp_path / "counters.bin", capacity=2)
    store.create(ident)
    store.create(ident)
    assert store.free_slots() == 0
    with pytest.raises(EnclaveError) as exc:
        store.create(ident)
    assert exc.value.reason == "ERR_NO_COUNTERS"


def test_platform_time_counts_seconds_and_resets_epoch(platform, vt) -> None:
    start = platform.platform_time()
    assert start.seconds == 0
    vt.advance(2_999)
    assert platform.platform_time() == dataclasses.replace(start, seconds=2)

    after = platform.platform_reset()
    assert after.seconds == 0
    assert after.epoch_nonce != start.epoch_nonce


def test_persisted_epoch_is_shared_between_processes(tmp_path, vt) -> None:
    a = Platform(tmp_path / "p", time_source=vt, seed="epoch", persist_epoch=True)
    vt.advance(4_000)
    b = Platform(tmp_path / "p", time_source=vt, persist_epoch=True)
    assert b.platform_time() == a.platform_time()
    assert b.platform_time().seconds == 4


class _SteppedTime:
    def __init__(self, now_ms: int) -> None:
        self.now_ms = now_ms

    def monotonic_ms(self) -> int:
        return self.now_ms


def test_backwards_time_source_opens_a_new_epoch(tmp_path) -> None:
    source = _SteppedTime(50_000)
    a = Platform(tmp_path / "p", time_source=source, seed="epoch", persist_epoch=True)
    source.now_ms += 7_000
    before = a.platform_time()
    assert before.seconds == 7

    source.now_ms -= 3_000
    after = a.platform_time()
    assert after.epoch_nonce != before.epoch_nonce
    assert after.seconds == 0


def test_reboot_is_seen_by_the_next_process(tmp_path) -> None:
    source = _SteppedTime(90_000)
    a = Platform(tmp_path / "p", time_source=source, seed="epoch", persist_epoch=True)
    source.now_ms += 2_500
    before = a.platform_time()

    # monotonic time restarts near zero after a reboot
    b = Platform(tmp_path / "p", time_source=_SteppedTime(1_000), persist_epoch=True)
    after = b.platform_time()
    assert after.epoch_nonce != before.epoch_nonce
    assert after.seconds == 0


def test_quote_verifies_under_group_key(platform) -> None:
    ident = _identity()
    q = platform.quote(ident, b"\x01" * 32)
    assert q.user_data == b"\x01" * 32 + bytes(32)
    parsed = Quote.from_bytes(q.to_bytes())
    assert verify_quote(parsed, platform.group_public)
    assert not verify_quote(dataclasses.replace(parsed, mrenclave=bytes(32)), platform.group_public)
    assert not verify_quote(parsed, b"short")


def test_quote_user_data_limit(platform) -> None:
    with pytest.raises(ValueError):
        platform.quote(_identity(), bytes(65))

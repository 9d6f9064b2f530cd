from __future__ import annotations

import hashlib
import random
import shutil
import struct
import subprocess

import pytest

import reference_interpreter as ref
from vtpm.core.commands import CommandEnv
from vtpm.core.dispatch import dispatch_bytes
from vtpm.core.rng import DeterministicRng
from vtpm.core.state import TpmState, new_state

STEPS = 40
BOGUS_HANDLE = ref.FIRST_HANDLE + 0xFFFF


def _observe(state: TpmState) -> dict[str, object]:
    return {
        "pcrs": list(state.pcr_bank),
        "nv": dict(state.nv_store),
        "lockout": (state.lockout.failed_tries, state.lockout.lockout_until),
        "nextHandle": state.next_handle,
        "keys": {
            h: (int(k.kind), k.public_part, k.private_part, k.parent, k.auth_value, k.pcr_policy, k.not_after_ms)
            for h, k in state.loaded_keys.items()
        },
    }


class _Generator:
    """Random command streams biased toward handles and auth values the model knows about."""

    def __init__(self, seed: int, model: ref.ReferenceTpm) -> None:
        self.rnd = random.Random(seed)
        self.model = model
        self.blobs: list[bytes] = []

    def _handle(self, *kinds: int) -> int:
        pool = [h for h, k in self.model.keys.items() if not kinds or k.kind in kinds]
        if pool and self.rnd.random() < 0.85:
            return self.rnd.choice(pool)
        return self.rnd.choice([BOGUS_HANDLE, *self.model.keys, ref.STORAGE])

    def _auth(self, handle: int) -> bytes:
        key = self.model.keys.get(handle)
        right = key.auth if key is not None else b""
        return right if self.rnd.random() < 0.7 else right + b"?"

    def _parent(self) -> int:
        return self.rnd.choice([ref.STORAGE, ref.STORAGE, ref.ENDORSEMENT, self._handle(ref.AES_SYMMETRIC), self._handle()])

    def _deadline(self) -> bytes:
        roll = self.rnd.random()
        if roll < 0.75:
            return b""
        if roll < 0.95:
            return struct.pack(">Q", self.model.clock.now_ms() + self.rnd.randrange(0, 20_000))
        return b"\x01\x02\x03"

    def _policy(self) -> bytes:
        roll = self.rnd.random()
        if roll < 0.7:
            return b""
        if roll < 0.95:
            index = self.rnd.randrange(4)
            digest = self.model.pcrs[index] if self.rnd.random() < 0.5 else self.rnd.randbytes(32)
            return bytes([index]) + digest
        return self.rnd.choice([bytes([20]) + bytes(32), b"\x00" * 10])

    def _bytes(self, limit: int = 48) -> bytes:
        return self.rnd.randbytes(self.rnd.randrange(limit))

    def step(self) -> bytes | int:
        """Next command, or an int: milliseconds to advance the clock."""
        rnd = self.rnd
        op = rnd.choices(
            [
                "advance", "pcr_read", "pcr_extend", "nv_write", "nv_read", "nv_undefine", "random", "clock",
                "primary", "create", "seal", "unseal", "encrypt", "decrypt", "flush", "export", "malformed",
            ],
            weights=[4, 3, 4, 3, 3, 1, 2, 1, 6, 3, 6, 8, 5, 4, 2, 1, 4],
        )[0]
        if op == "advance":
            return rnd.choice([1, 500, 5_000, 10_000, 12_000])
        if op == "pcr_read":
            fields: list[ref.Field] = [] if rnd.random() < 0.2 else [rnd.randrange(18)]
            return ref.command(ref.PCR_READ, fields)
        if op == "pcr_extend":
            size = 32 if rnd.random() < 0.9 else 31
            return ref.command(ref.PCR_EXTEND, [rnd.randrange(18), rnd.randbytes(size)])
        if op == "nv_write":
            data = self._bytes() if rnd.random() < 0.95 else bytes(ref.MAX_NV + 1)
            return ref.command(ref.NV_WRITE, [rnd.randrange(5), data])
        if op == "nv_read":
            return ref.command(ref.NV_READ, [rnd.randrange(6)])
        if op == "nv_undefine":
            return ref.command(ref.NV_UNDEFINE, [rnd.randrange(6)])
        if op == "random":
            return ref.command(ref.GET_RANDOM, [rnd.choice([0, 1, 16, ref.MAX_RANDOM, ref.MAX_RANDOM + 1])])
        if op == "clock":
            return ref.command(ref.READ_CLOCK)
        if op == "primary":
            hierarchy = rnd.choice([*ref.HIERARCHIES, ref.STORAGE, 0x40000007])
            kind = rnd.choice([ref.AES_SYMMETRIC] * 4 + [ref.SEALED_DATA, 9])
            auth = b"" if rnd.random() < 0.8 else b"guess"
            key_auth = rnd.choice([b"", b"k1", b"k2"])
            return ref.command(ref.CREATE_PRIMARY, [hierarchy, kind, auth, key_auth, self._bytes(8)], sessions=True)
        if op == "create":
            parent = self._parent()
            kind = rnd.choice([ref.AES_SYMMETRIC] * 5 + [9])
            fields = [parent, kind, self._auth(parent), rnd.choice([b"", b"c"]), self._deadline(), b"", b""]
            return ref.command(ref.CREATE, fields, sessions=True)
        if op == "seal":
            parent = self._parent()
            payload = self._bytes() if rnd.random() < 0.97 else bytes(ref.MAX_NV + 1)
            fields = [
                parent, ref.SEALED_DATA, self._auth(parent), rnd.choice([b"", b"pw", b"pin"]),
                self._deadline(), payload, self._policy(),
            ]
            return ref.command(ref.CREATE, fields, sessions=True)
        if op == "unseal":
            handle = self._handle(ref.SEALED_DATA)
            return ref.command(ref.UNSEAL, [handle, self._auth(handle)], sessions=True)
        if op == "encrypt":
            handle = self._handle(ref.AES_SYMMETRIC)
            return ref.command(ref.ENCRYPT_DECRYPT, [handle, self._auth(handle), 0, self._bytes(64)], sessions=True)
        if op == "decrypt":
            handle = self._handle(ref.AES_SYMMETRIC)
            if self.blobs and rnd.random() < 0.7:
                data = rnd.choice(self.blobs)
            else:
                data = rnd.randbytes(rnd.choice([0, 16, 31, 32, 48]))
            return ref.command(ref.ENCRYPT_DECRYPT, [handle, self._auth(handle), 1, data], sessions=True)
        if op == "flush":
            return ref.command(ref.FLUSH, [self._handle()])
        if op == "export":
            return ref.command(ref.EXPORT_KEY, [self._handle()])
        return self._malformed()

    def _malformed(self) -> bytes:
        rnd = self.rnd
        valid = ref.command(ref.PCR_READ, [rnd.randrange(16)])
        return rnd.choice(
            [
                valid[: rnd.randrange(ref.HEADER.size)],
                valid + b"\x00",
                valid[:-1],
                ref.command(ref.PCR_READ, [1], sessions=True),
                ref.command(ref.UNSEAL, [BOGUS_HANDLE, b""]),
                ref.command(0x0999),
                b"\x12\x34" + valid[2:],
                ref.command(ref.PCR_READ, [1, 2]),
                ref.command(ref.NV_READ, [b"not a u32"]),
                ref.command(ref.NV_READ, payload=b"\x07"),
                ref.command(ref.NV_WRITE, payload=b"\x01\x00\x00\x00\x01\x02\x00\x00\x00\x09ab"),
                ref.command(ref.READ_CLOCK, payload=b"\x01\x00"),
            ]
        )

    def learn(self, response: bytes) -> None:
        for value in ref.response_fields(response):
            if isinstance(value, bytes) and len(value) >= 32 and len(value) % 16 == 0:
                self.blobs.append(value)


def _run_sequence(seed: int, clock) -> None:
    state = new_state(DeterministicRng(f"oracle-state-{seed}"))
    env = CommandEnv(clock=clock, rng=DeterministicRng(f"oracle-rng-{seed}"), test_mode=True, rsa_bits=1024)
    model = ref.ReferenceTpm(f"oracle-state-{seed}", f"oracle-rng-{seed}", clock)
    assert (state.eps, state.sps, state.pps) == (
        model.seeds[ref.ENDORSEMENT], model.seeds[ref.STORAGE], model.seeds[ref.PLATFORM]
    )

    gen = _Generator(seed, model)
    for step in range(STEPS):
        item = gen.step()
        if isinstance(item, int):
            clock.advance(item)
            continue
        expected = model.execute(item)
        actual = dispatch_bytes(state, item, clock, env=env)
        assert actual == expected, f"seed={seed} step={step} command={item.hex()}"
        gen.learn(expected)
    assert _observe(state) == model.observable(), f"seed={seed}"


@pytest.mark.parametrize("seed", range(25))
def test_dispatcher_matches_reference(seed, clock) -> None:
    _run_sequence(seed, clock)


@pytest.mark.acceptance
def test_dispatcher_matches_reference_thousand_sequences(clock) -> None:
    for seed in range(1000):
        _run_sequence(seed, clock)


def test_reference_agrees_on_lockout_walkthrough(clock) -> None:
    state = new_state(DeterministicRng("walk"))
    env = CommandEnv(clock=clock, rng=DeterministicRng("walk-rng"), test_mode=True, rsa_bits=1024)
    model = ref.ReferenceTpm("walk", "walk-rng", clock)
    seal = ref.command(ref.CREATE, [ref.STORAGE, ref.SEALED_DATA, b"", b"pw", b"", b"secret", b""], sessions=True)
    wrong = ref.command(ref.UNSEAL, [ref.FIRST_HANDLE, b"nope"], sessions=True)
    right = ref.command(ref.UNSEAL, [ref.FIRST_HANDLE, b"pw"], sessions=True)

    script: list[bytes | int] = [seal, wrong, wrong, wrong, right, 9_999, right, 1, right]
    outcomes = []
    for item in script:
        if isinstance(item, int):
            clock.advance(item)
            continue
        expected = model.execute(item)
        assert dispatch_bytes(state, item, clock, env=env) == expected
        outcomes.append(ref.HEADER.unpack(expected[: ref.HEADER.size])[2])

    codes = ref.RESPONSE_CODES
    assert outcomes == [0, codes["ERR_AUTH"], codes["ERR_AUTH"], codes["ERR_AUTH"], codes["ERR_LOCKED_OUT"], codes["ERR_LOCKED_OUT"], 0]
    assert ref.response_fields(expected) == [b"secret"]


@pytest.mark.skipif(shutil.which("sha256sum") is None, reason="sha256sum not installed")
def test_pcr_chain_matches_coreutils(state, env, clock, tmp_path) -> None:
    value = bytes(32)
    blob = tmp_path / "extend.bin"
    for i in range(5):
        digest = hashlib.sha256(f"measurement {i}".encode()).digest()
        blob.write_bytes(value + digest)
        out = subprocess.run(["sha256sum", str(blob)], capture_output=True, text=True, check=True).stdout
        value = bytes.fromhex(out.split()[0])
        dispatch_bytes(state, ref.command(ref.PCR_EXTEND, [7, digest]), clock, env=env)
    assert state.pcr_bank[7] == value

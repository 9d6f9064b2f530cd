"""Randomness for TPM commands.

Production uses the OS generator. Test mode injects a seed and gets a
deterministic HMAC-SHA256 counter-mode stream, so randomized commands are
reproducible. Both expose `read(n)`, which is also pycryptodome's `randfunc`
signature.
"""
from __future__ import annotations

import hashlib
import hmac
import os
from typing import Protocol


class Rng(Protocol):
    def read(self, n: int) -> bytes: ...


class SystemRng:
    def read(self, n: int) -> bytes:
        return os.urandom(n)


class DeterministicRng:
    __slots__ = ("_key", "_counter", "_buffer")

    def __init__(self, seed: bytes | int | str) -> None:
        if isinstance(seed, int):
            seed = seed.to_bytes(16, "big", signed=False)
        elif isinstance(seed, str):
            seed = seed.encode("utf-8")
        self._key = hashlib.sha256(b"vtpm-lab-drbg" + seed).digest()
        self._counter = 0
        self._buffer = b""

    def read(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = hmac.new(self._key, self._counter.to_bytes(8, "big"), hashlib.sha256).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def fork(self, label: str) -> DeterministicRng:
        """Independent child stream; keeps sibling consumers from shifting each other."""
        return DeterministicRng(self._key + label.encode("utf-8"))


def make_rng(seed: bytes | int | str | None) -> Rng:
    return SystemRng() if seed is None else DeterministicRng(seed)

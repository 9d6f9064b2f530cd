"""Platform monotonic counters (the Intel ME stand-in).

The store file lives outside any rollback space. Every operation reloads and
rewrites it under a thread lock plus an advisory file lock, so several
processes on one platform see one budget of 256 counters.
"""
from __future__ import annotations

import contextlib
import enum
import hashlib
import logging
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

from vtpm.enclave.identity import EnclaveIdentity
from vtpm.errors import EnclaveError, MarshalError
from vtpm.marshal import Reader, Writer

try:
    import fcntl
except ImportError:  # pragma: no cover - non-POSIX
    fcntl = None  # type: ignore[assignment]


logger = logging.getLogger("vtpm-lab")

_STORE_MAGIC = b"SVMC"
COUNTER_STORE_VERSION = 1
COUNTER_CAPACITY = 256
UUID_SIZE = 16


class CounterPolicy(enum.IntEnum):
    SAME_SIGNER = 1
    SAME_MEASUREMENT = 2
    BOTH = 3


def owner_digest(identity: EnclaveIdentity, policy: CounterPolicy) -> bytes:
    registers = {
        CounterPolicy.SAME_SIGNER: identity.mrsigner,
        CounterPolicy.SAME_MEASUREMENT: identity.mrenclave,
        CounterPolicy.BOTH: identity.mrenclave + identity.mrsigner,
    }[policy]
    return hashlib.sha256(b"vtpm-lab-counter-owner" + bytes([int(policy)]) + registers).digest()


@dataclass
class MonotonicCounter:
    uuid: bytes
    value: int
    owner_policy: CounterPolicy
    owner: bytes


def _encode(counters: dict[bytes, MonotonicCounter]) -> bytes:
    w = Writer().raw(_STORE_MAGIC).u16(COUNTER_STORE_VERSION).u16(len(counters))
    for uuid in sorted(counters):
        c = counters[uuid]
        w.fixed(c.uuid, UUID_SIZE).u64(c.value).u8(int(c.owner_policy)).fixed(c.owner, 32)
    return w.getvalue()


def _decode(data: bytes) -> dict[bytes, MonotonicCounter]:
    try:
        r = Reader(data)
        r.expect_magic(_STORE_MAGIC)
        if r.u16() != COUNTER_STORE_VERSION:
            raise EnclaveError("ERR_CORRUPT", "unsupported counter store version")
        out: dict[bytes, MonotonicCounter] = {}
        for _ in range(r.u16()):
            uuid, value, policy, owner = r.raw(UUID_SIZE), r.u64(), CounterPolicy(r.u8()), r.raw(32)
            out[uuid] = MonotonicCounter(uuid=uuid, value=value, owner_policy=policy, owner=owner)
        r.finish()
    except (MarshalError, ValueError) as exc:
        raise EnclaveError("ERR_CORRUPT", f"counter store: {exc}") from exc
    return out


class CounterStore:
    def __init__(
        self,
        path: Path,
        *,
        capacity: int = COUNTER_CAPACITY,
        randbytes: Callable[[int], bytes] = os.urandom,
    ) -> None:
        self.path = Path(path)
        self.capacity = capacity
        self._randbytes = randbytes
        self._lock = threading.RLock()

    @contextlib.contextmanager
    def _transaction(self) -> Iterator[dict[bytes, MonotonicCounter]]:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            lock_path = self.path.with_name(self.path.name + ".lock")
            with lock_path.open("a+b") as lock_file:
                if fcntl is not None:
                    fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX)
                try:
                    counters = _decode(self.path.read_bytes()) if self.path.exists() else {}
                    before = _encode(counters)
                    yield counters
                    after = _encode(counters)
                    if after != before:
                        tmp = self.path.with_name(self.path.name + ".tmp")
                        tmp.write_bytes(after)
                        os.replace(tmp, self.path)
                finally:
                    if fcntl is not None:
                        fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)

    @staticmethod
    def _owned(counters: dict[bytes, MonotonicCounter], identity: EnclaveIdentity, uuid: bytes) -> MonotonicCounter:
        counter = counters.get(uuid)
        if counter is None:
            raise EnclaveError("ERR_UNKNOWN_UUID", f"counter {uuid.hex()} does not exist")
        if owner_digest(identity, counter.owner_policy) != counter.owner:
            raise EnclaveError("ERR_ACCESS", f"caller does not satisfy {counter.owner_policy.name}")
        return counter

    def create(self, identity: EnclaveIdentity, policy: CounterPolicy = CounterPolicy.SAME_SIGNER) -> bytes:
        with self._transaction() as counters:
            if len(counters) >= self.capacity:
                raise EnclaveError("ERR_NO_COUNTERS", f"all {self.capacity} platform counters are in use")
            uuid = self._randbytes(UUID_SIZE)
            while uuid in counters:
                uuid = self._randbytes(UUID_SIZE)
            counters[uuid] = MonotonicCounter(uuid=uuid, value=0, owner_policy=policy, owner=owner_digest(identity, policy))
        logger.info("[counter/create] uuid=%s live=%d", uuid.hex(), len(counters))
        return uuid

    def increment(self, identity: EnclaveIdentity, uuid: bytes) -> int:
        with self._transaction() as counters:
            counter = self._owned(counters, identity, uuid)
            counter.value += 1
            return counter.value

    def read(self, identity: EnclaveIdentity, uuid: bytes) -> int:
        with self._transaction() as counters:
            return self._owned(counters, identity, uuid).value

    def destroy(self, identity: EnclaveIdentity, uuid: bytes) -> None:
        with self._transaction() as counters:
            self._owned(counters, identity, uuid)
            del counters[uuid]
        logger.info("[counter/destroy] uuid=%s", uuid.hex())

    def live_count(self) -> int:
        with self._transaction() as counters:
            return len(counters)

    def free_slots(self) -> int:
        return self.capacity - self.live_count()

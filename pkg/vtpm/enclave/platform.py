"""One interface over the simulated SGX platform services.

Everything that must survive a software snapshot (platform secret, group key,
counter store) lives under `directory`, which callers keep outside any
rollback space.
"""
from __future__ import annotations

import logging
import threading
from pathlib import Path

from vtpm.core.rng import Rng, make_rng
from vtpm.enclave import quoting, sealing
from vtpm.enclave.counters import CounterPolicy, CounterStore
from vtpm.enclave.identity import EnclaveIdentity, SealPolicy
from vtpm.enclave.quoting import GroupKey, Quote
from vtpm.enclave.sealing import SealedBlob
from vtpm.enclave.timebase import PlatformClock, PlatformTime, SystemTime, TimeSource
from vtpm.errors import EnclaveError


logger = logging.getLogger("vtpm-lab")

SECRET_FILE = "platform.secret"
GROUP_KEY_FILE = "group.key"
COUNTER_FILE = "counters.bin"
EPOCH_FILE = "epoch.bin"
SECRET_SIZE = 32


class Platform:
    def __init__(
        self,
        directory: Path,
        *,
        time_source: TimeSource | None = None,
        seed: bytes | int | str | None = None,
        persist_epoch: bool = False,
    ) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._rng: Rng = make_rng(seed)
        self._lock = threading.Lock()
        self.time_source = time_source or SystemTime()
        self.clock = PlatformClock(
            self.time_source,
            randbytes=self._fork("clock").read,
            state_path=self.directory / EPOCH_FILE if persist_epoch else None,
        )
        self.counters = CounterStore(self.directory / COUNTER_FILE, randbytes=self._fork("counters").read)
        self._secret = self._load_or_create(SECRET_FILE, "secret")
        self.group_key = GroupKey.from_private_bytes(self._load_or_create(GROUP_KEY_FILE, "group"))

    def _fork(self, label: str) -> Rng:
        fork = getattr(self._rng, "fork", None)
        return fork(label) if fork is not None else self._rng

    def _load_or_create(self, name: str, label: str) -> bytes:
        path = self.directory / name
        with self._lock:
            if path.exists():
                raw = path.read_bytes()
                if len(raw) != SECRET_SIZE:
                    raise EnclaveError("ERR_CORRUPT", f"{name} must hold {SECRET_SIZE} raw bytes")
                return raw
            raw = self._fork(label).read(SECRET_SIZE)
            path.write_bytes(raw)
            logger.info("[platform/provision] created %s", name)
            return raw

    # sealing

    def seal(self, identity: EnclaveIdentity, policy: SealPolicy, plaintext: bytes) -> SealedBlob:
        # Seal nonces are never seeded; the sealing key outlives this process.
        return sealing.seal(self._secret, identity, policy, plaintext)

    def unseal(self, identity: EnclaveIdentity, blob: SealedBlob) -> bytes:
        return sealing.unseal(self._secret, identity, blob)

    # monotonic counters

    def counter_create(self, identity: EnclaveIdentity, policy: CounterPolicy = CounterPolicy.SAME_SIGNER) -> bytes:
        return self.counters.create(identity, policy)

    def counter_increment(self, identity: EnclaveIdentity, uuid: bytes) -> int:
        return self.counters.increment(identity, uuid)

    def counter_read(self, identity: EnclaveIdentity, uuid: bytes) -> int:
        return self.counters.read(identity, uuid)

    def counter_destroy(self, identity: EnclaveIdentity, uuid: bytes) -> None:
        self.counters.destroy(identity, uuid)

    # trusted time

    def platform_time(self) -> PlatformTime:
        return self.clock.platform_time()

    def platform_reset(self) -> PlatformTime:
        return self.clock.reset()

    # attestation

    def quote(self, identity: EnclaveIdentity, user_data: bytes) -> Quote:
        return quoting.quote(identity, user_data, self.group_key)

    @property
    def group_public(self) -> bytes:
        return self.group_key.public_raw

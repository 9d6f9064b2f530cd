from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

from vtpm.core.rng import Rng
from vtpm.errors import MarshalError, TpmError
from vtpm.marshal import Reader, Writer


PCR_COUNT = 16
DIGEST_SIZE = 32
SEED_SIZE = 32

DEFAULT_MAX_TRIES = 3
DEFAULT_RECOVERY_INTERVAL_MS = 10_000

# lockout_until for a vTPM held locked until an operator re-provisions it
LOCKED_INDEFINITELY = 2**63 - 1

_STATE_MAGIC = b"SVTS"
STATE_FORMAT_VERSION = 1

FIRST_TRANSIENT_HANDLE = 0x80000000


class Hierarchy(enum.IntEnum):
    STORAGE = 0x40000001  # TPM_RH_OWNER
    ENDORSEMENT = 0x4000000B
    PLATFORM = 0x4000000C


class KeyKind(enum.IntEnum):
    RSA_SIGNING = 1
    RSA_DECRYPTION = 2
    AES_SYMMETRIC = 3
    SEALED_DATA = 4


@dataclass
class LockoutRecord:
    failed_tries: int = 0
    max_tries: int = DEFAULT_MAX_TRIES
    lockout_until: int | None = None
    recovery_interval_ms: int = DEFAULT_RECOVERY_INTERVAL_MS

    def __post_init__(self) -> None:
        if self.max_tries <= 0 or self.recovery_interval_ms <= 0:
            raise ValueError("max_tries and recovery_interval_ms must be positive")

    @property
    def engaged(self) -> bool:
        return self.lockout_until is not None

    def is_locked(self, now_ms: int) -> bool:
        return self.lockout_until is not None and self.lockout_until > now_ms


@dataclass
class KeyObject:
    kind: KeyKind
    public_part: bytes
    # always ciphertext under the parent's wrapping key
    private_part: bytes
    parent: int
    auth_value: bytes = b""
    pcr_policy: tuple[tuple[int, bytes], ...] | None = None
    not_after_ms: int | None = None


@dataclass
class TpmState:
    eps: bytes
    sps: bytes
    pps: bytes
    pcr_bank: list[bytes] = field(default_factory=lambda: [bytes(DIGEST_SIZE)] * PCR_COUNT)
    lockout: LockoutRecord = field(default_factory=LockoutRecord)
    nv_store: dict[int, bytes] = field(default_factory=dict)
    loaded_keys: dict[int, KeyObject] = field(default_factory=dict)
    startup_counter: int = 0
    hierarchy_auth: dict[int, bytes] = field(
        default_factory=lambda: {int(h): b"" for h in Hierarchy}
    )
    next_handle: int = FIRST_TRANSIENT_HANDLE

    def seed_for(self, hierarchy: Hierarchy) -> bytes:
        return {
            Hierarchy.ENDORSEMENT: self.eps,
            Hierarchy.STORAGE: self.sps,
            Hierarchy.PLATFORM: self.pps,
        }[hierarchy]

    def allocate_handle(self) -> int:
        handle = self.next_handle
        self.next_handle += 1
        return handle

    def clone(self) -> TpmState:
        return copy.deepcopy(self)

    def assign(self, other: TpmState) -> None:
        """Replace this object's contents in place (commit of a working copy)."""
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(other, name))

    def to_bytes(self) -> bytes:
        return serialize_state(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> TpmState:
        return deserialize_state(data)


def new_state(
    rng: Rng,
    *,
    max_tries: int = DEFAULT_MAX_TRIES,
    recovery_interval_ms: int = DEFAULT_RECOVERY_INTERVAL_MS,
    hierarchy_auth: dict[Hierarchy, bytes] | None = None,
) -> TpmState:
    seeds: list[bytes] = []
    while len(seeds) < 3:
        candidate = rng.read(SEED_SIZE)
        if candidate not in seeds:
            seeds.append(candidate)
    state = TpmState(
        eps=seeds[0],
        sps=seeds[1],
        pps=seeds[2],
        lockout=LockoutRecord(max_tries=max_tries, recovery_interval_ms=recovery_interval_ms),
    )
    for hierarchy, auth in (hierarchy_auth or {}).items():
        state.hierarchy_auth[int(hierarchy)] = auth
    return state


def serialize_state(state: TpmState) -> bytes:
    w = Writer().raw(_STATE_MAGIC).u16(STATE_FORMAT_VERSION)
    w.fixed(state.eps, SEED_SIZE).fixed(state.sps, SEED_SIZE).fixed(state.pps, SEED_SIZE)

    w.u8(len(state.hierarchy_auth))
    for handle in sorted(state.hierarchy_auth):
        w.u32(handle).sized16(state.hierarchy_auth[handle])

    if len(state.pcr_bank) != PCR_COUNT:
        raise ValueError(f"PCR bank must hold {PCR_COUNT} slots")
    for digest in state.pcr_bank:
        w.fixed(digest, DIGEST_SIZE)

    lo = state.lockout
    w.u32(lo.failed_tries).u32(lo.max_tries).u64(lo.recovery_interval_ms)
    w.u8(1 if lo.lockout_until is not None else 0).u64(lo.lockout_until or 0)

    w.u64(state.startup_counter).u32(state.next_handle)

    w.u32(len(state.nv_store))
    for index in sorted(state.nv_store):
        w.u32(index).sized32(state.nv_store[index])

    w.u32(len(state.loaded_keys))
    for handle in sorted(state.loaded_keys):
        key = state.loaded_keys[handle]
        w.u32(handle).u8(int(key.kind)).u32(key.parent)
        w.sized32(key.public_part).sized32(key.private_part).sized16(key.auth_value)
        if key.pcr_policy is None:
            w.u8(0)
        else:
            w.u8(1).u8(len(key.pcr_policy))
            for index, digest in key.pcr_policy:
                w.u8(index).fixed(digest, DIGEST_SIZE)
        w.u8(1 if key.not_after_ms is not None else 0).u64(key.not_after_ms or 0)
    return w.getvalue()


def deserialize_state(data: bytes) -> TpmState:
    r = Reader(data)
    r.expect_magic(_STATE_MAGIC)
    version = r.u16()
    if version != STATE_FORMAT_VERSION:
        raise MarshalError("ERR_CORRUPT", f"unsupported state format version {version}")
    eps, sps, pps = r.raw(SEED_SIZE), r.raw(SEED_SIZE), r.raw(SEED_SIZE)

    hierarchy_auth: dict[int, bytes] = {}
    for _ in range(r.u8()):
        handle = r.u32()
        hierarchy_auth[handle] = r.sized16()

    pcr_bank = [r.raw(DIGEST_SIZE) for _ in range(PCR_COUNT)]

    failed, max_tries, recovery = r.u32(), r.u32(), r.u64()
    has_until, until = r.u8(), r.u64()
    try:
        lockout = LockoutRecord(
            failed_tries=failed,
            max_tries=max_tries,
            lockout_until=until if has_until else None,
            recovery_interval_ms=recovery,
        )
    except ValueError as exc:
        raise MarshalError("ERR_CORRUPT", str(exc)) from exc

    startup_counter, next_handle = r.u64(), r.u32()

    nv_store: dict[int, bytes] = {}
    for _ in range(r.u32()):
        index = r.u32()
        nv_store[index] = r.sized32()

    loaded_keys: dict[int, KeyObject] = {}
    for _ in range(r.u32()):
        handle = r.u32()
        kind_raw, parent = r.u8(), r.u32()
        public_part, private_part, auth_value = r.sized32(), r.sized32(), r.sized16()
        policy: tuple[tuple[int, bytes], ...] | None = None
        if r.u8():
            policy = tuple((r.u8(), r.raw(DIGEST_SIZE)) for _ in range(r.u8()))
        has_not_after, not_after = r.u8(), r.u64()
        try:
            kind = KeyKind(kind_raw)
        except ValueError as exc:
            raise MarshalError("ERR_CORRUPT", f"unknown key kind {kind_raw}") from exc
        loaded_keys[handle] = KeyObject(
            kind=kind,
            public_part=public_part,
            private_part=private_part,
            parent=parent,
            auth_value=auth_value,
            pcr_policy=policy,
            not_after_ms=not_after if has_not_after else None,
        )
    r.finish()

    return TpmState(
        eps=eps,
        sps=sps,
        pps=pps,
        pcr_bank=pcr_bank,
        lockout=lockout,
        nv_store=nv_store,
        loaded_keys=loaded_keys,
        startup_counter=startup_counter,
        hierarchy_auth=hierarchy_auth,
        next_handle=next_handle,
    )


def check_pcr_index(index: int) -> None:
    if not 0 <= index < PCR_COUNT:
        raise TpmError("ERR_BAD_INDEX", f"PCR index {index} outside 0..{PCR_COUNT - 1}")

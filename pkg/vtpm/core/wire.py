"""TPM2-style command/response codec.

Header: tag (u16) | size (u32, whole message) | code (u32), big-endian, then the
payload. Payloads are a sequence of self-describing fields:

    0x01 U32    4-byte unsigned int
    0x02 BYTES  u32 length + data

Layouts per command are documented in docs/wire.md.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

from vtpm.errors import MarshalError, TpmError
from vtpm.marshal import Reader, Writer


HEADER_SIZE = 10

TPM_ST_NO_SESSIONS = 0x8001
TPM_ST_SESSIONS = 0x8002
VALID_TAGS = (TPM_ST_NO_SESSIONS, TPM_ST_SESSIONS)

# Command codes (TPM 2.0 values where a counterpart exists).
CC_NV_UNDEFINE_SPACE = 0x0122
CC_CREATE_PRIMARY = 0x0131
CC_NV_WRITE = 0x0137
CC_NV_READ = 0x014E
CC_CREATE = 0x0153
CC_RSA_DECRYPT = 0x0159
CC_SIGN = 0x015D
CC_UNSEAL = 0x015E
CC_ENCRYPT_DECRYPT = 0x0164
CC_FLUSH_CONTEXT = 0x0165
CC_RSA_ENCRYPT = 0x0174
CC_VERIFY_SIGNATURE = 0x0177
CC_GET_RANDOM = 0x017B
CC_PCR_READ = 0x017E
CC_READ_CLOCK = 0x0181
CC_PCR_EXTEND = 0x0182
# vendor range, test mode only
CC_VENDOR_EXPORT_KEY = 0x20000001

RC_SUCCESS = 0x000

_RESPONSE_CODES: dict[str, int] = {
    "ERR_BAD_TAG": 0x01E,
    "ERR_BAD_INDEX": 0x084,
    "ERR_HANDLE": 0x08B,
    "ERR_PAYLOAD_TOO_LARGE": 0x095,
    "ERR_TRUNCATED": 0x09A,
    "ERR_WRONG_KEY_KIND": 0x09C,
    "ERR_EXPIRED": 0x0A3,
    "ERR_INTEGRITY": 0x09F,
    "ERR_BAD_SIZE": 0x142,
    "ERR_UNKNOWN_CODE": 0x143,
    "ERR_BAD_FIELDS": 0x1C4,
    "ERR_LOCKED_OUT": 0x921,
    "ERR_AUTH": 0x98E,
    "ERR_POLICY": 0x99D,
    "ERR_DISABLED": 0x120,
    # vendor-specific
    "ERR_UNKNOWN_UUID": 0xA01,
    "ERR_NO_COUNTERS": 0xA02,
    "ERR_ROLLBACK_QUARANTINE": 0xA03,
    "ERR_EPOCH_CHANGED": 0xA04,
    "ERR_LEDGER": 0xA05,
}
_REASONS_BY_CODE = {v: k for k, v in _RESPONSE_CODES.items()}

RC_INTERNAL = 0x101


def response_code_for(reason: str) -> int:
    return _RESPONSE_CODES.get(reason, RC_INTERNAL)


def reason_for(rc: int) -> str:
    if rc == RC_SUCCESS:
        return "SUCCESS"
    return _REASONS_BY_CODE.get(rc, f"RC_{rc:#05x}")


@dataclass(frozen=True)
class Command:
    tag: int
    code: int
    payload: bytes = b""

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)


@dataclass(frozen=True)
class Response:
    tag: int
    code: int
    payload: bytes = b""

    @property
    def size(self) -> int:
        return HEADER_SIZE + len(self.payload)

    @property
    def ok(self) -> bool:
        return self.code == RC_SUCCESS

    @property
    def reason(self) -> str:
        return reason_for(self.code)

    def fields(self) -> list[Field]:
        return decode_fields(self.payload)


Field = Union[int, bytes]

_FIELD_U32 = 0x01
_FIELD_BYTES = 0x02


def encode_fields(fields: list[Field]) -> bytes:
    w = Writer()
    for value in fields:
        if isinstance(value, bool):
            value = int(value)
        if isinstance(value, int):
            w.u8(_FIELD_U32).u32(value)
        elif isinstance(value, (bytes, bytearray)):
            w.u8(_FIELD_BYTES).sized32(bytes(value))
        else:
            raise TypeError(f"unsupported field type {type(value).__name__}")
    return w.getvalue()


def decode_fields(payload: bytes) -> list[Field]:
    r = Reader(payload)
    out: list[Field] = []
    while r.remaining:
        kind = r.u8()
        if kind == _FIELD_U32:
            out.append(r.u32())
        elif kind == _FIELD_BYTES:
            out.append(r.sized32())
        else:
            raise MarshalError("ERR_BAD_FIELDS", f"unknown field type {kind:#04x}")
    return out


def _encode(tag: int, code: int, payload: bytes) -> bytes:
    return struct.pack(">HII", tag, HEADER_SIZE + len(payload), code) + payload


def encode_command(cmd: Command) -> bytes:
    return _encode(cmd.tag, cmd.code, cmd.payload)


def encode_response(resp: Response) -> bytes:
    return _encode(resp.tag, resp.code, resp.payload)


def _decode_header(data: bytes) -> tuple[int, int, bytes]:
    if len(data) < HEADER_SIZE:
        raise TpmError("ERR_TRUNCATED", f"{len(data)} bytes, header needs {HEADER_SIZE}")
    tag, size, code = struct.unpack(">HII", data[:HEADER_SIZE])
    if size > len(data):
        raise TpmError("ERR_TRUNCATED", f"size field {size} > buffer {len(data)}")
    if size < len(data) or size < HEADER_SIZE:
        raise TpmError("ERR_BAD_SIZE", f"size field {size} != buffer {len(data)}")
    if tag not in VALID_TAGS:
        raise TpmError("ERR_BAD_TAG", f"tag {tag:#06x}")
    return tag, code, bytes(data[HEADER_SIZE:size])


def decode_command(data: bytes) -> Command:
    """Decode a command; malformed input raises TpmError, never anything else."""
    tag, code, payload = _decode_header(data)
    return Command(tag=tag, code=code, payload=payload)


def decode_response(data: bytes) -> Response:
    tag, code, payload = _decode_header(data)
    return Response(tag=tag, code=code, payload=payload)


def build_command(code: int, fields: list[Field] | None = None, *, sessions: bool = False) -> Command:
    tag = TPM_ST_SESSIONS if sessions else TPM_ST_NO_SESSIONS
    return Command(tag=tag, code=code, payload=encode_fields(list(fields or [])))


def success(fields: list[Field] | None = None, *, tag: int = TPM_ST_NO_SESSIONS) -> Response:
    return Response(tag=tag, code=RC_SUCCESS, payload=encode_fields(list(fields or [])))


def error_response(reason: str) -> Response:
    return Response(tag=TPM_ST_NO_SESSIONS, code=response_code_for(reason))


@dataclass
class FieldCursor:
    """Typed access to a decoded payload; wrong shapes surface as ERR_BAD_FIELDS."""

    fields: list[Field]
    pos: int = field(default=0)

    @classmethod
    def of(cls, cmd: Command) -> FieldCursor:
        try:
            return cls(decode_fields(cmd.payload))
        except MarshalError as exc:
            raise TpmError(exc.reason, exc.message) from exc

    def _next(self) -> Field:
        if self.pos >= len(self.fields):
            raise TpmError("ERR_BAD_FIELDS", f"missing field #{self.pos}")
        value = self.fields[self.pos]
        self.pos += 1
        return value

    def u32(self) -> int:
        value = self._next()
        if not isinstance(value, int):
            raise TpmError("ERR_BAD_FIELDS", f"field #{self.pos - 1} is not U32")
        return value

    def bytes_(self) -> bytes:
        value = self._next()
        if not isinstance(value, bytes):
            raise TpmError("ERR_BAD_FIELDS", f"field #{self.pos - 1} is not BYTES")
        return value

    def has_more(self) -> bool:
        return self.pos < len(self.fields)

    def done(self) -> None:
        if self.has_more():
            raise TpmError("ERR_BAD_FIELDS", f"{len(self.fields) - self.pos} unexpected trailing fields")

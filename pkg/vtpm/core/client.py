"""Thin caller-side helper that speaks the wire format.

Everything above the codec (harness, bench, CLI) drives a vTPM through this, so
the byte interface stays the only way in.
"""
from __future__ import annotations

import struct
from typing import Callable

from vtpm.core import wire
from vtpm.core.dispatch import encode_deadline, encode_policy
from vtpm.core.commands import PcrPolicy
from vtpm.core.state import Hierarchy, KeyKind
from vtpm.errors import TpmError


Transport = Callable[[bytes], bytes]


def pcr_read_command(index: int | None = None) -> wire.Command:
    return wire.build_command(wire.CC_PCR_READ, [] if index is None else [index])


def pcr_extend_command(index: int, digest: bytes) -> wire.Command:
    return wire.build_command(wire.CC_PCR_EXTEND, [index, digest])


def create_primary_command(
    hierarchy: Hierarchy, kind: KeyKind, auth: bytes = b"", key_auth: bytes = b"", unique: bytes = b""
) -> wire.Command:
    return wire.build_command(
        wire.CC_CREATE_PRIMARY, [int(hierarchy), int(kind), auth, key_auth, unique], sessions=True
    )


def create_command(
    parent: int,
    kind: KeyKind,
    parent_auth: bytes = b"",
    key_auth: bytes = b"",
    *,
    data: bytes = b"",
    policy: PcrPolicy | None = None,
    not_after_ms: int | None = None,
) -> wire.Command:
    fields: list[wire.Field] = [
        parent,
        int(kind),
        parent_auth,
        key_auth,
        encode_deadline(not_after_ms),
        data,
        encode_policy(policy),
    ]
    return wire.build_command(wire.CC_CREATE, fields, sessions=True)


def unseal_command(handle: int, auth: bytes) -> wire.Command:
    return wire.build_command(wire.CC_UNSEAL, [handle, auth], sessions=True)


def sign_command(handle: int, message: bytes, auth: bytes = b"") -> wire.Command:
    return wire.build_command(wire.CC_SIGN, [handle, auth, message], sessions=True)


def verify_command(handle: int, message: bytes, signature: bytes) -> wire.Command:
    return wire.build_command(wire.CC_VERIFY_SIGNATURE, [handle, message, signature])


def rsa_encrypt_command(handle: int, plaintext: bytes) -> wire.Command:
    return wire.build_command(wire.CC_RSA_ENCRYPT, [handle, plaintext])


def rsa_decrypt_command(handle: int, ciphertext: bytes, auth: bytes = b"") -> wire.Command:
    return wire.build_command(wire.CC_RSA_DECRYPT, [handle, auth, ciphertext], sessions=True)


def encrypt_decrypt_command(handle: int, data: bytes, *, decrypt: bool, auth: bytes = b"") -> wire.Command:
    return wire.build_command(wire.CC_ENCRYPT_DECRYPT, [handle, auth, int(decrypt), data], sessions=True)


def nv_write_command(index: int, data: bytes) -> wire.Command:
    return wire.build_command(wire.CC_NV_WRITE, [index, data])


def nv_read_command(index: int) -> wire.Command:
    return wire.build_command(wire.CC_NV_READ, [index])


def nv_undefine_command(index: int) -> wire.Command:
    return wire.build_command(wire.CC_NV_UNDEFINE_SPACE, [index])


def flush_context_command(handle: int) -> wire.Command:
    return wire.build_command(wire.CC_FLUSH_CONTEXT, [handle])


def get_random_command(count: int) -> wire.Command:
    return wire.build_command(wire.CC_GET_RANDOM, [count])


def read_clock_command() -> wire.Command:
    return wire.build_command(wire.CC_READ_CLOCK)


def export_key_command(handle: int) -> wire.Command:
    return wire.build_command(wire.CC_VENDOR_EXPORT_KEY, [handle])


class TpmClient:
    def __init__(self, transport: Transport) -> None:
        self._transport = transport

    def call(self, cmd: wire.Command) -> list[wire.Field]:
        resp = wire.decode_response(self._transport(wire.encode_command(cmd)))
        if not resp.ok:
            raise TpmError(resp.reason, f"command {cmd.code:#06x} failed")
        return resp.fields()

    def pcr_read(self, index: int) -> bytes:
        return self.call(pcr_read_command(index))[0]

    def pcr_read_all(self) -> list[bytes]:
        return list(self.call(pcr_read_command()))

    def pcr_extend(self, index: int, digest: bytes) -> bytes:
        return self.call(pcr_extend_command(index, digest))[0]

    def create_primary(
        self, hierarchy: Hierarchy, kind: KeyKind, auth: bytes = b"", *, key_auth: bytes = b"", unique: bytes = b""
    ) -> tuple[int, bytes]:
        handle, public = self.call(create_primary_command(hierarchy, kind, auth, key_auth, unique))
        return handle, public

    def create(
        self,
        parent: int,
        kind: KeyKind,
        parent_auth: bytes = b"",
        *,
        key_auth: bytes = b"",
        not_after_ms: int | None = None,
    ) -> tuple[int, bytes]:
        handle, public = self.call(create_command(parent, kind, parent_auth, key_auth, not_after_ms=not_after_ms))
        return handle, public

    def seal(
        self,
        parent: int,
        payload: bytes,
        auth: bytes,
        policy: PcrPolicy | None = None,
        *,
        parent_auth: bytes = b"",
    ) -> int:
        cmd = create_command(parent, KeyKind.SEALED_DATA, parent_auth, auth, data=payload, policy=policy)
        handle, _public = self.call(cmd)
        return handle

    def unseal(self, handle: int, auth: bytes) -> bytes:
        return self.call(unseal_command(handle, auth))[0]

    def sign(self, handle: int, message: bytes, auth: bytes = b"") -> bytes:
        return self.call(sign_command(handle, message, auth))[0]

    def verify(self, handle: int, message: bytes, signature: bytes) -> bool:
        return bool(self.call(verify_command(handle, message, signature))[0])

    def rsa_encrypt(self, handle: int, plaintext: bytes) -> bytes:
        return self.call(rsa_encrypt_command(handle, plaintext))[0]

    def rsa_decrypt(self, handle: int, ciphertext: bytes, auth: bytes = b"") -> bytes:
        return self.call(rsa_decrypt_command(handle, ciphertext, auth))[0]

    def aes_encrypt(self, handle: int, plaintext: bytes, auth: bytes = b"") -> bytes:
        return self.call(encrypt_decrypt_command(handle, plaintext, decrypt=False, auth=auth))[0]

    def aes_decrypt(self, handle: int, data: bytes, auth: bytes = b"") -> bytes:
        return self.call(encrypt_decrypt_command(handle, data, decrypt=True, auth=auth))[0]

    def nv_write(self, index: int, data: bytes) -> None:
        self.call(nv_write_command(index, data))

    def nv_read(self, index: int) -> bytes:
        return self.call(nv_read_command(index))[0]

    def nv_undefine(self, index: int) -> None:
        self.call(nv_undefine_command(index))

    def flush(self, handle: int) -> None:
        self.call(flush_context_command(handle))

    def get_random(self, count: int) -> bytes:
        return self.call(get_random_command(count))[0]

    def read_clock(self) -> int:
        return struct.unpack(">Q", self.call(read_clock_command())[0])[0]

    def export_key(self, handle: int) -> bytes:
        return self.call(export_key_command(handle))[0]

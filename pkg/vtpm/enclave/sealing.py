"""SGX-sense sealing: AES-GCM under a key derived from the platform secret and
one identity register (MRENCLAVE or MRSIGNER)."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from vtpm.enclave.identity import EnclaveIdentity, SealPolicy
from vtpm.errors import EnclaveError, MarshalError
from vtpm.marshal import Reader, Writer


_BLOB_MAGIC = b"SVSB"
SEALED_BLOB_VERSION = 1
KEY_ID_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16


@dataclass(frozen=True)
class SealedBlob:
    policy: SealPolicy
    key_id: bytes
    nonce: bytes
    ciphertext: bytes
    tag: bytes
    version: int = SEALED_BLOB_VERSION

    def header(self) -> bytes:
        # authenticated as AAD, so policy and key_id cannot be swapped
        return Writer().raw(_BLOB_MAGIC).u16(self.version).u8(int(self.policy)).fixed(self.key_id, KEY_ID_SIZE).getvalue()

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .raw(self.header())
            .fixed(self.nonce, NONCE_SIZE)
            .sized32(self.ciphertext)
            .fixed(self.tag, TAG_SIZE)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> SealedBlob:
        try:
            r = Reader(data)
            r.expect_magic(_BLOB_MAGIC)
            version = r.u16()
            if version != SEALED_BLOB_VERSION:
                raise EnclaveError("ERR_CORRUPT", f"unsupported sealed blob version {version}")
            policy = SealPolicy(r.u8())
            key_id, nonce = r.raw(KEY_ID_SIZE), r.raw(NONCE_SIZE)
            ciphertext, tag = r.sized32(), r.raw(TAG_SIZE)
            r.finish()
        except (MarshalError, ValueError) as exc:
            raise EnclaveError("ERR_CORRUPT", f"sealed blob: {exc}") from exc
        return cls(policy=policy, key_id=key_id, nonce=nonce, ciphertext=ciphertext, tag=tag, version=version)


def sealing_key(platform_secret: bytes, policy: SealPolicy, register: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=b"vtpm-lab-seal" + bytes([int(policy)]) + register,
    ).derive(platform_secret)


def seal(
    platform_secret: bytes,
    identity: EnclaveIdentity,
    policy: SealPolicy,
    plaintext: bytes,
    *,
    randbytes: Callable[[int], bytes] = os.urandom,
) -> SealedBlob:
    key_id = identity.register(policy)
    nonce = randbytes(NONCE_SIZE)
    draft = SealedBlob(policy=policy, key_id=key_id, nonce=nonce, ciphertext=b"", tag=bytes(TAG_SIZE))
    sealed = AESGCM(sealing_key(platform_secret, policy, key_id)).encrypt(nonce, plaintext, draft.header())
    return SealedBlob(
        policy=policy,
        key_id=key_id,
        nonce=nonce,
        ciphertext=sealed[:-TAG_SIZE],
        tag=sealed[-TAG_SIZE:],
    )


def unseal(platform_secret: bytes, identity: EnclaveIdentity, blob: SealedBlob) -> bytes:
    if identity.register(blob.policy) != blob.key_id:
        raise EnclaveError("ERR_POLICY_MISMATCH", f"caller {blob.policy.name} register differs from key_id")
    aead = AESGCM(sealing_key(platform_secret, blob.policy, blob.key_id))
    try:
        return aead.decrypt(blob.nonce, blob.ciphertext + blob.tag, blob.header())
    except InvalidTag as exc:
        raise EnclaveError("ERR_CORRUPT", "sealed blob failed authentication") from exc

"""Quote generation under the platform group key (EPID simulated by Ed25519)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from vtpm.enclave.identity import ED25519_KEY_SIZE, ED25519_SIG_SIZE, EnclaveIdentity, verify_ed25519
from vtpm.errors import EnclaveError, MarshalError
from vtpm.marshal import Reader, Writer


_QUOTE_MAGIC = b"SVQT"
QUOTE_FORMAT_VERSION = 1
USER_DATA_SIZE = 64


class GroupKey:
    def __init__(self, private_key: Ed25519PrivateKey) -> None:
        self._key = private_key

    @classmethod
    def from_seed(cls, seed: bytes) -> GroupKey:
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"vtpm-lab-group-key" + seed).digest()))

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> GroupKey:
        return cls(Ed25519PrivateKey.from_private_bytes(raw))

    def private_bytes(self) -> bytes:
        return self._key.private_bytes(
            serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
        )

    @property
    def public_raw(self) -> bytes:
        return self._key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def sign(self, data: bytes) -> bytes:
        return self._key.sign(data)


@dataclass(frozen=True)
class Quote:
    mrenclave: bytes
    mrsigner: bytes
    user_data: bytes
    signature: bytes

    def signed_body(self) -> bytes:
        return (
            Writer()
            .raw(_QUOTE_MAGIC)
            .u16(QUOTE_FORMAT_VERSION)
            .fixed(self.mrenclave, 32)
            .fixed(self.mrsigner, 32)
            .fixed(self.user_data, USER_DATA_SIZE)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return self.signed_body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        try:
            r = Reader(data)
            r.expect_magic(_QUOTE_MAGIC)
            if r.u16() != QUOTE_FORMAT_VERSION:
                raise EnclaveError("ERR_CORRUPT", "unsupported quote version")
            quote = cls(
                mrenclave=r.raw(32),
                mrsigner=r.raw(32),
                user_data=r.raw(USER_DATA_SIZE),
                signature=r.raw(ED25519_SIG_SIZE),
            )
            r.finish()
        except MarshalError as exc:
            raise EnclaveError("ERR_CORRUPT", f"quote: {exc.message}") from exc
        return quote


def pad_user_data(digest: bytes) -> bytes:
    if len(digest) > USER_DATA_SIZE:
        raise ValueError(f"user data is at most {USER_DATA_SIZE} bytes")
    return digest.ljust(USER_DATA_SIZE, b"\x00")


def quote(identity: EnclaveIdentity, user_data: bytes, group_key: GroupKey) -> Quote:
    unsigned = Quote(identity.mrenclave, identity.mrsigner, pad_user_data(user_data), b"")
    return Quote(
        mrenclave=unsigned.mrenclave,
        mrsigner=unsigned.mrsigner,
        user_data=unsigned.user_data,
        signature=group_key.sign(unsigned.signed_body()),
    )


def verify_quote(q: Quote, group_public: bytes) -> bool:
    if len(group_public) != ED25519_KEY_SIZE:
        return False
    return verify_ed25519(group_public, q.signed_body(), q.signature)

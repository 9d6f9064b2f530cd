"""Enclave measurement and the signed enclave file.

A signed enclave bundles the code blob with the signer's public key and an
Ed25519 signature over the code measurement, standing in for SIGSTRUCT.
Launching verifies that signature before the identity is trusted.
"""
from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from vtpm.errors import EnclaveError, MarshalError
from vtpm.marshal import Reader, Writer


logger = logging.getLogger("vtpm-lab")

_ENCLAVE_MAGIC = b"SVEF"
ENCLAVE_FORMAT_VERSION = 1
ED25519_KEY_SIZE = 32
ED25519_SIG_SIZE = 64


class SealPolicy(enum.IntEnum):
    BY_ENCLAVE = 1
    BY_SIGNER = 2


@dataclass(frozen=True)
class EnclaveIdentity:
    mrenclave: bytes
    mrsigner: bytes

    def register(self, policy: SealPolicy) -> bytes:
        return self.mrenclave if policy == SealPolicy.BY_ENCLAVE else self.mrsigner

    def describe(self) -> dict[str, str]:
        return {"mrenclave": self.mrenclave.hex(), "mrsigner": self.mrsigner.hex()}


def measure(code_blob: bytes, signer_key_pub: bytes) -> EnclaveIdentity:
    return EnclaveIdentity(
        mrenclave=hashlib.sha256(code_blob).digest(),
        mrsigner=hashlib.sha256(signer_key_pub).digest(),
    )


def vtpm_code_blob() -> bytes:
    """The measured vTPM code: the tpm_core sources, in a stable order."""
    core_dir = Path(__file__).resolve().parents[1] / "core"
    w = Writer()
    for path in sorted(core_dir.glob("*.py")):
        w.sized16(path.name.encode("utf-8")).sized32(path.read_bytes())
    return w.getvalue()


# --- user keys -------------------------------------------------------------


class UserKey:
    """One Ed25519 keypair per user: signs the enclave file and the VM image."""

    def __init__(self, private_key: Ed25519PrivateKey) -> None:
        self._key = private_key

    @classmethod
    def generate(cls, seed: bytes | None = None) -> UserKey:
        if seed is None:
            return cls(Ed25519PrivateKey.generate())
        return cls(Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"vtpm-lab-user-key" + seed).digest()))

    @classmethod
    def from_private_bytes(cls, raw: bytes) -> UserKey:
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


def verify_ed25519(public_raw: bytes, data: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_raw).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


# --- signed enclave file ---------------------------------------------------


@dataclass(frozen=True)
class SignedEnclave:
    code_blob: bytes
    signer_pub: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        return (
            Writer()
            .raw(_ENCLAVE_MAGIC)
            .u16(ENCLAVE_FORMAT_VERSION)
            .fixed(self.signer_pub, ED25519_KEY_SIZE)
            .fixed(self.signature, ED25519_SIG_SIZE)
            .sized32(self.code_blob)
            .getvalue()
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> SignedEnclave:
        try:
            r = Reader(data)
            r.expect_magic(_ENCLAVE_MAGIC)
            if r.u16() != ENCLAVE_FORMAT_VERSION:
                raise EnclaveError("ERR_CORRUPT", "unsupported enclave file version")
            signer_pub, signature = r.raw(ED25519_KEY_SIZE), r.raw(ED25519_SIG_SIZE)
            code_blob = r.sized32()
            r.finish()
        except MarshalError as exc:
            raise EnclaveError("ERR_CORRUPT", f"enclave file: {exc.message}") from exc
        return cls(code_blob=code_blob, signer_pub=signer_pub, signature=signature)


def sign_enclave(code_blob: bytes, user_key: UserKey) -> SignedEnclave:
    mrenclave = hashlib.sha256(code_blob).digest()
    return SignedEnclave(code_blob=code_blob, signer_pub=user_key.public_raw, signature=user_key.sign(mrenclave))


def launch_enclave(signed: SignedEnclave) -> EnclaveIdentity:
    identity = measure(signed.code_blob, signed.signer_pub)
    if not verify_ed25519(signed.signer_pub, identity.mrenclave, signed.signature):
        logger.warning("[enclave/launch] signature check failed mrsigner=%s", identity.mrsigner.hex()[:16])
        raise EnclaveError("ERR_BAD_SIGNATURE", "enclave signature does not verify under its signer key")
    logger.info(
        "[enclave/launch] mrenclave=%s mrsigner=%s", identity.mrenclave.hex()[:16], identity.mrsigner.hex()[:16]
    )
    return identity

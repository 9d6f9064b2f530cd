"""Key derivation, private-part wrapping and the TPM-side crypto operations.

Everything here takes an explicit RNG so randomized commands are reproducible
in test mode (pycryptodome accepts `randfunc` where `cryptography` does not).
"""
from __future__ import annotations

import hashlib
import struct
from functools import lru_cache

from Crypto.Cipher import AES, PKCS1_OAEP
from Crypto.Hash import SHA256
from Crypto.Protocol.KDF import HKDF
from Crypto.PublicKey import RSA
from Crypto.Signature import pss
from Crypto.Util.Padding import pad, unpad

from vtpm.core.rng import DeterministicRng, Rng
from vtpm.core.state import Hierarchy, KeyKind, KeyObject, TpmState
from vtpm.errors import TpmError


AES_KEY_SIZE = 32
AES_BLOCK = 16
GCM_NONCE_SIZE = 12
GCM_TAG_SIZE = 16
OAEP_HASH_SIZE = 32
DEFAULT_RSA_BITS = 2048

RSA_KINDS = (KeyKind.RSA_SIGNING, KeyKind.RSA_DECRYPTION)


def hkdf(master: bytes, context: bytes, length: int = 32) -> bytes:
    return HKDF(master, length, b"", SHA256, context=context)


def template_digest(kind: KeyKind, unique: bytes, rsa_bits: int) -> bytes:
    return hashlib.sha256(b"vtpm-lab-template" + struct.pack(">BI", int(kind), rsa_bits) + unique).digest()


@lru_cache(maxsize=256)
def _generate_rsa_der(material: bytes, bits: int) -> bytes:
    # same material + bits -> same key; the cache only saves the prime search
    key = RSA.generate(bits, randfunc=DeterministicRng(material).read)
    return key.export_key("DER")


def clear_derivation_cache() -> None:
    _generate_rsa_der.cache_clear()


def derive_primary_material(
    seed: bytes,
    hierarchy: Hierarchy,
    kind: KeyKind,
    unique: bytes,
    rsa_bits: int = DEFAULT_RSA_BITS,
) -> tuple[bytes, bytes]:
    """Return (public_part, private_material) for a primary object.

    HKDF-expand of (hierarchy seed, template digest); identical inputs give
    identical keys.
    """
    if kind == KeyKind.SEALED_DATA:
        raise TpmError("ERR_WRONG_KEY_KIND", "primary objects cannot be sealed data")
    tdigest = template_digest(kind, unique, rsa_bits)
    material = hkdf(seed, b"vtpm-lab-primary" + struct.pack(">I", int(hierarchy)) + tdigest)
    if kind in RSA_KINDS:
        der = _generate_rsa_der(material, rsa_bits)
        return rsa_public_der(der), der
    return hashlib.sha256(b"vtpm-lab-sym" + tdigest).digest(), material


def generate_ordinary_material(kind: KeyKind, rng: Rng, rsa_bits: int = DEFAULT_RSA_BITS) -> tuple[bytes, bytes]:
    if kind in RSA_KINDS:
        der = RSA.generate(rsa_bits, randfunc=rng.read).export_key("DER")
        return rsa_public_der(der), der
    if kind == KeyKind.AES_SYMMETRIC:
        unique = rng.read(32)
        return hashlib.sha256(b"vtpm-lab-sym" + unique).digest(), rng.read(AES_KEY_SIZE)
    raise TpmError("ERR_WRONG_KEY_KIND", f"cannot generate {kind.name}")


def rsa_public_der(private_der: bytes) -> bytes:
    return RSA.import_key(private_der).publickey().export_key("DER")


# --- private-part wrapping -------------------------------------------------


def wrap(parent_secret: bytes, public_part: bytes, private_material: bytes, rng: Rng) -> bytes:
    key = hkdf(parent_secret, b"vtpm-lab-wrap")
    nonce = rng.read(GCM_NONCE_SIZE)
    cipher = AES.new(key, AES.MODE_GCM, nonce=nonce)
    cipher.update(public_part)
    ct, tag = cipher.encrypt_and_digest(private_material)
    return nonce + ct + tag


def unwrap(parent_secret: bytes, public_part: bytes, wrapped: bytes) -> bytes:
    if len(wrapped) < GCM_NONCE_SIZE + GCM_TAG_SIZE:
        raise TpmError("ERR_INTEGRITY", "wrapped private part too short")
    key = hkdf(parent_secret, b"vtpm-lab-wrap")
    nonce, ct, tag = wrapped[:GCM_NONCE_SIZE], wrapped[GCM_NONCE_SIZE:-GCM_TAG_SIZE], wrapped[-GCM_TAG_SIZE:]
    cipher = AES.new(key, AES.MODE_GCM, nonce=nonce)
    cipher.update(public_part)
    try:
        return cipher.decrypt_and_verify(ct, tag)
    except ValueError as exc:
        raise TpmError("ERR_INTEGRITY", "private part failed integrity check") from exc


def parent_secret(state: TpmState, parent: int) -> bytes:
    """Secret that wraps children of `parent`: the seed for a hierarchy, else the parent's private material."""
    if parent in {int(h) for h in Hierarchy}:
        return state.seed_for(Hierarchy(parent))
    key = state.loaded_keys.get(parent)
    if key is None:
        raise TpmError("ERR_HANDLE", f"parent handle {parent:#010x} not loaded")
    return private_material(state, key)


def private_material(state: TpmState, key: KeyObject) -> bytes:
    return unwrap(parent_secret(state, key.parent), key.public_part, key.private_part)


def is_storage_parent(state: TpmState, parent: int) -> bool:
    if parent in {int(h) for h in Hierarchy}:
        return parent == int(Hierarchy.STORAGE)
    key = state.loaded_keys.get(parent)
    return key is not None and key.kind in (KeyKind.RSA_DECRYPTION, KeyKind.AES_SYMMETRIC)


# --- operations ------------------------------------------------------------


def rsa_sign(private_der: bytes, message: bytes, rng: Rng) -> bytes:
    key = RSA.import_key(private_der)
    return pss.new(key, rand_func=rng.read).sign(SHA256.new(message))


def rsa_verify(public_der: bytes, message: bytes, signature: bytes) -> bool:
    try:
        key = RSA.import_key(public_der)
        pss.new(key).verify(SHA256.new(message), signature)
    except (ValueError, TypeError, IndexError):
        return False
    return True


def oaep_max_payload(public_der: bytes) -> int:
    modulus_bytes = (RSA.import_key(public_der).size_in_bits() + 7) // 8
    return modulus_bytes - 2 * OAEP_HASH_SIZE - 2


def rsa_encrypt(public_der: bytes, plaintext: bytes, rng: Rng) -> bytes:
    if len(plaintext) > oaep_max_payload(public_der):
        raise TpmError("ERR_PAYLOAD_TOO_LARGE", f"{len(plaintext)} bytes exceed the OAEP bound")
    cipher = PKCS1_OAEP.new(RSA.import_key(public_der), hashAlgo=SHA256, randfunc=rng.read)
    return cipher.encrypt(plaintext)


def rsa_decrypt(private_der: bytes, ciphertext: bytes) -> bytes:
    cipher = PKCS1_OAEP.new(RSA.import_key(private_der), hashAlgo=SHA256)
    try:
        return cipher.decrypt(ciphertext)
    except ValueError as exc:
        raise TpmError("ERR_INTEGRITY", "OAEP decryption failed") from exc


def aes_cbc_encrypt(key: bytes, plaintext: bytes, rng: Rng) -> bytes:
    iv = rng.read(AES_BLOCK)
    return iv + AES.new(key, AES.MODE_CBC, iv=iv).encrypt(pad(plaintext, AES_BLOCK))


def aes_cbc_decrypt(key: bytes, data: bytes) -> bytes:
    if len(data) < 2 * AES_BLOCK or len(data) % AES_BLOCK:
        raise TpmError("ERR_BAD_SIZE", "AES-CBC input must be IV plus whole blocks")
    iv, ct = data[:AES_BLOCK], data[AES_BLOCK:]
    try:
        return unpad(AES.new(key, AES.MODE_CBC, iv=iv).decrypt(ct), AES_BLOCK)
    except ValueError as exc:
        raise TpmError("ERR_INTEGRITY", "bad padding") from exc

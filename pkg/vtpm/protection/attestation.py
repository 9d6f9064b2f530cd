"""Trust establishment between a vTPM enclave and a Privacy CA.

Flow (one round trip per message):

    PCA      -> enclave : AttestationRequest(challenge_nonce, requested_key)
    enclave  -> quoting : Report(mrenclave, mrsigner, H(key_pub || nonce))
    quoting  -> PCA     : Quote signed under the platform group key
    PCA                 : verification service checks the group signature,
                          allowlist checks mrenclave, user_data is recomputed
                          from the presented key and the PCA's live nonce
    PCA      -> enclave : Certificate | Rejection
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Protocol, Union

import httpx
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from vtpm.enclave.identity import ED25519_SIG_SIZE, EnclaveIdentity, verify_ed25519
from vtpm.enclave.quoting import GroupKey, Quote, pad_user_data, quote, verify_quote
from vtpm.errors import AttestationError, MarshalError
from vtpm.marshal import Reader, Writer


logger = logging.getLogger("vtpm-lab")

NONCE_SIZE = 32
_CERT_MAGIC = b"SVCT"
CERT_FORMAT_VERSION = 1
DEFAULT_VALIDITY_MS = 86_400_000
DEFAULT_CHALLENGE_TTL_MS = 300_000
DEFAULT_MAX_OUTSTANDING = 1024


class KeyRole(str, enum.Enum):
    EK = "EK"
    AIK = "AIK"


class Verdict(str, enum.Enum):
    ISSUED = "ISSUED"
    REJECT_BAD_SIGNATURE = "REJECT_BAD_SIGNATURE"
    REJECT_UNKNOWN_MEASUREMENT = "REJECT_UNKNOWN_MEASUREMENT"
    REJECT_STALE_NONCE = "REJECT_STALE_NONCE"
    REJECT_BAD_EK_CERT = "REJECT_BAD_EK_CERT"


@dataclass(frozen=True)
class AttestationRequest:
    challenge_nonce: bytes
    requested_key: KeyRole


@dataclass(frozen=True)
class Report:
    mrenclave: bytes
    mrsigner: bytes
    user_data: bytes


@dataclass(frozen=True)
class Certificate:
    serial: int
    role: KeyRole
    subject_key_pub: bytes
    issuer: bytes
    mrenclave: bytes
    not_before_ms: int
    not_after_ms: int
    signature: bytes = b""

    def signed_body(self) -> bytes:
        return (
            Writer()
            .raw(_CERT_MAGIC)
            .u16(CERT_FORMAT_VERSION)
            .u64(self.serial)
            .sized16(self.role.value.encode("ascii"))
            .sized32(self.subject_key_pub)
            .fixed(self.issuer, 32)
            .fixed(self.mrenclave, 32)
            .u64(self.not_before_ms)
            .u64(self.not_after_ms)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return self.signed_body() + self.signature

    @classmethod
    def from_bytes(cls, data: bytes) -> Certificate:
        try:
            r = Reader(data)
            r.expect_magic(_CERT_MAGIC)
            if r.u16() != CERT_FORMAT_VERSION:
                raise AttestationError("ERR_CORRUPT", "unsupported certificate version")
            cert = cls(
                serial=r.u64(),
                role=KeyRole(r.sized16().decode("ascii")),
                subject_key_pub=r.sized32(),
                issuer=r.raw(32),
                mrenclave=r.raw(32),
                not_before_ms=r.u64(),
                not_after_ms=r.u64(),
                signature=r.raw(ED25519_SIG_SIZE),
            )
            r.finish()
        except (MarshalError, ValueError) as exc:
            raise AttestationError("ERR_CORRUPT", f"certificate: {exc}") from exc
        return cert


@dataclass(frozen=True)
class Rejection:
    verdict: Verdict
    message: str = ""


Outcome = Union[Certificate, Rejection]


@dataclass
class PcaPolicy:
    """`attest_enclave=False` is the legacy vTPM PCA: it certifies whatever key it is handed."""

    allowlist: frozenset[bytes] = field(default_factory=frozenset)
    attest_enclave: bool = True

    @classmethod
    def from_hex(cls, values: list[str]) -> PcaPolicy:
        return cls(frozenset(bytes.fromhex(v) for v in values))


def key_binding(key_pub: bytes, nonce: bytes) -> bytes:
    return hashlib.sha256(key_pub + nonce).digest()


# --- enclave side ----------------------------------------------------------


def enclave_report(identity: EnclaveIdentity, key_pub: bytes, req: AttestationRequest) -> Report:
    return Report(identity.mrenclave, identity.mrsigner, key_binding(key_pub, req.challenge_nonce))


def quote_report(report: Report, group_key: GroupKey) -> Quote:
    return quote(EnclaveIdentity(report.mrenclave, report.mrsigner), report.user_data, group_key)


# --- verification service (IAS stand-in) -----------------------------------


class VerificationService:
    def __init__(self, group_public: bytes) -> None:
        self.group_public = group_public

    def verify(self, q: Quote) -> bool:
        return verify_quote(q, self.group_public)


# --- Privacy CA ------------------------------------------------------------


def verify_certificate(cert: Certificate, pca_public: bytes, *, now_ms: int | None = None) -> bool:
    if not verify_ed25519(pca_public, cert.signed_body(), cert.signature):
        return False
    if cert.issuer != hashlib.sha256(pca_public).digest():
        return False
    return now_ms is None or cert.not_before_ms <= now_ms < cert.not_after_ms


class PrivacyCa:
    def __init__(
        self,
        signing_key: Ed25519PrivateKey,
        policy: PcaPolicy,
        verifier: VerificationService,
        *,
        clock: Callable[[], int],
        validity_ms: int = DEFAULT_VALIDITY_MS,
        randbytes: Callable[[int], bytes] = os.urandom,
        challenge_ttl_ms: int = DEFAULT_CHALLENGE_TTL_MS,
        max_outstanding: int = DEFAULT_MAX_OUTSTANDING,
    ) -> None:
        if challenge_ttl_ms <= 0 or max_outstanding <= 0:
            raise ValueError("challenge_ttl_ms and max_outstanding must be positive")
        self._key = signing_key
        self.policy = policy
        self.verifier = verifier
        self.clock = clock
        self.validity_ms = validity_ms
        self._randbytes = randbytes
        self._lock = threading.Lock()
        self.challenge_ttl_ms = challenge_ttl_ms
        self.max_outstanding = max_outstanding
        # nonce -> (role, issued_ms), oldest first
        self._outstanding: OrderedDict[bytes, tuple[KeyRole, int]] = OrderedDict()
        self._revoked: set[int] = set()
        self._next_serial = 1

    @classmethod
    def from_seed(cls, seed: bytes, policy: PcaPolicy, verifier: VerificationService, **kwargs) -> PrivacyCa:
        key = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(b"vtpm-lab-pca-key" + seed).digest())
        return cls(key, policy, verifier, **kwargs)

    @property
    def public_raw(self) -> bytes:
        return self._key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    @property
    def pca_id(self) -> bytes:
        return hashlib.sha256(self.public_raw).digest()

    def _expire_challenges(self, now: int) -> None:
        while self._outstanding:
            _, issued = next(iter(self._outstanding.values()))
            if now - issued <= self.challenge_ttl_ms:
                break
            self._outstanding.popitem(last=False)

    @property
    def outstanding_challenges(self) -> int:
        with self._lock:
            return len(self._outstanding)

    def challenge(self, requested_key: KeyRole = KeyRole.EK) -> AttestationRequest:
        now = self.clock()
        with self._lock:
            self._expire_challenges(now)
            while len(self._outstanding) >= self.max_outstanding:
                self._outstanding.popitem(last=False)
            nonce = self._randbytes(NONCE_SIZE)
            while nonce in self._outstanding:
                nonce = self._randbytes(NONCE_SIZE)
            self._outstanding[nonce] = (KeyRole(requested_key), now)
        return AttestationRequest(nonce, KeyRole(requested_key))

    def _take_nonce(self, req: AttestationRequest) -> bool:
        now = self.clock()
        with self._lock:
            entry = self._outstanding.pop(req.challenge_nonce, None)
        if entry is None:
            return False
        role, issued = entry
        return role == req.requested_key and now - issued <= self.challenge_ttl_ms

    def _check_quote(self, q: Quote, key_pub: bytes, req: AttestationRequest) -> Rejection | None:
        live = self._take_nonce(req)
        if not self.policy.attest_enclave:
            return None
        if not self.verifier.verify(q):
            return Rejection(Verdict.REJECT_BAD_SIGNATURE, "quote signature does not verify under the group key")
        if q.mrenclave not in self.policy.allowlist:
            return Rejection(Verdict.REJECT_UNKNOWN_MEASUREMENT, f"mrenclave {q.mrenclave.hex()[:16]} not allowlisted")
        expected = pad_user_data(key_binding(key_pub, req.challenge_nonce))
        if not live or not hmac.compare_digest(q.user_data, expected):
            return Rejection(Verdict.REJECT_STALE_NONCE, "quote does not embed a live challenge for this key")
        return None

    def _issue(self, role: KeyRole, key_pub: bytes, mrenclave: bytes) -> Certificate:
        now = self.clock()
        with self._lock:
            serial = self._next_serial
            self._next_serial += 1
        unsigned = Certificate(serial, role, key_pub, self.pca_id, mrenclave, now, now + self.validity_ms)
        cert = Certificate(
            serial=unsigned.serial,
            role=unsigned.role,
            subject_key_pub=unsigned.subject_key_pub,
            issuer=unsigned.issuer,
            mrenclave=unsigned.mrenclave,
            not_before_ms=unsigned.not_before_ms,
            not_after_ms=unsigned.not_after_ms,
            signature=self._key.sign(unsigned.signed_body()),
        )
        logger.info("[pca/issue] role=%s serial=%d mrenclave=%s", role.value, serial, mrenclave.hex()[:16])
        return cert

    def _reject(self, rejection: Rejection) -> Rejection:
        logger.warning("[pca/reject] verdict=%s message=%s", rejection.verdict.value, rejection.message)
        return rejection

    def verify_and_issue(self, q: Quote, ek_pub: bytes, req: AttestationRequest) -> Outcome:
        if req.requested_key != KeyRole.EK:
            return self._reject(Rejection(Verdict.REJECT_STALE_NONCE, "challenge was not issued for an EK"))
        rejection = self._check_quote(q, ek_pub, req)
        if rejection is not None:
            return self._reject(rejection)
        return self._issue(KeyRole.EK, ek_pub, q.mrenclave)

    def issue_aik(self, q: Quote, aik_pub: bytes, ek_cert: Certificate | None, req: AttestationRequest) -> Outcome:
        if req.requested_key != KeyRole.AIK:
            return self._reject(Rejection(Verdict.REJECT_STALE_NONCE, "challenge was not issued for an AIK"))
        rejection = self._check_quote(q, aik_pub, req)
        if rejection is not None:
            return self._reject(rejection)
        if ek_cert is None:
            return self._reject(Rejection(Verdict.REJECT_BAD_EK_CERT, "no EK certificate presented"))
        if (
            ek_cert.role != KeyRole.EK
            or ek_cert.serial in self._revoked
            or ek_cert.mrenclave != q.mrenclave
            or not verify_certificate(ek_cert, self.public_raw, now_ms=self.clock())
        ):
            return self._reject(Rejection(Verdict.REJECT_BAD_EK_CERT, f"EK certificate {ek_cert.serial} is not valid"))
        return self._issue(KeyRole.AIK, aik_pub, q.mrenclave)

    def revoke(self, serial: int) -> None:
        with self._lock:
            self._revoked.add(serial)
        logger.info("[pca/revoke] serial=%d", serial)

    def is_revoked(self, serial: int) -> bool:
        return serial in self._revoked


# --- transports ------------------------------------------------------------


class PcaClient(Protocol):
    def public_key(self) -> bytes: ...

    def challenge(self, requested_key: KeyRole) -> AttestationRequest: ...

    def submit_ek(self, q: Quote, ek_pub: bytes, req: AttestationRequest) -> Outcome: ...

    def submit_aik(self, q: Quote, aik_pub: bytes, ek_cert: Certificate | None, req: AttestationRequest) -> Outcome: ...


class InProcessPcaClient:
    def __init__(self, pca: PrivacyCa) -> None:
        self.pca = pca

    def public_key(self) -> bytes:
        return self.pca.public_raw

    def challenge(self, requested_key: KeyRole) -> AttestationRequest:
        return self.pca.challenge(requested_key)

    def submit_ek(self, q: Quote, ek_pub: bytes, req: AttestationRequest) -> Outcome:
        return self.pca.verify_and_issue(q, ek_pub, req)

    def submit_aik(self, q: Quote, aik_pub: bytes, ek_cert: Certificate | None, req: AttestationRequest) -> Outcome:
        return self.pca.issue_aik(q, aik_pub, ek_cert, req)


def request_to_json(req: AttestationRequest) -> dict[str, str]:
    return {"challengeNonce": req.challenge_nonce.hex(), "requestedKey": req.requested_key.value}


def request_from_json(payload: dict[str, str]) -> AttestationRequest:
    return AttestationRequest(bytes.fromhex(payload["challengeNonce"]), KeyRole(payload["requestedKey"]))


def outcome_to_json(outcome: Outcome) -> dict[str, str]:
    if isinstance(outcome, Certificate):
        return {"verdict": Verdict.ISSUED.value, "certificate": outcome.to_bytes().hex(), "serial": str(outcome.serial)}
    return {"verdict": outcome.verdict.value, "message": outcome.message}


def outcome_from_json(payload: dict[str, str]) -> Outcome:
    if payload.get("verdict") == Verdict.ISSUED.value:
        return Certificate.from_bytes(bytes.fromhex(payload["certificate"]))
    return Rejection(Verdict(payload["verdict"]), payload.get("message", ""))


class HttpPcaClient:
    """Loopback transport against the `/pca` router."""

    def __init__(self, client: httpx.Client) -> None:
        self._http = client

    @classmethod
    def connect(cls, base_url: str, *, timeout: float = 10.0) -> HttpPcaClient:
        return cls(httpx.Client(base_url=base_url, timeout=timeout))

    def _post(self, path: str, body: dict[str, object]) -> dict[str, str]:
        r = self._http.post(path, json=body)
        if r.status_code >= 400:
            detail = r.json().get("detail", {})
            reason = detail.get("reason", "ERR_ATTESTATION") if isinstance(detail, dict) else "ERR_ATTESTATION"
            raise AttestationError(reason, f"PCA returned HTTP {r.status_code}")
        return r.json()

    def public_key(self) -> bytes:
        r = self._http.get("/pca/public-key")
        r.raise_for_status()
        return bytes.fromhex(r.json()["publicKey"])

    def challenge(self, requested_key: KeyRole) -> AttestationRequest:
        return request_from_json(self._post("/pca/challenge", {"requestedKey": KeyRole(requested_key).value}))

    def submit_ek(self, q: Quote, ek_pub: bytes, req: AttestationRequest) -> Outcome:
        body = {"quote": q.to_bytes().hex(), "keyPub": ek_pub.hex(), "request": request_to_json(req)}
        return outcome_from_json(self._post("/pca/ek", body))

    def submit_aik(self, q: Quote, aik_pub: bytes, ek_cert: Certificate | None, req: AttestationRequest) -> Outcome:
        body = {
            "quote": q.to_bytes().hex(),
            "keyPub": aik_pub.hex(),
            "request": request_to_json(req),
            "ekCertificate": ek_cert.to_bytes().hex() if ek_cert is not None else None,
        }
        return outcome_from_json(self._post("/pca/aik", body))


# --- full flow -------------------------------------------------------------


@dataclass(frozen=True)
class AttestationResult:
    ek: Outcome
    aik: Outcome | None

    @property
    def succeeded(self) -> bool:
        return isinstance(self.ek, Certificate) and isinstance(self.aik, Certificate)


def attest(
    identity: EnclaveIdentity,
    group_key: GroupKey,
    ek_pub: bytes,
    aik_pub: bytes,
    client: PcaClient,
) -> AttestationResult:
    req = client.challenge(KeyRole.EK)
    ek = client.submit_ek(quote_report(enclave_report(identity, ek_pub, req), group_key), ek_pub, req)
    if not isinstance(ek, Certificate):
        return AttestationResult(ek=ek, aik=None)
    req = client.challenge(KeyRole.AIK)
    aik = client.submit_aik(quote_report(enclave_report(identity, aik_pub, req), group_key), aik_pub, ek, req)
    return AttestationResult(ek=ek, aik=aik)

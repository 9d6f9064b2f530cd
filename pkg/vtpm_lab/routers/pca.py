from __future__ import annotations

import logging
from typing import Any, Dict, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from vtpm.enclave.quoting import Quote
from vtpm.errors import VtpmError
from vtpm.protection.attestation import Certificate, KeyRole, outcome_to_json, request_from_json, request_to_json

from vtpm_lab.services.authorities import get_authorities


router = APIRouter(tags=["Privacy CA"])
logger = logging.getLogger("vtpm-lab")


class ChallengeBody(BaseModel):
    requestedKey: str = KeyRole.EK.value


class SubmitBody(BaseModel):
    quote: str
    keyPub: str
    request: Dict[str, str]
    ekCertificate: Optional[str] = None


class RevokeBody(BaseModel):
    serial: int


def _bad_request(reason: str, message: str) -> HTTPException:
    return HTTPException(status_code=400, detail={"reason": reason, "message": message})


def _decode(body: SubmitBody) -> tuple[Quote, bytes, Any]:
    try:
        q = Quote.from_bytes(bytes.fromhex(body.quote))
        key_pub = bytes.fromhex(body.keyPub)
        req = request_from_json(body.request)
    except VtpmError as exc:
        raise _bad_request(exc.reason, exc.message) from exc
    except (KeyError, ValueError) as exc:
        raise _bad_request("ERR_MALFORMED", f"unreadable attestation payload: {exc}") from exc
    return q, key_pub, req


@router.get("/pca/public-key")
def pca_public_key() -> dict[str, str]:
    """Chave pública Ed25519 da Privacy CA (para verificação independente dos certificados)."""

    pca = get_authorities().pca
    return {"publicKey": pca.public_raw.hex(), "pcaId": pca.pca_id.hex()}


@router.post("/pca/challenge")
def pca_challenge(body: ChallengeBody) -> dict[str, str]:
    """Emite um nonce de desafio vivo para uma EK ou AIK."""

    try:
        role = KeyRole(body.requestedKey)
    except ValueError:
        raise _bad_request("ERR_MALFORMED", f"requestedKey must be one of {[r.value for r in KeyRole]}")
    req = get_authorities().pca.challenge(role)
    logger.info("[pca/challenge] role=%s", role.value)
    return request_to_json(req)


@router.post("/pca/ek")
def pca_issue_ek(body: SubmitBody) -> dict[str, str]:
    """Verifica a quote do enclave e, se aceita, emite o certificado da EK.

    Uma rejeição não é erro HTTP: o veredito vem no corpo (`REJECT_*`).
    """

    q, key_pub, req = _decode(body)
    return outcome_to_json(get_authorities().pca.verify_and_issue(q, key_pub, req))


@router.post("/pca/aik")
def pca_issue_aik(body: SubmitBody) -> dict[str, str]:
    """Emite o certificado da AIK mediante quote válida e certificado de EK vigente."""

    q, key_pub, req = _decode(body)
    ek_cert: Certificate | None = None
    if body.ekCertificate:
        try:
            ek_cert = Certificate.from_bytes(bytes.fromhex(body.ekCertificate))
        except VtpmError as exc:
            raise _bad_request(exc.reason, exc.message) from exc
        except ValueError as exc:
            raise _bad_request("ERR_MALFORMED", f"ekCertificate is not hex: {exc}") from exc
    return outcome_to_json(get_authorities().pca.issue_aik(q, key_pub, ek_cert, req))


@router.post("/pca/revoke")
def pca_revoke(body: RevokeBody) -> dict[str, Any]:
    """Revoga um certificado pelo número de série."""

    pca = get_authorities().pca
    pca.revoke(body.serial)
    return {"serial": body.serial, "revoked": pca.is_revoked(body.serial)}

from __future__ import annotations

import logging
from typing import Any

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel

from vtpm.errors import BindingError
from vtpm.protection.nvram import BindingReport

from vtpm_lab.services.authorities import get_authorities


router = APIRouter(tags=["Cloud registry"])
logger = logging.getLogger("vtpm-lab")


class RegisterBody(BaseModel):
    instance: str
    enclaveMeasurement: str
    vmDigest: str


class CheckBody(BaseModel):
    instance: str
    enclaveMeasurement: str
    vmMeasurement: str
    channelAuthTag: str


def _status_for(exc: BindingError) -> int:
    return 404 if exc.reason == "ERR_NOT_REGISTERED" else 400


@router.post("/registry")
def registry_register(body: RegisterBody) -> dict[str, Any]:
    """Registra (ou substitui) a medida de enclave e o digest da VM de uma instância."""

    try:
        entry = get_authorities().registry.register(
            body.instance, bytes.fromhex(body.enclaveMeasurement), bytes.fromhex(body.vmDigest)
        )
    except ValueError as exc:
        raise HTTPException(status_code=400, detail={"reason": "ERR_MALFORMED", "message": str(exc)}) from exc
    except BindingError as exc:
        raise HTTPException(status_code=_status_for(exc), detail={"reason": exc.reason, "message": exc.message}) from exc
    return {"instance": entry.instance, "registered": True}


@router.get("/registry/{instance}")
def registry_lookup(instance: str) -> dict[str, str]:
    """Entrada vigente (a última registrada) de uma instância."""

    try:
        entry = get_authorities().registry.lookup(instance)
    except BindingError as exc:
        raise HTTPException(status_code=_status_for(exc), detail={"reason": exc.reason, "message": exc.message}) from exc
    return {
        "instance": entry.instance,
        "enclaveMeasurement": entry.enclave_measurement.hex(),
        "vmDigest": entry.vm_digest.hex(),
    }


@router.post("/registry/check")
def registry_check(body: CheckBody) -> dict[str, str]:
    """Verificação remota do vínculo VM/enclave feita pelo lançador no boot."""

    try:
        report = BindingReport(
            instance=body.instance,
            enclave_measurement=bytes.fromhex(body.enclaveMeasurement),
            vm_measurement=bytes.fromhex(body.vmMeasurement),
            channel_auth_tag=bytes.fromhex(body.channelAuthTag),
        )
    except ValueError as exc:
        raise HTTPException(status_code=400, detail={"reason": "ERR_MALFORMED", "message": str(exc)}) from exc
    try:
        verdict = get_authorities().registry.check(report)
    except BindingError as exc:
        raise HTTPException(status_code=_status_for(exc), detail={"reason": exc.reason, "message": exc.message}) from exc
    logger.info("[registry/check] instance=%s verdict=%s", body.instance, verdict.value)
    return {"instance": body.instance, "verdict": verdict.value}

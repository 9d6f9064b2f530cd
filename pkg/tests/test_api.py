from __future__ import annotations

import hashlib

import pytest
from fastapi.testclient import TestClient

from app import app
from vtpm_lab.config import Settings
from vtpm_lab.services.authorities import Authorities, set_authorities
from vtpm.enclave.identity import UserKey, measure, vtpm_code_blob
from vtpm.enclave.platform import Platform
from vtpm.enclave.timebase import SystemTime
from vtpm.protection.attestation import Certificate, HttpPcaClient, Verdict, attest, verify_certificate
from vtpm.protection.nvram import enclave_measurement, make_binding_report


client = TestClient(app)

EK_PUB = b"ek" * 32
AIK_PUB = b"aik" * 32


@pytest.fixture
def authorities(tmp_path):
    auth = Authorities.build(Settings(root=tmp_path, seed="api-tests"))
    set_authorities(auth)
    yield auth
    set_authorities(None)


@pytest.fixture
def platform(authorities) -> Platform:
    # same directory, so the same group key the PCA verifies against
    return Platform(authorities.settings.resolved_platform_dir, time_source=SystemTime())


@pytest.fixture
def identity():
    return measure(vtpm_code_blob(), UserKey.generate(b"api-user").public_raw)


def test_health() -> None:
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok"}


def test_version() -> None:
    payload = client.get("/version").json()
    assert payload["name"] == "vtpm-lab"
    assert set(payload) == {"name", "version", "gitSha", "buildTime"}


def test_attestation_over_http(authorities, platform, identity) -> None:
    result = attest(identity, platform.group_key, EK_PUB, AIK_PUB, HttpPcaClient(client))
    assert result.succeeded
    assert isinstance(result.aik, Certificate)

    pca_key = bytes.fromhex(client.get("/pca/public-key").json()["publicKey"])
    assert pca_key == authorities.pca.public_raw
    assert verify_certificate(result.aik, pca_key)


def test_unknown_enclave_is_rejected_in_the_body(authorities, platform) -> None:
    patched = measure(b"patched vtpm", UserKey.generate(b"api-user").public_raw)
    result = attest(patched, platform.group_key, EK_PUB, AIK_PUB, HttpPcaClient(client))
    assert not result.succeeded
    assert result.ek.verdict == Verdict.REJECT_UNKNOWN_MEASUREMENT


def test_challenge_rejects_unknown_role(authorities) -> None:
    r = client.post("/pca/challenge", json={"requestedKey": "SRK"})
    assert r.status_code == 400
    assert r.json()["detail"]["reason"] == "ERR_MALFORMED"


def test_submission_with_garbage_quote(authorities) -> None:
    nonce = client.post("/pca/challenge", json={}).json()
    r = client.post("/pca/ek", json={"quote": "zz", "keyPub": "00", "request": nonce})
    assert r.status_code == 400


def test_revoke(authorities) -> None:
    r = client.post("/pca/revoke", json={"serial": 7})
    assert r.json() == {"serial": 7, "revoked": True}
    assert authorities.pca.is_revoked(7)


def test_registry_register_lookup_and_check(authorities, identity) -> None:
    image = b"guest image"
    r = client.post(
        "/registry",
        json={
            "instance": "vm1",
            "enclaveMeasurement": enclave_measurement(identity).hex(),
            "vmDigest": hashlib.sha256(image).hexdigest(),
        },
    )
    assert r.json() == {"instance": "vm1", "registered": True}
    assert client.get("/registry/vm1").json()["vmDigest"] == hashlib.sha256(image).hexdigest()

    key = authorities.registry.channel_key
    for vm_image, verdict in ((image, "OK"), (b"other image", "MISMATCH_VM")):
        report = make_binding_report("vm1", identity, vm_image, key)
        body = {
            "instance": report.instance,
            "enclaveMeasurement": report.enclave_measurement.hex(),
            "vmMeasurement": report.vm_measurement.hex(),
            "channelAuthTag": report.channel_auth_tag.hex(),
        }
        assert client.post("/registry/check", json=body).json()["verdict"] == verdict

    forged = make_binding_report("vm1", identity, image, b"not the channel key")
    body = {
        "instance": "vm1",
        "enclaveMeasurement": forged.enclave_measurement.hex(),
        "vmMeasurement": forged.vm_measurement.hex(),
        "channelAuthTag": forged.channel_auth_tag.hex(),
    }
    assert client.post("/registry/check", json=body).json()["verdict"] == "BAD_CHANNEL"


def test_registry_errors(authorities) -> None:
    r = client.get("/registry/ghost")
    assert r.status_code == 404
    assert r.json()["detail"]["reason"] == "ERR_NOT_REGISTERED"

    r = client.post("/registry", json={"instance": "vm1", "enclaveMeasurement": "xyz", "vmDigest": "00"})
    assert r.status_code == 400
    assert r.json()["detail"]["reason"] == "ERR_MALFORMED"

    r = client.post("/registry", json={"instance": "two words", "enclaveMeasurement": "00", "vmDigest": "00"})
    assert r.status_code == 400
    assert r.json()["detail"]["reason"] == "ERR_BAD_INSTANCE"

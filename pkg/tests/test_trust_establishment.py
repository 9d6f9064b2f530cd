from __future__ import annotations

import dataclasses

import pytest

from vtpm.enclave.identity import UserKey, measure
from vtpm.enclave.quoting import GroupKey
from vtpm.errors import AttestationError
from vtpm.protection.attestation import (
    Certificate,
    InProcessPcaClient,
    KeyRole,
    PcaPolicy,
    PrivacyCa,
    Rejection,
    VerificationService,
    Verdict,
    attest,
    enclave_report,
    outcome_from_json,
    outcome_to_json,
    quote_report,
    request_from_json,
    request_to_json,
    verify_certificate,
)

EK_PUB = b"ek-public-key" * 4
AIK_PUB = b"aik-public-key" * 4


@pytest.fixture
def group() -> GroupKey:
    return GroupKey.from_seed(b"group")


@pytest.fixture
def identity():
    return measure(b"vtpm code", UserKey.generate(b"alice").public_raw)


@pytest.fixture
def pca(group, identity, clock) -> PrivacyCa:
    policy = PcaPolicy(frozenset({identity.mrenclave}))
    return PrivacyCa.from_seed(b"pca", policy, VerificationService(group.public_raw), clock=clock.now_ms, validity_ms=60_000)


def _ek_quote(pca: PrivacyCa, identity, group: GroupKey, key_pub: bytes = EK_PUB):
    req = pca.challenge(KeyRole.EK)
    return req, quote_report(enclave_report(identity, key_pub, req), group)


def test_honest_flow_issues_ek_and_aik(pca, group, identity, clock) -> None:
    result = attest(identity, group, EK_PUB, AIK_PUB, InProcessPcaClient(pca))
    assert result.succeeded
    assert isinstance(result.ek, Certificate) and isinstance(result.aik, Certificate)
    assert result.ek.role == KeyRole.EK and result.aik.role == KeyRole.AIK
    assert result.aik.subject_key_pub == AIK_PUB
    assert result.ek.mrenclave == identity.mrenclave
    assert verify_certificate(result.aik, pca.public_raw, now_ms=clock.now_ms())


def test_unknown_measurement_is_rejected(pca, group) -> None:
    intruder = measure(b"patched vtpm", UserKey.generate(b"alice").public_raw)
    result = attest(intruder, group, EK_PUB, AIK_PUB, InProcessPcaClient(pca))
    assert not result.succeeded
    assert result.aik is None
    assert result.ek == Rejection(Verdict.REJECT_UNKNOWN_MEASUREMENT, result.ek.message)


def test_quote_from_foreign_group_key_is_rejected(pca, identity) -> None:
    result = attest(identity, GroupKey.from_seed(b"forged"), EK_PUB, AIK_PUB, InProcessPcaClient(pca))
    assert result.ek.verdict == Verdict.REJECT_BAD_SIGNATURE


def test_replayed_challenge_is_stale(pca, group, identity) -> None:
    req, q = _ek_quote(pca, identity, group)
    assert isinstance(pca.verify_and_issue(q, EK_PUB, req), Certificate)
    replay = pca.verify_and_issue(q, EK_PUB, req)
    assert replay.verdict == Verdict.REJECT_STALE_NONCE


def test_expired_challenge_is_stale(pca, group, identity, clock) -> None:
    req, q = _ek_quote(pca, identity, group)
    clock.advance(pca.challenge_ttl_ms + 1)
    assert pca.verify_and_issue(q, EK_PUB, req).verdict == Verdict.REJECT_STALE_NONCE

    fresh, q = _ek_quote(pca, identity, group)
    clock.advance(pca.challenge_ttl_ms)
    assert isinstance(pca.verify_and_issue(q, EK_PUB, fresh), Certificate)


def test_outstanding_challenges_are_bounded(group, identity, clock) -> None:
    pca = PrivacyCa.from_seed(
        b"pca",
        PcaPolicy(frozenset({identity.mrenclave})),
        VerificationService(group.public_raw),
        clock=clock.now_ms,
        challenge_ttl_ms=1_000,
        max_outstanding=4,
    )
    oldest, oldest_quote = _ek_quote(pca, identity, group)
    for _ in range(9):
        pca.challenge(KeyRole.EK)
    assert pca.outstanding_challenges == 4
    # evicted to make room, so it no longer counts as live
    assert pca.verify_and_issue(oldest_quote, EK_PUB, oldest).verdict == Verdict.REJECT_STALE_NONCE

    clock.advance(1_001)
    pca.challenge(KeyRole.AIK)
    assert pca.outstanding_challenges == 1


def test_challenge_limits_must_be_positive(group, clock) -> None:
    with pytest.raises(ValueError):
        PrivacyCa.from_seed(b"pca", PcaPolicy(), VerificationService(group.public_raw), clock=clock.now_ms, max_outstanding=0)


def test_key_substitution_is_detected(pca, group, identity) -> None:
    req, q = _ek_quote(pca, identity, group)
    outcome = pca.verify_and_issue(q, b"attacker key", req)
    assert outcome.verdict == Verdict.REJECT_STALE_NONCE


def test_challenge_role_must_match_submission(pca, group, identity) -> None:
    req = pca.challenge(KeyRole.AIK)
    q = quote_report(enclave_report(identity, EK_PUB, req), group)
    assert pca.verify_and_issue(q, EK_PUB, req).verdict == Verdict.REJECT_STALE_NONCE


def _aik_attempt(pca, group, identity, ek_cert):
    req = pca.challenge(KeyRole.AIK)
    q = quote_report(enclave_report(identity, AIK_PUB, req), group)
    return pca.issue_aik(q, AIK_PUB, ek_cert, req)


def test_aik_requires_a_valid_ek_certificate(pca, group, identity, clock) -> None:
    assert _aik_attempt(pca, group, identity, None).verdict == Verdict.REJECT_BAD_EK_CERT

    req, q = _ek_quote(pca, identity, group)
    ek_cert = pca.verify_and_issue(q, EK_PUB, req)
    forged = dataclasses.replace(ek_cert, subject_key_pub=b"other ek")
    assert _aik_attempt(pca, group, identity, forged).verdict == Verdict.REJECT_BAD_EK_CERT
    assert isinstance(_aik_attempt(pca, group, identity, ek_cert), Certificate)

    pca.revoke(ek_cert.serial)
    assert pca.is_revoked(ek_cert.serial)
    assert _aik_attempt(pca, group, identity, ek_cert).verdict == Verdict.REJECT_BAD_EK_CERT


def test_expired_ek_certificate_is_refused(pca, group, identity, clock) -> None:
    req, q = _ek_quote(pca, identity, group)
    ek_cert = pca.verify_and_issue(q, EK_PUB, req)
    clock.advance(60_000)
    assert _aik_attempt(pca, group, identity, ek_cert).verdict == Verdict.REJECT_BAD_EK_CERT


def test_legacy_pca_certifies_anything(group, identity, clock) -> None:
    legacy = PrivacyCa.from_seed(
        b"pca", PcaPolicy(attest_enclave=False), VerificationService(group.public_raw), clock=clock.now_ms
    )
    result = attest(identity, GroupKey.from_seed(b"forged"), EK_PUB, AIK_PUB, InProcessPcaClient(legacy))
    assert result.succeeded


def test_certificate_encoding_and_issuer_check(pca, group, identity, clock) -> None:
    req, q = _ek_quote(pca, identity, group)
    cert = pca.verify_and_issue(q, EK_PUB, req)
    assert Certificate.from_bytes(cert.to_bytes()) == cert

    other = PrivacyCa.from_seed(b"other", pca.policy, pca.verifier, clock=clock.now_ms)
    assert not verify_certificate(cert, other.public_raw)
    assert not verify_certificate(cert, pca.public_raw, now_ms=cert.not_after_ms)
    with pytest.raises(AttestationError):
        Certificate.from_bytes(cert.to_bytes()[:-1])


def test_json_payloads(pca) -> None:
    req = pca.challenge(KeyRole.EK)
    assert request_from_json(request_to_json(req)) == req
    rejection = Rejection(Verdict.REJECT_STALE_NONCE, "old")
    assert outcome_from_json(outcome_to_json(rejection)) == rejection
    assert outcome_to_json(rejection)["verdict"] == "REJECT_STALE_NONCE"


def test_policy_from_hex() -> None:
    policy = PcaPolicy.from_hex(["00" * 32, "ff" * 32])
    assert bytes(32) in policy.allowlist
    assert policy.attest_enclave

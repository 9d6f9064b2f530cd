from __future__ import annotations

import hashlib
import json

import pytest

from vtpm_lab.cli import (
    EXIT_ATTESTATION,
    EXIT_BINDING,
    EXIT_HARNESS,
    EXIT_LEDGER,
    EXIT_OK,
    EXIT_TPM,
    EXIT_UNEXPECTED,
    EXIT_USAGE,
    EXIT_WORKSPACE,
    exit_code_for,
    main,
)
from vtpm.core import wire
from vtpm.core.client import pcr_extend_command, pcr_read_command
from vtpm.errors import (
    AttestationError,
    BindingError,
    HarnessError,
    LedgerError,
    MarshalError,
    TpmError,
    VtpmError,
    WorkspaceError,
)


@pytest.fixture
def cli(tmp_path, monkeypatch):
    for var in ("VTPM_LAB_CONFIG", "VTPM_LAB_ROOT", "VTPM_LAB_LOG_LEVEL", "VTPM_LAB_SEED"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("SVTPM_SIM_SEED", "cli-tests")
    config = tmp_path / "vtpm-lab.yaml"
    config.write_text("tpm:\n  rsa_bits: 1024\n", encoding="utf-8")
    prefix = ["--root", str(tmp_path / "root"), "--config", str(config)]

    def run(*argv: str) -> int:
        return main([*prefix, *argv])

    return run


def _hex(cmd: wire.Command) -> str:
    return wire.encode_command(cmd).hex()


def test_init_then_pcr_roundtrip(cli, capsys) -> None:
    assert cli("init", "--instance", "vm1") == EXIT_OK
    created = json.loads(capsys.readouterr().out)
    assert created["instance"] == "vm1"
    assert created["user"] == "vm1"

    digest = hashlib.sha256(b"boot loader").digest()
    assert cli("cmd", _hex(pcr_extend_command(0, digest)), "--instance", "vm1") == EXIT_OK
    capsys.readouterr()

    # a second process sees the extended value
    assert cli("cmd", _hex(pcr_read_command(0)), "--instance", "vm1") == EXIT_OK
    response = wire.decode_response(bytes.fromhex(capsys.readouterr().out.strip()))
    assert response.ok
    assert response.fields() == [hashlib.sha256(bytes(32) + digest).digest()]


def test_tpm_error_response_is_printed_and_exits_3(cli, capsys) -> None:
    assert cli("init", "--instance", "vm1") == EXIT_OK
    capsys.readouterr()
    assert cli("cmd", _hex(pcr_read_command(99)), "--instance", "vm1") == EXIT_TPM
    captured = capsys.readouterr()
    assert not wire.decode_response(bytes.fromhex(captured.out.strip())).ok
    assert "ERR_BAD_INDEX" in captured.err


def test_cmd_rejects_non_hex(cli, capsys) -> None:
    assert cli("cmd", "zz-not-hex") == EXIT_USAGE
    assert "not hex" in capsys.readouterr().err


def test_cmd_on_unknown_instance_is_a_workspace_error(cli, capsys) -> None:
    assert cli("cmd", _hex(pcr_read_command(0)), "--instance", "ghost") == EXIT_WORKSPACE
    assert "ERR_NO_SUCH_INSTANCE" in capsys.readouterr().err


def test_provision_snapshot_restore(cli, capsys) -> None:
    assert cli("provision", "alice") == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)["publicKey"]) == 64

    assert cli("init", "--instance", "vm1", "--user", "alice") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["user"] == "alice"
    assert cli("snapshot", "clean", "--instance", "vm1") == EXIT_OK
    capsys.readouterr()
    assert cli("restore", "clean", "--instance", "vm1") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["restored"] is True
    assert cli("restore", "missing", "--instance", "vm1") == EXIT_WORKSPACE


def test_usage_errors_exit_2(cli) -> None:
    assert cli("defragment") == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_attack_run_prints_summary(cli, capsys) -> None:
    code = cli("attack", "run", "forged-attestation", "--defense", "full", "--seed", "1", "--no-evidence")
    assert code == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["allAsExpected"] is True
    assert doc["verdicts"][0]["scenario"] == "forged-attestation"


@pytest.mark.parametrize("var", ["SVTPM_SIM_SEED", "VTPM_LAB_SEED"])
def test_attack_seed_comes_from_environment(cli, capsys, monkeypatch, var) -> None:
    monkeypatch.delenv("SVTPM_SIM_SEED", raising=False)
    monkeypatch.setenv(var, "7")
    assert cli("attack", "run", "forged-attestation", "--defense", "full", "--no-evidence") == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["verdicts"][0]["seed"] == 7


def test_bad_config_file_exits_8(tmp_path, monkeypatch, capsys) -> None:
    monkeypatch.delenv("VTPM_LAB_CONFIG", raising=False)
    config = tmp_path / "broken.yaml"
    config.write_text("rollback: [counter]\n", encoding="utf-8")
    assert main(["--root", str(tmp_path), "--config", str(config), "provision", "alice"]) == EXIT_WORKSPACE
    assert "ERR_BAD_CONFIG" in capsys.readouterr().err


@pytest.mark.parametrize(
    ("exc", "code"),
    [
        (TpmError("ERR_AUTH"), EXIT_TPM),
        (MarshalError(), EXIT_TPM),
        (BindingError("ERR_BOOT_REFUSED"), EXIT_BINDING),
        (LedgerError("ERR_UNKNOWN_UUID"), EXIT_LEDGER),
        (AttestationError("ERR_PCA_UNREACHABLE"), EXIT_ATTESTATION),
        (WorkspaceError("ERR_EXISTS"), EXIT_WORKSPACE),
        (HarnessError("ERR_BAD_SCRIPT"), EXIT_HARNESS),
        (VtpmError(), EXIT_UNEXPECTED),
    ],
)
def test_exit_code_mapping(exc, code) -> None:
    assert exit_code_for(exc) == code

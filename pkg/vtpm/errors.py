from __future__ import annotations


class VtpmError(Exception):
    """Base error. `reason` is the stable machine-readable name (e.g. ERR_AUTH)."""

    reason: str = "ERR_INTERNAL"

    def __init__(self, reason: str | None = None, message: str = "") -> None:
        if reason is not None:
            self.reason = reason
        self.message = message or self.reason
        super().__init__(f"{self.reason}: {self.message}" if message else self.reason)


class MarshalError(VtpmError):
    reason = "ERR_TRUNCATED"


class TpmError(VtpmError):
    """A TPM command failure; `response_code` is its numeric wire code."""

    reason = "ERR_INTERNAL"

    @property
    def response_code(self) -> int:
        from vtpm.core.wire import response_code_for

        return response_code_for(self.reason)


class EnclaveError(VtpmError):
    reason = "ERR_ENCLAVE"


class LedgerError(VtpmError):
    reason = "ERR_LEDGER"


class ClockError(VtpmError):
    reason = "ERR_EPOCH_CHANGED"


class BindingError(VtpmError):
    reason = "ERR_BINDING"


class AttestationError(VtpmError):
    reason = "ERR_ATTESTATION"


class WorkspaceError(VtpmError):
    reason = "ERR_WORKSPACE"


class HarnessError(VtpmError):
    reason = "ERR_BAD_SCRIPT"


class BenchError(VtpmError):
    reason = "ERR_UNKNOWN_COMMAND"

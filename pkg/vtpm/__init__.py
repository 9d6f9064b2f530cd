"""Simulated SGX-protected virtual TPM.

Domain package: TPM command subset, simulated enclave services, the four
protection modules, the launcher, the adversary harness and the bench.
The FastAPI/CLI shell lives in `vtpm_lab`.
"""

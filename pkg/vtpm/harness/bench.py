"""Per-command latency of the enclave-sealed and plain-file backends.

Only the command path is timed: wire bytes in, dispatch, NVRAM write-through,
wire bytes out. Fixture creation and cleanup between iterations are not.
"""
from __future__ import annotations

import hashlib
import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import pandas as pd

from vtpm.core import keys, wire
from vtpm.core import client as cmds
from vtpm.core.rng import DeterministicRng
from vtpm.core.state import Hierarchy, KeyKind, TpmState
from vtpm.enclave.platform import Platform
from vtpm.errors import BenchError
from vtpm.host.defense import PRESETS, DefenseConfig
from vtpm.host.instance import InstanceSettings, VtpmInstance, make_clock
from vtpm.host.workspace import Workspace
from vtpm.protection.nvram import NvramStore


logger = logging.getLogger("vtpm-lab")

BACKENDS: dict[str, DefenseConfig] = {
    "sealed": PRESETS["full"],
    "unsealed": PRESETS["off"],
}
COMMANDS = (
    "pcr_read",
    "pcr_extend",
    "create_primary",
    "seal",
    "unseal",
    "sign",
    "verify",
    "rsa_encrypt",
    "rsa_decrypt",
    "aes_encrypt",
    "aes_decrypt",
    "nv_write",
    "nv_read",
    "noop",
)
CSV_HEADER = ("command", "backend", "iteration", "nanos")
WARMUP = 3
BENCH_NV_INDEX = 0x01500010
SEAL_AUTH = b"bench"


@dataclass(frozen=True)
class BenchResult:
    command: str
    backend: str
    samples_ns: tuple[int, ...]

    @property
    def mean_ns(self) -> float:
        return float(np.mean(self.samples_ns))

    @property
    def p50_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 50))

    @property
    def p95_ns(self) -> float:
        return float(np.percentile(self.samples_ns, 95))

    def stats(self) -> dict[str, object]:
        return {
            "command": self.command,
            "backend": self.backend,
            "iterations": len(self.samples_ns),
            "meanMs": round(self.mean_ns / 1e6, 6),
            "p50Ms": round(self.p50_ns / 1e6, 6),
            "p95Ms": round(self.p95_ns / 1e6, 6),
        }


@dataclass
class Step:
    """One timed call plus the untimed work around it."""

    command: Callable[[], bytes]
    cleanup: Callable[[list[wire.Field]], None] = lambda fields: None


@dataclass
class BenchRig:
    """A single provisioned instance with the fixtures every command needs."""

    backend: str
    instance: VtpmInstance
    handles: dict[str, int] = field(default_factory=dict)
    blobs: dict[str, bytes] = field(default_factory=dict)

    @classmethod
    def build(cls, root: Path, backend: str, *, seed: int = 0, rsa_bits: int = keys.DEFAULT_RSA_BITS) -> BenchRig:
        if backend not in BACKENDS:
            raise BenchError("ERR_UNKNOWN_BACKEND", f"unknown backend {backend!r}; expected one of {sorted(BACKENDS)}")
        defense = BACKENDS[backend]
        settings = InstanceSettings(rsa_bits=rsa_bits)
        workspace = Workspace(root).ensure()
        platform = Platform(workspace.platform_dir, seed=f"bench:{seed}:platform")
        workspace.create_user("bench", seed=f"bench:{seed}".encode("utf-8"))
        inst = VtpmInstance.create(
            workspace,
            "bench",
            "bench",
            platform=platform,
            defense=defense,
            vm_image=b"bench-vm",
            clock=make_clock(platform, defense, settings),
            settings=settings,
            rng=DeterministicRng(f"bench:{seed}:tpm"),
        )
        rig = cls(backend, inst)
        rig._fixtures()
        return rig

    def _fixtures(self) -> None:
        c = self.instance.client
        self.handles["storage"], _ = c.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, unique=b"storage")
        self.handles["signer"], _ = c.create_primary(Hierarchy.STORAGE, KeyKind.RSA_SIGNING, unique=b"signer")
        self.handles["decrypter"], _ = c.create_primary(Hierarchy.STORAGE, KeyKind.RSA_DECRYPTION, unique=b"decrypter")
        self.handles["aes"], _ = c.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC, unique=b"aes")
        self.handles["sealed"] = c.seal(self.handles["storage"], b"bench payload", SEAL_AUTH)
        c.nv_write(BENCH_NV_INDEX, b"\x00" * 64)
        self.blobs["message"] = b"bench message"
        self.blobs["signature"] = c.sign(self.handles["signer"], self.blobs["message"])
        self.blobs["ciphertext"] = c.rsa_encrypt(self.handles["decrypter"], b"bench secret")
        self.blobs["aes_ct"] = c.aes_encrypt(self.handles["aes"], b"bench plaintext block")

    def _flush(self, fields: list[wire.Field]) -> None:
        self.instance.client.flush(int(fields[0]))

    def step(self, name: str) -> Step:
        h, b = self.handles, self.blobs
        encode = wire.encode_command
        if name == "pcr_read":
            raw = encode(cmds.pcr_read_command(0))
            return Step(lambda: raw)
        if name == "pcr_extend":
            raw = encode(cmds.pcr_extend_command(7, hashlib.sha256(b"bench").digest()))
            return Step(lambda: raw)
        if name == "create_primary":
            raw = encode(cmds.create_primary_command(Hierarchy.STORAGE, KeyKind.RSA_SIGNING, unique=b"timed"))

            def fresh() -> bytes:
                # derivation is memoized; a timed create must pay for key generation
                keys.clear_derivation_cache()
                return raw

            return Step(fresh, self._flush)
        if name == "seal":
            raw = encode(cmds.create_command(h["storage"], KeyKind.SEALED_DATA, b"", SEAL_AUTH, data=b"bench payload"))
            return Step(lambda: raw, self._flush)
        if name == "unseal":
            raw = encode(cmds.unseal_command(h["sealed"], SEAL_AUTH))
            return Step(lambda: raw)
        if name == "sign":
            raw = encode(cmds.sign_command(h["signer"], b["message"]))
            return Step(lambda: raw)
        if name == "verify":
            raw = encode(cmds.verify_command(h["signer"], b["message"], b["signature"]))
            return Step(lambda: raw)
        if name == "rsa_encrypt":
            raw = encode(cmds.rsa_encrypt_command(h["decrypter"], b"bench secret"))
            return Step(lambda: raw)
        if name == "rsa_decrypt":
            raw = encode(cmds.rsa_decrypt_command(h["decrypter"], b["ciphertext"]))
            return Step(lambda: raw)
        if name == "aes_encrypt":
            raw = encode(cmds.encrypt_decrypt_command(h["aes"], b"bench plaintext block", decrypt=False))
            return Step(lambda: raw)
        if name == "aes_decrypt":
            raw = encode(cmds.encrypt_decrypt_command(h["aes"], b["aes_ct"], decrypt=True))
            return Step(lambda: raw)
        if name == "nv_write":
            counter = iter(range(1 << 62))

            def payload() -> bytes:
                # a changing payload so write-through persists every iteration
                return encode(cmds.nv_write_command(BENCH_NV_INDEX, next(counter).to_bytes(64, "big")))

            return Step(payload)
        if name == "nv_read":
            raw = encode(cmds.nv_read_command(BENCH_NV_INDEX))
            return Step(lambda: raw)
        raise BenchError("ERR_UNKNOWN_COMMAND", f"unknown bench command {name!r}; expected one of {list(COMMANDS)}")


def _noop(data: bytes) -> bytes:
    return data


def _time_loop(
    transport: Callable[[bytes], bytes],
    step: Step,
    iterations: int,
    *,
    check: bool = True,
) -> list[int]:
    samples: list[int] = []
    for i in range(WARMUP + iterations):
        data = step.command()
        start = time.perf_counter_ns()
        out = transport(data)
        elapsed = time.perf_counter_ns() - start
        fields: list[wire.Field] = []
        if check:
            resp = wire.decode_response(out)
            if not resp.ok:
                raise BenchError("ERR_COMMAND_FAILED", f"bench command failed with {resp.reason}")
            fields = resp.fields()
        step.cleanup(fields)
        if i >= WARMUP:
            samples.append(elapsed)
    return samples


def calibrate_overhead(iterations: int = 100) -> BenchResult:
    """Cost of the timing loop itself, measured around a call that does nothing."""
    raw = wire.encode_command(cmds.get_random_command(0))
    samples = _time_loop(_noop, Step(lambda: raw), iterations, check=False)
    return BenchResult("noop", "none", tuple(samples))


def bench_command(
    cmd_name: str,
    backend: str,
    iterations: int = 100,
    *,
    rig: BenchRig | None = None,
    rsa_bits: int = keys.DEFAULT_RSA_BITS,
) -> BenchResult:
    if cmd_name not in COMMANDS:
        raise BenchError("ERR_UNKNOWN_COMMAND", f"unknown bench command {cmd_name!r}; expected one of {list(COMMANDS)}")
    if iterations <= 0:
        raise BenchError("ERR_BAD_ITERATIONS", "iterations must be positive")
    if cmd_name == "noop":
        result = calibrate_overhead(iterations)
        return BenchResult("noop", backend, result.samples_ns)
    if rig is None:
        with tempfile.TemporaryDirectory(prefix="vtpm-lab-bench-") as tmp:
            built = BenchRig.build(Path(tmp), backend, rsa_bits=rsa_bits)
            return bench_command(cmd_name, backend, iterations, rig=built)
    samples = _time_loop(rig.instance.execute, rig.step(cmd_name), iterations)
    result = BenchResult(cmd_name, backend, tuple(samples))
    logger.info("[bench/%s] backend=%s mean_ms=%.4f", cmd_name, backend, result.mean_ns / 1e6)
    return result


def bench_launch(
    backend: str,
    iterations: int = 100,
    *,
    root: Path | None = None,
    rsa_bits: int = keys.DEFAULT_RSA_BITS,
) -> BenchResult:
    """Cold NVRAM load: read the file, unseal (sealed backend only), deserialize."""
    if iterations <= 0:
        raise BenchError("ERR_BAD_ITERATIONS", "iterations must be positive")
    if root is None:
        with tempfile.TemporaryDirectory(prefix="vtpm-lab-bench-") as tmp:
            return bench_launch(backend, iterations, root=Path(tmp), rsa_bits=rsa_bits)
    rig = BenchRig.build(root, backend, rsa_bits=rsa_bits)
    inst = rig.instance
    store = NvramStore(inst.nvram_path, inst.platform, inst.identity, sealed=BACKENDS[backend].nvram_binding)
    samples: list[int] = []
    for i in range(WARMUP + iterations):
        start = time.perf_counter_ns()
        TpmState.from_bytes(store.load().tpm_state)
        elapsed = time.perf_counter_ns() - start
        if i >= WARMUP:
            samples.append(elapsed)
    return BenchResult("launch", backend, tuple(samples))


def run_benchmarks(
    commands: Iterable[str] = COMMANDS,
    backends: Iterable[str] = tuple(BACKENDS),
    iterations: int = 100,
    *,
    rsa_bits: int = keys.DEFAULT_RSA_BITS,
    include_launch: bool = False,
) -> list[BenchResult]:
    wanted = list(commands)
    for name in wanted:
        if name not in COMMANDS and name != "launch":
            raise BenchError("ERR_UNKNOWN_COMMAND", f"unknown bench command {name!r}")
    results: list[BenchResult] = []
    for backend in backends:
        with tempfile.TemporaryDirectory(prefix="vtpm-lab-bench-") as tmp:
            rig = BenchRig.build(Path(tmp), backend, rsa_bits=rsa_bits)
            for name in wanted:
                if name == "launch":
                    continue
                results.append(bench_command(name, backend, iterations, rig=rig))
        if include_launch or "launch" in wanted:
            results.append(bench_launch(backend, iterations, rsa_bits=rsa_bits))
    return results


def to_frame(results: Iterable[BenchResult]) -> pd.DataFrame:
    rows = [
        (r.command, r.backend, i, ns)
        for r in results
        for i, ns in enumerate(r.samples_ns)
    ]
    return pd.DataFrame(rows, columns=list(CSV_HEADER))


def emit_csv(results: Iterable[BenchResult], path: Path | str) -> Path:
    out = Path(path)
    to_frame(results).to_csv(out, index=False, lineterminator="\n")
    return out

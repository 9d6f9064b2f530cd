"""Operator entry point: `python -m vtpm_lab <subcommand> ...`.

All state lives under `--root` (default `$VTPM_LAB_ROOT` or `.vtpm-lab`). Exit codes:

    0 ok                  5 boot/binding refused
    1 unexpected error    6 rollback ledger error
    2 usage error         7 attestation rejected
    3 TPM error response  8 workspace error
    4 enclave error       9 harness/bench error
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from vtpm.core import wire
from vtpm.errors import (
    AttestationError,
    BenchError,
    BindingError,
    ClockError,
    EnclaveError,
    HarnessError,
    LedgerError,
    MarshalError,
    TpmError,
    VtpmError,
    WorkspaceError,
)
from vtpm.harness import bench, report
from vtpm.harness.runner import replacement_search, run_scenario
from vtpm.harness.scenarios import SCENARIO_NAMES, builtin_scenarios, find_scenario
from vtpm.host.defense import PRESETS
from vtpm.protection.attestation import HttpPcaClient, InProcessPcaClient, PcaClient, attest, outcome_to_json

from vtpm_lab.config import Settings, load_settings, seed_from_env
from vtpm_lab.services.authorities import build_pca
from vtpm_lab.services.runtime import Runtime


logger = logging.getLogger("vtpm-lab")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_TPM = 3
EXIT_ENCLAVE = 4
EXIT_BINDING = 5
EXIT_LEDGER = 6
EXIT_ATTESTATION = 7
EXIT_WORKSPACE = 8
EXIT_HARNESS = 9

_EXIT_BY_ERROR: tuple[tuple[type[VtpmError], int], ...] = (
    (TpmError, EXIT_TPM),
    (MarshalError, EXIT_TPM),
    (EnclaveError, EXIT_ENCLAVE),
    (ClockError, EXIT_ENCLAVE),
    (BindingError, EXIT_BINDING),
    (LedgerError, EXIT_LEDGER),
    (AttestationError, EXIT_ATTESTATION),
    (WorkspaceError, EXIT_WORKSPACE),
    (HarnessError, EXIT_HARNESS),
    (BenchError, EXIT_HARNESS),
)

DEFAULT_INSTANCE = "default"


def exit_code_for(exc: VtpmError) -> int:
    for cls, code in _EXIT_BY_ERROR:
        if isinstance(exc, cls):
            return code
    return EXIT_UNEXPECTED


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, ensure_ascii=False))


# --- subcommands -----------------------------------------------------------


def cmd_provision(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    key = rt.provision_user(args.user)
    _emit({"user": args.user, "publicKey": key.public_raw.hex()})
    return EXIT_OK


def cmd_init(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    user = args.user or args.instance
    if not (rt.workspace.users_dir / user / "user.key").exists():
        rt.provision_user(user)
    vm_image = Path(args.vm_image).read_bytes() if args.vm_image else None
    inst = rt.create_instance(args.instance, user, vm_image=vm_image)
    _emit(
        {
            "instance": inst.name,
            "user": user,
            "defense": inst.defense.describe(),
            "enclave": inst.identity.describe(),
        }
    )
    return EXIT_OK


def cmd_cmd(args: argparse.Namespace, settings: Settings) -> int:
    try:
        raw = bytes.fromhex(args.command_hex)
    except ValueError:
        print(f"error: command is not hex: {args.command_hex!r}", file=sys.stderr)
        return EXIT_USAGE
    rt = Runtime.open(settings)
    with rt.running(args.instance) as inst:
        if inst.ledger_fault is not None:
            print(
                f"error: rollback ledger fault {inst.ledger_fault}; instance is quarantined (see `reprovision`)",
                file=sys.stderr,
            )
            return EXIT_LEDGER
        response = inst.execute(raw)
    print(response.hex())
    decoded = wire.decode_response(response)
    if not decoded.ok:
        print(f"error: TPM response {decoded.reason} (0x{decoded.code:03x})", file=sys.stderr)
        return EXIT_TPM
    return EXIT_OK


def cmd_snapshot(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    path = rt.workspace.snapshot(args.instance, args.label)
    _emit({"instance": args.instance, "label": args.label, "path": str(path)})
    return EXIT_OK


def cmd_restore(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    rt.workspace.restore(args.instance, args.label)
    _emit({"instance": args.instance, "label": args.label, "restored": True})
    return EXIT_OK


def cmd_reprovision(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    with rt.running(args.instance) as inst:
        fault = inst.ledger_fault
        inst.reprovision()
    _emit({"instance": args.instance, "clearedFault": fault})
    return EXIT_OK


def cmd_attest(args: argparse.Namespace, settings: Settings) -> int:
    rt = Runtime.open(settings)
    client: PcaClient
    if args.pca_url:
        client = HttpPcaClient.connect(args.pca_url)
    else:
        client = InProcessPcaClient(build_pca(settings, rt.workspace, rt.platform))
    with rt.running(args.instance) as inst:
        try:
            result = attest(inst.identity, rt.platform.group_key, inst.ek_public(), inst.aik_public(), client)
        except httpx.HTTPError as exc:
            raise AttestationError("ERR_PCA_UNREACHABLE", str(exc)) from exc
    _emit(
        {
            "instance": args.instance,
            "ek": outcome_to_json(result.ek),
            "aik": outcome_to_json(result.aik) if result.aik is not None else None,
            "succeeded": result.succeeded,
        }
    )
    return EXIT_OK if result.succeeded else EXIT_ATTESTATION


def _attack_seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    env = seed_from_env() or ""
    return int(env) if env.isdigit() else 0


def cmd_attack_run(args: argparse.Namespace, settings: Settings) -> int:
    seed = _attack_seed(args)
    defenses = list(PRESETS) if args.defense == "all" else [args.defense]
    verdicts = []
    for defense in defenses:
        if args.name == "all":
            scenarios = builtin_scenarios(defense, cycles=args.cycles)
        else:
            scenarios = [find_scenario(args.name, defense)]
        for scenario in scenarios:
            verdicts.append(run_scenario(scenario, seed))
    summary = report.report(verdicts, include_evidence=args.evidence)
    print(report.render(summary))
    return EXIT_OK if summary["allAsExpected"] else EXIT_HARNESS


def cmd_attack_search(args: argparse.Namespace, settings: Settings) -> int:
    result = replacement_search(args.users, seed=_attack_seed(args), defense=args.defense)
    _emit(
        {
            "users": result.users,
            "trials": result.trials,
            "bootAcceptances": result.boot_acceptances,
            "recoveries": result.recoveries,
            "accepted": list(result.accepted),
        }
    )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, settings: Settings) -> int:
    commands = [c.strip() for c in args.commands.split(",") if c.strip()] if args.commands else list(bench.COMMANDS)
    backends = [b.strip() for b in args.backends.split(",") if b.strip()]
    for backend in backends:
        if backend not in bench.BACKENDS:
            raise BenchError("ERR_UNKNOWN_BACKEND", f"unknown backend {backend!r}; expected one of {list(bench.BACKENDS)}")
    results = bench.run_benchmarks(
        commands,
        backends,
        args.iterations,
        rsa_bits=args.rsa_bits or settings.rsa_bits,
        include_launch=args.launch,
    )
    if args.out:
        out = bench.emit_csv(results, args.out)
        logger.info("[bench/csv] wrote %s", out)
    _emit([r.stats() for r in results])
    return EXIT_OK


def cmd_serve(args: argparse.Namespace, settings: Settings) -> int:
    import uvicorn

    from vtpm_lab.main import create_app
    from vtpm_lab.services.authorities import Authorities, set_authorities

    set_authorities(Authorities.build(settings))
    uvicorn.run(create_app(), host=args.host, port=args.port, log_level=settings.log_level.lower())
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_instance(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instance", default=DEFAULT_INSTANCE, help="instance name (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vtpm-lab", description="SGX-protected vTPM simulator")
    parser.add_argument("--root", default=None, help="workspace directory (default: $VTPM_LAB_ROOT or .vtpm-lab)")
    parser.add_argument("--config", default=None, help="YAML config file (default: $VTPM_LAB_CONFIG)")
    sub = parser.add_subparsers(dest="subcommand", metavar="<subcommand>")
    sub.required = True

    p = sub.add_parser("provision", help="create a user signing key")
    p.add_argument("user")
    p.set_defaults(handler=cmd_provision)

    p = sub.add_parser("init", help="create a vTPM instance (provisions its user if needed)")
    _add_instance(p)
    p.add_argument("--user", default=None, help="owning user (default: the instance name)")
    p.add_argument("--vm-image", default=None, help="guest image file to bind (default: a generated stand-in)")
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser("cmd", help="send one hex-encoded TPM command and print the hex response")
    p.add_argument("command_hex", metavar="hex")
    _add_instance(p)
    p.set_defaults(handler=cmd_cmd)

    p = sub.add_parser("snapshot", help="copy the instance directory (the rollback space)")
    p.add_argument("label")
    _add_instance(p)
    p.set_defaults(handler=cmd_snapshot)

    p = sub.add_parser("restore", help="put a snapshot back in place")
    p.add_argument("label")
    _add_instance(p)
    p.set_defaults(handler=cmd_restore)

    p = sub.add_parser("reprovision", help="operator recovery from a stale rollback ledger")
    _add_instance(p)
    p.set_defaults(handler=cmd_reprovision)

    p = sub.add_parser("attest", help="obtain EK and AIK certificates from the Privacy CA")
    _add_instance(p)
    p.add_argument("--pca-url", default=None, help="talk to a served PCA instead of an in-process one")
    p.set_defaults(handler=cmd_attest)

    attack = sub.add_parser("attack", help="adversary harness")
    attack_sub = attack.add_subparsers(dest="attack_command", metavar="<action>")
    attack_sub.required = True

    p = attack_sub.add_parser("run", help="run builtin scenarios and print the summary")
    p.add_argument("name", choices=[*SCENARIO_NAMES, "all"])
    p.add_argument("--defense", choices=[*PRESETS, "all"], default="full")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cycles", type=int, default=12, help="restore/guess cycles per rollback scenario")
    p.add_argument("--no-evidence", dest="evidence", action="store_false", help="omit event traces")
    p.set_defaults(handler=cmd_attack_run)

    p = attack_sub.add_parser("search", help="exhaustive cross-user file substitution")
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--defense", choices=list(PRESETS), default="full")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_attack_search)

    p = sub.add_parser("bench", help="per-command latency, sealed vs unsealed")
    p.add_argument("--commands", default=None, help=f"comma list from: {','.join(bench.COMMANDS)},launch")
    p.add_argument("--backends", default=",".join(bench.BACKENDS))
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--rsa-bits", type=int, default=None)
    p.add_argument("--launch", action="store_true", help="also time cold NVRAM loads")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("serve", help="serve the Privacy CA and cloud registry over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE

    try:
        settings = load_settings(args.config, root=args.root)
    except WorkspaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WORKSPACE
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )

    handler: Callable[[argparse.Namespace, Settings], int] = args.handler
    try:
        return handler(args, settings)
    except VtpmError as exc:
        code = exit_code_for(exc)
        logger.debug("[cli] %s failed reason=%s", args.subcommand, exc.reason, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception:
        logger.exception("[cli] unexpected failure in %s", args.subcommand)
        return EXIT_UNEXPECTED

"""Runs attack scripts against a fresh simulated cloud and decides who won.

The attack is judged from ground truth, never from what the vTPM believes:
accepted password guesses are timestamped with the virtual platform time, and
the rollback/clock attacks succeed when more than `max_tries` guesses were
evaluated inside one recovery interval.
"""
from __future__ import annotations

import itertools
import logging
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from vtpm.core import wire
from vtpm.core.client import unseal_command
from vtpm.core.lockout import ClockHandle
from vtpm.core.rng import DeterministicRng
from vtpm.core.state import Hierarchy, KeyKind, TpmState
from vtpm.enclave.identity import EnclaveIdentity, SignedEnclave, launch_enclave, sign_enclave, vtpm_code_blob
from vtpm.enclave.platform import Platform
from vtpm.enclave.quoting import GroupKey, Quote, quote
from vtpm.enclave.timebase import VirtualTime
from vtpm.errors import HarnessError, VtpmError
from vtpm.harness.scenarios import (
    ATTACKER,
    INSTANCE_FILES,
    VICTIM,
    Event,
    EventKind,
    Scenario,
    split_path,
    validate,
)
from vtpm.host.defense import DefenseConfig, preset
from vtpm.host.instance import InstanceSettings, VtpmInstance, boot
from vtpm.host.workspace import Workspace
from vtpm.protection.attestation import (
    Certificate,
    KeyRole,
    PcaPolicy,
    PrivacyCa,
    VerificationService,
    enclave_report,
    key_binding,
    quote_report,
)
from vtpm.protection.clock import HostClock, TrustedClock, VirtualClockDriver
from vtpm.protection.nvram import CloudRegistry, NvramStore


logger = logging.getLogger("vtpm-lab")

SECRET_NV_INDEX = 0x01500001
VICTIM_PASSWORD = b"correct horse battery staple"
HARNESS_SETTINGS = InstanceSettings(rsa_bits=1024)


@dataclass(frozen=True)
class Verdict:
    scenario: str
    defense: DefenseConfig
    seed: int
    attack_succeeded: bool
    evidence: tuple[str, ...]
    checks: dict[str, object] = field(default_factory=dict)


def max_guesses_per_interval(timestamps: list[int], interval_ms: int) -> int:
    """Largest number of timestamps inside any half-open window of `interval_ms`."""
    ts = sorted(timestamps)
    best = 0
    lo = 0
    for hi, t in enumerate(ts):
        while t - ts[lo] >= interval_ms:
            lo += 1
        best = max(best, hi - lo + 1)
    return best


def window_violated(timestamps: list[int], max_tries: int, interval_ms: int) -> bool:
    ts = sorted(timestamps)
    return any(ts[i + max_tries] - ts[i] < interval_ms for i in range(len(ts) - max_tries))


def user_seed(seed: int, name: str) -> bytes:
    return f"vtpm-lab-harness:{seed}:{name}".encode("utf-8")


class World:
    """Two (or more) users' instances on one platform, plus the trusted third parties."""

    def __init__(
        self,
        root: Path,
        defense: DefenseConfig,
        seed: int,
        *,
        users: tuple[str, ...] = (VICTIM, ATTACKER),
        settings: InstanceSettings = HARNESS_SETTINGS,
    ) -> None:
        self.defense = defense
        self.seed = seed
        self.settings = settings
        self.rng = DeterministicRng(user_seed(seed, "world"))
        self.virtual = VirtualTime(0)
        self.workspace = Workspace(root).ensure()
        self.platform = Platform(self.workspace.platform_dir, time_source=self.virtual, seed=user_seed(seed, "platform"))
        self.registry = CloudRegistry(self.workspace.registry_dir, channel_key=self.rng.fork("channel").read(32))
        self.host_clock = HostClock(self.virtual)
        self.driver: VirtualClockDriver | None = None
        self.running: dict[str, VtpmInstance] = {}
        self.secrets: dict[str, bytes] = {}
        self.sealed_handles: dict[str, int] = {}
        # which user's copy each instance file currently is
        self.owners: dict[tuple[str, str], str] = {}
        self._launches = 0
        for name in users:
            self._provision(name)

    # --- setup -------------------------------------------------------------

    def _clock(self, name: str) -> ClockHandle:
        if not self.defense.trusted_clock:
            return self.host_clock
        clock = TrustedClock(
            self.platform.platform_time,
            tick_rate_hz=self.settings.tick_rate_hz,
            correction_interval_ms=self.settings.correction_interval_ms,
        )
        if name == VICTIM:
            self.driver = VirtualClockDriver(clock, self.virtual)
        return clock

    def _provision(self, name: str) -> None:
        self.workspace.create_user(name, seed=user_seed(self.seed, name))
        inst = VtpmInstance.create(
            self.workspace,
            name,
            name,
            platform=self.platform,
            defense=self.defense,
            vm_image=b"vm-image:" + name.encode("utf-8"),
            clock=self._clock(name),
            registry=self.registry,
            settings=self.settings,
            rng=self.rng.fork(f"instance:{name}"),
        )
        client = inst.client
        parent, _public = client.create_primary(Hierarchy.STORAGE, KeyKind.AES_SYMMETRIC)
        secret = b"secret-of-" + name.encode("utf-8") + b":" + self.rng.fork(f"secret:{name}").read(16).hex().encode()
        self.sealed_handles[name] = client.seal(parent, secret, VICTIM_PASSWORD)
        client.nv_write(SECRET_NV_INDEX, secret)
        self.secrets[name] = secret
        self.running[name] = inst
        for f in INSTANCE_FILES:
            self.owners[(name, f)] = name

    # --- attacker capabilities ---------------------------------------------

    def launch(self, name: str) -> VtpmInstance:
        self._launches += 1
        return VtpmInstance.launch(
            self.workspace,
            name,
            platform=self.platform,
            defense=self.defense,
            clock=self._clock(name),
            registry=self.registry,
            settings=self.settings,
            rng=self.rng.fork(f"launch:{name}:{self._launches}"),
        )

    def file_path(self, ref: str) -> Path:
        instance, name = split_path(ref)
        return self.workspace.instance(instance).directory / name

    def swap(self, ref_a: str, ref_b: str) -> None:
        pa, pb = self.file_path(ref_a), self.file_path(ref_b)
        a, b = pa.read_bytes(), pb.read_bytes()
        pa.write_bytes(b)
        pb.write_bytes(a)
        ka, kb = split_path(ref_a), split_path(ref_b)
        self.owners[ka], self.owners[kb] = self.owners[kb], self.owners[ka]

    def advance(self, ms: int) -> None:
        if self.driver is not None:
            self.driver.advance(ms)
        else:
            self.virtual.advance(ms)

    def mismatched(self, name: str) -> bool:
        return any(self.owners[(name, f)] != name for f in INSTANCE_FILES)

    def victim_identity(self) -> EnclaveIdentity:
        if VICTIM in self.running:
            return self.running[VICTIM].identity
        return launch_enclave(SignedEnclave.from_bytes(self.workspace.instance(VICTIM).enclave.read_bytes()))


@dataclass
class Tally:
    accepted: list[int] = field(default_factory=list)
    rejected: int = 0
    plaintext_recovered: bool = False
    mismatched_boots: int = 0
    boot_refusals: int = 0
    forged_certificates: int = 0
    honest_certificates: int = 0
    trace: list[str] = field(default_factory=list)


class ScenarioRun:
    def __init__(self, world: World) -> None:
        self.world = world
        self.tally = Tally()
        self._snapshot_owners: dict[str, dict[tuple[str, str], str]] = {}
        self._pca: PrivacyCa | None = None
        self._honest: tuple[Quote, bytes] | None = None

    def log(self, line: str) -> None:
        self.tally.trace.append(line)

    def run(self, events: tuple[Event, ...]) -> None:
        for ev in events:
            self.step(ev)

    def step(self, ev: Event) -> None:
        w = self.world
        kind = EventKind(ev.kind)
        if kind == EventKind.REPEAT:
            for _ in range(int(ev.args[0])):
                self.run(ev.body)
        elif kind == EventKind.GUESS:
            for _ in range(int(ev.args[0])):
                self._guess()
        elif kind == EventKind.SNAPSHOT:
            label = str(ev.args[0])
            w.workspace.snapshot(VICTIM, label)
            self._snapshot_owners[label] = {k: v for k, v in w.owners.items() if k[0] == VICTIM}
            self.log(f"snapshot {label}")
        elif kind == EventKind.RESTORE:
            label = str(ev.args[0])
            w.workspace.restore(VICTIM, label)
            w.owners.update(self._snapshot_owners[label])
            self._relaunch(VICTIM, f"restore {label}")
        elif kind == EventKind.FILE_SWAP:
            w.swap(str(ev.args[0]), str(ev.args[1]))
            self.log(f"swap {ev.args[0]} <-> {ev.args[1]}")
        elif kind == EventKind.INTERRUPT_SYNC:
            inst = w.running.get(VICTIM)
            if inst is not None:
                inst.guard.arm_interruption()
            self.log("interrupt_sync")
        elif kind == EventKind.ADVANCE_TIME:
            w.advance(int(ev.args[0]))
            self.log(f"advance {ev.args[0]}ms t={w.virtual.monotonic_ms()}")
        elif kind == EventKind.SHIFT_HOST_CLOCK:
            w.host_clock.shift(int(ev.args[0]))
            self.log(f"shift_host_clock {ev.args[0]}ms")
        elif kind == EventKind.LAUNCH:
            self._launch_check(str(ev.args[0]))
        elif kind == EventKind.READ_FILE:
            raw = w.file_path(str(ev.args[0])).read_bytes()
            found = w.secrets[VICTIM] in raw
            self.tally.plaintext_recovered |= found
            self.log(f"read_file {ev.args[0]} victim_secret_visible={found}")
        elif kind == EventKind.FOREIGN_UNSEAL:
            self._foreign_unseal(str(ev.args[0]))
        elif kind == EventKind.ATTEST:
            self._attest(str(ev.args[0]))

    # --- events ------------------------------------------------------------

    def _guess(self) -> None:
        w = self.world
        inst = w.running.get(VICTIM)
        if inst is None:
            self.log("guess skipped: victim not running")
            return
        n = len(self.tally.accepted) + self.tally.rejected
        cmd = unseal_command(w.sealed_handles[VICTIM], b"guess-%d" % n)
        resp = wire.decode_response(inst.execute(wire.encode_command(cmd)))
        now = w.virtual.monotonic_ms()
        if resp.reason == "ERR_LOCKED_OUT":
            self.tally.rejected += 1
        else:
            self.tally.accepted.append(now)
        self.log(f"guess {resp.reason} t={now}")

    def _relaunch(self, name: str, why: str) -> None:
        w = self.world
        w.running.pop(name, None)
        try:
            w.running[name] = w.launch(name)
        except VtpmError as exc:
            self.tally.boot_refusals += 1
            self.log(f"{why}: relaunch refused {exc.reason}")
            return
        inst = w.running[name]
        fault = f" ledger_fault={inst.ledger_fault}" if inst.ledger_fault else ""
        self.log(f"{why}: relaunched failed_tries={inst.state.lockout.failed_tries}{fault}")

    def _launch_check(self, name: str) -> None:
        w = self.world
        report = boot(name, w.workspace.instance(name), w.platform, w.defense, w.registry)
        checks = ",".join(f"{k}={v}" for k, v in report.describe().items())
        if not report.booted:
            self.tally.boot_refusals += 1
            w.running.pop(name, None)
            self.log(f"launch {name} refused {checks}")
            return
        try:
            inst = w.launch(name)
        except VtpmError as exc:
            self.tally.boot_refusals += 1
            w.running.pop(name, None)
            self.log(f"launch {name} refused {exc.reason} {checks}")
            return
        w.running[name] = inst
        mismatched = w.mismatched(name)
        if mismatched:
            self.tally.mismatched_boots += 1
        recovered = False
        if name != VICTIM:
            try:
                recovered = inst.client.nv_read(SECRET_NV_INDEX) == w.secrets[VICTIM]
            except VtpmError:
                recovered = False
        self.tally.plaintext_recovered |= recovered
        self.log(f"launch {name} booted mismatched={mismatched} victim_secret_recovered={recovered} {checks}")

    def _foreign_unseal(self, victim: str) -> None:
        w = self.world
        attacker_identity = launch_enclave(SignedEnclave.from_bytes(w.workspace.instance(ATTACKER).enclave.read_bytes()))
        store = NvramStore(
            w.workspace.instance(victim).nvram, w.platform, attacker_identity, sealed=w.defense.nvram_binding
        )
        try:
            state = TpmState.from_bytes(store.load().tpm_state)
        except VtpmError as exc:
            self.log(f"foreign_unseal {victim} failed {exc.reason}")
            return
        recovered = state.nv_store.get(SECRET_NV_INDEX) == w.secrets[victim]
        self.tally.plaintext_recovered |= recovered
        self.log(f"foreign_unseal {victim} opened victim_secret_recovered={recovered}")

    def _ca(self) -> PrivacyCa:
        if self._pca is None:
            w = self.world
            policy = PcaPolicy(frozenset({w.victim_identity().mrenclave}), attest_enclave=w.defense.attestation)
            self._pca = PrivacyCa.from_seed(
                user_seed(w.seed, "pca"),
                policy,
                VerificationService(w.platform.group_public),
                clock=w.virtual.monotonic_ms,
                randbytes=w.rng.fork("pca").read,
            )
        return self._pca

    def _honest_quote(self) -> tuple[Quote, bytes]:
        w = self.world
        ek_pub = w.running[VICTIM].ek_public() if VICTIM in w.running else b"victim-ek"
        req = self._ca().challenge(KeyRole.EK)
        q = quote_report(enclave_report(w.victim_identity(), ek_pub, req), w.platform.group_key)
        outcome = self._ca().verify_and_issue(q, ek_pub, req)
        if isinstance(outcome, Certificate):
            self.tally.honest_certificates += 1
        self._honest = (q, ek_pub)
        return q, ek_pub

    def _attest(self, variant: str) -> None:
        w = self.world
        pca = self._ca()
        if variant == "honest":
            self._honest_quote()
            self.log(f"attest honest certificates={self.tally.honest_certificates}")
            return
        if variant == "patched":
            code = vtpm_code_blob() + b"\n# lockout checks removed\n"
            identity = launch_enclave(sign_enclave(code, w.workspace.load_user(ATTACKER)))
            key_pub = b"attacker-ek"
            req = pca.challenge(KeyRole.EK)
            q = w.platform.quote(identity, key_binding(key_pub, req.challenge_nonce))
        elif variant == "replay":
            q, key_pub = self._honest if self._honest is not None else self._honest_quote()
            req = pca.challenge(KeyRole.EK)
        else:
            key_pub = b"attacker-ek"
            req = pca.challenge(KeyRole.EK)
            fake_group = GroupKey.from_seed(user_seed(w.seed, "attacker-group"))
            q = quote(w.victim_identity(), key_binding(key_pub, req.challenge_nonce), fake_group)
        outcome = pca.verify_and_issue(q, key_pub, req)
        issued = isinstance(outcome, Certificate)
        if issued:
            self.tally.forged_certificates += 1
        self.log(f"attest {variant} {'ISSUED' if issued else outcome.verdict.value}")


def run_scenario(
    scenario: Scenario,
    seed: int = 0,
    *,
    root: Path | None = None,
    settings: InstanceSettings = HARNESS_SETTINGS,
) -> Verdict:
    validate(scenario.events)
    if root is None:
        with tempfile.TemporaryDirectory(prefix="vtpm-lab-attack-") as tmp:
            return run_scenario(scenario, seed, root=Path(tmp), settings=settings)

    world = World(Path(root), scenario.defense, seed, settings=settings)
    run = ScenarioRun(world)
    run.run(scenario.events)
    t = run.tally
    per_interval = max_guesses_per_interval(t.accepted, settings.recovery_interval_ms)
    succeeded = (
        window_violated(t.accepted, settings.max_tries, settings.recovery_interval_ms)
        or t.plaintext_recovered
        or t.mismatched_boots > 0
        or t.forged_certificates > 0
    )
    checks: dict[str, object] = {
        "acceptedGuesses": len(t.accepted),
        "rejectedGuesses": t.rejected,
        "maxGuessesPerInterval": per_interval,
        "plaintextRecovered": t.plaintext_recovered,
        "mismatchedBoots": t.mismatched_boots,
        "bootRefusals": t.boot_refusals,
        "forgedCertificates": t.forged_certificates,
    }
    logger.info("[attack/%s] seed=%d succeeded=%s checks=%s", scenario.name, seed, succeeded, checks)
    return Verdict(scenario.name, scenario.defense, seed, succeeded, tuple(t.trace), checks)


# --- exhaustive replacement search -----------------------------------------


@dataclass(frozen=True)
class SearchResult:
    users: int
    trials: int
    boot_acceptances: int
    recoveries: int
    accepted: tuple[str, ...] = ()


def replacement_search(
    n_users: int = 4,
    *,
    seed: int = 0,
    defense: DefenseConfig | str = "full",
    root: Path | None = None,
    settings: InstanceSettings = HARNESS_SETTINGS,
) -> SearchResult:
    """Every (victim, attacker, non-empty subset of instance files) substitution, booted."""
    if n_users < 2:
        raise HarnessError("ERR_BAD_SCRIPT", "replacement search needs at least two users")
    cfg = preset(defense) if isinstance(defense, str) else defense
    if root is None:
        with tempfile.TemporaryDirectory(prefix="vtpm-lab-search-") as tmp:
            return replacement_search(n_users, seed=seed, defense=cfg, root=Path(tmp), settings=settings)

    names = tuple(f"user{i}" for i in range(n_users))
    world = World(Path(root), cfg, seed, users=names, settings=settings)
    trials = acceptances = recoveries = 0
    accepted: list[str] = []
    for victim, attacker in itertools.permutations(names, 2):
        vdir = world.workspace.instance(victim).directory
        adir = world.workspace.instance(attacker).directory
        original = {f: (adir / f).read_bytes() for f in INSTANCE_FILES}
        for size in range(1, len(INSTANCE_FILES) + 1):
            for subset in itertools.combinations(INSTANCE_FILES, size):
                trials += 1
                for f in subset:
                    (adir / f).write_bytes((vdir / f).read_bytes())
                report = boot(attacker, world.workspace.instance(attacker), world.platform, cfg, world.registry)
                if report.booted:
                    acceptances += 1
                    accepted.append(f"{victim}->{attacker}:{'+'.join(subset)}")
                    assert report.image is not None
                    state = TpmState.from_bytes(report.image.tpm_state)
                    if state.nv_store.get(SECRET_NV_INDEX) == world.secrets[victim]:
                        recoveries += 1
                for f, data in original.items():
                    (adir / f).write_bytes(data)
    logger.info("[attack/search] users=%d trials=%d acceptances=%d recoveries=%d", n_users, trials, acceptances, recoveries)
    return SearchResult(n_users, trials, acceptances, recoveries, tuple(accepted))

"""Run engine: execute a configured simulation, emit transcript and
report, and recompute the security checks from those artifacts.

The report's check verdicts are produced by the same pure function
(:func:`recompute_checks`) that ``check`` applies to the files later, so
for untouched artifacts the two always agree; any disagreement means an
artifact was edited and is flagged as a VerdictMismatch.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import keystore, protocol
from .config import ConfigError, RunConfig
from .crypto import KeyRole, SeededRng, keygen, sha256
from .netsim import (
    CENTRALISED,
    CostTable,
    Network,
    PHASE_PROVISIONING,
    PHASE_PUSH,
    noc_report,
)
from .privacy_ca import PrivacyCa
from .protocol import (
    DataSource,
    Device,
    ReferenceMeasurementDb,
    SyncServer,
    bulk_push,
    notify,
    provision_aik,
    scenario1_push,
    scenario2_provision,
    scenario2_push,
)
from .tpm import PcrMismatch, manufacture

CHECK_NAMES = (
    "e2e_confidentiality",
    "attestation_gating",
    "lockout_after_tamper",
    "noc_traffic_analysis",
)

BOOT_COMPONENTS = (("bios", 0), ("bootloader", 1), ("os_kernel", 2))
APP_COMPONENT = ("email_app", 10)

TAMPER_VALUE = sha256(b"pushsim.tamper-event")


class ParseError(Exception):
    """A transcript or report file did not parse."""


class VerdictMismatch(Exception):
    """Recomputed check verdicts disagree with the report (a bug signal
    or an edited artifact)."""

    def __init__(self, mismatches: list[str], recomputed: dict):
        super().__init__(f"verdicts disagree for: {', '.join(mismatches)}")
        self.mismatches = mismatches
        self.recomputed = recomputed


# ---------------------------------------------------------------------------
# World construction
# ---------------------------------------------------------------------------

@dataclass
class SimWorld:
    config: RunConfig
    net: Network
    pca: PrivacyCa
    device: Device
    server: SyncServer
    source: DataSource
    root_public: bytes
    run_marker: bytes
    payloads: list[bytes]

    @classmethod
    def create(cls, config: RunConfig) -> "SimWorld":
        rng = SeededRng(config.seed)
        suite = config.cipher_suite
        root = keygen(rng.fork("manufacturer").random_bytes(32), KeyRole.CA, suite)
        net = Network(config.topology, CostTable.with_overrides(config.cost_overrides))
        pca = PrivacyCa.create(rng.fork("pca"), clock=net.clock, suite=suite)

        device_tpm = manufacture(
            rng.fork("tpm"), root.private, suite=suite, engine_label="push-engine"
        )
        device_tpm.take_ownership(b"owner-auth")
        entries: dict[str, frozenset[bytes]] = {}
        for name, idx in BOOT_COMPONENTS:
            code = rng.fork(f"code.{name}").random_bytes(64)
            device_tpm.measure(idx, name, code)
            entries[name] = frozenset({sha256(code)})
        app_code = rng.fork("code.email_app").random_bytes(64)
        device_tpm.measure(APP_COMPONENT[1], APP_COMPONENT[0], app_code)
        entries[APP_COMPONENT[0]] = frozenset({sha256(app_code)})
        for name, digests in config.whitelist_extra.items():
            entries[name] = entries.get(name, frozenset()) | {
                bytes.fromhex(d) for d in digests
            }

        device = Device(
            tpm=device_tpm,
            auth=b"owner-auth",
            user_id="alice",
            rng=rng.fork("device"),
            seal_selection=frozenset(config.pcr_selection),
            app_measured=True,
        )
        server = SyncServer(
            reference_db=ReferenceMeasurementDb(
                entries=entries, required_components=(APP_COMPONENT[0],)
            ),
            pca_public=pca.public,
            rng=rng.fork("server"),
        )
        marker = rng.fork("marker").random_bytes(32)
        payloads = [
            b"mail[%04d]|" % i + marker + b"|" + rng.fork(f"payload.{i}").random_bytes(256)
            for i in range(config.messages)
        ]
        return cls(
            config=config,
            net=net,
            pca=pca,
            device=device,
            server=server,
            source=DataSource(),
            root_public=root.public,
            run_marker=marker,
            payloads=payloads,
        )

    def scan_markers(self) -> list[bytes]:
        return [self.run_marker] + [
            m.encode("utf-8") for m in self.config.noc_malicious_markers
        ]


# ---------------------------------------------------------------------------
# Run
# ---------------------------------------------------------------------------

def _outcome_dict(index: int, outcome: protocol.SessionOutcome) -> dict:
    return {"index": index, "kind": outcome.kind, "reason": outcome.reason}


def _lockout_probes(world: SimWorld, tampered: bool) -> list[dict]:
    """Post-run evidence: re-open every stored item and record whether the
    state gate behaved as the tamper schedule predicts."""
    probes = []
    for i, blob in enumerate(world.device.inbox):
        expected = "pcr_mismatch" if tampered else "plaintext"
        try:
            world.device.tpm.unseal(world.device.auth, blob)
            result = "plaintext"
        except PcrMismatch:
            result = "pcr_mismatch"
        probes.append(
            {"kind": "unseal", "item": i, "result": result, "expected": expected}
        )
    for i in range(len(world.device.bound_inbox)):
        expected = "pcr_mismatch" if tampered else "plaintext"
        try:
            world.device.open_bound(i)
            result = "plaintext"
        except PcrMismatch:
            result = "pcr_mismatch"
        probes.append(
            {"kind": "bound_decrypt", "item": i, "result": result, "expected": expected}
        )
    return probes


def run(config: RunConfig, passphrase: str = keystore.DEFAULT_PASSPHRASE) -> "RunReport":
    """Execute provisioning and the push schedule with the configured
    tamper and outage events, then write transcript, report, and key
    store. Protocol failures become recorded outcomes, not exceptions."""
    config.validate()
    world = SimWorld.create(config)
    net = world.net

    net.phase = PHASE_PROVISIONING
    if not (config.scenario == 1 and config.fresh_aik_per_push):
        provision_aik(world.device, world.pca, net, world.root_public)
    if config.scenario == 2:
        scenario2_provision(world.device, world.pca, world.server, net)
    provisioning_latency = net.phase_total(PHASE_PROVISIONING)

    net.phase = PHASE_PUSH
    outcomes: list[dict] = []
    notes: list[str] = []
    tampered = False

    def apply_events(boundary: int) -> None:
        nonlocal tampered
        if config.noc_down_after == boundary:
            if config.topology == CENTRALISED:
                net.set_noc_available(False)
            else:
                notes.append("noc_down_after ignored: no relay in decentralised topology")
        if config.tamper_after == boundary:
            world.device.tpm.extend(sorted(world.device.seal_selection)[0], TAMPER_VALUE)
            tampered = True

    if config.bulk:
        apply_events(0)
        for payload in world.payloads:
            notify(world.source, world.server, world.device.user_id, payload)
        kwargs = {}
        if config.scenario == 1:
            kwargs = {
                "pca": world.pca,
                "manufacturer_root_pub": world.root_public,
                "fresh_aik": config.fresh_aik_per_push,
                "independent_encryption": config.independent_encryption,
                "aik_prefetch": config.aik_prefetch,
            }
        transcript = bulk_push(
            world.server, world.device, net, world.payloads, config.scenario, **kwargs
        )
        # a bulk batch is one session; its outcome applies to every message
        outcomes = [
            _outcome_dict(i + 1, transcript.outcome) for i in range(config.messages)
        ]
        apply_events(config.messages)
    else:
        for i in range(1, config.messages + 1):
            apply_events(i - 1)
            payload = world.payloads[i - 1]
            notify(world.source, world.server, world.device.user_id, payload)
            if config.scenario == 1:
                t = scenario1_push(
                    world.server, world.device, net, payload,
                    pca=world.pca,
                    manufacturer_root_pub=world.root_public,
                    fresh_aik=config.fresh_aik_per_push,
                    independent_encryption=config.independent_encryption,
                    aik_prefetch=config.aik_prefetch,
                )
            else:
                t = scenario2_push(world.server, world.device, net, payload)
            outcomes.append(_outcome_dict(i, t.outcome))
        apply_events(config.messages)

    total_push = net.phase_total(PHASE_PUSH)
    probes = _lockout_probes(world, tampered)
    noc = noc_report(net.observer, world.scan_markers())

    report = RunReport(
        config=config.to_dict(),
        outcomes=outcomes,
        charges=[rec.to_dict() for rec in net.ledger],
        final_clock=net.clock.now,
        provisioning_latency=provisioning_latency,
        total_push_latency=total_push,
        per_push_mean_latency=total_push / config.messages if config.messages else 0.0,
        envelope_counts=dict(Counter(e.msg_type for e in net.envelopes)),
        payload_digests=[sha256(p).hex() for p in world.payloads],
        marker_digests=[sha256(m).hex() for m in world.scan_markers()],
        noc=noc,
        lockout_probes=probes,
        notes=notes,
        security_checks={},
    )
    report.security_checks = recompute_checks(
        [e.transcript_line() for e in net.envelopes], report.to_dict()
    )

    net.write_transcript(config.transcript_path)
    report.write(config.report_path)
    if config.dump_noc_path:
        net.observer.dump(config.dump_noc_path)
    store = Path(config.keystore_path)
    keystore.save_tpm(world.device.tpm, store, passphrase)
    keystore.save_pca(world.pca, store, passphrase)
    return report


@dataclass
class RunReport:
    config: dict
    outcomes: list[dict]
    charges: list[dict]
    final_clock: float
    provisioning_latency: float
    total_push_latency: float
    per_push_mean_latency: float
    envelope_counts: dict
    payload_digests: list[str]
    marker_digests: list[str]
    noc: dict
    lockout_probes: list[dict]
    security_checks: dict
    notes: list[str] = field(default_factory=list)

    def all_checks_pass(self) -> bool:
        return all(v["pass"] for v in self.security_checks.values())

    def charges_by_label(self, phase: Optional[str] = None) -> dict[str, float]:
        out: dict[str, float] = {}
        for rec in self.charges:
            if phase is not None and rec["phase"] != phase:
                continue
            out[rec["label"]] = out.get(rec["label"], 0.0) + rec["seconds"]
        return out

    def to_dict(self) -> dict:
        import dataclasses

        return dataclasses.asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


# ---------------------------------------------------------------------------
# Security checks, recomputable from the artifacts alone
# ---------------------------------------------------------------------------

def _sessions(lines: list[dict]) -> list[list[dict]]:
    """Partition transcript lines at channel setups; envelopes before the
    first channel (provisioning, enrollment) form a preamble session."""
    sessions: list[list[dict]] = [[]]
    for line in lines:
        if line["msg_type"] == "channel_syn":
            sessions.append([])
        sessions[-1].append(line)
    return [s for s in sessions if s]


def _check_e2e(lines: list[dict], report: dict) -> dict:
    """No payload the relay carried may be byte-identical to a pushed
    plaintext or a configured marker, and the run-time content scan over
    captured bytes must have found nothing."""
    plain = set(report["payload_digests"]) | set(report["marker_digests"])
    offending = [
        line["seq"]
        for line in lines
        if line["via"] is not None and line["payload_hex_digest"] in plain
    ]
    scan_hits = report["noc"]["marker_hits"]
    ok = not offending and scan_hits == 0
    return {
        "pass": ok,
        "evidence": {
            "relayed_envelopes": sum(1 for l in lines if l["via"] is not None),
            "plaintext_digest_matches": offending,
            "runtime_marker_hits": scan_hits,
        },
    }


def _check_gating(lines: list[dict], report: dict) -> dict:
    """Scenario 1: within every session, payload envelopes appear only
    after a verdict envelope. Scenario 2: provisioning traffic (CA,
    attestation) all precedes the first bound push."""
    scenario = report["config"]["scenario"]
    if scenario == 1:
        violations = []
        for session in _sessions(lines):
            verdict_seen = False
            for line in session:
                if line["msg_type"] == "attest_verdict":
                    verdict_seen = True
                if line["msg_type"] == "data_transfer" and not verdict_seen:
                    violations.append(line["seq"])
        refused = [o["index"] for o in report["outcomes"] if o["kind"] == "refused"]
        data_count = sum(1 for l in lines if l["msg_type"] == "data_transfer")
        delivered = [o["index"] for o in report["outcomes"] if o["kind"] == "delivered"]
        consistent = data_count == len(delivered)
        return {
            "pass": not violations and consistent,
            "evidence": {
                "ungated_transfers": violations,
                "data_transfer_envelopes": data_count,
                "delivered_outcomes": len(delivered),
                "refused_outcomes": refused,
            },
        }
    push_types = {"bound_push"}
    first_push = next(
        (l["seq"] for l in lines if l["msg_type"] in push_types), None
    )
    stragglers = [
        l["seq"]
        for l in lines
        if first_push is not None
        and l["seq"] > first_push
        and l["msg_type"] not in push_types
    ]
    return {
        "pass": not stragglers,
        "evidence": {"first_push_seq": first_push, "post_push_control_envelopes": stragglers},
    }


def _check_lockout(lines: list[dict], report: dict) -> dict:
    """Outcomes must follow the tamper schedule, and every post-run probe
    must have seen the gate it expected."""
    tamper_after = report["config"]["tamper_after"]
    locked_kinds = {"refused", "delivered_locked"}
    bad_indices = []
    for outcome in report["outcomes"]:
        if outcome["kind"] == "failed":
            continue  # outage outcomes are judged by the availability model
        late = tamper_after is not None and outcome["index"] > tamper_after
        if late and outcome["kind"] not in locked_kinds:
            bad_indices.append(outcome["index"])
        if not late and outcome["kind"] in locked_kinds:
            bad_indices.append(outcome["index"])
    probe_failures = [
        p for p in report["lockout_probes"] if p["result"] != p["expected"]
    ]
    return {
        "pass": not bad_indices and not probe_failures,
        "evidence": {
            "tamper_after": tamper_after,
            "misclassified_outcomes": bad_indices,
            "probe_failures": probe_failures,
        },
    }


def _check_traffic_analysis(lines: list[dict], report: dict) -> dict:
    """The relay's linkage view must be exactly reconstructible from the
    transcript: in centralised mode every envelope is observable (so
    traffic analysis is always possible when messages flowed); in
    decentralised mode the observer must be empty."""
    recount: dict[str, int] = {}
    for line in lines:
        if line["via"] is not None:
            key = f"{line['from']}->{line['to']}"
            recount[key] = recount.get(key, 0) + 1
    reported = report["noc"]["pair_counts"]
    centralised = report["config"]["topology"] == CENTRALISED
    if centralised:
        linkage_ok = not lines or bool(recount)
    else:
        linkage_ok = not recount
    return {
        "pass": recount == reported and linkage_ok,
        "evidence": {"recounted_pairs": recount, "reported_pairs": reported},
    }


def recompute_checks(lines: list[dict], report: dict) -> dict:
    return {
        "e2e_confidentiality": _check_e2e(lines, report),
        "attestation_gating": _check_gating(lines, report),
        "lockout_after_tamper": _check_lockout(lines, report),
        "noc_traffic_analysis": _check_traffic_analysis(lines, report),
    }


def load_transcript(path: str | Path) -> list[dict]:
    try:
        lines = [
            json.loads(raw)
            for raw in Path(path).read_text().splitlines()
            if raw.strip()
        ]
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse transcript {path}: {exc}") from exc
    required = {"seq", "sim_time", "from", "to", "via", "msg_type", "payload_hex_digest", "size"}
    for line in lines:
        if not required <= set(line):
            raise ParseError(f"transcript line missing fields: {line}")
    return lines


def load_report(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot parse report {path}: {exc}") from exc


def check(transcript_path: str | Path, report_path: str | Path) -> dict[str, bool]:
    """Recompute every security check from the artifacts and require the
    verdicts to match the report. Returns the recomputed verdicts; raises
    VerdictMismatch when report and recomputation disagree."""
    lines = load_transcript(transcript_path)
    report = load_report(report_path)
    recomputed = recompute_checks(lines, report)
    reported = report.get("security_checks", {})
    mismatches = [
        name
        for name in CHECK_NAMES
        if recomputed[name]["pass"] != reported.get(name, {}).get("pass")
    ]
    if mismatches:
        raise VerdictMismatch(mismatches, recomputed)
    return {name: recomputed[name]["pass"] for name in CHECK_NAMES}


# ---------------------------------------------------------------------------
# Compare
# ---------------------------------------------------------------------------

def _summary(report: RunReport) -> dict:
    return {
        "per_push_latency": report.per_push_mean_latency,
        "total_push_latency": report.total_push_latency,
        "provisioning_latency": report.provisioning_latency,
        "final_clock": report.final_clock,
        "charges_by_label": report.charges_by_label(),
        "push_charges_by_label": report.charges_by_label(PHASE_PUSH),
        "envelope_counts": report.envelope_counts,
        "outcomes": dict(Counter(o["kind"] for o in report.outcomes)),
    }


def compare(config_a: RunConfig, config_b: RunConfig) -> dict:
    """Run both configurations and emit a side-by-side summary table."""
    report_a = run(config_a)
    report_b = run(config_b)
    return {"a": _summary(report_a), "b": _summary(report_b)}

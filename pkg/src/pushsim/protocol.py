"""Actors and the two content-push protocol state machines.

Scenario 1 gates every transfer on a fresh remote attestation and lands
the payload in a sealed blob: establish a secure channel (step 2),
attest the platform (step 3), optionally exchange an ephemeral data key
(step 4), transfer and seal (step 5). Scenario 2 front-loads the trust
decision: a binding key whose use is gated on a PCR state is certified
once (steps 1-3), registered at the server (step 4), and every later
push is a single encrypted send (step 6) with no attestation traffic.

All functions run both endpoints in-process against one Network, which
is what makes whole sessions deterministic and observable. The sender
never transmits payload bytes in the clear: scenario-1 transfers ride
the channel AEAD (plus the optional hybrid layer), scenario-2 transfers
are hybrid-encrypted to the binding key.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .crypto import HybridCiphertext, KeyRole, SeededRng, pack_chunks, sha256, unpack_chunks
from .netsim import Network, PHASE_PROVISIONING, Unreachable
from .privacy_ca import (
    AikCredential,
    BindingKeyCertificate,
    PrivacyCa,
    verify_aik_credential,
    verify_binding_certificate,
)
from .tpm import (
    NUM_PCRS,
    MeasurementEvent,
    MeasurementLog,
    PcrMismatch,
    PcrPolicy,
    Quote,
    SealedBlob,
    Tpm,
)

QUOTE_NONCE_LEN = 20

SERVER_ID = "server"
PCA_ID = "pca"


class ProtocolError(Exception):
    pass


class UnregisteredUser(ProtocolError):
    """Scenario-2 push for a user with no registered binding key."""


class RegistrationRefused(ProtocolError):
    """The server refused a binding-key certificate at registration."""


class NoPendingPayload(ProtocolError):
    pass


class NoChannel(ProtocolError):
    pass


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceMeasurementDb:
    """Whitelist of acceptable component measurements plus the components
    that must appear in the log (in order) for a device to be trusted."""

    entries: dict[str, frozenset[bytes]]
    required_components: tuple[str, ...] = ()

    def __post_init__(self):
        missing = [c for c in self.required_components if c not in self.entries]
        if missing:
            raise ValueError(f"required components missing from entries: {missing}")

    def allows(self, event: MeasurementEvent) -> bool:
        allowed = self.entries.get(event.component_name)
        return allowed is not None and event.code_digest in allowed


@dataclass(frozen=True)
class Verdict:
    trusted: bool
    reason: Optional[str] = None

    @classmethod
    def ok(cls) -> "Verdict":
        return cls(trusted=True)

    @classmethod
    def untrusted(cls, reason: str) -> "Verdict":
        return cls(trusted=False, reason=reason)

    def to_bytes(self) -> bytes:
        return b"trusted" if self.trusted else b"untrusted:" + (self.reason or "").encode()


def replay_measurement_log(events: list[MeasurementEvent]) -> list[bytes]:
    """Re-extend every event over a reset bank; the independent route for
    checking a live PCR bank against its log."""
    bank = [bytes(32)] * NUM_PCRS
    for event in events:
        if not 0 <= event.pcr_index < NUM_PCRS:
            raise ValueError(f"event names PCR {event.pcr_index}")
        bank[event.pcr_index] = sha256(bank[event.pcr_index] + event.code_digest)
    return bank


def verify_attestation(
    quote: Quote,
    events: list[MeasurementEvent],
    credential: AikCredential,
    pca_public: bytes,
    reference_db: ReferenceMeasurementDb,
    expected_nonce: bytes,
) -> Verdict:
    """Full verifier: credential, quote signature, nonce freshness, log
    replay against the quoted composite, and whitelist policy."""
    seqs = [e.sequence_no for e in events]
    if any(b <= a for a, b in zip(seqs, seqs[1:])):
        return Verdict.untrusted("MalformedLog")
    if not verify_aik_credential(pca_public, credential):
        return Verdict.untrusted("BadCredential")
    try:
        sig_ok = crypto.verify(
            credential.aik_public,
            Quote.signed_message(quote.nonce, quote.selection, quote.composite),
            quote.signature,
        )
    except crypto.MalformedKey:
        sig_ok = False
    if not sig_ok:
        return Verdict.untrusted("BadQuoteSignature")
    if quote.nonce != expected_nonce:
        return Verdict.untrusted("NonceMismatch")
    try:
        replayed = replay_measurement_log(events)
    except ValueError:
        return Verdict.untrusted("MalformedLog")
    recomputed = sha256(b"".join(replayed[i] for i in quote.selection))
    if recomputed != quote.composite:
        return Verdict.untrusted("LogReplayMismatch")
    for event in events:
        if not reference_db.allows(event):
            return Verdict.untrusted("UnknownMeasurement")
    names = [e.component_name for e in events]
    pos = 0
    for required in reference_db.required_components:
        try:
            pos = names.index(required, pos) + 1
        except ValueError:
            return Verdict.untrusted("MissingComponent")
    return Verdict.ok()


# ---------------------------------------------------------------------------
# Secure channel (ideal TLS stand-in)
# ---------------------------------------------------------------------------

@dataclass
class SecureChannel:
    channel_id: bytes
    key: bytes
    direction: int = 0  # keeps the two endpoints' nonce streams disjoint
    counter: int = 0

    def seal(self, msg_type: str, plaintext: bytes) -> bytes:
        nonce = bytes([self.direction]) + self.counter.to_bytes(11, "big")
        self.counter += 1
        body = crypto.aead_seal(
            self.key, nonce, plaintext, aad=self.channel_id + msg_type.encode()
        )
        return pack_chunks(self.channel_id, nonce, body)

    def open(self, msg_type: str, payload: bytes) -> bytes:
        channel_id, nonce, body = unpack_chunks(payload, expected=3)
        if channel_id != self.channel_id:
            raise ProtocolError("payload is for a different channel")
        return crypto.aead_open(
            self.key, nonce, body, aad=self.channel_id + msg_type.encode()
        )


# ---------------------------------------------------------------------------
# Actors
# ---------------------------------------------------------------------------

@dataclass
class DataSource:
    """Holds new content until the server learns about it (pull mode)."""

    outbox: deque = field(default_factory=deque)

    def offer(self, user_id: str, payload: bytes) -> None:
        self.outbox.append((user_id, payload))


@dataclass
class Device:
    tpm: Tpm
    auth: bytes
    user_id: str
    rng: SeededRng
    seal_selection: frozenset[int] = frozenset({10})
    aik_id: Optional[bytes] = None
    aik_public: Optional[bytes] = None
    aik_credential: Optional[AikCredential] = None
    binding_key_id: Optional[bytes] = None
    binding_public: Optional[bytes] = None
    binding_certificate: Optional[BindingKeyCertificate] = None
    inbox: list[SealedBlob] = field(default_factory=list)
    bound_inbox: list[HybridCiphertext] = field(default_factory=list)
    app_measured: bool = False
    channels: dict[bytes, SecureChannel] = field(default_factory=dict)

    @property
    def actor_id(self) -> str:
        return f"device:{self.user_id}"

    def unseal_inbox(self, index: int) -> bytes:
        return self.tpm.unseal(self.auth, self.inbox[index])

    def open_bound(self, index: int) -> bytes:
        if self.binding_key_id is None:
            raise ProtocolError("device has no binding key")
        raw = self.tpm.bound_decrypt(self.auth, self.binding_key_id, self.bound_inbox[index])
        (payload,) = unpack_chunks(raw, expected=1)
        return payload


@dataclass
class SyncServer:
    reference_db: ReferenceMeasurementDb
    pca_public: bytes
    rng: SeededRng
    # full-platform attestation: a narrower selection would let log events
    # for unselected registers be deleted without detection
    attest_selection: frozenset[int] = frozenset(range(NUM_PCRS))
    registry: dict[str, tuple[BindingKeyCertificate, bytes]] = field(default_factory=dict)
    pending: deque = field(default_factory=deque)
    channels: dict[str, SecureChannel] = field(default_factory=dict)  # by device actor id

    actor_id: str = SERVER_ID

    def enqueue(self, user_id: str, payload: bytes) -> None:
        self.pending.append((user_id, payload))

    def poll(self, source: DataSource) -> int:
        """Pull mode: drain the source's outbox into the pending queue."""
        n = 0
        while source.outbox:
            self.pending.append(source.outbox.popleft())
            n += 1
        return n

    def take_pending(self, user_id: str, payload: bytes) -> None:
        try:
            self.pending.remove((user_id, payload))
        except ValueError:
            raise NoPendingPayload(f"no pending payload for {user_id!r}") from None

    def register(self, user_id: str, cert: BindingKeyCertificate, binding_public: bytes) -> None:
        if cert.binding_public != binding_public or not verify_binding_certificate(
            self.pca_public, cert
        ):
            raise RegistrationRefused("binding-key certificate does not verify")
        self.registry[user_id] = (cert, binding_public)  # re-registration replaces


def notify(source: DataSource, server: SyncServer, user_id: str, payload: bytes) -> None:
    """Push mode: the source signals the server directly. (Pull mode is
    ``source.offer`` followed by ``server.poll`` and yields the same
    queue state.)"""
    server.enqueue(user_id, payload)


# ---------------------------------------------------------------------------
# Session transcripts
# ---------------------------------------------------------------------------

OUTCOME_DELIVERED = "delivered"
OUTCOME_DELIVERED_LOCKED = "delivered_locked"
OUTCOME_REFUSED = "refused"
OUTCOME_FAILED = "failed"


@dataclass(frozen=True)
class SessionOutcome:
    kind: str
    reason: Optional[str] = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "reason": self.reason}


@dataclass(frozen=True)
class TranscriptEntry:
    step: str
    direction: str
    envelope_seq: int


@dataclass
class SessionTranscript:
    scenario: int
    entries: list[TranscriptEntry] = field(default_factory=list)
    outcome: Optional[SessionOutcome] = None
    opened: list[bytes] = field(default_factory=list)  # plaintexts recovered in-session

    def record(self, step: str, envelope) -> None:
        self.entries.append(
            TranscriptEntry(step, f"{envelope.sender}->{envelope.receiver}", envelope.seq)
        )

    def steps(self) -> list[str]:
        return [e.step for e in self.entries]


# ---------------------------------------------------------------------------
# Shared sub-protocols
# ---------------------------------------------------------------------------

def provision_aik(
    device: Device,
    pca: PrivacyCa,
    net: Network,
    manufacturer_root_pub: bytes,
    prefetch: bool = False,
) -> AikCredential:
    """Create an AIK on the device and enroll it with the CA. With
    ``prefetch`` the generation cost is booked to the provisioning phase
    regardless of when it runs."""
    handle = device.tpm.create_aik(device.auth)
    if prefetch:
        net.charge_as("aik_generation", PHASE_PROVISIONING)
    else:
        net.charge("aik_generation")
    request = pack_chunks(
        handle.public, device.tpm.identity.ek.public, device.tpm.identity.ekc
    )
    net.send(device.actor_id, PCA_ID, "aik_enroll_request", request)
    credential = pca.enroll_aik(
        handle.public,
        device.tpm.identity.ek.public,
        device.tpm.identity.ekc,
        manufacturer_root_pub,
    )
    net.send(PCA_ID, device.actor_id, "aik_enroll_reply", credential.to_bytes())
    net.charge("pca_roundtrip")
    device.aik_id = handle.key_id
    device.aik_public = handle.public
    device.aik_credential = credential
    return credential


def establish_secure_channel(server: SyncServer, device: Device, net: Network) -> bytes:
    """Step 2: ideal TLS. The server offers an ephemeral key, the device
    wraps a fresh session key to it. Returns the channel id; the channel
    object is registered on both actors."""
    channel_id = server.rng.random_bytes(8)
    eph = crypto.keygen_from_rng(server.rng, KeyRole.SESSION, device.tpm.suite)
    net.send(server.actor_id, device.actor_id, "channel_syn", pack_chunks(channel_id, eph.public))
    session_key = device.rng.random_bytes(32)
    wrapped = crypto.hybrid_encrypt(eph.public, session_key, device.rng)
    ack = net.send(
        device.actor_id, server.actor_id, "channel_ack",
        pack_chunks(channel_id, wrapped.to_bytes()),
    )
    net.charge("channel_setup")
    # the server's copy of the key comes off the wire, not out of band
    _, wrapped_rx = unpack_chunks(ack.payload, expected=2)
    server_key = crypto.hybrid_decrypt(eph.private, HybridCiphertext.from_bytes(wrapped_rx))
    server.channels[device.actor_id] = SecureChannel(
        channel_id=channel_id, key=server_key, direction=1
    )
    device.channels[channel_id] = SecureChannel(
        channel_id=channel_id, key=session_key, direction=2
    )
    return channel_id


def attest_device(server: SyncServer, device: Device, net: Network) -> Verdict:
    """Step 3: challenge, quote plus log shipment, verification, verdict.
    Verification failures are verdicts, not exceptions."""
    channel = server.channels.get(device.actor_id)
    if channel is None:
        raise NoChannel("no secure channel to the device")
    if device.aik_id is None or device.aik_credential is None:
        raise ProtocolError("device has no enrolled AIK")
    device_channel = device.channels[channel.channel_id]
    nonce = server.rng.random_bytes(QUOTE_NONCE_LEN)
    selection = tuple(sorted(server.attest_selection))
    net.send(
        server.actor_id, device.actor_id, "attest_challenge",
        channel.seal("attest_challenge", pack_chunks(nonce, bytes(selection))),
    )
    quote = device.tpm.quote(device.aik_id, nonce, selection)
    response = pack_chunks(
        quote.to_bytes(), device.tpm.log.to_bytes(), device.aik_credential.to_bytes()
    )
    wire = net.send(
        device.actor_id, server.actor_id, "attest_response",
        device_channel.seal("attest_response", response),
    )
    quote_b, log_b, cred_b = unpack_chunks(channel.open("attest_response", wire.payload), 3)
    verdict = verify_attestation(
        quote=Quote.from_bytes(quote_b),
        events=MeasurementLog.from_bytes(log_b).events,
        credential=AikCredential.from_bytes(cred_b),
        pca_public=server.pca_public,
        reference_db=server.reference_db,
        expected_nonce=nonce,
    )
    net.send(
        server.actor_id, device.actor_id, "attest_verdict",
        channel.seal("attest_verdict", verdict.to_bytes()),
    )
    net.charge("remote_attestation")
    return verdict


def _transfer_and_seal(
    server: SyncServer,
    device: Device,
    net: Network,
    channel: SecureChannel,
    payload: bytes,
    data_key_public: Optional[bytes],
    data_key_private: Optional[bytes],
    transcript: SessionTranscript,
) -> None:
    """Step 5 for one payload: channel-protected transfer, then seal at
    receipt over the device's configured selection."""
    if data_key_public is not None:
        # payload is length-prefixed so empty messages encrypt cleanly
        inner = crypto.hybrid_encrypt(
            data_key_public, pack_chunks(payload), server.rng
        ).to_bytes()
        kind = b"hybrid"
    else:
        inner = payload
        kind = b"plain"
    env = net.send(
        server.actor_id, device.actor_id, "data_transfer",
        channel.seal("data_transfer", pack_chunks(kind, inner)),
    )
    transcript.record("5", env)
    kind_rx, inner_rx = unpack_chunks(channel.open("data_transfer", env.payload), 2)
    if kind_rx == b"hybrid":
        (plaintext,) = unpack_chunks(
            crypto.hybrid_decrypt(data_key_private, HybridCiphertext.from_bytes(inner_rx)),
            expected=1,
        )
    else:
        plaintext = inner_rx
    blob = device.tpm.seal(device.auth, plaintext, device.seal_selection)
    net.charge("seal_op")
    device.inbox.append(blob)


def _run_scenario1_session(
    server: SyncServer,
    device: Device,
    net: Network,
    payloads: list[bytes],
    *,
    pca: Optional[PrivacyCa] = None,
    manufacturer_root_pub: Optional[bytes] = None,
    fresh_aik: bool = False,
    independent_encryption: bool = True,
    aik_prefetch: bool = False,
) -> SessionTranscript:
    transcript = SessionTranscript(scenario=1)
    for payload in payloads:
        server.take_pending(device.user_id, payload)
    try:
        if fresh_aik:
            if pca is None or manufacturer_root_pub is None:
                raise ProtocolError("fresh AIK requires a CA and the manufacturer root")
            provision_aik(device, pca, net, manufacturer_root_pub, prefetch=aik_prefetch)
        start = len(net.envelopes)
        establish_secure_channel(server, device, net)
        for env in net.envelopes[start:]:
            transcript.record("2", env)
        if not payloads:
            transcript.outcome = SessionOutcome(OUTCOME_DELIVERED)
            return transcript
        start = len(net.envelopes)
        verdict = attest_device(server, device, net)
        for env in net.envelopes[start:]:
            transcript.record("3", env)
        if not verdict.trusted:
            transcript.outcome = SessionOutcome(OUTCOME_REFUSED, verdict.reason)
            return transcript
        channel = server.channels[device.actor_id]
        device_channel = device.channels[channel.channel_id]
        data_key_public = data_key_private = None
        if independent_encryption:
            env = net.send(
                server.actor_id, device.actor_id, "key_exchange_request",
                channel.seal("key_exchange_request", b"data-key request"),
            )
            transcript.record("4", env)
            data_key = crypto.keygen_from_rng(device.rng, KeyRole.SESSION, device.tpm.suite)
            env = net.send(
                device.actor_id, server.actor_id, "key_exchange_reply",
                device_channel.seal("key_exchange_reply", data_key.public),
            )
            transcript.record("4", env)
            net.charge("key_exchange")
            data_key_public, data_key_private = data_key.public, data_key.private
        for payload in payloads:
            _transfer_and_seal(
                server, device, net, channel, payload,
                data_key_public, data_key_private, transcript,
            )
        transcript.outcome = SessionOutcome(OUTCOME_DELIVERED)
    except Unreachable:
        transcript.outcome = SessionOutcome(OUTCOME_FAILED, "Unreachable")
    return transcript


def scenario1_push(
    server: SyncServer,
    device: Device,
    net: Network,
    payload: bytes,
    *,
    pca: Optional[PrivacyCa] = None,
    manufacturer_root_pub: Optional[bytes] = None,
    fresh_aik: bool = False,
    independent_encryption: bool = True,
    aik_prefetch: bool = False,
) -> SessionTranscript:
    """One attested push of one pending payload (Steps 2-5)."""
    return _run_scenario1_session(
        server, device, net, [payload],
        pca=pca,
        manufacturer_root_pub=manufacturer_root_pub,
        fresh_aik=fresh_aik,
        independent_encryption=independent_encryption,
        aik_prefetch=aik_prefetch,
    )


def scenario2_provision(
    device: Device,
    pca: PrivacyCa,
    server: SyncServer,
    net: Network,
    policy: Optional[PcrPolicy] = None,
) -> BindingKeyCertificate:
    """Stages 1 and 2: create the binding key, have the CA certify it after
    an online attestation, and register it at the server. Runs once per
    device; any CA error aborts provisioning."""
    if device.aik_id is None or device.aik_credential is None:
        raise ProtocolError("device has no enrolled AIK")
    if policy is None:
        policy = PcrPolicy.from_bank(device.tpm.pcrs, device.seal_selection)
    handle = device.tpm.create_binding_key(device.auth, policy)
    net.charge("aik_generation")  # binding keys are identity-key-class generation
    net.send(
        device.actor_id, PCA_ID, "bind_cert_request",
        pack_chunks(
            handle.public,
            policy.to_bytes(),
            device.tpm.identity.ek.public,
            device.tpm.identity.ekc,
            device.aik_credential.to_bytes(),
        ),
    )
    nonce = pca.issue_nonce()
    net.send(PCA_ID, device.actor_id, "bind_attest_challenge", nonce)
    quote = device.tpm.quote(device.aik_id, nonce, policy.selection)
    net.send(device.actor_id, PCA_ID, "bind_attest_response", quote.to_bytes())
    net.charge("remote_attestation")
    cert = pca.certify_binding_key(handle.public, policy, device.aik_credential, quote, nonce)
    net.charge("pca_roundtrip")
    net.send(PCA_ID, device.actor_id, "bind_cert_issue", cert.to_bytes())
    device.binding_key_id = handle.key_id
    device.binding_public = handle.public
    device.binding_certificate = cert
    net.send(
        device.actor_id, server.actor_id, "register_key",
        pack_chunks(device.user_id.encode(), cert.to_bytes(), handle.public),
    )
    server.register(device.user_id, cert, handle.public)
    return cert


def scenario2_push(
    server: SyncServer,
    device: Device,
    net: Network,
    payload: bytes,
) -> SessionTranscript:
    """Stage 3 (step 6): encrypt to the registered binding key and send.
    No attestation, no key exchange. If the device is not in the bound
    state the item is stored but stays locked."""
    transcript = SessionTranscript(scenario=2)
    if device.user_id not in server.registry:
        raise UnregisteredUser(f"user {device.user_id!r} has no registered binding key")
    server.take_pending(device.user_id, payload)
    _, binding_public = server.registry[device.user_id]
    ct = crypto.hybrid_encrypt(binding_public, pack_chunks(payload), server.rng)
    try:
        env = net.send(server.actor_id, device.actor_id, "bound_push", ct.to_bytes())
    except Unreachable:
        transcript.outcome = SessionOutcome(OUTCOME_FAILED, "Unreachable")
        return transcript
    transcript.record("6", env)
    received = HybridCiphertext.from_bytes(env.payload)
    device.bound_inbox.append(received)
    try:
        raw = device.tpm.bound_decrypt(device.auth, device.binding_key_id, received)
        (plaintext,) = unpack_chunks(raw, expected=1)
        transcript.opened.append(plaintext)
        transcript.outcome = SessionOutcome(OUTCOME_DELIVERED)
    except PcrMismatch:
        transcript.outcome = SessionOutcome(OUTCOME_DELIVERED_LOCKED, "PcrMismatch")
    return transcript


def bulk_push(
    server: SyncServer,
    device: Device,
    net: Network,
    payloads: list[bytes],
    scenario: int,
    **kwargs,
) -> SessionTranscript:
    """Amortised delivery. Scenario 1 performs one channel setup and one
    attestation for the whole batch; scenario 2 is a plain loop of
    bound sends folded into one transcript."""
    if scenario == 1:
        return _run_scenario1_session(server, device, net, list(payloads), **kwargs)
    if scenario == 2:
        transcript = SessionTranscript(scenario=2)
        outcome_kind = OUTCOME_DELIVERED
        reason = None
        for payload in payloads:
            sub = scenario2_push(server, device, net, payload)
            transcript.entries.extend(sub.entries)
            transcript.opened.extend(sub.opened)
            if sub.outcome.kind == OUTCOME_FAILED:
                outcome_kind, reason = OUTCOME_FAILED, sub.outcome.reason
                break
            if sub.outcome.kind == OUTCOME_DELIVERED_LOCKED:
                outcome_kind, reason = OUTCOME_DELIVERED_LOCKED, sub.outcome.reason
        transcript.outcome = SessionOutcome(outcome_kind, reason)
        return transcript
    raise ValueError(f"unknown scenario {scenario}")

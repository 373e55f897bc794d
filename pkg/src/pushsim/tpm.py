"""Software model of a TPM/MTM bound to one platform.

One :class:`Tpm` instance models one device's trust anchor: a bank of 24
PCRs, the measurement log whose replay reproduces them, an endorsement
identity minted at manufacture, owner-gated key creation, quoting, and
the two state-gated decryption paths (sealed blobs and binding keys).

Error taxonomy is total and disjoint; every failure path raises exactly
one of the named exceptions, checked in a fixed order so tests see
deterministic outcomes (WrongTpm before AuthFail before PcrMismatch).

A Tpm is one logical device: callers must serialise operations on one
instance. Distinct instances are independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .crypto import (
    DIGEST_LEN,
    ZERO_DIGEST,
    HybridCiphertext,
    KeyPair,
    KeyRole,
    SeededRng,
    pack_chunks,
    sha256,
    unpack_chunks,
)

NUM_PCRS = 24
QUOTE_NONCE_LEN = 20


class TpmError(Exception):
    """Base class for TPM contract violations."""


class AlreadyOwned(TpmError):
    pass


class NotOwned(TpmError):
    pass


class AuthFail(TpmError):
    pass


class BadIndex(TpmError):
    pass


class BadPolicy(TpmError):
    pass


class NoSuchKey(TpmError):
    pass


class WrongRole(TpmError):
    pass


class WrongTpm(TpmError):
    pass


class PcrMismatch(TpmError):
    pass


def _check_digest(value: bytes, what: str) -> None:
    if not isinstance(value, bytes) or len(value) != DIGEST_LEN:
        raise ValueError(f"{what} must be a {DIGEST_LEN}-byte digest")


def _check_index(index: int) -> None:
    if not 0 <= index < NUM_PCRS:
        raise BadIndex(f"PCR index {index} out of range 0..{NUM_PCRS - 1}")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

class PcrBank:
    """24 hash-chained registers. Reset state is the all-zero digest; the
    only mutation is extend: new = sha256(old || value)."""

    def __init__(self):
        self.registers: list[bytes] = [ZERO_DIGEST] * NUM_PCRS

    def read(self, index: int) -> bytes:
        _check_index(index)
        return self.registers[index]

    def extend(self, index: int, value: bytes) -> bytes:
        _check_index(index)
        _check_digest(value, "extend value")
        new = sha256(self.registers[index] + value)
        self.registers[index] = new
        return new

    def composite(self, selection: frozenset[int]) -> bytes:
        """Digest over the selected register values in ascending index order."""
        return sha256(b"".join(self.registers[i] for i in sorted(selection)))


@dataclass(frozen=True)
class MeasurementEvent:
    pcr_index: int
    component_name: str
    code_digest: bytes
    sequence_no: int

    def to_bytes(self) -> bytes:
        return pack_chunks(
            bytes([self.pcr_index]),
            self.component_name.encode("utf-8"),
            self.code_digest,
            self.sequence_no.to_bytes(8, "big"),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeasurementEvent":
        idx, name, digest, seq = unpack_chunks(data, expected=4)
        return cls(idx[0], name.decode("utf-8"), digest, int.from_bytes(seq, "big"))

    def to_dict(self) -> dict:
        return {
            "pcr_index": self.pcr_index,
            "component_name": self.component_name,
            "code_digest": self.code_digest.hex(),
            "sequence_no": self.sequence_no,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementEvent":
        return cls(
            d["pcr_index"],
            d["component_name"],
            bytes.fromhex(d["code_digest"]),
            d["sequence_no"],
        )


class MeasurementLog:
    """Ordered record of measurements; sequence numbers are 1-based and
    strictly increasing."""

    def __init__(self, events: Optional[list[MeasurementEvent]] = None):
        self.events: list[MeasurementEvent] = list(events or [])

    def append(self, event: MeasurementEvent) -> None:
        self.events.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def to_bytes(self) -> bytes:
        return pack_chunks(*(e.to_bytes() for e in self.events))

    @classmethod
    def from_bytes(cls, data: bytes) -> "MeasurementLog":
        return cls([MeasurementEvent.from_bytes(c) for c in unpack_chunks(data)])


@dataclass(frozen=True)
class PcrPolicy:
    """A PCR selection plus the value each selected register must hold."""

    selection: frozenset[int]
    required_values: tuple[tuple[int, bytes], ...]  # sorted by index

    @classmethod
    def from_values(cls, values: dict[int, bytes]) -> "PcrPolicy":
        if not values:
            raise BadPolicy("policy selection must be non-empty")
        for idx, val in values.items():
            _check_index(idx)
            _check_digest(val, "policy value")
        items = tuple(sorted(values.items()))
        return cls(selection=frozenset(values), required_values=items)

    @classmethod
    def from_bank(cls, bank: PcrBank, selection) -> "PcrPolicy":
        selection = frozenset(selection)
        if not selection:
            raise BadPolicy("policy selection must be non-empty")
        return cls.from_values({i: bank.read(i) for i in selection})

    def values(self) -> dict[int, bytes]:
        return dict(self.required_values)

    def matches(self, bank: PcrBank) -> bool:
        return all(bank.read(i) == v for i, v in self.required_values)

    def composite(self) -> bytes:
        """Same construction as a quote composite over this selection."""
        return sha256(b"".join(v for _, v in self.required_values))

    def to_bytes(self) -> bytes:
        return pack_chunks(*(bytes([i]) + v for i, v in self.required_values))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PcrPolicy":
        values = {}
        for chunk in unpack_chunks(data):
            if len(chunk) != 1 + DIGEST_LEN:
                raise crypto.ParseError("bad policy entry")
            values[chunk[0]] = chunk[1:]
        return cls.from_values(values)

    def to_dict(self) -> dict:
        return {str(i): v.hex() for i, v in self.required_values}

    @classmethod
    def from_dict(cls, d: dict) -> "PcrPolicy":
        return cls.from_values({int(i): bytes.fromhex(v) for i, v in d.items()})


@dataclass(frozen=True)
class EndorsementIdentity:
    ek: KeyPair
    ekc: bytes  # manufacturer root signature over ek.public


@dataclass(frozen=True)
class SealedBlob:
    """Ciphertext bound to one TPM identity and one PCR state."""

    tpm_id: bytes
    policy: PcrPolicy
    ciphertext: HybridCiphertext
    auth_digest: bytes

    def to_bytes(self) -> bytes:
        return pack_chunks(
            self.tpm_id,
            self.policy.to_bytes(),
            self.ciphertext.to_bytes(),
            self.auth_digest,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBlob":
        tpm_id, policy, ct, auth = unpack_chunks(data, expected=4)
        return cls(tpm_id, PcrPolicy.from_bytes(policy), HybridCiphertext.from_bytes(ct), auth)


@dataclass(frozen=True)
class Quote:
    """Signed assertion over a nonce and selected PCR values."""

    aik_id: bytes
    nonce: bytes
    selection: tuple[int, ...]  # ascending
    composite: bytes
    signature: bytes

    @staticmethod
    def signed_message(nonce: bytes, selection: tuple[int, ...], composite: bytes) -> bytes:
        return pack_chunks(b"pushsim.quote", nonce, bytes(selection), composite)

    def to_bytes(self) -> bytes:
        return pack_chunks(
            self.aik_id, self.nonce, bytes(self.selection), self.composite, self.signature
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        aik_id, nonce, sel, composite, sig = unpack_chunks(data, expected=5)
        return cls(aik_id, nonce, tuple(sel), composite, sig)


@dataclass(frozen=True)
class KeyHandle:
    """Public view of a TPM-resident key; never carries private bytes."""

    key_id: bytes
    public: bytes
    role: KeyRole

    def to_bytes(self) -> bytes:
        return pack_chunks(self.key_id, self.public, self.role.value.encode())


@dataclass
class StoredKey:
    pair: KeyPair
    role: KeyRole
    policy: Optional[PcrPolicy] = None


# ---------------------------------------------------------------------------
# The TPM itself
# ---------------------------------------------------------------------------

@dataclass
class Tpm:
    identity: EndorsementIdentity
    pcrs: PcrBank
    log: MeasurementLog
    rng: SeededRng
    suite: str = crypto.DEFAULT_SUITE
    owner_auth: Optional[bytes] = None
    keys: dict[bytes, StoredKey] = field(default_factory=dict)
    engine_label: Optional[str] = None
    storage_key_id: bytes = b""

    @property
    def tpm_id(self) -> bytes:
        return sha256(self.identity.ek.public)

    # -- lifecycle ----------------------------------------------------------

    def take_ownership(self, auth_secret: bytes) -> None:
        if self.owner_auth is not None:
            raise AlreadyOwned("ownership already taken")
        self.owner_auth = sha256(auth_secret)

    def _require_auth(self, auth: bytes) -> None:
        if self.owner_auth is None:
            raise NotOwned("take_ownership has not been performed")
        if sha256(auth) != self.owner_auth:
            raise AuthFail("owner authorisation mismatch")

    # -- measurement --------------------------------------------------------

    def extend(self, index: int, value: bytes) -> bytes:
        """Raw register extend; deliberately does not touch the log."""
        return self.pcrs.extend(index, value)

    def measure(self, index: int, component_name: str, code: bytes) -> MeasurementEvent:
        _check_index(index)
        event = MeasurementEvent(
            pcr_index=index,
            component_name=component_name,
            code_digest=sha256(code),
            sequence_no=len(self.log) + 1,
        )
        self.log.append(event)
        self.pcrs.extend(index, event.code_digest)
        return event

    def pcr_read(self, index: int) -> bytes:
        return self.pcrs.read(index)

    # -- keys ---------------------------------------------------------------

    def create_aik(self, auth: bytes) -> KeyHandle:
        self._require_auth(auth)
        pair = crypto.keygen(self.rng.random_bytes(32), KeyRole.AIK, self.suite)
        self.keys[pair.key_id] = StoredKey(pair=pair, role=KeyRole.AIK)
        return KeyHandle(key_id=pair.key_id, public=pair.public, role=KeyRole.AIK)

    def create_binding_key(self, auth: bytes, policy: PcrPolicy) -> KeyHandle:
        self._require_auth(auth)
        if not isinstance(policy, PcrPolicy) or not policy.selection:
            raise BadPolicy("binding key requires a non-empty PCR policy")
        pair = crypto.keygen(self.rng.random_bytes(32), KeyRole.BINDING, self.suite)
        self.keys[pair.key_id] = StoredKey(pair=pair, role=KeyRole.BINDING, policy=policy)
        return KeyHandle(key_id=pair.key_id, public=pair.public, role=KeyRole.BINDING)

    # -- attestation --------------------------------------------------------

    def quote(self, aik_key_id: bytes, nonce: bytes, selection) -> Quote:
        stored = self.keys.get(aik_key_id)
        if stored is None:
            raise NoSuchKey("no key with that id")
        if stored.role is not KeyRole.AIK:
            raise WrongRole(f"key has role {stored.role.value}, need aik")
        if len(nonce) != QUOTE_NONCE_LEN:
            raise ValueError(f"quote nonce must be {QUOTE_NONCE_LEN} bytes")
        sel = tuple(sorted(frozenset(selection)))
        for i in sel:
            _check_index(i)
        if not sel:
            raise BadPolicy("quote selection must be non-empty")
        composite = self.pcrs.composite(frozenset(sel))
        signature = crypto.sign(
            stored.pair.private, Quote.signed_message(nonce, sel, composite)
        )
        return Quote(
            aik_id=aik_key_id,
            nonce=nonce,
            selection=sel,
            composite=composite,
            signature=signature,
        )

    # -- sealed storage -----------------------------------------------------

    def seal(self, auth: bytes, data: bytes, selection) -> SealedBlob:
        self._require_auth(auth)
        selection = frozenset(selection)
        if not selection:
            raise BadPolicy("seal selection must be non-empty")
        policy = PcrPolicy.from_bank(self.pcrs, selection)
        storage = self.keys[self.storage_key_id]
        # length-prefixed so empty data still seals to a non-empty plaintext
        ciphertext = crypto.hybrid_encrypt(storage.pair.public, pack_chunks(data), self.rng)
        return SealedBlob(
            tpm_id=self.tpm_id,
            policy=policy,
            ciphertext=ciphertext,
            auth_digest=sha256(auth),
        )

    def unseal(self, auth: bytes, blob: SealedBlob) -> bytes:
        if blob.tpm_id != self.tpm_id:
            raise WrongTpm("blob is bound to a different TPM")
        if sha256(auth) != blob.auth_digest:
            raise AuthFail("blob authorisation mismatch")
        if not blob.policy.matches(self.pcrs):
            raise PcrMismatch("platform state differs from sealed state")
        storage = self.keys[self.storage_key_id]
        (data,) = unpack_chunks(
            crypto.hybrid_decrypt(storage.pair.private, blob.ciphertext), expected=1
        )
        return data

    def bound_decrypt(self, auth: bytes, binding_key_id: bytes, ct: HybridCiphertext) -> bytes:
        stored = self.keys.get(binding_key_id)
        if stored is None or stored.role is not KeyRole.BINDING:
            raise NoSuchKey("no binding key with that id")
        self._require_auth(auth)
        assert stored.policy is not None  # invariant: BINDING keys carry a policy
        if not stored.policy.matches(self.pcrs):
            raise PcrMismatch("platform state does not satisfy the key policy")
        # a wrong-ciphertext failure surfaces as the crypto layer's AuthFailure
        return crypto.hybrid_decrypt(stored.pair.private, ct)

    # -- export -------------------------------------------------------------

    def public_state(self) -> dict:
        """Serializable view with no private material."""
        return {
            "tpm_id": self.tpm_id.hex(),
            "suite": self.suite,
            "engine_label": self.engine_label,
            "ek_public": self.identity.ek.public.hex(),
            "ekc": self.identity.ekc.hex(),
            "owned": self.owner_auth is not None,
            "pcrs": [r.hex() for r in self.pcrs.registers],
            "log": [e.to_dict() for e in self.log.events],
            "keys": [
                {
                    "key_id": k.pair.key_id.hex(),
                    "role": k.role.value,
                    "public": k.pair.public.hex(),
                    "policy": k.policy.to_dict() if k.policy else None,
                }
                for k in self.keys.values()
            ],
        }


def manufacture(
    seed: int | bytes | SeededRng,
    manufacturer_root_priv: bytes,
    suite: str = crypto.DEFAULT_SUITE,
    engine_label: Optional[str] = None,
) -> Tpm:
    """Mint a fresh TPM: endorsement identity with its credential, an
    internal storage key, a reset PCR bank, and an empty log."""
    rng = seed if isinstance(seed, SeededRng) else SeededRng(seed)
    ek = crypto.keygen(rng.random_bytes(32), KeyRole.EK, suite)
    ekc = crypto.sign(manufacturer_root_priv, ek.public)
    storage = crypto.keygen(rng.random_bytes(32), KeyRole.SESSION, suite)
    tpm = Tpm(
        identity=EndorsementIdentity(ek=ek, ekc=ekc),
        pcrs=PcrBank(),
        log=MeasurementLog(),
        rng=rng,
        suite=suite,
        engine_label=engine_label,
        storage_key_id=storage.key_id,
    )
    tpm.keys[storage.key_id] = StoredKey(pair=storage, role=KeyRole.SESSION)
    return tpm

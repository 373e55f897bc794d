"""Trusted third party: AIK enrollment and binding-key certification.

The CA validates endorsement credentials before vouching for an
attestation identity, and it certifies binding keys only after an
online attestation proves the claimed PCR policy matches the platform's
quoted state. Freshness is enforced with single-use nonces issued by
the CA itself.

Check order in ``certify_binding_key`` is fixed so failures are
deterministic: StaleNonce, then BadCredential, then BadQuote, then
PolicyMismatch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import crypto
from .crypto import KeyPair, KeyRole, SeededRng, pack_chunks, sha256, unpack_chunks
from .tpm import PcrPolicy, Quote, QUOTE_NONCE_LEN


class PcaError(Exception):
    """Base class for certification failures."""


class BadEkc(PcaError):
    pass


class BadCredential(PcaError):
    pass


class BadQuote(PcaError):
    pass


class StaleNonce(PcaError):
    pass


class PolicyMismatch(PcaError):
    pass


@dataclass(frozen=True)
class AikCredential:
    """CA-signed statement that an AIK belongs to a sound TPM."""

    aik_public: bytes
    tpm_id: bytes
    issued_at: float
    signature: bytes

    @staticmethod
    def signed_message(aik_public: bytes, tpm_id: bytes) -> bytes:
        return pack_chunks(b"pushsim.aik-credential", aik_public, tpm_id)

    def to_bytes(self) -> bytes:
        return pack_chunks(
            self.aik_public,
            self.tpm_id,
            repr(self.issued_at).encode("ascii"),
            self.signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "AikCredential":
        aik_public, tpm_id, issued, sig = unpack_chunks(data, expected=4)
        return cls(aik_public, tpm_id, float(issued), sig)


@dataclass(frozen=True)
class BindingKeyCertificate:
    """CA-signed binding of a public key to a TPM and a required PCR state."""

    binding_public: bytes
    policy: PcrPolicy
    aik_id: bytes
    issued_at: float
    signature: bytes

    @staticmethod
    def signed_message(
        binding_public: bytes, policy: PcrPolicy, aik_id: bytes, issued_at: float
    ) -> bytes:
        return pack_chunks(
            b"pushsim.binding-certificate",
            binding_public,
            policy.to_bytes(),
            aik_id,
            repr(issued_at).encode("ascii"),
        )

    def to_bytes(self) -> bytes:
        return pack_chunks(
            self.binding_public,
            self.policy.to_bytes(),
            self.aik_id,
            repr(self.issued_at).encode("ascii"),
            self.signature,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "BindingKeyCertificate":
        pub, policy, aik_id, issued, sig = unpack_chunks(data, expected=5)
        return cls(pub, PcrPolicy.from_bytes(policy), aik_id, float(issued), sig)


def verify_aik_credential(pca_public: bytes, credential: AikCredential) -> bool:
    try:
        return crypto.verify(
            pca_public,
            AikCredential.signed_message(credential.aik_public, credential.tpm_id),
            credential.signature,
        )
    except crypto.MalformedKey:
        return False


def verify_binding_certificate(pca_public: bytes, cert: BindingKeyCertificate) -> bool:
    """True iff the signature is valid and the policy is well-formed.
    Returns False on any defect rather than raising."""
    try:
        if not cert.policy.selection:
            return False
        message = BindingKeyCertificate.signed_message(
            cert.binding_public, cert.policy, cert.aik_id, cert.issued_at
        )
        return crypto.verify(pca_public, message, cert.signature)
    except (crypto.MalformedKey, crypto.ParseError):
        return False


@dataclass
class PrivacyCa:
    keypair: KeyPair
    rng: SeededRng
    clock: Optional[object] = None  # anything with a .now attribute
    outstanding_nonces: set[bytes] = field(default_factory=set)
    issued: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, rng: SeededRng, clock=None, suite: str = crypto.DEFAULT_SUITE) -> "PrivacyCa":
        return cls(keypair=crypto.keygen_from_rng(rng, KeyRole.CA, suite), rng=rng, clock=clock)

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def _now(self) -> float:
        return float(self.clock.now) if self.clock is not None else 0.0

    def issue_nonce(self) -> bytes:
        """Fresh attestation nonce; valid for exactly one certification."""
        nonce = self.rng.random_bytes(QUOTE_NONCE_LEN)
        self.outstanding_nonces.add(nonce)
        return nonce

    def enroll_aik(
        self,
        aik_public: bytes,
        ek_public: bytes,
        ekc: bytes,
        manufacturer_root_pub: bytes,
    ) -> AikCredential:
        """Issue an identity credential iff the endorsement credential
        verifies under the manufacturer root."""
        try:
            ok = crypto.verify(manufacturer_root_pub, ek_public, ekc)
        except crypto.MalformedKey:
            ok = False
        if not ok:
            raise BadEkc("endorsement credential does not verify")
        tpm_id = sha256(ek_public)
        credential = AikCredential(
            aik_public=aik_public,
            tpm_id=tpm_id,
            issued_at=self._now(),
            signature=crypto.sign(
                self.keypair.private, AikCredential.signed_message(aik_public, tpm_id)
            ),
        )
        self.issued.append(
            {"kind": "aik_credential", "tpm_id": tpm_id.hex(), "issued_at": credential.issued_at}
        )
        return credential

    def certify_binding_key(
        self,
        binding_public: bytes,
        policy: PcrPolicy,
        aik_credential: AikCredential,
        quote: Quote,
        expected_nonce: bytes,
    ) -> BindingKeyCertificate:
        """Certify that ``binding_public`` is only usable in the state the
        policy names, on the evidence of a fresh quote."""
        if quote.nonce != expected_nonce or expected_nonce not in self.outstanding_nonces:
            raise StaleNonce("quote nonce was not issued for this exchange")
        self.outstanding_nonces.discard(expected_nonce)  # single use, even on failure
        if not verify_aik_credential(self.public, aik_credential):
            raise BadCredential("AIK credential does not verify")
        try:
            sig_ok = crypto.verify(
                aik_credential.aik_public,
                Quote.signed_message(quote.nonce, quote.selection, quote.composite),
                quote.signature,
            )
        except crypto.MalformedKey:
            sig_ok = False
        if not sig_ok:
            raise BadQuote("quote signature does not verify under the AIK")
        if frozenset(quote.selection) != policy.selection:
            raise PolicyMismatch("quote selection differs from policy selection")
        if policy.composite() != quote.composite:
            raise PolicyMismatch("quoted state differs from the claimed policy values")
        cert = BindingKeyCertificate(
            binding_public=binding_public,
            policy=policy,
            aik_id=quote.aik_id,
            issued_at=self._now(),
            signature=crypto.sign(
                self.keypair.private,
                BindingKeyCertificate.signed_message(
                    binding_public, policy, quote.aik_id, self._now()
                ),
            ),
        )
        self.issued.append(
            {
                "kind": "binding_certificate",
                "aik_id": quote.aik_id.hex(),
                "policy": cert.policy.to_dict(),
                "issued_at": cert.issued_at,
            }
        )
        return cert

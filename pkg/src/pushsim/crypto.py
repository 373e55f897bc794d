"""Deterministic, seedable cryptographic primitives.

Everything here is a pure function of its inputs plus an explicit
SeededRng handle, so whole simulations replay bit-exactly. Two cipher
suites are supported:

  * ``ed25519-x25519`` (default): Ed25519 signatures plus an
    X25519/AES-GCM hybrid envelope. Key material derives directly from
    32-byte seeds, which keeps key generation fast and reproducible.
  * ``rsa1024``: a single 1024-bit RSA key per pair, PKCS#1 v1.5
    signatures and a manually seeded OAEP key wrap. Slower; provided as
    a config preset for historical fidelity.

Serialized forms are length-prefixed binary; the canonical text form is
lowercase hex.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding as rsa_padding
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

DIGEST_LEN = 32
ZERO_DIGEST = bytes(DIGEST_LEN)

SUITE_ED25519_X25519 = "ed25519-x25519"
SUITE_RSA1024 = "rsa1024"
DEFAULT_SUITE = SUITE_ED25519_X25519

_RSA_BITS = 1024
_RSA_E = 65537


class CryptoError(Exception):
    """Base class for crypto-layer failures."""


class MalformedKey(CryptoError):
    """Key bytes do not parse as a key of any known suite."""


class AuthFailure(CryptoError):
    """Decryption or authentication failed (wrong key or tampered data)."""


class ParseError(CryptoError):
    """Serialized object is truncated or structurally invalid."""


class KeyRole(Enum):
    EK = "ek"
    AIK = "aik"
    BINDING = "binding"
    SESSION = "session"
    CA = "ca"


def sha256(data: bytes) -> bytes:
    """32-byte SHA-256 digest of ``data``."""
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

class SeededRng:
    """Deterministic byte stream: SHA-256 in counter mode over a seed key.

    ``fork(label)`` derives an independent child stream, so concurrent
    consumers never perturb each other's draws.
    """

    def __init__(self, seed: int | bytes):
        if isinstance(seed, int):
            seed = seed.to_bytes(8, "big", signed=False)
        self._key = sha256(b"pushsim.rng." + seed)
        self._counter = 0
        self._buffer = b""

    def random_bytes(self, n: int) -> bytes:
        while len(self._buffer) < n:
            block = sha256(self._key + self._counter.to_bytes(8, "big"))
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def fork(self, label: str) -> "SeededRng":
        child = SeededRng(b"")
        child._key = sha256(self._key + b".fork." + label.encode("utf-8"))
        child._counter = 0
        child._buffer = b""
        return child

    def state(self) -> tuple[bytes, int]:
        """Snapshot for persistence; buffered bytes are discarded."""
        return self._key, self._counter

    @classmethod
    def from_state(cls, key: bytes, counter: int) -> "SeededRng":
        rng = cls(b"")
        rng._key = key
        rng._counter = counter
        rng._buffer = b""
        return rng


# ---------------------------------------------------------------------------
# Length-prefixed serialization helpers
# ---------------------------------------------------------------------------

def pack_chunks(*chunks: bytes) -> bytes:
    """Concatenate chunks, each prefixed with a big-endian u32 length."""
    out = bytearray()
    for chunk in chunks:
        out += struct.pack(">I", len(chunk))
        out += chunk
    return bytes(out)


def unpack_chunks(data: bytes, expected: Optional[int] = None) -> list[bytes]:
    """Inverse of pack_chunks. Raises ParseError on truncation or trailing
    bytes, and when ``expected`` is given and the count differs."""
    chunks: list[bytes] = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError("truncated length prefix")
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        pos += 4
        if pos + length > len(data):
            raise ParseError("truncated chunk body")
        chunks.append(data[pos:pos + length])
        pos += length
    if expected is not None and len(chunks) != expected:
        raise ParseError(f"expected {expected} chunks, found {len(chunks)}")
    return chunks


# ---------------------------------------------------------------------------
# Key pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """Opaque public/private halves plus the identity digest of the public
    half. Both halves are self-describing (suite and role tags embedded)."""

    public: bytes
    private: bytes
    key_id: bytes

    @property
    def suite(self) -> str:
        return _parse_public(self.public)[0]

    @property
    def role(self) -> KeyRole:
        return KeyRole(_parse_public(self.public)[1])


def _parse_public(public: bytes) -> tuple[str, str, list[bytes]]:
    try:
        chunks = unpack_chunks(public)
        suite = chunks[0].decode("ascii")
        role = chunks[1].decode("ascii")
        KeyRole(role)
    except (ParseError, IndexError, ValueError, UnicodeDecodeError) as exc:
        raise MalformedKey("unparseable public key") from exc
    if suite == SUITE_ED25519_X25519:
        if len(chunks) != 4 or len(chunks[2]) != 32 or len(chunks[3]) != 32:
            raise MalformedKey("bad ed25519-x25519 public layout")
    elif suite == SUITE_RSA1024:
        if len(chunks) != 4:
            raise MalformedKey("bad rsa1024 public layout")
    else:
        raise MalformedKey(f"unknown suite {suite!r}")
    return suite, role, chunks[2:]


def _parse_private(private: bytes) -> tuple[str, str, list[bytes]]:
    try:
        chunks = unpack_chunks(private)
        suite = chunks[0].decode("ascii")
        role = chunks[1].decode("ascii")
        KeyRole(role)
    except (ParseError, IndexError, ValueError, UnicodeDecodeError) as exc:
        raise MalformedKey("unparseable private key") from exc
    if suite == SUITE_ED25519_X25519:
        if len(chunks) != 4 or len(chunks[2]) != 32 or len(chunks[3]) != 32:
            raise MalformedKey("bad ed25519-x25519 private layout")
    elif suite == SUITE_RSA1024:
        if len(chunks) != 7:
            raise MalformedKey("bad rsa1024 private layout")
    else:
        raise MalformedKey(f"unknown suite {suite!r}")
    return suite, role, chunks[2:]


def _int_to_bytes(n: int) -> bytes:
    return n.to_bytes((n.bit_length() + 7) // 8 or 1, "big")


def _deterministic_prime(stream: SeededRng, bits: int, avoid_factor: int) -> int:
    import gmpy2

    while True:
        candidate = int.from_bytes(stream.random_bytes(bits // 8), "big")
        candidate |= (1 << (bits - 1)) | (1 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and (p - 1) % avoid_factor != 0:
            return p


def _rsa_numbers_from_seed(seed: bytes) -> tuple[int, int, int, int, int]:
    """Deterministic (n, e, d, p, q) for a 1024-bit modulus."""
    import gmpy2

    stream = SeededRng(sha256(b"pushsim.rsa." + seed))
    while True:
        p = _deterministic_prime(stream, _RSA_BITS // 2, _RSA_E)
        q = _deterministic_prime(stream, _RSA_BITS // 2, _RSA_E)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != _RSA_BITS:
            continue
        phi = (p - 1) * (q - 1)
        if gmpy2.gcd(_RSA_E, phi) != 1:
            continue
        d = int(gmpy2.invert(_RSA_E, phi))
        return n, _RSA_E, d, p, q


def _rsa_private_obj(chunks: list[bytes]) -> rsa.RSAPrivateKey:
    n, e, d, p, q = (int.from_bytes(c, "big") for c in chunks)
    iqmp = rsa.rsa_crt_iqmp(p, q)
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=iqmp,
        public_numbers=rsa.RSAPublicNumbers(e=e, n=n),
    )
    return numbers.private_key()


def keygen(seed: bytes, role: KeyRole, suite: str = DEFAULT_SUITE) -> KeyPair:
    """Derive a key pair deterministically from a 32-byte seed and a role.

    Distinct roles yield unrelated keys for the same seed (domain
    separation on the derivation input).
    """
    if len(seed) != 32:
        raise ValueError("keygen seed must be exactly 32 bytes")
    material = sha256(
        b"pushsim.keygen." + suite.encode() + b"." + role.value.encode() + b"." + seed
    )
    suite_tag = suite.encode("ascii")
    role_tag = role.value.encode("ascii")

    if suite == SUITE_ED25519_X25519:
        sign_seed = sha256(material + b".sign")
        enc_seed = sha256(material + b".enc")
        sign_pub = (
            Ed25519PrivateKey.from_private_bytes(sign_seed)
            .public_key()
            .public_bytes_raw()
        )
        enc_pub = (
            X25519PrivateKey.from_private_bytes(enc_seed)
            .public_key()
            .public_bytes_raw()
        )
        public = pack_chunks(suite_tag, role_tag, sign_pub, enc_pub)
        private = pack_chunks(suite_tag, role_tag, sign_seed, enc_seed)
    elif suite == SUITE_RSA1024:
        n, e, d, p, q = _rsa_numbers_from_seed(material)
        public = pack_chunks(suite_tag, role_tag, _int_to_bytes(n), _int_to_bytes(e))
        private = pack_chunks(
            suite_tag,
            role_tag,
            _int_to_bytes(n),
            _int_to_bytes(e),
            _int_to_bytes(d),
            _int_to_bytes(p),
            _int_to_bytes(q),
        )
    else:
        raise ValueError(f"unknown cipher suite {suite!r}")
    return KeyPair(public=public, private=private, key_id=sha256(public))


def keygen_from_rng(rng: SeededRng, role: KeyRole, suite: str = DEFAULT_SUITE) -> KeyPair:
    return keygen(rng.random_bytes(32), role, suite)


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

def sign(private: bytes, message: bytes) -> bytes:
    suite, _, chunks = _parse_private(private)
    if suite == SUITE_ED25519_X25519:
        return Ed25519PrivateKey.from_private_bytes(chunks[0]).sign(message)
    key = _rsa_private_obj(chunks)
    return key.sign(message, rsa_padding.PKCS1v15(), hashes.SHA256())


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is valid for ``message`` under ``public``.

    A structurally invalid key raises MalformedKey; a bad signature just
    returns False.
    """
    suite, _, chunks = _parse_public(public)
    try:
        if suite == SUITE_ED25519_X25519:
            Ed25519PublicKey.from_public_bytes(chunks[0]).verify(signature, message)
        else:
            n = int.from_bytes(chunks[0], "big")
            e = int.from_bytes(chunks[1], "big")
            key = rsa.RSAPublicNumbers(e=e, n=n).public_key()
            key.verify(signature, message, rsa_padding.PKCS1v15(), hashes.SHA256())
        return True
    except InvalidSignature:
        return False
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# Symmetric AEAD (secure-channel layer)
# ---------------------------------------------------------------------------

def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise AuthFailure("AEAD authentication failed") from exc


# ---------------------------------------------------------------------------
# Hybrid envelope
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HybridCiphertext:
    """Asymmetrically wrapped session key plus an AES-GCM body.

    The wrapped key and nonce are bound into the body's AAD, so any
    single-bit change anywhere fails authentication on decrypt.
    """

    wrapped_key: bytes
    nonce: bytes
    body: bytes

    def to_bytes(self) -> bytes:
        return pack_chunks(self.wrapped_key, self.nonce, self.body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "HybridCiphertext":
        wrapped, nonce, body = unpack_chunks(data, expected=3)
        return cls(wrapped_key=wrapped, nonce=nonce, body=body)

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "HybridCiphertext":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise ParseError("invalid hex") from exc
        return cls.from_bytes(raw)


def _mgf1(seed: bytes, length: int) -> bytes:
    out = bytearray()
    counter = 0
    while len(out) < length:
        out += sha256(seed + struct.pack(">I", counter))
        counter += 1
    return bytes(out[:length])


def _oaep_encode(message: bytes, k: int, seed: bytes) -> bytes:
    # RSAES-OAEP (SHA-256, empty label) with caller-supplied seed so the
    # whole envelope stays deterministic under a SeededRng.
    h_len = DIGEST_LEN
    if len(message) > k - 2 * h_len - 2:
        raise CryptoError("message too long for OAEP")
    l_hash = sha256(b"")
    ps = bytes(k - len(message) - 2 * h_len - 2)
    db = l_hash + ps + b"\x01" + message
    db_mask = _mgf1(seed, k - h_len - 1)
    masked_db = bytes(a ^ b for a, b in zip(db, db_mask))
    seed_mask = _mgf1(masked_db, h_len)
    masked_seed = bytes(a ^ b for a, b in zip(seed, seed_mask))
    return b"\x00" + masked_seed + masked_db


def _oaep_decode(em: bytes, k: int) -> bytes:
    h_len = DIGEST_LEN
    if len(em) != k or em[0] != 0:
        raise AuthFailure("OAEP decode failed")
    masked_seed = em[1:1 + h_len]
    masked_db = em[1 + h_len:]
    seed_mask = _mgf1(masked_db, h_len)
    seed = bytes(a ^ b for a, b in zip(masked_seed, seed_mask))
    db_mask = _mgf1(seed, k - h_len - 1)
    db = bytes(a ^ b for a, b in zip(masked_db, db_mask))
    if db[:h_len] != sha256(b""):
        raise AuthFailure("OAEP decode failed")
    sep = db.find(b"\x01", h_len)
    if sep < 0 or any(db[h_len:sep]):
        raise AuthFailure("OAEP decode failed")
    return db[sep + 1:]


def hybrid_encrypt(public: bytes, plaintext: bytes, rng: SeededRng) -> HybridCiphertext:
    """Encrypt ``plaintext`` to the holder of ``public``'s private half."""
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    suite, _, chunks = _parse_public(public)
    if suite == SUITE_ED25519_X25519:
        recipient = X25519PublicKey.from_public_bytes(chunks[1])
        eph_priv = X25519PrivateKey.from_private_bytes(rng.random_bytes(32))
        wrapped_key = eph_priv.public_key().public_bytes_raw()
        shared = eph_priv.exchange(recipient)
        session_key = sha256(b"pushsim.hybrid." + shared + wrapped_key + chunks[1])
    else:
        n = int.from_bytes(chunks[0], "big")
        e = int.from_bytes(chunks[1], "big")
        k = (n.bit_length() + 7) // 8
        session_key = rng.random_bytes(32)
        em = _oaep_encode(session_key, k, rng.random_bytes(DIGEST_LEN))
        wrapped_key = pow(int.from_bytes(em, "big"), e, n).to_bytes(k, "big")
    nonce = rng.random_bytes(12)
    body = aead_seal(session_key, nonce, plaintext, aad=wrapped_key + nonce)
    return HybridCiphertext(wrapped_key=wrapped_key, nonce=nonce, body=body)


def hybrid_decrypt(private: bytes, ct: HybridCiphertext) -> bytes:
    """Inverse of hybrid_encrypt. Raises AuthFailure for a wrong key or any
    bit-level tampering, ParseError for structural damage."""
    suite, _, chunks = _parse_private(private)
    if suite == SUITE_ED25519_X25519:
        if len(ct.wrapped_key) != 32:
            raise ParseError("bad wrapped key length")
        priv = X25519PrivateKey.from_private_bytes(chunks[1])
        my_pub = priv.public_key().public_bytes_raw()
        shared = priv.exchange(X25519PublicKey.from_public_bytes(ct.wrapped_key))
        session_key = sha256(b"pushsim.hybrid." + shared + ct.wrapped_key + my_pub)
    else:
        n = int.from_bytes(chunks[0], "big")
        d = int.from_bytes(chunks[2], "big")
        k = (n.bit_length() + 7) // 8
        if len(ct.wrapped_key) != k:
            raise ParseError("bad wrapped key length")
        c = int.from_bytes(ct.wrapped_key, "big")
        if c >= n:
            raise AuthFailure("OAEP decode failed")
        em = pow(c, d, n).to_bytes(k, "big")
        session_key = _oaep_decode(em, k)
    return aead_open(session_key, ct.nonce, ct.body, aad=ct.wrapped_key + ct.nonce)
